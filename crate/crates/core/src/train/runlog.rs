//! Per-epoch training log: losses, wall time, parameter-block checksums.

use crate::rng::fnv1a64;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    /// Secondary dev metric (teacher-forced accuracy for LM pretraining).
    pub dev_metric: Option<f64>,
    pub wall_s: f64,
    pub checksums: Vec<(String, u64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub epochs: Vec<EpochRecord>,
}

impl RunLog {
    pub fn push(&mut self, rec: EpochRecord) {
        self.epochs.push(rec);
    }

    pub fn best_dev_loss(&self) -> Option<f64> {
        self.epochs
            .iter()
            .map(|e| e.dev_loss)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    /// One line per epoch, machine-grepable.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            let sums = e
                .checksums
                .iter()
                .map(|(n, c)| format!("{n}={c:016x}"))
                .collect::<Vec<_>>()
                .join(",");
            let metric = e
                .dev_metric
                .map(|m| format!(" dev_metric={m:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "epoch={} train_loss={:.9} dev_loss={:.9}{} wall_s={:.3} checksums={}\n",
                e.epoch, e.train_loss, e.dev_loss, metric, e.wall_s, sums
            ));
        }
        out
    }
}

/// FNV-1a over one parameter block's f64 bytes.
pub fn block_checksum(values: &[f64]) -> u64 {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}
