//! The CTC baseline: loss with exact gradients via the log-space
//! forward-backward recursion, best-path decoding, a brute-force
//! enumeration oracle, and the linear-head trainer.
//!
//! Blank is index 0 throughout; labels use 1..=V.

use crate::error::{Error, Result};
use crate::features::FrameSequence;
use crate::rng::substream_indexed;
use crate::train::adamw::{AdamW, TrainConfig};
use crate::train::runlog::{block_checksum, EpochRecord, RunLog};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use std::time::Instant;

pub const BLANK: usize = 0;

/// One CTC scoring problem: per-frame log-probabilities over blank+vocab
/// and a blank-free label sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcInstance {
    /// `T x (V+1)`, each row log-softmax normalized.
    pub log_probs: Array2<f64>,
    /// Labels over 1..=V.
    pub labels: Vec<usize>,
}

impl CtcInstance {
    pub fn new(log_probs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if log_probs.nrows() == 0 || log_probs.ncols() < 2 {
            return Err(Error::Precondition(
                "log_probs must be T x (V+1) with T >= 1, V >= 1".into(),
            ));
        }
        for (t, row) in log_probs.outer_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(Error::Precondition(format!("row {t} is all -inf")));
            }
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            if lse.abs() > 1e-9 {
                return Err(Error::Precondition(format!(
                    "row {t} is not log-softmax normalized (logsumexp {lse:.3e})"
                )));
            }
        }
        let v = log_probs.ncols() - 1;
        for &l in &labels {
            if l == BLANK || l > v {
                return Err(Error::Precondition(format!(
                    "label {l} outside 1..={v} (blank is reserved)"
                )));
            }
        }
        Ok(Self { log_probs, labels })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.nrows()
    }

    /// Minimal frame count that can emit the labels: L plus one separating
    /// blank per adjacent repeat.
    pub fn min_frames(&self) -> usize {
        let repeats = self.labels.windows(2).filter(|w| w[0] == w[1]).count();
        self.labels.len() + repeats
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Blank-extended label sequence: [blank, l1, blank, l2, ..., blank].
fn extended(labels: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(BLANK);
    for &l in labels {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Negative log-likelihood of the labels and the exact gradient with
/// respect to the unnormalized logits (`p - gamma` per frame/class).
pub fn ctc_loss(inst: &CtcInstance) -> Result<(f64, Array2<f64>)> {
    let t_len = inst.frames();
    if t_len < inst.min_frames() {
        return Err(Error::Infeasible {
            min_frames: inst.min_frames(),
            frames: t_len,
        });
    }
    let ext = extended(&inst.labels);
    let s_len = ext.len();
    let lp = &inst.log_probs;
    let neg = f64::NEG_INFINITY;

    // forward
    let mut alpha = Array2::from_elem((t_len, s_len), neg);
    alpha[[0, 0]] = lp[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = lp[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[[t - 1, s]];
            if s >= 1 {
                a = log_add(a, alpha[[t - 1, s - 1]]);
            }
            // skip transition allowed between distinct non-blank symbols
            if s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2] {
                a = log_add(a, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = a + lp[[t, ext[s]]];
        }
    }
    let mut log_p = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[[t_len - 1, s_len - 2]]);
    }
    if log_p == neg {
        // zero-probability labelling: infinite loss, no useful gradient
        return Ok((f64::INFINITY, Array2::zeros(lp.dim())));
    }

    // backward
    let mut beta = Array2::from_elem((t_len, s_len), neg);
    beta[[t_len - 1, s_len - 1]] = lp[[t_len - 1, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = lp[[t_len - 1, ext[s_len - 2]]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[[t + 1, s]];
            if s + 1 < s_len {
                b = log_add(b, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && ext[s] != BLANK && ext[s] != ext[s + 2] {
                b = log_add(b, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = b + lp[[t, ext[s]]];
        }
    }

    // symbol posteriors; gradient wrt logits is p - gamma
    let mut grad = Array2::zeros(lp.dim());
    for t in 0..t_len {
        let mut gamma = Array1::from_elem(lp.ncols(), neg);
        for s in 0..s_len {
            // alpha and beta both include the emission at t; divide once
            let occ = alpha[[t, s]] + beta[[t, s]] - lp[[t, ext[s]]] - log_p;
            gamma[ext[s]] = log_add(gamma[ext[s]], occ);
        }
        for k in 0..lp.ncols() {
            grad[[t, k]] = lp[[t, k]].exp() - gamma[k].exp();
        }
    }
    Ok((-log_p, grad))
}

/// Collapse a raw alignment path: merge adjacent repeats, drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Enumerate all `(V+1)^T` alignment paths and sum the probability of
/// those collapsing to the labels. Verification oracle for `ctc_loss`.
pub fn ctc_brute_force(inst: &CtcInstance) -> Result<f64> {
    let t_len = inst.frames();
    let classes = inst.log_probs.ncols();
    let total = (classes as f64).powi(t_len as i32);
    if total > 1e7 {
        return Err(Error::TooLarge(format!(
            "{classes}^{t_len} paths exceed the enumeration budget"
        )));
    }
    let mut acc = f64::NEG_INFINITY;
    let mut path = vec![0usize; t_len];
    loop {
        if collapse_path(&path) == inst.labels {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &k)| inst.log_probs[[t, k]])
                .sum();
            acc = log_add(acc, lp);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(-acc); // -inf -> +inf loss for impossible labels
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Per-frame argmax, merge repeats, strip blanks.
pub fn ctc_greedy_decode(log_probs: &Array2<f64>) -> Vec<usize> {
    let path: Vec<usize> = log_probs
        .outer_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for (k, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse_path(&path)
}

/// The baseline head: one affine layer from encoder frames to blank+vocab
/// log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CtcHead {
    /// `d_enc x (V+1)`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl CtcHead {
    pub fn init(d_enc: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = crate::rng::substream(seed, "ctc-head-init");
        use rand_distr::Distribution;
        let normal = rand_distr::Normal::new(0.0, (1.0 / d_enc as f64).sqrt()).unwrap();
        Self {
            w: Array2::from_shape_fn((d_enc, vocab + 1), |_| normal.sample(&mut rng)),
            b: Array1::zeros(vocab + 1),
        }
    }

    pub fn classes(&self) -> usize {
        self.b.len()
    }

    /// Frame logits -> row-wise log-softmax.
    pub fn log_probs(&self, frames: &FrameSequence) -> Result<Array2<f64>> {
        if frames.d_enc() != self.w.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "frames d_enc {} != head d_enc {}",
                frames.d_enc(),
                self.w.nrows()
            )));
        }
        let logits = frames.frames.dot(&self.w) + &self.b;
        Ok(log_softmax_rows(&logits))
    }

    pub fn block_names() -> Vec<String> {
        ["ctc.w", "ctc.b"].map(String::from).to_vec()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().unwrap(),
            self.b.as_slice_mut().unwrap(),
        ]
    }
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Training statistics for the baseline head.
#[derive(Debug, Clone, Default)]
pub struct CtcTrainStats {
    pub log: RunLog,
    /// Utterances skipped because their label sequence cannot fit in the
    /// available frames.
    pub skipped_infeasible: usize,
}

/// Train the linear head on frozen frames with CTC loss, mean-reduced over
/// utterances. Infeasible utterances are skipped and counted.
pub fn train_ctc_baseline(
    train: &[(FrameSequence, Vec<usize>)],
    dev: &[(FrameSequence, Vec<usize>)],
    vocab: usize,
    config: &TrainConfig,
) -> Result<(CtcHead, CtcTrainStats)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Precondition("CTC training corpus is empty".into()));
    }
    let d_enc = train[0].0.d_enc();
    let mut head = CtcHead::init(d_enc, vocab, config.seed);
    let mut opt = AdamW::new(
        CtcHead::block_names(),
        &[d_enc * (vocab + 1), vocab + 1],
        config.clone(),
    );
    let mut stats = CtcTrainStats::default();

    let mut skipped_once: Vec<bool> = vec![false; train.len()];
    for epoch in 0..config.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream_indexed(config.seed, "batch-order", epoch as u64));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut w_g = Array2::zeros(head.w.dim());
            let mut b_g = Array1::zeros(head.b.len());
            let mut batch_loss = 0.0;
            let mut n_used = 0usize;
            for &idx in batch {
                let (frames, labels) = &train[idx];
                let lp = head.log_probs(frames)?;
                let inst = CtcInstance::new(lp, labels.clone())?;
                match ctc_loss(&inst) {
                    Ok((loss, dlogits)) => {
                        batch_loss += loss;
                        // logits = frames @ w + b
                        w_g += &frames.frames.t().dot(&dlogits);
                        b_g += &dlogits.sum_axis(ndarray::Axis(0));
                        n_used += 1;
                    }
                    Err(Error::Infeasible { .. }) => {
                        if !skipped_once[idx] {
                            stats.skipped_infeasible += 1;
                            skipped_once[idx] = true;
                        }
                    }
                    Err(e) => return Err(e),
                }
            }
            if n_used == 0 {
                continue;
            }
            let inv = 1.0 / n_used as f64;
            w_g *= inv;
            b_g *= inv;
            loss_sum += batch_loss * inv;
            n_batches += 1;
            let mut blocks = head.blocks_mut();
            opt.step(
                &mut blocks,
                &[w_g.as_slice().unwrap(), b_g.as_slice().unwrap()],
            )?;
        }
        let mut dev_loss = 0.0;
        let mut n_dev = 0usize;
        for (frames, labels) in dev {
            let lp = head.log_probs(frames)?;
            let inst = CtcInstance::new(lp, labels.clone())?;
            if let Ok((loss, _)) = ctc_loss(&inst) {
                dev_loss += loss;
                n_dev += 1;
            }
        }
        stats.log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches.max(1) as f64,
            dev_loss: if n_dev > 0 {
                dev_loss / n_dev as f64
            } else {
                f64::NAN
            },
            dev_metric: None,
            wall_s: t0.elapsed().as_secs_f64(),
            checksums: CtcHead::block_names()
                .into_iter()
                .zip(head.blocks())
                .map(|(n, b)| (n, block_checksum(b)))
                .collect(),
        });
    }
    Ok((head, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    fn uniform_rows(t: usize, classes: usize) -> Array2<f64> {
        Array2::from_elem((t, classes), -(classes as f64).ln())
    }

    fn random_instance(t: usize, classes: usize, max_labels: usize, seed: u64) -> CtcInstance {
        let mut rng = substream(seed, "ctc-random");
        let logits = Array2::from_shape_fn((t, classes), |_| rng.gen_range(-2.0..2.0));
        let lp = log_softmax_rows(&logits);
        let l = rng.gen_range(1..=max_labels);
        let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(1..classes)).collect();
        CtcInstance {
            log_probs: lp,
            labels,
        }
    }

    #[test]
    fn single_frame_single_label_uniform() {
        let inst = CtcInstance::new(uniform_rows(1, 3), vec![1]).unwrap();
        let (loss, _) = ctc_loss(&inst).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn two_frame_enumeration_by_hand() {
        // paths collapsing to "a": aa, a-, -a; each path has prob 1/4
        let inst = CtcInstance::new(uniform_rows(2, 2), vec![1]).unwrap();
        let (loss, _) = ctc_loss(&inst).unwrap();
        assert!((loss - (-(0.75f64).ln())).abs() < 1e-12, "{loss}");
        assert!((loss - 0.2876820724517809).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_separating_blank() {
        let inst = CtcInstance::new(uniform_rows(2, 3), vec![1, 1]).unwrap();
        match ctc_loss(&inst) {
            Err(Error::Infeasible { min_frames, frames }) => {
                assert_eq!(min_frames, 3);
                assert_eq!(frames, 2);
            }
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn brute_force_matches_hand_examples() {
        for (t, classes, labels) in [(1usize, 3usize, vec![1usize]), (2, 2, vec![1])] {
            let inst = CtcInstance::new(uniform_rows(t, classes), labels).unwrap();
            let (loss, _) = ctc_loss(&inst).unwrap();
            let brute = ctc_brute_force(&inst).unwrap();
            assert!((loss - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn impossible_labels_give_infinite_loss() {
        // class 2 has probability zero everywhere
        let mut lp = uniform_rows(2, 3);
        for t in 0..2 {
            lp[[t, 2]] = f64::NEG_INFINITY;
            // renormalize rows over the two live classes
            lp[[t, 0]] = -(2f64).ln();
            lp[[t, 1]] = -(2f64).ln();
        }
        let inst = CtcInstance::new(lp, vec![2]).unwrap();
        let brute = ctc_brute_force(&inst).unwrap();
        assert_eq!(brute, f64::INFINITY);
        let (loss, _) = ctc_loss(&inst).unwrap();
        assert_eq!(loss, f64::INFINITY);
    }

    #[test]
    fn loss_matches_brute_force_on_seeded_suite() {
        let mut checked = 0;
        for seed in 0..220u64 {
            let t = 1 + (seed % 6) as usize;
            let classes = 2 + (seed % 3) as usize; // V+1 in 2..=4
            let inst = random_instance(t, classes, 3, seed);
            if inst.frames() < inst.min_frames() {
                continue;
            }
            let (loss, _) = ctc_loss(&inst).unwrap();
            let brute = ctc_brute_force(&inst).unwrap();
            assert!((loss - brute).abs() < 1e-9, "seed {seed}: {loss} vs {brute}");
            checked += 1;
        }
        assert!(checked >= 150, "only {checked} feasible instances");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::train::grad_check_multi;
        for seed in 0..6u64 {
            let t = 4 + (seed % 2) as usize;
            let classes = 3;
            let mut rng = substream(seed, "ctc-grad");
            let logits: Vec<f64> = (0..t * classes).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let labels: Vec<usize> = (0..2).map(|_| rng.gen_range(1..classes)).collect();

            let loss_of = |flat: &[f64]| {
                let lg = Array2::from_shape_vec((t, classes), flat.to_vec()).unwrap();
                let inst = CtcInstance {
                    log_probs: log_softmax_rows(&lg),
                    labels: labels.clone(),
                };
                ctc_loss(&inst).unwrap().0
            };
            let lg = Array2::from_shape_vec((t, classes), logits.clone()).unwrap();
            let inst = CtcInstance {
                log_probs: log_softmax_rows(&lg),
                labels: labels.clone(),
            };
            let (_, grad) = ctc_loss(&inst).unwrap();
            let analytic: Vec<f64> = grad.iter().copied().collect();
            let err = grad_check_multi(loss_of, &logits, &analytic, &[1e-6, 1e-5, 3e-4]);
            assert!(err < 1e-5, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn loss_invariant_under_vocab_permutation() {
        let inst = random_instance(5, 4, 3, 99);
        let (loss, _) = match ctc_loss(&inst) {
            Ok(x) => x,
            Err(_) => return, // infeasible draw; other seeds cover this path
        };
        // swap classes 1 and 3 consistently
        let mut lp = inst.log_probs.clone();
        for t in 0..lp.nrows() {
            let tmp = lp[[t, 1]];
            lp[[t, 1]] = lp[[t, 3]];
            lp[[t, 3]] = tmp;
        }
        let labels: Vec<usize> = inst
            .labels
            .iter()
            .map(|&l| match l {
                1 => 3,
                3 => 1,
                other => other,
            })
            .collect();
        let permuted = CtcInstance::new(lp, labels).unwrap();
        let (loss2, _) = ctc_loss(&permuted).unwrap();
        assert!((loss - loss2).abs() < 1e-12);
    }

    #[test]
    fn greedy_decode_collapse_rules() {
        let one_hot = |path: &[usize], classes: usize| {
            let mut lp = Array2::from_elem((path.len(), classes), -1e9);
            for (t, &k) in path.iter().enumerate() {
                lp[[t, k]] = 0.0;
            }
            lp
        };
        assert_eq!(ctc_greedy_decode(&one_hot(&[1, 1, 0, 1], 2)), vec![1, 1]);
        assert_eq!(ctc_greedy_decode(&one_hot(&[0, 0, 0], 2)), Vec::<usize>::new());
        assert_eq!(
            ctc_greedy_decode(&one_hot(&[1, 2, 2, 0, 2], 3)),
            vec![1, 2, 2]
        );
    }

    #[test]
    fn greedy_decode_of_one_hot_path_is_collapsed_path() {
        let mut rng = substream(7, "collapse");
        for _ in 0..50 {
            let t = rng.gen_range(1..8);
            let classes = rng.gen_range(2..5);
            let path: Vec<usize> = (0..t).map(|_| rng.gen_range(0..classes)).collect();
            let mut lp = Array2::from_elem((t, classes), -1e9);
            for (i, &k) in path.iter().enumerate() {
                lp[[i, k]] = 0.0;
            }
            assert_eq!(ctc_greedy_decode(&lp), collapse_path(&path));
        }
    }

    fn separable_corpus(
        n: usize,
        vocab: usize,
        frames_per_label: usize,
        seed: u64,
    ) -> Vec<(FrameSequence, Vec<usize>)> {
        // each label has a unique constant frame signature (scaled one-hot)
        let mut rng = substream(seed, "sep");
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..5);
                let mut labels: Vec<usize> = Vec::with_capacity(len);
                for _ in 0..len {
                    // avoid adjacent repeats so no blank is required
                    loop {
                        let l = rng.gen_range(1..=vocab);
                        if labels.last() != Some(&l) {
                            labels.push(l);
                            break;
                        }
                    }
                }
                let mut frames = Array2::zeros((labels.len() * frames_per_label, vocab));
                for (i, &l) in labels.iter().enumerate() {
                    for j in 0..frames_per_label {
                        frames[[i * frames_per_label + j, l - 1]] = 2.0;
                    }
                }
                (
                    FrameSequence {
                        frames,
                        frame_rate: 50.0,
                    },
                    labels,
                )
            })
            .collect()
    }

    #[test]
    fn separable_toy_trains_to_zero_train_wer() {
        let corpus = separable_corpus(24, 4, 3, 11);
        let config = TrainConfig {
            learning_rate: 3e-2,
            batch_size: 4,
            max_epochs: 60,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        };
        let (head, stats) = train_ctc_baseline(&corpus, &corpus[..4], 4, &config).unwrap();
        assert_eq!(stats.skipped_infeasible, 0);
        for (frames, labels) in &corpus {
            let lp = head.log_probs(frames).unwrap();
            assert_eq!(&ctc_greedy_decode(&lp), labels);
        }
    }

    #[test]
    fn zero_epoch_run_returns_initialization() {
        let corpus = separable_corpus(4, 3, 2, 1);
        let config = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (head, stats) = train_ctc_baseline(&corpus, &corpus, 3, &config).unwrap();
        let fresh = CtcHead::init(corpus[0].0.d_enc(), 3, config.seed);
        assert_eq!(head, fresh);
        assert_eq!(stats.skipped_infeasible, 0);
    }

    #[test]
    fn infeasible_utterances_are_skipped_and_counted() {
        let mut corpus = separable_corpus(6, 3, 2, 3);
        // make two utterances too short for their labels
        for idx in [0, 3] {
            let labels = vec![1, 1, 2, 2, 3, 3];
            let frames = Array2::zeros((2, 3));
            corpus[idx] = (
                FrameSequence {
                    frames,
                    frame_rate: 50.0,
                },
                labels,
            );
        }
        let config = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let (_, stats) = train_ctc_baseline(&corpus, &corpus[1..2], 3, &config).unwrap();
        assert_eq!(stats.skipped_infeasible, 2);
    }
}
