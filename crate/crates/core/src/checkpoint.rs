//! Single-file binary checkpoints: a small header (magic, version,
//! metadata, shape table), little-endian f64 parameter blobs, and a
//! trailing FNV-1a checksum over everything before it.

use crate::ctc::CtcHead;
use crate::error::{Error, Result};
use crate::model::lm::{lm_checksum, FrozenLm, LayerLora, LayerParams, LoraSet, TransformerLm};
use crate::model::projector::Projector;
use crate::model::prompt::PROMPT_TEMPLATE;
use crate::model::tokenizer::Tokenizer;
use crate::model::LmConfig;
use crate::rng::fnv1a64;
use crate::train::pipeline::TrainedConnector;
use ndarray::{Array1, Array2};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ALCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("checkpoint missing meta key '{key}'")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| Error::Format(format!("meta key '{key}' is not an integer")))
    }

    pub fn push_matrix(&mut self, name: &str, m: &Array2<f64>) {
        self.tensors.push((
            name.to_string(),
            vec![m.nrows(), m.ncols()],
            m.iter().copied().collect(),
        ));
    }

    pub fn push_vector(&mut self, name: &str, v: &Array1<f64>) {
        self.tensors
            .push((name.to_string(), vec![v.len()], v.to_vec()));
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let (dims, data) = self.tensor(name)?;
        if dims.len() != 2 {
            return Err(Error::Format(format!("tensor '{name}' is not a matrix")));
        }
        Array2::from_shape_vec((dims[0], dims[1]), data.to_vec())
            .map_err(|e| Error::Format(format!("tensor '{name}': {e}")))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let (dims, data) = self.tensor(name)?;
        if dims.len() != 1 {
            return Err(Error::Format(format!("tensor '{name}' is not a vector")));
        }
        Ok(Array1::from_vec(data.to_vec()))
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f64])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, d, v)| (d.as_slice(), v.as_slice()))
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u16).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, dims, _) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for (_, _, data) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 8 {
            return Err(Error::Format("checkpoint shorter than header".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        let actual = fnv1a64(body);
        if stored != actual {
            return Err(Error::Format(format!(
                "checkpoint checksum mismatch: stored {stored:#x}, computed {actual:#x}"
            )));
        }
        let mut at = 0usize;
        let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
            if *at + n > body.len() {
                return Err(Error::Format("checkpoint truncated".into()));
            }
            let s = &body[*at..*at + n];
            *at += n;
            Ok(s)
        };
        if take(&mut at, 4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Unsupported(format!(
                "checkpoint version {version} (supported: {CHECKPOINT_VERSION})"
            )));
        }
        let n_meta = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let kl = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
            let k = String::from_utf8_lossy(take(&mut at, kl)?).into_owned();
            let vl = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
            let v = String::from_utf8_lossy(take(&mut at, vl)?).into_owned();
            meta.insert(k, v);
        }
        let n_tensors = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let mut shapes = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let nl = u16::from_le_bytes(take(&mut at, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8_lossy(take(&mut at, nl)?).into_owned();
            let ndim = take(&mut at, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize);
            }
            shapes.push((name, dims));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for (name, dims) in shapes {
            let count: usize = dims.iter().product();
            let raw = take(&mut at, count * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, dims, data));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn tokenizer_tag(t: &Tokenizer) -> String {
    match t {
        Tokenizer::Chars => "chars".into(),
        Tokenizer::RawIds { vocab_size } => format!("raw:{vocab_size}"),
    }
}

fn parse_tokenizer(tag: &str) -> Result<Tokenizer> {
    if tag == "chars" {
        return Ok(Tokenizer::Chars);
    }
    if let Some(v) = tag.strip_prefix("raw:") {
        let vocab_size: usize = v
            .parse()
            .map_err(|_| Error::Format(format!("bad tokenizer tag '{tag}'")))?;
        return Ok(Tokenizer::RawIds { vocab_size });
    }
    Err(Error::Format(format!("unknown tokenizer tag '{tag}'")))
}

/// Serialize a frozen LM, recording its parameter checksum and the exact
/// prompt template bytes.
pub fn save_frozen_lm(frozen: &FrozenLm) -> Checkpoint {
    let lm = frozen.lm();
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "frozen_lm");
    ck.set_meta("vocab_size", lm.config.vocab_size);
    ck.set_meta("d_model", lm.config.d_model);
    ck.set_meta("n_layers", lm.config.n_layers);
    ck.set_meta("n_heads", lm.config.n_heads);
    ck.set_meta("d_ff", lm.config.d_ff);
    ck.set_meta("max_seq_len", lm.config.max_seq_len);
    ck.set_meta("tokenizer", tokenizer_tag(&lm.tokenizer));
    ck.set_meta("param_checksum", format!("{:#x}", frozen.checksum()));
    ck.set_meta("prompt_template", PROMPT_TEMPLATE);
    ck.push_matrix("embed", &lm.embed);
    ck.push_matrix("pos", &lm.pos);
    for (i, l) in lm.layers.iter().enumerate() {
        ck.push_vector(&format!("layer{i}.ln1_g"), &l.ln1_g);
        ck.push_vector(&format!("layer{i}.ln1_b"), &l.ln1_b);
        ck.push_matrix(&format!("layer{i}.wq"), &l.wq);
        ck.push_matrix(&format!("layer{i}.wk"), &l.wk);
        ck.push_matrix(&format!("layer{i}.wv"), &l.wv);
        ck.push_matrix(&format!("layer{i}.wo"), &l.wo);
        ck.push_vector(&format!("layer{i}.ln2_g"), &l.ln2_g);
        ck.push_vector(&format!("layer{i}.ln2_b"), &l.ln2_b);
        ck.push_matrix(&format!("layer{i}.w1"), &l.w1);
        ck.push_vector(&format!("layer{i}.b1"), &l.b1);
        ck.push_matrix(&format!("layer{i}.w2"), &l.w2);
        ck.push_vector(&format!("layer{i}.b2"), &l.b2);
    }
    ck.push_vector("lnf_g", &lm.lnf_g);
    ck.push_vector("lnf_b", &lm.lnf_b);
    ck
}

pub fn load_frozen_lm(ck: &Checkpoint) -> Result<FrozenLm> {
    if ck.meta_str("kind")? != "frozen_lm" {
        return Err(Error::Format("not a frozen LM checkpoint".into()));
    }
    let config = LmConfig {
        vocab_size: ck.meta_usize("vocab_size")?,
        d_model: ck.meta_usize("d_model")?,
        n_layers: ck.meta_usize("n_layers")?,
        n_heads: ck.meta_usize("n_heads")?,
        d_ff: ck.meta_usize("d_ff")?,
        max_seq_len: ck.meta_usize("max_seq_len")?,
    };
    let tokenizer = parse_tokenizer(ck.meta_str("tokenizer")?)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_g: ck.vector(&format!("layer{i}.ln1_g"))?,
            ln1_b: ck.vector(&format!("layer{i}.ln1_b"))?,
            wq: ck.matrix(&format!("layer{i}.wq"))?,
            wk: ck.matrix(&format!("layer{i}.wk"))?,
            wv: ck.matrix(&format!("layer{i}.wv"))?,
            wo: ck.matrix(&format!("layer{i}.wo"))?,
            ln2_g: ck.vector(&format!("layer{i}.ln2_g"))?,
            ln2_b: ck.vector(&format!("layer{i}.ln2_b"))?,
            w1: ck.matrix(&format!("layer{i}.w1"))?,
            b1: ck.vector(&format!("layer{i}.b1"))?,
            w2: ck.matrix(&format!("layer{i}.w2"))?,
            b2: ck.vector(&format!("layer{i}.b2"))?,
        });
    }
    let lm = TransformerLm {
        config,
        tokenizer,
        embed: ck.matrix("embed")?,
        pos: ck.matrix("pos")?,
        layers,
        lnf_g: ck.vector("lnf_g")?,
        lnf_b: ck.vector("lnf_b")?,
    };
    let frozen = FrozenLm::freeze(lm);
    let recorded = ck.meta_str("param_checksum")?;
    let actual = format!("{:#x}", lm_checksum(frozen.lm()));
    if recorded != actual {
        return Err(Error::Format(format!(
            "frozen LM parameter checksum mismatch: file says {recorded}, loaded {actual}"
        )));
    }
    Ok(frozen)
}

/// Serialize a trained connector (projector plus optional adapters).
pub fn save_connector(c: &TrainedConnector) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "connector");
    ck.set_meta("trained", c.projector.trained);
    ck.set_meta("prompt_template", PROMPT_TEMPLATE);
    ck.set_meta("best_dev_loss", format!("{:.12e}", c.best_dev_loss));
    ck.push_matrix("w1", &c.projector.w1);
    ck.push_vector("b1", &c.projector.b1);
    ck.push_matrix("w2", &c.projector.w2);
    ck.push_vector("b2", &c.projector.b2);
    if let Some(set) = &c.lora {
        ck.set_meta("lora_layers", set.layers.len());
        ck.set_meta("lora_rank", set.layers[0].q.r);
        ck.set_meta("lora_alpha", set.layers[0].q.alpha);
        for (i, l) in set.layers.iter().enumerate() {
            ck.push_matrix(&format!("lora{i}.q.a"), &l.q.a);
            ck.push_matrix(&format!("lora{i}.q.b"), &l.q.b);
            ck.push_matrix(&format!("lora{i}.v.a"), &l.v.a);
            ck.push_matrix(&format!("lora{i}.v.b"), &l.v.b);
        }
    }
    ck
}

pub fn load_connector(ck: &Checkpoint) -> Result<(Projector, Option<LoraSet>)> {
    if ck.meta_str("kind")? != "connector" {
        return Err(Error::Format("not a connector checkpoint".into()));
    }
    let projector = Projector {
        w1: ck.matrix("w1")?,
        b1: ck.vector("b1")?,
        w2: ck.matrix("w2")?,
        b2: ck.vector("b2")?,
        trained: ck.meta_str("trained")? == "true",
    };
    let lora = if let Ok(n) = ck.meta_usize("lora_layers") {
        let rank = ck.meta_usize("lora_rank")?;
        let alpha: f64 = ck
            .meta_str("lora_alpha")?
            .parse()
            .map_err(|_| Error::Format("bad lora_alpha".into()))?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            layers.push(LayerLora {
                q: crate::model::LoraAdapter {
                    a: ck.matrix(&format!("lora{i}.q.a"))?,
                    b: ck.matrix(&format!("lora{i}.q.b"))?,
                    alpha,
                    r: rank,
                },
                v: crate::model::LoraAdapter {
                    a: ck.matrix(&format!("lora{i}.v.a"))?,
                    b: ck.matrix(&format!("lora{i}.v.b"))?,
                    alpha,
                    r: rank,
                },
            });
        }
        Some(LoraSet { layers })
    } else {
        None
    };
    Ok((projector, lora))
}

/// Serialize the CTC baseline head; the blank index convention is recorded
/// in the header.
pub fn save_ctc_head(head: &CtcHead) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set_meta("kind", "ctc_head");
    ck.set_meta("blank_index", crate::ctc::BLANK);
    ck.set_meta("classes", head.classes());
    ck.push_matrix("w", &head.w);
    ck.push_vector("b", &head.b);
    ck
}

pub fn load_ctc_head(ck: &Checkpoint) -> Result<CtcHead> {
    if ck.meta_str("kind")? != "ctc_head" {
        return Err(Error::Format("not a CTC head checkpoint".into()));
    }
    if ck.meta_usize("blank_index")? != crate::ctc::BLANK {
        return Err(Error::Unsupported(
            "checkpoint uses a different blank index convention".into(),
        ));
    }
    Ok(CtcHead {
        w: ck.matrix("w")?,
        b: ck.vector("b")?,
    })
}
