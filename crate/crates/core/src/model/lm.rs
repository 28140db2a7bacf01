//! A tiny decoder-only causal transformer with hand-written backprop.
//!
//! Pre-norm blocks, learned positional embeddings, multi-head attention
//! without projection biases, a ReLU MLP, and an output head tied to the
//! input embedding table. Everything runs in f64; gradients are exact and
//! checked against central finite differences in the test suite.
//!
//! LoRA adapters attach to the attention query and value projections. With
//! zero-initialized B matrices the adapted model is bit-identical to the
//! base model, which is what makes step-0 freeze checks sharp.

use crate::error::{Error, Result};
use crate::model::lora::{lora_delta_apply, LoraAdapter};
use crate::rng::{fnv1a64, substream};
use ndarray::{s, Array1, Array2};
use rand_distr::{Distribution, Normal};

use super::tokenizer::Tokenizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 1024,
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// One pre-norm transformer block. Weights use the row-vector convention:
/// `out = x @ w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm {
    pub config: LmConfig,
    pub tokenizer: Tokenizer,
    pub embed: Array2<f64>,
    pub pos: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
}

impl TransformerLm {
    pub fn new(config: LmConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        if config.d_model % config.n_heads != 0 {
            return Err(Error::Precondition(format!(
                "d_model {} not divisible by n_heads {}",
                config.d_model, config.n_heads
            )));
        }
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Precondition(format!(
                "tokenizer vocab {} != config vocab {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut rng = substream(seed, "lm-init");
        let gauss = |rng: &mut rand_chacha::ChaCha12Rng, sd: f64| {
            Normal::new(0.0, sd).unwrap().sample(rng)
        };
        let d = config.d_model;
        // GPT-2 style init; residual-facing projections scaled down
        let resid_sd = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mat = |rng: &mut rand_chacha::ChaCha12Rng, r: usize, c: usize, sd: f64| {
            Array2::from_shape_fn((r, c), |_| gauss(rng, sd))
        };
        let embed = mat(&mut rng, config.vocab_size, d, 0.02);
        let pos = mat(&mut rng, config.max_seq_len, d, 0.01);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: mat(&mut rng, d, d, 0.02),
                wk: mat(&mut rng, d, d, 0.02),
                wv: mat(&mut rng, d, d, 0.02),
                wo: mat(&mut rng, d, d, resid_sd),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: mat(&mut rng, d, config.d_ff, 0.02),
                b1: Array1::zeros(config.d_ff),
                w2: mat(&mut rng, config.d_ff, d, resid_sd),
                b2: Array1::zeros(d),
            });
        }
        Ok(Self {
            config,
            tokenizer,
            embed,
            pos,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
        })
    }

    /// Input embeddings for a token sequence (no positional part; the
    /// forward pass adds positions).
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.config.d_model));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::Precondition(format!(
                    "unknown token id {id} (vocab size {})",
                    self.config.vocab_size
                )));
            }
            out.row_mut(i).assign(&self.embed.row(id as usize));
        }
        Ok(out)
    }
}

/// Named views over every parameter block, canonical order. The same order
/// drives the optimizer, the checkpoint format, and the checksum.
pub fn lm_block_names(config: &LmConfig) -> Vec<String> {
    let mut names = vec!["embed".to_string(), "pos".to_string()];
    for l in 0..config.n_layers {
        for part in [
            "ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
        ] {
            names.push(format!("layer{l}.{part}"));
        }
    }
    names.push("lnf_g".into());
    names.push("lnf_b".into());
    names
}

pub fn lm_blocks(lm: &TransformerLm) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = vec![
        lm.embed.as_slice().unwrap(),
        lm.pos.as_slice().unwrap(),
    ];
    for l in &lm.layers {
        out.push(l.ln1_g.as_slice().unwrap());
        out.push(l.ln1_b.as_slice().unwrap());
        out.push(l.wq.as_slice().unwrap());
        out.push(l.wk.as_slice().unwrap());
        out.push(l.wv.as_slice().unwrap());
        out.push(l.wo.as_slice().unwrap());
        out.push(l.ln2_g.as_slice().unwrap());
        out.push(l.ln2_b.as_slice().unwrap());
        out.push(l.w1.as_slice().unwrap());
        out.push(l.b1.as_slice().unwrap());
        out.push(l.w2.as_slice().unwrap());
        out.push(l.b2.as_slice().unwrap());
    }
    out.push(lm.lnf_g.as_slice().unwrap());
    out.push(lm.lnf_b.as_slice().unwrap());
    out
}

pub fn lm_blocks_mut(lm: &mut TransformerLm) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    out.push(lm.embed.as_slice_mut().unwrap());
    out.push(lm.pos.as_slice_mut().unwrap());
    for l in &mut lm.layers {
        out.push(l.ln1_g.as_slice_mut().unwrap());
        out.push(l.ln1_b.as_slice_mut().unwrap());
        out.push(l.wq.as_slice_mut().unwrap());
        out.push(l.wk.as_slice_mut().unwrap());
        out.push(l.wv.as_slice_mut().unwrap());
        out.push(l.wo.as_slice_mut().unwrap());
        out.push(l.ln2_g.as_slice_mut().unwrap());
        out.push(l.ln2_b.as_slice_mut().unwrap());
        out.push(l.w1.as_slice_mut().unwrap());
        out.push(l.b1.as_slice_mut().unwrap());
        out.push(l.w2.as_slice_mut().unwrap());
        out.push(l.b2.as_slice_mut().unwrap());
    }
    out.push(lm.lnf_g.as_slice_mut().unwrap());
    out.push(lm.lnf_b.as_slice_mut().unwrap());
    out
}

/// FNV-1a over every parameter byte in canonical block order.
pub fn lm_checksum(lm: &TransformerLm) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for block in lm_blocks(lm) {
        for v in block {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
    }
    // fold in the shape so a reshaped model never collides silently
    h ^ fnv1a64(format!("{:?}", lm.config).as_bytes())
}

/// The frozen consumer of speech token embeddings. Construction records a
/// parameter checksum; `verify` re-derives it so training harnesses can
/// assert the model was untouched.
#[derive(Debug, Clone)]
pub struct FrozenLm {
    lm: TransformerLm,
    checksum: u64,
}

impl FrozenLm {
    pub fn freeze(lm: TransformerLm) -> Self {
        let checksum = lm_checksum(&lm);
        Self { lm, checksum }
    }

    pub fn lm(&self) -> &TransformerLm {
        &self.lm
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn verify(&self) -> Result<()> {
        let now = lm_checksum(&self.lm);
        if now != self.checksum {
            return Err(Error::TrainingFailed(format!(
                "frozen LM parameters changed: checksum {:#x} -> {now:#x}",
                self.checksum
            )));
        }
        Ok(())
    }
}

/// Per-layer LoRA attachments (query and value projections).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraSet {
    pub layers: Vec<LayerLora>,
}

impl LoraSet {
    /// Canonical placement: rank-`r` adapters on every layer's q and v,
    /// A Gaussian(0.02), B zero so step 0 reproduces the frozen model.
    pub fn init(config: &LmConfig, rank: usize, alpha: f64, seed: u64) -> Self {
        let mut rng = substream(seed, "lora-init");
        let normal = Normal::new(0.0, 0.02).unwrap();
        let d = config.d_model;
        let layers = (0..config.n_layers)
            .map(|_| LayerLora {
                q: LoraAdapter {
                    a: Array2::from_shape_fn((rank, d), |_| normal.sample(&mut rng)),
                    b: Array2::zeros((d, rank)),
                    alpha,
                    r: rank,
                },
                v: LoraAdapter {
                    a: Array2::from_shape_fn((rank, d), |_| normal.sample(&mut rng)),
                    b: Array2::zeros((d, rank)),
                    alpha,
                    r: rank,
                },
            })
            .collect();
        Self { layers }
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.layers.len() {
            names.push(format!("lora{l}.q.a"));
            names.push(format!("lora{l}.q.b"));
            names.push(format!("lora{l}.v.a"));
            names.push(format!("lora{l}.v.b"));
        }
        names
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.q.a.as_slice().unwrap(),
                    l.q.b.as_slice().unwrap(),
                    l.v.a.as_slice().unwrap(),
                    l.v.b.as_slice().unwrap(),
                ]
            })
            .collect()
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.q.a.as_slice_mut().unwrap());
            out.push(l.q.b.as_slice_mut().unwrap());
            out.push(l.v.a.as_slice_mut().unwrap());
            out.push(l.v.b.as_slice_mut().unwrap());
        }
        out
    }
}

struct LayerCache {
    xhat1: Array2<f64>,
    invstd1: Array1<f64>,
    n1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    lora_tq: Option<Array2<f64>>,
    lora_tv: Option<Array2<f64>>,
    att_p: Vec<Array2<f64>>,
    att_o: Array2<f64>,
    xhat2: Array2<f64>,
    invstd2: Array1<f64>,
    n2: Array2<f64>,
    f1_pre: Array2<f64>,
}

/// Activations retained for the backward pass.
pub struct LmCache {
    layers: Vec<LayerCache>,
    xhatf: Array2<f64>,
    invstdf: Array1<f64>,
    nf: Array2<f64>,
}

fn layernorm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let t = x.nrows();
    let d = x.ncols();
    let mut xhat = Array2::zeros((t, d));
    let mut invstd = Array1::zeros(t);
    let mut out = Array2::zeros((t, d));
    for i in 0..t {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        invstd[i] = is;
        for j in 0..d {
            let xh = (x[[i, j]] - mean) * is;
            xhat[[i, j]] = xh;
            out[[i, j]] = xh * g[j] + b[j];
        }
    }
    (out, xhat, invstd)
}

/// dL/dx for layernorm given dL/d(normalized-and-affined output).
fn layernorm_backward(
    dout: &Array2<f64>,
    xhat: &Array2<f64>,
    invstd: &Array1<f64>,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let t = dout.nrows();
    let d = dout.ncols();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dout[[i, j]] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[[i, j]];
            dg[j] += dout[[i, j]] * xhat[[i, j]];
            db[j] += dout[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dout[[i, j]] * g[j];
            dx[[i, j]] = invstd[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Full forward pass over an embedding sequence. Returns logits `T x V`
/// and, when `keep_cache`, the activations needed by `lm_backward`.
pub fn lm_forward(
    lm: &TransformerLm,
    lora: Option<&LoraSet>,
    input: &Array2<f64>,
    keep_cache: bool,
) -> Result<(Array2<f64>, Option<LmCache>)> {
    let t = input.nrows();
    let d = lm.config.d_model;
    if input.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "input width {} != d_model {d}",
            input.ncols()
        )));
    }
    if t > lm.config.max_seq_len {
        return Err(Error::Precondition(format!(
            "sequence length {t} exceeds max context {}",
            lm.config.max_seq_len
        )));
    }
    if let Some(set) = lora {
        if set.layers.len() != lm.config.n_layers {
            return Err(Error::ShapeMismatch(
                "LoRA set has wrong number of layers".into(),
            ));
        }
    }
    let heads = lm.config.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = input + &lm.pos.slice(s![0..t, ..]);
    let mut caches: Vec<LayerCache> = Vec::new();

    for (li, layer) in lm.layers.iter().enumerate() {
        let x_in = x.clone();
        let (n1, xhat1, invstd1) = layernorm(&x, &layer.ln1_g, &layer.ln1_b);

        let mut q = n1.dot(&layer.wq);
        let k = n1.dot(&layer.wk);
        let mut v = n1.dot(&layer.wv);
        let mut lora_tq = None;
        let mut lora_tv = None;
        if let Some(set) = lora {
            let lq = &set.layers[li].q;
            let (dq, tq) = lora_delta_apply(&n1, lq);
            q += &dq;
            lora_tq = Some(tq);
            let lv = &set.layers[li].v;
            let (dv, tv) = lora_delta_apply(&n1, lv);
            v += &dv;
            lora_tv = Some(tv);
        }

        let mut att_p = Vec::with_capacity(heads);
        let mut att_o = Array2::zeros((t, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut p = Array2::zeros((t, t));
            for i in 0..t {
                // causal: keys 0..=i
                let mut max = f64::NEG_INFINITY;
                let mut scores = vec![0.0; i + 1];
                for (j, s_ij) in scores.iter_mut().enumerate() {
                    *s_ij = qh.row(i).dot(&kh.row(j)) * scale;
                    if *s_ij > max {
                        max = *s_ij;
                    }
                }
                let mut denom = 0.0;
                for s_ij in &mut scores {
                    *s_ij = (*s_ij - max).exp();
                    denom += *s_ij;
                }
                for (j, s_ij) in scores.iter().enumerate() {
                    p[[i, j]] = s_ij / denom;
                }
            }
            let oh = p.dot(&vh);
            att_o.slice_mut(cols).assign(&oh);
            att_p.push(p);
        }
        let attn = att_o.dot(&layer.wo);
        let x_mid = &x_in + &attn;

        let (n2, xhat2, invstd2) = layernorm(&x_mid, &layer.ln2_g, &layer.ln2_b);
        let f1_pre = n2.dot(&layer.w1) + &layer.b1;
        let f1 = f1_pre.mapv(|v| v.max(0.0));
        let f2 = f1.dot(&layer.w2) + &layer.b2;
        x = &x_mid + &f2;

        if keep_cache {
            caches.push(LayerCache {
                xhat1,
                invstd1,
                n1,
                q,
                k,
                v,
                lora_tq,
                lora_tv,
                att_p,
                att_o,
                xhat2,
                invstd2,
                n2,
                f1_pre,
            });
        }
    }

    let x_last = x;
    let (nf, xhatf, invstdf) = layernorm(&x_last, &lm.lnf_g, &lm.lnf_b);
    let logits = nf.dot(&lm.embed.t());

    let cache = keep_cache.then_some(LmCache {
        layers: caches,
        xhatf,
        invstdf,
        nf,
    });
    Ok((logits, cache))
}

/// Gradients for every LM parameter block, same shapes as the parameters.
pub struct LmGrads {
    pub embed: Array2<f64>,
    pub pos: Array2<f64>,
    pub layers: Vec<LayerGrads>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
}

pub struct LayerGrads {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl LmGrads {
    pub fn zeros(lm: &TransformerLm) -> Self {
        let c = &lm.config;
        Self {
            embed: Array2::zeros((c.vocab_size, c.d_model)),
            pos: Array2::zeros((c.max_seq_len, c.d_model)),
            layers: (0..c.n_layers)
                .map(|_| LayerGrads {
                    ln1_g: Array1::zeros(c.d_model),
                    ln1_b: Array1::zeros(c.d_model),
                    wq: Array2::zeros((c.d_model, c.d_model)),
                    wk: Array2::zeros((c.d_model, c.d_model)),
                    wv: Array2::zeros((c.d_model, c.d_model)),
                    wo: Array2::zeros((c.d_model, c.d_model)),
                    ln2_g: Array1::zeros(c.d_model),
                    ln2_b: Array1::zeros(c.d_model),
                    w1: Array2::zeros((c.d_model, c.d_ff)),
                    b1: Array1::zeros(c.d_ff),
                    w2: Array2::zeros((c.d_ff, c.d_model)),
                    b2: Array1::zeros(c.d_model),
                })
                .collect(),
            lnf_g: Array1::zeros(c.d_model),
            lnf_b: Array1::zeros(c.d_model),
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.embed.as_slice().unwrap(),
            self.pos.as_slice().unwrap(),
        ];
        for l in &self.layers {
            out.push(l.ln1_g.as_slice().unwrap());
            out.push(l.ln1_b.as_slice().unwrap());
            out.push(l.wq.as_slice().unwrap());
            out.push(l.wk.as_slice().unwrap());
            out.push(l.wv.as_slice().unwrap());
            out.push(l.wo.as_slice().unwrap());
            out.push(l.ln2_g.as_slice().unwrap());
            out.push(l.ln2_b.as_slice().unwrap());
            out.push(l.w1.as_slice().unwrap());
            out.push(l.b1.as_slice().unwrap());
            out.push(l.w2.as_slice().unwrap());
            out.push(l.b2.as_slice().unwrap());
        }
        out.push(self.lnf_g.as_slice().unwrap());
        out.push(self.lnf_b.as_slice().unwrap());
        out
    }

    pub fn accumulate(&mut self, other: &LmGrads) {
        self.embed += &other.embed;
        self.pos += &other.pos;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.ln1_g += &b.ln1_g;
            a.ln1_b += &b.ln1_b;
            a.wq += &b.wq;
            a.wk += &b.wk;
            a.wv += &b.wv;
            a.wo += &b.wo;
            a.ln2_g += &b.ln2_g;
            a.ln2_b += &b.ln2_b;
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
        }
        self.lnf_g += &other.lnf_g;
        self.lnf_b += &other.lnf_b;
    }

    pub fn scale(&mut self, f: f64) {
        self.embed *= f;
        self.pos *= f;
        for l in &mut self.layers {
            l.ln1_g *= f;
            l.ln1_b *= f;
            l.wq *= f;
            l.wk *= f;
            l.wv *= f;
            l.wo *= f;
            l.ln2_g *= f;
            l.ln2_b *= f;
            l.w1 *= f;
            l.b1 *= f;
            l.w2 *= f;
            l.b2 *= f;
        }
        self.lnf_g *= f;
        self.lnf_b *= f;
    }
}

/// Per-adapter gradients, aligned with `LoraSet::blocks`.
pub struct LoraGrads {
    pub layers: Vec<(Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>)>, // (q.a, q.b, v.a, v.b)
}

impl LoraGrads {
    pub fn zeros(set: &LoraSet) -> Self {
        Self {
            layers: set
                .layers
                .iter()
                .map(|l| {
                    (
                        Array2::zeros(l.q.a.dim()),
                        Array2::zeros(l.q.b.dim()),
                        Array2::zeros(l.v.a.dim()),
                        Array2::zeros(l.v.b.dim()),
                    )
                })
                .collect(),
        }
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|(qa, qb, va, vb)| {
                [
                    qa.as_slice().unwrap(),
                    qb.as_slice().unwrap(),
                    va.as_slice().unwrap(),
                    vb.as_slice().unwrap(),
                ]
            })
            .collect()
    }

    pub fn accumulate(&mut self, other: &LoraGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.0 += &b.0;
            a.1 += &b.1;
            a.2 += &b.2;
            a.3 += &b.3;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for l in &mut self.layers {
            l.0 *= f;
            l.1 *= f;
            l.2 *= f;
            l.3 *= f;
        }
    }
}

pub struct BackwardResult {
    /// Gradient with respect to the input embedding rows.
    pub d_input: Array2<f64>,
    pub lm_grads: Option<LmGrads>,
    pub lora_grads: Option<LoraGrads>,
}

/// Reverse pass matching `lm_forward`. `input_token_ids` marks rows of the
/// input that were looked up from the embedding table (Some(id)); their
/// input gradients are scattered into the tied embedding gradient when LM
/// gradients are requested.
pub fn lm_backward(
    lm: &TransformerLm,
    lora: Option<&LoraSet>,
    cache: &LmCache,
    dlogits: &Array2<f64>,
    input_token_ids: &[Option<u32>],
    want_lm_grads: bool,
    want_lora_grads: bool,
) -> Result<BackwardResult> {
    let t = dlogits.nrows();
    let d = lm.config.d_model;
    let heads = lm.config.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    if want_lora_grads && lora.is_none() {
        return Err(Error::Precondition(
            "lora gradients requested without adapters".into(),
        ));
    }

    let mut lm_grads = want_lm_grads.then(|| LmGrads::zeros(lm));
    let mut lora_grads = match (want_lora_grads, lora) {
        (true, Some(set)) => Some(LoraGrads::zeros(set)),
        _ => None,
    };

    // output head (tied): logits = nf @ embed^T
    let mut dnf = dlogits.dot(&lm.embed);
    if let Some(g) = lm_grads.as_mut() {
        g.embed += &dlogits.t().dot(&cache.nf);
    }

    // final layernorm
    let mut dg_f = Array1::zeros(d);
    let mut db_f = Array1::zeros(d);
    let mut dx = layernorm_backward(
        &dnf,
        &cache.xhatf,
        &cache.invstdf,
        &lm.lnf_g,
        &mut dg_f,
        &mut db_f,
    );
    if let Some(g) = lm_grads.as_mut() {
        g.lnf_g += &dg_f;
        g.lnf_b += &db_f;
    }
    dnf.fill(0.0);

    for (li, layer) in lm.layers.iter().enumerate().rev() {
        let c = &cache.layers[li];
        // ---- MLP block: x = x_mid + relu(n2 @ w1 + b1) @ w2 + b2
        let df2 = dx.clone();
        let f1 = c.f1_pre.mapv(|v| v.max(0.0));
        let mut df1 = df2.dot(&layer.w2.t());
        // relu mask
        ndarray::Zip::from(&mut df1).and(&c.f1_pre).for_each(|g, &pre| {
            if pre <= 0.0 {
                *g = 0.0;
            }
        });
        if let Some(g) = lm_grads.as_mut() {
            let lg = &mut g.layers[li];
            lg.w2 += &f1.t().dot(&df2);
            lg.b2 += &df2.sum_axis(ndarray::Axis(0));
            lg.w1 += &c.n2.t().dot(&df1);
            lg.b1 += &df1.sum_axis(ndarray::Axis(0));
        }
        let dn2 = df1.dot(&layer.w1.t());
        let mut dg2 = Array1::zeros(d);
        let mut db2 = Array1::zeros(d);
        let dx_mid_from_ln =
            layernorm_backward(&dn2, &c.xhat2, &c.invstd2, &layer.ln2_g, &mut dg2, &mut db2);
        if let Some(g) = lm_grads.as_mut() {
            g.layers[li].ln2_g += &dg2;
            g.layers[li].ln2_b += &db2;
        }
        // residual: dx (at x) flows to x_mid both directly and through MLP
        let dx_mid = &dx + &dx_mid_from_ln;

        // ---- attention block: x_mid = x_in + (att_o @ wo)
        let d_attn = &dx_mid;
        let do_ = d_attn.dot(&layer.wo.t());
        if let Some(g) = lm_grads.as_mut() {
            g.layers[li].wo += &c.att_o.t().dot(d_attn);
        }

        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &c.att_p[h];
            let vh = c.v.slice(cols);
            let qh = c.q.slice(cols);
            let kh = c.k.slice(cols);
            let doh = do_.slice(cols);

            let dp = doh.dot(&vh.t());
            let dvh = p.t().dot(&doh);
            // softmax backward, rows; masked entries have p == 0
            let mut dscores = Array2::zeros((t, t));
            for i in 0..t {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += dp[[i, j]] * p[[i, j]];
                }
                for j in 0..=i {
                    dscores[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot);
                }
            }
            let dqh = dscores.dot(&kh).mapv(|v| v * scale);
            let dkh = dscores.t().dot(&qh).mapv(|v| v * scale);
            dq.slice_mut(cols).assign(&dqh);
            dk.slice_mut(cols).assign(&dkh);
            dv.slice_mut(cols).assign(&dvh);
        }

        let mut dn1 = dq.dot(&layer.wq.t()) + dk.dot(&layer.wk.t()) + dv.dot(&layer.wv.t());
        if let Some(set) = lora {
            let ll = &set.layers[li];
            // q path: q += (alpha/r) n1 @ a^T @ b^T
            let sq = ll.q.alpha / ll.q.r as f64;
            let u = dq.dot(&ll.q.b); // T x r
            dn1 += &u.dot(&ll.q.a).mapv(|v| v * sq);
            let sv = ll.v.alpha / ll.v.r as f64;
            let uv = dv.dot(&ll.v.b);
            dn1 += &uv.dot(&ll.v.a).mapv(|v| v * sv);
            if let Some(lg) = lora_grads.as_mut() {
                let (qa, qb, va, vb) = &mut lg.layers[li];
                *qa += &u.t().dot(&c.n1).mapv(|v| v * sq);
                *qb += &dq.t().dot(c.lora_tq.as_ref().unwrap()).mapv(|v| v * sq);
                *va += &uv.t().dot(&c.n1).mapv(|v| v * sv);
                *vb += &dv.t().dot(c.lora_tv.as_ref().unwrap()).mapv(|v| v * sv);
            }
        }
        if let Some(g) = lm_grads.as_mut() {
            let lg = &mut g.layers[li];
            lg.wq += &c.n1.t().dot(&dq);
            lg.wk += &c.n1.t().dot(&dk);
            lg.wv += &c.n1.t().dot(&dv);
        }

        let mut dg1 = Array1::zeros(d);
        let mut db1 = Array1::zeros(d);
        let dx_in_from_ln =
            layernorm_backward(&dn1, &c.xhat1, &c.invstd1, &layer.ln1_g, &mut dg1, &mut db1);
        if let Some(g) = lm_grads.as_mut() {
            g.layers[li].ln1_g += &dg1;
            g.layers[li].ln1_b += &db1;
        }
        dx = dx_mid + dx_in_from_ln;
    }

    // dx is now the gradient at (input + pos)
    if let Some(g) = lm_grads.as_mut() {
        g.pos.slice_mut(s![0..t, ..]).add_assign(&dx);
        for (row, id) in input_token_ids.iter().enumerate() {
            if let Some(id) = id {
                let mut er = g.embed.row_mut(*id as usize);
                er += &dx.row(row);
            }
        }
    }

    Ok(BackwardResult {
        d_input: dx,
        lm_grads,
        lora_grads,
    })
}

use std::ops::AddAssign;

/// Teacher-forced cross-entropy over the masked positions.
///
/// `mask[i]` marks sequence element `i` as a prediction target: the loss
/// reads the logits at position `i-1` and the token id `targets[i]`.
/// Returns the mean loss per masked position and the matching dlogits.
pub fn ce_loss_masked(
    logits: &Array2<f64>,
    mask: &[bool],
    targets: &[u32],
) -> Result<(f64, Array2<f64>)> {
    let t = logits.nrows();
    if mask.len() != t || targets.len() != t {
        return Err(Error::ShapeMismatch(
            "mask/targets length != sequence length".into(),
        ));
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(Error::Precondition("no loss-bearing positions".into()));
    }
    if mask[0] {
        return Err(Error::Precondition(
            "position 0 cannot be a prediction target".into(),
        ));
    }
    let inv = 1.0 / n_masked as f64;
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.dim());
    for i in 0..t {
        if !mask[i] {
            continue;
        }
        let row = logits.row(i - 1);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        let target = targets[i] as usize;
        loss += (log_denom - row[target]) * inv;
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_denom).exp();
            dlogits[[i - 1, j]] += (p - if j == target { 1.0 } else { 0.0 }) * inv;
        }
    }
    Ok((loss, dlogits))
}

/// Teacher-forced accuracy: fraction of masked positions whose argmax
/// prediction equals the target.
pub fn teacher_forced_accuracy(logits: &Array2<f64>, mask: &[bool], targets: &[u32]) -> f64 {
    let mut n = 0usize;
    let mut correct = 0usize;
    for i in 0..mask.len() {
        if !mask[i] || i == 0 {
            continue;
        }
        n += 1;
        let row = logits.row(i - 1);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == targets[i] as usize {
            correct += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        correct as f64 / n as f64
    }
}
