//! Autoregressive decoding over the frozen LM: greedy and length-normalized
//! beam search with deterministic tie-breaking.

use crate::error::Result;
use crate::model::lm::{lm_forward, LoraSet, TransformerLm};
use crate::model::tokenizer::EOS;
use ndarray::Array2;

/// Decoder settings; the default beam width is 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 4,
            max_len: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutcome {
    pub tokens: Vec<u32>,
    /// Hit the generation cap (or the LM context limit) before `</s>`.
    pub truncated: bool,
    /// Length-normalized log-probability of the returned hypothesis.
    pub score: f64,
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let log_denom = denom.ln() + max;
    row.iter().map(|v| v - log_denom).collect()
}

fn with_appended(lm: &TransformerLm, seq: &Array2<f64>, token: u32) -> Array2<f64> {
    let d = seq.ncols();
    let mut out = Array2::zeros((seq.nrows() + 1, d));
    out.slice_mut(ndarray::s![..seq.nrows(), ..]).assign(seq);
    out.row_mut(seq.nrows()).assign(&lm.embed.row(token as usize));
    out
}

/// How many tokens may still be generated before the positional table runs
/// out.
fn context_budget(lm: &TransformerLm, prefix_rows: usize, max_len: usize) -> usize {
    max_len.min(lm.config.max_seq_len.saturating_sub(prefix_rows))
}

/// Repeatedly append the argmax next token until `</s>` or `max_len`.
/// Ties break toward the smaller token id.
pub fn decode_greedy(
    lm: &TransformerLm,
    lora: Option<&LoraSet>,
    prefix: &Array2<f64>,
    max_len: usize,
) -> Result<DecodeOutcome> {
    let budget = context_budget(lm, prefix.nrows(), max_len);
    let mut seq = prefix.clone();
    let mut tokens = Vec::new();
    let mut raw_score = 0.0;
    let mut emissions = 0usize;
    let mut truncated = true;
    for _ in 0..budget {
        let (logits, _) = lm_forward(lm, lora, &seq, false)?;
        let lp = log_softmax_row(logits.row(logits.nrows() - 1));
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in lp.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        raw_score += best_v;
        emissions += 1;
        if best as u32 == EOS {
            truncated = false;
            break;
        }
        tokens.push(best as u32);
        seq = with_appended(lm, &seq, best as u32);
    }
    if budget == 0 {
        truncated = true;
    }
    let score = raw_score / emissions.max(1) as f64;
    Ok(DecodeOutcome {
        tokens,
        truncated,
        score,
    })
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    raw_score: f64,
    emissions: usize,
    finished: bool,
    truncated: bool,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.raw_score / self.emissions.max(1) as f64
    }
}

fn better(a: &Hypothesis, b: &Hypothesis) -> bool {
    // higher normalized score wins; ties prefer the lexicographically
    // smaller token sequence
    match a.normalized().partial_cmp(&b.normalized()) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Less) => false,
        _ => a.tokens < b.tokens,
    }
}

/// Length-normalized beam search. `beam_width == 1` reproduces
/// `decode_greedy` exactly, and the returned hypothesis never scores below
/// the greedy one (the greedy rollout is kept as a candidate).
pub fn decode_beam(
    lm: &TransformerLm,
    lora: Option<&LoraSet>,
    prefix: &Array2<f64>,
    beam_width: usize,
    max_len: usize,
) -> Result<DecodeOutcome> {
    let greedy = decode_greedy(lm, lora, prefix, max_len)?;
    if beam_width <= 1 {
        return Ok(greedy);
    }
    let budget = context_budget(lm, prefix.nrows(), max_len);
    if budget == 0 {
        return Ok(greedy);
    }

    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        raw_score: 0.0,
        emissions: 0,
        finished: false,
        truncated: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..budget {
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let mut seq = prefix.clone();
            for &t in &hyp.tokens {
                seq = with_appended(lm, &seq, t);
            }
            let (logits, _) = lm_forward(lm, lora, &seq, false)?;
            let lp = log_softmax_row(logits.row(logits.nrows() - 1));
            for (j, &v) in lp.iter().enumerate() {
                let mut next = hyp.clone();
                next.raw_score += v;
                next.emissions += 1;
                if j as u32 == EOS {
                    next.finished = true;
                } else {
                    next.tokens.push(j as u32);
                }
                candidates.push(next);
            }
        }
        // prune by cumulative log-probability; lexicographic tie-break
        candidates.sort_by(|a, b| {
            b.raw_score
                .partial_cmp(&a.raw_score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_width);

        live = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else if step + 1 == budget {
                let mut t = c;
                t.finished = true;
                t.truncated = true;
                finished.push(t);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }

    let mut best: Option<Hypothesis> = None;
    for h in finished {
        if best.as_ref().map_or(true, |b| better(&h, b)) {
            best = Some(h);
        }
    }
    let best = match best {
        Some(b) => b,
        None => return Ok(greedy),
    };
    let best_score = best.normalized();
    if best_score >= greedy.score {
        Ok(DecodeOutcome {
            tokens: best.tokens,
            truncated: best.truncated,
            score: best_score,
        })
    } else {
        Ok(greedy)
    }
}
