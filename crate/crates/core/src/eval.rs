//! The measurement half of the toolkit: text normalization, edit-distance
//! alignment with error-type breakdown, pooled corpus WER with the infinity
//! display rule, cross-domain matrices, perturbation sweeps and the
//! WER-versus-duration scatter analysis.

use crate::audio::{mean_power, Waveform};
use crate::ctc::{ctc_greedy_decode, CtcHead};
use crate::error::{Error, Result};
use crate::features::{downsample_stack, logmel_frontend, FrameSequence, LogMelConfig};
use crate::model::decode::{decode_beam, DecodeConfig};
use crate::model::lm::{FrozenLm, LoraSet};
use crate::model::projector::Projector;
use crate::model::prompt::{assemble_prompt, PromptLayout};
use crate::model::projector::projector_forward_cached;
use crate::perturb::{mix_noise, pink_noise, time_scale, NoiseClass, PerturbCondition};
use crate::rng::derive_seed_indexed;
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Hypotheses longer than this multiple of the reference are counted as
/// runaway generation.
pub const RUNAWAY_FACTOR: usize = 4;

/// Alignment error counts for one utterance or a pooled corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WerReport {
    pub n_ref: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl WerReport {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// (S + D + I) / N; an empty reference yields +inf.
    pub fn wer(&self) -> f64 {
        if self.n_ref == 0 {
            f64::INFINITY
        } else {
            self.errors() as f64 / self.n_ref as f64
        }
    }

    /// Table cell: percent to one decimal, or the infinity sign for WER
    /// above 100%.
    pub fn displayed(&self) -> String {
        let wer = self.wer();
        if wer > 1.0 {
            "\u{221e}".to_string()
        } else {
            format!("{:.1}", wer * 100.0)
        }
    }

    /// Pool counts across utterances (corpus-level WER, not a mean of
    /// per-utterance rates).
    pub fn pool<'a>(reports: impl IntoIterator<Item = &'a WerReport>) -> WerReport {
        let mut out = WerReport::default();
        for r in reports {
            out.n_ref += r.n_ref;
            out.substitutions += r.substitutions;
            out.deletions += r.deletions;
            out.insertions += r.insertions;
        }
        out
    }
}

/// Lowercase, map everything outside [a-z0-9' ] to space, split on
/// whitespace runs.
pub fn normalize_text(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

/// Minimal-cost alignment with unit costs; traceback ties prefer
/// substitution over deletion over insertion.
pub fn align_edit<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (Vec<AlignOp>, WerReport) {
    let n = reference.len();
    let m = hypothesis.len();
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            d[i][j] = (d[i - 1][j - 1] + sub_cost)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && reference[i - 1] == hypothesis[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(AlignOp::Match);
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(AlignOp::Substitute);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(AlignOp::Delete);
            i -= 1;
        } else {
            ops.push(AlignOp::Insert);
            j -= 1;
        }
    }
    ops.reverse();

    let mut report = WerReport {
        n_ref: n,
        ..Default::default()
    };
    for op in &ops {
        match op {
            AlignOp::Match => {}
            AlignOp::Substitute => report.substitutions += 1,
            AlignOp::Delete => report.deletions += 1,
            AlignOp::Insert => report.insertions += 1,
        }
    }
    (ops, report)
}

/// Pooled WER over (reference, hypothesis) pairs.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<WerReport> {
    if pairs.is_empty() {
        return Err(Error::Precondition("corpus_wer of an empty list".into()));
    }
    let reports: Vec<WerReport> = pairs
        .iter()
        .map(|(r, h)| align_edit(r, h).1)
        .collect();
    Ok(WerReport::pool(reports.iter()))
}

/// Table-1-shaped cross-domain result table.
#[derive(Debug, Clone)]
pub struct CrossDomainTable {
    pub train_tags: Vec<String>,
    pub eval_tags: Vec<String>,
    pub cells: Vec<Vec<WerReport>>,
}

impl CrossDomainTable {
    pub fn is_in_domain(&self, row: usize, col: usize) -> bool {
        self.train_tags[row] == self.eval_tags[col]
    }

    /// Aligned plain-text rendering; in-domain cells carry a `*`.
    pub fn render_text(&self) -> String {
        let mut col_widths: Vec<usize> = self.eval_tags.iter().map(|t| t.len()).collect();
        let mut rendered: Vec<Vec<String>> = Vec::new();
        for (i, row) in self.cells.iter().enumerate() {
            let mut out_row = Vec::new();
            for (j, cell) in row.iter().enumerate() {
                let mut s = cell.displayed();
                if self.is_in_domain(i, j) {
                    s.push('*');
                }
                col_widths[j] = col_widths[j].max(s.len());
                out_row.push(s);
            }
            rendered.push(out_row);
        }
        let tag_width = self
            .train_tags
            .iter()
            .map(|t| t.len())
            .max()
            .unwrap_or(0)
            .max("train\\eval".len());
        let mut out = String::new();
        let _ = write!(out, "{:tag_width$}", "train\\eval");
        for (j, t) in self.eval_tags.iter().enumerate() {
            let _ = write!(out, "  {:>w$}", t, w = col_widths[j]);
        }
        out.push('\n');
        for (i, row) in rendered.iter().enumerate() {
            let _ = write!(out, "{:tag_width$}", self.train_tags[i]);
            for (j, cell) in row.iter().enumerate() {
                let _ = write!(out, "  {:>w$}", cell, w = col_widths[j]);
            }
            out.push('\n');
        }
        out.push_str("(* = in-domain)\n");
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_tag");
        for t in &self.eval_tags {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(out, "{}", self.train_tags[i]);
            for cell in row {
                let _ = write!(out, ",{}", cell.displayed());
            }
            out.push('\n');
        }
        out
    }
}

/// Assemble the matrix; every (train, eval) pair must be present.
pub fn cross_domain_matrix(
    runs: &BTreeMap<(String, String), WerReport>,
    train_tags: &[String],
    eval_tags: &[String],
) -> Result<CrossDomainTable> {
    let mut missing = Vec::new();
    let mut cells = Vec::with_capacity(train_tags.len());
    for tr in train_tags {
        let mut row = Vec::with_capacity(eval_tags.len());
        for ev in eval_tags {
            match runs.get(&(tr.clone(), ev.clone())) {
                Some(r) => row.push(*r),
                None => missing.push(format!("{tr}->{ev}")),
            }
        }
        cells.push(row);
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteMatrix(missing));
    }
    Ok(CrossDomainTable {
        train_tags: train_tags.to_vec(),
        eval_tags: eval_tags.to_vec(),
        cells,
    })
}

/// One evaluation utterance: mono audio at the frontend rate plus the
/// normalized reference tokens.
#[derive(Debug, Clone)]
pub struct SweepUtterance {
    pub id: String,
    pub audio: Waveform,
    pub reference: Vec<String>,
}

/// The connector pipeline under evaluation.
pub struct ConnectorSystem<'a> {
    pub frontend: LogMelConfig,
    pub k: usize,
    pub projector: &'a Projector,
    pub lm: &'a FrozenLm,
    pub lora: Option<&'a LoraSet>,
    pub layout: &'a PromptLayout,
    pub decode: DecodeConfig,
}

/// The CTC baseline under evaluation.
pub struct CtcSystem<'a> {
    pub frontend: LogMelConfig,
    pub head: &'a CtcHead,
}

pub enum SweepSystem<'a> {
    Connector(ConnectorSystem<'a>),
    Ctc(CtcSystem<'a>),
}

impl SweepSystem<'_> {
    pub fn frontend(&self) -> &LogMelConfig {
        match self {
            SweepSystem::Connector(c) => &c.frontend,
            SweepSystem::Ctc(c) => &c.frontend,
        }
    }

    /// Run the system on already-extracted encoder frames. Returns the
    /// hypothesis tokens and whether decoding was truncated at its cap.
    pub fn transcribe_frames(&self, frames: &FrameSequence) -> Result<(Vec<String>, bool)> {
        match self {
            SweepSystem::Connector(c) => {
                let z = downsample_stack(frames, c.k)?;
                let (e, _) = projector_forward_cached(c.projector, &z.features)?;
                let prompt = assemble_prompt(c.layout, &e, c.lm.lm(), None)?;
                let out = decode_beam(
                    c.lm.lm(),
                    c.lora,
                    &prompt.embeddings,
                    c.decode.beam_width,
                    c.decode.max_len,
                )?;
                let text = c.lm.lm().tokenizer.decode_text(&out.tokens)?;
                Ok((normalize_text(&text), out.truncated))
            }
            SweepSystem::Ctc(c) => {
                let lp = c.head.log_probs(frames)?;
                let labels = ctc_greedy_decode(&lp);
                // CTC label l corresponds to vocabulary token l-1
                let ids: Vec<u32> = labels.iter().map(|&l| (l - 1) as u32).collect();
                let tokenizer = crate::model::Tokenizer::RawIds {
                    vocab_size: c.head.classes().saturating_sub(1),
                };
                let text = tokenizer.decode_text(&ids)?;
                Ok((normalize_text(&text), false))
            }
        }
    }

    /// Full audio path: frontend, then `transcribe_frames`.
    pub fn transcribe_audio(&self, w: &Waveform) -> Result<(Vec<String>, bool)> {
        let frames = logmel_frontend(w, self.frontend())?;
        self.transcribe_frames(&frames)
    }
}

/// Noise material for sweep conditions. Babble/music hold user-supplied
/// waveforms; the synthetic class generates seeded pink noise per call.
#[derive(Debug, Clone, Default)]
pub struct NoiseBank {
    pub babble: Vec<Waveform>,
    pub music: Vec<Waveform>,
}

impl NoiseBank {
    fn pick(&self, class: NoiseClass, seed: u64, signal: &Waveform) -> Result<Waveform> {
        match class {
            NoiseClass::Synthetic => Ok(pink_noise(
                signal.samples.len().max(1),
                signal.sample_rate,
                seed,
            )),
            NoiseClass::Babble | NoiseClass::Music => {
                let files = if class == NoiseClass::Babble {
                    &self.babble
                } else {
                    &self.music
                };
                if files.is_empty() {
                    return Err(Error::Precondition(format!(
                        "no {} noise files supplied",
                        class.as_str()
                    )));
                }
                let idx = (crate::rng::splitmix64(seed ^ 0x5eed) % files.len() as u64) as usize;
                Ok(files[idx].clone())
            }
        }
    }
}

/// Apply one perturbation condition to an utterance's audio.
pub fn perturb_audio(
    w: &Waveform,
    condition: &PerturbCondition,
    bank: &NoiseBank,
    utt_index: u64,
) -> Result<Waveform> {
    condition.validate()?;
    match condition {
        PerturbCondition::Tempo { ratio } => time_scale(w, *ratio),
        PerturbCondition::Noise {
            snr_db,
            class,
            seed,
        } => {
            let utt_seed = derive_seed_indexed(*seed, "noise-offset", utt_index);
            let noise = bank.pick(*class, utt_seed, w)?;
            if mean_power(&noise)? == 0.0 {
                return Err(Error::Precondition("noise has zero power".into()));
            }
            mix_noise(w, &noise, *snr_db, utt_seed)
        }
    }
}

/// Per-utterance evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub condition: String,
    pub duration_s: f64,
    pub report: WerReport,
    pub runaway: bool,
}

/// Per-condition pooled counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionAggregate {
    pub condition: String,
    pub report: WerReport,
    pub runaway_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct SweepCurve {
    pub aggregates: Vec<ConditionAggregate>,
    pub per_utterance: Vec<UtteranceRecord>,
}

/// Evaluate one utterance under one condition; pure and deterministic, so
/// callers may fan utterances out across workers freely.
pub fn evaluate_utterance(
    system: &SweepSystem,
    utt: &SweepUtterance,
    condition: &PerturbCondition,
    bank: &NoiseBank,
    utt_index: u64,
) -> Result<UtteranceRecord> {
    let audio = perturb_audio(&utt.audio, condition, bank, utt_index)?;
    let (hyp, truncated) = system.transcribe_audio(&audio)?;
    let (_, report) = align_edit(&utt.reference, &hyp);
    let runaway = truncated || hyp.len() > RUNAWAY_FACTOR * utt.reference.len();
    Ok(UtteranceRecord {
        utterance_id: utt.id.clone(),
        condition: condition.label(),
        duration_s: audio.duration_s(),
        report,
        runaway,
    })
}

/// Pool per-utterance records (already grouped by condition) into a curve.
pub fn assemble_curve(
    conditions: &[PerturbCondition],
    records: Vec<Vec<UtteranceRecord>>,
) -> SweepCurve {
    let mut curve = SweepCurve::default();
    for (cond, recs) in conditions.iter().zip(records) {
        let pooled = WerReport::pool(recs.iter().map(|r| &r.report));
        curve.aggregates.push(ConditionAggregate {
            condition: cond.label(),
            report: pooled,
            runaway_count: recs.iter().filter(|r| r.runaway).count(),
        });
        curve.per_utterance.extend(recs);
    }
    curve
}

/// Run the full sweep: for each grid condition, perturb, transcribe and
/// score every utterance. Sequential reference implementation; the CLI
/// parallelizes over utterances with identical results.
pub fn run_sweep(
    system: &SweepSystem,
    utts: &[SweepUtterance],
    grid: &[PerturbCondition],
    bank: &NoiseBank,
) -> Result<SweepCurve> {
    if utts.is_empty() {
        return Err(Error::Precondition("sweep over an empty manifest".into()));
    }
    let mut per_condition = Vec::with_capacity(grid.len());
    for cond in grid {
        let mut recs = Vec::with_capacity(utts.len());
        for (i, utt) in utts.iter().enumerate() {
            recs.push(evaluate_utterance(system, utt, cond, bank, i as u64)?);
        }
        per_condition.push(recs);
    }
    Ok(assemble_curve(grid, per_condition))
}

/// WER-versus-duration series for one sweep condition, with least-squares
/// slope and Pearson correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterResult {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub pearson: f64,
    /// Set when variance degenerates and the correlation is reported as 0.
    pub degenerate: bool,
}

pub fn duration_scatter(curve: &SweepCurve, condition: &str) -> Result<ScatterResult> {
    let points: Vec<(f64, f64)> = curve
        .per_utterance
        .iter()
        .filter(|r| r.condition == condition)
        .map(|r| (r.duration_s, r.report.wer()))
        .collect();
    if points.len() < 2 {
        return Err(Error::Precondition(format!(
            "condition '{condition}' has {} points; correlation needs at least 2",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in &points {
        sxx += (x - mean_x) * (x - mean_x);
        syy += (y - mean_y) * (y - mean_y);
        sxy += (x - mean_x) * (y - mean_y);
    }
    // constant series have zero variance in exact arithmetic; detect by
    // value equality so summation roundoff cannot fake a correlation
    let x_constant = points.iter().all(|p| p.0 == points[0].0);
    let y_constant = points.iter().all(|p| p.1 == points[0].1);
    let degenerate = x_constant || y_constant;
    let slope = if x_constant || y_constant {
        0.0
    } else {
        sxy / sxx
    };
    let pearson = if degenerate {
        0.0
    } else {
        sxy / (sxx.sqrt() * syy.sqrt())
    };
    Ok(ScatterResult {
        intercept: mean_y - slope * mean_x,
        points,
        slope,
        pearson,
        degenerate,
    })
}

fn fmt_wer(w: f64) -> String {
    if w.is_infinite() {
        "inf".to_string()
    } else {
        format!("{w:.6}")
    }
}

/// Per-utterance results CSV (one row per utterance and condition).
pub fn per_utterance_csv(curve: &SweepCurve) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "utterance_id",
        "condition",
        "duration_s",
        "n_ref",
        "substitutions",
        "deletions",
        "insertions",
        "wer",
        "runaway",
    ])
    .unwrap();
    for r in &curve.per_utterance {
        wtr.write_record([
            r.utterance_id.clone(),
            r.condition.clone(),
            format!("{:.6}", r.duration_s),
            r.report.n_ref.to_string(),
            r.report.substitutions.to_string(),
            r.report.deletions.to_string(),
            r.report.insertions.to_string(),
            fmt_wer(r.report.wer()),
            (r.runaway as u8).to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(wtr.into_inner().unwrap()).unwrap()
}

/// Aggregate results CSV (one row per condition).
pub fn aggregate_csv(curve: &SweepCurve) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["condition", "pooled_wer", "runaway_count"]).unwrap();
    for a in &curve.aggregates {
        wtr.write_record([
            a.condition.clone(),
            fmt_wer(a.report.wer()),
            a.runaway_count.to_string(),
        ])
        .unwrap();
    }
    String::from_utf8(wtr.into_inner().unwrap()).unwrap()
}

/// Scatter CSV for one condition.
pub fn scatter_csv(scatter: &ScatterResult) -> String {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["duration_s", "wer"]).unwrap();
    for (x, y) in &scatter.points {
        wtr.write_record([format!("{x:.6}"), fmt_wer(*y)]).unwrap();
    }
    String::from_utf8(wtr.into_inner().unwrap()).unwrap()
}
