//! Speech-to-text alignment probes: pairwise cosine-similarity maps,
//! nearest-vocabulary-token decoding of learned speech tokens, and
//! CSV/image export.

pub mod viridis;

use crate::error::{Error, Result};
use crate::eval::ConnectorSystem;
use crate::features::{downsample_stack, FrameSequence};
use crate::model::decode::decode_beam;
use crate::model::lm::TransformerLm;
use crate::model::projector::{projector_forward_cached, SpeechTokenEmbeddings};
use crate::model::prompt::assemble_prompt;
use ndarray::{Array2, ArrayView1, ArrayView2};
use std::fmt::Write as _;
use std::path::Path;
use viridis::VIRIDIS;

/// Pairwise cosine similarities between speech token embeddings (rows) and
/// text token embeddings (columns). Entries lie in [-1, 1]; zero-norm
/// vectors produce 0 entries and are flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMap {
    pub matrix: Array2<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub zero_rows: Vec<bool>,
    pub zero_cols: Vec<bool>,
}

impl AlignmentMap {
    pub fn n_speech(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_text(&self) -> usize {
        self.matrix.ncols()
    }

    /// Row index of each column's maximum (first on exact ties).
    pub fn column_argmax(&self) -> Vec<usize> {
        (0..self.n_text())
            .map(|j| {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for i in 0..self.n_speech() {
                    let v = self.matrix[[i, j]];
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("speech\\text");
        for c in &self.col_labels {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for i in 0..self.n_speech() {
            let _ = write!(out, "{}", self.row_labels[i]);
            for j in 0..self.n_text() {
                let _ = write!(out, ",{:.6}", self.matrix[[i, j]]);
            }
            out.push('\n');
        }
        out
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of every (speech, text) pair.
pub fn cosine_matrix(
    e_speech: &SpeechTokenEmbeddings,
    e_text: ArrayView2<f64>,
) -> Result<AlignmentMap> {
    cosine_matrix_labeled(
        e_speech,
        e_text,
        (0..e_speech.n_tokens()).map(|i| format!("s{i}")).collect(),
        (0..e_text.nrows()).map(|j| format!("t{j}")).collect(),
    )
}

pub fn cosine_matrix_labeled(
    e_speech: &SpeechTokenEmbeddings,
    e_text: ArrayView2<f64>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
) -> Result<AlignmentMap> {
    let s = &e_speech.embeddings;
    if s.ncols() != e_text.ncols() && s.nrows() > 0 && e_text.nrows() > 0 {
        return Err(Error::ShapeMismatch(format!(
            "speech dim {} != text dim {}",
            s.ncols(),
            e_text.ncols()
        )));
    }
    if row_labels.len() != s.nrows() || col_labels.len() != e_text.nrows() {
        return Err(Error::ShapeMismatch("label lists do not match matrix".into()));
    }
    let zero_rows: Vec<bool> = (0..s.nrows()).map(|i| norm(s.row(i)) == 0.0).collect();
    let zero_cols: Vec<bool> = (0..e_text.nrows())
        .map(|j| norm(e_text.row(j)) == 0.0)
        .collect();
    let mut matrix = Array2::zeros((s.nrows(), e_text.nrows()));
    for i in 0..s.nrows() {
        let ni = norm(s.row(i));
        for j in 0..e_text.nrows() {
            let nj = norm(e_text.row(j));
            matrix[[i, j]] = if ni == 0.0 || nj == 0.0 {
                0.0
            } else {
                (s.row(i).dot(&e_text.row(j)) / (ni * nj)).clamp(-1.0, 1.0)
            };
        }
    }
    Ok(AlignmentMap {
        matrix,
        row_labels,
        col_labels,
        zero_rows,
        zero_cols,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NearestMetric {
    Cosine,
    Euclidean,
}

/// One probe result: the closest vocabulary token for a speech embedding.
/// `score` is cosine similarity or negated Euclidean distance, so larger is
/// always closer.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestToken {
    pub token: u32,
    pub score: f64,
    pub zero_norm: bool,
}

/// Map each speech token embedding to its closest vocabulary token.
/// Ties break toward the smaller token id.
pub fn nearest_tokens(
    e: &SpeechTokenEmbeddings,
    lm: &TransformerLm,
    metric: NearestMetric,
) -> Result<Vec<NearestToken>> {
    if e.n_tokens() > 0 && e.embeddings.ncols() != lm.config.d_model {
        return Err(Error::ShapeMismatch(format!(
            "speech dim {} != embedding dim {}",
            e.embeddings.ncols(),
            lm.config.d_model
        )));
    }
    let mut out = Vec::with_capacity(e.n_tokens());
    for i in 0..e.n_tokens() {
        let row = e.embeddings.row(i);
        let ni = norm(row);
        if metric == NearestMetric::Cosine && ni == 0.0 {
            out.push(NearestToken {
                token: 0,
                score: 0.0,
                zero_norm: true,
            });
            continue;
        }
        let mut best_tok = 0u32;
        let mut best_score = f64::NEG_INFINITY;
        for v in 0..lm.config.vocab_size {
            let t = lm.embed.row(v);
            let score = match metric {
                NearestMetric::Cosine => {
                    let nt = norm(t);
                    if nt == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        row.dot(&t) / (ni * nt)
                    }
                }
                NearestMetric::Euclidean => {
                    -row.iter()
                        .zip(t.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                }
            };
            if score > best_score {
                best_score = score;
                best_tok = v as u32;
            }
        }
        out.push(NearestToken {
            token: best_tok,
            score: best_score,
            zero_norm: false,
        });
    }
    Ok(out)
}

/// Color for a similarity value: -1 maps to the low end of the table, +1 to
/// the high end, linearly.
pub fn viridis_color(v: f64) -> [u8; 3] {
    let idx = (((v + 1.0) / 2.0) * 255.0).round().clamp(0.0, 255.0) as usize;
    VIRIDIS[idx]
}

/// Binary PPM (P6) rendering, one `cell_px` square block per cell,
/// row-major.
pub fn heatmap_ppm(map: &AlignmentMap, cell_px: usize) -> Result<Vec<u8>> {
    if map.n_speech() == 0 || map.n_text() == 0 {
        return Err(Error::Precondition("heatmap of an empty map".into()));
    }
    if cell_px == 0 {
        return Err(Error::Precondition("cell_px must be >= 1".into()));
    }
    let w = map.n_text() * cell_px;
    let h = map.n_speech() * cell_px;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for i in 0..map.n_speech() {
        for _ in 0..cell_px {
            for j in 0..map.n_text() {
                let c = viridis_color(map.matrix[[i, j]]);
                for _ in 0..cell_px {
                    out.extend_from_slice(&c);
                }
            }
        }
    }
    Ok(out)
}

/// SVG rendering with axis labels.
pub fn heatmap_svg(map: &AlignmentMap, cell_px: usize) -> Result<String> {
    if map.n_speech() == 0 || map.n_text() == 0 {
        return Err(Error::Precondition("heatmap of an empty map".into()));
    }
    let margin = 60usize;
    let w = map.n_text() * cell_px + margin;
    let h = map.n_speech() * cell_px + margin;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         font-family=\"monospace\" font-size=\"10\">\n"
    );
    for i in 0..map.n_speech() {
        for j in 0..map.n_text() {
            let [r, g, b] = viridis_color(map.matrix[[i, j]]);
            let _ = write!(
                svg,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell_px}\" height=\"{cell_px}\" \
                 fill=\"rgb({r},{g},{b})\"/>\n",
                margin + j * cell_px,
                i * cell_px,
            );
        }
    }
    for (i, label) in map.row_labels.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"2\" y=\"{}\">{}</text>\n",
            i * cell_px + cell_px / 2 + 4,
            xml_escape(label)
        );
    }
    for (j, label) in map.col_labels.iter().enumerate() {
        let _ = write!(
            svg,
            "<text x=\"{}\" y=\"{}\" transform=\"rotate(90 {} {})\">{}</text>\n",
            margin + j * cell_px + cell_px / 2,
            map.n_speech() * cell_px + 8,
            margin + j * cell_px + cell_px / 2,
            map.n_speech() * cell_px + 8,
            xml_escape(label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Everything the qualitative probe produces for one utterance.
#[derive(Debug, Clone)]
pub struct AlignmentBundle {
    pub map: AlignmentMap,
    pub nearest: Vec<NearestToken>,
    pub decoded: Vec<u32>,
    pub reference: Vec<u32>,
}

fn labels_line(lm: &TransformerLm, ids: impl Iterator<Item = u32>) -> String {
    let parts: Vec<String> = ids.map(|id| lm.tokenizer.token_label(id)).collect();
    match lm.tokenizer {
        crate::model::Tokenizer::Chars => parts.join(""),
        crate::model::Tokenizer::RawIds { .. } => parts.join(" "),
    }
}

impl AlignmentBundle {
    /// Three lines: reference, nearest-token probe, decoded hypothesis.
    pub fn tokens_text(&self, lm: &TransformerLm) -> String {
        format!(
            "reference: {}\nnearest:   {}\ndecoded:   {}\n",
            labels_line(lm, self.reference.iter().copied()),
            labels_line(lm, self.nearest.iter().map(|n| n.token)),
            labels_line(lm, self.decoded.iter().copied()),
        )
    }

    /// Write map.csv, map.svg, map.ppm and tokens.txt into a directory.
    pub fn save(&self, lm: &TransformerLm, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("map.csv"), self.map.to_csv())?;
        if self.map.n_speech() > 0 && self.map.n_text() > 0 {
            std::fs::write(dir.join("map.svg"), heatmap_svg(&self.map, 16)?)?;
            std::fs::write(dir.join("map.ppm"), heatmap_ppm(&self.map, 16)?)?;
        }
        std::fs::write(dir.join("tokens.txt"), self.tokens_text(lm))?;
        Ok(())
    }
}

/// Run the trained connector on one utterance's frames and produce the
/// alignment map against the reference tokens' embeddings, the
/// nearest-token probe and the decoded hypothesis, side by side.
pub fn alignment_report(
    system: &ConnectorSystem,
    frames: &FrameSequence,
    reference: &[u32],
) -> Result<AlignmentBundle> {
    if !system.projector.trained {
        return Err(Error::Validation(
            "projector checkpoint is untrained; run training first".into(),
        ));
    }
    let lm = system.lm.lm();
    let z = downsample_stack(frames, system.k)?;
    let (e, _) = projector_forward_cached(system.projector, &z.features)?;
    if e.n_tokens() == 0 || reference.is_empty() {
        return Ok(AlignmentBundle {
            map: AlignmentMap {
                matrix: Array2::zeros((0, 0)),
                row_labels: vec![],
                col_labels: vec![],
                zero_rows: vec![],
                zero_cols: vec![],
            },
            nearest: vec![],
            decoded: vec![],
            reference: reference.to_vec(),
        });
    }
    let text_embed = lm.embed_tokens(reference)?;
    let map = cosine_matrix_labeled(
        &e,
        text_embed.view(),
        (0..e.n_tokens()).map(|i| format!("s{i}")).collect(),
        reference
            .iter()
            .map(|&t| lm.tokenizer.token_label(t))
            .collect(),
    )?;
    let nearest = nearest_tokens(&e, lm, NearestMetric::Cosine)?;
    let prompt = assemble_prompt(system.layout, &e, lm, None)?;
    let decoded = decode_beam(
        lm,
        system.lora,
        &prompt.embeddings,
        system.decode.beam_width,
        system.decode.max_len,
    )?
    .tokens;
    Ok(AlignmentBundle {
        map,
        nearest,
        decoded,
        reference: reference.to_vec(),
    })
}
