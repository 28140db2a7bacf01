//! Prompt assembly: speech token embeddings first, then the instruction
//! template, then (during training) the transcript and `</s>`.

use crate::error::{Error, Result};
use crate::model::lm::TransformerLm;
use crate::model::projector::SpeechTokenEmbeddings;
use crate::model::tokenizer::{Tokenizer, BOS, EOS};
use ndarray::Array2;

/// The instruction template. `render` must reproduce the canonical byte
/// string exactly; checkpoints store it verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub instruction: String,
    pub response_marker: String,
}

pub const PROMPT_TEMPLATE: &str = "<s>USER: Transcribe speech to text. ASSISTANT:";

impl Default for PromptLayout {
    fn default() -> Self {
        Self {
            instruction: "Transcribe speech to text.".into(),
            response_marker: "ASSISTANT:".into(),
        }
    }
}

impl PromptLayout {
    /// The exact template byte string (speech embeddings precede it).
    pub fn render(&self) -> String {
        format!("<s>USER: {} {}", self.instruction, self.response_marker)
    }

    /// Token ids of the rendered template under the given tokenizer. The
    /// char tokenizer spells the text out; raw-id corpora have no text
    /// vocabulary, so the template reduces to the `<s>` boundary marker.
    pub fn template_ids(&self, tokenizer: &Tokenizer) -> Result<Vec<u32>> {
        let rendered = self.render();
        let body = rendered
            .strip_prefix("<s>")
            .ok_or_else(|| Error::Precondition("template must start with <s>".into()))?;
        match tokenizer {
            Tokenizer::Chars => {
                let mut ids = vec![BOS];
                ids.extend(tokenizer.encode_text(body)?);
                Ok(ids)
            }
            Tokenizer::RawIds { .. } => Ok(vec![BOS]),
        }
    }
}

/// A ready-to-run LM input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledPrompt {
    /// `T x d_llm`; positional embeddings are added inside the LM forward.
    pub embeddings: Array2<f64>,
    /// `mask[i]` marks element `i` (transcript or `</s>`) as loss-bearing.
    pub loss_mask: Vec<bool>,
    /// Token id at each position; `None` for speech rows.
    pub token_ids: Vec<Option<u32>>,
    pub n_speech: usize,
    pub template_len: usize,
}

impl AssembledPrompt {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Target ids aligned with positions (0 where not loss-bearing).
    pub fn targets(&self) -> Vec<u32> {
        self.token_ids
            .iter()
            .map(|t| t.unwrap_or(0))
            .collect()
    }
}

/// Build `[E_0..E_n] ++ template ++ (transcript ++ </s>)?`. The loss mask
/// covers exactly the transcript-plus-eos positions, so it sums to
/// `transcript_len + 1` during training and 0 at inference.
pub fn assemble_prompt(
    layout: &PromptLayout,
    speech: &SpeechTokenEmbeddings,
    lm: &TransformerLm,
    transcript: Option<&[u32]>,
) -> Result<AssembledPrompt> {
    let d = lm.config.d_model;
    if speech.n_tokens() > 0 && speech.embeddings.ncols() != d {
        return Err(Error::ShapeMismatch(format!(
            "speech embedding width {} != d_llm {d}",
            speech.embeddings.ncols()
        )));
    }
    let template = layout.template_ids(&lm.tokenizer)?;
    let n = speech.n_tokens();
    let l = template.len();
    let m = transcript.map_or(0, |tr| tr.len() + 1); // + eos
    let total = n + l + m;
    if total > lm.config.max_seq_len {
        return Err(Error::Precondition(format!(
            "assembled length {total} exceeds max context {}",
            lm.config.max_seq_len
        )));
    }

    let mut embeddings = Array2::zeros((total, d));
    let mut token_ids: Vec<Option<u32>> = vec![None; total];
    let mut loss_mask = vec![false; total];

    for i in 0..n {
        embeddings.row_mut(i).assign(&speech.embeddings.row(i));
    }
    let template_embed = lm.embed_tokens(&template)?;
    for (j, &id) in template.iter().enumerate() {
        embeddings.row_mut(n + j).assign(&template_embed.row(j));
        token_ids[n + j] = Some(id);
    }
    if let Some(tr) = transcript {
        let mut ids: Vec<u32> = tr.to_vec();
        ids.push(EOS);
        let tr_embed = lm.embed_tokens(&ids)?;
        for (j, &id) in ids.iter().enumerate() {
            embeddings.row_mut(n + l + j).assign(&tr_embed.row(j));
            token_ids[n + l + j] = Some(id);
            loss_mask[n + l + j] = true;
        }
    }

    Ok(AssembledPrompt {
        embeddings,
        loss_mask,
        token_ids,
        n_speech: n,
        template_len: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::lm::{LmConfig, TransformerLm};

    fn char_lm() -> TransformerLm {
        TransformerLm::new(
            LmConfig {
                vocab_size: 128,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 256,
            },
            Tokenizer::Chars,
            3,
        )
        .unwrap()
    }

    fn raw_lm(v: usize) -> TransformerLm {
        TransformerLm::new(
            LmConfig {
                vocab_size: v,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                d_ff: 32,
                max_seq_len: 128,
            },
            Tokenizer::RawIds { vocab_size: v },
            3,
        )
        .unwrap()
    }

    #[test]
    fn template_renders_canonical_bytes() {
        assert_eq!(PromptLayout::default().render(), PROMPT_TEMPLATE);
        assert_eq!(PromptLayout::default().render().as_bytes(), PROMPT_TEMPLATE.as_bytes());
    }

    #[test]
    fn char_template_is_bos_plus_chars() {
        let ids = PromptLayout::default()
            .template_ids(&Tokenizer::Chars)
            .unwrap();
        assert_eq!(ids.len(), 1 + PROMPT_TEMPLATE.len() - 3);
        assert_eq!(ids[0], BOS);
    }

    #[test]
    fn raw_template_is_bos_marker() {
        let ids = PromptLayout::default()
            .template_ids(&Tokenizer::RawIds { vocab_size: 32 })
            .unwrap();
        assert_eq!(ids, vec![BOS]);
    }

    fn empty_speech() -> SpeechTokenEmbeddings {
        SpeechTokenEmbeddings {
            embeddings: Array2::zeros((0, 16)),
        }
    }

    fn speech_rows(n: usize) -> SpeechTokenEmbeddings {
        SpeechTokenEmbeddings {
            embeddings: Array2::from_elem((n, 16), 0.25),
        }
    }

    #[test]
    fn empty_audio_gives_pure_text_prompt() {
        let lm = char_lm();
        let p = assemble_prompt(&PromptLayout::default(), &empty_speech(), &lm, None).unwrap();
        let l_template = PromptLayout::default()
            .template_ids(&Tokenizer::Chars)
            .unwrap()
            .len();
        assert_eq!(p.len(), l_template);
        assert!(p.loss_mask.iter().all(|&m| !m));
    }

    #[test]
    fn length_arithmetic_is_exact() {
        let lm = raw_lm(32);
        let transcript = [4u32, 5, 6];
        let p = assemble_prompt(
            &PromptLayout::default(),
            &speech_rows(10),
            &lm,
            Some(&transcript),
        )
        .unwrap();
        assert_eq!(p.len(), 10 + p.template_len + transcript.len() + 1);
        assert_eq!(p.template_len, 1);
        let mask_sum = p.loss_mask.iter().filter(|&&m| m).count();
        assert_eq!(mask_sum, transcript.len() + 1);
    }

    #[test]
    fn unknown_token_id_rejected() {
        let lm = raw_lm(8);
        let r = assemble_prompt(
            &PromptLayout::default(),
            &speech_rows(2),
            &lm,
            Some(&[9u32]),
        );
        assert!(r.is_err());
    }

    #[test]
    fn inference_prompt_has_no_targets() {
        let lm = char_lm();
        let p = assemble_prompt(&PromptLayout::default(), &speech_rows(4), &lm, None).unwrap();
        assert_eq!(p.loss_mask.iter().filter(|&&m| m).count(), 0);
        assert_eq!(p.n_speech, 4);
    }
}
