//! The connector stack: projector, LoRA adapters, the frozen toy LM,
//! prompt assembly and decoding.

pub mod decode;
pub mod lm;
pub mod lora;
pub mod projector;
pub mod prompt;
pub mod tokenizer;

pub use decode::{decode_beam, decode_greedy, DecodeConfig, DecodeOutcome};
pub use lm::{
    ce_loss_masked, lm_backward, lm_checksum, lm_forward, teacher_forced_accuracy, FrozenLm,
    LmConfig, LoraSet, TransformerLm,
};
pub use lora::{lora_forward, lora_merge, LoraAdapter};
pub use projector::{projector_forward, Projector, SpeechTokenEmbeddings};
pub use prompt::{assemble_prompt, AssembledPrompt, PromptLayout, PROMPT_TEMPLATE};
pub use tokenizer::{Tokenizer, BOS, EOS};
