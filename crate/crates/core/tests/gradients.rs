//! Finite-difference verification of every analytic gradient path:
//! the full toy LM, LoRA adapters, the projector through the frozen LM,
//! and the input-embedding gradient the connector training relies on.

use asrlab_core::model::lm::{
    lm_backward, lm_blocks, lm_blocks_mut, lm_forward, LoraSet, TransformerLm,
};
use asrlab_core::model::projector::{projector_backward, projector_forward_cached, Projector};
use asrlab_core::model::prompt::{assemble_prompt, PromptLayout};
use asrlab_core::model::{ce_loss_masked, LmConfig, Tokenizer};
use asrlab_core::rng::substream;
use asrlab_core::train::grad_check_multi;
use ndarray::Array2;
use rand::Rng;

const FD_STEPS: [f64; 3] = [1e-6, 1e-5, 3e-4];
const TOL: f64 = 1e-4;

fn tiny_config(max_seq: usize) -> LmConfig {
    LmConfig {
        vocab_size: 8,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: max_seq,
    }
}

fn flatten(blocks: &[&[f64]]) -> Vec<f64> {
    blocks.iter().flat_map(|b| b.iter().copied()).collect()
}

fn write_flat_into(blocks: Vec<&mut [f64]>, flat: &[f64]) {
    let mut at = 0;
    for b in blocks {
        b.copy_from_slice(&flat[at..at + b.len()]);
        at += b.len();
    }
}

fn random_transcript(seed: u64, len: usize, vocab: usize) -> Vec<u32> {
    let mut rng = substream(seed, "transcript");
    (0..len).map(|_| rng.gen_range(2..vocab as u32)).collect()
}

#[test]
fn toy_lm_loss_gradient_matches_finite_differences() {
    let layout = PromptLayout::default();
    for point in 0..3 {
        let lm = TransformerLm::new(
            tiny_config(24),
            Tokenizer::RawIds { vocab_size: 8 },
            100 + point,
        )
        .unwrap();
        let tokens = random_transcript(point, 3, 8);

        let oracle =
            asrlab_core::train::pipeline::oracle_prompt(&layout, &lm, &tokens, true).unwrap();
        let (logits, cache) = lm_forward(&lm, None, &oracle.embeddings, true).unwrap();
        let cache = cache.unwrap();
        let (_, dlogits) = ce_loss_masked(&logits, &oracle.loss_mask, &oracle.targets()).unwrap();
        let back = lm_backward(&lm, None, &cache, &dlogits, &oracle.token_ids, true, false).unwrap();
        let analytic = flatten(&back.lm_grads.unwrap().blocks());

        let template = lm.clone();
        let point_vec = flatten(&lm_blocks(&lm));
        let loss = |flat: &[f64]| {
            let mut m = template.clone();
            write_flat_into(lm_blocks_mut(&mut m), flat);
            // the oracle prompt embeds through the (perturbed) table
            let p = asrlab_core::train::pipeline::oracle_prompt(&layout, &m, &tokens, true).unwrap();
            let (logits, _) = lm_forward(&m, None, &p.embeddings, false).unwrap();
            ce_loss_masked(&logits, &p.loss_mask, &p.targets()).unwrap().0
        };
        let err = grad_check_multi(loss, &point_vec, &analytic, &FD_STEPS);
        assert!(err < TOL, "point {point}: max relative error {err}");
    }
}

#[test]
fn lora_gradient_matches_finite_differences() {
    let layout = PromptLayout::default();
    for point in 0..3 {
        let lm = TransformerLm::new(
            tiny_config(24),
            Tokenizer::RawIds { vocab_size: 8 },
            200 + point,
        )
        .unwrap();
        let mut lora = LoraSet::init(&lm.config, 2, 4.0, 300 + point);
        // move B off zero so both factors carry gradient
        let mut rng = substream(400 + point, "lora-b");
        for layer in &mut lora.layers {
            for v in layer.q.b.iter_mut().chain(layer.v.b.iter_mut()) {
                *v = 0.05 * rng.gen_range(-1.0..1.0);
            }
        }
        let tokens = random_transcript(50 + point, 4, 8);
        let prompt =
            asrlab_core::train::pipeline::oracle_prompt(&layout, &lm, &tokens, true).unwrap();

        let (logits, cache) = lm_forward(&lm, Some(&lora), &prompt.embeddings, true).unwrap();
        let cache = cache.unwrap();
        let (_, dlogits) = ce_loss_masked(&logits, &prompt.loss_mask, &prompt.targets()).unwrap();
        let back = lm_backward(
            &lm,
            Some(&lora),
            &cache,
            &dlogits,
            &prompt.token_ids,
            false,
            true,
        )
        .unwrap();
        let analytic = flatten(&back.lora_grads.unwrap().blocks());

        let template = lora.clone();
        let point_vec = flatten(&template.blocks());
        let loss = |flat: &[f64]| {
            let mut set = template.clone();
            write_flat_into(set.blocks_mut(), flat);
            let (logits, _) = lm_forward(&lm, Some(&set), &prompt.embeddings, false).unwrap();
            ce_loss_masked(&logits, &prompt.loss_mask, &prompt.targets())
                .unwrap()
                .0
        };
        let err = grad_check_multi(loss, &point_vec, &analytic, &FD_STEPS);
        assert!(err < TOL, "point {point}: max relative error {err}");
    }
}

#[test]
fn projector_gradient_matches_finite_differences_through_frozen_lm() {
    let layout = PromptLayout::default();
    for point in 0..3 {
        let lm = TransformerLm::new(
            tiny_config(24),
            Tokenizer::RawIds { vocab_size: 8 },
            500 + point,
        )
        .unwrap();
        let projector = Projector::init(6, 5, lm.config.d_model, 600 + point);
        let mut rng = substream(700 + point, "z");
        let z = Array2::from_shape_fn((3, 6), |_| rng.gen_range(-1.0..1.0));
        let tokens = random_transcript(80 + point, 3, 8);

        let (e, pcache) = projector_forward_cached(&projector, &z).unwrap();
        let prompt = assemble_prompt(&layout, &e, &lm, Some(&tokens)).unwrap();
        let (logits, cache) = lm_forward(&lm, None, &prompt.embeddings, true).unwrap();
        let cache = cache.unwrap();
        let (_, dlogits) = ce_loss_masked(&logits, &prompt.loss_mask, &prompt.targets()).unwrap();
        let back = lm_backward(&lm, None, &cache, &dlogits, &prompt.token_ids, false, false).unwrap();
        let d_e = back.d_input.slice(ndarray::s![0..3, ..]).to_owned();
        let grads = projector_backward(&projector, &z, &pcache, &d_e).unwrap();
        let analytic = flatten(&grads.blocks());

        let template = projector.clone();
        let point_vec = flatten(&template.blocks());
        let loss = |flat: &[f64]| {
            let mut p = template.clone();
            write_flat_into(p.blocks_mut(), flat);
            let (e, _) = projector_forward_cached(&p, &z).unwrap();
            let prompt = assemble_prompt(&layout, &e, &lm, Some(&tokens)).unwrap();
            let (logits, _) = lm_forward(&lm, None, &prompt.embeddings, false).unwrap();
            ce_loss_masked(&logits, &prompt.loss_mask, &prompt.targets())
                .unwrap()
                .0
        };
        let err = grad_check_multi(loss, &point_vec, &analytic, &FD_STEPS);
        assert!(err < TOL, "point {point}: max relative error {err}");
    }
}

#[test]
fn input_embedding_gradient_matches_finite_differences() {
    let lm = TransformerLm::new(tiny_config(16), Tokenizer::RawIds { vocab_size: 8 }, 900).unwrap();
    let mut rng = substream(901, "input");
    let input = Array2::from_shape_fn((5, lm.config.d_model), |_| rng.gen_range(-0.5..0.5));
    let mask = vec![false, false, true, true, true];
    let targets = vec![0u32, 0, 3, 4, 1];
    let ids = vec![None; 5];

    let (logits, cache) = lm_forward(&lm, None, &input, true).unwrap();
    let cache = cache.unwrap();
    let (_, dlogits) = ce_loss_masked(&logits, &mask, &targets).unwrap();
    let back = lm_backward(&lm, None, &cache, &dlogits, &ids, false, false).unwrap();
    let analytic: Vec<f64> = back.d_input.iter().copied().collect();

    let point: Vec<f64> = input.iter().copied().collect();
    let loss = |flat: &[f64]| {
        let x = Array2::from_shape_vec(input.dim(), flat.to_vec()).unwrap();
        let (logits, _) = lm_forward(&lm, None, &x, false).unwrap();
        ce_loss_masked(&logits, &mask, &targets).unwrap().0
    };
    let err = grad_check_multi(loss, &point, &analytic, &FD_STEPS);
    assert!(err < TOL, "max relative error {err}");
}
