//! The two-stage toy pipeline: pretrain-and-freeze the tiny LM on the
//! oracle copy task, then train the projector (and optionally LoRA)
//! against the frozen model.

use crate::error::{Error, Result};
use crate::features::{downsample_stack, signature_matrix, synth_utterance, RateDist, ToyUtterance};
use crate::model::lm::{
    lm_backward, lm_blocks, lm_blocks_mut, lm_block_names, lm_checksum, lm_forward, LmGrads,
    LoraGrads, LoraSet,
};
use crate::model::projector::{
    projector_backward, projector_forward_cached, Projector, ProjectorGrads, SpeechTokenEmbeddings,
};
use crate::model::prompt::{assemble_prompt, AssembledPrompt, PromptLayout};
use crate::model::{ce_loss_masked, teacher_forced_accuracy, FrozenLm, LmConfig, TransformerLm};
use crate::rng::{derive_seed_indexed, substream_indexed};
use crate::train::adamw::{AdamW, TrainConfig};
use crate::train::runlog::{block_checksum, EpochRecord, RunLog};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use std::time::Instant;

/// LM pretraining settings. The copy task is considered learned once dev
/// teacher-forced accuracy reaches `target_accuracy`; ending below
/// `min_accuracy` is a training failure.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub target_accuracy: f64,
    pub min_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 8,
                max_epochs: 40,
                ..TrainConfig::default()
            },
            target_accuracy: 0.99,
            min_accuracy: 0.90,
        }
    }
}

/// Oracle prompt for the copy task: the speech slots carry the true token
/// embeddings (identity projector), so those rows are embedding lookups and
/// their gradients flow into the tied table.
pub fn oracle_prompt(
    layout: &PromptLayout,
    lm: &TransformerLm,
    tokens: &[u32],
    training: bool,
) -> Result<AssembledPrompt> {
    let speech = SpeechTokenEmbeddings {
        embeddings: lm.embed_tokens(tokens)?,
    };
    let mut p = assemble_prompt(layout, &speech, lm, training.then_some(tokens))?;
    for (i, &t) in tokens.iter().enumerate() {
        p.token_ids[i] = Some(t);
    }
    Ok(p)
}

fn mean_dev_loss_oracle(
    lm: &TransformerLm,
    layout: &PromptLayout,
    dev: &[Vec<u32>],
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut acc_sum = 0.0;
    for seq in dev {
        let p = oracle_prompt(layout, lm, seq, true)?;
        let (logits, _) = lm_forward(lm, None, &p.embeddings, false)?;
        let (loss, _) = ce_loss_masked(&logits, &p.loss_mask, &p.targets())?;
        loss_sum += loss;
        acc_sum += teacher_forced_accuracy(&logits, &p.loss_mask, &p.targets());
    }
    let n = dev.len().max(1) as f64;
    Ok((loss_sum / n, acc_sum / n))
}

/// Train the tiny transformer on the transcription copy task with oracle
/// embeddings, then freeze it. Stops early once dev teacher-forced accuracy
/// reaches the target; fails if it ends below the minimum.
pub fn pretrain_toy_lm(
    lm_config: LmConfig,
    tokenizer: crate::model::Tokenizer,
    layout: &PromptLayout,
    train_seqs: &[Vec<u32>],
    dev_seqs: &[Vec<u32>],
    config: &PretrainConfig,
) -> Result<(FrozenLm, RunLog)> {
    config.train.validate()?;
    if train_seqs.is_empty() || dev_seqs.is_empty() {
        return Err(Error::Precondition("pretraining corpus is empty".into()));
    }
    if config.train.max_epochs == 0 {
        return Err(Error::TrainingFailed(
            "zero-epoch pretraining cannot produce a frozen LM".into(),
        ));
    }
    let mut lm = TransformerLm::new(lm_config, tokenizer, config.train.seed)?;
    let names = lm_block_names(&lm.config);
    let sizes: Vec<usize> = lm_blocks(&lm).iter().map(|b| b.len()).collect();
    let mut opt = AdamW::new(names.clone(), &sizes, config.train.clone());

    let mut log = RunLog::default();
    let mut best_acc = 0.0f64;
    for epoch in 0..config.train.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        order.shuffle(&mut substream_indexed(
            config.train.seed,
            "batch-order",
            epoch as u64,
        ));
        let mut train_loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(config.train.batch_size) {
            let mut grads = LmGrads::zeros(&lm);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let p = oracle_prompt(layout, &lm, &train_seqs[idx], true)?;
                let (logits, cache) = lm_forward(&lm, None, &p.embeddings, true)?;
                let cache = cache.unwrap();
                let (loss, dlogits) = ce_loss_masked(&logits, &p.loss_mask, &p.targets())?;
                if !loss.is_finite() {
                    return Err(Error::TrainingFailed(format!(
                        "non-finite pretraining loss at epoch {epoch}"
                    )));
                }
                batch_loss += loss;
                let back = lm_backward(&lm, None, &cache, &dlogits, &p.token_ids, true, false)?;
                grads.accumulate(&back.lm_grads.unwrap());
            }
            grads.scale(1.0 / batch.len() as f64);
            train_loss_sum += batch_loss / batch.len() as f64;
            n_batches += 1;
            let gblocks = grads.blocks();
            let mut pblocks = lm_blocks_mut(&mut lm);
            opt.step(&mut pblocks, &gblocks)?;
        }
        let (dev_loss, dev_acc) = mean_dev_loss_oracle(&lm, layout, dev_seqs)?;
        best_acc = best_acc.max(dev_acc);
        log.push(EpochRecord {
            epoch,
            train_loss: train_loss_sum / n_batches.max(1) as f64,
            dev_loss,
            dev_metric: Some(dev_acc),
            wall_s: t0.elapsed().as_secs_f64(),
            checksums: names
                .iter()
                .zip(lm_blocks(&lm))
                .map(|(n, b)| (n.clone(), block_checksum(b)))
                .collect(),
        });
        if dev_acc >= config.target_accuracy {
            break;
        }
    }
    if best_acc < config.min_accuracy {
        return Err(Error::TrainingFailed(format!(
            "pretraining reached only {:.1}% dev teacher-forced accuracy (need {:.0}%); \
             try more epochs or a larger model",
            best_acc * 100.0,
            config.min_accuracy * 100.0
        )));
    }
    Ok((FrozenLm::freeze(lm), log))
}

/// One paired example for connector training: stacked features plus the
/// reference transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectorExample {
    /// `n x d_z` downsampled features.
    pub features: Array2<f64>,
    pub transcript: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConnectorCorpus {
    pub train: Vec<ConnectorExample>,
    pub dev: Vec<ConnectorExample>,
}

/// LoRA hyperparameters for the fine-tuning variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraHyper {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraHyper {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
        }
    }
}

/// The trained connector: projector weights, optional adapters, history.
#[derive(Debug, Clone)]
pub struct TrainedConnector {
    pub projector: Projector,
    pub lora: Option<LoraSet>,
    pub log: RunLog,
    pub best_dev_loss: f64,
}

fn connector_dev_loss(
    lm: &TransformerLm,
    lora: Option<&LoraSet>,
    projector: &Projector,
    layout: &PromptLayout,
    dev: &[ConnectorExample],
) -> Result<f64> {
    let mut sum = 0.0;
    for ex in dev {
        let (e, _) = projector_forward_cached(projector, &ex.features)?;
        let p = assemble_prompt(layout, &e, lm, Some(&ex.transcript))?;
        let (logits, _) = lm_forward(lm, lora, &p.embeddings, false)?;
        let (loss, _) = ce_loss_masked(&logits, &p.loss_mask, &p.targets())?;
        sum += loss;
    }
    Ok(sum / dev.len().max(1) as f64)
}

/// Train the projector (and adapters when `lora` is given) against the
/// frozen LM by teacher-forced cross-entropy on the masked positions.
/// Early-stops on dev loss and returns the best-dev checkpoint; the frozen
/// LM is checksum-verified untouched.
pub fn train_projector(
    frozen: &FrozenLm,
    corpus: &ConnectorCorpus,
    layout: &PromptLayout,
    hidden_dim: usize,
    config: &TrainConfig,
    lora: Option<LoraHyper>,
) -> Result<TrainedConnector> {
    config.validate()?;
    if corpus.train.is_empty() || corpus.dev.is_empty() {
        return Err(Error::Precondition("connector corpus is empty".into()));
    }
    frozen.verify()?;
    let checksum_before = lm_checksum(frozen.lm());
    let lm = frozen.lm();
    let d_z = corpus.train[0].features.ncols();
    let d_llm = lm.config.d_model;

    let mut projector = Projector::init(d_z, hidden_dim, d_llm, config.seed);
    let mut lora_set = lora.map(|h| LoraSet::init(&lm.config, h.rank, h.alpha, config.seed));

    let mut names = Projector::block_names();
    let mut sizes: Vec<usize> = projector.blocks().iter().map(|b| b.len()).collect();
    if let Some(set) = &lora_set {
        names.extend(set.block_names());
        sizes.extend(set.blocks().iter().map(|b| b.len()));
    }
    let mut opt = AdamW::new(names.clone(), &sizes, config.clone());

    let mut log = RunLog::default();
    let mut best: Option<(Projector, Option<LoraSet>, f64)> = None;
    let mut epochs_since_improvement = 0usize;

    for epoch in 0..config.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        order.shuffle(&mut substream_indexed(config.seed, "batch-order", epoch as u64));
        let mut train_loss_sum = 0.0;
        let mut n_batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let mut pgrads = ProjectorGrads::zeros(&projector);
            let mut lgrads = lora_set.as_ref().map(LoraGrads::zeros);
            let mut batch_loss = 0.0;
            for &idx in batch {
                let ex = &corpus.train[idx];
                let (e, pcache) = projector_forward_cached(&projector, &ex.features)?;
                let p = assemble_prompt(layout, &e, lm, Some(&ex.transcript))?;
                let (logits, cache) =
                    lm_forward(lm, lora_set.as_ref(), &p.embeddings, true)?;
                let cache = cache.unwrap();
                let (loss, dlogits) = ce_loss_masked(&logits, &p.loss_mask, &p.targets())?;
                if !loss.is_finite() {
                    let best_msg = best
                        .as_ref()
                        .map(|(_, _, l)| format!("; last good checkpoint at dev loss {l:.6}"))
                        .unwrap_or_default();
                    return Err(Error::TrainingFailed(format!(
                        "non-finite connector loss at epoch {epoch}{best_msg}"
                    )));
                }
                batch_loss += loss;
                let back = lm_backward(
                    lm,
                    lora_set.as_ref(),
                    &cache,
                    &dlogits,
                    &p.token_ids,
                    false,
                    lora_set.is_some(),
                )?;
                let d_e = back
                    .d_input
                    .slice(ndarray::s![0..p.n_speech, ..])
                    .to_owned();
                pgrads.accumulate(&projector_backward(&projector, &ex.features, &pcache, &d_e)?);
                if let (Some(acc), Some(g)) = (lgrads.as_mut(), back.lora_grads) {
                    acc.accumulate(&g);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            pgrads.scale(inv);
            if let Some(g) = lgrads.as_mut() {
                g.scale(inv);
            }
            train_loss_sum += batch_loss * inv;
            n_batches += 1;

            let mut gblocks = pgrads.blocks();
            if let Some(g) = &lgrads {
                gblocks.extend(g.blocks());
            }
            let mut pblocks = projector.blocks_mut();
            if let Some(set) = lora_set.as_mut() {
                pblocks.extend(set.blocks_mut());
            }
            opt.step(&mut pblocks, &gblocks)?;
        }

        let dev_loss =
            connector_dev_loss(lm, lora_set.as_ref(), &projector, layout, &corpus.dev)?;
        let mut checksums: Vec<(String, u64)> = names
            .iter()
            .zip(projector.blocks().into_iter().chain(
                lora_set.as_ref().map(|s| s.blocks()).unwrap_or_default(),
            ))
            .map(|(n, b)| (n.clone(), block_checksum(b)))
            .collect();
        checksums.push(("frozen_lm".into(), lm_checksum(lm)));
        log.push(EpochRecord {
            epoch,
            train_loss: train_loss_sum / n_batches.max(1) as f64,
            dev_loss,
            dev_metric: None,
            wall_s: t0.elapsed().as_secs_f64(),
            checksums,
        });

        let improved = best.as_ref().map_or(true, |(_, _, l)| dev_loss < *l);
        if improved {
            let mut p = projector.clone();
            p.trained = true;
            best = Some((p, lora_set.clone(), dev_loss));
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= config.patience {
                break;
            }
        }
    }

    frozen.verify()?;
    if lm_checksum(frozen.lm()) != checksum_before {
        return Err(Error::TrainingFailed(
            "frozen LM checksum changed during connector training".into(),
        ));
    }

    match best {
        Some((projector, lora, best_dev_loss)) => Ok(TrainedConnector {
            projector,
            lora,
            log,
            best_dev_loss,
        }),
        // zero-epoch run: return the initialization unchanged
        None => Ok(TrainedConnector {
            projector,
            lora: lora_set,
            log,
            best_dev_loss: f64::INFINITY,
        }),
    }
}

/// Configuration of the synthetic desk-scale corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpusConfig {
    pub n_train: usize,
    pub n_dev: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub rate: RateDist,
    pub noise_sigma: f64,
    pub d_enc: usize,
    pub k: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_dev: 200,
            min_tokens: 3,
            max_tokens: 8,
            rate: RateDist {
                mean: 5.0,
                spread: 1.0,
            },
            noise_sigma: 0.1,
            d_enc: 16,
            k: 5,
        }
    }
}

/// Sample a reference token sequence from the content subset.
pub fn sample_token_sequence(content: &[u32], length: usize, seed: u64) -> Vec<u32> {
    let mut rng = crate::rng::substream(seed, "tokens");
    (0..length)
        .map(|_| content[rng.gen_range(0..content.len())])
        .collect()
}

fn utterance_length(cfg: &ToyCorpusConfig, seed: u64) -> usize {
    let mut rng = crate::rng::substream(seed, "length");
    rng.gen_range(cfg.min_tokens..=cfg.max_tokens)
}

/// Token sequences for LM pretraining (no acoustic side).
pub fn toy_pretrain_sequences(
    tokenizer: &crate::model::Tokenizer,
    cfg: &ToyCorpusConfig,
    seed: u64,
    split: &str,
    count: usize,
) -> Vec<Vec<u32>> {
    let content = tokenizer.content_tokens();
    (0..count)
        .map(|i| {
            let s = derive_seed_indexed(seed, split, i as u64);
            sample_token_sequence(&content, utterance_length(cfg, s), s)
        })
        .collect()
}

/// One synthetic utterance of the connector corpus, by split and index.
/// `rate` may differ from the corpus default (the toy tempo analogue);
/// tokens and lengths depend only on the seed, so rate changes never alter
/// the reference side.
pub fn toy_utterance(
    frozen: &FrozenLm,
    cfg: &ToyCorpusConfig,
    signature: &Array2<f64>,
    rate: RateDist,
    seed: u64,
    split: &str,
    index: usize,
) -> Result<ToyUtterance> {
    let lm = frozen.lm();
    let content = lm.tokenizer.content_tokens();
    let s = derive_seed_indexed(seed, split, index as u64);
    synth_utterance(
        lm.embed.view(),
        &content,
        signature,
        utterance_length(cfg, s),
        rate,
        cfg.noise_sigma,
        s,
    )
}

/// Stack a toy utterance's frames into a connector example.
pub fn toy_example(u: &ToyUtterance, k: usize) -> Result<ConnectorExample> {
    let z = downsample_stack(&u.frames, k)?;
    Ok(ConnectorExample {
        features: z.features,
        transcript: u.reference_tokens.clone(),
    })
}

/// Build the full train/dev connector corpus from a frozen LM.
pub fn toy_connector_corpus(
    frozen: &FrozenLm,
    cfg: &ToyCorpusConfig,
    seed: u64,
) -> Result<ConnectorCorpus> {
    let signature = signature_matrix(cfg.d_enc, frozen.lm().config.d_model, seed);
    let mut corpus = ConnectorCorpus::default();
    for i in 0..cfg.n_train {
        let u = toy_utterance(frozen, cfg, &signature, cfg.rate, seed, "connector-train", i)?;
        corpus.train.push(toy_example(&u, cfg.k)?);
    }
    for i in 0..cfg.n_dev {
        let u = toy_utterance(frozen, cfg, &signature, cfg.rate, seed, "connector-dev", i)?;
        corpus.dev.push(toy_example(&u, cfg.k)?);
    }
    Ok(corpus)
}
