use asrlab_core::model::decode::decode_greedy;
use asrlab_core::model::prompt::PromptLayout;
use asrlab_core::model::{LmConfig, Tokenizer};
use asrlab_core::train::adamw::TrainConfig;
use asrlab_core::train::pipeline::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(40);
    let n_train: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2000);

    let layout = PromptLayout::default();
    let tokenizer = Tokenizer::RawIds { vocab_size: 32 };
    let corpus_cfg = ToyCorpusConfig { n_train, n_dev: 200, ..ToyCorpusConfig::default() };
    let lm_cfg = LmConfig { vocab_size: 32, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_seq_len: 1024 };
    let seed = 42u64;

    let train_seqs = toy_pretrain_sequences(&tokenizer, &corpus_cfg, seed, "pretrain-train", n_train);
    let dev_seqs = toy_pretrain_sequences(&tokenizer, &corpus_cfg, seed, "pretrain-dev", 200);

    let pretrain_cfg = PretrainConfig {
        train: TrainConfig { learning_rate: lr, batch_size: 8, max_epochs: epochs, seed, ..TrainConfig::default() },
        target_accuracy: 0.997,
        ..PretrainConfig::default()
    };
    let t0 = Instant::now();
    match pretrain_toy_lm(lm_cfg, tokenizer, &layout, &train_seqs, &dev_seqs, &pretrain_cfg) {
        Ok((frozen, log)) => {
            println!("pretrain ok in {:.1}s, epochs {} last tf_acc {:?}",
                t0.elapsed().as_secs_f64(), log.epochs.len(), log.epochs.last().unwrap().dev_metric);
            let mut exact = 0;
            for seq in &dev_seqs {
                let p = oracle_prompt(&layout, frozen.lm(), seq, false).unwrap();
                let out = decode_greedy(frozen.lm(), None, &p.embeddings, 32).unwrap();
                if &out.tokens == seq { exact += 1; }
            }
            println!("oracle decode exact-match: {}/{}", exact, dev_seqs.len());
        }
        Err(e) => println!("pretrain FAILED after {:.1}s: {e}", t0.elapsed().as_secs_f64()),
    }
}
