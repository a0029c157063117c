// scratch: grid calibration for the synthetic benchmark
use daicl_core::embed::{EmbedderSpec, Metric};
use daicl_core::eval::{gen_synthetic_shift, SyntheticShiftSpec};
use daicl_core::prompt::Task;
use daicl_core::trainer::*;
use std::io::Write;
use std::time::Instant;

fn latent_of(tokens: &[daicl_core::corpus::Token]) -> Option<usize> {
    for t in tokens {
        let s = t.as_str();
        for (i, p) in ["neg", "neu", "pos"].iter().enumerate() {
            if s.starts_with(&format!("src{p}")) || s.starts_with(&format!("tgt{p}")) {
                return Some(i);
            }
        }
    }
    None
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let n_seeds: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let spec = SyntheticShiftSpec::default();
    let synth = gen_synthetic_shift(&spec).unwrap();
    let sa = |v: Vec<(Vec<daicl_core::corpus::Token>, daicl_core::corpus::Sentiment)>| -> Vec<LabeledExample> {
        v.into_iter().map(|(t, s)| LabeledExample::sa(t, s)).collect()
    };
    let data = TrainData::build(
        Task::Sa,
        sa(synth.source_train),
        sa(synth.source_dev),
        sa(synth.target_test.clone()),
        synth.target_unlabeled,
        &EmbedderSpec::ngram(32, 1234),
        Metric::Cosine,
        5,
    )
    .unwrap();

    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, ex) in data.source_train.iter().enumerate() {
        let q = latent_of(&ex.tokens);
        for &cid in &data.plans.target_for_train[i] {
            if latent_of(&data.target_sentences[cid]) == q {
                hits += 1;
            }
            total += 1;
        }
    }
    println!("retrieval precision (train→target): {:.3}", hits as f64 / total as f64);
    let mut t_hits = 0usize;
    let mut t_total = 0usize;
    for (i, ex) in data.target_test.iter().enumerate() {
        let q = latent_of(&ex.tokens);
        for &cid in &data.plans.target_for_test[i] {
            if latent_of(&data.target_sentences[cid]) == q {
                t_hits += 1;
            }
            t_total += 1;
        }
    }
    println!("retrieval precision (test→target):  {:.3}", t_hits as f64 / t_total as f64);
    std::io::stdout().flush().unwrap();

    for variant in [Variant::NoIcl, Variant::Daicl, Variant::IclSup, Variant::IclSource, Variant::IclRand] {
        for seed in 0..n_seeds {
            let cfg = TrainConfig {
                dim: 32, layers: 2, heads: 4, max_len: 128,
                batch_size: 16, epochs, k: 5, lr, seed,
                ..TrainConfig::desk_default()
            };
            let t = Instant::now();
            let out = train(variant, ModelKind::Encoder, &data, &cfg).unwrap();
            let test_best = evaluate(&out.checkpoint.store, &data, EvalSplit::TargetTest, variant, ModelKind::Encoder, &cfg).unwrap();
            let test_final = evaluate(&out.final_store, &data, EvalSplit::TargetTest, variant, ModelKind::Encoder, &cfg).unwrap();
            let dev: Vec<String> = out.history.iter().map(|h| format!("{:.2}", h.dev_metric)).collect();
            println!(
                "{:<11} seed={seed} best={test_best:.4} final={test_final:.4} dev=[{}] {:.0}s",
                variant.name(), dev.join(","), t.elapsed().as_secs_f64()
            );
            std::io::stdout().flush().unwrap();
        }
    }
}
