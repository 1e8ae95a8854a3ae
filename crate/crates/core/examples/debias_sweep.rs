//! Trains the full-loss model, the CE-only baseline and a conventional captioner
//! (CE on every token) on strongly biased data and prints their metrics.
//!
//! Usage: `cargo run --release --example debias_sweep -- [lr] [batch] [epochs] [seeds]`

use std::time::Instant;

use nesycap::datagen::split_by_stereotype;
use nesycap::datagen::{generate_dataset, GenConfig};
use nesycap::kb::{ClassEntry, KnowledgeBase, Provenance};
use nesycap::losses::{CeScope, LossHyperParams};
use nesycap::reasoner::{explain_dataset, StateCounts, DEFAULT_THETA};
use nesycap::train::{evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let lr = arg(0, 0.2);
    let batch = arg(1, 32.0) as usize;
    let epochs = arg(2, 30.0) as usize;
    let seeds = arg(3, 5.0) as u64;

    for seed in 0..seeds {
        let gen = GenConfig {
            n_train: 5000,
            n_test: 1000,
            bias_rho: 0.9,
            seed,
            ..GenConfig::default()
        };
        let data = generate_dataset(&gen).expect("generate");
        let kb = KnowledgeBase {
            provenance: Provenance::External,
            threshold: 0.7,
            classes: gen
                .classes
                .iter()
                .map(|c| ClassEntry {
                    class: c.class.clone(),
                    members: c.subclasses.iter().map(|s| s.token.clone()).collect(),
                })
                .collect(),
        };
        let conventional = LossHyperParams {
            ce_scope: CeScope::AllTokens,
            ..LossHyperParams::baseline()
        };
        for (name, hp) in [
            ("full", LossHyperParams::default()),
            ("baseline", LossHyperParams::baseline()),
            ("ce-all", conventional),
        ] {
            let cfg = TrainConfig {
                hp,
                learning_rate: lr,
                batch_size: batch,
                epochs,
                seed,
                hidden: 16,
            };
            let t = Instant::now();
            let (params, hist) = train::<f64>(&cfg, &data.train, &kb).expect("train");
            let m = evaluate(&params, &data.test, &kb).expect("evaluate");
            let last = hist.last().unwrap();
            let (_, anti) = split_by_stereotype(&data.test, &kb).expect("split");
            let mut states = StateCounts::default();
            for e in explain_dataset(&params, &anti, &kb, DEFAULT_THETA).expect("explain") {
                states.add(&e.state.kind);
            }
            if std::env::var_os("TRACE").is_some() {
                for (i, h) in hist.iter().enumerate().step_by(hist.len() / 15) {
                    println!(
                        "  step {i:5} ce {:.4} conf {:.4} confu {:.4}",
                        h.ce, h.confidence, h.confusion
                    );
                }
            }
            println!(
                "seed {seed} {name:8} {:5.1}s loss {:.4} acc {:.3} sub {:.3} anti {:.3} overuse {:.3} abst {:.3} conf {:.4} anti states {:?}",
                t.elapsed().as_secs_f64(),
                last.total,
                m.caption_token_accuracy,
                m.subclass_accuracy,
                m.anti_stereo_subclass_accuracy.unwrap_or(f64::NAN),
                m.context_overuse_rate.unwrap_or(f64::NAN),
                m.abstention_rate.unwrap_or(f64::NAN),
                m.masked_mean_confusion,
                states,
            );
        }
    }
}
