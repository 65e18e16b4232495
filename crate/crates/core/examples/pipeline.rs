//! End-to-end run on the synthetic benchmark, printing timings and the
//! recall numbers for each ranking.
//!
//! Settings can be overridden with `key=value` arguments using the train
//! config keys, e.g. `cargo run --release --example pipeline -- epochs_stage1=5`.

use std::time::Instant;

use tsg_core::checkpoint::Checkpoint;
use tsg_core::config::{KvConfig, ModelConfig};
use tsg_core::distill::RankStrategy;
use tsg_core::eval::{evaluate, GtImage};
use tsg_core::features::{synth_features, FeatureSource};
use tsg_core::generate::{predict, GenerateOptions};
use tsg_core::synth::{generate_dataset, GenConfig};
use tsg_core::trainer::{examples, train_stage1, train_stage2, train_stage2_label, TrainConfig};

fn main() -> tsg_core::Result<()> {
    let mut kv = KvConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments look like key=value");
        kv.insert(k, v);
    }
    let mut gen = GenConfig::default();
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    gen.apply(&kv)?;
    model.apply(&kv)?;
    train.apply(&kv)?;

    let t = Instant::now();
    let data = generate_dataset(&gen)?;
    let lexicon = data.lexicon()?;
    let ex = examples(&data.train, &model);
    let (cap, r1) = train_stage1(&ex, &model, &train, data.vocab.len())?;
    let ces: Vec<String> = r1
        .epochs
        .iter()
        .map(|e| format!("{:.3}", e.combined.unwrap()))
        .collect();
    println!(
        "stage 1: {:.1}s, combined CE by epoch {}",
        r1.wall_clock_secs,
        ces.join(" ")
    );
    let (head, r2) = train_stage2(&ex, &cap, &train, Some(&lexicon))?;
    let kls: Vec<String> = r2
        .epochs
        .iter()
        .map(|e| format!("{:.4}", e.kl.unwrap()))
        .collect();
    println!(
        "stage 2: {:.1}s, KL by epoch {}",
        r2.wall_clock_secs,
        kls.join(" ")
    );
    let raws: Vec<_> = data
        .train
        .iter()
        .map(|r| synth_features(r, cap.config()))
        .collect();
    let (label_head, r3) = train_stage2_label(&data.train, &raws, &cap, &train)?;
    println!(
        "stage 2-label: {:.1}s, final BCE {:.4}",
        r3.wall_clock_secs,
        r3.epochs.last().unwrap().bce.unwrap()
    );

    let gts: Vec<GtImage> = data
        .test
        .iter()
        .map(|r| GtImage::from_record(r, &data.vocab))
        .collect();
    let distilled = Checkpoint {
        captioner: cap.clone(),
        head: Some(head),
    };
    if let Ok(dir) = std::env::var("TSG_SAVE") {
        tsg_core::checkpoint::save(
            std::path::Path::new(&dir),
            &distilled.captioner,
            distilled.head.as_ref(),
        )?;
    }
    let labeled = Checkpoint {
        captioner: cap,
        head: Some(label_head),
    };
    for (name, ck, rank) in [
        ("eta", &distilled, RankStrategy::Eta),
        ("likelihood", &distilled, RankStrategy::Likelihood),
        ("beta_oracle", &distilled, RankStrategy::BetaOracle),
        ("label", &labeled, RankStrategy::Eta),
    ] {
        let opts = GenerateOptions {
            rank,
            pooling: train.pooling,
            mask_non_nouns: train.mask_non_nouns,
            ..Default::default()
        };
        let preds = predict(
            ck,
            &data.test,
            &data.vocab,
            &opts,
            Some(&lexicon),
            &FeatureSource::Synthetic,
        )?;
        let m = evaluate(&preds, &gts)?;
        println!(
            "{name:>12}: R-ns@20 {:.4}  R@20 {:.4}  mean recall {:.4}  mAP {:.4}  img recall {:.4}  METEOR {:.4}",
            m.recall_ns_at_20, m.recall_at_20, m.mean_recall, m.map, m.img_level_recall, m.meteor
        );
    }
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
