//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --release -p tsg-cli --test acceptance` runs everything;
//! criterion numbers as arguments (`-- 2 3 6`) run a subset. Criteria 8-10
//! reuse the pipeline trained for 7 and run it first when needed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tsg_core::captioner::Captioner;
use tsg_core::checkpoint;
use tsg_core::config::{Backbone, ModelConfig};
use tsg_core::dataset::load_dataset;
use tsg_core::distill::{assemble_second_order, kl_loss_with_grad, PooledAttention, Pooling};
use tsg_core::eval::{
    image_level_recall, important_recall_at_k, meteor_lite, relational_map, GtImage, GtRelation,
    PredictedRelation, Prediction,
};
use tsg_core::features::FeatureSource;
use tsg_core::linalg::Mat;
use tsg_core::rng::rng_for;
use tsg_core::synth::{generate_dataset, read_vocab_file, GenConfig};
use tsg_core::trainer::{
    distill_target, mean_kl, mixed_ce_grads, mixed_ce_loss, train_stage2_on_targets, TrainConfig,
};
use tsg_core::types::{BBox, WeakScene};

// Tolerances and budgets, as stated by the criteria.
const ATTENTION_TOL: f64 = 1e-6;
const ATTENTION_STEPS: usize = 1000;
const ATTENTION_BUDGET_SECS: f64 = 30.0;
const ASSEMBLY_TOL: f64 = 1e-9;
const ASSEMBLY_INSTANCES: usize = 200;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET_SECS: f64 = 120.0;
const DISTILL_STEPS: usize = 500;
const DISTILL_KL: f64 = 1e-3;
const METRIC_TOL: f64 = 1e-9;
const METRIC_INSTANCES: usize = 50;
const HEADLINE_RATIO: f64 = 2.0;
const PIPELINE_BUDGET_SECS: f64 = 600.0;
const ABLATION_SEEDS: [u64; 3] = [42, 43, 44];

// Settings chosen here rather than by the criteria.
const FD_STEP: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn main() {
    let wanted: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let run = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut pipeline: Option<Pipeline> = None;
    let mut failed = 0;
    let mut report = |n: u32, name: &str, result: Result<Outcome, String>| {
        let (tag, detail) = match result {
            Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} [{n:>2}] {name}: {detail}");
    };

    if run(1) {
        println!("N/A  [ 1] full-scale benchmark results: not reproducible on synthetic data, nothing to check");
    }
    if run(2) {
        report(2, "attention validity", attention_validity());
    }
    if run(3) {
        report(3, "assembly oracle", assembly_oracle());
    }
    if run(4) {
        report(4, "gradient checks", gradient_checks());
    }
    if run(6) {
        report(6, "metric oracles", metric_oracles());
    }
    let needs_pipeline = [5, 7, 8, 9, 10].iter().any(|&n| run(n));
    if needs_pipeline {
        match Pipeline::run() {
            Ok(p) => pipeline = Some(p),
            Err(e) => {
                for (n, name) in [
                    (5, "distillation convergence"),
                    (7, "eta vs likelihood"),
                    (8, "ablation directions"),
                    (9, "label upper bound"),
                    (10, "determinism"),
                ] {
                    if run(n) {
                        report(n, name, Err(format!("pipeline failed: {e}")));
                    }
                }
            }
        }
    }
    if let Some(p) = &pipeline {
        if run(5) {
            report(5, "distillation convergence", distillation_convergence(p));
        }
        if run(7) {
            report(7, "eta vs likelihood", headline(p));
        }
        if run(8) {
            report(8, "ablation directions", ablations(p));
        }
        if run(9) {
            report(9, "label upper bound", label_bound(p));
        }
        if run(10) {
            report(10, "determinism", determinism(p));
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- 2

fn attention_validity() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for (b, backbone) in [Backbone::UpDown, Backbone::Transformer]
        .into_iter()
        .enumerate()
    {
        let mut rng = rng_for(&[2, b as u64]);
        let vocab = 40;
        let mut done = 0;
        while done < ATTENTION_STEPS / 2 {
            let config = ModelConfig {
                backbone,
                seed: rng.gen(),
                ..ModelConfig::default()
            };
            let cap = Captioner::new(config.clone(), vocab).map_err(err)?;
            for _ in 0..10 {
                let k = rng.gen_range(1..=12);
                let attended = Mat::from_fn(config.d_l, k, |_, _| rng.gen_range(-3.0..3.0));
                let mut state = cap.initial_state(&attended).map_err(err)?;
                let mut word = 0;
                for _ in 0..rng.gen_range(1..=10) {
                    let out = cap.step_once(&state, word, &attended).map_err(err)?;
                    if out.alpha.len() != k {
                        return outcome(
                            false,
                            format!(
                                "{backbone}: alpha has {} entries for {k} objects",
                                out.alpha.len()
                            ),
                        );
                    }
                    let neg = out.alpha.iter().fold(0.0f64, |m, &a| m.max(-a));
                    let sum: f64 = out.alpha.iter().sum();
                    worst = worst.max(neg).max((sum - 1.0).abs());
                    state = out.state;
                    word = rng.gen_range(0..vocab);
                    done += 1;
                }
            }
        }
        steps += done;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        steps >= ATTENTION_STEPS && worst <= ATTENTION_TOL && secs < ATTENTION_BUDGET_SECS,
        format!("{steps} steps over both backbones, worst column error {worst:.1e} (tol {ATTENTION_TOL:.0e}), {secs:.1}s (limit {ATTENTION_BUDGET_SECS}s)"),
    )
}

// ---------------------------------------------------------------- 3

fn assembly_oracle() -> Result<Outcome, String> {
    let mut rng = rng_for(&[3]);
    let mut worst: f64 = 0.0;
    for _ in 0..ASSEMBLY_INSTANCES {
        let n = rng.gen_range(2..=8);
        let gamma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut all = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    all.push((i, j));
                }
            }
        }
        let pairs: Vec<(usize, usize)> = loop {
            let keep: Vec<_> = all.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
            if !keep.is_empty() {
                break keep;
            }
        };
        let pooled = PooledAttention {
            gamma: gamma.clone(),
            pooling: Pooling::Max,
            mask_applied: false,
        };
        let (delta, beta) = assemble_second_order(&pooled, &pairs).map_err(err)?;
        let want_delta: Vec<f64> = pairs.iter().map(|&(i, j)| gamma[i] + gamma[j]).collect();
        let z: f64 = want_delta.iter().map(|d| d.exp()).sum();
        for (k, d) in want_delta.iter().enumerate() {
            worst = worst
                .max((delta[k] - d).abs())
                .max((beta[k] - d.exp() / z).abs());
        }
    }
    outcome(
        worst <= ASSEMBLY_TOL,
        format!("{ASSEMBLY_INSTANCES} instances with n <= 8, worst deviation {worst:.1e} (tol {ASSEMBLY_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------- 4

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

fn kl_oracle(s: &[f64], beta: &[f64]) -> f64 {
    let z: f64 = s.iter().map(|v| v.exp()).sum();
    s.iter()
        .zip(beta)
        .map(|(v, b)| {
            let eta = v.exp() / z;
            eta * (eta / b).ln()
        })
        .sum()
}

fn gradient_checks() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = rng_for(&[4]);
    let mut kl_worst: f64 = 0.0;
    for _ in 0..20 {
        let m = rng.gen_range(2..=12);
        let s: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let beta: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let (_, grad) = kl_loss_with_grad(&s, &beta).map_err(err)?;
        for k in 0..m {
            let mut plus = s.clone();
            let mut minus = s.clone();
            plus[k] += FD_STEP;
            minus[k] -= FD_STEP;
            let numeric = (kl_oracle(&plus, &beta) - kl_oracle(&minus, &beta)) / (2.0 * FD_STEP);
            kl_worst = kl_worst.max(rel_err(grad[k], numeric));
        }
    }

    let gen = GenConfig {
        num_train: 1,
        num_val: 0,
        num_test: 0,
        objects: (2, 2),
        relations: (2, 2),
        mentions: (1, 2),
        ..GenConfig::default()
    };
    let data = generate_dataset(&gen).map_err(err)?;
    let record = &data.train[0];
    let scene = WeakScene::from(record);
    let mut ce_worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0;
    for backbone in [Backbone::UpDown, Backbone::Transformer] {
        let config = ModelConfig::tiny(backbone);
        let cap = Captioner::new(config.clone(), data.vocab.len()).map_err(err)?;
        let raw = FeatureSource::Synthetic.raw(record, &config).map_err(err)?;
        let (_, grads) = mixed_ce_grads(&cap, &scene, &raw, config.lambda).map_err(err)?;
        for (id, name, value) in cap.params().iter() {
            let analytic = grads.get_or_zeros(cap.params(), id);
            for k in 0..value.data().len() {
                let at = |delta: f64| -> Result<f64, String> {
                    let mut params = cap.params().clone();
                    params.get_mut(id).data_mut()[k] += delta;
                    let c = Captioner::from_params(config.clone(), data.vocab.len(), params)
                        .map_err(err)?;
                    mixed_ce_loss(&c, &scene, &raw, config.lambda).map_err(err)
                };
                let numeric = (at(FD_STEP)? - at(-FD_STEP)?) / (2.0 * FD_STEP);
                let e = rel_err(analytic.data()[k], numeric);
                if e > ce_worst {
                    ce_worst = e;
                    worst_name = format!("{backbone} {name}[{k}]");
                }
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        kl_worst < GRAD_TOL && ce_worst < GRAD_TOL && secs < GRAD_BUDGET_SECS,
        format!(
            "KL worst rel err {kl_worst:.1e}; mixed CE worst {ce_worst:.1e} at {worst_name} over {checked} entries of both backbones (tol {GRAD_TOL:.0e}); {secs:.1}s (limit {GRAD_BUDGET_SECS}s)"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = w * h;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn loc_oracle(p: &PredictedRelation, g: &GtRelation) -> f64 {
    iou_oracle(&p.sub_box, &g.sub_box).min(iou_oracle(&p.obj_box, &g.obj_box))
}

const LANG: [f64; 6] = [0.0, 0.05, 0.10, 0.15, 0.20, 0.25];
const IOU: [f64; 5] = [0.2, 0.3, 0.4, 0.5, 0.6];

fn preds_for<'a>(preds: &'a [Prediction], id: &str) -> &'a [PredictedRelation] {
    preds
        .iter()
        .find(|p| p.image_id == id)
        .map_or(&[], |p| &p.relations)
}

/// Every prediction of every image in descending score order; ties by image
/// id, then by position.
fn ranked(preds: &[Prediction], gts: &[GtImage]) -> Vec<(usize, usize)> {
    let mut all = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        for k in 0..preds_for(preds, &g.image_id).len() {
            all.push((gi, k));
        }
    }
    let score = |&(gi, k): &(usize, usize)| preds_for(preds, &gts[gi].image_id)[k].score;
    all.sort_by(|a, b| {
        score(b)
            .partial_cmp(&score(a))
            .unwrap()
            .then(gts[a.0].image_id.cmp(&gts[b.0].image_id))
            .then(a.1.cmp(&b.1))
    });
    all
}

fn map_oracle(preds: &[Prediction], gts: &[GtImage]) -> f64 {
    let total: usize = gts.iter().map(|g| g.relations.len()).sum();
    let order = ranked(preds, gts);
    let mut sum = 0.0;
    for theta in LANG {
        for t in IOU {
            let mut matched: BTreeSet<(usize, usize)> = BTreeSet::new();
            let mut hits = Vec::new();
            for &(gi, k) in &order {
                let p = &preds_for(preds, &gts[gi].image_id)[k];
                // Best-localized free GT that clears both thresholds; the
                // first one wins ties.
                let mut pick: Option<(usize, f64)> = None;
                for (j, g) in gts[gi].relations.iter().enumerate() {
                    let loc = loc_oracle(p, g);
                    let ok = !matched.contains(&(gi, j))
                        && loc > t
                        && meteor_lite(&p.words, &g.words) > theta;
                    if ok && pick.is_none_or(|(_, best)| loc > best) {
                        pick = Some((j, loc));
                    }
                }
                if let Some((j, _)) = pick {
                    matched.insert((gi, j));
                }
                hits.push(pick.is_some());
            }
            // AP: precision at each true positive, summed, over all GT.
            let mut ap = 0.0;
            for r in 0..hits.len() {
                if hits[r] {
                    let tp = hits[..=r].iter().filter(|&&h| h).count();
                    ap += tp as f64 / (r + 1) as f64;
                }
            }
            sum += ap / total as f64;
        }
    }
    sum / 30.0
}

fn recall_oracle(preds: &[Prediction], gts: &[GtImage], k: usize, language: bool) -> f64 {
    let thresholds: Vec<Option<f64>> = if language {
        LANG.iter().map(|&t| Some(t)).collect()
    } else {
        vec![None]
    };
    let mut per_image = Vec::new();
    for g in gts {
        let important: Vec<&GtRelation> = g.relations.iter().filter(|r| r.important).collect();
        if important.is_empty() {
            continue;
        }
        let rels = preds_for(preds, &g.image_id);
        let mut idx: Vec<usize> = (0..rels.len()).collect();
        idx.sort_by(|&a, &b| {
            rels[b]
                .score
                .partial_cmp(&rels[a].score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let top: Vec<&PredictedRelation> = idx.iter().take(k).map(|&i| &rels[i]).collect();
        let mut acc = 0.0;
        for theta in &thresholds {
            let mut hit = 0;
            for gt in &important {
                let found = top.iter().any(|p| {
                    loc_oracle(p, gt) > 0.5
                        && theta.is_none_or(|t| meteor_lite(&p.words, &gt.words) > t)
                });
                if found {
                    hit += 1;
                }
            }
            acc += hit as f64 / important.len() as f64;
        }
        per_image.push(acc / thresholds.len() as f64);
    }
    if per_image.is_empty() {
        0.0
    } else {
        per_image.iter().sum::<f64>() / per_image.len() as f64
    }
}

fn image_recall_oracle(preds: &[Prediction], gts: &[GtImage]) -> f64 {
    let total: usize = gts.iter().map(|g| g.relations.len()).sum();
    let mut sum = 0.0;
    for theta in LANG {
        let mut hit = 0;
        for g in gts {
            let rels = preds_for(preds, &g.image_id);
            for gt in &g.relations {
                if rels
                    .iter()
                    .any(|p| meteor_lite(&p.words, &gt.words) > theta)
                {
                    hit += 1;
                }
            }
        }
        sum += hit as f64 / total as f64;
    }
    sum / LANG.len() as f64
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::from_corners(x1, y1, x2, y2).unwrap()
}

fn micro_instance(rng: &mut ChaCha8Rng) -> (Vec<Prediction>, Vec<GtImage>) {
    const PHRASES: [&str; 6] = [
        "man on horse",
        "dog near car",
        "man",
        "dog car",
        "horse on man",
        "cat",
    ];
    let boxes: Vec<BBox> = (0..4)
        .map(|i| corners(30.0 * i as f64, 0.0, 30.0 * i as f64 + 20.0, 20.0))
        .collect();
    let jitter = |b: &BBox, rng: &mut ChaCha8Rng| {
        let [x1, y1, x2, y2] = b.corners();
        let dx = [0.0, 2.0, 5.0, 8.0, 12.0][rng.gen_range(0..5)];
        corners(x1 + dx, y1, x2 + dx, y2)
    };
    let images = rng.gen_range(1..=3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for im in 0..images {
        let id = format!("img{im}");
        let gt_rels: Vec<GtRelation> = (0..rng.gen_range(1..=3))
            .map(|_| GtRelation {
                sub_box: boxes[rng.gen_range(0..4)],
                obj_box: boxes[rng.gen_range(0..4)],
                words: words(PHRASES[rng.gen_range(0..3)]),
                important: rng.gen_bool(0.6),
            })
            .collect();
        let rels: Vec<PredictedRelation> = (0..rng.gen_range(0..=4))
            .map(|_| {
                let base = &gt_rels[rng.gen_range(0..gt_rels.len())];
                PredictedRelation {
                    sub_box: jitter(&base.sub_box, rng),
                    obj_box: jitter(&base.obj_box, rng),
                    words: words(PHRASES[rng.gen_range(0..PHRASES.len())]),
                    // coarse scores so cross-image ties occur
                    score: rng.gen_range(0..4) as f64 / 4.0,
                }
            })
            .collect();
        preds.push(Prediction {
            image_id: id.clone(),
            caption: vec![],
            relations: rels,
        });
        gts.push(GtImage {
            image_id: id,
            caption: vec![],
            relations: gt_rels,
        });
    }
    (preds, gts)
}

fn hand_case() -> (Vec<Prediction>, Vec<GtImage>, f64) {
    let (a, b) = (
        corners(0.0, 0.0, 10.0, 10.0),
        corners(20.0, 0.0, 30.0, 10.0),
    );
    let (c, d) = (
        corners(0.0, 40.0, 10.0, 50.0),
        corners(20.0, 40.0, 30.0, 50.0),
    );
    let shift = |x: BBox| {
        corners(
            x.corners()[0] + 5.0,
            x.corners()[1],
            x.corners()[2] + 5.0,
            x.corners()[3],
        )
    };
    let rel = |s, o, w: &str, score| PredictedRelation {
        sub_box: s,
        obj_box: o,
        words: words(w),
        score,
    };
    let gts = vec![GtImage {
        image_id: "hand".into(),
        caption: vec![],
        relations: vec![
            GtRelation {
                sub_box: a,
                obj_box: b,
                words: words("man on horse"),
                important: true,
            },
            GtRelation {
                sub_box: c,
                obj_box: d,
                words: words("dog near car"),
                important: true,
            },
        ],
    }];
    let preds = vec![Prediction {
        image_id: "hand".into(),
        caption: vec![],
        relations: vec![
            rel(a, b, "man on horse", 0.9),
            // IoU 1/3 with the second GT; METEOR("dog", "dog near car") = 5/28
            rel(shift(c), shift(d), "dog", 0.8),
            rel(
                corners(100.0, 100.0, 110.0, 110.0),
                corners(200.0, 200.0, 210.0, 210.0),
                "cat",
                0.7,
            ),
        ],
    }];
    // Rank 1 matches everywhere (AP 1/2 alone). Rank 2 also matches when
    // IoU > t (t = 0.2, 0.3) and METEOR > theta (theta <= 0.15), giving
    // AP 1 in those 2 x 4 cells. mAP = (8 * 1 + 22 * 0.5) / 30.
    (preds, gts, 19.0 / 30.0)
}

fn metric_oracles() -> Result<Outcome, String> {
    let mut worst: f64 = 0.0;
    let mut where_worst = String::new();
    let mut rng = rng_for(&[6]);
    let mut check = |name: &str, got: f64, want: f64, inst: usize| {
        let e = (got - want).abs();
        if e > worst || where_worst.is_empty() {
            worst = worst.max(e);
            where_worst = format!("{name} on instance {inst}");
        }
    };
    let (hp, hg, want) = hand_case();
    let got = relational_map(&hp, &hg).map_err(err)?;
    let hand_err = (got - want).abs().max((map_oracle(&hp, &hg) - want).abs());
    let mut nontrivial = 0;
    for inst in 0..METRIC_INSTANCES {
        let (p, g) = micro_instance(&mut rng);
        let m = relational_map(&p, &g).map_err(err)?;
        if m > 0.0 && m < 1.0 {
            nontrivial += 1;
        }
        check("mAP", m, map_oracle(&p, &g), inst);
        for k in [1, 2, 3] {
            check(
                "R@K",
                important_recall_at_k(&p, &g, k, true).map_err(err)?,
                recall_oracle(&p, &g, k, true),
                inst,
            );
            check(
                "R-ns@K",
                important_recall_at_k(&p, &g, k, false).map_err(err)?,
                recall_oracle(&p, &g, k, false),
                inst,
            );
        }
        check(
            "image-level recall",
            image_level_recall(&p, &g),
            image_recall_oracle(&p, &g),
            inst,
        );
    }
    outcome(
        worst <= METRIC_TOL && hand_err <= METRIC_TOL,
        format!(
            "{METRIC_INSTANCES} micro-instances ({nontrivial} with 0 < mAP < 1), worst deviation {worst:.1e} ({where_worst}); hand 30-threshold mAP {got:.6} vs {want:.6} (tol {METRIC_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------- pipeline

fn tsg(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tsg"))
        .args(args)
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!(
            "tsg {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn metrics(path: &Path) -> Result<Value, String> {
    serde_json::from_str(&fs::read_to_string(path).map_err(err)?).map_err(err)
}

fn metric(m: &Value, key: &str) -> Result<f64, String> {
    m[key]
        .as_f64()
        .ok_or_else(|| format!("metrics lack `{key}`"))
}

/// Artifacts of the default pipeline, trained once via the CLI.
struct Pipeline {
    root: PathBuf,
    data: PathBuf,
    stage1: PathBuf,
    stage2: PathBuf,
    /// (ranking, eval dir)
    evals: Vec<(&'static str, PathBuf)>,
    secs: f64,
    stage_secs: Vec<(&'static str, f64)>,
}

impl Pipeline {
    fn run() -> Result<Self, String> {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        let _ = fs::remove_dir_all(&root);
        fs::create_dir_all(&root).map_err(err)?;
        let d = |s: &str| root.join(s);
        let (data, stage1, stage2) = (d("data"), d("s1"), d("s2"));
        let start = Instant::now();
        let mut stage_secs = Vec::new();
        let mut timed = |name: &'static str, args: &[&str]| -> Result<(), String> {
            let t = Instant::now();
            tsg(args)?;
            stage_secs.push((name, t.elapsed().as_secs_f64()));
            Ok(())
        };
        timed("dataset", &["dataset-synth", "--out", p(&data)])?;
        timed(
            "stage 1",
            &[
                "train",
                "--data",
                p(&data),
                "--stage",
                "1",
                "--out",
                p(&stage1),
            ],
        )?;
        timed(
            "stage 2",
            &[
                "train",
                "--data",
                p(&data),
                "--stage",
                "2",
                "--init",
                p(&stage1),
                "--out",
                p(&stage2),
            ],
        )?;
        let mut evals = Vec::new();
        for rank in ["eta", "likelihood"] {
            let gen = d(&format!("gen-{rank}"));
            let ev = d(&format!("eval-{rank}"));
            timed(
                "generate",
                &[
                    "generate",
                    "--data",
                    p(&data),
                    "--checkpoint",
                    p(&stage2),
                    "--rank",
                    rank,
                    "--out",
                    p(&gen),
                ],
            )?;
            timed(
                "eval",
                &[
                    "eval",
                    "--predictions",
                    p(&gen.join("predictions.jsonl")),
                    "--data",
                    p(&data),
                    "--out",
                    p(&ev),
                ],
            )?;
            evals.push((rank, ev));
        }
        Ok(Self {
            root,
            data,
            stage1,
            stage2,
            evals,
            secs: start.elapsed().as_secs_f64(),
            stage_secs,
        })
    }

    fn eval_dir(&self, rank: &str) -> &Path {
        &self
            .evals
            .iter()
            .find(|(r, _)| *r == rank)
            .expect("ranking evaluated")
            .1
    }

    /// Stage 2 from `init` with extra flags, then eta generation and eval.
    fn mean_recall(&self, init: &Path, tag: &str, flags: &[&str]) -> Result<f64, String> {
        let head = self.root.join(format!("s2-{tag}"));
        let gen = self.root.join(format!("gen-{tag}"));
        let ev = self.root.join(format!("eval-{tag}"));
        let mut args = vec![
            "train",
            "--data",
            p(&self.data),
            "--init",
            p(init),
            "--out",
            p(&head),
        ];
        args.extend_from_slice(flags);
        tsg(&args)?;
        let features = strip_stage_and_seed(flags);
        let mut args = vec![
            "generate",
            "--data",
            p(&self.data),
            "--checkpoint",
            p(&head),
            "--out",
            p(&gen),
        ];
        args.extend_from_slice(&features);
        tsg(&args)?;
        tsg(&[
            "eval",
            "--predictions",
            p(&gen.join("predictions.jsonl")),
            "--data",
            p(&self.data),
            "--out",
            p(&ev),
        ])?;
        metric(&metrics(&ev.join("metrics.json"))?, "mean_recall")
    }
}

/// Drops `--stage X` and `--seed X` pairs, which `generate` does not take.
fn strip_stage_and_seed<'a>(flags: &[&'a str]) -> Vec<&'a str> {
    let mut out = Vec::new();
    let mut skip = false;
    for f in flags {
        if skip {
            skip = false;
            continue;
        }
        if *f == "--stage" || *f == "--seed" {
            skip = true;
            continue;
        }
        out.push(*f);
    }
    out
}

// ---------------------------------------------------------------- 5

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let cov: f64 = ra
        .iter()
        .zip(&rb)
        .map(|(x, y)| (x - mean) * (y - mean))
        .sum();
    let var: f64 = ra.iter().map(|x| (x - mean) * (x - mean)).sum();
    cov / var
}

fn distillation_convergence(pl: &Pipeline) -> Result<Outcome, String> {
    let ck = checkpoint::load(&pl.stage1).map_err(err)?;
    let cap = ck.captioner;
    let (vocab, _) = read_vocab_file(&pl.data.join("vocab.tsv")).map_err(err)?;
    let records = load_dataset(&pl.data.join("train.jsonl"), &vocab).map_err(err)?;
    let config = TrainConfig {
        epochs_stage2: DISTILL_STEPS,
        pooling: Pooling::Max,
        mask_non_nouns: false,
        ..TrainConfig::default()
    };
    for r in &records {
        let scene = WeakScene::from(r);
        let pairs: Vec<(usize, usize)> = scene
            .relations
            .iter()
            .filter_map(|rel| {
                Some((
                    scene.object_index(rel.subject_id)?,
                    scene.object_index(rel.object_id)?,
                ))
            })
            .collect();
        if pairs.len() < 3 {
            continue;
        }
        let raw = FeatureSource::Synthetic.raw(r, cap.config()).map_err(err)?;
        let target = distill_target(&cap, &scene, &raw, &pairs, &config, None).map_err(err)?;
        let mut sorted = target.beta.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] < 1e-9) {
            continue;
        }
        let targets = [target];
        let (head, _) = train_stage2_on_targets(&targets, &cap, &config).map_err(err)?;
        let kl = mean_kl(&head, &targets).map_err(err)?;
        let (_, eta) = head.scores(&targets[0].inputs).map_err(err)?;
        let rho = spearman(&eta, &targets[0].beta);
        return outcome(
            kl < DISTILL_KL && (rho - 1.0).abs() < 1e-12,
            format!(
                "image {} with {} pairs, {DISTILL_STEPS} Adam steps at lr {}: KL {kl:.2e} (tol {DISTILL_KL:.0e}), Spearman {rho:.4}",
                r.image_id,
                pairs.len(),
                config.lr_stage2
            ),
        );
    }
    Err("no training image with three or more distinct beta entries".into())
}

// ---------------------------------------------------------------- 7

fn headline(pl: &Pipeline) -> Result<Outcome, String> {
    let eta = metric(
        &metrics(&pl.eval_dir("eta").join("metrics.json"))?,
        "recall_ns_at_20",
    )?;
    let lik = metric(
        &metrics(&pl.eval_dir("likelihood").join("metrics.json"))?,
        "recall_ns_at_20",
    )?;
    let ratio = if lik > 0.0 { eta / lik } else { f64::INFINITY };
    let stages: Vec<String> = pl
        .stage_secs
        .iter()
        .map(|(n, s)| format!("{n} {s:.0}s"))
        .collect();
    outcome(
        ratio >= HEADLINE_RATIO && pl.secs < PIPELINE_BUDGET_SECS,
        format!(
            "R-ns@20 eta {eta:.2} vs likelihood {lik:.2}, ratio {ratio:.2} (need >= {HEADLINE_RATIO}); pipeline {:.0}s (limit {PIPELINE_BUDGET_SECS}s: {})",
            pl.secs,
            stages.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn ablations(pl: &Pipeline) -> Result<Outcome, String> {
    let mut max_wins = 0;
    let mut sous_wins = 0;
    let mut rows = Vec::new();
    for seed in ABLATION_SEEDS {
        let s = seed.to_string();
        let (stage1, sous_max) = if seed == 42 {
            (
                pl.stage1.clone(),
                metric(
                    &metrics(&pl.eval_dir("eta").join("metrics.json"))?,
                    "mean_recall",
                )?,
            )
        } else {
            let stage1 = pl.root.join(format!("s1-seed{seed}"));
            tsg(&[
                "train",
                "--data",
                p(&pl.data),
                "--stage",
                "1",
                "--seed",
                &s,
                "--out",
                p(&stage1),
            ])?;
            let r = pl.mean_recall(
                &stage1,
                &format!("seed{seed}-SOUS-max"),
                &["--stage", "2", "--seed", &s],
            )?;
            (stage1, r)
        };
        let mean = pl.mean_recall(
            &stage1,
            &format!("seed{seed}-SOUS-mean"),
            &["--stage", "2", "--seed", &s, "--pooling", "mean"],
        )?;
        let so = pl.mean_recall(
            &stage1,
            &format!("seed{seed}-SO-max"),
            &["--stage", "2", "--seed", &s, "--features", "SO"],
        )?;
        max_wins += usize::from(sous_max >= mean);
        sous_wins += usize::from(sous_max >= so);
        rows.push(format!(
            "seed {seed}: SOUS/MAX {sous_max:.2}, SOUS/MEAN {mean:.2}, SO/MAX {so:.2}"
        ));
    }
    let n = ABLATION_SEEDS.len();
    outcome(
        2 * max_wins > n && 2 * sous_wins > n,
        format!(
            "MAX >= MEAN on {max_wins}/{n} seeds, SOUS >= SO on {sous_wins}/{n} (mean recall; {})",
            rows.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn label_bound(pl: &Pipeline) -> Result<Outcome, String> {
    let distill = metric(
        &metrics(&pl.eval_dir("eta").join("metrics.json"))?,
        "mean_recall",
    )?;
    let label = pl.mean_recall(&pl.stage1, "label", &["--stage", "2-label"])?;
    outcome(
        label >= distill,
        format!("mean recall label {label:.2} vs distill {distill:.2}"),
    )
}

// ---------------------------------------------------------------- 10

fn determinism(pl: &Pipeline) -> Result<Outcome, String> {
    let replay_root = pl.root.join("replay");
    let _ = fs::remove_dir_all(&replay_root);
    let mut dirs: Vec<PathBuf> = vec![pl.data.clone(), pl.stage1.clone(), pl.stage2.clone()];
    for rank in ["eta", "likelihood"] {
        dirs.push(pl.root.join(format!("gen-{rank}")));
        dirs.push(pl.eval_dir(rank).to_path_buf());
    }
    let mut compared = Vec::new();
    for dir in &dirs {
        let name = dir.file_name().unwrap().to_str().unwrap();
        let again = replay_root.join(name);
        let manifest = dir.join("manifest.json");
        tsg(&["replay", p(&manifest), "--out", p(&again)])?;
        let recorded: Value = metrics(&manifest)?;
        for out in recorded["outputs"]
            .as_array()
            .ok_or("manifest lacks outputs")?
        {
            let file = out.as_str().ok_or("bad output name")?;
            if file == "train_report.json" {
                // carries wall-clock timings
                continue;
            }
            let a = fs::read(dir.join(file)).map_err(err)?;
            let b = fs::read(again.join(file)).map_err(err)?;
            if a != b {
                return outcome(false, format!("{name}/{file} differs after replay"));
            }
            compared.push(format!("{name}/{file}"));
        }
    }
    outcome(
        true,
        format!(
            "{} files byte-identical after replaying every manifest: {}",
            compared.len(),
            compared.join(", ")
        ),
    )
}
