//! Two-stage training: the shared captioner on mixed cross-entropy, then
//! the importance head on KL against distilled attention (or, as an upper
//! bound, on the annotated importance flags).

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::captioner::{Captioner, DecodeMode};
use crate::config::{KvConfig, ModelConfig};
use crate::distill::{self, FeatureMode, HeadInputs, ImportanceHead, Pooling};
use crate::error::{Error, Result};
use crate::features::{synth_features, FeatureSet, FeatureSource, RawFeatures};
use crate::linalg::Mat;
use crate::params::{Grads, ParamStore};
use crate::rng::rng_for;
use crate::synth::PosLexicon;
use crate::types::{SceneRecord, WeakScene};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Supervision {
    #[default]
    Distill,
    Label,
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distill" => Ok(Supervision::Distill),
            "label" => Ok(Supervision::Label),
            _ => Err(Error::Config(format!(
                "unknown supervision mode `{s}` (expected distill or label)"
            ))),
        }
    }
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Supervision::Distill => "distill",
            Supervision::Label => "label",
        })
    }
}

/// Which caption the distillation attention is collected on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    #[default]
    TeacherForced,
    Greedy,
}

impl FromStr for AttentionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher_forced" => Ok(AttentionSource::TeacherForced),
            "greedy" => Ok(AttentionSource::Greedy),
            _ => Err(Error::Config(format!(
                "unknown attention source `{s}` (expected teacher_forced or greedy)"
            ))),
        }
    }
}

impl fmt::Display for AttentionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionSource::TeacherForced => "teacher_forced",
            AttentionSource::Greedy => "greedy",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Config(format!(
                "unknown optimizer `{s}` (expected sgd or adam)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Scenes per stage-1 update. Stage 2 always updates per image.
    pub batch_size: usize,
    pub seed: u64,
    pub supervision: Supervision,
    pub pooling: Pooling,
    pub feature_mode: FeatureMode,
    pub mask_non_nouns: bool,
    pub attention_source: AttentionSource,
    pub optimizer_stage1: OptimizerKind,
    pub optimizer_stage2: OptimizerKind,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.7,
            lr_stage1: 0.005,
            lr_stage2: 0.0005,
            epochs_stage1: 10,
            epochs_stage2: 40,
            batch_size: 8,
            seed: 42,
            supervision: Supervision::Distill,
            pooling: Pooling::Max,
            feature_mode: FeatureMode::SOUS,
            mask_non_nouns: false,
            attention_source: AttentionSource::TeacherForced,
            optimizer_stage1: OptimizerKind::Adam,
            optimizer_stage2: OptimizerKind::Adam,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "lambda",
        "lr_stage1",
        "lr_stage2",
        "epochs_stage1",
        "epochs_stage2",
        "batch_size",
        "seed",
        "supervision_mode",
        "pooling",
        "feature_mode",
        "masking",
        "attention_source",
        "optimizer_stage1",
        "optimizer_stage2",
        "clip_norm",
    ];

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        kv.set(&mut self.lambda, "lambda")?;
        kv.set(&mut self.lr_stage1, "lr_stage1")?;
        kv.set(&mut self.lr_stage2, "lr_stage2")?;
        kv.set(&mut self.epochs_stage1, "epochs_stage1")?;
        kv.set(&mut self.epochs_stage2, "epochs_stage2")?;
        kv.set(&mut self.batch_size, "batch_size")?;
        kv.set(&mut self.seed, "seed")?;
        kv.set(&mut self.supervision, "supervision_mode")?;
        kv.set(&mut self.pooling, "pooling")?;
        kv.set(&mut self.feature_mode, "feature_mode")?;
        kv.set(&mut self.mask_non_nouns, "masking")?;
        kv.set(&mut self.attention_source, "attention_source")?;
        kv.set(&mut self.optimizer_stage1, "optimizer_stage1")?;
        kv.set(&mut self.optimizer_stage2, "optimizer_stage2")?;
        kv.set(&mut self.clip_norm, "clip_norm")?;
        self.validate()
    }
}

/// Gradient descent with a fixed step, or Adam.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, m)| Mat::zeros(m.rows(), m.cols()))
                .collect()
        };
        let (m, v) = match kind {
            OptimizerKind::Sgd => (vec![], vec![]),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Self {
            kind,
            lr,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let k = id.index();
                    let c1 = 1.0 - ADAM_B1.powi(self.t as i32);
                    let c2 = 1.0 - ADAM_B2.powi(self.t as i32);
                    let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
                    for (((w, d), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *mi = ADAM_B1 * *mi + (1.0 - ADAM_B1) * d;
                        *vi = ADAM_B2 * *vi + (1.0 - ADAM_B2) * d * d;
                        *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// A training scene without importance flags, plus its raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub scene: WeakScene,
    pub raw: RawFeatures,
}

/// Synthetic-feature examples for `records`; flags are dropped.
pub fn examples(records: &[SceneRecord], config: &ModelConfig) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            scene: WeakScene::from(r),
            raw: synth_features(r, config),
        })
        .collect()
}

pub fn examples_from(
    records: &[SceneRecord],
    config: &ModelConfig,
    source: &FeatureSource,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            Ok(Example {
                scene: WeakScene::from(r),
                raw: source.raw(r, config)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub image_ce: f64,
    pub relational_ce: f64,
    pub combined: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub image_ce: Option<f64>,
    pub relational_ce: Option<f64>,
    pub combined: Option<f64>,
    pub kl: Option<f64>,
    pub bce: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    /// Filled in by callers that evaluate after training.
    pub final_metrics: Option<serde_json::Value>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            ..Self::default()
        }
    }
}

/// Mixed cross-entropy of one scene: image CE plus `lambda` times the mean
/// relational CE, teacher-forced.
pub fn mixed_ce_loss(
    captioner: &Captioner,
    scene: &WeakScene,
    raw: &RawFeatures,
    lambda: f64,
) -> Result<f64> {
    let mut g = Graph::untracked(captioner.params());
    let (loss, _, _) = captioner.mixed_ce_graph(&mut g, scene, raw, lambda)?;
    Ok(g.scalar(loss))
}

/// Loss parts and gradients of [`mixed_ce_loss`].
pub fn mixed_ce_grads(
    captioner: &Captioner,
    scene: &WeakScene,
    raw: &RawFeatures,
    lambda: f64,
) -> Result<(StepLog, Grads)> {
    let mut g = Graph::tracked(captioner.params());
    let (loss, img, rel) = captioner.mixed_ce_graph(&mut g, scene, raw, lambda)?;
    let log = StepLog {
        epoch: 0,
        step: 0,
        image_ce: img,
        relational_ce: rel,
        combined: g.scalar(loss),
    };
    Ok((log, g.backward(loss)))
}

fn diverged(stage: &str, epoch: usize, step: usize, what: &str) -> Error {
    Error::Diverged(format!(
        "{stage} epoch {} step {}: {what}",
        epoch + 1,
        step + 1
    ))
}

/// Stage 1: trains a fresh captioner on mixed cross-entropy.
pub fn train_stage1(
    data: &[Example],
    model: &ModelConfig,
    config: &TrainConfig,
    vocab_size: usize,
) -> Result<(Captioner, TrainReport)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let start = Instant::now();
    let mut model = model.clone();
    model.lambda = config.lambda;
    let mut cap = Captioner::new(model, vocab_size)?;
    let mut opt = Optimizer::new(config.optimizer_stage1, config.lr_stage1, cap.params());
    let mut report = TrainReport::new("1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs_stage1 {
        order.shuffle(&mut rng_for(&[config.seed, 0x5A1, epoch as u64]));
        let (mut img_sum, mut rel_sum, mut comb_sum) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let mut acc = Grads::zeros_like(cap.params());
            let (mut bi, mut br, mut bc) = (0.0, 0.0, 0.0);
            for &k in batch {
                let ex = &data[k];
                let (log, grads) = mixed_ce_grads(&cap, &ex.scene, &ex.raw, config.lambda)?;
                if !log.combined.is_finite() {
                    return Err(diverged(
                        "stage 1",
                        epoch,
                        step,
                        &format!("loss is {} on `{}`", log.combined, ex.scene.image_id),
                    ));
                }
                acc.accumulate(&grads);
                bi += log.image_ce;
                br += log.relational_ce;
                bc += log.combined;
            }
            let b = batch.len() as f64;
            acc.scale(1.0 / b);
            if !acc.is_finite() {
                return Err(diverged("stage 1", epoch, step, "non-finite gradient"));
            }
            acc.clip_norm(config.clip_norm);
            opt.step(cap.params_mut(), &acc);
            report.steps.push(StepLog {
                epoch: epoch + 1,
                step: step + 1,
                image_ce: bi / b,
                relational_ce: br / b,
                combined: bc / b,
            });
            img_sum += bi;
            rel_sum += br;
            comb_sum += bc;
            step += 1;
        }
        let n = data.len() as f64;
        report.epochs.push(EpochLog {
            epoch: epoch + 1,
            image_ce: Some(img_sum / n),
            relational_ce: Some(rel_sum / n),
            combined: Some(comb_sum / n),
            kl: None,
            bce: None,
        });
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((cap, report))
}

/// Precomputed stage-2 inputs for one image: frozen head features and the
/// log of the distilled target.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillTarget {
    pub image_id: String,
    pub inputs: HeadInputs,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Assembles the target over `pairs` (object positions) from the frozen
/// captioner's attention on the scene's caption.
pub fn distill_target(
    captioner: &Captioner,
    scene: &WeakScene,
    raw: &RawFeatures,
    pairs: &[(usize, usize)],
    config: &TrainConfig,
    lexicon: Option<&PosLexicon>,
) -> Result<DistillTarget> {
    let decoded = match config.attention_source {
        AttentionSource::TeacherForced => {
            captioner.decode_image_caption(raw, DecodeMode::TeacherForced(&scene.image_caption))?
        }
        AttentionSource::Greedy => captioner.decode_image_caption(raw, DecodeMode::Greedy)?,
    };
    let mask = if config.mask_non_nouns {
        let lex = lexicon
            .ok_or_else(|| Error::Config("noun masking needs part-of-speech labels".into()))?;
        Some(lex.noun_mask(&decoded.words))
    } else {
        None
    };
    let pooled = distill::pool_attention(&decoded.trace, config.pooling, mask.as_deref())?;
    let (delta, beta) = distill::assemble_second_order(&pooled, pairs)?;
    let fs = FeatureSet::compute(raw, captioner.params(), pairs)?;
    Ok(DistillTarget {
        image_id: scene.image_id.clone(),
        inputs: HeadInputs::from_feature_set(&fs),
        gamma: pooled.gamma,
        delta,
        beta,
    })
}

fn relation_positions(scene: &WeakScene) -> Vec<(usize, usize)> {
    scene
        .relations
        .iter()
        .filter_map(|r| {
            Some((
                scene.object_index(r.subject_id)?,
                scene.object_index(r.object_id)?,
            ))
        })
        .collect()
}

fn new_head(captioner: &Captioner, config: &TrainConfig) -> Result<ImportanceHead> {
    let mc = captioner.config();
    ImportanceHead::new(
        config.feature_mode,
        mc.d_l,
        mc.d_s,
        mc.d_sem,
        captioner.vocab_size(),
        config.seed,
    )
}

/// KL loss and head gradients for one image.
pub fn stage2_kl_grads(head: &ImportanceHead, target: &DistillTarget) -> Result<(f64, Grads)> {
    let log_beta: Vec<f64> = target.beta.iter().map(|b| b.ln()).collect();
    let mut g = Graph::tracked(head.params());
    let s = head.scores_graph(&mut g, &target.inputs)?;
    let loss = g.kl_to_target(s, &log_beta);
    Ok((g.scalar(loss), g.backward(loss)))
}

/// Stage 2 with distilled targets. Builds every target once (the captioner
/// is frozen) and trains a fresh head on per-image KL.
pub fn train_stage2(
    data: &[Example],
    captioner: &Captioner,
    config: &TrainConfig,
    lexicon: Option<&PosLexicon>,
) -> Result<(ImportanceHead, TrainReport)> {
    config.validate()?;
    let targets = data
        .iter()
        .filter(|ex| !ex.scene.relations.is_empty())
        .map(|ex| {
            distill_target(
                captioner,
                &ex.scene,
                &ex.raw,
                &relation_positions(&ex.scene),
                config,
                lexicon,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    train_stage2_on_targets(&targets, captioner, config)
}

pub fn train_stage2_on_targets(
    targets: &[DistillTarget],
    captioner: &Captioner,
    config: &TrainConfig,
) -> Result<(ImportanceHead, TrainReport)> {
    config.validate()?;
    if targets.is_empty() {
        return Err(Error::Usage("no scene has relations to distill".into()));
    }
    let start = Instant::now();
    let mut head = new_head(captioner, config)?;
    let mut opt = Optimizer::new(config.optimizer_stage2, config.lr_stage2, head.params());
    let mut report = TrainReport::new("2");
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for epoch in 0..config.epochs_stage2 {
        order.shuffle(&mut rng_for(&[config.seed, 0x5A2, epoch as u64]));
        let mut kl_sum = 0.0;
        for (step, &k) in order.iter().enumerate() {
            let (kl, mut grads) = stage2_kl_grads(&head, &targets[k])?;
            if !kl.is_finite() || !grads.is_finite() {
                return Err(diverged(
                    "stage 2",
                    epoch,
                    step,
                    &format!("KL is {kl} on `{}`", targets[k].image_id),
                ));
            }
            grads.clip_norm(config.clip_norm);
            opt.step(head.params_mut(), &grads);
            kl_sum += kl;
        }
        report.epochs.push(EpochLog {
            epoch: epoch + 1,
            image_ce: None,
            relational_ce: None,
            combined: None,
            kl: Some(kl_sum / targets.len() as f64),
            bce: None,
        });
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((head, report))
}

/// Mean KL of `head` over `targets`.
pub fn mean_kl(head: &ImportanceHead, targets: &[DistillTarget]) -> Result<f64> {
    let mut total = 0.0;
    for t in targets {
        let (_, eta) = head.scores(&t.inputs)?;
        total += distill::kl_loss(&eta, &t.beta)?;
    }
    Ok(total / targets.len().max(1) as f64)
}

/// Upper-bound stage 2: logistic regression of the raw scores onto the
/// annotated flags of the ground-truth relations.
pub fn train_stage2_label(
    records: &[SceneRecord],
    raws: &[RawFeatures],
    captioner: &Captioner,
    config: &TrainConfig,
) -> Result<(ImportanceHead, TrainReport)> {
    config.validate()?;
    if records.len() != raws.len() {
        return Err(Error::Usage(
            "one feature set per record is required".into(),
        ));
    }
    if !records.iter().any(|r| r.important_flags.iter().any(|&f| f)) {
        return Err(Error::DegenerateSupervision);
    }
    let start = Instant::now();
    let mut items = Vec::new();
    for (r, raw) in records.iter().zip(raws) {
        let scene = WeakScene::from(r);
        let pairs = relation_positions(&scene);
        if pairs.is_empty() {
            continue;
        }
        let fs = FeatureSet::compute(raw, captioner.params(), &pairs)?;
        let targets: Vec<f64> = r
            .important_flags
            .iter()
            .map(|&f| if f { 1.0 } else { 0.0 })
            .collect();
        items.push((
            r.image_id.clone(),
            HeadInputs::from_feature_set(&fs),
            targets,
        ));
    }
    let mut head = new_head(captioner, config)?;
    let mut opt = Optimizer::new(config.optimizer_stage2, config.lr_stage2, head.params());
    let mut report = TrainReport::new("2-label");
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..config.epochs_stage2 {
        order.shuffle(&mut rng_for(&[config.seed, 0x5A3, epoch as u64]));
        let mut sum = 0.0;
        for (step, &k) in order.iter().enumerate() {
            let (id, inputs, targets) = &items[k];
            let mut g = Graph::tracked(head.params());
            let s = head.scores_graph(&mut g, inputs)?;
            let loss = g.bce_with_logits(s, targets);
            let v = g.scalar(loss);
            let mut grads = g.backward(loss);
            if !v.is_finite() || !grads.is_finite() {
                return Err(diverged(
                    "stage 2-label",
                    epoch,
                    step,
                    &format!("loss is {v} on `{id}`"),
                ));
            }
            grads.clip_norm(config.clip_norm);
            opt.step(head.params_mut(), &grads);
            sum += v;
        }
        report.epochs.push(EpochLog {
            epoch: epoch + 1,
            image_ce: None,
            relational_ce: None,
            combined: None,
            kl: None,
            bce: Some(sum / items.len().max(1) as f64),
        });
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((head, report))
}

/// Result of comparing analytic and central-difference gradients for one
/// named parameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn check_store<F>(
    store: &ParamStore,
    grads: &Grads,
    step: f64,
    floor: f64,
    mut loss_at: F,
) -> Result<Vec<GradCheck>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut work = store.clone();
    let mut out = Vec::new();
    for (id, name, value) in store.iter() {
        let analytic = grads.get_or_zeros(store, id);
        let mut worst: f64 = 0.0;
        for k in 0..value.data().len() {
            let orig = value.data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let plus = loss_at(&work)?;
            work.get_mut(id).data_mut()[k] = orig - step;
            let minus = loss_at(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[k], numeric, floor));
        }
        out.push(GradCheck {
            name: name.to_string(),
            entries: value.data().len(),
            max_rel_err: worst,
        });
    }
    Ok(out)
}

/// Finite-difference check of the mixed cross-entropy over every entry of
/// every named captioner parameter.
pub fn grad_check_mixed_ce(
    captioner: &Captioner,
    scene: &WeakScene,
    raw: &RawFeatures,
    lambda: f64,
    step: f64,
    floor: f64,
) -> Result<Vec<GradCheck>> {
    let (_, grads) = mixed_ce_grads(captioner, scene, raw, lambda)?;
    let mut probe = captioner.clone();
    check_store(captioner.params(), &grads, step, floor, |store| {
        *probe.params_mut() = store.clone();
        mixed_ce_loss(&probe, scene, raw, lambda)
    })
}

/// Finite-difference check of the stage-2 KL over every head parameter.
pub fn grad_check_stage2(
    head: &ImportanceHead,
    target: &DistillTarget,
    step: f64,
    floor: f64,
) -> Result<Vec<GradCheck>> {
    let (_, grads) = stage2_kl_grads(head, target)?;
    let mut probe = head.clone();
    check_store(head.params(), &grads, step, floor, |store| {
        *probe.params_mut() = store.clone();
        let (_, eta) = probe.scores(&target.inputs)?;
        distill::kl_loss(&eta, &target.beta)
    })
}
