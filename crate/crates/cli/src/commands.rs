use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use log::info;
use serde_json::json;
use tsg_core::checkpoint::{self, Checkpoint};
use tsg_core::config::{KvConfig, ModelConfig};
use tsg_core::distill::{FeatureMode, RankStrategy};
use tsg_core::eval::{evaluate, load_predictions, save_predictions, GtImage};
use tsg_core::features::{load_precomputed, FeatureSource};
use tsg_core::generate::{analyze, predict, GenerateOptions};
use tsg_core::inspect::{render, InspectDump};
use tsg_core::synth::{
    generate_dataset, read_vocab_file, split_file, GenConfig, PosLexicon, VOCAB_FILE,
};
use tsg_core::trainer::{
    examples_from, train_stage1, train_stage2, train_stage2_label, Supervision, TrainConfig,
    TrainReport,
};
use tsg_core::types::{SceneRecord, Vocabulary};
use tsg_core::{dataset, Error, Result};

use crate::manifest::{RunManifest, MANIFEST_FILE};
use crate::{
    AblationArgs, Cli, Command, ConfigArgs, EvalArgs, GenerateArgs, InspectArgs, ReplayArgs, Stage,
    SynthArgs, TrainArgs,
};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "train_report.json";
pub const DUMP_FILE: &str = "dump.json";
pub const HEATMAP_FILE: &str = "heatmap.svg";
pub const LINES_FILE: &str = "lines.svg";

/// How a command was invoked: from the command line, or replayed from a
/// manifest with its recorded config.
struct Invocation {
    argv: Vec<String>,
    recorded: Option<KvConfig>,
    replayed_from: Option<PathBuf>,
}

pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    match &cli.command {
        Command::Replay(args) => replay(args),
        command => execute(
            command,
            Invocation {
                argv,
                recorded: None,
                replayed_from: None,
            },
        ),
    }
}

fn execute(command: &Command, inv: Invocation) -> Result<()> {
    match command {
        Command::DatasetSynth(a) => dataset_synth(a, inv),
        Command::Train(a) => train(a, inv),
        Command::Generate(a) => generate(a, inv),
        Command::Eval(a) => eval(a, inv),
        Command::Inspect(a) => inspect(a, inv),
        Command::Replay(_) => Err(Error::Usage("a manifest cannot record a replay".into())),
    }
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let manifest = RunManifest::read(&args.manifest)?;
    let mut argv = manifest.argv.clone();
    if let Some(out) = &args.out {
        argv = with_out(&argv, out);
    }
    let cli = Cli::try_parse_from(std::iter::once("tsg".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Usage(format!("recorded arguments no longer parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::Usage("a manifest cannot record a replay".into()));
    }
    execute(
        &cli.command,
        Invocation {
            argv,
            recorded: Some(manifest.config),
            replayed_from: Some(args.manifest.clone()),
        },
    )
}

/// `argv` with the `--out` value replaced.
fn with_out(argv: &[String], out: &Path) -> Vec<String> {
    let out = out.display().to_string();
    let mut res = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            it.next();
            res.push(a.clone());
            res.push(out.clone());
        } else if a.starts_with("--out=") {
            res.push(format!("--out={out}"));
        } else {
            res.push(a.clone());
        }
    }
    res
}

fn known_keys() -> Vec<&'static str> {
    let mut keys: Vec<&str> = ModelConfig::KEYS
        .iter()
        .chain(TrainConfig::KEYS)
        .chain(GenConfig::KEYS)
        .copied()
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys
}

/// Config file (or the recorded config on replay) with flags applied on top.
fn resolve_kv(
    cfg: &ConfigArgs,
    ablation: Option<&AblationArgs>,
    inv: &Invocation,
) -> Result<KvConfig> {
    let mut kv = match (&inv.recorded, &cfg.config) {
        (Some(recorded), _) => recorded.clone(),
        (None, Some(path)) => KvConfig::load(path)?,
        (None, None) => KvConfig::default(),
    };
    if let Some(seed) = cfg.seed {
        kv.insert("seed", seed.to_string());
    }
    if let Some(a) = ablation {
        if let Some(p) = &a.pooling {
            kv.insert("pooling", p.as_str());
        }
        if let Some(f) = &a.features {
            kv.insert("feature_mode", f.as_str());
        }
        if a.mask_non_nouns {
            kv.insert("masking", "true");
        }
    }
    kv.check_known(&known_keys())?;
    Ok(kv)
}

/// Writes the manifest before any output and again, with the elapsed time,
/// once the command has finished.
struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    #[allow(clippy::too_many_arguments)]
    fn begin(
        dir: &Path,
        command: &str,
        inv: Invocation,
        config: KvConfig,
        resolved: serde_json::Value,
        inputs: Vec<PathBuf>,
        outputs: &[&str],
        seed: Option<u64>,
    ) -> Result<Self> {
        let manifest = RunManifest {
            command: command.to_string(),
            argv: inv.argv,
            config,
            resolved,
            inputs,
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_secs: None,
            replayed_from: inv.replayed_from,
        };
        manifest.write(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            start: Instant::now(),
        })
    }

    fn finish(mut self) -> Result<()> {
        self.manifest.wall_clock_secs = Some(self.start.elapsed().as_secs_f64());
        self.manifest.write(&self.dir)?;
        info!("wrote {}", self.dir.join(MANIFEST_FILE).display());
        Ok(())
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_vocab(data: &Path) -> Result<(Vocabulary, PosLexicon)> {
    read_vocab_file(&data.join(VOCAB_FILE))
}

fn load_split(data: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<SceneRecord>> {
    let path = data.join(split_file(split));
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no `{split}` split at {}",
            path.display()
        )));
    }
    dataset::load_dataset(&path, vocab)
}

fn feature_source(path: Option<&PathBuf>) -> Result<FeatureSource> {
    match path {
        None => Ok(FeatureSource::Synthetic),
        Some(p) => Ok(FeatureSource::Precomputed(load_precomputed(p)?)),
    }
}

/// Loads a checkpoint and checks it against the explicitly configured model
/// keys; unset keys take the checkpoint's values.
fn load_checkpoint(dir: &Path, kv: &KvConfig) -> Result<Checkpoint> {
    let ck = checkpoint::load(dir)?;
    let mut expected = ck.captioner.config().clone();
    expected.apply(kv)?;
    checkpoint::check_compatible(&ck, &expected)?;
    if let (Some(head), Some(mode)) = (&ck.head, kv.get::<FeatureMode>("feature_mode")?) {
        if head.mode() != mode {
            return Err(Error::Checkpoint(format!(
                "checkpoint head uses {:?} features, {mode:?} requested",
                head.mode()
            )));
        }
    }
    Ok(ck)
}

fn dataset_synth(a: &SynthArgs, inv: Invocation) -> Result<()> {
    let kv = resolve_kv(&a.config, None, &inv)?;
    let mut gen = GenConfig::default();
    gen.apply(&kv)?;
    let outputs = [VOCAB_FILE, "train.jsonl", "val.jsonl", "test.jsonl"];
    let inputs = a.config.config.iter().cloned().collect();
    let run = Run::begin(
        &a.out,
        "dataset-synth",
        inv,
        kv,
        json!({ "gen": gen }),
        inputs,
        &outputs,
        Some(gen.seed),
    )?;
    let data = generate_dataset(&gen)?;
    data.write(&a.out)?;
    println!(
        "wrote {} train, {} val, {} test scenes to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        a.out.display()
    );
    run.finish()
}

fn train(a: &TrainArgs, inv: Invocation) -> Result<()> {
    let kv = resolve_kv(&a.config, Some(&a.ablation), &inv)?;
    let mut tc = TrainConfig::default();
    tc.apply(&kv)?;
    let (vocab, lexicon) = load_vocab(&a.data)?;
    let records = load_split(&a.data, "train", &vocab)?;
    let val_path = a.data.join(split_file("val"));
    let val = if val_path.exists() {
        dataset::load_dataset(&val_path, &vocab)?
    } else {
        Vec::new()
    };
    let source = feature_source(a.visual_features.as_ref())?;

    let init = match (a.stage, &a.init) {
        (Stage::One, Some(_)) => {
            return Err(Error::Usage(
                "stage 1 trains from scratch; drop --init".into(),
            ))
        }
        (Stage::One, None) => None,
        (_, Some(dir)) => Some(load_checkpoint(dir, &kv)?),
        (_, None) => {
            return Err(Error::Usage(
                "stages 2 and 2-label need --init with a stage-1 checkpoint".into(),
            ))
        }
    };
    let model = match &init {
        Some(ck) => ck.captioner.config().clone(),
        None => {
            let mut m = ModelConfig::default();
            m.apply(&kv)?;
            m
        }
    };
    let label = a.stage == Stage::TwoLabel
        || (a.stage == Stage::Two && tc.supervision == Supervision::Label);

    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.config.config.iter().cloned());
    inputs.extend(a.init.iter().cloned());
    inputs.extend(a.visual_features.iter().cloned());
    let outputs = [
        checkpoint::MANIFEST_FILE,
        checkpoint::BLOB_FILE,
        REPORT_FILE,
    ];
    let resolved =
        json!({ "model": model, "train": tc, "stage": a.stage, "label_supervision": label });
    let run = Run::begin(
        &a.out,
        "train",
        inv,
        kv,
        resolved,
        inputs,
        &outputs,
        Some(tc.seed),
    )?;

    info!("training stage {:?} on {} scenes", a.stage, records.len());
    let (ck, mut report, rank) = match init {
        None => {
            let ex = examples_from(&records, &model, &source)?;
            let (cap, report) = train_stage1(&ex, &model, &tc, vocab.len())?;
            (
                Checkpoint {
                    captioner: cap,
                    head: None,
                },
                report,
                RankStrategy::Likelihood,
            )
        }
        Some(init) => {
            let cap = init.captioner;
            let (head, report) = if label {
                let raws = records
                    .iter()
                    .map(|r| source.raw(r, &model))
                    .collect::<Result<Vec<_>>>()?;
                train_stage2_label(&records, &raws, &cap, &tc)?
            } else {
                let ex = examples_from(&records, &model, &source)?;
                train_stage2(&ex, &cap, &tc, Some(&lexicon))?
            };
            (
                Checkpoint {
                    captioner: cap,
                    head: Some(head),
                },
                report,
                RankStrategy::Eta,
            )
        }
    };
    checkpoint::save(&a.out, &ck.captioner, ck.head.as_ref())?;
    if !val.is_empty() {
        report.final_metrics = Some(val_metrics(
            &ck, &val, &vocab, &lexicon, &tc, rank, &source,
        )?);
    }
    write_json(&a.out.join(REPORT_FILE), &report)?;
    print_summary(&report);
    run.finish()
}

fn val_metrics(
    ck: &Checkpoint,
    val: &[SceneRecord],
    vocab: &Vocabulary,
    lexicon: &PosLexicon,
    tc: &TrainConfig,
    rank: RankStrategy,
    source: &FeatureSource,
) -> Result<serde_json::Value> {
    let opts = GenerateOptions {
        rank,
        topk: None,
        pooling: tc.pooling,
        mask_non_nouns: tc.mask_non_nouns,
    };
    let preds = predict(ck, val, vocab, &opts, Some(lexicon), source)?;
    let gts: Vec<GtImage> = val.iter().map(|r| GtImage::from_record(r, vocab)).collect();
    Ok(evaluate(&preds, &gts)?.to_table_json())
}

fn print_summary(report: &TrainReport) {
    let last = report.epochs.last();
    let loss = last.and_then(|e| e.combined.or(e.kl).or(e.bce));
    let mut line = format!(
        "stage {}: {} epochs in {:.1}s",
        report.stage,
        report.epochs.len(),
        report.wall_clock_secs
    );
    if let Some(l) = loss {
        line.push_str(&format!(", final loss {l:.4}"));
    }
    if let Some(m) = report
        .final_metrics
        .as_ref()
        .and_then(|m| m.get("recall_ns_at_20"))
    {
        line.push_str(&format!(", val R-ns@20 {m}"));
    }
    println!("{line}");
}

fn generate_options(kv: &KvConfig, rank: &str, topk: Option<usize>) -> Result<GenerateOptions> {
    let mut tc = TrainConfig::default();
    tc.apply(kv)?;
    Ok(GenerateOptions {
        rank: rank.parse()?,
        topk,
        pooling: tc.pooling,
        mask_non_nouns: tc.mask_non_nouns,
    })
}

fn generate(a: &GenerateArgs, inv: Invocation) -> Result<()> {
    let kv = resolve_kv(&a.config, Some(&a.ablation), &inv)?;
    let opts = generate_options(&kv, &a.rank, a.topk)?;
    let (vocab, lexicon) = load_vocab(&a.data)?;
    let records = load_split(&a.data, &a.split, &vocab)?;
    let ck = load_checkpoint(&a.checkpoint, &kv)?;
    let source = feature_source(a.visual_features.as_ref())?;

    let mut inputs = vec![a.data.clone(), a.checkpoint.clone()];
    inputs.extend(a.config.config.iter().cloned());
    inputs.extend(a.visual_features.iter().cloned());
    let resolved = json!({ "model": ck.captioner.config(), "generate": opts, "split": a.split });
    let run = Run::begin(
        &a.out,
        "generate",
        inv,
        kv,
        resolved,
        inputs,
        &[PREDICTIONS_FILE],
        None,
    )?;

    let preds = predict(&ck, &records, &vocab, &opts, Some(&lexicon), &source)?;
    let path = a.out.join(PREDICTIONS_FILE);
    save_predictions(&preds, &path)?;
    println!("wrote {} predictions to {}", preds.len(), path.display());
    run.finish()
}

fn eval(a: &EvalArgs, inv: Invocation) -> Result<()> {
    let (vocab, _) = load_vocab(&a.data)?;
    let records = load_split(&a.data, &a.split, &vocab)?;
    let inputs = vec![a.predictions.clone(), a.data.clone()];
    let resolved = json!({ "split": a.split });
    let run = Run::begin(
        &a.out,
        "eval",
        inv,
        KvConfig::default(),
        resolved,
        inputs,
        &[METRICS_FILE],
        None,
    )?;

    let preds = load_predictions(&a.predictions)?;
    let gts: Vec<GtImage> = records
        .iter()
        .map(|r| GtImage::from_record(r, &vocab))
        .collect();
    let table = evaluate(&preds, &gts)?.to_table_json();
    write_json(&a.out.join(METRICS_FILE), &table)?;
    println!("{table}");
    run.finish()
}

fn inspect(a: &InspectArgs, inv: Invocation) -> Result<()> {
    let kv = resolve_kv(&a.config, Some(&a.ablation), &inv)?;
    let opts = generate_options(&kv, "likelihood", None)?;
    let (vocab, lexicon) = load_vocab(&a.data)?;
    let records = load_split(&a.data, &a.split, &vocab)?;
    let record = records
        .iter()
        .find(|r| r.image_id == a.image_id)
        .ok_or_else(|| {
            Error::Usage(format!(
                "image `{}` is not in the `{}` split",
                a.image_id, a.split
            ))
        })?;
    let ck = load_checkpoint(&a.checkpoint, &kv)?;
    let source = feature_source(a.visual_features.as_ref())?;

    let mut inputs = vec![a.data.clone(), a.checkpoint.clone()];
    inputs.extend(a.config.config.iter().cloned());
    inputs.extend(a.visual_features.iter().cloned());
    let resolved = json!({
        "model": ck.captioner.config(),
        "pooling": opts.pooling,
        "mask_non_nouns": opts.mask_non_nouns,
        "image_id": a.image_id,
        "split": a.split,
    });
    let outputs = [DUMP_FILE, HEATMAP_FILE, LINES_FILE];
    let run = Run::begin(&a.out, "inspect", inv, kv, resolved, inputs, &outputs, None)?;

    let raw = source.raw(record, ck.captioner.config())?;
    let analysis = analyze(&ck.captioner, ck.head.as_ref(), &raw, &opts, Some(&lexicon))?;
    let dump = InspectDump::from_analysis(&analysis, &vocab);
    write_json(&a.out.join(DUMP_FILE), &dump)?;
    let (heat, lines) = render(&dump);
    fs::write(a.out.join(HEATMAP_FILE), heat)?;
    fs::write(a.out.join(LINES_FILE), lines)?;
    println!("caption: {}", dump.caption.join(" "));
    println!("wrote {} and charts to {}", DUMP_FILE, a.out.display());
    run.finish()
}
