//! Command-line front end.
//!
//! Every subcommand writes its artifacts plus a `run.json` manifest (the
//! resolved configuration and content hashes of the inputs) under the
//! output directory: `--out`, else `$INNERTHOUGHTS_OUT`, else
//! `innerthoughts-out`. A `--config` JSON file may supply any option;
//! command-line flags win.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{
    brier_scores, influence_per_layer, load_results_dir, logit_lens_curve, margin_summary, report_table,
};
use crate::baselines::direct_predict;
use crate::compare::{fit_predictor, parse_methods, run_compare, CompareConfig};
use crate::dataset::{
    generate_synthetic, read_dataset, split_dataset, validate_dataset, write_dataset, HiddenRecord, SplitSpec,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::predictor::{load_predictor, save_predictor, Architecture, InputSelector, PredictorConfig};
use crate::tensor::{Activation, NormKind};
use crate::training::{evaluate_records, TrainConfig};

pub const OUT_ENV: &str = "INNERTHOUGHTS_OUT";
const DEFAULT_OUT: &str = "innerthoughts-out";

#[derive(Debug, Parser)]
#[command(name = "innerthoughts", version, about = "Predictor heads on LLM hidden states")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON file with option values; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a dataset file; exit 0 pass, 1 corrupt, 2 inconsistent.
    Validate { file: PathBuf },
    /// Write a seeded train/validation/test split.
    Split {
        file: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Generate a planted-signal dataset.
    Synth(SynthArgs),
    /// Train one predictor.
    Train {
        file: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        file: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Which part to score: train, validation, test or all.
        #[arg(long)]
        part: Option<String>,
    },
    /// Margins, logit lens, influence and Brier scores.
    Analyze {
        file: PathBuf,
        #[arg(long)]
        margins: bool,
        #[arg(long)]
        lens: bool,
        /// Checkpoint whose per-layer influence to measure.
        #[arg(long)]
        influence: Option<PathBuf>,
        #[arg(long)]
        brier: bool,
        /// Score this predictor for margins and Brier instead of Direct.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Records used for influence (default: all).
        #[arg(long)]
        influence_samples: Option<usize>,
    },
    /// Render report tables from results.json files.
    Report { results_dir: PathBuf },
    /// Run the method matrix with CIs and significance tests.
    Compare {
        file: PathBuf,
        /// Comma-separated method keys; direct is always included.
        #[arg(long)]
        methods: Option<String>,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        last_k: Option<usize>,
        #[arg(long)]
        pca_components: Option<usize>,
        #[arg(long)]
        n_boot: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
    },
}

#[derive(Debug, Args, Clone, Default)]
struct SplitArgs {
    /// Train,validation,test fractions.
    #[arg(long)]
    fractions: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Existing split.json to reuse.
    #[arg(long = "split")]
    split_file: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
struct SynthArgs {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    signal_layer: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    final_accuracy: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
struct ModelArgs {
    /// mixer, mlp, logistic or self_attention.
    #[arg(long)]
    arch: Option<String>,
    /// all, last, last_k, logits or diff.
    #[arg(long)]
    selector: Option<String>,
    /// Layer count for the last_k selector.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// layer_norm, rms_norm or none.
    #[arg(long)]
    norm: Option<String>,
    /// relu or swish.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    pca: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
struct TrainArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

/// Values a `--config` file may provide.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    out: Option<PathBuf>,
    fractions: Option<Vec<f64>>,
    seed: Option<u64>,
    split: Option<PathBuf>,
    layers: Option<usize>,
    dim: Option<usize>,
    classes: Option<usize>,
    n: Option<usize>,
    signal_layer: Option<usize>,
    noise: Option<f64>,
    final_accuracy: Option<f64>,
    arch: Option<String>,
    selector: Option<String>,
    k: Option<usize>,
    n1: Option<usize>,
    n2: Option<usize>,
    hidden: Option<usize>,
    norm: Option<String>,
    activation: Option<String>,
    pca: Option<usize>,
    lr: Option<f64>,
    epochs: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    methods: Option<String>,
    last_k: Option<usize>,
    pca_components: Option<usize>,
    n_boot: Option<usize>,
    level: Option<f64>,
    part: Option<String>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

struct Ctx {
    out: PathBuf,
    file: FileConfig,
}

impl Ctx {
    fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn writer(&self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
    }

    fn manifest(&self, command: &str, config: Value, inputs: &[&Path]) -> Result<()> {
        let hashes = inputs
            .iter()
            .map(|p| Ok(json!({ "path": p.display().to_string(), "sha256": git_blob_sha256(p)? })))
            .collect::<Result<Vec<_>>>()?;
        self.write_json(
            "run.json",
            &json!({
                "command": command,
                "version": env!("CARGO_PKG_VERSION"),
                "config": config,
                "inputs": hashes,
            }),
        )
    }
}

/// SHA-256 over `blob <len>\0` followed by the file bytes.
pub fn git_blob_sha256(path: &Path) -> Result<String> {
    let io = |e| Error::io(path, e);
    let mut f = File::open(path).map_err(io)?;
    let len = f.metadata().map_err(io)?.len();
    let mut h = Sha256::new();
    h.update(format!("blob {len}\0").as_bytes());
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn execute(cli: Cli) -> Result<i32> {
    let file: FileConfig = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| file.out.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = Ctx { out, file };
    match cli.command {
        Command::Validate { file } => cmd_validate(&ctx, &file),
        Command::Split { file, split } => cmd_split(&ctx, &file, &split),
        Command::Synth(args) => cmd_synth(&ctx, &args),
        Command::Train {
            file,
            split,
            model,
            train,
        } => cmd_train(&ctx, &file, &split, &model, &train),
        Command::Eval {
            file,
            checkpoint,
            split,
            part,
        } => cmd_eval(&ctx, &file, &checkpoint, &split, part),
        Command::Analyze {
            file,
            margins,
            lens,
            influence,
            brier,
            checkpoint,
            influence_samples,
        } => cmd_analyze(
            &ctx,
            &file,
            AnalyzeSel {
                margins,
                lens,
                influence,
                brier,
                checkpoint,
                influence_samples,
            },
        ),
        Command::Report { results_dir } => cmd_report(&ctx, &results_dir),
        Command::Compare {
            file,
            methods,
            split,
            model,
            train,
            last_k,
            pca_components,
            n_boot,
            level,
        } => {
            let f = &ctx.file;
            let defaults = CompareConfig::default();
            let cfg = CompareConfig {
                methods: match methods.or_else(|| f.methods.clone()) {
                    Some(list) => parse_methods(&list)?,
                    None => defaults.methods.clone(),
                },
                fractions: fractions(&ctx, &split)?,
                seed: split.seed.or(f.seed).unwrap_or(0),
                train: train_config(&ctx, &train, split.seed.or(f.seed).unwrap_or(0)),
                n1: model.n1.or(f.n1).unwrap_or(defaults.n1),
                n2: model.n2.or(f.n2).unwrap_or(defaults.n2),
                last_k: last_k.or(f.last_k).unwrap_or(defaults.last_k),
                pca_components: pca_components.or(f.pca_components).unwrap_or(defaults.pca_components),
                n_boot: n_boot.or(f.n_boot).unwrap_or(defaults.n_boot),
                level: level.or(f.level).unwrap_or(defaults.level),
            };
            cmd_compare(&ctx, &file, &split, cfg)
        }
    }
}

fn cmd_validate(ctx: &Ctx, file: &Path) -> Result<i32> {
    let report = validate_dataset(file);
    for c in &report.checks {
        let mark = if c.passed { "ok  " } else { "FAIL" };
        if c.detail.is_empty() {
            println!("{mark} {}", c.name);
        } else {
            println!("{mark} {}: {}", c.name, c.detail);
        }
    }
    println!("{:?} ({} records checked)", report.status, report.records_checked);
    ctx.create_out()?;
    let checks: Vec<Value> = report
        .checks
        .iter()
        .map(|c| json!({ "name": c.name, "passed": c.passed, "detail": c.detail }))
        .collect();
    ctx.write_json(
        "validation.json",
        &json!({
            "status": format!("{:?}", report.status).to_lowercase(),
            "exit_code": report.exit_code(),
            "records_checked": report.records_checked,
            "checks": checks,
        }),
    )?;
    let inputs: Vec<&Path> = if file.is_file() { vec![file] } else { vec![] };
    ctx.manifest("validate", json!({ "file": file.display().to_string() }), &inputs)?;
    Ok(report.exit_code())
}

fn fractions(ctx: &Ctx, args: &SplitArgs) -> Result<[f64; 3]> {
    let list: Vec<f64> = match (&args.fractions, &ctx.file.fractions) {
        (Some(s), _) => s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad fraction {p:?}")))
            })
            .collect::<Result<_>>()?,
        (None, Some(v)) => v.clone(),
        (None, None) => vec![0.7, 0.15, 0.15],
    };
    match list.as_slice() {
        [a, b] => Ok([*a, *b, 0.0]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(Error::Config(format!("expected 2 or 3 fractions, got {}", list.len()))),
    }
}

fn resolve_split(ctx: &Ctx, args: &SplitArgs, n: usize) -> Result<SplitSpec> {
    if let Some(p) = args.split_file.as_ref().or(ctx.file.split.as_ref()) {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let spec: SplitSpec = serde_json::from_str(&text)?;
        if let Some(&i) = spec.train.iter().chain(&spec.validation).chain(&spec.test).find(|&&i| i >= n) {
            return Err(Error::Input(format!("split index {i} out of range for {n} records")));
        }
        return Ok(spec);
    }
    split_dataset(n, fractions(ctx, args)?, args.seed.or(ctx.file.seed).unwrap_or(0))
}

fn split_inputs<'a>(args: &'a SplitArgs, ctx: &'a Ctx) -> Option<&'a Path> {
    args.split_file.as_deref().or(ctx.file.split.as_deref())
}

fn pick(records: &[HiddenRecord], idx: &[usize]) -> Vec<HiddenRecord> {
    idx.iter().map(|&i| records[i].clone()).collect()
}

fn cmd_split(ctx: &Ctx, file: &Path, args: &SplitArgs) -> Result<i32> {
    let (_, records) = read_dataset(file)?;
    let spec = split_dataset(
        records.len(),
        fractions(ctx, args)?,
        args.seed.or(ctx.file.seed).unwrap_or(0),
    )?;
    ctx.create_out()?;
    ctx.write_json("split.json", &spec)?;
    let (a, b, c) = spec.sizes();
    println!("train {a}, validation {b}, test {c}");
    ctx.manifest(
        "split",
        json!({ "file": file.display().to_string(), "fractions": spec.fractions, "seed": spec.seed }),
        &[file],
    )?;
    Ok(0)
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<i32> {
    let f = &ctx.file;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        layers: a.layers.or(f.layers).unwrap_or(d.layers),
        dim: a.dim.or(f.dim).unwrap_or(d.dim),
        classes: a.classes.or(f.classes).unwrap_or(d.classes),
        n: a.n.or(f.n).unwrap_or(d.n),
        signal_layer: a.signal_layer.or(f.signal_layer).unwrap_or(d.signal_layer),
        noise: a.noise.or(f.noise).unwrap_or(d.noise),
        final_layer_accuracy: a.final_accuracy.or(f.final_accuracy).unwrap_or(d.final_layer_accuracy),
        seed: a.seed.or(f.seed).unwrap_or(d.seed),
    };
    let (manifest, records) = generate_synthetic(&cfg)?;
    ctx.create_out()?;
    let path = ctx.path("synthetic.ithd");
    write_dataset(&path, &manifest, &records)?;
    println!("wrote {} records to {}", records.len(), path.display());
    ctx.manifest(
        "synth",
        json!({
            "layers": cfg.layers, "dim": cfg.dim, "classes": cfg.classes, "n": cfg.n,
            "signal_layer": cfg.signal_layer, "noise": cfg.noise,
            "final_accuracy": cfg.final_layer_accuracy, "seed": cfg.seed,
        }),
        &[],
    )?;
    Ok(0)
}

fn parse_arch(s: &str) -> Result<Architecture> {
    match s {
        "mixer" => Ok(Architecture::Mixer),
        "mlp" => Ok(Architecture::Mlp),
        "logistic" => Ok(Architecture::Logistic),
        "self_attention" | "attention" => Ok(Architecture::SelfAttention),
        _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
    }
}

fn parse_selector(s: &str, k: Option<usize>) -> Result<InputSelector> {
    match s {
        "all" => Ok(InputSelector::AllLayers),
        "last" => Ok(InputSelector::LastLayer),
        "last_k" => Ok(InputSelector::LastK {
            k: k.ok_or_else(|| Error::Config("selector last_k needs --k".into()))?,
        }),
        "logits" => Ok(InputSelector::Logits),
        "diff" => Ok(InputSelector::DiffAllLayers),
        _ => Err(Error::Config(format!("unknown selector {s:?}"))),
    }
}

fn parse_norm(s: &str) -> Result<Option<NormKind>> {
    match s {
        "layer_norm" => Ok(Some(NormKind::LayerNorm)),
        "rms_norm" => Ok(Some(NormKind::RmsNorm)),
        "none" => Ok(None),
        _ => Err(Error::Config(format!("unknown norm {s:?}"))),
    }
}

fn parse_activation(s: &str) -> Result<Option<Activation>> {
    match s {
        "relu" => Ok(Some(Activation::Relu)),
        "swish" => Ok(Some(Activation::Swish)),
        "none" => Ok(None),
        _ => Err(Error::Config(format!("unknown activation {s:?}"))),
    }
}

fn predictor_config(ctx: &Ctx, m: &ModelArgs, classes: usize, seed: u64) -> Result<PredictorConfig> {
    let f = &ctx.file;
    let arch = parse_arch(m.arch.as_deref().or(f.arch.as_deref()).unwrap_or("mixer"))?;
    let selector = parse_selector(m.selector.as_deref().or(f.selector.as_deref()).unwrap_or("all"), m.k.or(f.k))?;
    let mut pc = PredictorConfig::new(arch, selector, classes).with_seed(seed);
    pc.n1 = m.n1.or(f.n1).unwrap_or(pc.n1);
    pc.n2 = m.n2.or(f.n2).unwrap_or(pc.n2);
    pc.hidden = m.hidden.or(f.hidden).unwrap_or(pc.hidden);
    if let Some(n) = m.norm.as_deref().or(f.norm.as_deref()) {
        pc.norm = parse_norm(n)?;
        pc.head_norm = pc.norm;
    }
    if let Some(a) = m.activation.as_deref().or(f.activation.as_deref()) {
        pc.activation = parse_activation(a)?;
    }
    pc.pca_components = m.pca.or(f.pca);
    Ok(pc)
}

fn train_config(ctx: &Ctx, t: &TrainArgs, seed: u64) -> TrainConfig {
    let f = &ctx.file;
    let d = TrainConfig::default();
    TrainConfig {
        epochs: t.epochs.or(f.epochs).unwrap_or(d.epochs),
        learning_rate: t.lr.or(f.lr).unwrap_or(d.learning_rate),
        batch_size: t.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
        patience: t.patience.or(f.patience).unwrap_or(d.patience),
        seed,
        ..d
    }
}

fn cmd_train(ctx: &Ctx, file: &Path, split: &SplitArgs, model: &ModelArgs, train: &TrainArgs) -> Result<i32> {
    let (manifest, records) = read_dataset(file)?;
    let spec = resolve_split(ctx, split, records.len())?;
    let seed = split.seed.or(ctx.file.seed).unwrap_or(0);
    let pc = predictor_config(ctx, model, manifest.num_classes, seed)?;
    let tc = train_config(ctx, train, seed);
    let fitted = fit_predictor(
        &pc,
        &tc,
        &manifest,
        &pick(&records, &spec.train),
        &pick(&records, &spec.validation),
    )?;
    ctx.create_out()?;
    save_predictor(ctx.path("checkpoint.ckpt"), &fitted.params)?;
    fitted.history.write_csv(ctx.writer("history.csv")?)?;
    let test = if spec.test.is_empty() {
        None
    } else {
        Some(evaluate_records(&fitted.params, &pick(&records, &spec.test))?.accuracy)
    };
    let best = fitted.history.best();
    println!(
        "best epoch {} validation accuracy {:.4}{}",
        best.epoch,
        best.val_accuracy,
        test.map(|t| format!(" test accuracy {t:.4}")).unwrap_or_default()
    );
    ctx.write_json(
        "metrics.json",
        &json!({
            "best_epoch": best.epoch,
            "validation_accuracy": best.val_accuracy,
            "test_accuracy": test,
            "stopped_early": fitted.history.stopped_early,
            "parameters": fitted.params.num_parameters(),
        }),
    )?;
    ctx.write_json("split.json", &spec)?;
    let mut inputs = vec![file];
    inputs.extend(split_inputs(split, ctx));
    ctx.manifest("train", json!({ "predictor": pc, "train": tc, "split_seed": spec.seed }), &inputs)?;
    Ok(0)
}

fn select_part(ctx: &Ctx, split: &SplitArgs, part: Option<&str>, records: Vec<HiddenRecord>) -> Result<Vec<HiddenRecord>> {
    let part = part.unwrap_or("all");
    if part == "all" {
        return Ok(records);
    }
    let spec = resolve_split(ctx, split, records.len())?;
    let idx = match part {
        "train" => &spec.train,
        "validation" => &spec.validation,
        "test" => &spec.test,
        _ => return Err(Error::Config(format!("unknown part {part:?}"))),
    };
    Ok(pick(&records, idx))
}

fn cmd_eval(ctx: &Ctx, file: &Path, ckpt: &Path, split: &SplitArgs, part: Option<String>) -> Result<i32> {
    let (_, records) = read_dataset(file)?;
    let part = part.or_else(|| ctx.file.part.clone());
    let records = select_part(ctx, split, part.as_deref(), records)?;
    let params = load_predictor(ckpt)?;
    let result = evaluate_records(&params, &records)?;
    ctx.create_out()?;
    let mut w = csv::Writer::from_writer(ctx.writer("predictions.csv")?);
    let mut header = vec!["example_id".to_string(), "gold".into(), "predicted".into()];
    header.extend((0..params.config.classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (i, r) in records.iter().enumerate() {
        let mut row = vec![r.example_id.clone(), r.gold_label.to_string(), result.predictions[i].to_string()];
        row.extend(result.probabilities[i].iter().map(|p| format!("{p:.6}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(ctx.path("predictions.csv"), e))?;
    println!("accuracy {:.4} on {} records", result.accuracy, records.len());
    ctx.write_json("eval.json", &json!({ "accuracy": result.accuracy, "records": records.len() }))?;
    let mut inputs = vec![file, ckpt];
    inputs.extend(split_inputs(split, ctx));
    ctx.manifest("eval", json!({ "part": part.unwrap_or_else(|| "all".into()) }), &inputs)?;
    Ok(0)
}

struct AnalyzeSel {
    margins: bool,
    lens: bool,
    influence: Option<PathBuf>,
    brier: bool,
    checkpoint: Option<PathBuf>,
    influence_samples: Option<usize>,
}

fn probabilities(records: &[HiddenRecord], ckpt: Option<&Path>) -> Result<Vec<Vec<f64>>> {
    match ckpt {
        Some(p) => Ok(evaluate_records(&load_predictor(p)?, records)?.probabilities),
        None => Ok(records.iter().map(|r| direct_predict(&r.final_logits).to_f64()).collect()),
    }
}

fn cmd_analyze(ctx: &Ctx, file: &Path, sel: AnalyzeSel) -> Result<i32> {
    if !(sel.margins || sel.lens || sel.brier || sel.influence.is_some()) {
        return Err(Error::Config("choose at least one of --margins, --lens, --influence, --brier".into()));
    }
    let (manifest, records) = read_dataset(file)?;
    ctx.create_out()?;
    let mut summary = serde_json::Map::new();
    if sel.margins || sel.brier {
        let probs = probabilities(&records, sel.checkpoint.as_deref())?;
        if sel.margins {
            let ids: Vec<String> = records.iter().map(|r| r.example_id.clone()).collect();
            let m = margin_summary(&ids, &probs)?;
            m.write_csv(ctx.writer("margins.csv")?)?;
            m.write_histogram_csv(ctx.writer("margin_histogram.csv")?)?;
            println!("mean margin {:.4}, mean logit margin {:.4}", m.mean_margin, m.mean_logit_margin);
            summary.insert("mean_margin".into(), json!(m.mean_margin));
            summary.insert("mean_logit_margin".into(), json!(m.mean_logit_margin));
        }
        if sel.brier {
            let labels: Vec<usize> = records.iter().map(|r| r.gold_label).collect();
            let b = brier_scores(&probs, &labels)?;
            println!("brier normalized {:.6}, unnormalized {:.6}", b.normalized, b.unnormalized);
            summary.insert("brier".into(), serde_json::to_value(b)?);
        }
    }
    if sel.lens {
        let curve = logit_lens_curve(&records, &manifest)?;
        curve.write_csv(ctx.writer("lens.csv")?)?;
        for (l, a) in curve.layers.iter().zip(&curve.accuracy) {
            println!("layer {l:>3}: {a:.4}");
        }
        summary.insert("lens".into(), serde_json::to_value(&curve)?);
    }
    if let Some(ckpt) = &sel.influence {
        let params = load_predictor(ckpt)?;
        let n = sel.influence_samples.unwrap_or(records.len()).min(records.len());
        let prof = influence_per_layer(&params, &records[..n])?;
        prof.write_csv(ctx.writer("influence.csv")?)?;
        summary.insert("influence".into(), serde_json::to_value(&prof)?);
    }
    ctx.write_json("analysis.json", &Value::Object(summary))?;
    let mut inputs = vec![file];
    inputs.extend(sel.influence.as_deref());
    inputs.extend(sel.checkpoint.as_deref());
    ctx.manifest(
        "analyze",
        json!({
            "margins": sel.margins, "lens": sel.lens, "brier": sel.brier,
            "influence": sel.influence.as_ref().map(|p| p.display().to_string()),
            "checkpoint": sel.checkpoint.as_ref().map(|p| p.display().to_string()),
            "influence_samples": sel.influence_samples,
        }),
        &inputs,
    )?;
    Ok(0)
}

fn cmd_report(ctx: &Ctx, dir: &Path) -> Result<i32> {
    let results = load_results_dir(dir)?;
    let table = report_table(&results)?;
    ctx.create_out()?;
    ctx.write_text("report.csv", &table.to_csv()?)?;
    let md = table.to_markdown();
    ctx.write_text("report.md", &md)?;
    print!("{md}");
    ctx.manifest("report", json!({ "results_dir": dir.display().to_string() }), &[])?;
    Ok(0)
}

fn cmd_compare(ctx: &Ctx, file: &Path, split: &SplitArgs, cfg: CompareConfig) -> Result<i32> {
    let (manifest, records) = read_dataset(file)?;
    let output = match split.split_file.as_ref().or(ctx.file.split.as_ref()) {
        Some(_) => {
            let spec = resolve_split(ctx, split, records.len())?;
            crate::compare::run_compare_with_split(&cfg, &manifest, &records, &spec)?
        }
        None => run_compare(&cfg, &manifest, &records)?,
    };
    output.write(&ctx.out)?;
    print!("{}", output.table()?.to_markdown());
    let mut inputs = vec![file];
    inputs.extend(split_inputs(split, ctx));
    ctx.manifest("compare", serde_json::to_value(&cfg)?, &inputs)?;
    Ok(0)
}
