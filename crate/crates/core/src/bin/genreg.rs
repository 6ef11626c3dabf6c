//! Command-line pipeline: vocabulary construction, codec checks,
//! synthetic data, training (generative and baseline heads), prediction,
//! evaluation, and the curriculum ablation grid.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use genreg::baselines::{ordinal_predict, train_ordinal, train_vr, vr_predict};
use genreg::checkpoint::{Checkpoint, HeadParams};
use genreg::codec;
use genreg::data::{load_csv, split, synth_longtail, Dataset, DatasetSchema, SynthParams};
use genreg::inference::{self, Termination};
use genreg::manifest::RunManifest;
use genreg::metrics::{self, EvalReport};
use genreg::model::ModelConfig;
use genreg::training::{
    log_to_jsonl, omega_for, train, DecayStrategy, ScheduleConfig, TrainConfig,
};
use genreg::vocab::{self, DynamicParams, ValueVocabulary};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "genreg", version, about = "Generative regression toolkit for nonnegative scalar targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Build a value vocabulary from a dataset and report token usage.
    BuildVocab(BuildVocabArgs),
    /// Round-trip a dataset through the label codec and print fidelity stats.
    EncodeCheck(EncodeCheckArgs),
    /// Generate a seeded long-tailed synthetic dataset CSV.
    SynthData(SynthDataArgs),
    /// Train a model head and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Predict targets for a feature CSV using a checkpoint.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a dataset and write report files.
    Evaluate(EvaluateArgs),
    /// Run the curriculum/mixup ablation grid on a synthetic task.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Dynamic,
    Binary,
    Manual,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Gr,
    Vr,
    Ordinal,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleArg {
    Sigmoid,
    Linear,
    Exponential,
    Fixed,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Dataset CSV with a target column.
    #[arg(long)]
    data: PathBuf,
    /// Optional schema JSON ({"feature_columns": [...], "target_column": "y"}).
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    /// Output vocabulary file.
    #[arg(long)]
    out: PathBuf,
    /// Token frequency CSV (defaults to <out>.freq.csv).
    #[arg(long)]
    freq_out: Option<PathBuf>,
    #[arg(long, default_value_t = 99.0)]
    q_start: f64,
    #[arg(long, default_value_t = 50.0)]
    q_end: f64,
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    #[arg(long, default_value_t = 0.001)]
    eps: f64,
    #[arg(long, default_value_t = 0.01)]
    resolution: f64,
    #[arg(long, default_value_t = 128)]
    max_iters: usize,
    /// Base unit for the binary strategy.
    #[arg(long, default_value_t = 0.01)]
    unit: f64,
    /// Comma-separated token values for the manual strategy.
    #[arg(long)]
    values: Option<String>,
    #[arg(long, default_value_t = 32)]
    t_max: usize,
}

#[derive(Args)]
struct EncodeCheckArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 32)]
    t_max: usize,
    /// Optional JSON copy of the report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Use the wide-tail preset (hour-scale maxima).
    #[arg(long, default_value_t = false)]
    wide: bool,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    shift: Option<f64>,
    #[arg(long)]
    cap: Option<f64>,
    #[arg(long)]
    grid: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Vocabulary file (required for the gr head).
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Held-out CSV; when absent, --val-ratio splits --data.
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    val_ratio: f64,
    #[arg(long)]
    out: PathBuf,
    /// Metrics log path (defaults to <out>.metrics.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    /// key=value config file; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = HeadArg::Gr)]
    head: HeadArg,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Sigmoid)]
    schedule: ScheduleArg,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    /// Fixed sampling rate for --schedule fixed.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    linear_slope: Option<f64>,
    #[arg(long)]
    exp_rate: Option<f64>,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    clem: Toggle,
    /// Mixup window n_w.
    #[arg(long)]
    nw: Option<usize>,
    /// Apply mixup to ground-truth inputs as well (ablation row).
    #[arg(long, default_value_t = false)]
    mixup_gt: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_interval: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bucket count for the ordinal head.
    #[arg(long, default_value_t = 20)]
    buckets: usize,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    encoder_layers: Option<usize>,
    #[arg(long)]
    decoder_blocks: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_mult: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Vocabulary file (required for gr checkpoints).
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the checkpoint's mixup feedback setting.
    #[arg(long, value_enum)]
    mixup: Option<Toggle>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Second checkpoint for a side-by-side comparison table.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    interval_width: f64,
    /// Ground-truth value starting the trailing open interval.
    #[arg(long)]
    open_from: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    xauc_pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset CSV; generated synthetically when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1500)]
    steps: usize,
    #[arg(long)]
    lr: Option<f64>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::EncodeCheck(a) => cmd_encode_check(a),
        Command::SynthData(a) => cmd_synth_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn read_schema(path: &Option<PathBuf>) -> Result<DatasetSchema> {
    match path {
        None => Ok(DatasetSchema::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading schema {}", p.display()))?;
            Ok(serde_json::from_str(&text).context("parsing schema JSON")?)
        }
    }
}

fn read_dataset(path: &Path, schema: &Option<PathBuf>) -> Result<Dataset> {
    let schema = read_schema(schema)?;
    let outcome = load_csv(path, &schema).with_context(|| format!("loading {}", path.display()))?;
    for (line, reason) in &outcome.rejected {
        eprintln!("warning: {} line {line} rejected: {reason}", path.display());
    }
    Ok(outcome.dataset)
}

// ── build-vocab ─────────────────────────────────────────────────────────

fn cmd_build_vocab(a: BuildVocabArgs) -> Result<()> {
    let dataset = read_dataset(&a.data, &a.schema)?;
    let vocab = match a.strategy {
        StrategyArg::Dynamic => vocab::build_dynamic(
            &dataset.targets,
            DynamicParams {
                q_start: a.q_start,
                q_end: a.q_end,
                alpha: a.alpha,
                eps: a.eps,
                resolution: a.resolution,
                max_iters: a.max_iters,
            },
        )?,
        StrategyArg::Binary => {
            let y_max = dataset.targets.iter().cloned().fold(0.0, f64::max);
            vocab::build_binary(y_max, a.unit)?
        }
        StrategyArg::Manual => {
            let text = a
                .values
                .as_ref()
                .ok_or_else(|| anyhow!("--strategy manual requires --values"))?;
            let values: Vec<f64> = text
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| anyhow!("bad value '{s}'")))
                .collect::<Result<_>>()?;
            vocab::build_manual(&values)?
        }
    };
    vocab.save(&a.out)?;
    println!(
        "vocabulary: {} value tokens, largest {} smallest {}",
        vocab.num_value_tokens(),
        vocab.values().first().unwrap(),
        vocab.values().last().unwrap()
    );

    let freq = vocab::token_frequency(&dataset.targets, &vocab, a.t_max)?;
    let freq_path = a
        .freq_out
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".freq.csv"));
    let mut csv = String::from("token_value,count\n");
    for (value, count) in freq.top_k(&vocab, vocab.num_value_tokens()) {
        csv.push_str(&format!("{value},{count}\n"));
    }
    std::fs::write(&freq_path, csv)?;
    println!(
        "token frequency: max/median ratio {:.3} -> {}",
        freq.max_median_ratio(),
        freq_path.display()
    );

    let mut args = BTreeMap::new();
    args.insert("strategy".into(), strategy_name(a.strategy).to_string());
    args.insert("q_start".into(), a.q_start.to_string());
    args.insert("q_end".into(), a.q_end.to_string());
    args.insert("alpha".into(), a.alpha.to_string());
    args.insert("eps".into(), a.eps.to_string());
    args.insert("resolution".into(), a.resolution.to_string());
    let mut manifest = RunManifest::new("build-vocab", args, vec![]);
    manifest.record_input(&a.data)?;
    manifest.record_output(&a.out)?;
    manifest.record_output(&freq_path)?;
    manifest.save_beside(&a.out)?;
    Ok(())
}

fn strategy_name(s: StrategyArg) -> &'static str {
    match s {
        StrategyArg::Dynamic => "dynamic",
        StrategyArg::Binary => "binary",
        StrategyArg::Manual => "manual",
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

// ── encode-check ────────────────────────────────────────────────────────

fn cmd_encode_check(a: EncodeCheckArgs) -> Result<()> {
    let dataset = read_dataset(&a.data, &a.schema)?;
    let vocab = ValueVocabulary::load(&a.vocab)?;
    let report = codec::validate_roundtrip(&dataset.targets, &vocab, a.t_max)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
        let mut manifest = RunManifest::new("encode-check", BTreeMap::new(), vec![]);
        manifest.record_input(&a.data)?;
        manifest.record_input(&a.vocab)?;
        manifest.record_output(out)?;
        manifest.save_beside(out)?;
    }
    Ok(())
}

// ── synth-data ──────────────────────────────────────────────────────────

fn cmd_synth_data(a: SynthDataArgs) -> Result<()> {
    let mut params = if a.wide {
        SynthParams::wide_tail()
    } else {
        SynthParams::default()
    };
    if let Some(v) = a.scale {
        params.scale = v;
    }
    if let Some(v) = a.noise {
        params.noise = v;
    }
    if let Some(v) = a.offset {
        params.offset = v;
    }
    if let Some(v) = a.shift {
        params.shift = v;
    }
    if let Some(v) = a.cap {
        params.cap = v;
    }
    if let Some(v) = a.grid {
        params.grid = v;
    }
    let ds = synth_longtail(a.n, a.d, a.seed, params)?;
    ds.save_csv(&a.out, "y")?;
    println!("wrote {} rows x {} features -> {}", ds.len(), ds.dim(), a.out.display());

    let mut args = BTreeMap::new();
    args.insert("n".into(), a.n.to_string());
    args.insert("d".into(), a.d.to_string());
    args.insert("params".into(), format!("{params:?}"));
    let mut manifest = RunManifest::new("synth-data", args, vec![a.seed]);
    manifest.record_output(&a.out)?;
    manifest.save_beside(&a.out)?;
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("bad config line '{line}'"))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file_cfg = match &a.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let num = |key: &str| -> Result<Option<f64>> {
        file_cfg
            .get(key)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| anyhow!("config key '{key}' not numeric"))
            })
            .transpose()
    };

    let seed = match a.seed {
        Some(s) => s,
        None => num("seed")?.map(|v| v as u64).unwrap_or(0),
    };
    let steps = match a.steps {
        Some(s) => s,
        None => num("steps")?.map(|v| v as usize).unwrap_or(2000),
    };
    let schedule_strategy = match a.schedule {
        ScheduleArg::Sigmoid => DecayStrategy::Sigmoid,
        ScheduleArg::Linear => DecayStrategy::Linear,
        ScheduleArg::Exponential => DecayStrategy::Exponential,
        ScheduleArg::Fixed => DecayStrategy::Fixed,
    };
    let p0 = a.p0.or(num("p0")?).unwrap_or(1.0);
    let omega = match a.omega.or(num("omega")?) {
        Some(w) => w,
        None => omega_for(p0, steps, 0.05).unwrap_or(200.0),
    };
    let schedule = ScheduleConfig {
        strategy: schedule_strategy,
        p0,
        omega,
        linear_slope: a
            .linear_slope
            .or(num("linear_slope")?)
            .unwrap_or(1.0 / steps.max(1) as f64),
        exp_rate: a.exp_rate.or(num("exp_rate")?).unwrap_or(3.0 / steps.max(1) as f64),
        fixed_value: a.p.or(num("p")?).unwrap_or(0.5),
    };
    let cfg = TrainConfig {
        lambda: a.lambda.or(num("lambda")?).unwrap_or(0.1),
        delta: a.delta.or(num("delta")?).unwrap_or(1.0),
        mixup_window: a.nw.or(num("nw")?.map(|v| v as usize)).unwrap_or(2),
        learning_rate: a.lr.or(num("lr")?).unwrap_or(2e-3),
        batch_size: a.batch.or(num("batch")?.map(|v| v as usize)).unwrap_or(32),
        steps,
        eval_interval: a
            .eval_interval
            .or(num("eval_interval")?.map(|v| v as usize))
            .unwrap_or((steps / 10).max(1)),
        seed,
        clem_enabled: a.clem.on(),
        mixup_ground_truth: a.mixup_gt,
        schedule,
    };

    let full = read_dataset(&a.data, &a.schema)?;
    let (train_ds, val_ds) = match &a.val_data {
        Some(p) => (full, read_dataset(p, &a.schema)?),
        None => split(&full, 1.0 - a.val_ratio, seed)?,
    };

    let mut model_cfg = ModelConfig::small(train_ds.dim(), 4);
    model_cfg.seed = seed;
    if let Some(v) = a.hidden_dim.or(num("hidden_dim")?.map(|v| v as usize)) {
        model_cfg.hidden_dim = v;
    }
    if let Some(v) = a.encoder_layers.or(num("encoder_layers")?.map(|v| v as usize)) {
        model_cfg.encoder_layers = v;
    }
    if let Some(v) = a.decoder_blocks.or(num("decoder_blocks")?.map(|v| v as usize)) {
        model_cfg.decoder_blocks = v;
    }
    if let Some(v) = a.heads.or(num("heads")?.map(|v| v as usize)) {
        model_cfg.attention_heads = v;
    }
    if let Some(v) = a.ffn_mult.or(num("ffn_mult")?.map(|v| v as usize)) {
        model_cfg.ffn_mult = v;
    }
    if let Some(v) = a.t_max.or(num("t_max")?.map(|v| v as usize)) {
        model_cfg.t_max = v;
    }

    let (ckpt, log_text, best_line) = match a.head {
        HeadArg::Gr => {
            let vocab_path = a
                .vocab
                .as_ref()
                .ok_or_else(|| anyhow!("--head gr requires --vocab"))?;
            let vocab = ValueVocabulary::load(vocab_path)?;
            model_cfg.vocab_size = vocab.vocab_size();
            let out = train(&train_ds, &val_ds, &vocab, &model_cfg, &cfg)?;
            let vocab_bytes = std::fs::read(vocab_path)?;
            let ckpt = Checkpoint {
                head: HeadParams::Gr(out.params),
                standardizer: out.standardizer,
                mixup_window: out.inference_mixup_window,
                vocab_fingerprint: genreg::fingerprint::fingerprint_bytes(&vocab_bytes),
            };
            let line = format!("best val mae {:.6} at step {}", out.best_val_mae, out.best_step);
            (ckpt, log_to_jsonl(&out.log), line)
        }
        HeadArg::Vr => {
            let out = train_vr(&train_ds, &val_ds, &model_cfg, &cfg)?;
            let ckpt = Checkpoint {
                head: HeadParams::Vr(out.params),
                standardizer: out.standardizer,
                mixup_window: 0,
                vocab_fingerprint: "none".into(),
            };
            let line = format!("best val mae {:.6} at step {}", out.best_val_mae, out.best_step);
            (ckpt, log_to_jsonl(&out.log), line)
        }
        HeadArg::Ordinal => {
            let out = train_ordinal(&train_ds, &val_ds, &model_cfg, &cfg, a.buckets)?;
            let ckpt = Checkpoint {
                head: HeadParams::Ordinal(out.params),
                standardizer: out.standardizer,
                mixup_window: 0,
                vocab_fingerprint: "none".into(),
            };
            let line = format!("best val mae {:.6} at step {}", out.best_val_mae, out.best_step);
            (ckpt, log_to_jsonl(&out.log), line)
        }
    };

    ckpt.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".metrics.jsonl"));
    std::fs::write(&log_path, log_text)?;
    println!("{best_line}");
    println!("checkpoint -> {}", a.out.display());
    println!("metrics log -> {}", log_path.display());

    let mut args = BTreeMap::new();
    args.insert("head".into(), head_name(a.head).into());
    args.insert("clem".into(), cfg.clem_enabled.to_string());
    args.insert("nw".into(), cfg.mixup_window.to_string());
    args.insert("lambda".into(), cfg.lambda.to_string());
    args.insert("steps".into(), cfg.steps.to_string());
    args.insert("lr".into(), cfg.learning_rate.to_string());
    args.insert("schedule".into(), format!("{:?}", cfg.schedule.strategy).to_lowercase());
    let mut manifest = RunManifest::new("train", args, vec![seed]);
    manifest.record_input(&a.data)?;
    if let Some(v) = &a.vocab {
        manifest.record_input(v)?;
    }
    manifest.record_output(&a.out)?;
    manifest.record_output(&log_path)?;
    manifest.save_beside(&a.out)?;
    Ok(())
}

fn head_name(h: HeadArg) -> &'static str {
    match h {
        HeadArg::Gr => "gr",
        HeadArg::Vr => "vr",
        HeadArg::Ordinal => "ordinal",
    }
}

// ── predict ─────────────────────────────────────────────────────────────

struct LoadedModel {
    ckpt: Checkpoint,
    vocab: Option<ValueVocabulary>,
}

fn load_model(ckpt_path: &Path, vocab_path: &Option<PathBuf>) -> Result<LoadedModel> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let vocab = match (&ckpt.head, vocab_path) {
        (HeadParams::Gr(_), Some(vp)) => {
            let bytes = std::fs::read(vp)?;
            let fp = genreg::fingerprint::fingerprint_bytes(&bytes);
            if fp != ckpt.vocab_fingerprint {
                bail!(
                    "vocabulary {} does not match checkpoint (fingerprint {} vs {})",
                    vp.display(),
                    fp,
                    ckpt.vocab_fingerprint
                );
            }
            Some(ValueVocabulary::load(vp)?)
        }
        (HeadParams::Gr(_), None) => bail!("gr checkpoints require --vocab"),
        (_, _) => None,
    };
    Ok(LoadedModel { ckpt, vocab })
}

fn model_predictions(
    model: &LoadedModel,
    dataset: &Dataset,
    mixup_override: Option<bool>,
) -> Result<(Vec<f64>, Option<Vec<inference::Prediction>>)> {
    let st = model.ckpt.standardizer.apply(dataset);
    match &model.ckpt.head {
        HeadParams::Gr(params) => {
            let vocab = model.vocab.as_ref().expect("vocab presence checked at load");
            let n_w = model.ckpt.mixup_window;
            let apply = mixup_override.unwrap_or(n_w > 0);
            let preds = inference::predict_batch(
                &st.features,
                params,
                vocab,
                params.config.t_max,
                apply,
                n_w,
            )?;
            let ys = preds.iter().map(|p| p.y).collect();
            Ok((ys, Some(preds)))
        }
        HeadParams::Vr(params) => {
            let ys = st
                .features
                .iter()
                .map(|x| vr_predict(x, params))
                .collect::<genreg::Result<Vec<f64>>>()?;
            Ok((ys, None))
        }
        HeadParams::Ordinal(params) => {
            let ys = st
                .features
                .iter()
                .map(|x| ordinal_predict(x, params))
                .collect::<genreg::Result<Vec<f64>>>()?;
            Ok((ys, None))
        }
    }
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.ckpt, &a.vocab)?;
    // Prediction inputs may omit the target column.
    let schema = read_schema(&a.schema)?;
    let dataset = match load_csv(&a.data, &schema) {
        Ok(outcome) => outcome.dataset,
        Err(_) => {
            // No target column: every column is a feature.
            let text = std::fs::read_to_string(&a.data)?;
            let mut lines = text.lines();
            let header = lines.next().ok_or_else(|| anyhow!("empty feature file"))?;
            let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
            let mut features = Vec::new();
            for (i, line) in lines.enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: Vec<f64> = line
                    .split(',')
                    .map(|c| {
                        c.trim()
                            .parse::<f64>()
                            .map_err(|_| anyhow!("line {}: bad cell '{c}'", i + 2))
                    })
                    .collect::<Result<_>>()?;
                features.push(row);
            }
            Dataset {
                feature_names: names,
                features,
                targets: Vec::new(),
            }
        }
    };
    if dataset.dim() != model.ckpt.head.config().feature_dim {
        bail!(
            "feature file has {} columns but checkpoint expects {}",
            dataset.dim(),
            model.ckpt.head.config().feature_dim
        );
    }
    let mixup_override = a.mixup.map(|t| t.on());
    let started = std::time::Instant::now();
    let (ys, preds) = model_predictions(&model, &dataset, mixup_override)?;
    let elapsed = started.elapsed();

    let mut csv = String::from("row_id,y_pred,tokens,terminated_by\n");
    for (i, y) in ys.iter().enumerate() {
        let (tokens, term) = match &preds {
            Some(ps) => {
                let ids: Vec<String> = ps[i].token_ids.iter().map(|t| t.to_string()).collect();
                let term = match ps[i].terminated_by {
                    Termination::Eos => "eos",
                    Termination::TMax => "t_max",
                };
                (ids.join(" "), term)
            }
            None => (String::new(), ""),
        };
        csv.push_str(&format!("{i},{y},{tokens},{term}\n"));
    }
    std::fs::write(&a.out, csv)?;
    println!(
        "wrote {} predictions -> {} ({:.1} rows/s)",
        ys.len(),
        a.out.display(),
        ys.len() as f64 / elapsed.as_secs_f64().max(1e-9)
    );

    let mut manifest = RunManifest::new("predict", BTreeMap::new(), vec![]);
    manifest.record_input(&a.ckpt)?;
    manifest.record_input(&a.data)?;
    manifest.record_output(&a.out)?;
    manifest.save_beside(&a.out)?;
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────────

fn evaluate_model(
    model: &LoadedModel,
    dataset: &Dataset,
    a: &EvaluateArgs,
) -> Result<(EvalReport, Option<Vec<Vec<f64>>>)> {
    let (ys, preds) = model_predictions(model, dataset, None)?;
    let mut report = metrics::build_eval_report(
        &ys,
        &dataset.targets,
        a.interval_width,
        a.open_from,
        a.xauc_pairs,
        a.seed,
    )?;
    let mut traces = None;
    if let (HeadParams::Gr(params), Some(vocab)) = (&model.ckpt.head, &model.vocab) {
        let ps = preds.expect("gr predictions present");
        report.monotonicity_violation_rate =
            Some(inference::monotonicity_violation_rate(&ps, vocab)?);
        let lens: Vec<usize> = ps.iter().map(|p| p.token_ids.len()).collect();
        report.mean_seq_len = Some(lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64);
        report.max_seq_len = lens.iter().max().copied();
        report.eos_terminated = Some(
            ps.iter()
                .filter(|p| p.terminated_by == Termination::Eos)
                .count(),
        );
        report.tmax_terminated = Some(
            ps.iter()
                .filter(|p| p.terminated_by == Termination::TMax)
                .count(),
        );
        // Per-step logits feed the neighbor-probability diagnostic.
        let st = model.ckpt.standardizer.apply(dataset);
        let mut all_rows = Vec::new();
        let trace_cap = 500.min(st.features.len());
        for x in st.features.iter().take(trace_cap) {
            let (_, trace) = inference::predict_traced(
                x,
                params,
                vocab,
                params.config.t_max,
                model.ckpt.mixup_window > 0,
                model.ckpt.mixup_window,
            )?;
            all_rows.extend(trace);
        }
        traces = Some(all_rows);
    }
    Ok((report, traces))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let model = load_model(&a.ckpt, &a.vocab)?;
    let dataset = read_dataset(&a.data, &a.schema)?;
    if dataset.dim() != model.ckpt.head.config().feature_dim {
        bail!(
            "dataset has {} features but checkpoint expects {}",
            dataset.dim(),
            model.ckpt.head.config().feature_dim
        );
    }
    let (report, traces) = evaluate_model(&model, &dataset, &a)?;

    let report_path = a.out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;

    let interval_path = a.out_dir.join("interval_mae.csv");
    let mut csv = String::from("lo,hi,count,mae\n");
    for row in &report.intervals {
        let hi = row.hi.map(|h| h.to_string()).unwrap_or_default();
        csv.push_str(&format!("{},{},{},{}\n", row.lo, hi, row.count, row.mae));
    }
    std::fs::write(&interval_path, csv)?;

    let mut outputs = vec![report_path.clone(), interval_path];
    if let (Some(rows), Some(vocab)) = (&traces, &model.vocab) {
        let scores = metrics::neighbor_prob_difference(rows, vocab);
        let path = a.out_dir.join("neighbor_prob_diff.csv");
        let mut csv = String::from("token_value,mean_abs_prob_diff\n");
        for (v, s) in vocab.values().iter().zip(&scores) {
            csv.push_str(&format!("{v},{s}\n"));
        }
        std::fs::write(&path, csv)?;
        outputs.push(path);

        // Contribution-weighted token embeddings (visualization data).
        if let HeadParams::Gr(params) = &model.ckpt.head {
            let path = a.out_dir.join("value_embeddings.csv");
            let mut csv = String::from("row_id,y,embedding\n");
            for (i, y) in dataset.targets.iter().enumerate().take(200) {
                if *y <= 0.0 {
                    continue;
                }
                let seq = codec::encode(*y, vocab, params.config.t_max)?;
                if seq.is_empty() {
                    continue;
                }
                let emb =
                    metrics::aggregated_value_embedding(&seq.ids, *y, vocab, &params.embedding)?;
                let rendered: Vec<String> = emb.iter().map(|v| format!("{v}")).collect();
                csv.push_str(&format!("{i},{y},{}\n", rendered.join(" ")));
            }
            std::fs::write(&path, csv)?;
            outputs.push(path);
        }
    }

    println!(
        "samples {}  mae {:.4}  xauc {:.4}",
        report.samples, report.mae, report.xauc
    );
    if let Some(rate) = report.monotonicity_violation_rate {
        println!(
            "monotonicity violations {:.2}%  mean seq len {:.2}",
            rate * 100.0,
            report.mean_seq_len.unwrap_or(0.0)
        );
    }

    if let Some(other_path) = &a.compare {
        let other = load_model(other_path, &a.vocab).or_else(|_| load_model(other_path, &None))?;
        let (other_report, _) = evaluate_model(&other, &dataset, &a)?;
        let table = format!(
            "{:<12} {:>14} {:>14}\n{:<12} {:>14.4} {:>14.4}\n{:<12} {:>14.4} {:>14.4}\n",
            "metric",
            a.ckpt.file_name().unwrap_or_default().to_string_lossy(),
            other_path.file_name().unwrap_or_default().to_string_lossy(),
            "mae",
            report.mae,
            other_report.mae,
            "xauc",
            report.xauc,
            other_report.xauc,
        );
        print!("{table}");
        let path = a.out_dir.join("compare.txt");
        std::fs::write(&path, table)?;
        outputs.push(path);
    }

    let mut manifest = RunManifest::new("evaluate", BTreeMap::new(), vec![a.seed]);
    manifest.record_input(&a.ckpt)?;
    manifest.record_input(&a.data)?;
    for out in &outputs {
        manifest.record_output(out)?;
    }
    manifest.save_beside(&report_path)?;
    Ok(())
}

// ── ablate ──────────────────────────────────────────────────────────────

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out_dir)?;
    let dataset = match &a.data {
        Some(p) => read_dataset(p, &a.schema)?,
        None => synth_longtail(a.n, a.d, a.seed, SynthParams::default())?,
    };
    let (train_ds, test_ds) = split(&dataset, 0.8, a.seed)?;
    let vocab = vocab::build_dynamic(&train_ds.targets, DynamicParams::default())?;
    let vocab_path = a.out_dir.join("vocab.json");
    vocab.save(&vocab_path)?;

    let mut model_cfg = ModelConfig::small(train_ds.dim(), vocab.vocab_size());
    model_cfg.seed = a.seed;
    let lr = a.lr.unwrap_or(2e-3);
    let base = TrainConfig {
        learning_rate: lr,
        steps: a.steps,
        eval_interval: (a.steps / 5).max(1),
        seed: a.seed,
        schedule: ScheduleConfig {
            strategy: DecayStrategy::Sigmoid,
            p0: 1.0,
            omega: omega_for(1.0, a.steps, 0.05).unwrap_or(200.0),
            ..ScheduleConfig::default()
        },
        ..TrainConfig::default()
    };

    struct Row {
        label: &'static str,
        cfg: TrainConfig,
    }
    let rows = [Row { label: "full", cfg: base },
        Row {
            label: "no_curriculum",
            cfg: TrainConfig {
                clem_enabled: false,
                ..base
            },
        },
        Row {
            label: "mixup_with_teacher_forcing",
            cfg: TrainConfig {
                mixup_ground_truth: true,
                schedule: ScheduleConfig::fixed(1.0),
                ..base
            },
        },
        Row {
            label: "curriculum_without_mixup",
            cfg: TrainConfig {
                mixup_window: 0,
                ..base
            },
        },
        Row {
            label: "linear_decay",
            cfg: TrainConfig {
                schedule: ScheduleConfig {
                    strategy: DecayStrategy::Linear,
                    p0: 1.0,
                    linear_slope: 1.0 / a.steps.max(1) as f64,
                    ..ScheduleConfig::default()
                },
                ..base
            },
        },
        Row {
            label: "exponential_decay",
            cfg: TrainConfig {
                schedule: ScheduleConfig {
                    strategy: DecayStrategy::Exponential,
                    p0: 1.0,
                    exp_rate: 3.0 / a.steps.max(1) as f64,
                    ..ScheduleConfig::default()
                },
                ..base
            },
        },
        Row {
            label: "fixed_p_0.5",
            cfg: TrainConfig {
                schedule: ScheduleConfig::fixed(0.5),
                ..base
            },
        },
        Row {
            label: "free_running",
            cfg: TrainConfig {
                schedule: ScheduleConfig::fixed(0.0),
                ..base
            },
        }];

    let mut table = String::from("row,label,val_mae,val_xauc,test_mae,test_xauc\n");
    for (i, row) in rows.iter().enumerate() {
        let out = train(&train_ds, &test_ds, &vocab, &model_cfg, &row.cfg)?;
        let st = out.standardizer.apply(&test_ds);
        let preds: Vec<f64> = inference::predict_batch(
            &st.features,
            &out.params,
            &vocab,
            model_cfg.t_max,
            out.inference_mixup_window > 0,
            out.inference_mixup_window,
        )?
        .iter()
        .map(|p| p.y)
        .collect();
        let test_mae = metrics::mae(&preds, &test_ds.targets)?;
        let test_xauc = metrics::xauc(&preds, &test_ds.targets, 100_000, a.seed)?;
        let last = out.log.iter().rev().find(|r| r.val_xauc.is_some()).unwrap();
        let tag = (b'a' + i as u8) as char;
        table.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            tag,
            row.label,
            out.best_val_mae,
            last.val_xauc.unwrap(),
            test_mae,
            test_xauc
        ));
        println!("row {tag} ({}) test mae {test_mae:.4} xauc {test_xauc:.4}", row.label);
        let log_path = a.out_dir.join(format!("row_{tag}_{}.metrics.jsonl", row.label));
        std::fs::write(&log_path, log_to_jsonl(&out.log))?;
    }
    let table_path = a.out_dir.join("ablation.csv");
    std::fs::write(&table_path, &table)?;
    println!("ablation table -> {}", table_path.display());

    let mut args = BTreeMap::new();
    args.insert("steps".into(), a.steps.to_string());
    args.insert("n".into(), a.n.to_string());
    let mut manifest = RunManifest::new("ablate", args, vec![a.seed]);
    manifest.record_output(&table_path)?;
    manifest.save_beside(&table_path)?;
    Ok(())
}
