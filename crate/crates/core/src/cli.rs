//! The `sasv` command line: `synth`, `train`, `score`, `eval`, `inspect`.
//!
//! Settings come from an optional `key = value` file (`--config`) overlaid by
//! flags; flags win. Keys are the long flag names, and `_` may stand for
//! `-`. A key the command does not use is a usage error.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::dataio::{
    load_checkpoint, read_embeddings, read_scores, read_trials, save_checkpoint, write_scores, Checkpoint,
    DataError, EmbeddingStore, Label, ScoreSet, TrialRecord, SEMB_MAGIC, SEMB_VERSION, SMDL_MAGIC, SMDL_VERSION,
};
use crate::graph::{GraphError, ModelParams, RhoMode};
use crate::metrics::{det_points, format_det_tsv, min_adcf, sasv_eers, ClassScores, Eer, MetricsError};
use crate::objective::{AdcfOperatingPoint, LossConfig};
use crate::synthgen::{self, SynthError};
use crate::trainer::{fit, score_branches, score_trials, Optimizer, SelectOn, TrainConfig, TrainError, TrialSet};

/// File names `train` writes into its output directory.
pub const MODEL_FILE: &str = "model.smdl";
pub const LOG_FILE: &str = "train_log.tsv";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values.
    Usage(String),
    /// I/O, data or numerical failure.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.into())
            }
        })*
    };
}

runtime_from!(DataError, GraphError, MetricsError, TrainError);

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(e: anyhow::Error) -> CliError {
    CliError::Runtime(e)
}

#[derive(Debug, Parser)]
#[command(name = "sasv", version, about = "Trainable spoofing-aware speaker verification back-end")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

// Parsed once per process, so the variant size gap does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: asv.semb, cm.semb, train.trl, dev.trl.
    Synth(SynthArgs),
    /// Train the back-end; writes model.smdl and train_log.tsv.
    Train(TrainArgs),
    /// Score a trial list with a trained model.
    Score(ScoreArgs),
    /// Evaluate a score file against labelled trials.
    Eval(EvalArgs),
    /// Describe a SEMB or SMDL file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// easy, hard or no-spoof-signal.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_speakers: Option<usize>,
    #[arg(long)]
    utts_per_speaker: Option<usize>,
    #[arg(long)]
    d_asv: Option<usize>,
    #[arg(long)]
    d_cm: Option<usize>,
    #[arg(long)]
    asv_noise: Option<f64>,
    #[arg(long)]
    cm_noise: Option<f64>,
    #[arg(long)]
    spoof_shift: Option<f64>,
    #[arg(long)]
    spoof_fraction: Option<f64>,
    #[arg(long)]
    dev_fraction: Option<f64>,
}

/// Operating-point settings shared by `train` and `eval`.
#[derive(Debug, Args)]
struct AdcfArgs {
    /// Named operating point (adcf-default).
    #[arg(long)]
    adcf_preset: Option<String>,
    #[arg(long)]
    c_miss: Option<f64>,
    #[arg(long)]
    c_fa_non: Option<f64>,
    #[arg(long)]
    c_fa_spf: Option<f64>,
    #[arg(long)]
    pi_tar: Option<f64>,
    #[arg(long)]
    pi_non: Option<f64>,
    #[arg(long)]
    pi_spf: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// ASV embedding store (SEMB).
    #[arg(long)]
    asv: Option<PathBuf>,
    /// CM embedding store (SEMB).
    #[arg(long)]
    cm: Option<PathBuf>,
    #[arg(long)]
    train_trials: Option<PathBuf>,
    #[arg(long)]
    dev_trials: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// A fixed fusion weight in [0, 1], or `trainable`.
    #[arg(long)]
    rho: Option<String>,
    #[arg(long)]
    lambda_bce: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    h1: Option<usize>,
    #[arg(long)]
    h2: Option<usize>,
    /// min-adcf or final-epoch.
    #[arg(long)]
    select_on: Option<String>,
    #[command(flatten)]
    adcf: AdcfArgs,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Checkpoint (SMDL).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    asv: PathBuf,
    #[arg(long)]
    cm: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Score file to write.
    #[arg(long)]
    out: PathBuf,
    /// Also write `<out>.branch.tsv` with the calibrated branch scores.
    #[arg(long)]
    dump_branch: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Write the DET staircase as TSV.
    #[arg(long)]
    det: Option<PathBuf>,
    #[command(flatten)]
    adcf: AdcfArgs,
}

#[derive(Debug, Args)]
struct InspectArgs {
    path: PathBuf,
}

const ADCF_KEYS: &[&str] = &["adcf-preset", "c-miss", "c-fa-non", "c-fa-spf", "pi-tar", "pi-non", "pi-spf"];

const SYNTH_KEYS: &[&str] = &[
    "preset",
    "out",
    "seed",
    "n-speakers",
    "utts-per-speaker",
    "d-asv",
    "d-cm",
    "asv-noise",
    "cm-noise",
    "spoof-shift",
    "spoof-fraction",
    "dev-fraction",
];

const TRAIN_KEYS: &[&str] = &[
    "asv",
    "cm",
    "train-trials",
    "dev-trials",
    "out",
    "seed",
    "epochs",
    "batch-size",
    "lr",
    "optimizer",
    "rho",
    "lambda-bce",
    "alpha",
    "h1",
    "h2",
    "select-on",
];

const EVAL_KEYS: &[&str] = &["scores", "trials", "det"];

/// Merged `key = value` settings for one command.
#[derive(Debug, Default)]
struct Settings {
    values: BTreeMap<String, String>,
}

fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

impl Settings {
    fn parse_file(text: &str, allowed: &[&[&str]], origin: &Path) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                usage(format!("{}:{}: expected `key = value`, got {raw:?}", origin.display(), i + 1))
            })?;
            let key = normalize_key(key);
            if !allowed.iter().any(|set| set.contains(&key.as_str())) {
                return Err(usage(format!("{}:{}: unknown key {key:?}", origin.display(), i + 1)));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(Self { values })
    }

    fn load(path: Option<&Path>, allowed: &[&[&str]]) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse_file(&text, allowed, p)
            }
        }
    }

    fn set(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    fn set_path(&mut self, key: &str, value: &Option<PathBuf>) {
        if let Some(p) = value {
            self.values.insert(key.to_string(), p.to_string_lossy().into_owned());
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| v.parse::<T>().map_err(|e| usage(format!("invalid value {v:?} for {key}: {e}"))))
            .transpose()
    }

    fn apply<T: FromStr>(&self, key: &str, target: &mut T) -> Result<(), CliError>
    where
        T::Err: fmt::Display,
    {
        if let Some(v) = self.get(key)? {
            *target = v;
        }
        Ok(())
    }

    fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.values
            .get(key)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("missing required setting --{key}")))
    }

    fn set_adcf(&mut self, a: &AdcfArgs) {
        self.set("adcf-preset", a.adcf_preset.as_ref());
        self.set("c-miss", a.c_miss);
        self.set("c-fa-non", a.c_fa_non);
        self.set("c-fa-spf", a.c_fa_spf);
        self.set("pi-tar", a.pi_tar);
        self.set("pi-non", a.pi_non);
        self.set("pi-spf", a.pi_spf);
    }

    fn operating_point(&self) -> Result<AdcfOperatingPoint, CliError> {
        let mut op = match self.values.get("adcf-preset") {
            Some(name) => AdcfOperatingPoint::preset(name).map_err(|e| usage(e.to_string()))?,
            None => AdcfOperatingPoint::default(),
        };
        self.apply("c-miss", &mut op.c_miss)?;
        self.apply("c-fa-non", &mut op.c_fa_non)?;
        self.apply("c-fa-spf", &mut op.c_fa_spf)?;
        self.apply("pi-tar", &mut op.pi_tar)?;
        self.apply("pi-non", &mut op.pi_non)?;
        self.apply("pi-spf", &mut op.pi_spf)?;
        op.validate().map_err(|e| usage(e.to_string()))?;
        Ok(op)
    }
}

fn parse_rho(v: &str) -> Result<RhoMode, CliError> {
    let mode = if v == "trainable" {
        RhoMode::Trainable
    } else {
        let rho: f64 = v
            .parse()
            .map_err(|_| usage(format!("--rho expects a number in [0, 1] or `trainable`, got {v:?}")))?;
        RhoMode::Frozen(rho)
    };
    mode.validate().map_err(|e| usage(e.to_string()))
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(runtime(anyhow::anyhow!("input file {} does not exist", path.display())))
    }
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn class_counts(trials: &[TrialRecord]) -> [usize; 3] {
    Label::ALL.map(|l| trials.iter().filter(|t| t.label == l).count())
}

/// Parses `args` (including the program name) and runs the command, writing
/// human-readable output to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}").map_err(anyhow::Error::from).map_err(runtime)?;
            return Ok(());
        }
        Err(e) => return Err(usage(e.render().to_string().trim_end())),
    };
    match cli.cmd {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Score(a) => cmd_score(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Inspect(a) => cmd_inspect(&a.path, out),
    }
}

/// Entry point for the binary: runs and maps the outcome to an exit code.
pub fn main_with_args(args: impl IntoIterator<Item = OsString>) -> u8 {
    let stdout = std::io::stdout();
    match run(args, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("{m}"),
                CliError::Runtime(_) => eprintln!("sasv: error: {e}"),
            }
            e.exit_code()
        }
    }
}

fn emit(out: &mut dyn Write, text: fmt::Arguments<'_>) -> Result<(), CliError> {
    out.write_fmt(text)
        .and_then(|_| out.write_all(b"\n"))
        .context("writing output")
        .map_err(runtime)
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        emit($out, format_args!($($arg)*))
    };
}

fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref(), &[SYNTH_KEYS])?;
    s.set("preset", a.preset.as_ref());
    s.set_path("out", &a.out);
    s.set("seed", a.seed);
    s.set("n-speakers", a.n_speakers);
    s.set("utts-per-speaker", a.utts_per_speaker);
    s.set("d-asv", a.d_asv);
    s.set("d-cm", a.d_cm);
    s.set("asv-noise", a.asv_noise);
    s.set("cm-noise", a.cm_noise);
    s.set("spoof-shift", a.spoof_shift);
    s.set("spoof-fraction", a.spoof_fraction);
    s.set("dev-fraction", a.dev_fraction);

    let preset = s.values.get("preset").map_or("easy", String::as_str);
    let mut cfg = synthgen::preset_by_name(preset).map_err(|e| usage(e.to_string()))?;
    s.apply("seed", &mut cfg.seed)?;
    s.apply("n-speakers", &mut cfg.n_speakers)?;
    s.apply("utts-per-speaker", &mut cfg.utts_per_speaker)?;
    s.apply("d-asv", &mut cfg.d_asv)?;
    s.apply("d-cm", &mut cfg.d_cm)?;
    s.apply("asv-noise", &mut cfg.asv_noise)?;
    s.apply("cm-noise", &mut cfg.cm_noise)?;
    s.apply("spoof-shift", &mut cfg.spoof_shift)?;
    s.apply("spoof-fraction", &mut cfg.spoof_fraction)?;
    s.apply("dev-fraction", &mut cfg.dev_fraction)?;
    let dir = s.path("out")?;

    let corpus = synthgen::generate(&cfg).map_err(|e| match e {
        SynthError::Data(d) => d.into(),
        other => usage(other.to_string()),
    })?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    corpus.write_to(&dir)?;

    say!(out, "preset {preset}, seed {}", cfg.seed)?;
    say!(out, "{}: {} vectors, dim {}", synthgen::ASV_FILE, corpus.asv.len(), corpus.asv.dim())?;
    say!(out, "{}: {} vectors, dim {}", synthgen::CM_FILE, corpus.cm.len(), corpus.cm.dim())?;
    for (name, trials) in [(synthgen::TRAIN_FILE, &corpus.train), (synthgen::DEV_FILE, &corpus.dev)] {
        let [t, n, sp] = class_counts(trials);
        say!(out, "{name}: {} trials (target {t}, nontarget {n}, spoof {sp})", trials.len())?;
    }
    Ok(())
}

fn train_config(s: &Settings) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    s.apply("seed", &mut cfg.seed)?;
    s.apply("epochs", &mut cfg.epochs)?;
    s.apply("batch-size", &mut cfg.batch_size)?;
    s.apply("lr", &mut cfg.lr)?;
    s.apply("h1", &mut cfg.h1)?;
    s.apply("h2", &mut cfg.h2)?;
    if let Some(v) = s.values.get("optimizer") {
        cfg.optimizer = match v.as_str() {
            "adam" => Optimizer::ADAM,
            "sgd" => Optimizer::Sgd,
            other => return Err(usage(format!("unknown optimizer {other:?} (expected adam or sgd)"))),
        };
    }
    if let Some(v) = s.values.get("rho") {
        cfg.rho_mode = parse_rho(v)?;
    }
    if let Some(v) = s.values.get("select-on") {
        cfg.select_on = match v.as_str() {
            "min-adcf" | "min_adcf" => SelectOn::MinAdcf,
            "final-epoch" | "final_epoch" => SelectOn::FinalEpoch,
            other => return Err(usage(format!("unknown select-on {other:?} (expected min-adcf or final-epoch)"))),
        };
    }
    let mut loss = LossConfig {
        operating_point: s.operating_point()?,
        ..LossConfig::default()
    };
    s.apply("lambda-bce", &mut loss.lambda_bce)?;
    s.apply("alpha", &mut loss.alpha)?;
    cfg.loss = loss;
    if cfg.h1 == 0 || cfg.h2 == 0 {
        return Err(usage("h1 and h2 must be positive"));
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref(), &[TRAIN_KEYS, ADCF_KEYS])?;
    s.set_path("asv", &a.asv);
    s.set_path("cm", &a.cm);
    s.set_path("train-trials", &a.train_trials);
    s.set_path("dev-trials", &a.dev_trials);
    s.set_path("out", &a.out);
    s.set("seed", a.seed);
    s.set("epochs", a.epochs);
    s.set("batch-size", a.batch_size);
    s.set("lr", a.lr);
    s.set("optimizer", a.optimizer.as_ref());
    s.set("rho", a.rho.as_ref());
    s.set("lambda-bce", a.lambda_bce);
    s.set("alpha", a.alpha);
    s.set("h1", a.h1);
    s.set("h2", a.h2);
    s.set("select-on", a.select_on.as_ref());
    s.set_adcf(&a.adcf);

    let cfg = train_config(&s)?;
    let inputs = ["asv", "cm", "train-trials", "dev-trials"].map(|k| s.path(k));
    let [asv_path, cm_path, train_path, dev_path] = inputs;
    let (asv_path, cm_path, train_path, dev_path) = (asv_path?, cm_path?, train_path?, dev_path?);
    let dir = s.path("out")?;
    for p in [&asv_path, &cm_path, &train_path, &dev_path] {
        require_file(p)?;
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let asv = read_embeddings(&asv_path)?;
    let cm = read_embeddings(&cm_path)?;
    let train_trials = read_trials(&train_path)?;
    let dev_trials = read_trials(&dev_path)?;
    let train = TrialSet::new(&train_trials, &asv, &cm)?;
    let dev = TrialSet::new(&dev_trials, &asv, &cm)?;
    if let Some(missing) = Label::ALL.into_iter().find(|&l| !dev.labels().contains(&l)) {
        return Err(runtime(anyhow::anyhow!("dev trials contain no {missing} trials")));
    }

    say!(
        out,
        "train {} trials, dev {} trials, d_asv {}, d_cm {}",
        train.len(),
        dev.len(),
        asv.dim(),
        cm.dim()
    )?;
    let start = Instant::now();
    let mut progress: Result<(), CliError> = Ok(());
    let outcome = fit(&cfg, &train, &dev, |e| {
        if progress.is_ok() {
            progress = say!(
                out,
                "epoch {:>4}  train loss {:.6}  dev min a-DCF {:.6} (norm {:.6})  rho {:.4}",
                e.epoch,
                e.train_loss,
                e.dev.min_adcf,
                e.dev.min_adcf_normalized,
                e.rho
            );
        }
    })?;
    progress?;
    let elapsed = start.elapsed();

    let model_path = dir.join(MODEL_FILE);
    let log_path = dir.join(LOG_FILE);
    save_checkpoint(&outcome.checkpoint(), &model_path)?;
    std::fs::write(&log_path, outcome.report.to_tsv()).with_context(|| format!("writing {}", log_path.display()))?;

    match outcome.report.selected() {
        Some(best) => {
            say!(out, "selected epoch\t{}", best.epoch)?;
            say!(out, "dev min_adcf\t{:.12}", best.dev.min_adcf)?;
            say!(out, "dev min_adcf_norm\t{:.12}", best.dev.min_adcf_normalized)?;
        }
        None => say!(out, "no epochs run; saved initial parameters")?,
    }
    say!(out, "wall time\t{:.2}s", elapsed.as_secs_f64())?;
    say!(out, "wrote {} and {}", model_path.display(), log_path.display())
}

fn load_model(path: &Path) -> Result<ModelParams, CliError> {
    let ckpt = load_checkpoint(path)?;
    ModelParams::from_checkpoint(&ckpt)
        .with_context(|| format!("loading model {}", path.display()))
        .map_err(runtime)
}

fn cmd_score(a: &ScoreArgs, out: &mut dyn Write) -> Result<(), CliError> {
    for p in [&a.model, &a.asv, &a.cm, &a.trials] {
        require_file(p)?;
    }
    let params = load_model(&a.model)?;
    let asv = read_embeddings(&a.asv)?;
    let cm = read_embeddings(&a.cm)?;
    params
        .check_embedding_dims(asv.dim(), cm.dim())
        .context("embedding stores do not fit the model")
        .map_err(runtime)?;
    let trials = read_trials(&a.trials)?;
    let set = TrialSet::new(&trials, &asv, &cm)?;

    let scores = if a.dump_branch {
        let branches = score_branches(&params, &set)?;
        let mut tsv = String::from("enrol\ttest\ts_sasv\ts_asv_cal\ts_cm_cal\n");
        for (t, b) in trials.iter().zip(&branches) {
            tsv.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
                t.enrol_id, t.test_id, b.s_sasv, b.s_asv_cal, b.s_cm_cal
            ));
        }
        let path = sidecar(&a.out, ".branch.tsv");
        std::fs::write(&path, tsv).with_context(|| format!("writing {}", path.display()))?;
        say!(out, "wrote {}", path.display())?;
        branches.iter().map(|b| b.s_sasv).collect()
    } else {
        score_trials(&params, &set)?
    };
    write_scores(&ScoreSet::from_scores(&trials, &scores)?, &a.out)?;
    say!(out, "scored {} trials into {}", trials.len(), a.out.display())
}

/// Numbers printed by `eval`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub counts: [usize; 3],
    pub min_adcf: f64,
    pub min_adcf_normalized: f64,
    pub argmin_tau: f64,
    pub sv_eer: Option<Eer>,
    pub spf_eer: Option<Eer>,
    pub sasv_eer: Option<Eer>,
}

pub fn evaluate_scores(set: &ScoreSet, op: &AdcfOperatingPoint) -> Result<EvalSummary, CliError> {
    let classes = ClassScores::from(set);
    let sweep = min_adcf(&classes, op)?;
    let eers = sasv_eers(&classes);
    Ok(EvalSummary {
        counts: Label::ALL.map(|l| classes.class(l).len()),
        min_adcf: sweep.min_adcf,
        min_adcf_normalized: sweep.min_adcf_normalized,
        argmin_tau: sweep.argmin_tau,
        sv_eer: eers.sv,
        spf_eer: eers.spf,
        sasv_eer: eers.sasv,
    })
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut s = Settings::load(a.config.as_deref(), &[EVAL_KEYS, ADCF_KEYS])?;
    s.set_path("scores", &a.scores);
    s.set_path("trials", &a.trials);
    s.set_path("det", &a.det);
    s.set_adcf(&a.adcf);
    let op = s.operating_point()?;
    let scores_path = s.path("scores")?;
    let trials_path = s.path("trials")?;
    for p in [&scores_path, &trials_path] {
        require_file(p)?;
    }

    let trials = read_trials(&trials_path)?;
    let entries = read_scores(&scores_path)?;
    let set = ScoreSet::join(&trials, &entries)?;
    let summary = evaluate_scores(&set, &op)?;

    let [t, n, sp] = summary.counts;
    say!(out, "trials\t{} (target {t}, nontarget {n}, spoof {sp})", set.len())?;
    say!(out, "min_adcf\t{:.12}", summary.min_adcf)?;
    say!(out, "min_adcf_norm\t{:.12}", summary.min_adcf_normalized)?;
    say!(out, "argmin_tau\t{:.6}", summary.argmin_tau)?;
    let show = |e: Option<Eer>| e.map_or_else(|| "n/a".to_string(), |e| format!("{:.6} (threshold {:.6})", e.eer, e.threshold));
    say!(out, "sv_eer\t{}", show(summary.sv_eer))?;
    say!(out, "spf_eer\t{}", show(summary.spf_eer))?;
    say!(out, "sasv_eer\t{}", show(summary.sasv_eer))?;

    if let Ok(det) = s.path("det") {
        let classes = ClassScores::from(&set);
        let points = det_points(&classes)?;
        std::fs::write(&det, format_det_tsv(&points)).with_context(|| format!("writing {}", det.display()))?;
        say!(out, "wrote {}", det.display())?;
    }
    Ok(())
}

fn l2(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn describe_semb(store: &EmbeddingStore, out: &mut dyn Write) -> Result<(), CliError> {
    say!(out, "format\tSEMB v{SEMB_VERSION}")?;
    say!(out, "dim\t{}", store.dim())?;
    say!(out, "count\t{}", store.len())?;
    let norms: Vec<f64> = store
        .iter()
        .map(|(_, v)| l2(v.iter().map(|&x| f64::from(x))))
        .collect();
    if !norms.is_empty() {
        let min = norms.iter().copied().fold(f64::INFINITY, f64::min);
        let max = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        say!(out, "l2 norm\tmin {min:.6}, mean {mean:.6}, max {max:.6}")?;
    }
    Ok(())
}

fn describe_smdl(ckpt: &Checkpoint, out: &mut dyn Write) -> Result<(), CliError> {
    say!(out, "format\tSMDL v{SMDL_VERSION}")?;
    for (k, v) in &ckpt.metadata {
        say!(out, "meta\t{k}\t{v}")?;
    }
    for (name, t) in ckpt.tensors() {
        say!(
            out,
            "tensor\t{name}\t{:?}\tl2 {:.6}",
            t.shape,
            l2(t.data.iter().map(|&x| f64::from(x)))
        )?;
    }
    Ok(())
}

fn cmd_inspect(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let magic: [u8; 4] = bytes
        .get(..4)
        .and_then(|m| m.try_into().ok())
        .ok_or(DataError::Truncated {
            offset: 0,
            needed: 4,
            available: bytes.len(),
        })?;
    say!(out, "file\t{}", path.display())?;
    if &magic == SEMB_MAGIC {
        describe_semb(&EmbeddingStore::from_bytes(&bytes)?, out)
    } else if &magic == SMDL_MAGIC {
        describe_smdl(&Checkpoint::from_bytes(&bytes)?, out)
    } else {
        Err(DataError::BadMagic {
            expected: "SEMB or SMDL",
            found: magic,
        }
        .into())
    }
}

/// Runs `args` and returns `(exit code, captured stdout)`; stderr output is
/// folded into the returned text for failures.
pub fn run_captured<I, T>(args: I) -> (u8, String)
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let mut buf = Vec::new();
    let result = run(args, &mut buf);
    let mut text = String::from_utf8_lossy(&buf).into_owned();
    match result {
        Ok(()) => (0, text),
        Err(e) => {
            text.push_str(&e.to_string());
            (e.exit_code(), text)
        }
    }
}
