//! The `fsar` command: synthesize embedding stores, train and evaluate
//! models, run ablation grids, check gradients and plot training logs.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric
//! failure.

mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind as ClapKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fsar_core::config::ModelConfig;
use fsar_core::dataset::{read_store, synth_dataset, write_store, EmbeddingStore, Manifest, Split, SynthConfig};
use fsar_core::engine::{
    ablation_grid, evaluate, load_checkpoint, read_metrics, run_ablation, save_checkpoint, train, write_metrics, Model,
    TrainState,
};
use fsar_core::fusion::FusionStrategy;
use fsar_core::gradsuite::gradient_suite;
use fsar_core::spm::ConstraintMode;
use fsar_core::{Error, ErrorKind, Result};
use serde::Serialize;

pub use report::{render_svg, summarize, Summary};

#[derive(Parser, Debug)]
#[command(name = "fsar", version, about = "Few-shot action recognition over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic frame store, prompt store and manifest.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or a freshly initialized model).
    Eval(EvalArgs),
    /// Train and evaluate every row of the ablation grid.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
    /// Plot metrics logs as SVG and print a summary table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Total number of classes.
    #[arg(long, default_value_t = 34)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    test_classes: usize,
    #[arg(long, default_value_t = 0)]
    val_classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long = "T", default_value_t = 8)]
    frames: usize,
    #[arg(long = "C", default_value_t = 64)]
    channels: usize,
    #[arg(long = "R", default_value_t = 16)]
    templates: usize,
    #[arg(long, default_value_t = 1.0)]
    appearance_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    motion_sep: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    scene_jitter: f64,
    #[arg(long, default_value_t = 0.05)]
    prompt_jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FusionArg {
    Concat,
    ConcatSum,
    ConcatSumGate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ConstraintArg {
    None,
    Support,
    Query,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// JSON model configuration; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets the initialization, training and evaluation seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    query: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    lambda3: Option<f64>,
    #[arg(long)]
    lambda4: Option<f64>,
    #[arg(long, value_enum)]
    toggle_hsmr: Option<Toggle>,
    #[arg(long, value_enum)]
    toggle_spm: Option<Toggle>,
    #[arg(long, value_enum)]
    toggle_padm: Option<Toggle>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long, value_enum)]
    constraint: Option<ConstraintArg>,
    /// Dotted override such as `optimizer.lr=0.001`; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Training episodes; the configured count when absent.
    #[arg(long)]
    episodes: Option<usize>,
    /// Directory receiving `model.ckpt` and `metrics.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// CSV receiving the result row.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    train_episodes: Option<usize>,
    /// Evaluation episodes per row.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Episodes per moving-average window.
    #[arg(long, default_value_t = 50)]
    window: usize,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Normal output goes to `out`, diagnostics to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ClapKind::DisplayHelp | ClapKind::DisplayVersion) => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(e.kind())
        }
    }
}

pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::Io { path: PathBuf::from("<stdout>"), source: e }
}

macro_rules! say {
    ($out:expr, $($arg:tt)*) => {
        writeln!($out, $($arg)*).map_err(stdout_err)?
    };
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
        Command::Gradcheck => gradcheck_cmd(out),
        Command::Report(a) => report_cmd(a, out),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> Result<()> {
    let held_out = a.test_classes + a.val_classes;
    if a.classes <= held_out {
        return Err(Error::Config(format!(
            "--classes {} leaves no training classes after {} test and {} validation classes",
            a.classes, a.test_classes, a.val_classes
        )));
    }
    let cfg = SynthConfig {
        train_classes: a.classes - held_out,
        val_classes: a.val_classes,
        test_classes: a.test_classes,
        per_class: a.per_class,
        frames: a.frames,
        channels: a.channels,
        templates: a.templates,
        appearance_sep: a.appearance_sep,
        motion_sep: a.motion_sep,
        noise: a.noise,
        scene_jitter: a.scene_jitter,
        prompt_jitter: a.prompt_jitter,
        seed: a.seed,
    };
    let json = serde_json_pretty(&cfg);
    say!(out, "synthetic data config:\n{json}");
    let (manifest, store) = synth_dataset(&cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let paths = StorePaths::under(&a.out);
    write_store(&paths.frames, &paths.prompts, &paths.manifest, &manifest, &store)?;
    say!(out, "wrote {} videos of {} classes", store.videos().len(), manifest.classes.len());
    for p in [&paths.frames, &paths.prompts, &paths.manifest] {
        say!(out, "  {}", p.display());
    }
    Ok(())
}

struct StorePaths {
    frames: PathBuf,
    prompts: PathBuf,
    manifest: PathBuf,
}

impl StorePaths {
    fn under(dir: &Path) -> Self {
        Self { frames: dir.join("frames.fse"), prompts: dir.join("prompts.fsp"), manifest: dir.join("manifest.json") }
    }
}

fn serde_json_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn load_data(d: &DataArgs) -> Result<(Manifest, EmbeddingStore)> {
    read_store(&d.frames, &d.prompts, &d.manifest)
}

/// Applies the file, the flags and then the dotted overrides to `base`, and
/// takes T, C and R from the data.
fn resolve(mut cfg: ModelConfig, a: &ModelArgs, manifest: Option<&Manifest>) -> Result<ModelConfig> {
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        cfg = ModelConfig::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(s) = a.seed {
        cfg.seeds.init = s;
        cfg.seeds.train = s;
        cfg.seeds.eval = s;
    }
    if let Some(v) = a.way {
        cfg.episode.way = v;
    }
    if let Some(v) = a.shot {
        cfg.episode.shot = v;
    }
    if let Some(v) = a.query {
        cfg.episode.queries = v;
    }
    if let Some(v) = a.gamma {
        cfg.seq_dis.gamma = v;
    }
    for (flag, slot) in [
        (a.lambda1, &mut cfg.distance.lambda1),
        (a.lambda2, &mut cfg.distance.lambda2),
        (a.lambda3, &mut cfg.lambda3),
        (a.lambda4, &mut cfg.lambda4),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    for (flag, slot) in [
        (a.toggle_hsmr, &mut cfg.components.hsmr),
        (a.toggle_spm, &mut cfg.components.spm),
        (a.toggle_padm, &mut cfg.components.padm),
    ] {
        if let Some(t) = flag {
            *slot = matches!(t, Toggle::On);
        }
    }
    if let Some(f) = a.fusion {
        cfg.fusion.strategy = match f {
            FusionArg::Concat => FusionStrategy::Concat,
            FusionArg::ConcatSum => FusionStrategy::ConcatSum,
            FusionArg::ConcatSumGate => FusionStrategy::ConcatSumGate,
        };
    }
    if let Some(c) = a.constraint {
        cfg.constraint = match c {
            ConstraintArg::None => ConstraintMode::None,
            ConstraintArg::Support => ConstraintMode::Support,
            ConstraintArg::Query => ConstraintMode::Query,
            ConstraintArg::Both => ConstraintMode::Both,
        };
    }
    if let Some(m) = manifest {
        cfg.frames = m.frames;
        cfg.channels = m.channels;
        cfg.templates = m.templates;
    }
    for o in &a.overrides {
        let (key, value) =
            o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not of the form KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn echo_config(out: &mut dyn Write, cfg: &ModelConfig) -> Result<()> {
    say!(out, "resolved config:\n{}", cfg.to_json());
    Ok(())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (manifest, store) = load_data(&a.data)?;
    let cfg = resolve(ModelConfig::default(), &a.model, Some(&manifest))?;
    echo_config(out, &cfg)?;
    let episodes = a.episodes.unwrap_or(cfg.train_episodes);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let mut state = TrainState::new(Model::<f32>::new(cfg)?);
    let mut window = Vec::new();
    let mut io_err = None;
    let rows = train(&mut state, &manifest, &store, episodes, |row| {
        if row.accuracy.is_finite() {
            window.push(row.accuracy);
        }
        if (row.episode + 1) % 100 == 0 && io_err.is_none() {
            let recent = &window[window.len().saturating_sub(100)..];
            let acc = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
            if let Err(e) = writeln!(out, "episode {} L_CE {:.4} running accuracy {acc:.3}", row.episode + 1, row.l_ce) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(stdout_err(e));
    }
    let ckpt = a.out.join("model.ckpt");
    let metrics = a.out.join("metrics.csv");
    save_checkpoint(&ckpt, &state.model)?;
    write_metrics(&metrics, &rows)?;
    say!(
        out,
        "trained {} episodes ({} optimizer steps, {} skipped); wrote {} and {}",
        rows.len(),
        state.steps,
        state.skipped,
        ckpt.display(),
        metrics.display()
    );
    Ok(())
}

/// Builds the model to evaluate: fresh weights, or checkpoint weights under
/// the resolved configuration (which must keep the parameter layout).
fn eval_model(a: &EvalArgs, manifest: &Manifest) -> Result<Model<f32>> {
    let Some(path) = &a.checkpoint else {
        return Model::new(resolve(ModelConfig::default(), &a.model, Some(manifest))?);
    };
    let saved = load_checkpoint::<f32>(path)?;
    let cfg = resolve(saved.config.clone(), &a.model, Some(manifest))?;
    let mut model = Model::<f32>::new(cfg)?;
    let same = model.params.len() == saved.params.len()
        && model.params.iter().zip(saved.params.iter()).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape());
    if !same {
        return Err(Error::Config(format!(
            "overrides change the parameter layout of checkpoint {}",
            path.display()
        )));
    }
    model.params = saved.params;
    Ok(model)
}

#[derive(Serialize)]
struct EvalRow {
    split: String,
    episodes: usize,
    accuracy: f64,
    ci95: Option<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn fmt_ci(ci: Option<f64>) -> String {
    ci.map_or_else(|| "NA".to_string(), |c| format!("{c:.4}"))
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let (manifest, store) = load_data(&a.data)?;
    let model = eval_model(&a, &manifest)?;
    echo_config(out, &model.config)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let n = a.episodes.unwrap_or(model.config.eval_episodes);
    let r = evaluate(&model, &manifest, &store, split, n, model.config.seeds.eval)?;
    say!(out, "accuracy {:.4} ± {} over {} {split} episodes", r.mean, fmt_ci(r.ci95), r.episodes);
    if let Some(path) = &a.out {
        let row = EvalRow { split: split.to_string(), episodes: r.episodes, accuracy: r.mean, ci95: r.ci95 };
        write_csv(path, &[row])?;
    }
    Ok(())
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write) -> Result<()> {
    let (manifest, store) = load_data(&a.data)?;
    let base = resolve(ModelConfig::default(), &a.model, Some(&manifest))?;
    echo_config(out, &base)?;
    let rows = ablation_grid(&base);
    let train_eps = a.train_episodes.unwrap_or(base.train_episodes);
    let eval_eps = a.episodes.unwrap_or(base.eval_episodes);
    let mut io_err = None;
    let results = run_ablation::<f32>(&rows, &manifest, &store, train_eps, eval_eps, |r| {
        if io_err.is_none() {
            if let Err(e) = writeln!(out, "{:<10} {:<28} {:.4} ± {}", r.table, r.label, r.accuracy, fmt_ci(r.ci95)) {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(stdout_err(e));
    }
    if let Some(path) = &a.out {
        write_csv(path, &results)?;
    }
    Ok(())
}

fn gradcheck_cmd(out: &mut dyn Write) -> Result<()> {
    let cases = gradient_suite()?;
    let mut failed = 0;
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAILED" };
        failed += usize::from(!c.passed());
        say!(out, "{verdict:<6} {:<30} relative error {:.2e} (tolerance {:.0e})", c.name, c.max_error, c.tolerance);
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", cases.len())));
    }
    say!(out, "all {} gradient checks passed", cases.len());
    Ok(())
}

fn report_cmd(a: ReportArgs, out: &mut dyn Write) -> Result<()> {
    if a.window == 0 {
        return Err(Error::Config("--window must be positive".into()));
    }
    let mut logs = Vec::new();
    for path in &a.metrics {
        let rows = read_metrics(path)?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        logs.push((name, rows));
    }
    let summaries: Vec<Summary> = logs.iter().map(|(n, r)| summarize(n, r, a.window)).collect();
    say!(out, "{:<20} {:>9} {:>8} {:>10} {:>10} {:>8}", "log", "episodes", "skipped", "accuracy", "L_CE", "total");
    for s in &summaries {
        say!(
            out,
            "{:<20} {:>9} {:>8} {:>10.4} {:>10.4} {:>8.4}",
            s.name,
            s.episodes,
            s.skipped,
            s.accuracy,
            s.ce,
            s.total
        );
    }
    let svg = render_svg(&logs, &summaries, a.window);
    std::fs::write(&a.out, svg).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    say!(out, "wrote {}", a.out.display());
    Ok(())
}
