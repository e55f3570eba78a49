//! The `gpm` command line: cohort generation, training, evaluation, ablation
//! sweeps and reproduction profiles.
//!
//! Every command writes only inside `--out` and appends one [`RunManifest`]
//! line to `<out>/manifest.jsonl`. Exit codes: 0 success, 1 usage, 2 data
//! error, 3 numeric failure.

mod manifest;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gpm_core::checkpoint::{checkpoint_to_string, load_checkpoint, CheckpointError};
use gpm_core::data::{cohort_to_string, load_cohort, CohortIoError, LoadMode};
use gpm_core::metrics::{evaluate, records, MetricsError};
use gpm_core::model::{predict_cohort, ModelError};
use gpm_core::repro::{self, degree_tables, DegreeResult, Overrides, Recipe, ReproError, LABEL};
use gpm_core::sweep::{sweep, SweepAxis, SweepValue};
use gpm_core::synthetic::{generate_cohort, split_biased, split_random, GeneratorSpec, SyntheticError};
use gpm_core::trainer::{train_with_progress, TrainConfig, TrainError};
use gpm_core::{jsonfmt, Cohort, Fusion};

pub use manifest::{read_manifests, sha256_hex, Artifact, RunManifest, MANIFEST_FILE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

impl From<CohortIoError> for CliError {
    fn from(e: CohortIoError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Shape { .. } => Self::Data(format!("dimension mismatch: {e}")),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<SyntheticError> for CliError {
    fn from(e: SyntheticError) -> Self {
        match e {
            SyntheticError::Spec(_) | SyntheticError::Degree(_) | SyntheticError::Fraction(_) => {
                Self::Usage(e.to_string())
            }
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => Self::Numeric(e.to_string()),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => Self::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

impl From<ReproError> for CliError {
    fn from(e: ReproError) -> Self {
        match e {
            ReproError::Unknown(_) => Self::Usage(e.to_string()),
            ReproError::Synthetic(s) => s.into(),
            ReproError::Train(t) => t.into(),
            other => Self::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gpm", version, about = "Treatment-outcome modeling on multimodal cohorts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort and its train/test split.
    Generate(GenerateArgs),
    /// Train a model on the factual data of a cohort file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a cohort file.
    Eval(EvalArgs),
    /// Sweep one model setting over seeds and bias degrees.
    Ablate(AblateArgs),
    /// Run a built-in reproduction profile.
    Profile(ProfileArgs),
}

fn degree_parser() -> clap::builder::RangedI64ValueParser<u8> {
    clap::value_parser!(u8).range(1..=4)
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Number of samples.
    #[arg(long)]
    pub n: Option<usize>,
    /// Bias degree of the split, 1 (mild) to 4.
    #[arg(long, value_parser = degree_parser())]
    pub degree: Option<u8>,
    /// Strength of confounding in treatment assignment.
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML generator spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split uniformly at random with this test fraction instead of by degree.
    #[arg(long, value_name = "FRACTION")]
    pub random_split: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Cohort file (JSON Lines); oracle fields are ignored.
    #[arg(long)]
    pub cohort: PathBuf,
    /// TOML training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    /// Latent dimension.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: Option<u64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Suffix for the output names, e.g. `test` gives `metrics_test.json`.
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_parser = parse_axis)]
    pub axis: SweepAxis,
    /// Comma-separated values of the axis, e.g. `poe,moe,concat`.
    #[arg(long)]
    pub values: String,
    /// Number of training seeds per value.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    /// First training seed; seeds run consecutively from here.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Bias degrees, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "3", value_parser = degree_parser())]
    pub degree: Vec<u8>,
    /// Cohort with oracle fields; generated when absent.
    #[arg(long)]
    pub cohort: Option<PathBuf>,
    /// Size of the generated cohort.
    #[arg(long, default_value_t = 504)]
    pub n: usize,
    /// Bias strength of the generated cohort.
    #[arg(long, default_value_t = gpm_core::synthetic::DEFAULT_BIAS_STRENGTH)]
    pub bias: f64,
    /// Seed of the generated cohort and of the split.
    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
    /// TOML training config; the swept axis and seed override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    /// Run cells one after another instead of in parallel.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(Recipe::builtin_names().collect::<Vec<_>>()))]
    pub name: String,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Use seeds 1..=N instead of the recipe's seeds.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn usage_for(sub: Option<&OsString>) -> clap::builder::StyledStr {
    let mut cmd = <Cli as clap::CommandFactory>::command();
    cmd.build();
    let name = sub.map(|s| s.to_string_lossy().into_owned());
    match name.and_then(|n| cmd.find_subcommand_mut(&n).cloned()) {
        Some(mut sc) => sc.render_usage(),
        None => cmd.render_usage(),
    }
}

fn parse_axis(s: &str) -> Result<SweepAxis, String> {
    s.parse()
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return 0;
            }
            if e.kind() != clap::error::ErrorKind::MissingRequiredArgument {
                eprintln!("\n{}", usage_for(argv.get(1)));
            }
            return 1;
        }
    };
    let replay: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(cli.command, replay) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, argv: Vec<String>) -> Result<(), CliError> {
    let start = Instant::now();
    let (name, out, mut manifest) = match command {
        Command::Generate(a) => ("generate", a.out.clone(), cmd_generate(&a)?),
        Command::Train(a) => ("train", a.out.clone(), cmd_train(&a)?),
        Command::Eval(a) => ("eval", a.out.clone(), cmd_eval(&a)?),
        Command::Ablate(a) => ("ablate", a.out.clone(), cmd_ablate(&a)?),
        Command::Profile(a) => ("profile", a.out.clone(), cmd_profile(&a)?),
    };
    manifest.command = name.into();
    manifest.argv = argv;
    manifest.wall_seconds = start.elapsed().as_secs_f64();
    manifest.append(&out)?;
    Ok(())
}

/// Collects output files of one command.
struct OutDir {
    root: PathBuf,
    written: Vec<Artifact>,
}

impl OutDir {
    fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Data(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_owned(),
            written: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, body: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
        let path = self.root.join(name);
        let body = body.as_ref();
        fs::write(&path, body).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(Artifact::from_bytes(name.to_owned(), body));
        Ok(path)
    }

    fn finish(self, config: serde_json::Value, seeds: Vec<u64>, inputs: Vec<Artifact>) -> RunManifest {
        RunManifest {
            command: String::new(),
            argv: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config,
            seeds,
            inputs,
            outputs: self.written,
            wall_seconds: 0.0,
        }
    }
}

fn input(path: &Path) -> Result<Artifact, CliError> {
    Artifact::of(path, path.display().to_string())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
}

fn cmd_generate(a: &GenerateArgs) -> Result<RunManifest, CliError> {
    let mut inputs = Vec::new();
    let mut spec = match &a.config {
        Some(p) => {
            inputs.push(input(p)?);
            toml::from_str::<GeneratorSpec>(&read_text(p)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => GeneratorSpec::default(),
    };
    if let Some(n) = a.n {
        spec.n = n;
    }
    if let Some(d) = a.degree {
        spec.degree = d;
    }
    if let Some(b) = a.bias {
        spec.bias_strength = b;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let cohort = generate_cohort(&spec)?;
    let (train_set, test_set) = match a.random_split {
        Some(f) => split_random(&cohort, f, spec.seed)?,
        None => split_biased(&cohort, spec.degree, spec.seed)?,
    };
    let mut out = OutDir::create(&a.out)?;
    out.write("cohort.jsonl", cohort_to_string(&cohort)?)?;
    out.write("train.jsonl", cohort_to_string(&train_set)?)?;
    out.write("test.jsonl", cohort_to_string(&test_set)?)?;
    let split = match a.random_split {
        Some(f) => format!("random split, test fraction {f}"),
        None => format!("bias degree {}", spec.degree),
    };
    println!(
        "generated {} samples ({} treated); train {}, test {} ({split})",
        cohort.len(),
        cohort.samples.iter().filter(|s| s.t == 1).count(),
        train_set.len(),
        test_set.len()
    );
    let config = serde_json::json!({ "generator": spec, "random_split": a.random_split });
    Ok(out.finish(config, vec![spec.seed], inputs))
}

fn cmd_train(a: &TrainArgs) -> Result<RunManifest, CliError> {
    let cohort = load_cohort(&a.cohort, LoadMode::Blind)?;
    let mut inputs = vec![input(&a.cohort)?];
    let mut config = match &a.config {
        Some(p) => {
            inputs.push(input(p)?);
            TrainConfig::from_toml_str(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => {
            let mut c = TrainConfig::default();
            c.model.d_tab = cohort.d_tab;
            c.model.d_img = cohort.d_img;
            c
        }
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(e) = a.epochs {
        config.epochs = e as usize;
    }
    if let Some(f) = a.fusion {
        config.model.fusion = f;
    }
    if let Some(d) = a.dim {
        config.model.d = d as usize;
    }
    if let Some(b) = a.beta {
        config.model.beta = b;
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let every = (config.epochs / 10).max(1);
    let ck = train_with_progress(&cohort, &config, &mut |s| {
        if s.epoch % every == 0 || s.epoch + 1 == config.epochs {
            eprintln!(
                "epoch {:>5}  loss {:.4}  bce {:.4}  kl {:.4}",
                s.epoch, s.loss, s.cross_entropy, s.kl
            );
        }
    })?;
    let mut out = OutDir::create(&a.out)?;
    out.write("checkpoint.jsonl", checkpoint_to_string(&ck))?;
    out.write("history.csv", csv_string(&ck.history))?;
    out.write("config.toml", config.to_toml_string())?;
    if let Some(last) = ck.history.last() {
        println!(
            "trained {} epochs on {} samples; final loss {:.4} (kl {:.4})",
            config.epochs,
            cohort.len(),
            last.loss,
            last.kl
        );
    }
    Ok(out.finish(to_json(&config), vec![config.seed], inputs))
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    id: &'a str,
    t: u8,
    y: u8,
    y0_hat: f64,
    y1_hat: f64,
    effect_hat: f64,
    policy: u8,
    y0_prob: Option<f64>,
    y1_prob: Option<f64>,
}

fn check_dims(cohort: &Cohort, config: &gpm_core::ModelConfig) -> Result<(), CliError> {
    for (what, found, expected) in [
        ("x_tab", cohort.d_tab, config.d_tab),
        ("x_img", cohort.d_img, config.d_img),
    ] {
        if found != expected {
            return Err(CliError::Data(format!(
                "dimension mismatch: cohort {what} has dimension {found}, checkpoint expects {expected}"
            )));
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<RunManifest, CliError> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let cohort = load_cohort(&a.cohort, LoadMode::Full)?;
    let inputs = vec![input(&a.checkpoint)?, input(&a.cohort)?];
    let model = &ck.train_config.model;
    check_dims(&cohort, model)?;
    let preds = predict_cohort(&cohort, &ck.params, model)?;
    let recs = records(&cohort, &preds);
    let report = evaluate(&recs)?;

    let rows = cohort.samples.iter().zip(&recs).enumerate().map(|(i, (s, r))| {
        let o = cohort.oracle.as_ref().map(|o| &o[i]);
        PredictionRow {
            id: &s.id,
            t: s.t,
            y: s.y,
            y0_hat: r.outcomes.y0_hat,
            y1_hat: r.outcomes.y1_hat,
            effect_hat: r.outcomes.y1_hat - r.outcomes.y0_hat,
            policy: r.policy(),
            y0_prob: o.map(|o| o.y0_prob),
            y1_prob: o.map(|o| o.y1_prob),
        }
    });
    let suffix = a.tag.as_ref().map(|t| format!("_{t}")).unwrap_or_default();
    let mut out = OutDir::create(&a.out)?;
    out.write(&format!("metrics{suffix}.json"), jsonfmt::to_pretty_string(&report))?;
    out.write(&format!("predictions{suffix}.csv"), csv_string(rows))?;

    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.3}"));
    println!("n = {} (t=0: {}, t=1: {})", report.n, report.n_t0, report.n_t1);
    println!(
        "R_pol {:.3}  AUC0 {}  AUC1 {}  Acc0 {}  Acc1 {}  PEHE {}",
        report.r_pol,
        show(report.auc0),
        show(report.auc1),
        show(report.acc0),
        show(report.acc1),
        show(report.pehe)
    );
    for f in &report.flags {
        println!("note: {f}");
    }
    let config = serde_json::json!({ "train_config": ck.train_config, "tag": a.tag });
    Ok(out.finish(config, vec![ck.train_config.seed], inputs))
}

fn cmd_ablate(a: &AblateArgs) -> Result<RunManifest, CliError> {
    let values = SweepValue::parse_list(a.axis, &a.values).map_err(CliError::Usage)?;
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let mut inputs = Vec::new();
    let mut base = match &a.config {
        Some(p) => {
            inputs.push(input(p)?);
            TrainConfig::from_toml_str(&read_text(p)?).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        base.epochs = e as usize;
    }
    let mut spec = None;
    let cohort = match &a.cohort {
        Some(p) => {
            inputs.push(input(p)?);
            load_cohort(p, LoadMode::Full)?
        }
        None => {
            let s = GeneratorSpec {
                n: a.n,
                bias_strength: a.bias,
                seed: a.data_seed,
                ..GeneratorSpec::default()
            };
            s.validate()?;
            let c = generate_cohort(&s)?;
            spec = Some(s);
            c
        }
    };
    if a.config.is_none() {
        base.model.d_tab = cohort.d_tab;
        base.model.d_img = cohort.d_img;
    }
    base.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut results = Vec::new();
    for &degree in &a.degree {
        let (train_set, test_set) = split_biased(&cohort, degree, a.data_seed)?;
        let table = sweep(&train_set, &test_set, &base, a.axis, &values, &seeds, !a.sequential)?;
        results.push(DegreeResult {
            degree,
            n_train: train_set.len(),
            n_test: test_set.len(),
            table,
        });
    }
    let mut out = OutDir::create(&a.out)?;
    for (name, body) in degree_tables(&results) {
        out.write(&name, body)?;
    }
    print_aggregates(&results);
    let config = serde_json::json!({
        "axis": a.axis,
        "values": values,
        "degrees": a.degree,
        "data_seed": a.data_seed,
        "generator": spec,
        "train_config": base,
    });
    Ok(out.finish(config, seeds, inputs))
}

fn print_aggregates(results: &[DegreeResult]) {
    for r in results {
        println!(
            "{LABEL}: degree {} (train {}, test {}), {} sweep",
            r.degree, r.n_train, r.n_test, r.table.axis
        );
        println!(
            "  {:>8}  {:>15}  {:>15}  {:>15}  {:>15}",
            r.table.axis, "R_pol", "AUC0", "AUC1", "PEHE"
        );
        for row in r.table.aggregate() {
            let cell = |m: &str| {
                row.get(m)
                    .map_or_else(|| "n/a".to_owned(), |s| format!("{:.3} ± {:.3}", s.mean, s.sd))
            };
            println!(
                "  {:>8}  {:>15}  {:>15}  {:>15}  {:>15}",
                row.value.to_string(),
                cell("r_pol"),
                cell("auc0"),
                cell("auc1"),
                cell("pehe")
            );
        }
    }
}

fn cmd_profile(a: &ProfileArgs) -> Result<RunManifest, CliError> {
    let overrides = Overrides {
        epochs: a.epochs.map(|e| e as usize),
        n: a.n,
        seeds: a.seeds.map(|n| (1..=n).collect()),
    };
    let bundle = repro::run_profile(&a.name, &overrides)?;
    let mut out = OutDir::create(&a.out)?;
    for (name, body) in bundle.tables() {
        out.write(&name, body)?;
    }
    let meta = serde_json::json!({
        "label": bundle.label,
        "profile": bundle.recipe.name,
        "description": bundle.recipe.description,
        "recipe": bundle.recipe,
    });
    out.write("bundle.json", jsonfmt::to_pretty_string(&meta))?;
    println!("profile {}: {}", bundle.recipe.name, bundle.recipe.description);
    print_aggregates(&bundle.results);
    Ok(out.finish(to_json(&bundle.recipe), bundle.recipe.seeds.clone(), Vec::new()))
}
