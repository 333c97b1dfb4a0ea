//! Command-line front end: `gen`, `discrim`, `calib` and `power`.
//!
//! Every run writes its artifacts and a `manifest.json` (artifact hashes and
//! the resolved configuration) under `--out-dir`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::calibration::{fit_audit, CalibrationConfig, Direction, Variant};
use crate::data::{load_dataset, AuditDataset, DatasetSchema};
use crate::error::{AuditError, Result};
use crate::report::{
    build_comparison_tables, build_performance_table, emit_control_chart, emit_vi_plot, CalibrationReport,
    CalibrationRow, Format, Subgroup,
};
use crate::residual::{default_grid, ResidualModelConfig};
use crate::roc::CorrelationMode;
use crate::study::{run_study, StudyConfig};
use crate::synth::{generate, PopulationSpec};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "AUDIT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "subaudit", version, about = "Subgroup discrimination and calibration audits for risk models")]
pub struct Cli {
    /// Seed for every random choice (defaults to 0; `gen` defaults to the spec's seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Table format.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Md)]
    pub format: FormatArg,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Csv,
    Md,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Md => Format::Md,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Correlated,
    Uncorrelated,
}

impl From<ModeArg> for CorrelationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Correlated => CorrelationMode::Correlated,
            ModeArg::Uncorrelated => CorrelationMode::Uncorrelated,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Over,
    Under,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Split,
    Cv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic population (data CSV, schema sidecar, true risks).
    Gen(GenArgs),
    /// Performance at an operating point and AUROC comparison tables.
    Discrim(DiscrimArgs),
    /// Calibration audit with control charts and variable importance.
    Calib(CalibArgs),
    /// Rejection rates of a test over seeded synthetic populations.
    Power(PowerArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Population spec (JSON); the built-in demographic template when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override the population size.
    #[arg(long)]
    pub n: Option<usize>,
    /// File stem of the generated files.
    #[arg(long, default_value = "data")]
    pub stem: String,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Prediction CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Schema sidecar; defaults to `<data stem>.schema.json` next to the data.
    #[arg(long)]
    pub schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiscrimArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Model score columns (comma separated); all models when omitted.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    /// Subgroup rows, `Label:filter` (repeatable). An overall row always comes first.
    #[arg(long = "subgroup")]
    pub subgroups: Vec<String>,
    /// Subgroup comparison, `Label:filter vs Label:filter` (repeatable).
    #[arg(long = "compare-subgroups")]
    pub subgroup_pairs: Vec<String>,
    /// Target overall sensitivity of the operating point.
    #[arg(long, default_value_t = 0.95)]
    pub target_sens: f64,
    /// DeLong mode for model-vs-model tables.
    #[arg(long, value_enum, default_value_t = ModeArg::Correlated)]
    pub model_mode: ModeArg,
    /// DeLong mode for subgroup-vs-subgroup tables.
    #[arg(long, value_enum, default_value_t = ModeArg::Uncorrelated)]
    pub subgroup_mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct CalibArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Model to audit; the schema's primary score when omitted.
    #[arg(long)]
    pub model: Option<String>,
    /// Dataset label used in the report; the data file stem when omitted.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub delta: f64,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value_t = VariantArg::Cv)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0.5)]
    pub n1_fraction: f64,
    /// Monte Carlo replicates.
    #[arg(long, default_value_t = 1000)]
    pub replicates: usize,
    /// Permutations per feature for variable importance.
    #[arg(long, default_value_t = 50)]
    pub permutations: usize,
    /// Residual model grid (JSON list of configs); the default grid when omitted.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Do not feed embedding columns to the residual models.
    #[arg(long)]
    pub no_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct PowerArgs {
    /// Study config (JSON).
    #[arg(long)]
    pub study: PathBuf,
    /// Override the number of trials.
    #[arg(long)]
    pub trials: Option<usize>,
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 on success, 1 on usage or validation errors, 2 on internal errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_internal() {
                2
            } else {
                1
            }
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| AuditError::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut out = Outputs::new(&cli.out_dir);
    let config = match &cli.command {
        Command::Gen(args) => cmd_gen(cli, args, &mut out)?,
        Command::Discrim(args) => cmd_discrim(cli, args, &mut out)?,
        Command::Calib(args) => cmd_calib(cli, args, &mut out)?,
        Command::Power(args) => cmd_power(cli, args, &mut out)?,
    };
    out.finish(config)
}

/// Artifacts collected in memory and written together with the manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.into(), bytes.into()));
    }

    fn finish(self, config: Value) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| AuditError::io(&self.dir, e))?;
        let mut artifacts = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = self.dir.join(name);
            std::fs::write(&path, bytes).map_err(|e| AuditError::io(&path, e))?;
            artifacts.push(json!({ "path": name, "bytes": bytes.len(), "sha256": sha256_hex(bytes) }));
        }
        let manifest = json!({
            "tool": "subaudit",
            "version": env!("CARGO_PKG_VERSION"),
            "config": config,
            "artifacts": artifacts,
        });
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).map_err(|e| AuditError::io(&path, e))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads an input file, reporting a missing file as a usage error.
fn read_input(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(AuditError::InvalidArgument(format!("input file `{}` not found", path.display())));
    }
    std::fs::read(path).map_err(|e| AuditError::io(path, e))
}

fn input_record(path: &Path) -> Result<Value> {
    let bytes = read_input(path)?;
    Ok(json!({ "path": path.display().to_string(), "sha256": sha256_hex(&bytes) }))
}

fn default_schema_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    data.with_file_name(format!("{stem}.schema.json"))
}

fn load_input(args: &DataArgs) -> Result<(AuditDataset, Value)> {
    let schema_path = args.schema.clone().unwrap_or_else(|| default_schema_path(&args.data));
    let inputs = json!({ "data": input_record(&args.data)?, "schema": input_record(&schema_path)? });
    let schema = DatasetSchema::from_json_file(&schema_path)?;
    let ds = load_dataset(&args.data, &schema)?;
    Ok((ds, inputs))
}

fn cmd_gen(cli: &Cli, args: &GenArgs, out: &mut Outputs) -> Result<Value> {
    let mut spec = match &args.spec {
        Some(path) => {
            read_input(path)?;
            PopulationSpec::from_json_file(path)?
        }
        None => PopulationSpec::default_template(1000, 0),
    };
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let generated = generate(&spec)?;
    let mut csv = Vec::new();
    generated.dataset.write_csv(&mut csv)?;
    out.add(format!("{}.csv", args.stem), csv);
    out.add(
        format!("{}.schema.json", args.stem),
        serde_json::to_string_pretty(&generated.dataset.schema())? + "\n",
    );
    let mut truth = String::from("id,true_risk\n");
    for (r, p) in generated.dataset.records().iter().zip(&generated.true_risks) {
        truth.push_str(&format!("{},{p}\n", r.id));
    }
    out.add(format!("{}.truth.csv", args.stem), truth);
    Ok(json!({ "command": "gen", "spec": spec }))
}

fn parse_subgroups(raw: &[String]) -> Result<Vec<Subgroup>> {
    raw.iter().map(|s| s.parse()).collect()
}

fn cmd_discrim(cli: &Cli, args: &DiscrimArgs, out: &mut Outputs) -> Result<Value> {
    let format: Format = cli.format.into();
    let (ds, inputs) = load_input(&args.input)?;
    let models = if args.models.is_empty() {
        ds.model_names()
    } else {
        args.models.clone()
    };
    let mut subgroups = vec![Subgroup::overall()];
    subgroups.extend(parse_subgroups(&args.subgroups)?);
    let subgroup_pairs = args
        .subgroup_pairs
        .iter()
        .map(|p| {
            let (a, b) = p
                .split_once(" vs ")
                .ok_or_else(|| AuditError::InvalidArgument(format!("expected `A vs B`, got `{p}`")))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect::<Result<Vec<(Subgroup, Subgroup)>>>()?;
    let model_pairs: Vec<(String, String)> = models
        .iter()
        .enumerate()
        .flat_map(|(i, a)| models[i + 1..].iter().map(move |b| (a.clone(), b.clone())))
        .collect();

    let performance = build_performance_table(&ds, &models, &subgroups, args.target_sens)?;
    out.add(format!("performance.{}", format.extension()), performance.render(format)?);
    let tables = build_comparison_tables(
        &ds,
        &model_pairs,
        &subgroups,
        &subgroup_pairs,
        args.model_mode.into(),
        args.subgroup_mode.into(),
    )?;
    let rendered = match format {
        Format::Json => serde_json::to_string_pretty(&tables)? + "\n",
        Format::Md => tables
            .iter()
            .map(|t| t.render(format))
            .collect::<Result<Vec<_>>>()?
            .join("\n"),
        Format::Csv => {
            let mut text = String::new();
            for (i, t) in tables.iter().enumerate() {
                let body = t.render(format)?;
                let mut lines = body.lines();
                let header = lines.next().unwrap_or_default();
                if i == 0 {
                    text.push_str(&format!("table,mode,{header}\n"));
                }
                let mode = serde_json::to_value(t.mode)?;
                for line in lines {
                    text.push_str(&format!("\"{}\",{},{line}\n", t.title, mode.as_str().unwrap_or_default()));
                }
            }
            text
        }
    };
    out.add(format!("comparisons.{}", format.extension()), rendered);
    Ok(json!({
        "command": "discrim",
        "inputs": inputs,
        "format": format,
        "models": models,
        "subgroups": subgroups,
        "subgroup_pairs": subgroup_pairs,
        "target_sensitivity": args.target_sens,
        "model_mode": CorrelationMode::from(args.model_mode),
        "subgroup_mode": CorrelationMode::from(args.subgroup_mode),
    }))
}

fn cmd_calib(cli: &Cli, args: &CalibArgs, out: &mut Outputs) -> Result<Value> {
    let format: Format = cli.format.into();
    let (ds, inputs) = load_input(&args.input)?;
    let ds = match &args.model {
        Some(m) => ds.with_primary_model(m)?,
        None => ds,
    };
    let configs: Vec<ResidualModelConfig> = match &args.grid {
        Some(path) => serde_json::from_slice(&read_input(path)?)?,
        None => default_grid(),
    };
    let directions = match args.direction {
        DirectionArg::Over => vec![Direction::Overestimation],
        DirectionArg::Under => vec![Direction::Underestimation],
        DirectionArg::Both => vec![Direction::Overestimation, Direction::Underestimation],
    };
    let cfg = CalibrationConfig {
        delta: args.delta,
        direction: directions[0],
        variant: match args.variant {
            VariantArg::Split => Variant::Split {
                n1_fraction: args.n1_fraction,
            },
            VariantArg::Cv => Variant::CvScore { folds: args.folds },
        },
        mc_replicates: args.replicates,
        vi_permutations: args.permutations,
        seed: cli.seed.unwrap_or(0),
        configs,
        use_embeddings: !args.no_embeddings,
    };
    let label = args.label.clone().unwrap_or_else(|| {
        args.input
            .data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let model = ds.score_column().to_string();
    let fitted = fit_audit(&ds, &cfg)?;
    let mut rows = Vec::new();
    for &direction in &directions {
        let verdict = fitted.verdict(&cfg, direction)?;
        let tag = direction.as_str();
        out.add(format!("verdict_{tag}.json"), serde_json::to_string_pretty(&verdict)? + "\n");
        let chart = emit_control_chart(&verdict.trajectories, &format!("{model}: {tag} control chart"))?;
        out.add(format!("control_chart_{tag}.svg"), chart.svg);
        out.add(format!("control_chart_{tag}.csv"), chart.csv);
        let vi = emit_vi_plot(&verdict.vi_ranking, 10, &format!("{model}: {tag} variable importance"))?;
        out.add(format!("vi_{tag}.svg"), vi.svg);
        out.add(format!("vi_{tag}.csv"), vi.csv);
        rows.push(CalibrationRow::from_verdict(&model, &label, &verdict));
    }
    let report = CalibrationReport { rows };
    out.add(format!("calibration.{}", format.extension()), report.render(format)?);
    Ok(json!({
        "command": "calib",
        "inputs": inputs,
        "format": format,
        "model": model,
        "label": label,
        "directions": directions,
        "audit": cfg,
    }))
}

fn cmd_power(cli: &Cli, args: &PowerArgs, out: &mut Outputs) -> Result<Value> {
    let format: Format = cli.format.into();
    let inputs = json!({ "study": input_record(&args.study)? });
    let mut study = StudyConfig::from_json_file(&args.study)?;
    if let Some(t) = args.trials {
        study.trials = t;
    }
    let seed = cli.seed.unwrap_or(0);
    let summary = run_study(&study, seed)?;
    let body = match format {
        Format::Json => serde_json::to_string_pretty(&summary)? + "\n",
        Format::Csv => {
            let mut text = String::from("trial,seed,p_value,reject,planted_in_top3\n");
            for r in &summary.results {
                let top3 = r.planted_in_top3.map(|b| b.to_string()).unwrap_or_default();
                text.push_str(&format!("{},{},{},{},{top3}\n", r.trial, r.seed, r.p_value, r.reject));
            }
            text
        }
        Format::Md => {
            let mut text = String::from("| Trials | Rejections | Rejection rate | Planted attribute in VI top 3 |\n|---|---|---|---|\n");
            let top3 = summary.planted_top3.map_or_else(|| "N/A".to_string(), |k| k.to_string());
            text.push_str(&format!(
                "| {} | {} | {:.3} | {top3} |\n",
                summary.trials, summary.rejections, summary.rejection_rate
            ));
            text
        }
    };
    out.add(format!("power.{}", format.extension()), body);
    Ok(json!({ "command": "power", "inputs": inputs, "format": format, "seed": seed, "study": study }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_usage_error() {
        assert_eq!(run(["subaudit", "calib", "--bogus"]), 1);
        assert_eq!(run(["subaudit"]), 1);
        assert_eq!(run(["subaudit", "--help"]), 0);
    }

    #[test]
    fn missing_input_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["subaudit", "--out-dir", out, "calib", "--data", "/nonexistent/x.csv"]), 1);
    }

    #[test]
    fn schema_path_default() {
        assert_eq!(default_schema_path(Path::new("a/b/data.csv")), PathBuf::from("a/b/data.schema.json"));
    }
}
