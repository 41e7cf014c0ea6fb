//! Command-line front end.
//!
//! Exit codes: 0 ok, 2 config or schema error, 3 I/O error, 4 estimation
//! did not converge, 5 internal invariant violation, 130 interrupted.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Once;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confset::{
    export_slices, invert_test, moment_summary, test_point, GridMetadata, GridSpec, InvertOptions,
};
use crate::demand::{BfgsOptions, ContractionOptions, DemandData, DemandSample, N_DEMAND_PARAMS};
use crate::error::{Error, Result};
use crate::market::{read_events_path, synth_dgp, MarketModel, SynthConfig, Truth};
use crate::mc::{
    boundary_design, run_coverage_study, run_size_study, CoverageConfig, RateReport,
    SizeStudyDesign,
};
use crate::pipeline::{run_first_stage, DrawsConfig, FirstStageFile, FirstStageOptions};
use crate::polyhedra::eliminate_nuisance;
use crate::rcc::RccResult;
use crate::two_stage::FirstStageEstimate;

pub const TOOL_NAME: &str = "momineq";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const EXIT_INTERRUPTED: i32 = 130;

static CANCEL: AtomicBool = AtomicBool::new(false);
static HANDLER: Once = Once::new();

#[derive(Debug, Parser)]
#[command(
    name = "momineq",
    version,
    about = "Two-stage moment-inequality inference"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "MOMINEQ_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a synthetic entry/exit dataset.
    Simulate(SimulateArgs),
    /// Estimate the demand parameters and their influence functions.
    FirstStage(FirstStageArgs),
    /// Invert the test over a parameter grid.
    Confset(ConfsetArgs),
    /// Evaluate the test at a single parameter value.
    RccTest(RccTestArgs),
    /// Eliminate the nuisance block from B mu + C delta >= d.
    Eliminate(EliminateArgs),
    /// Monte Carlo size or coverage study.
    SizeStudy(SizeStudyArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML file with the data generating process; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory for demand.csv, events.csv and truth.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FirstStageArgs {
    /// Demand CSV.
    #[arg(long)]
    pub demand: PathBuf,
    /// TOML file with draws, contraction, bfgs and init settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of heterogeneity draws R (overrides the config).
    #[arg(long)]
    pub draws: Option<usize>,
    /// BFGS gradient tolerance (overrides the config).
    #[arg(long)]
    pub bfgs_tol: Option<f64>,
    /// BFGS iteration cap (overrides the config).
    #[arg(long)]
    pub bfgs_max_iter: Option<usize>,
    /// Contraction tolerance (overrides the config).
    #[arg(long)]
    pub contraction_tol: Option<f64>,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelInputs {
    /// Demand CSV used for the first stage.
    #[arg(long)]
    pub demand: PathBuf,
    /// Entry/exit events CSV.
    #[arg(long)]
    pub events: PathBuf,
    /// First-stage JSON written by `first-stage`.
    #[arg(long)]
    pub first_stage: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfsetArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// TOML grid configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Significance level (overrides the config).
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Evaluate grid points on one thread in grid order.
    #[arg(long)]
    pub sequential: bool,
    /// Output directory for grid.json and slice.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RccTestArgs {
    #[command(flatten)]
    pub inputs: ModelInputs,
    /// Parameter value `lambda,eta_1,..,eta_4`.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        required = true
    )]
    pub theta: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Finite-difference step for the moment Jacobian.
    #[arg(long)]
    pub jacobian_step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EliminateArgs {
    /// CSV matrix B (k x d_M), no header.
    #[arg(long)]
    pub b: PathBuf,
    /// CSV matrix C (k x d_N), no header.
    #[arg(long)]
    pub c: PathBuf,
    /// CSV vector d (k values), no header.
    #[arg(long)]
    pub d: PathBuf,
    /// Output directory for A.csv, b.csv and H.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyKind {
    Size,
    Coverage,
}

#[derive(Debug, Args)]
pub struct SizeStudyArgs {
    #[arg(long, value_enum, default_value_t = StudyKind::Size)]
    pub study: StudyKind,
    /// TOML design (size) or coverage configuration; the boundary design
    /// or default coverage setup is used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance block attached to every output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub tool: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl Metadata {
    fn new<C: Serialize>(seed: Option<u64>, config: &C) -> Result<Self> {
        Ok(Self {
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            seed,
            config_hash: config_hash(config)?,
        })
    }

    fn csv_comment(&self) -> String {
        let seed = self
            .seed
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "# tool={} version={} seed={} config_hash={}\n",
            self.tool, self.tool_version, seed, self.config_hash
        )
    }
}

/// SHA-256 of the canonical JSON form of the effective configuration.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let json = serde_json::to_vec(config)
        .map_err(|e| Error::Invariant(format!("config serialisation: {e}")))?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub metadata: Metadata,
    pub truth: Truth,
    /// Draw settings to pass to `first-stage` for this dataset.
    pub draws: DrawsConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstStageConfig {
    pub draws: DrawsConfig,
    pub contraction: ContractionOptions,
    pub bfgs: BfgsOptions,
    pub init: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstStageOutput {
    pub metadata: Metadata,
    /// SHA-256 of the demand CSV the estimate was computed from.
    pub dataset_id: String,
    pub first_stage: FirstStageFile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub jacobian_step: Option<f64>,
    pub axes: Vec<crate::confset::GridAxis>,
    /// Values for the dimensions held fixed in `slice.csv`.
    #[serde(default)]
    pub slice: Option<BTreeMap<String, f64>>,
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Clone, Debug, Serialize)]
struct RccOutput<'a> {
    metadata: Metadata,
    theta: &'a [f64],
    alpha: f64,
    ridge: f64,
    result: RccResult,
}

#[derive(Clone, Debug, Serialize)]
struct StudyOutput<C: Serialize> {
    metadata: Metadata,
    study: StudyKind,
    config: C,
    report: RateReport,
    truncated: bool,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        // Fails only when the global pool already exists, e.g. on a second
        // in-process invocation; the existing pool is then reused.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::FirstStage(a) => cmd_first_stage(a),
        Command::Confset(a) => {
            install_interrupt_handler();
            cmd_confset(a)
        }
        Command::RccTest(a) => cmd_rcc_test(a),
        Command::Eliminate(a) => cmd_eliminate(a),
        Command::SizeStudy(a) => {
            install_interrupt_handler();
            cmd_size_study(a)
        }
    }
}

fn install_interrupt_handler() {
    HANDLER.call_once(|| {
        if let Err(e) = ctrlc::set_handler(|| CANCEL.store(true, Ordering::SeqCst)) {
            eprintln!("warning: cannot install interrupt handler: {e}");
        }
    });
}

fn interrupted() -> bool {
    CANCEL.load(Ordering::SeqCst)
}

fn read_toml<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), e.message().to_string()))
}

fn read_json<C: for<'de> Deserialize<'de>>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn to_json<C: Serialize>(value: &C) -> Result<Vec<u8>> {
    let mut out =
        serde_json::to_vec_pretty(value).map_err(|e| Error::Invariant(format!("json: {e}")))?;
    out.push(b'\n');
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes through a sibling temporary file so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let cfg: SynthConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    cfg.validate()?;
    let ds = synth_dgp(&cfg, args.seed)?;
    let meta = Metadata::new(Some(args.seed), &cfg)?;

    let mut demand = meta.csv_comment().into_bytes();
    ds.write_demand_csv(&mut demand)?;
    let mut events = meta.csv_comment().into_bytes();
    ds.write_events_csv(&mut events)?;
    let truth = TruthFile {
        metadata: meta,
        truth: ds.truth.clone(),
        draws: DrawsConfig {
            count: cfg.draws,
            sigma: cfg.sigma,
            seed: cfg.draws_seed,
        },
    };

    create_dir(&args.out)?;
    write_atomic(&args.out.join("demand.csv"), &demand)?;
    write_atomic(&args.out.join("events.csv"), &events)?;
    write_atomic(&args.out.join("truth.json"), &to_json(&truth)?)?;
    eprintln!(
        "wrote {} demand rows and {} events to {}",
        ds.demand.len(),
        ds.events.len(),
        args.out.display()
    );
    Ok(0)
}

fn first_stage_config(args: &FirstStageArgs) -> Result<FirstStageConfig> {
    let mut cfg: FirstStageConfig = match &args.config {
        Some(p) => read_toml(p)?,
        None => FirstStageConfig::default(),
    };
    if let Some(r) = args.draws {
        cfg.draws.count = r;
    }
    if let Some(t) = args.bfgs_tol {
        cfg.bfgs.tol = t;
    }
    if let Some(m) = args.bfgs_max_iter {
        cfg.bfgs.max_iter = m;
    }
    if let Some(t) = args.contraction_tol {
        cfg.contraction.tol = t;
    }
    if cfg.draws.count == 0 {
        return Err(Error::config("draws.count", "must be at least 1"));
    }
    if cfg
        .draws
        .sigma
        .iter()
        .any(|s| !(s.is_finite() && *s >= 0.0))
    {
        return Err(Error::config(
            "draws.sigma",
            "must be finite and nonnegative",
        ));
    }
    if !(cfg.contraction.tol.is_finite() && cfg.contraction.tol > 0.0) {
        return Err(Error::config("contraction.tol", "must be positive"));
    }
    if cfg.contraction.max_iter == 0 {
        return Err(Error::config("contraction.max_iter", "must be positive"));
    }
    if !(cfg.bfgs.tol.is_finite() && cfg.bfgs.tol > 0.0) {
        return Err(Error::config("bfgs.tol", "must be positive"));
    }
    if cfg.bfgs.max_iter == 0 {
        return Err(Error::config("bfgs.max_iter", "must be positive"));
    }
    if let Some(init) = &cfg.init {
        if init.len() != N_DEMAND_PARAMS || init.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(
                "init",
                format!("must hold {N_DEMAND_PARAMS} finite values"),
            ));
        }
    }
    Ok(cfg)
}

fn cmd_first_stage(args: &FirstStageArgs) -> Result<i32> {
    let cfg = first_stage_config(args)?;
    let data = DemandData::read_path(&args.demand)?;
    let dataset_id = file_digest(&args.demand)?;
    let draws = cfg.draws.build()?;
    let opts = FirstStageOptions {
        contraction: cfg.contraction,
        bfgs: cfg.bfgs,
        init: cfg.init.clone(),
    };
    let (sample, first) = run_first_stage(&data, &draws, &opts)?;
    let out = FirstStageOutput {
        metadata: Metadata::new(None, &cfg)?,
        dataset_id,
        first_stage: FirstStageFile::new(cfg.draws, cfg.contraction, &sample, &first),
    };
    write_atomic(&args.out, &to_json(&out)?)?;
    if first.converged {
        eprintln!(
            "first stage converged in {} iterations, objective {:e}",
            first.iterations, first.objective_value
        );
        Ok(0)
    } else {
        eprintln!(
            "first stage did not converge after {} iterations (gradient norm {:e})",
            first.iterations, first.gradient_norm
        );
        Ok(4)
    }
}

struct LoadedModel {
    model: MarketModel,
    first: FirstStageEstimate,
    dataset_id: String,
    fingerprint: String,
}

fn load_model(inputs: &ModelInputs) -> Result<LoadedModel> {
    let fs: FirstStageOutput = read_json(&inputs.first_stage)?;
    let first = fs.first_stage.estimate()?;
    let dataset_id = file_digest(&inputs.demand)?;
    if dataset_id != fs.dataset_id {
        return Err(Error::Schema(format!(
            "{} was not estimated from {}",
            inputs.first_stage.display(),
            inputs.demand.display()
        )));
    }
    let data = DemandData::read_path(&inputs.demand)?;
    let events = read_events_path(&inputs.events)?;
    let draws = fs.first_stage.draws.build()?;
    let sample = DemandSample::from_data(&data, &draws, &fs.first_stage.contraction)?;
    let model = MarketModel::new(&data, &sample.zeta, &events, &draws)?;
    Ok(LoadedModel {
        model,
        first,
        dataset_id,
        fingerprint: fs.first_stage.fingerprint,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidAlpha(alpha))
    }
}

fn cmd_confset(args: &ConfsetArgs) -> Result<i32> {
    let mut cfg: GridConfig = read_toml(&args.config)?;
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    check_alpha(cfg.alpha)?;
    if cfg
        .jacobian_step
        .is_some_and(|h| !(h.is_finite() && h > 0.0))
    {
        return Err(Error::config("jacobian_step", "must be positive"));
    }
    let spec = GridSpec {
        axes: cfg.axes.clone(),
    };
    let loaded = load_model(&args.inputs)?;
    spec.validate(crate::two_stage::MomentModel::dim_theta(&loaded.model))?;

    let opts = InvertOptions {
        jacobian_step: cfg.jacobian_step,
        sequential: args.sequential,
    };
    let mut grid = invert_test(
        &spec,
        &loaded.model,
        &loaded.first,
        cfg.alpha,
        &opts,
        Some(&CANCEL),
    )?;
    grid.metadata = GridMetadata {
        tool_version: TOOL_VERSION.into(),
        seed: None,
        dataset_id: loaded.dataset_id,
        delta_fingerprint: loaded.fingerprint,
        config_hash: config_hash(&cfg)?,
    };

    create_dir(&args.out)?;
    let mut json = Vec::new();
    grid.write_json(&mut json)?;
    write_atomic(&args.out.join("grid.json"), &json)?;

    let slice = slice_fixings(&spec, cfg.slice.as_ref());
    match slice {
        Some(fixed) => {
            let meta = Metadata::new(None, &cfg)?;
            let mut csv = meta.csv_comment().into_bytes();
            let rows = export_slices(&grid, &fixed, &mut csv)?;
            write_atomic(&args.out.join("slice.csv"), &csv)?;
            eprintln!("slice.csv: {rows} rows");
        }
        None => eprintln!("no two-dimensional slice configured; slice.csv not written"),
    }
    eprintln!(
        "{} of {} grid points accepted, {} undecided",
        grid.accepted,
        grid.points.len(),
        grid.undecided
    );
    if grid.truncated {
        eprintln!("interrupted: grid.json holds a truncated run");
        return Ok(EXIT_INTERRUPTED);
    }
    Ok(0)
}

/// Fixings for `slice.csv`: explicit values from the config, plus every
/// single-valued axis. `None` when no slice is configured and the grid
/// does not have exactly two multi-valued axes.
fn slice_fixings(
    spec: &GridSpec,
    explicit: Option<&BTreeMap<String, f64>>,
) -> Option<Vec<(String, f64)>> {
    let mut fixed: Vec<(String, f64)> = explicit
        .map(|m| m.iter().map(|(k, v)| (k.clone(), *v)).collect())
        .unwrap_or_default();
    for axis in &spec.axes {
        let values = axis.values();
        if values.len() == 1 && !fixed.iter().any(|(l, _)| *l == axis.label) {
            fixed.push((axis.label.clone(), values[0]));
        }
    }
    let free = spec.axes.len() - fixed.len().min(spec.axes.len());
    if explicit.is_none() && free != 2 {
        return None;
    }
    Some(fixed)
}

fn cmd_rcc_test(args: &RccTestArgs) -> Result<i32> {
    check_alpha(args.alpha)?;
    let loaded = load_model(&args.inputs)?;
    if !loaded.first.converged {
        return Err(Error::config("first_stage", "first stage did not converge"));
    }
    let summary = moment_summary(
        &loaded.model,
        &args.theta,
        &loaded.first,
        args.jacobian_step,
    )?;
    let result = test_point(&loaded.model, &args.theta, &summary, args.alpha)?;
    #[derive(Serialize)]
    struct Effective<'a> {
        theta: &'a [f64],
        alpha: f64,
        jacobian_step: Option<f64>,
        first_stage: &'a str,
    }
    let out = RccOutput {
        metadata: Metadata::new(
            None,
            &Effective {
                theta: &args.theta,
                alpha: args.alpha,
                jacobian_step: args.jacobian_step,
                first_stage: &loaded.fingerprint,
            },
        )?,
        theta: &args.theta,
        alpha: args.alpha,
        ridge: summary.ridge,
        result,
    };
    let json = to_json(&out)?;
    print!("{}", String::from_utf8_lossy(&json));
    Ok(0)
}

/// Reads a headerless numeric CSV; `#` lines are comments.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(std::io::BufReader::new(f));
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec =
            rec.map_err(|e| Error::Schema(format!("{} row {}: {e}", path.display(), line + 1)))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        Error::Schema(format!(
                            "{} row {}: `{s}` is not a finite number",
                            path.display(),
                            line + 1
                        ))
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::RaggedRows {
                    row: rows.len(),
                    expected: first.len(),
                    found: row.len(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::Schema(format!("{} holds no values", path.display())));
    }
    Ok(DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| {
        rows[i][j]
    }))
}

fn matrix_csv(meta: &Metadata, m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = meta.csv_comment();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

fn cmd_eliminate(args: &EliminateArgs) -> Result<i32> {
    let b = read_matrix_csv(&args.b)?;
    let c = read_matrix_csv(&args.c)?;
    let d_raw = read_matrix_csv(&args.d)?;
    if d_raw.nrows() != 1 && d_raw.ncols() != 1 {
        return Err(Error::Schema("d must be a single row or column".into()));
    }
    let d = DVector::from_iterator(d_raw.len(), d_raw.iter().copied());
    let res = eliminate_nuisance(&b, &c, &d)?;
    #[derive(Serialize)]
    struct Inputs {
        b: String,
        c: String,
        d: String,
    }
    let meta = Metadata::new(
        None,
        &Inputs {
            b: file_digest(&args.b)?,
            c: file_digest(&args.c)?,
            d: file_digest(&args.d)?,
        },
    )?;
    create_dir(&args.out)?;
    write_atomic(&args.out.join("A.csv"), &matrix_csv(&meta, &res.a))?;
    let b_col = DMatrix::from_column_slice(res.b.len(), 1, res.b.as_slice());
    write_atomic(&args.out.join("b.csv"), &matrix_csv(&meta, &b_col))?;
    write_atomic(&args.out.join("H.csv"), &matrix_csv(&meta, &res.h))?;
    eprintln!("{} vertices", res.h.nrows());
    Ok(0)
}

fn cmd_size_study(args: &SizeStudyArgs) -> Result<i32> {
    let started = std::time::Instant::now();
    let (bytes, truncated, report) = match args.study {
        StudyKind::Size => {
            let mut design: SizeStudyDesign = match &args.config {
                Some(p) => read_toml(p)?,
                None => boundary_design(),
            };
            if let Some(r) = args.reps {
                design.reps = r;
            }
            if let Some(s) = args.seed {
                design.seed = s;
            }
            if let Some(a) = args.alpha {
                design.alpha = a;
            }
            design.validate()?;
            let report = run_size_study(&design, Some(&CANCEL))?;
            let truncated = report.skipped > 0;
            let out = StudyOutput {
                metadata: Metadata::new(Some(design.seed), &design)?,
                study: args.study,
                config: design,
                report: report.clone(),
                truncated,
            };
            (to_json(&out)?, truncated, report)
        }
        StudyKind::Coverage => {
            let mut cfg: CoverageConfig = match &args.config {
                Some(p) => read_toml(p)?,
                None => CoverageConfig::default(),
            };
            if let Some(r) = args.reps {
                cfg.reps = r;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            if let Some(a) = args.alpha {
                cfg.alpha = a;
            }
            let report = run_coverage_study(&cfg, Some(&CANCEL))?;
            let truncated = report.skipped > 0;
            let out = StudyOutput {
                metadata: Metadata::new(Some(cfg.seed), &cfg)?,
                study: args.study,
                config: cfg,
                report: report.clone(),
                truncated,
            };
            (to_json(&out)?, truncated, report)
        }
    };
    write_atomic(&args.out, &bytes)?;
    eprintln!(
        "rate {:.4} (se {}) over {} replications, {} failed, {:.1}s",
        report.rate,
        report
            .se
            .map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}")),
        report.reps,
        report.failures,
        started.elapsed().as_secs_f64()
    );
    if truncated || interrupted() {
        eprintln!("interrupted: report covers a truncated run");
        return Ok(EXIT_INTERRUPTED);
    }
    Ok(0)
}
