//! Config-driven pipeline: benchmark, reduced model, tube constants, closed-loop
//! runs and the report files.
//!
//! Output layout under the output directory:
//!
//! - `runs/<scheme>_seed<k>.csv`: closed-loop trace (see [`ClosedLoopTrace::write_csv`])
//! - `runs/<scheme>_seed<k>_steps.csv`: `t,status,theta,scp_iters,attempts,tracking_error,u_*`
//! - `runs/<scheme>_seed<k>.toml`: per-run summary, read back by [`report_from_dir`]
//! - `plotdata/<scheme>_seed<k>.csv`: `t,y_*,yref_*,bound_*,tightening_*,s,delta`
//! - `plotdata/envelope_train.csv`, `plotdata/envelope_heldout.csv`: `t,error,delta,s`
//! - `verification.csv`: `trial,max_s_ratio,max_delta_ratio,left_domain`
//! - `summary.txt`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, with_threads, Execution};
use crate::fit::{envelope_margin, fit_tube_constants, run_excitation, save_envelope_csv, ExcitationData, ExcitationSchedule, FitOptions, FitResult};
use crate::fom::{check_assumptions, fmt_f64, manufacture_benchmark, AssumptionReport, BenchmarkConfig, FullOrderModel};
use crate::mpc::{run_closed_loop, ClosedLoopOptions, ClosedLoopTrace, OcpConfig, Reference, Scheme, TraceSummary};
use crate::ssm::{decay_data, fit_graph_rom, load_rom, SsmRom};
use crate::tighten::{compute_terminal_set, solve_steady_state, tightening, PolytopicConstraints};
use crate::tube::{verify_prop1, TubeParams, VerificationReport, VerifyOptions};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkPreset {
    #[default]
    Default,
    /// Twelve-state instance for quick runs.
    Small,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSource {
    pub preset: BenchmarkPreset,
    /// Zero every nonlinear coefficient of the preset.
    pub linear: bool,
    /// Benchmark config file; overrides the preset.
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RomKind {
    /// The manufactured reduced model.
    #[default]
    Exact,
    /// Regressed from unforced decays, or loaded from `path`.
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RomSettings {
    pub source: RomKind,
    pub path: Option<PathBuf>,
    /// Largest monomial degree of the graph and of the reduced drift.
    pub degrees: [usize; 2],
    pub decay_trajectories: usize,
    pub decay_radius: f64,
    pub decay_t_final: f64,
    pub decay_dt: f64,
    pub seed: u64,
}

impl Default for RomSettings {
    fn default() -> Self {
        Self {
            source: RomKind::Exact,
            path: None,
            degrees: [2, 2],
            decay_trajectories: 16,
            decay_radius: 0.8,
            decay_t_final: 2.0,
            decay_dt: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TubeVariant {
    /// Off-manifold bound from the estimated Lipschitz constants.
    #[default]
    ModelBased,
    /// Constants fitted to an excitation experiment.
    DataDriven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub enabled: bool,
    pub trials: usize,
    pub t_final: f64,
    pub seed: u64,
    pub options: VerifyOptions,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self { enabled: true, trials: 100, t_final: 2.0, seed: 0, options: VerifyOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TubeSettings {
    pub variant: TubeVariant,
    /// Reduced disturbance bound; the benchmark's bound when absent.
    pub d_bar: Option<f64>,
    /// Off-manifold disturbance term of the fit; `d_bar` when absent.
    pub d_hat: Option<f64>,
    /// Previously fitted constants; skips the excitation experiment.
    pub fit_path: Option<PathBuf>,
    pub excitation: ExcitationSchedule,
    /// `||u_d||` of the disturbance during excitation.
    pub excitation_disturbance: f64,
    pub fit: FitOptions,
    pub verify: VerifySettings,
}

impl Default for TubeSettings {
    fn default() -> Self {
        Self {
            variant: TubeVariant::ModelBased,
            d_bar: None,
            d_hat: None,
            fit_path: None,
            excitation: ExcitationSchedule::default(),
            excitation_disturbance: 10.0,
            fit: FitOptions::default(),
            verify: VerifySettings::default(),
        }
    }
}

/// Output constraints `G y <= g`, given as rows or as a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintSettings {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub bounds: Vec<f64>,
}

impl Default for ConstraintSettings {
    fn default() -> Self {
        Self { lower: vec![-0.25, -0.25], upper: vec![0.2, 0.25], rows: Vec::new(), bounds: Vec::new() }
    }
}

impl ConstraintSettings {
    pub fn build(&self) -> Result<PolytopicConstraints> {
        if self.rows.is_empty() {
            return PolytopicConstraints::from_box(&self.lower, &self.upper);
        }
        let n_y = self.rows[0].len();
        if self.rows.iter().any(|r| r.len() != n_y) || self.bounds.len() != self.rows.len() {
            return Err(Error::Config("constraint rows must have equal length and one bound each".into()));
        }
        let g = DMatrix::from_fn(self.rows.len(), n_y, |i, j| self.rows[i][j]);
        PolytopicConstraints::new(g, DVector::from_column_slice(&self.bounds))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopSettings {
    pub dt_sim: f64,
    /// `||u_d||` of the sampled disturbance `B u_d`.
    pub disturbance_magnitude: f64,
    /// Control steps at which the solver is forced to fail.
    pub faults: Vec<usize>,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self { dt_sim: 0.002, disturbance_magnitude: 10.0, faults: Vec::new() }
    }
}

/// Invariants that decide the exit status of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Checks {
    /// Robust schemes never violate the output constraints.
    pub robust_constraints: bool,
    /// Robust schemes solve to optimality at every step without the fallback.
    pub recursive_feasibility: bool,
    /// Realized errors stay inside the tubes along robust runs.
    pub tube_bounds: bool,
    /// The randomized tube check finds no violation.
    pub tube_verification: bool,
}

impl Default for Checks {
    fn default() -> Self {
        Self { robust_constraints: true, recursive_feasibility: true, tube_bounds: true, tube_verification: true }
    }
}

fn default_reference() -> Reference {
    Reference::Square { center: vec![0.0, 0.0], half_width: 0.2, period: 4.0, laps: 2.0, final_output: Some(vec![-0.15, 0.2]) }
}

fn default_schemes() -> Vec<Scheme> {
    vec![Scheme::RnRompc, Scheme::NominalSoft, Scheme::BufferSoft]
}

fn default_ocp() -> OcpConfig {
    OcpConfig { buffer: vec![0.03; 4], ..OcpConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub t_final: f64,
    pub schemes: Vec<Scheme>,
    /// Worker threads; zero uses every core.
    pub jobs: usize,
    pub benchmark: BenchmarkSource,
    pub rom: RomSettings,
    pub tubes: TubeSettings,
    pub constraints: ConstraintSettings,
    pub reference: Reference,
    /// Shared by every scheme; `scheme` is set per run.
    pub ocp: OcpConfig,
    pub closed_loop: LoopSettings,
    pub checks: Checks,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            seeds: vec![1],
            t_final: 10.0,
            schemes: default_schemes(),
            jobs: 0,
            benchmark: BenchmarkSource::default(),
            rom: RomSettings::default(),
            tubes: TubeSettings::default(),
            constraints: ConstraintSettings::default(),
            reference: default_reference(),
            ocp: default_ocp(),
            closed_loop: LoopSettings::default(),
            checks: Checks::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; errors carry the line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.benchmark.path, &mut cfg.rom.path, &mut cfg.tubes.fit_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::Config("scheme list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if !(self.t_final > 0.0) {
            return Err(Error::Config("t_final must be positive".into()));
        }
        for p in [&self.benchmark.path, &self.rom.path, &self.tubes.fit_path].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    fn benchmark_config(&self) -> Result<BenchmarkConfig> {
        if let Some(p) = &self.benchmark.path {
            let text = std::fs::read_to_string(p)?;
            return BenchmarkConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())));
        }
        let cfg = match self.benchmark.preset {
            BenchmarkPreset::Default => BenchmarkConfig::default(),
            BenchmarkPreset::Small => BenchmarkConfig::small_test(),
        };
        Ok(if self.benchmark.linear { cfg.linear() } else { cfg })
    }

    fn exec(&self) -> Execution {
        if self.jobs == 1 {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

/// The manufactured plant with its exact reduced model.
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub model: FullOrderModel,
    pub exact: SsmRom,
    pub assumptions: AssumptionReport,
}

pub fn build_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    let config = cfg.benchmark_config()?;
    let (model, exact) = manufacture_benchmark(&config.to_spec()?).map_err(|e| e.in_stage("fom"))?;
    let assumptions = check_assumptions(&model, exact.n(), config.max_order);
    Ok(Benchmark { config, model, exact, assumptions })
}

/// The reduced model used for control.
pub fn build_rom(cfg: &ExperimentConfig, bench: &Benchmark) -> Result<SsmRom> {
    match (cfg.rom.source, &cfg.rom.path) {
        (RomKind::Exact, _) => Ok(bench.exact.clone()),
        (RomKind::Fitted, Some(p)) => load_rom(p).map_err(|e| e.in_stage("ssm")),
        (RomKind::Fitted, None) => {
            let r = &cfg.rom;
            let data = decay_data(&bench.model, &bench.exact, r.decay_trajectories, r.decay_radius, r.decay_t_final, r.decay_dt, r.seed, cfg.exec())
                .map_err(|e| e.in_stage("ssm"))?;
            fit_graph_rom(&data, bench.exact.n(), (r.degrees[0], r.degrees[1]), Some(&bench.model)).map_err(|e| e.in_stage("ssm"))
        }
    }
}

/// Fitted constants with the training and held-out excitation runs.
pub struct TubeFit {
    pub result: FitResult,
    pub train: ExcitationData,
    pub heldout: ExcitationData,
    pub heldout_margin: f64,
}

fn d_bar(cfg: &ExperimentConfig, model: &FullOrderModel) -> f64 {
    cfg.tubes.d_bar.unwrap_or(model.d_bar())
}

/// Excitation on the plant, the fit, and a held-out run with fresh directions,
/// noise and disturbance.
pub fn fit_tubes(cfg: &ExperimentConfig, model: &FullOrderModel, rom: &SsmRom, cons: &PolytopicConstraints) -> Result<TubeFit> {
    let t = &cfg.tubes;
    let d = d_bar(cfg, model);
    let d_hat = t.d_hat.unwrap_or(d);
    let dt_sim = cfg.closed_loop.dt_sim;
    let run = |s: &ExcitationSchedule| run_excitation(model, rom, s, &cfg.ocp.input_box, dt_sim, t.excitation_disturbance).map_err(|e| e.in_stage("fit"));
    let train = run(&t.excitation)?;
    let held_schedule = ExcitationSchedule { seed: t.excitation.seed + 1, noise_seed: t.excitation.noise_seed + 1, ..t.excitation.clone() };
    let heldout = run(&held_schedule)?;
    let result = fit_tube_constants(std::slice::from_ref(&train), d, d_hat, cons, rom, &t.fit, cfg.exec()).map_err(|e| e.in_stage("fit"))?;
    let heldout_margin = envelope_margin(&result.params(), &heldout)?;
    Ok(TubeFit { result, train, heldout, heldout_margin })
}

/// Tube parameters for the closed loop.
pub fn tube_params(cfg: &ExperimentConfig, model: &FullOrderModel, rom: &SsmRom, fit: Option<&FitResult>) -> Result<TubeParams> {
    match cfg.tubes.variant {
        TubeVariant::ModelBased => Ok(TubeParams::model_based(rom.constants(), d_bar(cfg, model))),
        TubeVariant::DataDriven => match fit {
            Some(f) => Ok(f.params()),
            None => Err(Error::Config("data-driven tubes need fitted constants".into())),
        },
    }
}

pub fn load_fit(path: &Path) -> Result<FitResult> {
    let text = std::fs::read_to_string(path)?;
    FitResult::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn verify_tubes(cfg: &ExperimentConfig, model: &FullOrderModel, rom: &SsmRom, params: &TubeParams) -> Result<VerificationReport> {
    let v = &cfg.tubes.verify;
    verify_prop1(model, rom, params, v.trials, v.t_final, v.seed, &v.options, cfg.exec()).map_err(|e| e.in_stage("tube"))
}

/// Rejects a constant reference that admits no terminal set.
fn check_reference(cfg: &ExperimentConfig, rom: &SsmRom, params: &TubeParams, cons: &PolytopicConstraints) -> Result<()> {
    cfg.reference.validate(rom.n_y())?;
    let Reference::Setpoint { output } = &cfg.reference else { return Ok(()) };
    if !cfg.schemes.iter().any(|s| s.is_robust()) {
        return Ok(());
    }
    let y = DVector::from_column_slice(output);
    let steady = solve_steady_state(rom, &y, &cfg.ocp.input_box, None).map_err(|e| e.in_stage("tighten"))?;
    compute_terminal_set(rom, params, cons, &steady, cfg.ocp.input_norm).map_err(|e| e.in_stage("tighten"))?;
    Ok(())
}

/// Every `(scheme, seed)` pair, in config order.
pub fn run_schemes(
    cfg: &ExperimentConfig,
    model: &FullOrderModel,
    rom: &SsmRom,
    params: &TubeParams,
    cons: &PolytopicConstraints,
) -> Result<Vec<ClosedLoopTrace>> {
    check_reference(cfg, rom, params, cons)?;
    let jobs: Vec<(Scheme, u64)> = cfg.schemes.iter().flat_map(|&s| cfg.seeds.iter().map(move |&k| (s, k))).collect();
    let results = map_indexed(cfg.exec(), jobs.len(), |i| {
        let (scheme, seed) = jobs[i];
        let ocp = OcpConfig { scheme, ..cfg.ocp.clone() };
        let opts = ClosedLoopOptions {
            t_final: cfg.t_final,
            dt_sim: cfg.closed_loop.dt_sim,
            disturbance_magnitude: cfg.closed_loop.disturbance_magnitude,
            seed,
            x0: Vec::new(),
            faults: cfg.closed_loop.faults.clone(),
        };
        info!("running {scheme} with seed {seed}");
        run_closed_loop(model, rom, params, cons, &ocp, &cfg.reference, &opts)
    });
    results.into_iter().collect()
}

fn run_name(scheme: Scheme, seed: u64) -> String {
    format!("{}_seed{seed}", scheme.name())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// CSV `t,status,theta,scp_iters,attempts,tracking_error,u_*`.
pub fn write_steps_csv<W: std::io::Write>(trace: &ClosedLoopTrace, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let m = trace.steps.first().map_or(0, |s| s.u.len());
    let mut header: Vec<String> = ["t", "status", "theta", "scp_iters", "attempts", "tracking_error"].iter().map(|s| s.to_string()).collect();
    header.extend((1..=m).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    for s in &trace.steps {
        let mut rec = vec![fmt_f64(s.t), s.status.name().to_string(), fmt_f64(s.theta), s.scp_iters.to_string(), s.attempts.to_string(), fmt_f64(s.tracking_error)];
        rec.extend(s.u.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV `t,y_*,yref_*,bound_*,tightening_*,s,delta`: outputs against the constraint
/// bounds and the tightening implied by the tubes.
pub fn write_plot_csv<W: std::io::Write>(trace: &ClosedLoopTrace, cons: &PolytopicConstraints, rom: &SsmRom, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n_y = cons.n_y();
    let n_h = cons.n_h();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n_y).map(|i| format!("y_{i}")));
    header.extend((1..=n_y).map(|i| format!("yref_{i}")));
    header.extend((1..=n_h).map(|j| format!("bound_{j}")));
    header.extend((1..=n_h).map(|j| format!("tightening_{j}")));
    header.push("s".into());
    header.push("delta".into());
    w.write_record(&header)?;
    for r in &trace.rows {
        let mut rec = vec![fmt_f64(r.t)];
        rec.extend(r.y.iter().chain(r.y_ref.iter()).map(|v| fmt_f64(*v)));
        rec.extend(cons.bounds().iter().map(|v| fmt_f64(*v)));
        rec.extend((0..n_h).map(|j| fmt_f64(tightening(cons, rom, r.delta, r.s, j))));
        rec.push(fmt_f64(r.s));
        rec.push(fmt_f64(r.delta));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every per-run artifact. Writes happen on the calling thread, one file at a time.
pub fn write_runs(out: &Path, traces: &[ClosedLoopTrace], cons: &PolytopicConstraints, rom: &SsmRom) -> Result<Vec<TraceSummary>> {
    let runs = out.join("runs");
    let plots = out.join("plotdata");
    create_dir(&runs)?;
    create_dir(&plots)?;
    let mut summaries = Vec::with_capacity(traces.len());
    for tr in traces {
        let name = run_name(tr.scheme, tr.seed);
        tr.save_csv(&runs.join(format!("{name}.csv")))?;
        write_steps_csv(tr, std::fs::File::create(runs.join(format!("{name}_steps.csv")))?)?;
        write_plot_csv(tr, cons, rom, std::fs::File::create(plots.join(format!("{name}.csv")))?)?;
        let summary = tr.summary();
        let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(runs.join(format!("{name}.toml")), text)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// Aggregate of one scheme over its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeReport {
    pub scheme: Scheme,
    pub runs: usize,
    pub steps: usize,
    pub violations: usize,
    pub max_violation: f64,
    pub mean_tracking_error: f64,
    pub max_tracking_error: f64,
    pub optimal_steps: usize,
    pub suboptimal_steps: usize,
    pub fallback_steps: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub scp_histogram: BTreeMap<usize, usize>,
    pub max_s_ratio: f64,
    pub max_delta_ratio: f64,
}

impl SchemeReport {
    fn from_runs(scheme: Scheme, runs: &[&TraceSummary]) -> Self {
        let steps: usize = runs.iter().map(|r| r.steps).sum();
        let weighted = |f: &dyn Fn(&TraceSummary) -> f64| {
            if steps == 0 {
                0.0
            } else {
                runs.iter().map(|r| f(r) * r.steps as f64).sum::<f64>() / steps as f64
            }
        };
        let max = |f: &dyn Fn(&TraceSummary) -> f64| runs.iter().map(|r| f(r)).fold(f64::NEG_INFINITY, f64::max);
        // Ratios are undefined for schemes without tubes.
        let ratio = |f: &dyn Fn(&TraceSummary) -> f64| if runs.iter().all(|r| f(r).is_nan()) { f64::NAN } else { max(f) };
        let mut scp_histogram = BTreeMap::new();
        for r in runs {
            for (k, v) in &r.scp_histogram {
                *scp_histogram.entry(*k).or_insert(0) += v;
            }
        }
        Self {
            scheme,
            runs: runs.len(),
            steps,
            violations: runs.iter().map(|r| r.violations).sum(),
            max_violation: max(&|r| r.max_violation).max(0.0),
            mean_tracking_error: weighted(&|r| r.mean_tracking_error),
            max_tracking_error: max(&|r| r.max_tracking_error),
            optimal_steps: runs.iter().map(|r| r.optimal_steps).sum(),
            suboptimal_steps: runs.iter().map(|r| r.suboptimal_steps).sum(),
            fallback_steps: runs.iter().map(|r| r.fallback_steps).sum(),
            mean_solve_ms: weighted(&|r| r.mean_solve_ms),
            max_solve_ms: max(&|r| r.max_solve_ms),
            scp_histogram,
            max_s_ratio: ratio(&|r| r.max_s_ratio),
            max_delta_ratio: ratio(&|r| r.max_delta_ratio),
        }
    }

    pub fn optimal_fraction(&self) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            self.optimal_steps as f64 / self.steps as f64
        }
    }
}

/// Verification figures carried into the summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerificationSummary {
    pub trials: usize,
    pub violations: usize,
    pub left_domain: usize,
    pub max_s_ratio: f64,
    pub max_delta_ratio: f64,
}

impl From<&VerificationReport> for VerificationSummary {
    fn from(r: &VerificationReport) -> Self {
        Self {
            trials: r.trials.len(),
            violations: r.violations(),
            left_domain: r.left_domain(),
            max_s_ratio: r.max_s_ratio(),
            max_delta_ratio: r.max_delta_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Per scheme, in stable scheme order.
    pub schemes: Vec<SchemeReport>,
    pub verification: Option<VerificationSummary>,
    /// Failed invariants, empty when the run passed.
    pub failures: Vec<String>,
}

impl Report {
    pub fn build(summaries: &[TraceSummary], verification: Option<VerificationSummary>, checks: &Checks) -> Self {
        let mut by_scheme: BTreeMap<Scheme, Vec<&TraceSummary>> = BTreeMap::new();
        for s in summaries {
            by_scheme.entry(s.scheme).or_default().push(s);
        }
        let schemes: Vec<SchemeReport> = by_scheme.iter().map(|(k, v)| SchemeReport::from_runs(*k, v)).collect();
        let mut failures = Vec::new();
        for r in schemes.iter().filter(|r| r.scheme.is_robust()) {
            if checks.robust_constraints && r.violations > 0 {
                failures.push(format!("{}: {} constraint violation samples (max {:.3e})", r.scheme, r.violations, r.max_violation));
            }
            if checks.recursive_feasibility && (r.optimal_steps != r.steps || r.fallback_steps > 0) {
                failures.push(format!("{}: {} of {} steps optimal, {} fallbacks", r.scheme, r.optimal_steps, r.steps, r.fallback_steps));
            }
            if checks.tube_bounds && !(r.max_s_ratio <= 1.0 && r.max_delta_ratio <= 1.0) {
                failures.push(format!("{}: realized error exceeded a tube (ratios {:.4}, {:.4})", r.scheme, r.max_s_ratio, r.max_delta_ratio));
            }
        }
        if let (true, Some(v)) = (checks.tube_verification, &verification) {
            if v.violations > 0 {
                failures.push(format!("tube verification: {} of {} trials violated", v.violations, v.trials));
            }
        }
        Self { schemes, verification, failures }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let num = |x: f64| if x.is_nan() { "n/a".to_string() } else { format!("{x:.6e}") };
        if let Some(v) = &self.verification {
            let _ = writeln!(s, "[tube-verification]");
            let _ = writeln!(s, "trials: {}", v.trials);
            let _ = writeln!(s, "violations: {}", v.violations);
            let _ = writeln!(s, "left_domain: {}", v.left_domain);
            let _ = writeln!(s, "max_s_ratio: {}", num(v.max_s_ratio));
            let _ = writeln!(s, "max_delta_ratio: {}", num(v.max_delta_ratio));
            s.push('\n');
        }
        for r in &self.schemes {
            let _ = writeln!(s, "[{}]", r.scheme);
            let _ = writeln!(s, "runs: {}", r.runs);
            let _ = writeln!(s, "steps: {}", r.steps);
            let _ = writeln!(s, "violations: {}", r.violations);
            let _ = writeln!(s, "max_violation: {}", num(r.max_violation));
            let _ = writeln!(s, "mean_tracking_error: {}", num(r.mean_tracking_error));
            let _ = writeln!(s, "max_tracking_error: {}", num(r.max_tracking_error));
            let _ = writeln!(s, "optimal_steps: {}", r.optimal_steps);
            let _ = writeln!(s, "suboptimal_steps: {}", r.suboptimal_steps);
            let _ = writeln!(s, "fallback_steps: {}", r.fallback_steps);
            let _ = writeln!(s, "mean_solve_ms: {:.3}", r.mean_solve_ms);
            let _ = writeln!(s, "max_solve_ms: {:.3}", r.max_solve_ms);
            let hist: Vec<String> = r.scp_histogram.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            let _ = writeln!(s, "scp_iterations: {}", hist.join(" "));
            let _ = writeln!(s, "max_s_ratio: {}", num(r.max_s_ratio));
            let _ = writeln!(s, "max_delta_ratio: {}", num(r.max_delta_ratio));
            s.push('\n');
        }
        let _ = writeln!(s, "status: {}", if self.passed() { "pass" } else { "fail" });
        for f in &self.failures {
            let _ = writeln!(s, "failure: {f}");
        }
        s
    }
}

/// Writes `summary.txt`.
pub fn emit_report(out: &Path, report: &Report) -> Result<()> {
    create_dir(out)?;
    std::fs::write(out.join("summary.txt"), report.to_text())?;
    Ok(())
}

fn read_verification(path: &Path) -> Result<VerificationSummary> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut trials = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::Config(format!("{}: short record", path.display())));
        let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| Error::Config(format!("{}: bad number", path.display()))) };
        trials.push(crate::tube::TrialResult {
            trial: num(0)? as usize,
            max_s_ratio: num(1)?,
            max_delta_ratio: num(2)?,
            left_domain: field(3)? == "true",
        });
    }
    Ok((&VerificationReport { trials }).into())
}

/// Rebuilds the report from the per-run summaries and the verification CSV
/// written by an earlier run.
pub fn report_from_dir(out: &Path, checks: &Checks) -> Result<Report> {
    let runs = out.join("runs");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&runs)
        .map_err(|e| Error::Config(format!("{}: {e}", runs.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no run summaries in {}", runs.display())));
    }
    let mut summaries = Vec::with_capacity(paths.len());
    for p in &paths {
        let text = std::fs::read_to_string(p)?;
        summaries.push(toml::from_str::<TraceSummary>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?);
    }
    let vpath = out.join("verification.csv");
    let verification = if vpath.exists() { Some(read_verification(&vpath)?) } else { None };
    Ok(Report::build(&summaries, verification, checks))
}

/// Outcome of a full pipeline run.
pub struct ExperimentOutcome {
    pub report: Report,
    pub fit: Option<TubeFit>,
    pub traces: Vec<ClosedLoopTrace>,
}

/// Full pipeline: benchmark, reduced model, tube constants, verification,
/// closed-loop runs, and every output file.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    with_threads(cfg.jobs, || run_pipeline(cfg))
}

fn run_pipeline(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let out = &cfg.out_dir;
    create_dir(out)?;
    let bench = build_benchmark(cfg)?;
    let rom = build_rom(cfg, &bench)?;
    let cons = cfg.constraints.build()?;
    let fit = match (cfg.tubes.variant, &cfg.tubes.fit_path) {
        (TubeVariant::DataDriven, None) => {
            let f = fit_tubes(cfg, &bench.model, &rom, &cons)?;
            let plots = out.join("plotdata");
            create_dir(&plots)?;
            save_envelope_csv(&f.result.params(), &f.train, &plots.join("envelope_train.csv"))?;
            save_envelope_csv(&f.result.params(), &f.heldout, &plots.join("envelope_heldout.csv"))?;
            std::fs::write(out.join("tube_fit.toml"), f.result.to_toml_string()?)?;
            Some(f)
        }
        _ => None,
    };
    let loaded = match &cfg.tubes.fit_path {
        Some(p) => Some(load_fit(p)?),
        None => None,
    };
    let params = tube_params(cfg, &bench.model, &rom, fit.as_ref().map(|f| &f.result).or(loaded.as_ref()))?;
    let verification = if cfg.tubes.verify.enabled {
        let v = verify_tubes(cfg, &bench.model, &rom, &params)?;
        v.write_csv(std::fs::File::create(out.join("verification.csv"))?)?;
        Some(VerificationSummary::from(&v))
    } else {
        None
    };
    let traces = run_schemes(cfg, &bench.model, &rom, &params, &cons)?;
    let summaries = write_runs(out, &traces, &cons, &rom)?;
    let report = Report::build(&summaries, verification, &cfg.checks);
    emit_report(out, &report)?;
    Ok(ExperimentOutcome { report, fit, traces })
}
