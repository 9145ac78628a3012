use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rn_rompc::experiment::{
    build_benchmark, build_rom, emit_report, fit_tubes, load_fit, report_from_dir, run_experiment, tube_params, verify_tubes, ExperimentConfig,
    RomKind, TubeVariant, VerificationSummary,
};
use rn_rompc::mpc::Scheme;
use rn_rompc::ssm::save_rom;
use rn_rompc::tube::VerificationReport;
use rn_rompc::{Error, Result};

#[derive(Parser)]
#[command(name = "rn-rompc", version, about = "Robust reduced-order MPC with dynamic error tubes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces the closed-loop seed list and the verification seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scheme to run; repeat to compare several. Replaces `schemes`.
    #[arg(long = "scheme", global = true)]
    schemes: Vec<Scheme>,
    /// Worker threads; 0 uses every core, 1 runs sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the benchmark; writes benchmark.toml and rom_exact.toml.
    Manufacture,
    /// Regress a reduced model from unforced decays; writes rom_fitted.toml.
    FitRom,
    /// Fit data-driven tube constants on the excitation protocol; writes
    /// tube_fit.toml and the envelope plot data.
    FitTubes,
    /// Randomized check that the tubes bound the realized errors; writes verification.csv.
    VerifyTubes,
    /// Full pipeline with closed-loop runs of every scheme and seed.
    Run,
    /// Rebuild summary.txt from the run summaries in the output directory.
    Report,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
            cfg.tubes.verify.seed = seed;
        }
        if !self.schemes.is_empty() {
            cfg.schemes = self.schemes.clone();
        }
        if let Some(jobs) = self.jobs {
            cfg.jobs = jobs;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(path: PathBuf, text: String) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn manufacture(cfg: &ExperimentConfig) -> Result<bool> {
    let bench = build_benchmark(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write(cfg.out_dir.join("benchmark.toml"), bench.config.to_toml_string()?)?;
    save_rom(&bench.exact, &cfg.out_dir.join("rom_exact.toml"))?;
    let k = bench.exact.constants();
    println!("states: {} reduced: {} inputs: {} outputs: {}", bench.model.n_f(), bench.exact.n(), bench.model.m(), bench.model.n_y());
    println!("d_bar: {:.6e}", bench.model.d_bar());
    println!("l_fnl: {:.6e} l_rnl: {:.6e} lambda_an: {:.4} lambda_ar: {:.4}", k.l_fnl, k.l_rnl, k.lambda_an, k.lambda_ar);
    println!("assumptions: {}", if bench.assumptions.passed() { "pass" } else { "fail" });
    Ok(bench.assumptions.passed())
}

fn fit_rom(cfg: &ExperimentConfig) -> Result<bool> {
    let bench = build_benchmark(cfg)?;
    let mut fit_cfg = cfg.clone();
    fit_cfg.rom.source = RomKind::Fitted;
    fit_cfg.rom.path = None;
    let rom = build_rom(&fit_cfg, &bench)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    save_rom(&rom, &cfg.out_dir.join("rom_fitted.toml"))?;
    let k = rom.constants();
    println!("degrees: {:?}", cfg.rom.degrees);
    println!("l_fnl: {:.6e} l_rnl: {:.6e} lambda_an: {:.4} lambda_ar: {:.4}", k.l_fnl, k.l_rnl, k.lambda_an, k.lambda_ar);
    Ok(true)
}

fn fit_tubes_cmd(cfg: &ExperimentConfig) -> Result<bool> {
    let bench = build_benchmark(cfg)?;
    let rom = build_rom(cfg, &bench)?;
    let cons = cfg.constraints.build()?;
    let fit = fit_tubes(cfg, &bench.model, &rom, &cons)?;
    let plots = cfg.out_dir.join("plotdata");
    std::fs::create_dir_all(&plots)?;
    write(cfg.out_dir.join("tube_fit.toml"), fit.result.to_toml_string()?)?;
    let params = fit.result.params();
    rn_rompc::fit::save_envelope_csv(&params, &fit.train, &plots.join("envelope_train.csv"))?;
    rn_rompc::fit::save_envelope_csv(&params, &fit.heldout, &plots.join("envelope_heldout.csv"))?;
    let r = &fit.result;
    println!("l_fnl: {:.6e} l_rnl: {:.6e} b_bar: {:.6e} l_bar: {:.6e}", r.l_fnl, r.l_rnl, r.b_bar, r.l_bar);
    println!("d_bar: {:.6e} d_hat: {:.6e} objective: {:.6e}", r.d_bar, r.d_hat, r.objective);
    println!("envelope_margin: {:.6e}", r.envelope_margin);
    println!("heldout_margin: {:.6e}", fit.heldout_margin);
    Ok(r.envelope_margin >= 0.0 && fit.heldout_margin >= 0.0)
}

fn verify_cmd(cfg: &ExperimentConfig) -> Result<bool> {
    let bench = build_benchmark(cfg)?;
    let rom = build_rom(cfg, &bench)?;
    let fit = match (cfg.tubes.variant, &cfg.tubes.fit_path) {
        (TubeVariant::DataDriven, Some(p)) => Some(load_fit(p)?),
        (TubeVariant::DataDriven, None) => Some(fit_tubes(cfg, &bench.model, &rom, &cfg.constraints.build()?)?.result),
        _ => None,
    };
    let params = tube_params(cfg, &bench.model, &rom, fit.as_ref())?;
    let report: VerificationReport = verify_tubes(cfg, &bench.model, &rom, &params)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    report.write_csv(std::fs::File::create(cfg.out_dir.join("verification.csv"))?)?;
    let v = VerificationSummary::from(&report);
    println!("trials: {}", v.trials);
    println!("violations: {}", v.violations);
    println!("left_domain: {}", v.left_domain);
    println!("max_s_ratio: {:.6e}", v.max_s_ratio);
    println!("max_delta_ratio: {:.6e}", v.max_delta_ratio);
    Ok(v.violations == 0)
}

fn run(cfg: &ExperimentConfig) -> Result<bool> {
    let outcome = run_experiment(cfg)?;
    print!("{}", outcome.report.to_text());
    Ok(outcome.report.passed())
}

fn report(cfg: &ExperimentConfig) -> Result<bool> {
    let report = report_from_dir(&cfg.out_dir, &cfg.checks)?;
    emit_report(&cfg.out_dir, &report)?;
    print!("{}", report.to_text());
    Ok(report.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = cli.common.config().and_then(|cfg| {
        let jobs = cfg.jobs;
        rn_rompc::exec::with_threads(jobs, || match cli.command {
            Command::Manufacture => manufacture(&cfg),
            Command::FitRom => fit_rom(&cfg),
            Command::FitTubes => fit_tubes_cmd(&cfg),
            Command::VerifyTubes => verify_cmd(&cfg),
            Command::Run => run(&cfg),
            Command::Report => report(&cfg),
        })
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
