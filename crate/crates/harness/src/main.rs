use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use promptq_core::calib::{calibrate_model, Metric};
use promptq_core::model::save_weights;
use promptq_harness::config::{BitPair, ExperimentConfig, ReconMode};
use promptq_harness::experiment::{evaluate, prepare, reconstruct, run_experiment, sweep_granularity, sweep_theta, RunSpec};
use promptq_harness::report::{emit_report, Format, Report, ReportKind};
use promptq_harness::state::{read_json, write_json, DataFile, EnvFile};
use promptq_harness::{HarnessError, Result};

/// Fake-quantization experiments on a miniature promptable segmenter.
///
/// Every subcommand rebuilds the model and data deterministically from the
/// config and seed, so intermediate files only carry what cannot be
/// regenerated cheaply: quantization environments and reports.
#[derive(Parser)]
#[command(name = "promptq", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the config's seed list with one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's bit pairs, e.g. W6A6.
    #[arg(long)]
    bits: Option<BitPair>,
    /// Replaces the config's calibration methods.
    #[arg(long)]
    method: Option<Metric>,
    /// Replaces the config's reconstruction modes.
    #[arg(long)]
    recon: Option<ReconMode>,
    /// Reconstruct with the unscaled iteration counts.
    #[arg(long)]
    full_budget: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(b) = self.bits {
            cfg.bits = vec![b];
        }
        if let Some(m) = self.method {
            cfg.methods = vec![m];
        }
        if let Some(r) = self.recon {
            cfg.recon_modes = vec![r];
        }
        if self.full_budget {
            cfg.recon = cfg.recon.full_budget();
        }
        if let Some(o) = &self.out {
            cfg.output = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the model of the first seed, plant outliers, write SAQW weights.
    GenModel(#[command(flatten)] Common),
    /// Write the calibration and evaluation items of the first seed as JSON.
    GenData(#[command(flatten)] Common),
    /// Calibrate the first seed, method and bit pair; write the environment.
    Calibrate(#[command(flatten)] Common),
    /// Reconstruct a calibrated environment.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Environment written by `calibrate`.
        #[arg(long)]
        env: PathBuf,
    },
    /// Evaluate an environment, or run the whole experiment when `--env` is
    /// not given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        env: Option<PathBuf>,
    },
    /// Focus-overlap calibration over the config's θ grid.
    SweepTheta(#[command(flatten)] Common),
    /// Local vs prompt-aware reconstruction, per layer vs per stage, with and
    /// without focus-overlap initialization.
    SweepGranularity(#[command(flatten)] Common),
    /// Merge reports and re-emit them; the format follows `--out`'s
    /// extension.
    Report {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn first<T: Copy>(v: &[T]) -> T {
    v[0]
}

fn out_path(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write_report(report: &Report, path: &Path) -> Result<()> {
    emit_report(report, Format::for_path(path), path)?;
    log::info!("wrote {} records to {}", report.records.len(), path.display());
    Ok(())
}

fn single_spec(cfg: &ExperimentConfig) -> RunSpec {
    RunSpec::new(first(&cfg.methods), first(&cfg.recon_modes)).granularity(cfg.recon.granularity)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenModel(c) => {
            let cfg = c.config()?;
            let prep = prepare(&cfg, first(&cfg.seeds))?;
            let path = out_path(&cfg, "model.saqw");
            save_weights(&prep.model, &path)?;
            for r in &prep.injections {
                println!("{}: ratio {:.1} on columns {:?}", r.target, r.ratio, r.columns);
            }
        }
        Cmd::GenData(c) => {
            let cfg = c.config()?;
            let seed = first(&cfg.seeds);
            let mcfg = promptq_harness::experiment::model_config(&cfg, seed);
            let (calib, eval) = promptq_harness::data::calib_and_eval(seed, &mcfg, cfg.n_calib, cfg.n_eval)?;
            write_json(&DataFile::new(seed, &calib, &eval), &out_path(&cfg, "data.json"))?;
        }
        Cmd::Calibrate(c) => {
            let cfg = c.config()?;
            let prep = prepare(&cfg, first(&cfg.seeds))?;
            let policy = cfg.calib.policy(first(&cfg.methods), first(&cfg.bits), cfg.calib.theta);
            let cal = calibrate_model(&prep.model, &prep.calib, &policy)?;
            for r in cal.records.iter().filter(|r| promptq_core::model::is_qk_tensor(&r.name)) {
                println!("{} {}: [{:?}, {:?}]", r.name, r.metric, r.x_low, r.x_up);
            }
            write_json(&EnvFile::from_env(&cal.env), &out_path(&cfg, "env.json"))?;
        }
        Cmd::Reconstruct { common, env } => {
            let cfg = common.config()?;
            let spec = single_spec(&cfg);
            if spec.recon == ReconMode::None {
                return Err(HarnessError::Config("reconstruct needs --recon local or par".into()));
            }
            let prep = prepare(&cfg, first(&cfg.seeds))?;
            let start = read_json::<EnvFile>(&env)?.to_env()?;
            let (learned, units) = reconstruct(&cfg, &prep, &start, &spec)?;
            for u in &units {
                println!("{} {}: {:.4e} -> {:.4e}", u.unit, u.objective, u.initial_loss, u.final_loss);
            }
            write_json(&EnvFile::from_env(&learned), &out_path(&cfg, "env.recon.json"))?;
        }
        Cmd::Evaluate { common, env: None } => {
            let cfg = common.config()?;
            write_report(&run_experiment(&cfg)?, &out_path(&cfg, "report.json"))?;
        }
        Cmd::Evaluate { common, env: Some(env) } => {
            let cfg = common.config()?;
            let t = Instant::now();
            let prep = prepare(&cfg, first(&cfg.seeds))?;
            let qenv = read_json::<EnvFile>(&env)?.to_env()?;
            let mut rec = evaluate(&cfg, &prep, &qenv, &single_spec(&cfg), first(&cfg.bits))?;
            rec.runtime_s = t.elapsed().as_secs_f64();
            println!("mask IoU {:.4}, dist_pcc {:.4}", rec.mask_iou, rec.dist_pcc_mean);
            let report = Report::new(ReportKind::Experiment, Some(cfg.clone()), vec![rec]);
            write_report(&report, &out_path(&cfg, "report.json"))?;
        }
        Cmd::SweepTheta(c) => {
            let cfg = c.config()?;
            let report = sweep_theta(&cfg, &cfg.thetas)?;
            write_report(&report, &out_path(&cfg, "theta.json"))?;
        }
        Cmd::SweepGranularity(c) => {
            let cfg = c.config()?;
            write_report(&sweep_granularity(&cfg)?, &out_path(&cfg, "granularity.json"))?;
        }
        Cmd::Report { inputs, out } => {
            let mut it = inputs.iter();
            let mut merged = Report::load(it.next().expect("clap requires one input"))?;
            for p in it {
                merged.append(Report::load(p)?)?;
            }
            write_report(&merged, &out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
