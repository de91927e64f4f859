//! End-to-end pipelines: build, inject, calibrate, reconstruct, evaluate.

use std::collections::BTreeMap;
use std::time::Instant;

use promptq_core::calib::{attention_distance, calibrate_observed, mean_distance, observe, CalibItem, Calibration, Metric};
use promptq_core::model::{build_model, is_qk_tensor, FakeQuant, ModelConfig};
use promptq_core::recon::{evaluate_agreement, run_reconstruction, ReconConfig, UnitGranularity, UnitReport};
use promptq_core::{Model64, QuantEnv64};
use rayon::prelude::*;

use crate::config::{BitPair, ExperimentConfig, ReconMode};
use crate::data::calib_and_eval;
use crate::error::{HarnessError, Result};
use crate::inject::{inject_outliers, InjectionReport};
use crate::report::{ClipRange, Report, ReportKind, RunRecord};
use crate::rng::derived_seed;

/// One calibration method plus optional reconstruction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub method: Metric,
    pub recon: ReconMode,
    pub granularity: UnitGranularity,
    /// Overrides the configured focus threshold.
    pub theta: Option<f64>,
}

impl RunSpec {
    pub fn new(method: Metric, recon: ReconMode) -> Self {
        Self {
            method,
            recon,
            granularity: UnitGranularity::PerStage,
            theta: None,
        }
    }

    pub fn granularity(mut self, g: UnitGranularity) -> Self {
        self.granularity = g;
        self
    }

    pub fn theta(mut self, t: f64) -> Self {
        self.theta = Some(t);
        self
    }
}

/// The model and data of one seed, outliers already planted.
pub struct Prepared {
    pub seed: u64,
    pub model: Model64,
    pub calib: Vec<CalibItem<f64>>,
    pub eval: Vec<CalibItem<f64>>,
    pub injections: Vec<InjectionReport>,
}

pub fn model_config(cfg: &ExperimentConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        seed: derived_seed(seed, "model"),
        ..cfg.model.clone()
    }
}

pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let mcfg = model_config(cfg, seed);
    let mut model: Model64 = build_model(&mcfg)?;
    let (calib, eval) = calib_and_eval(seed, &mcfg, cfg.n_calib, cfg.n_eval)?;
    let injections = match &cfg.outliers {
        Some(spec) => inject_outliers(&mut model, spec, &calib)?,
        None => Vec::new(),
    };
    Ok(Prepared {
        seed,
        model,
        calib,
        eval,
        injections,
    })
}

/// Reconstruction settings of a run; the qdrop stream comes from the seed.
pub fn recon_config(cfg: &ExperimentConfig, seed: u64, spec: &RunSpec) -> Option<ReconConfig> {
    spec.recon.objective().map(|objective| ReconConfig {
        objective,
        granularity: spec.granularity,
        seed: derived_seed(seed, "qdrop"),
        ..cfg.recon.clone()
    })
}

pub fn reconstruct(cfg: &ExperimentConfig, prep: &Prepared, env: &QuantEnv64, spec: &RunSpec) -> Result<(QuantEnv64, Vec<UnitReport>)> {
    match recon_config(cfg, prep.seed, spec) {
        Some(rc) => {
            let out = run_reconstruction(&prep.model, env, &prep.calib, &rc)?;
            Ok((out.env, out.units))
        }
        None => Ok((env.clone(), Vec::new())),
    }
}

/// Evaluates `env` on the prepared evaluation items.
pub fn evaluate(cfg: &ExperimentConfig, prep: &Prepared, env: &QuantEnv64, spec: &RunSpec, bits: BitPair) -> Result<RunRecord> {
    let theta = spec.theta.unwrap_or(cfg.calib.theta);
    let agree = evaluate_agreement(&prep.model, env, &prep.eval)?;
    let dist = attention_distance(&prep.model, &mut FakeQuant::new(env), &prep.eval, theta, cfg.calib.max_scope)?;
    let dist_pcc_mean = mean_distance(&dist, &[]);
    let targets: Vec<String> = prep.injections.iter().map(|r| r.target.clone()).collect();
    let dist_pcc_targets = (!targets.is_empty()).then(|| mean_distance(&dist, &targets));
    let sigma: BTreeMap<&str, f64> = prep.injections.iter().map(|r| (r.target.as_str(), r.sigma)).collect();
    let clip_ranges = env
        .acts
        .iter()
        .filter(|(n, _)| is_qk_tensor(n))
        .map(|(n, qp)| {
            let x_low = qp.x_low().iter().copied().fold(f64::INFINITY, f64::min);
            let x_up = qp.x_up().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            ClipRange {
                name: n.clone(),
                x_low,
                x_up,
                width_sigma: sigma.get(n.as_str()).map(|s| (x_up - x_low) / s),
            }
        })
        .collect();
    Ok(RunRecord {
        seed: prep.seed,
        method: spec.method,
        bits,
        recon: spec.recon,
        granularity: (spec.recon != ReconMode::None).then_some(spec.granularity),
        theta,
        mask_iou: agree.mask_iou,
        dist_pcc: dist,
        dist_pcc_mean,
        dist_pcc_targets,
        hybrid_mse: agree.stage_hybrid_mse,
        clip_ranges,
        recon_units: Vec::new(),
        runtime_s: 0.0,
    })
}

/// Every (bits, spec) pipeline of one seed. Calibrations are shared by runs
/// that differ only in reconstruction; each record's runtime includes its
/// calibration.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, specs: &[RunSpec]) -> Result<Vec<RunRecord>> {
    let t0 = Instant::now();
    let prep = prepare(cfg, seed)?;
    let obs = observe(&prep.model, &prep.calib)?;
    let setup = t0.elapsed().as_secs_f64();
    let mut cache: BTreeMap<(BitPair, Metric, u64), (Calibration<f64>, f64)> = BTreeMap::new();
    let mut records = Vec::new();
    for &bits in &cfg.bits {
        for spec in specs {
            let theta = spec.theta.unwrap_or(cfg.calib.theta);
            let key = (bits, spec.method, theta.to_bits());
            if !cache.contains_key(&key) {
                let t = Instant::now();
                let policy = cfg.calib.policy(spec.method, bits, theta);
                let c = calibrate_observed(&prep.model, &obs.acts, &policy)?;
                cache.insert(key, (c, t.elapsed().as_secs_f64()));
            }
            let (c, calib_s) = &cache[&key];
            let t = Instant::now();
            let (env, units) = reconstruct(cfg, &prep, &c.env, spec)?;
            let mut rec = evaluate(cfg, &prep, &env, spec, bits)?;
            rec.recon_units = units;
            rec.runtime_s = setup + calib_s + t.elapsed().as_secs_f64();
            log::info!(
                "seed {seed} {} {bits} {} {}: mask IoU {:.4}, dist {:.4}",
                spec.method,
                spec.recon,
                rec.theta,
                rec.mask_iou,
                rec.dist_pcc_mean
            );
            records.push(rec);
        }
    }
    Ok(records)
}

/// Runs `specs` for every configured seed and bit pair, seeds spread over
/// a worker pool.
pub fn run_specs(cfg: &ExperimentConfig, specs: &[RunSpec], kind: ReportKind) -> Result<Report> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(HarnessError::Config("no runs requested".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    let per_seed: Vec<Result<Vec<RunRecord>>> = pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s, specs)).collect());
    let mut records = Vec::new();
    for r in per_seed {
        records.extend(r?);
    }
    Ok(Report::new(kind, Some(cfg.clone()), records))
}

/// Every method × reconstruction mode of `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let specs: Vec<RunSpec> = cfg
        .methods
        .iter()
        .flat_map(|&m| {
            cfg.recon_modes
                .iter()
                .map(move |&r| RunSpec::new(m, r).granularity(cfg.recon.granularity))
        })
        .collect();
    run_specs(cfg, &specs, ReportKind::Experiment)
}

/// The focus-overlap pipeline once per θ, plus an MSE baseline at the
/// configured θ, for every seed and configured reconstruction mode.
pub fn sweep_theta(cfg: &ExperimentConfig, thetas: &[f64]) -> Result<Report> {
    if thetas.is_empty() {
        return Err(HarnessError::Config("empty theta sweep".into()));
    }
    let mut specs = Vec::new();
    for &r in &cfg.recon_modes {
        let g = cfg.recon.granularity;
        specs.push(RunSpec::new(Metric::Mse, r).granularity(g));
        specs.extend(thetas.iter().map(|&t| RunSpec::new(Metric::Pcc, r).granularity(g).theta(t)));
    }
    let cfg = ExperimentConfig {
        thetas: thetas.to_vec(),
        ..cfg.clone()
    };
    run_specs(&cfg, &specs, ReportKind::ThetaSweep)
}

/// {local, PAR} × {per-layer, per-stage} × {MSE, focus-overlap}
/// initialization.
pub fn sweep_granularity(cfg: &ExperimentConfig) -> Result<Report> {
    let mut specs = Vec::new();
    for method in [Metric::Mse, Metric::Pcc] {
        for recon in [ReconMode::Local, ReconMode::Par] {
            for g in [UnitGranularity::PerLayer, UnitGranularity::PerStage] {
                specs.push(RunSpec::new(method, recon).granularity(g));
            }
        }
    }
    run_specs(cfg, &specs, ReportKind::GranularitySweep)
}
