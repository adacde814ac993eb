//! Grid execution. Every record is a pure function of the config and its
//! seed; the report is assembled in cell order regardless of which worker
//! finished first.

use std::sync::Arc;

use kmeta::inference::{default_lambda_star, fit_target};
use kmeta::pretrain::{pretrain, pretrain_path};
use kmeta::rates::{classify_regime, krr_optimal_lambda};
use kmeta::regression::fit_krr;
use kmeta::synthetic::{excess_risk, exact_sin_theta, generate_world, model_chat_minus_cn, model_davis_kahan, SyntheticWorld, TaskId};
use kmeta::SubspaceModel;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, LambdaChoice, Metric};
use crate::error::Result;
use crate::report::{RateReport, Record};

// Subseeds: source data, target data and Monte-Carlo inputs are drawn on
// separate streams, shared by every cell of a seed.
const DATA_SUBSEED: u64 = 0;
const MC_SUBSEED: u64 = 1;

/// Position of a cell in the sweep, by axis index in config order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct CellKey {
    n_tasks: usize,
    n: usize,
    n_target: usize,
    lambda: usize,
    s: usize,
    seed: usize,
}

/// Runs every cell of the sweep for every seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RateReport> {
    config.validate()?;
    let hash = config.hash();
    let sw = &config.sweep;

    let worlds: Vec<std::result::Result<SyntheticWorld, String>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            config
                .world_config(seed)
                .map_err(|e| e.to_string())
                .and_then(|wc| generate_world(&wc).map_err(|e| e.to_string()))
        })
        .collect();

    let mut groups = Vec::new();
    for seed in 0..config.seeds.len() {
        for n_tasks in 0..sw.n_tasks.len() {
            for n in 0..sw.n.len() {
                for s in 0..sw.s.len() {
                    groups.push((seed, n_tasks, n, s));
                }
            }
        }
    }
    let mut records: Vec<(CellKey, Record)> = groups
        .par_iter()
        .flat_map_iter(|&(seed, n_tasks, n, s)| run_group(config, &hash, &worlds[seed], seed, n_tasks, n, s))
        .collect();
    records.sort_by_key(|(k, _)| *k);
    Ok(RateReport { config_hash: hash, records: records.into_iter().map(|(_, r)| r).collect() })
}

fn resolve_lambda(config: &ExperimentConfig, choice: LambdaChoice, n: usize, n_tasks: usize) -> Result<f64> {
    Ok(match choice {
        LambdaChoice::Fixed(v) => v,
        LambdaChoice::Regime => classify_regime(&config.regularity_params()?, n as f64, n_tasks as f64)?.lambda,
        LambdaChoice::Krr => krr_optimal_lambda(&config.regularity_params()?, n as f64)?,
    })
}

/// All records sharing one seed, `N`, `n` and `s`: the source data and the
/// kernel blocks are shared across the `λ` sweep.
fn run_group(
    config: &ExperimentConfig,
    hash: &str,
    world: &std::result::Result<SyntheticWorld, String>,
    seed_idx: usize,
    n_tasks_idx: usize,
    n_idx: usize,
    s_idx: usize,
) -> Vec<(CellKey, Record)> {
    let sw = &config.sweep;
    let seed = config.seeds[seed_idx];
    let (n_tasks, n, s) = (sw.n_tasks[n_tasks_idx], sw.n[n_idx], sw.s[s_idx]);
    let blank = |lambda_idx: usize, nt_idx: usize| {
        let key = CellKey { n_tasks: n_tasks_idx, n: n_idx, n_target: nt_idx, lambda: lambda_idx, s: s_idx, seed: seed_idx };
        let record = Record::new(hash, seed, n_tasks, n, sw.n_target[nt_idx], s);
        (key, record)
    };
    let fail_all = |msg: &str| -> Vec<(CellKey, Record)> {
        let mut out = Vec::new();
        for li in 0..sw.lambda.len() {
            for ti in 0..sw.n_target.len() {
                let (k, mut r) = blank(li, ti);
                r.fail(msg);
                out.push((k, r));
            }
        }
        out
    };
    let world = match world {
        Ok(w) => w,
        Err(e) => return fail_all(e),
    };
    let data = match world.source_tasks(n_tasks, n, DATA_SUBSEED) {
        Ok(d) => d,
        Err(e) => return fail_all(&e.to_string()),
    };
    let lambdas: Vec<Result<f64>> = sw.lambda.iter().map(|&c| resolve_lambda(config, c, n, n_tasks)).collect();
    let resolved: Vec<f64> = lambdas.iter().filter_map(|l| l.as_ref().ok().copied()).collect();
    let mut path = if resolved.is_empty() {
        Vec::new()
    } else {
        match pretrain_path(world.kernel(), &data, &resolved, s) {
            Ok(models) => models.into_iter().map(Ok).collect(),
            // Isolate the failing values.
            Err(_) => resolved.iter().map(|&l| pretrain(world.kernel(), &data, l, s)).collect::<Vec<_>>(),
        }
    }
    .into_iter();
    let targets: Vec<_> = sw
        .n_target
        .iter()
        .map(|&nt| world.sample_task(TaskId::Target, nt, DATA_SUBSEED))
        .collect();
    let baselines: Vec<Baselines> = if config.wants(Metric::Baselines) {
        targets.iter().zip(&sw.n_target).map(|(t, &nt)| baselines(config, world, t, nt)).collect()
    } else {
        vec![Baselines::default(); sw.n_target.len()]
    };

    let mut out = Vec::new();
    for (li, lambda) in lambdas.into_iter().enumerate() {
        let lambda = match lambda {
            Ok(l) => l,
            Err(e) => {
                for ti in 0..sw.n_target.len() {
                    let (k, mut r) = blank(li, ti);
                    r.fail(&e.to_string());
                    out.push((k, r));
                }
                continue;
            }
        };
        let model = path.next().expect("one model per resolved lambda").map(Arc::new);
        let subspace = model.as_ref().map_err(|e| e.to_string()).map(|m| subspace_metrics(config, world, m));
        for ti in 0..sw.n_target.len() {
            let (k, mut r) = blank(li, ti);
            r.lambda = Some(lambda);
            let result = (|| -> std::result::Result<(), String> {
                let sub = subspace.as_ref().map_err(Clone::clone)?;
                let m = model.as_ref().map_err(|e| e.to_string())?;
                r.gamma_hat_profile = m.spectrum().iter().copied().collect();
                r.sin_theta_hs = sub.sin_theta;
                r.chat_cn_hs = sub.chat_cn;
                if let Some(dk) = sub.davis_kahan {
                    r.davis_kahan_lhs = Some(dk.lhs);
                    r.davis_kahan_rhs = Some(dk.rhs);
                    r.davis_kahan_holds = Some(dk.holds);
                }
                let b = &baselines[ti];
                r.baseline_krr_risk = b.krr;
                r.oracle_proj_risk = b.oracle;
                if let Some(e) = &sub.error {
                    return Err(e.clone());
                }
                if let Some(e) = &b.error {
                    return Err(e.clone());
                }
                let nt = sw.n_target[ti];
                let star = default_lambda_star(s, nt, world.kernel().kappa_sq(), config.target.tau)
                    .map_err(|e| e.to_string())?;
                r.lambda_star = Some(star.value);
                if config.wants(Metric::ExcessRisk) {
                    let (x, y) = targets[ti].as_ref().map_err(|e| e.to_string())?;
                    let t = fit_target(Arc::clone(m), x, y, star.value).map_err(|e| e.to_string())?;
                    let risk = excess_risk(world, |q| t.predict(q), config.mc_samples, MC_SUBSEED)
                        .map_err(|e| e.to_string())?;
                    r.excess_risk = Some(risk.value);
                    r.excess_risk_se = Some(risk.std_err);
                }
                Ok(())
            })();
            if let Err(e) = result {
                r.fail(&e);
            }
            out.push((k, r));
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
struct SubspaceMetrics {
    sin_theta: Option<f64>,
    chat_cn: Option<f64>,
    davis_kahan: Option<kmeta::synthetic::DavisKahan>,
    error: Option<String>,
}

fn subspace_metrics(config: &ExperimentConfig, world: &SyntheticWorld, m: &SubspaceModel<f64>) -> SubspaceMetrics {
    let mut out = SubspaceMetrics::default();
    let mut errors = Vec::new();
    if config.wants(Metric::SinTheta) {
        match exact_sin_theta(world, m) {
            Ok(v) => out.sin_theta = Some(v),
            Err(e) => errors.push(e),
        }
    }
    // The bound needs equal dimensions; its perturbation term doubles as the
    // operator distance.
    if config.wants(Metric::DavisKahan) && m.s() == world.s_true() {
        match model_davis_kahan(world, m) {
            Ok(dk) => {
                out.chat_cn = Some(dk.delta_hs);
                out.davis_kahan = Some(dk);
            }
            Err(e) => errors.push(e),
        }
    }
    if config.wants(Metric::ChatCn) {
        if out.chat_cn.is_none() {
            match model_chat_minus_cn(world, m) {
                Ok(v) => out.chat_cn = Some(v),
                Err(e) => errors.push(e),
            }
        }
    } else {
        out.chat_cn = None;
    }
    out.error = errors.first().map(ToString::to_string);
    out
}

#[derive(Debug, Clone, Default)]
struct Baselines {
    krr: Option<f64>,
    oracle: Option<f64>,
    error: Option<String>,
}

/// Target-only kernel ridge at the single-task optimal `λ`, and ridge in the
/// true subspace at the default `λ*`.
fn baselines(
    config: &ExperimentConfig,
    world: &SyntheticWorld,
    target: &kmeta::Result<(DMatrix<f64>, DVector<f64>)>,
    n_target: usize,
) -> Baselines {
    let run = || -> Result<(f64, f64)> {
        let (x, y) = target.as_ref().map_err(Clone::clone)?;
        let params = config.regularity_params()?;
        let krr_lambda = krr_optimal_lambda(&params, (n_target as f64).max(2.0))?;
        let krr = fit_krr(world.kernel(), x, y, krr_lambda)?;
        let krr_risk = excess_risk(world, |q| krr.predict(q), config.mc_samples, MC_SUBSEED)?;
        let star = default_lambda_star(world.s_true(), n_target, world.kernel().kappa_sq(), config.target.tau)?;
        let oracle = fit_target(world.true_subspace_model(1.0)?, x, y, star.value)?;
        let oracle_risk = excess_risk(world, |q| oracle.predict(q), config.mc_samples, MC_SUBSEED)?;
        Ok((krr_risk.value, oracle_risk.value))
    };
    match run() {
        Ok((krr, oracle)) => Baselines { krr: Some(krr), oracle: Some(oracle), error: None },
        Err(e) => Baselines { error: Some(e.to_string()), ..Baselines::default() },
    }
}
