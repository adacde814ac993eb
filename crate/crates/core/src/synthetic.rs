//! Synthetic ground-truth worlds whose shared subspace is spanned by kernel
//! sections `K(z_k, ·)` at a few anchor points, with closed-form oracles for
//! the quantities the estimators approximate.
//!
//! Randomness comes from ChaCha streams keyed by `(seed, stream)`, so each
//! task's samples are independent of the order in which tasks are drawn.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::numerics::{psqrt_and_pinvsqrt, subspace_sin_theta, svd, sym_eig};
use crate::pretrain::{assemble_jq, SubspaceModel, TaskData};
use crate::regression::{matrix_to_rows, rows_to_matrix, SplitTaskFit, TaskRegressor};

const MAX_ATTEMPTS: usize = 10;
const WORLD_STREAM: u64 = 0;
const TARGET_SLOT: u64 = 0xFFFF_FFFF;
const MC_SLOT: u64 = 0xFFFF_FFFE;

/// Shared input distribution, identical in every coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDist {
    UniformBox { low: f64, high: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl InputDist {
    fn validate(&self) -> Result<()> {
        match *self {
            InputDist::UniformBox { low, high } if low < high && low.is_finite() && high.is_finite() => Ok(()),
            InputDist::Gaussian { mean, std } if std > 0.0 && mean.is_finite() && std.is_finite() => Ok(()),
            _ => Err(Error::InvalidParameter(format!("invalid input distribution {self:?}"))),
        }
    }

    fn sample(&self, rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        match *self {
            InputDist::UniformBox { low, high } => DMatrix::from_fn(rows, dim, |_, _| rng.random_range(low..high)),
            InputDist::Gaussian { mean, std } => {
                let normal = Normal::new(mean, std).expect("validated");
                DMatrix::from_fn(rows, dim, |_, _| normal.sample(rng))
            }
        }
    }

    /// Largest Euclidean norm of a point in the support, if bounded.
    fn max_norm(&self, dim: usize) -> Option<f64> {
        match *self {
            InputDist::UniformBox { low, high } => Some(low.abs().max(high.abs()) * (dim as f64).sqrt()),
            InputDist::Gaussian { .. } => None,
        }
    }
}

/// Parameters of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub dim: usize,
    pub s_true: usize,
    pub n_tasks: usize,
    pub kernel: KernelSpec<f64>,
    pub input: InputDist,
    /// Half-width of the uniform label noise.
    pub sigma_y: f64,
    pub seed: u64,
    /// Standard deviation of the task coefficients.
    #[serde(default = "one")]
    pub coeff_scale: f64,
    /// Standard deviation of the target coefficients.
    #[serde(default = "one")]
    pub target_scale: f64,
}

fn one() -> f64 {
    1.0
}

/// Which task of a world to sample from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskId {
    Source(usize),
    Target,
}

/// Ground truth: `f_i = Σ_k C[i][k] K(z_k, ·)` and
/// `f_T = Σ_k target[k] K(z_k, ·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    kernel: KernelSpec<f64>,
    anchors: DMatrix<f64>,
    gram_z: DMatrix<f64>,
    gram_z_inv_sqrt: DMatrix<f64>,
    task_coeffs: DMatrix<f64>,
    target_coeffs: DVector<f64>,
    input: InputDist,
    sigma_y: f64,
    y_inf: f64,
    seed: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Draws anchors and coefficients, retrying while the anchor Gram matrix is
/// ill-conditioned or the task coefficients are rank deficient.
pub fn generate_world(config: &WorldConfig) -> Result<SyntheticWorld> {
    let WorldConfig { dim, s_true, n_tasks, .. } = *config;
    if dim == 0 || s_true == 0 {
        return Err(Error::InvalidParameter("dim and s_true must be >= 1".into()));
    }
    if n_tasks < s_true {
        return Err(Error::InvalidParameter(format!("need N >= s_true, got N = {n_tasks}, s_true = {s_true}")));
    }
    if !(config.sigma_y >= 0.0) || !(config.coeff_scale > 0.0) || !(config.target_scale >= 0.0) {
        return Err(Error::InvalidParameter("sigma_y, coeff_scale and target_scale must be non-negative".into()));
    }
    config.input.validate()?;
    if let KernelFamily::Polynomial { radius, .. } = config.kernel.family() {
        match config.input.max_norm(dim) {
            Some(r) if r <= *radius => {}
            _ => {
                return Err(Error::InvalidParameter(format!(
                    "input support must lie inside the polynomial kernel's radius {radius}"
                )))
            }
        }
    }
    let mut rng = stream_rng(config.seed, WORLD_STREAM);
    for _ in 0..MAX_ATTEMPTS {
        let anchors = config.input.sample(s_true, dim, &mut rng);
        let coeffs = normal_matrix(n_tasks, s_true, config.coeff_scale, &mut rng);
        let target = normal_matrix(s_true, 1, config.target_scale, &mut rng).column(0).into_owned();
        let gram_z = config.kernel.gram(&anchors)?;
        let eig = sym_eig(&gram_z)?;
        let top = eig.eigenvalues[0];
        if eig.eigenvalues[s_true - 1] < 1e-8 * top {
            continue;
        }
        let sv = svd(&coeffs)?.singular_values;
        if sv[s_true - 1] <= 1e-10 * sv[0] {
            continue;
        }
        return SyntheticWorld::assemble(
            config.kernel.clone(),
            anchors,
            coeffs,
            target,
            config.input,
            config.sigma_y,
            config.seed,
        );
    }
    Err(Error::Generation(format!("no well-posed world after {MAX_ATTEMPTS} attempts")))
}

impl SyntheticWorld {
    fn assemble(
        kernel: KernelSpec<f64>,
        anchors: DMatrix<f64>,
        task_coeffs: DMatrix<f64>,
        target_coeffs: DVector<f64>,
        input: InputDist,
        sigma_y: f64,
        seed: u64,
    ) -> Result<Self> {
        let s = anchors.nrows();
        if task_coeffs.ncols() != s {
            return Err(Error::DimensionMismatch { expected: s, found: task_coeffs.ncols() });
        }
        if target_coeffs.len() != s {
            return Err(Error::DimensionMismatch { expected: s, found: target_coeffs.len() });
        }
        let gram_z = kernel.gram(&anchors)?;
        let roots = psqrt_and_pinvsqrt(&gram_z, 1e-12)?;
        if roots.rank < s {
            return Err(Error::Generation("anchor Gram matrix is singular".into()));
        }
        let norm_sq = |c: &DVector<f64>| c.dot(&(&gram_z * c)).max(0.0);
        let max_norm = (0..task_coeffs.nrows())
            .map(|i| norm_sq(&task_coeffs.row(i).transpose()))
            .chain(std::iter::once(norm_sq(&target_coeffs)))
            .fold(0.0f64, f64::max)
            .sqrt();
        let y_inf = max_norm * kernel.kappa_sq().sqrt() + sigma_y;
        Ok(Self {
            kernel,
            anchors,
            gram_z,
            gram_z_inv_sqrt: roots.inv_sqrt,
            task_coeffs,
            target_coeffs,
            input,
            sigma_y,
            y_inf,
            seed,
        })
    }

    pub fn kernel(&self) -> &KernelSpec<f64> {
        &self.kernel
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn s_true(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn n_tasks(&self) -> usize {
        self.task_coeffs.nrows()
    }

    pub fn anchors(&self) -> &DMatrix<f64> {
        &self.anchors
    }

    pub fn gram_z(&self) -> &DMatrix<f64> {
        &self.gram_z
    }

    pub fn task_coeffs(&self) -> &DMatrix<f64> {
        &self.task_coeffs
    }

    pub fn target_coeffs(&self) -> &DVector<f64> {
        &self.target_coeffs
    }

    pub fn input(&self) -> InputDist {
        self.input
    }

    pub fn sigma_y(&self) -> f64 {
        self.sigma_y
    }

    /// `max ‖f‖_H·κ + σ_y` over all tasks, an almost-sure bound on `|Y|`.
    pub fn y_inf(&self) -> f64 {
        self.y_inf
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A copy with the target function replaced.
    pub fn with_target_coeffs(&self, target: DVector<f64>) -> Result<Self> {
        Self::assemble(
            self.kernel.clone(),
            self.anchors.clone(),
            self.task_coeffs.clone(),
            target,
            self.input,
            self.sigma_y,
            self.seed,
        )
    }

    fn coeffs(&self, task: TaskId) -> Result<DVector<f64>> {
        match task {
            TaskId::Source(i) if i < self.n_tasks() => Ok(self.task_coeffs.row(i).transpose()),
            TaskId::Source(i) => Err(Error::InvalidParameter(format!(
                "task index {i} out of range for {} tasks",
                self.n_tasks()
            ))),
            TaskId::Target => Ok(self.target_coeffs.clone()),
        }
    }

    /// True regression function of `task` at each row of `x`.
    pub fn eval_task(&self, task: TaskId, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.kernel.cross_gram(x, &self.anchors)? * self.coeffs(task)?)
    }

    /// `‖f‖²_H` for `task`.
    pub fn task_norm_sq(&self, task: TaskId) -> Result<f64> {
        let c = self.coeffs(task)?;
        Ok(c.dot(&(&self.gram_z * &c)))
    }

    /// Inputs from the shared distribution, drawn on a stream reserved for
    /// evaluation.
    pub fn sample_inputs(&self, m: usize, subseed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(self.seed, stream_id(subseed, MC_SLOT));
        self.input.sample(m, self.dim(), &mut rng)
    }

    /// `m` i.i.d. samples `(x, f(x) + ε)` of `task`, with `ε` uniform on
    /// `[−σ_y, σ_y]`.
    pub fn sample_task(&self, task: TaskId, m: usize, subseed: u64) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let slot = match task {
            TaskId::Source(i) => i as u64 + 1,
            TaskId::Target => TARGET_SLOT,
        };
        let mut rng = stream_rng(self.seed, stream_id(subseed, slot));
        let x = self.input.sample(m, self.dim(), &mut rng);
        let mut y = self.eval_task(task, &x)?;
        if self.sigma_y > 0.0 {
            for v in y.iter_mut() {
                *v += rng.random_range(-self.sigma_y..=self.sigma_y);
            }
        }
        Ok((x, y))
    }

    /// Datasets of `2n` samples for the first `n_tasks` source tasks.
    pub fn source_tasks(&self, n_tasks: usize, n: usize, subseed: u64) -> Result<Vec<TaskData<f64>>> {
        if n_tasks > self.n_tasks() {
            return Err(Error::InvalidParameter(format!(
                "requested {n_tasks} tasks from a world with {}",
                self.n_tasks()
            )));
        }
        (0..n_tasks)
            .into_par_iter()
            .map(|i| {
                let (x, y) = self.sample_task(TaskId::Source(i), 2 * n, subseed)?;
                TaskData::new(x, y)
            })
            .collect()
    }

    /// Section `K(z_k, ·)` as an expansion.
    pub fn anchor_section(&self, k: usize, lambda: f64) -> Result<TaskRegressor<f64>> {
        TaskRegressor::from_expansion(
            &self.kernel,
            self.anchors.rows(k, 1).into_owned(),
            DVector::from_element(1, 1.0),
            lambda,
        )
    }

    /// A subspace model whose span is exactly the true subspace: one
    /// pseudo-task per anchor with both halves equal to `K(z_k, ·)`, so that
    /// `J = Q = G_Z`.
    pub fn true_subspace_model(&self, lambda: f64) -> Result<SubspaceModel<f64>> {
        let fits = (0..self.s_true())
            .map(|k| {
                let section = self.anchor_section(k, lambda)?;
                Ok(SplitTaskFit { first_half: section.clone(), second_half: section })
            })
            .collect::<Result<Vec<_>>>()?;
        SubspaceModel::from_fits(fits, self.s_true(), 1e-12)
    }

    /// Nonzero eigenvalues `γ_1 ≥ … ≥ γ_s` of `C_N = (1/N) Σ_{i<N} f_i ⊗ f_i`.
    pub fn cn_eigenvalues(&self, n_tasks: usize) -> Result<DVector<f64>> {
        let c = self.first_coeffs(n_tasks)?;
        let roots = psqrt_and_pinvsqrt(&self.gram_z, 1e-12)?;
        let inner = &roots.sqrt * (c.transpose() * &c) * &roots.sqrt / n_tasks as f64;
        Ok(sym_eig(&inner)?.eigenvalues)
    }

    fn first_coeffs(&self, n_tasks: usize) -> Result<DMatrix<f64>> {
        if n_tasks == 0 || n_tasks > self.n_tasks() {
            return Err(Error::InvalidParameter(format!(
                "need 1 <= N <= {}, got {n_tasks}",
                self.n_tasks()
            )));
        }
        Ok(self.task_coeffs.rows(0, n_tasks).into_owned())
    }

    fn check_kernel(&self, k: &KernelSpec<f64>) -> Result<()> {
        if *k != self.kernel {
            return Err(Error::KernelMismatch(format!("{k} vs world kernel {}", self.kernel)));
        }
        Ok(())
    }
}

fn stream_id(subseed: u64, slot: u64) -> u64 {
    (subseed << 32) | (slot & 0xFFFF_FFFF)
}

/// `‖P̂⊥ P‖_HS` between the model's subspace and the true one.
pub fn exact_sin_theta(w: &SyntheticWorld, m: &SubspaceModel<f64>) -> Result<f64> {
    w.check_kernel(m.kernel())?;
    let n = m.num_tasks();
    let s = w.s_true();
    // Generating family: the model's N regressors followed by the s anchor
    // sections, with cross terms ⟨f̂_i, K(z_l, ·)⟩ = f̂_i(z_l).
    let cross = m.source_values(&w.anchors)?;
    let mut gram = DMatrix::zeros(n + s, n + s);
    gram.view_mut((0, 0), (n, n)).copy_from(m.j());
    gram.view_mut((n, 0), (s, n)).copy_from(&cross);
    gram.view_mut((0, n), (n, s)).copy_from(&cross.transpose());
    gram.view_mut((n, n), (s, s)).copy_from(&w.gram_z);
    let mut model = DMatrix::zeros(n + s, m.s());
    model.view_mut((0, 0), (n, m.s())).copy_from(m.beta());
    let mut truth = DMatrix::zeros(n + s, s);
    truth.view_mut((n, 0), (s, s)).copy_from(&w.gram_z_inv_sqrt);
    subspace_sin_theta(&gram, &model, &truth)
}

/// `‖Ĉ − C_N‖_HS` with `Ĉ = (1/N) Σ f̂′_i ⊗ f̂_i` over the given fits and
/// `C_N` over the first `N` world tasks.
pub fn exact_chat_minus_cn(w: &SyntheticWorld, fits: &[SplitTaskFit<f64>]) -> Result<f64> {
    for f in fits {
        w.check_kernel(f.second_half.kernel())?;
    }
    let (j, q) = assemble_jq(fits)?;
    let (first, second): (Vec<_>, Vec<_>) = fits.iter().map(|f| (&f.first_half, &f.second_half)).unzip();
    chat_minus_cn(w, &first, &second, &j, &q)
}

/// [`exact_chat_minus_cn`] for the fits a model was pretrained on, reusing
/// its `J` and `Q`.
pub fn model_chat_minus_cn(w: &SyntheticWorld, m: &SubspaceModel<f64>) -> Result<f64> {
    w.check_kernel(m.kernel())?;
    let first = m
        .first_halves()
        .ok_or_else(|| Error::InvalidParameter("model has no first-half regressors".into()))?;
    let first: Vec<_> = first.iter().collect();
    let second: Vec<_> = m.second_halves().iter().collect();
    chat_minus_cn(w, &first, &second, m.j(), m.q())
}

fn chat_minus_cn(
    w: &SyntheticWorld,
    first: &[&TaskRegressor<f64>],
    second: &[&TaskRegressor<f64>],
    j: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<f64> {
    let n = second.len();
    let c = w.first_coeffs(n)?;
    let first_z = anchor_values(w, first)?;
    let second_z = anchor_values(w, second)?;
    let nn = (n * n) as f64;
    let chat_sq = q.component_mul(j).sum() / nn;
    let cross = (&first_z * c.transpose()).component_mul(&(&second_z * c.transpose())).sum() / nn;
    let truth = &c * &w.gram_z * c.transpose();
    let cn_sq = truth.norm_squared() / nn;
    Ok((chat_sq - 2.0 * cross + cn_sq).max(0.0).sqrt())
}

/// `f̂_i(z_k)` as an `N×s` matrix.
fn anchor_values(w: &SyntheticWorld, fs: &[&TaskRegressor<f64>]) -> Result<DMatrix<f64>> {
    let rows = fs.par_iter().map(|f| f.predict(&w.anchors)).collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(fs.len(), w.s_true(), |i, k| rows[i][k]))
}

/// Monte-Carlo estimate of an `L²` distance with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_err: f64,
}

const MC_CHUNK: usize = 4096;

/// `‖predictor − f_T‖_{L²(μ)}` from `mc_samples` fresh inputs. The standard
/// error is propagated from the mean squared error through the square root.
pub fn excess_risk<F>(w: &SyntheticWorld, predictor: F, mc_samples: usize, subseed: u64) -> Result<RiskEstimate>
where
    F: Fn(&DMatrix<f64>) -> Result<DVector<f64>>,
{
    if mc_samples == 0 {
        return Err(Error::InvalidParameter("mc_samples must be >= 1".into()));
    }
    let x = w.sample_inputs(mc_samples, subseed);
    let mut sq = Vec::with_capacity(mc_samples);
    let mut at = 0;
    while at < mc_samples {
        let len = MC_CHUNK.min(mc_samples - at);
        let chunk = x.rows(at, len).into_owned();
        let pred = predictor(&chunk)?;
        if pred.len() != len {
            return Err(Error::DimensionMismatch { expected: len, found: pred.len() });
        }
        let truth = w.eval_task(TaskId::Target, &chunk)?;
        sq.extend(pred.iter().zip(truth.iter()).map(|(p, t)| (p - t) * (p - t)));
        at += len;
    }
    let m = mc_samples as f64;
    let mean = sq.iter().sum::<f64>() / m;
    let var = if mc_samples > 1 {
        sq.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let value = mean.sqrt();
    let se_mean = (var / m).sqrt();
    let std_err = if value > 0.0 { se_mean / (2.0 * value) } else { se_mean.sqrt() };
    Ok(RiskEstimate { value, std_err })
}

/// Both sides of the Davis–Kahan bound for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DavisKahan {
    /// `‖P̂⊥ P‖_HS`
    pub lhs: f64,
    /// `2γ_s⁻²(2γ_1 + ‖Δ‖_HS)‖Δ‖_HS`
    pub rhs: f64,
    pub holds: bool,
    pub gamma_1: f64,
    pub gamma_s: f64,
    /// `‖Ĉ − C_N‖_HS`
    pub delta_hs: f64,
}

/// Checks the sin-Θ bound for a model pretrained on `fits`.
pub fn davis_kahan_check(w: &SyntheticWorld, m: &SubspaceModel<f64>, fits: &[SplitTaskFit<f64>]) -> Result<DavisKahan> {
    if m.num_tasks() != fits.len() {
        return Err(Error::DimensionMismatch { expected: m.num_tasks(), found: fits.len() });
    }
    let (gamma_1, gamma_s) = cn_gammas(w, m)?;
    let delta = exact_chat_minus_cn(w, fits)?;
    davis_kahan_from(w, m, gamma_1, gamma_s, delta)
}

/// [`davis_kahan_check`] against the fits stored in the model.
pub fn model_davis_kahan(w: &SyntheticWorld, m: &SubspaceModel<f64>) -> Result<DavisKahan> {
    let (gamma_1, gamma_s) = cn_gammas(w, m)?;
    let delta = model_chat_minus_cn(w, m)?;
    davis_kahan_from(w, m, gamma_1, gamma_s, delta)
}

fn cn_gammas(w: &SyntheticWorld, m: &SubspaceModel<f64>) -> Result<(f64, f64)> {
    let s = w.s_true();
    if m.s() != s {
        return Err(Error::InvalidParameter(format!(
            "bound compares subspaces of equal dimension, got s = {} and s_true = {s}",
            m.s()
        )));
    }
    let gammas = w.cn_eigenvalues(m.num_tasks())?;
    let gamma_1 = gammas[0];
    let gamma_s = gammas[s - 1];
    if !(gamma_s > 1e-12 * gamma_1) {
        let achieved = gammas.iter().filter(|&&g| g > 1e-12 * gamma_1).count();
        return Err(Error::RankDeficient { requested: s, achieved });
    }
    Ok((gamma_1, gamma_s))
}

fn davis_kahan_from(w: &SyntheticWorld, m: &SubspaceModel<f64>, gamma_1: f64, gamma_s: f64, delta: f64) -> Result<DavisKahan> {
    let lhs = exact_sin_theta(w, m)?;
    let rhs = 2.0 / (gamma_s * gamma_s) * (2.0 * gamma_1 + delta) * delta;
    Ok(DavisKahan { lhs, rhs, holds: lhs <= rhs + 1e-10, gamma_1, gamma_s, delta_hs: delta })
}

/// Seed-to-seed spread of `Ĉ` around its empirical mean, and the distance of
/// that mean from `C_N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    /// `sqrt(mean_r ‖Ĉ_r − mean(Ĉ)‖²_HS)`
    pub variance: f64,
    /// `‖mean(Ĉ) − C_N‖_HS`
    pub bias: f64,
}

/// Bias and variance proxies over repeated fits of the same `N` world tasks
/// (one entry of `runs` per resampling).
pub fn bias_variance(w: &SyntheticWorld, runs: &[Vec<SplitTaskFit<f64>>]) -> Result<BiasVariance> {
    let r = runs.len();
    if r < 2 {
        return Err(Error::InsufficientData("need at least two runs".into()));
    }
    let n = runs[0].len();
    if runs.iter().any(|run| run.len() != n) {
        return Err(Error::InvalidParameter("runs must share the task count".into()));
    }
    let c = w.first_coeffs(n)?;
    let nn = (n * n) as f64;
    let pairs: Vec<(usize, usize)> = (0..r).flat_map(|a| (0..=a).map(move |b| (a, b))).collect();
    let inner = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut acc = 0.0;
            for fa in &runs[a] {
                for fb in &runs[b] {
                    let first = crate::regression::rkhs_inner(&fa.first_half, &fb.first_half)?;
                    let second = crate::regression::rkhs_inner(&fa.second_half, &fb.second_half)?;
                    acc += first * second;
                }
            }
            Ok(acc / nn)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut gram = DMatrix::zeros(r, r);
    for (&(a, b), &v) in pairs.iter().zip(&inner) {
        gram[(a, b)] = v;
        gram[(b, a)] = v;
    }
    let with_truth = runs
        .iter()
        .map(|run| {
            let first: Vec<_> = run.iter().map(|f| &f.first_half).collect();
            let second: Vec<_> = run.iter().map(|f| &f.second_half).collect();
            let (first_z, second_z) = (anchor_values(w, &first)?, anchor_values(w, &second)?);
            Ok((&first_z * c.transpose()).component_mul(&(&second_z * c.transpose())).sum() / nn)
        })
        .collect::<Result<Vec<f64>>>()?;
    let truth = &c * &w.gram_z * c.transpose();
    let cn_sq = truth.norm_squared() / nn;
    let rf = r as f64;
    let mean_sq = gram.sum() / (rf * rf);
    let variance = (gram.trace() / rf - mean_sq).max(0.0).sqrt();
    let bias = (mean_sq - 2.0 * with_truth.iter().sum::<f64>() / rf + cn_sq).max(0.0).sqrt();
    Ok(BiasVariance { variance, bias })
}

const WORLD_FORMAT: &str = "kmeta.world";
const WORLD_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct WorldRecord {
    format: String,
    version: u32,
    kernel: KernelSpec<f64>,
    #[serde(rename = "anchors_Z")]
    anchors: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    task_coeffs: Vec<Vec<f64>>,
    target_coeffs: Vec<f64>,
    dist: InputDist,
    sigma_y: f64,
    seed: u64,
    y_inf: f64,
}

impl Serialize for SyntheticWorld {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        WorldRecord {
            format: WORLD_FORMAT.into(),
            version: WORLD_VERSION,
            kernel: self.kernel.clone(),
            anchors: matrix_to_rows(&self.anchors),
            task_coeffs: matrix_to_rows(&self.task_coeffs),
            target_coeffs: self.target_coeffs.as_slice().to_vec(),
            dist: self.input,
            sigma_y: self.sigma_y,
            seed: self.seed,
            y_inf: self.y_inf,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for SyntheticWorld {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let rec = WorldRecord::deserialize(d)?;
        if rec.format != WORLD_FORMAT || rec.version != WORLD_VERSION {
            return Err(D::Error::custom(format!("unsupported world format {} v{}", rec.format, rec.version)));
        }
        let build = || -> Result<SyntheticWorld> {
            let anchors = rows_to_matrix(&rec.anchors, 0)?;
            let coeffs = rows_to_matrix(&rec.task_coeffs, anchors.nrows())?;
            rec.dist.validate()?;
            SyntheticWorld::assemble(
                rec.kernel.clone(),
                anchors,
                coeffs,
                DVector::from_vec(rec.target_coeffs.clone()),
                rec.dist,
                rec.sigma_y,
                rec.seed,
            )
        };
        build().map_err(D::Error::custom)
    }
}
