//! Linear-Gaussian toy world: a point mass seen only through a noisy
//! high-dimensional projection of its latent state, plus the recovery,
//! reward-model and planning pipeline used to compare `V(ẑ)` against
//! `V(ẑ, ẑ_R)`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{self, Task, WorldState};
use crate::nets::layers::Linear;
use crate::numerics::{Adam, AdamConfig, Graph, Module, Rng, Tensor};

/// Agent position.
pub const AGENT_DIMS: usize = 2;
/// Goal, obstacle position and obstacle size.
pub const ENV_DIMS: usize = 5;
pub const LATENT_DIMS: usize = AGENT_DIMS + ENV_DIMS;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("reward model diverged: {0}")]
    Diverged(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, ToyError>;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ToyError::Config(msg.into()))
}

/// Noise scales and the two projections. The means `μ_R`, `μ_E` come from
/// a [`ToyState`] at sampling time.
#[derive(Clone, Debug)]
pub struct ToyWorldSpec {
    pub sigma_r: f64,
    pub sigma_e: f64,
    pub eps_scale: f64,
    /// `d_obs × 7`, orthonormal columns.
    pub q: DMatrix<f64>,
    /// `d_R × 2`, orthonormal columns.
    pub q2: DMatrix<f64>,
}

/// Random matrix with orthonormal columns (thin QR of a Gaussian matrix).
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in {rows} dims");
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.normal());
    g.qr().q()
}

impl ToyWorldSpec {
    pub fn new(sigma_r: f64, sigma_e: f64, eps_scale: f64, d_obs: usize, d_r: usize, rng: &mut Rng) -> Result<Self> {
        if d_obs < LATENT_DIMS || d_r < AGENT_DIMS {
            return config_err(format!("need d_obs >= {LATENT_DIMS} and d_R >= {AGENT_DIMS}"));
        }
        let spec = Self {
            sigma_r,
            sigma_e,
            eps_scale,
            q: random_orthonormal(d_obs, LATENT_DIMS, rng),
            q2: random_orthonormal(d_r, AGENT_DIMS, rng),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn d_obs(&self) -> usize {
        self.q.nrows()
    }

    pub fn d_r(&self) -> usize {
        self.q2.nrows()
    }

    /// Noise scales must be non-negative (zero is allowed for oracle checks)
    /// and both projections isometric.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_R", self.sigma_r),
            ("sigma_E", self.sigma_e),
            ("eps_scale", self.eps_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config_err(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        for (name, m, cols) in [("Q", &self.q, LATENT_DIMS), ("Q2", &self.q2, AGENT_DIMS)] {
            if m.ncols() != cols {
                return config_err(format!("{name} needs {cols} columns, has {}", m.ncols()));
            }
            let err = (m.transpose() * m - DMatrix::identity(cols, cols)).amax();
            if err > 1e-10 {
                return config_err(format!("{name} columns are not orthonormal (max error {err:.2e})"));
            }
        }
        Ok(())
    }
}

/// Ground-truth world state of one episode step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub agent: [f64; 2],
    pub goal: [f64; 2],
    pub obstacle: [f64; 2],
    pub radius: f64,
}

impl ToyState {
    /// Start configuration drawn exactly like the obstacle-reach env.
    pub fn sample(rng: &mut Rng) -> Result<Self> {
        let w = envs::sample_state(Task::ReachObstacle, rng).map_err(|e| ToyError::Config(e.to_string()))?;
        Ok(Self {
            agent: w.agent_pos,
            goal: w.goal_pos,
            obstacle: w.obstacle_pos,
            radius: w.obstacle_radius,
        })
    }

    /// `concat(μ_R, μ_E)`.
    pub fn mean_latent(&self) -> DVector<f64> {
        DVector::from_column_slice(&[
            self.agent[0],
            self.agent[1],
            self.goal[0],
            self.goal[1],
            self.obstacle[0],
            self.obstacle[1],
            self.radius,
        ])
    }

    /// Attraction minus obstacle repulsion, shared with the visual env.
    pub fn reward(&self) -> f64 {
        let w = WorldState {
            agent_pos: self.agent,
            agent_vel: [0.0; 2],
            goal_pos: self.goal,
            obstacle_pos: self.obstacle,
            obstacle_radius: self.radius,
            object_pos: None,
            time_step: 0,
        };
        envs::reward(&w, Task::ReachObstacle, false)
    }

    pub fn goal_distance(&self) -> f64 {
        (self.agent[0] - self.goal[0]).hypot(self.agent[1] - self.goal[1])
    }

    /// Point-mass move: `p ← clamp(p + step·clamp(a))` inside the unit square.
    pub fn advance(&mut self, action: [f64; 2], step: f64) {
        for k in 0..2 {
            self.agent[k] = (self.agent[k] + step * action[k].clamp(-1.0, 1.0)).clamp(0.0, 1.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyObservation {
    pub x: DVector<f64>,
    pub x_r: DVector<f64>,
    /// The sampled latent `z = concat(z_R, z_E)`.
    pub z: DVector<f64>,
}

/// `z ~ N(μ, diag(σ_R²·I, σ_E²·I))`, `X = Q·z + ε_scale·ε` and `X_R = Q2·z_R`.
pub fn sample_observation(spec: &ToyWorldSpec, state: &ToyState, rng: &mut Rng) -> ToyObservation {
    let mu = state.mean_latent();
    let z = DVector::from_fn(LATENT_DIMS, |i, _| {
        let s = if i < AGENT_DIMS { spec.sigma_r } else { spec.sigma_e };
        mu[i] + s * rng.normal()
    });
    let eps = DVector::from_fn(spec.d_obs(), |_, _| spec.eps_scale * rng.normal());
    let x = &spec.q * &z + eps;
    let x_r = &spec.q2 * z.rows(0, AGENT_DIMS);
    ToyObservation { x, x_r, z }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryMode {
    /// Truncated PCA of `X` only.
    Joint,
    /// PCA of `X` plus a rank-2 map from `X` onto the agent observation.
    Split,
}

/// Linear recovery maps `ẑ(X)` and, in split mode, `ẑ_R(X)`.
#[derive(Clone, Debug)]
pub struct Recovery {
    pub mean: DVector<f64>,
    /// `k × d_obs`, orthonormal rows sorted by explained variance.
    pub components: DMatrix<f64>,
    /// Explained variance of each retained component.
    pub variances: Vec<f64>,
    /// `2 × d_obs` agent map (split mode).
    pub agent_map: Option<DMatrix<f64>>,
    /// Mean squared reconstruction error of `X` per sample.
    pub recon_error: f64,
    /// Mean squared reconstruction error of `X_R` per sample (split mode).
    pub agent_recon_error: Option<f64>,
    pub warnings: Vec<String>,
}

fn stack_rows(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let d = rows[0].len();
    DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c])
}

fn center(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean = DVector::from_fn(m.ncols(), |c, _| m.column(c).sum() / n);
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        row -= mean.transpose();
    }
    (out, mean)
}

/// Fits `k` principal components of `xs`; split mode also fits the agent
/// map from `xs` to `x_rs`.
pub fn fit_latents(xs: &[DVector<f64>], x_rs: &[DVector<f64>], k: usize, mode: RecoveryMode) -> Result<Recovery> {
    if k == 0 {
        return config_err("need at least one component");
    }
    let need = 10 * (k + if mode == RecoveryMode::Split { AGENT_DIMS } else { 0 });
    if xs.len() < need {
        return config_err(format!("{} samples is fewer than the {need} required", xs.len()));
    }
    if mode == RecoveryMode::Split && x_rs.len() != xs.len() {
        return config_err(format!("{} agent observations for {} samples", x_rs.len(), xs.len()));
    }
    let (xc, mean) = center(&stack_rows(xs));
    let n = xc.nrows() as f64;
    let d = xc.ncols();
    if k > d {
        return config_err(format!("k = {k} exceeds the observation dimension {d}"));
    }
    let cov = xc.transpose() * &xc / n;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let variances: Vec<f64> = order[..k].iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let components = DMatrix::from_fn(k, d, |r, c| eig.eigenvectors[(c, order[r])]);
    let mut warnings = Vec::new();
    if variances[k - 1] <= 1e-12 * variances[0].max(f64::MIN_POSITIVE) {
        warnings.push(format!(
            "data is rank deficient: component {k} explains {:.3e} of variance",
            variances[k - 1]
        ));
    }
    let scores = &xc * components.transpose();
    let recon_error = (&xc - &scores * &components).norm_squared() / n;

    let (agent_map, agent_recon_error) = match mode {
        RecoveryMode::Joint => (None, None),
        RecoveryMode::Split => {
            let (yc, _) = center(&stack_rows(x_rs));
            let (map, err) = reduced_rank_map(&xc, &yc, AGENT_DIMS)?;
            (Some(map), Some(err))
        }
    };
    Ok(Recovery {
        mean,
        components,
        variances,
        agent_map,
        recon_error,
        agent_recon_error,
        warnings,
    })
}

/// Rank-`r` regression of centred `y` on centred `x`. Returns the
/// `r × d_x` encoder `(B·V_r)ᵀ` and the mean squared residual per sample.
fn reduced_rank_map(x: &DMatrix<f64>, y: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, f64)> {
    let n = x.nrows() as f64;
    let tol = 1e-10 * x.amax().max(1.0);
    let b = x
        .clone()
        .svd(true, true)
        .solve(y, tol)
        .map_err(|e| ToyError::Numeric(format!("least squares failed: {e}")))?;
    let fitted = x * &b;
    let svd = fitted.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| ToyError::Numeric("SVD returned no right vectors".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let v_r = DMatrix::from_fn(y.ncols(), r, |row, c| v_t[(order[c], row)]);
    let encoder = (&b * &v_r).transpose();
    let residual = (y - x * encoder.transpose() * v_r.transpose()).norm_squared() / n;
    Ok((encoder, residual))
}

impl Recovery {
    pub fn latent_dim(&self) -> usize {
        self.components.nrows()
    }

    /// `ẑ(X)`.
    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.components * (x - &self.mean)
    }

    /// `ẑ_R(X)`, split mode only.
    pub fn encode_agent(&self, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.agent_map.as_ref().map(|a| a * (x - &self.mean))
    }

    /// `ẑ`, or `concat(ẑ, ẑ_R)` with `with_agent`.
    pub fn features(&self, x: &DVector<f64>, with_agent: bool) -> Vec<f64> {
        let mut f: Vec<f64> = self.encode(x).iter().copied().collect();
        if with_agent {
            let za = self.encode_agent(x).expect("agent features need a split-mode fit");
            f.extend(za.iter());
        }
        f
    }
}

/// Principal angles (radians, ascending) between the column spaces of `a`
/// and `b`.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let mut s: Vec<f64> = (qa.transpose() * qb).singular_values().iter().copied().collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s.into_iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RewardFlavor {
    /// Least squares on `[1, f, f_i·f_j (i ≤ j)]`. `ridge` is relative to
    /// the mean feature energy; it keeps near-collinear features (ẑ_R is
    /// almost inside span(ẑ) when noise vanishes) from getting huge weights.
    Quadratic { ridge: f64 },
    /// One-hidden-layer tanh network trained with Adam until the validation
    /// loss stops improving.
    Mlp { hidden: usize },
}

/// Builds `[1, f, f_i·f_j for i ≤ j]`.
pub fn quadratic_features(f: &[f64]) -> Vec<f64> {
    let d = f.len();
    let mut out = Vec::with_capacity(1 + d + d * (d + 1) / 2);
    out.push(1.0);
    out.extend_from_slice(f);
    for i in 0..d {
        for j in i..d {
            out.push(f[i] * f[j]);
        }
    }
    out
}

#[derive(Clone, Debug)]
struct RewardMlp {
    hidden: Linear<f64>,
    out: Linear<f64>,
}

impl Module<f64> for RewardMlp {
    fn params(&self) -> Vec<(String, &Tensor<f64>)> {
        crate::numerics::prefixed("hidden", self.hidden.params())
            .into_iter()
            .chain(crate::numerics::prefixed("out", self.out.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<f64>> {
        let mut p = self.hidden.params_mut();
        p.extend(self.out.params_mut());
        p
    }
}

impl RewardMlp {
    fn forward(
        &self,
        g: &mut Graph<f64>,
        inputs: &[f64],
        rows: usize,
    ) -> crate::numerics::Result<crate::numerics::Var> {
        let x = g.constant(Tensor::new(vec![rows, inputs.len() / rows], inputs.to_vec())?);
        let h = self.hidden.forward(g, x)?;
        let h = g.tanh(h);
        self.out.forward(g, h)
    }
}

/// A fitted `V(features)`.
#[derive(Clone, Debug)]
pub enum RewardModel {
    Quadratic { dim: usize, coef: DVector<f64> },
    Mlp { dim: usize, net: Box<RewardMlpModel> },
}

/// Opaque trained network of the MLP flavor.
#[derive(Clone, Debug)]
pub struct RewardMlpModel(RewardMlp);

impl RewardModel {
    pub fn input_dim(&self) -> usize {
        match self {
            Self::Quadratic { dim, .. } | Self::Mlp { dim, .. } => *dim,
        }
    }

    pub fn predict(&self, f: &[f64]) -> f64 {
        assert_eq!(f.len(), self.input_dim(), "reward model input size");
        match self {
            Self::Quadratic { coef, .. } => quadratic_features(f).iter().zip(coef.iter()).map(|(a, b)| a * b).sum(),
            Self::Mlp { net, .. } => {
                let mut g = Graph::inference();
                let y = net.0.forward(&mut g, f, 1).expect("shapes fixed at fit time");
                g.scalar(y)
            }
        }
    }

    /// Eigenvalues of the symmetric quadratic form restricted to
    /// `f[..split]` and to `f[split..]`, each sorted by magnitude.
    pub fn quadratic_spectra(&self, split: usize) -> Option<(Vec<f64>, Vec<f64>)> {
        let Self::Quadratic { dim, coef } = self else {
            return None;
        };
        let d = *dim;
        let mut h = DMatrix::zeros(d, d);
        let mut idx = 1 + d;
        for i in 0..d {
            for j in i..d {
                if i == j {
                    h[(i, i)] = coef[idx];
                } else {
                    h[(i, j)] = coef[idx] / 2.0;
                    h[(j, i)] = coef[idx] / 2.0;
                }
                idx += 1;
            }
        }
        let spectrum = |m: DMatrix<f64>| {
            let mut e: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
            e.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
            e
        };
        let a = spectrum(h.view((0, 0), (split, split)).into_owned());
        let b = spectrum(h.view((split, split), (d - split, d - split)).into_owned());
        Some((a, b))
    }
}

#[derive(Clone, Debug)]
pub struct RewardFit {
    pub model: RewardModel,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Validation evaluations performed (1 for the closed-form flavor).
    pub evaluations: usize,
}

/// Evaluations without improvement that end MLP training.
pub const PLATEAU_EVALS: usize = 10;
const MLP_STEPS_PER_EVAL: usize = 25;
const MLP_MAX_EVALS: usize = 400;

fn mse(model: &RewardModel, fs: &[Vec<f64>], ys: &[f64]) -> f64 {
    if fs.is_empty() {
        return 0.0;
    }
    fs.iter()
        .zip(ys)
        .map(|(f, y)| (model.predict(f) - y).powi(2))
        .sum::<f64>()
        / fs.len() as f64
}

/// Regresses rewards on features. A shuffled fifth of the data is held out
/// for validation.
pub fn fit_reward_model(
    features: &[Vec<f64>],
    rewards: &[f64],
    flavor: RewardFlavor,
    rng: &mut Rng,
) -> Result<RewardFit> {
    if features.len() != rewards.len() || features.len() < 5 {
        return config_err(format!(
            "need >= 5 paired samples, got {} / {}",
            features.len(),
            rewards.len()
        ));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return config_err("feature vectors differ in length");
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let n_val = features.len() / 5;
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<f64>) {
        (
            idx.iter().map(|&i| features[i].clone()).collect(),
            idx.iter().map(|&i| rewards[i]).collect(),
        )
    };
    let (tf, ty) = pick(train_idx);
    let (vf, vy) = pick(val_idx);

    match flavor {
        RewardFlavor::Quadratic { ridge } => {
            if !(ridge >= 0.0) {
                return config_err(format!("ridge must be non-negative, got {ridge}"));
            }
            let rows: Vec<DVector<f64>> = tf.iter().map(|f| DVector::from_vec(quadratic_features(f))).collect();
            let mut a = stack_rows(&rows);
            let mut y = DVector::from_column_slice(&ty);
            if ridge > 0.0 {
                // Augmented rows √λ·I penalise every weight except the bias.
                let (n, p) = a.shape();
                let lambda = ridge * a.norm_squared() / p as f64;
                a = a.resize_vertically(n + p - 1, 0.0);
                y = y.resize_vertically(n + p - 1, 0.0);
                for j in 1..p {
                    a[(n + j - 1, j)] = lambda.sqrt();
                }
            }
            let tol = 1e-10 * a.amax().max(1.0);
            let coef = a
                .svd(true, true)
                .solve(&y, tol)
                .map_err(|e| ToyError::Numeric(format!("least squares failed: {e}")))?;
            let model = RewardModel::Quadratic { dim, coef };
            Ok(RewardFit {
                train_mse: mse(&model, &tf, &ty),
                val_mse: mse(&model, &vf, &vy),
                model,
                evaluations: 1,
            })
        }
        RewardFlavor::Mlp { hidden } => fit_mlp(dim, hidden, (&tf, &ty), (&vf, &vy), rng),
    }
}

fn fit_mlp(
    dim: usize,
    hidden: usize,
    (tf, ty): (&[Vec<f64>], &[f64]),
    (vf, vy): (&[Vec<f64>], &[f64]),
    rng: &mut Rng,
) -> Result<RewardFit> {
    if hidden == 0 {
        return config_err("MLP reward model needs a hidden layer");
    }
    let num = |e: crate::numerics::NumericsError| ToyError::Numeric(e.to_string());
    let mut net = RewardMlp {
        hidden: Linear::new(dim, hidden, 1.0, rng),
        out: Linear::new(hidden, 1, 1.0, rng),
    };
    let mut adam = Adam::new(AdamConfig::with_lr(3e-3));
    let inputs: Vec<f64> = tf.iter().flatten().copied().collect();
    let targets = Tensor::new(vec![ty.len(), 1], ty.to_vec()).map_err(num)?;
    let wrap = |net: &RewardMlp| RewardModel::Mlp {
        dim,
        net: Box::new(RewardMlpModel(net.clone())),
    };
    let (mut best, mut best_net, mut stale, mut evals) = (f64::INFINITY, net.clone(), 0, 0);
    while stale < PLATEAU_EVALS && evals < MLP_MAX_EVALS {
        for _ in 0..MLP_STEPS_PER_EVAL {
            let mut g = Graph::new();
            let y = net.forward(&mut g, &inputs, ty.len()).map_err(num)?;
            let loss = g.mse(y, &targets).map_err(num)?;
            g.backward(loss)
                .map_err(|e| ToyError::Diverged(format!("after {evals} evaluations: {e}")))?;
            for p in net.params_mut() {
                let grad = g.param_grad(p).map(<[f64]>::to_vec);
                p.grad = grad;
            }
            adam.step_module(&mut net).map_err(num)?;
        }
        evals += 1;
        let val = mse(&wrap(&net), vf, vy);
        if !val.is_finite() {
            return Err(ToyError::Diverged(format!(
                "validation loss {val} after {evals} evaluations"
            )));
        }
        if val < best - 1e-12 {
            (best, best_net, stale) = (val, net.clone(), 0);
        } else {
            stale += 1;
        }
    }
    let model = wrap(&best_net);
    Ok(RewardFit {
        train_mse: mse(&model, tf, ty),
        val_mse: best,
        model,
        evaluations: evals,
    })
}

/// Latent-space point mass: `f' = f + B·a`.
#[derive(Clone, Debug)]
pub struct LatentDynamics {
    pub b: DMatrix<f64>,
}

impl LatentDynamics {
    /// Least squares over consecutive `(f_t, a_t, f_{t+1})` triples.
    pub fn fit(deltas: &[Vec<f64>], actions: &[[f64; 2]]) -> Result<Self> {
        if deltas.len() != actions.len() || deltas.len() < 2 {
            return config_err("need at least two (delta, action) pairs");
        }
        let a = DMatrix::from_fn(actions.len(), 2, |r, c| actions[r][c]);
        let dv: Vec<DVector<f64>> = deltas.iter().map(|d| DVector::from_column_slice(d)).collect();
        let y = stack_rows(&dv);
        let bt = a
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| ToyError::Numeric(format!("least squares failed: {e}")))?;
        Ok(Self { b: bt.transpose() })
    }

    pub fn step(&self, f: &mut [f64], a: [f64; 2]) {
        for (i, v) in f.iter_mut().enumerate() {
            *v += self.b[(i, 0)] * a[0] + self.b[(i, 1)] * a[1];
        }
    }
}

/// Random shooting: `candidates` sequences uniform in `[-1, 1]^(horizon×2)`
/// are rolled through `step` and scored by summed `reward` after each
/// action. Returns the first action of the best sequence (lowest index on
/// ties).
pub fn mpc_plan<S: Clone>(
    reward: impl Fn(&S) -> f64,
    step: impl Fn(&mut S, [f64; 2]),
    start: &S,
    horizon: usize,
    candidates: usize,
    rng: &mut Rng,
) -> Result<[f64; 2]> {
    if horizon == 0 || candidates == 0 {
        return config_err("horizon and candidates must be at least 1");
    }
    let mut best = (f64::NEG_INFINITY, [0.0; 2]);
    for c in 0..candidates {
        let mut s = start.clone();
        let mut total = 0.0;
        let mut first = [0.0; 2];
        for h in 0..horizon {
            let a = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            if h == 0 {
                first = a;
            }
            step(&mut s, a);
            total += reward(&s);
        }
        if c == 0 || total > best.0 {
            best = (total, first);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub d_obs: usize,
    pub d_r: usize,
    pub eps_scale: f64,
    /// Principal components kept for `ẑ`; one fewer than the true latent
    /// size, so the lowest-variance direction is lost.
    pub k: usize,
    pub data_episodes: usize,
    pub episode_len: usize,
    pub step_size: f64,
    pub horizon: usize,
    pub candidates: usize,
    pub eval_episodes: usize,
    pub flavor: RewardFlavor,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_obs: 64,
            d_r: 16,
            eps_scale: 0.05,
            k: 6,
            data_episodes: 200,
            episode_len: 40,
            step_size: 0.05,
            horizon: 10,
            candidates: 256,
            eval_episodes: 30,
            flavor: RewardFlavor::Quadratic { ridge: 1e-6 },
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.d_obs {
            return config_err(format!("k must lie in 1..={}", self.d_obs));
        }
        if self.data_episodes == 0 || self.episode_len < 2 || self.eval_episodes == 0 {
            return config_err("episode counts and lengths must be positive");
        }
        if !(self.step_size > 0.0) {
            return config_err("step_size must be positive");
        }
        Ok(())
    }
}

/// One `(σ_R, σ_E)` row of the comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Condition {
    pub label: &'static str,
    pub sigma_r: f64,
    pub sigma_e: f64,
}

pub const CONDITIONS: [Condition; 3] = [
    Condition {
        label: "sigma_E > sigma_R",
        sigma_r: 0.05,
        sigma_e: 0.5,
    },
    Condition {
        label: "sigma_E = sigma_R",
        sigma_r: 0.2,
        sigma_e: 0.2,
    },
    Condition {
        label: "sigma_E < sigma_R",
        sigma_r: 0.5,
        sigma_e: 0.05,
    },
];

/// Everything learned from the random-action data of one seed.
#[derive(Clone, Debug)]
pub struct ToyModels {
    pub spec: ToyWorldSpec,
    pub recovery: Recovery,
    pub baseline: RewardFit,
    pub sear: RewardFit,
    pub baseline_dynamics: LatentDynamics,
    pub sear_dynamics: LatentDynamics,
}

/// Collects random-action data and fits both pipelines.
pub fn fit_models(cfg: &ToyConfig, sigma_r: f64, sigma_e: f64, seed: u64) -> Result<ToyModels> {
    cfg.validate()?;
    let root = Rng::new(seed).split("toy");
    let spec = ToyWorldSpec::new(
        sigma_r,
        sigma_e,
        cfg.eps_scale,
        cfg.d_obs,
        cfg.d_r,
        &mut root.split("projection"),
    )?;
    let mut rng = root.split("data");
    let mut episodes = Vec::with_capacity(cfg.data_episodes);
    for _ in 0..cfg.data_episodes {
        let mut state = ToyState::sample(&mut rng)?;
        let mut steps = Vec::with_capacity(cfg.episode_len);
        for _ in 0..cfg.episode_len {
            let obs = sample_observation(&spec, &state, &mut rng);
            let action = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            steps.push((obs, state.reward(), action));
            state.advance(action, cfg.step_size);
        }
        episodes.push(steps);
    }
    let xs: Vec<DVector<f64>> = episodes.iter().flatten().map(|(o, _, _)| o.x.clone()).collect();
    let x_rs: Vec<DVector<f64>> = episodes.iter().flatten().map(|(o, _, _)| o.x_r.clone()).collect();
    let rewards: Vec<f64> = episodes.iter().flatten().map(|s| s.1).collect();
    let recovery = fit_latents(&xs, &x_rs, cfg.k, RecoveryMode::Split)?;

    let fit = |with_agent: bool| -> Result<(RewardFit, LatentDynamics)> {
        let feats: Vec<Vec<f64>> = xs.iter().map(|x| recovery.features(x, with_agent)).collect();
        // One split stream for both flavors, so they see the same held-out set.
        let reward = fit_reward_model(&feats, &rewards, cfg.flavor, &mut root.split("reward"))?;
        let (mut deltas, mut actions) = (Vec::new(), Vec::new());
        let mut i = 0;
        for ep in &episodes {
            for t in 0..ep.len() - 1 {
                deltas.push(feats[i + t + 1].iter().zip(&feats[i + t]).map(|(a, b)| a - b).collect());
                actions.push(ep[t].2);
            }
            i += ep.len();
        }
        Ok((reward, LatentDynamics::fit(&deltas, &actions)?))
    };
    let (baseline, baseline_dynamics) = fit(false)?;
    let (sear, sear_dynamics) = fit(true)?;
    Ok(ToyModels {
        spec,
        recovery,
        baseline,
        sear,
        baseline_dynamics,
        sear_dynamics,
    })
}

/// Rolls one episode from `state`, choosing each action from a fresh
/// observation. Returns the final goal distance.
pub fn run_episode(
    cfg: &ToyConfig,
    spec: &ToyWorldSpec,
    mut state: ToyState,
    rng: &mut Rng,
    mut policy: impl FnMut(&ToyObservation, &ToyState, &mut Rng) -> Result<[f64; 2]>,
) -> Result<f64> {
    for _ in 0..cfg.episode_len {
        let obs = sample_observation(spec, &state, rng);
        let a = policy(&obs, &state, rng)?;
        state.advance(a, cfg.step_size);
    }
    Ok(state.goal_distance())
}

impl ToyModels {
    /// Plans in latent space with `V(ẑ)` or `V(ẑ, ẑ_R)`.
    pub fn plan(&self, cfg: &ToyConfig, x: &DVector<f64>, with_agent: bool, rng: &mut Rng) -> Result<[f64; 2]> {
        let (fit, dynamics) = if with_agent {
            (&self.sear, &self.sear_dynamics)
        } else {
            (&self.baseline, &self.baseline_dynamics)
        };
        let start = self.recovery.features(x, with_agent);
        mpc_plan(
            |f: &Vec<f64>| fit.model.predict(f),
            |f: &mut Vec<f64>, a| dynamics.step(f, a),
            &start,
            cfg.horizon,
            cfg.candidates,
            rng,
        )
    }
}

/// Eval stream for episode `ep`; both flavors replay it, so they face the
/// same starts, observation noise and candidate draws.
pub fn eval_rng(seed: u64, ep: usize) -> Rng {
    Rng::new(seed).split_index("toy-eval-999", ep as u64)
}

/// Mean final goal distance of one seed for both flavors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline: f64,
    pub sear: f64,
    pub baseline_val_mse: f64,
    pub sear_val_mse: f64,
}

pub fn run_seed(cfg: &ToyConfig, cond: &Condition, seed: u64) -> Result<SeedResult> {
    let models = fit_models(cfg, cond.sigma_r, cond.sigma_e, seed)?;
    let mut totals = [0.0; 2];
    for ep in 0..cfg.eval_episodes {
        for (slot, with_agent) in [false, true].into_iter().enumerate() {
            let mut rng = eval_rng(seed, ep);
            let start = ToyState::sample(&mut rng)?;
            totals[slot] += run_episode(cfg, &models.spec, start, &mut rng, |obs, _, r| {
                models.plan(cfg, &obs.x, with_agent, r)
            })?;
        }
    }
    let n = cfg.eval_episodes as f64;
    Ok(SeedResult {
        seed,
        baseline: totals[0] / n,
        sear: totals[1] / n,
        baseline_val_mse: models.baseline.val_mse,
        sear_val_mse: models.sear.val_mse,
    })
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub sigma_r: f64,
    pub sigma_e: f64,
    pub baseline_median: f64,
    pub sear_median: f64,
    pub seeds: Vec<SeedResult>,
}

/// Median final goal distance per condition and flavor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub config: ToyConfig,
    pub rows: Vec<TableRow>,
}

/// Runs every condition over `seeds`, one thread per seed.
pub fn run_table(cfg: &ToyConfig, seeds: &[u64]) -> Result<Table> {
    if seeds.len() < 5 {
        return config_err(format!("need at least 5 seeds, got {}", seeds.len()));
    }
    cfg.validate()?;
    let mut rows = Vec::new();
    for cond in &CONDITIONS {
        let results: Vec<Result<SeedResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = seeds
                .iter()
                .map(|&seed| s.spawn(move || run_seed(cfg, cond, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("toy worker panicked"))
                .collect()
        });
        let seeds = results.into_iter().collect::<Result<Vec<_>>>()?;
        let base: Vec<f64> = seeds.iter().map(|r| r.baseline).collect();
        let sear: Vec<f64> = seeds.iter().map(|r| r.sear).collect();
        rows.push(TableRow {
            label: cond.label.to_string(),
            sigma_r: cond.sigma_r,
            sigma_e: cond.sigma_e,
            baseline_median: median(&base),
            sear_median: median(&sear),
            seeds,
        });
    }
    Ok(Table {
        config: cfg.clone(),
        rows,
    })
}

impl Table {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "final goal distance (median over {} seeds)",
            self.rows[0].seeds.len()
        );
        let _ = writeln!(
            s,
            "{:<20} {:>8} {:>8} {:>10} {:>12}",
            "condition", "sigma_R", "sigma_E", "V(z)", "V(z, z_R)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>8.2} {:>8.2} {:>10.4} {:>12.4}",
                r.label, r.sigma_r, r.sigma_e, r.baseline_median, r.sear_median
            );
        }
        s
    }

    /// Writes `table.txt` and `table.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("table.txt"), self.to_text())?;
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join("table.json"), json + "\n")
    }
}
