//! Controlled probability-flow ODEs and their explicit-Euler rollouts.
//!
//! Solver time runs forward from the Gaussian prior at `t = 0` to data at
//! `t = T`. Each instance converts solver time to its model's native
//! condition:
//!
//! | instance | condition | uncontrolled field `f(x, t)` |
//! |---|---|---|
//! | EDM | `σ = T − t` | `σ · s(x, σ)` |
//! | DDIM (σ-space) | `σ = σ_max − t` | `−ε(x̃ / sqrt(1 + σ²), σ)` |
//! | flow matching | `τ = 1 − t` | `−v(x, τ)` |
//!
//! Controls enter additively with identity actuation: `ẋ = f(x, t) + u`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::generative::{AlphaSchedule, GenerativeModel};
use crate::numerics::{sample_standard_normal, Matrix, Rng};

/// EDM horizon for the 2-D toys. The prior `T·N(0, I)` ignores the data
/// mean, so `T` must dwarf the mode radius to keep mixture weights intact.
pub const TOY_EDM_HORIZON: f64 = 40.0;

/// Default number of Euler steps.
pub const DEFAULT_STEPS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    EdmSigma,
    EdmKarras,
    DdimSigma,
    FlowLinear,
}

/// Increasing solver-time nodes `0 = t_0 < … < t_K = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    kind: GridKind,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(kind: GridKind, nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::Config("a time grid needs at least one step".into()));
        }
        if nodes[0] != 0.0 {
            return Err(Error::Config(format!("time grid must start at 0, not {}", nodes[0])));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) || nodes.iter().any(|t| !t.is_finite()) {
            return Err(Error::Config("time grid must be finite and strictly increasing".into()));
        }
        Ok(Self { kind, nodes })
    }

    fn uniform(kind: GridKind, horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) {
            return Err(Error::Config("grid needs steps >= 1 and a positive horizon".into()));
        }
        let mut nodes: Vec<f64> = (0..steps).map(|k| horizon * k as f64 / steps as f64).collect();
        nodes.push(horizon);
        Self::new(kind, nodes)
    }

    /// Uniform grid on `[0, T]` for the EDM instance.
    pub fn edm_uniform(horizon: f64, steps: usize) -> Result<Self> {
        Self::uniform(GridKind::EdmSigma, horizon, steps)
    }

    /// Karras ρ-spaced noise levels from `σ_max = T` down to `sigma_min`,
    /// followed by a final step to `σ = 0`.
    pub fn edm_karras(horizon: f64, steps: usize, sigma_min: f64, rho: f64) -> Result<Self> {
        if steps < 2 || !(sigma_min > 0.0 && sigma_min < horizon) {
            return Err(Error::Config("Karras grid needs steps >= 2 and 0 < sigma_min < T".into()));
        }
        let (a, b) = (horizon.powf(1.0 / rho), sigma_min.powf(1.0 / rho));
        let mut nodes: Vec<f64> = (0..steps)
            .map(|k| {
                let frac = k as f64 / (steps - 1) as f64;
                horizon - (a + frac * (b - a)).powf(rho)
            })
            .collect();
        nodes[0] = 0.0;
        nodes.push(horizon);
        Self::new(GridKind::EdmKarras, nodes)
    }

    /// DDIM grid: `steps` levels evenly spaced from the top of the training
    /// schedule down to level 0, then `σ = 0`, expressed as `t = σ_max − σ`.
    pub fn ddim(schedule: &AlphaSchedule, steps: usize) -> Result<Self> {
        if steps == 0 || steps > schedule.levels {
            return Err(Error::Config(format!(
                "DDIM grid needs 1..={} steps, got {steps}",
                schedule.levels
            )));
        }
        let top = schedule.levels - 1;
        let sigma_max = schedule.sigma_max();
        let denom = (steps - 1).max(1) as f64;
        let mut nodes: Vec<f64> = (0..steps)
            .map(|k| {
                let level = (top as f64 * (1.0 - k as f64 / denom)).round() as usize;
                sigma_max - schedule.sigma(level)
            })
            .collect();
        nodes[0] = 0.0;
        nodes.push(sigma_max);
        Self::new(GridKind::DdimSigma, nodes)
    }

    /// Uniform grid on `[0, 1]` for flow matching.
    pub fn flow(steps: usize) -> Result<Self> {
        Self::uniform(GridKind::FlowLinear, 1.0, steps)
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.nodes.last().expect("validated")
    }

    #[inline]
    pub fn h(&self, k: usize) -> f64 {
        self.nodes[k + 1] - self.nodes[k]
    }

    pub fn max_step(&self) -> f64 {
        (0..self.steps()).map(|k| self.h(k)).fold(0.0, f64::max)
    }
}

/// A vector field `f(x, t)` controlled additively, `ẋ = f(x, t) + u`.
pub trait Dynamics {
    fn state_dim(&self) -> usize;

    fn horizon(&self) -> f64;

    /// Uncontrolled field `f(x, t)`.
    fn field(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// `(∂f/∂x)ᵀ v` at `(x, t)`.
    fn field_vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>>;

    /// `f(x, t) + u`.
    fn drift(&self, x: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("drift control", self.state_dim(), u.len())?;
        let mut f = self.field(x, t)?;
        for (fi, ui) in f.iter_mut().zip(u) {
            *fi += ui;
        }
        Ok(f)
    }
}

/// Dynamics that expose a denoised (Tweedie) estimate and the diffusion
/// weight used to inject a guidance gradient.
pub trait Denoiser: Dynamics {
    /// Multiplier of a log-likelihood gradient added to the score, in solver time.
    fn guidance_scale(&self, t: f64) -> Result<f64>;

    /// Posterior-mean clean estimate `x̂(x_t)`.
    fn tweedie(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// `(∂x̂/∂x)ᵀ v`.
    fn tweedie_vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Instance {
    Edm { horizon: f64 },
    DdimSigma { sigma_max: f64 },
    FlowMatching,
}

impl Instance {
    pub fn name(&self) -> &'static str {
        match self {
            Instance::Edm { .. } => "edm",
            Instance::DdimSigma { .. } => "ddim",
            Instance::FlowMatching => "fm",
        }
    }
}

/// A pretrained model placed in one of the PF-ODE instances.
#[derive(Debug, Clone)]
pub struct ControlledDynamics {
    pub model: GenerativeModel,
    pub instance: Instance,
}

impl ControlledDynamics {
    pub fn new(model: GenerativeModel, instance: Instance) -> Result<Self> {
        let ok = match (&model, &instance) {
            (GenerativeModel::LearnedVelocity { .. }, Instance::FlowMatching) => true,
            (GenerativeModel::LearnedVelocity { .. }, _) => false,
            (GenerativeModel::AnalyticMixture(_), _) => true,
            (_, Instance::FlowMatching) => false,
            _ => true,
        };
        if !ok {
            return Err(Error::Config(format!(
                "{} model cannot drive the {} instance",
                model.kind_name(),
                instance.name()
            )));
        }
        match instance {
            Instance::Edm { horizon } if !(horizon > 0.0) => {
                return Err(Error::Config("EDM horizon must be positive".into()))
            }
            Instance::DdimSigma { sigma_max } if !(sigma_max > 0.0) => {
                return Err(Error::Config("DDIM sigma_max must be positive".into()))
            }
            _ => {}
        }
        Ok(Self { model, instance })
    }

    pub fn edm(model: GenerativeModel, horizon: f64) -> Result<Self> {
        Self::new(model, Instance::Edm { horizon })
    }

    pub fn ddim(model: GenerativeModel, schedule: &AlphaSchedule) -> Result<Self> {
        Self::new(
            model,
            Instance::DdimSigma {
                sigma_max: schedule.sigma_max(),
            },
        )
    }

    pub fn flow(model: GenerativeModel) -> Result<Self> {
        Self::new(model, Instance::FlowMatching)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let hi = Dynamics::horizon(self);
        let slack = 1e-12 * hi.max(1.0);
        if t.is_finite() && t >= -slack && t <= hi + slack {
            Ok(())
        } else {
            Err(Error::TimeOutOfRange { t, lo: 0.0, hi })
        }
    }

    /// Model condition at solver time `t`: noise level `σ` or flow time `τ`.
    pub fn condition(&self, t: f64) -> f64 {
        match self.instance {
            Instance::Edm { horizon } => (horizon - t).max(0.0),
            Instance::DdimSigma { sigma_max } => (sigma_max - t).max(0.0),
            Instance::FlowMatching => (1.0 - t).clamp(0.0, 1.0),
        }
    }

    /// Standard deviation of the isotropic Gaussian prior at `t = 0`.
    pub fn prior_std(&self) -> f64 {
        match self.instance {
            Instance::Edm { horizon } => horizon,
            Instance::DdimSigma { sigma_max } => (1.0 + sigma_max * sigma_max).sqrt(),
            Instance::FlowMatching => 1.0,
        }
    }

    /// `m` prior draws as an `m × n` batch.
    pub fn sample_prior(&self, rng: &mut Rng, m: usize) -> Matrix {
        let mut x = sample_standard_normal(rng, m, self.model.state_dim());
        x.scale(self.prior_std());
        x
    }

    /// Maps a terminal state back to data space (`x = x̃ / sqrt(1 + σ²)` for DDIM).
    pub fn to_data_space(&self, x: &Matrix, t: f64) -> Matrix {
        match self.instance {
            Instance::DdimSigma { .. } => {
                let sigma = self.condition(t);
                let mut out = x.clone();
                out.scale(1.0 / (1.0 + sigma * sigma).sqrt());
                out
            }
            _ => x.clone(),
        }
    }
}

impl Dynamics for ControlledDynamics {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn horizon(&self) -> f64 {
        match self.instance {
            Instance::Edm { horizon } => horizon,
            Instance::DdimSigma { sigma_max } => sigma_max,
            Instance::FlowMatching => 1.0,
        }
    }

    fn field(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        check_len("field state", self.state_dim(), x.len())?;
        let c = self.condition(t);
        match self.instance {
            Instance::Edm { .. } => self.model.scaled_score(x, c),
            Instance::DdimSigma { .. } => {
                let inner = 1.0 / (1.0 + c * c).sqrt();
                let xin: Vec<f64> = x.iter().map(|v| v * inner).collect();
                let mut e = self.model.noise(&xin, c)?;
                e.iter_mut().for_each(|v| *v = -*v);
                Ok(e)
            }
            Instance::FlowMatching => {
                let mut v = self.model.velocity(x, c)?;
                v.iter_mut().for_each(|e| *e = -*e);
                Ok(v)
            }
        }
    }

    fn field_vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        check_len("field_vjp state", self.state_dim(), x.len())?;
        check_len("field_vjp cotangent", self.state_dim(), v.len())?;
        let c = self.condition(t);
        match self.instance {
            Instance::Edm { .. } => self.model.scaled_score_vjp(x, c, v),
            Instance::DdimSigma { .. } => {
                let inner = 1.0 / (1.0 + c * c).sqrt();
                let xin: Vec<f64> = x.iter().map(|e| e * inner).collect();
                let mut g = self.model.noise_vjp(&xin, c, v)?;
                g.iter_mut().for_each(|e| *e *= -inner);
                Ok(g)
            }
            Instance::FlowMatching => {
                let mut g = self.model.velocity_vjp(x, c, v)?;
                g.iter_mut().for_each(|e| *e = -*e);
                Ok(g)
            }
        }
    }
}

impl Denoiser for ControlledDynamics {
    fn guidance_scale(&self, t: f64) -> Result<f64> {
        match self.instance {
            Instance::FlowMatching => Err(Error::Unsupported(
                "particle guidance is not defined for the flow-matching instance".into(),
            )),
            _ => {
                self.check_time(t)?;
                Ok(self.condition(t))
            }
        }
    }

    fn tweedie(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        // x̂ = x + σ² s(x, σ); for DDIM this is x̃ − σ ε(x̃ / sqrt(1 + σ²))
        let sigma = self.guidance_scale(t)?;
        let mut out = self.model.scaled_score(x, sigma)?;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi + sigma * *o;
        }
        Ok(out)
    }

    fn tweedie_vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let sigma = self.guidance_scale(t)?;
        let mut g = self.model.scaled_score_vjp(x, sigma, v)?;
        for (gi, vi) in g.iter_mut().zip(v) {
            *gi = vi + sigma * *gi;
        }
        Ok(g)
    }
}

/// Batch of `M` states at grid index `step`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchState {
    pub x: Matrix,
    pub step: usize,
}

/// Controls `U_k ∈ R^{M×m}` for `k = 0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    controls: Vec<Matrix>,
}

impl ControlTrajectory {
    pub fn zeros(steps: usize, batch: usize, dim: usize) -> Self {
        Self {
            controls: vec![Matrix::zeros(batch, dim); steps],
        }
    }

    pub fn from_steps(controls: Vec<Matrix>) -> Result<Self> {
        if let Some(first) = controls.first() {
            for c in &controls {
                check_len("control rows", first.rows(), c.rows())?;
                check_len("control cols", first.cols(), c.cols())?;
            }
        }
        Ok(Self { controls })
    }

    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn batch(&self) -> usize {
        self.controls.first().map_or(0, Matrix::rows)
    }

    pub fn dim(&self) -> usize {
        self.controls.first().map_or(0, Matrix::cols)
    }

    pub fn step(&self, k: usize) -> &Matrix {
        &self.controls[k]
    }

    pub fn step_mut(&mut self, k: usize) -> &mut Matrix {
        &mut self.controls[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.controls.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.controls.iter().all(Matrix::is_finite)
    }

    /// Discrete running cost `½ ρ Σ_k h_k ‖U_k‖²`.
    pub fn energy(&self, grid: &TimeGrid, rho: f64) -> f64 {
        0.5 * rho
            * self
                .controls
                .iter()
                .enumerate()
                .map(|(k, u)| grid.h(k) * u.squared_norm())
                .sum::<f64>()
    }
}

/// `F(X, U, t)` row by row.
pub fn drift_batch(dynamics: &dyn Dynamics, x: &Matrix, u: &Matrix, t: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let f = dynamics.drift(x.row(i), u.row(i), t)?;
        out.row_mut(i).copy_from_slice(&f);
    }
    Ok(out)
}

/// Per-sample `(∂F/∂X)ᵀ V`; the batch Jacobian is block diagonal so each
/// row only sees its own state.
pub fn dynamics_vjp(dynamics: &dyn Dynamics, x: &[f64], _u: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
    // additive control: the Jacobian does not depend on u
    dynamics.field_vjp(x, t, v)
}

fn check_batch(dynamics: &dyn Dynamics, grid: &TimeGrid, x0: &Matrix, controls: &ControlTrajectory) -> Result<()> {
    check_len("initial state dim", dynamics.state_dim(), x0.cols())?;
    check_len("control steps vs grid", grid.steps(), controls.steps())?;
    check_len("control batch", x0.rows(), controls.batch())?;
    check_len("control dim (identity actuation)", x0.cols(), controls.dim())?;
    let slack = 1e-9 * grid.horizon().max(1.0);
    if (grid.horizon() - dynamics.horizon()).abs() > slack {
        return Err(Error::Config(format!(
            "grid horizon {} does not match dynamics horizon {}",
            grid.horizon(),
            dynamics.horizon()
        )));
    }
    Ok(())
}

/// Explicit Euler `X_{k+1} = X_k + h_k F(X_k, U_k, t_k)`; returns all `K + 1` states.
pub fn rollout(
    dynamics: &dyn Dynamics,
    grid: &TimeGrid,
    x0: &Matrix,
    controls: &ControlTrajectory,
) -> Result<Vec<BatchState>> {
    check_batch(dynamics, grid, x0, controls)?;
    let mut states = Vec::with_capacity(grid.steps() + 1);
    states.push(BatchState { x: x0.clone(), step: 0 });
    let mut x = x0.clone();
    for k in 0..grid.steps() {
        let h = grid.h(k);
        let t = grid.nodes()[k];
        let u = controls.step(k);
        for i in 0..x.rows() {
            let f = dynamics.drift(x.row(i), u.row(i), t)?;
            for (xi, fi) in x.row_mut(i).iter_mut().zip(&f) {
                *xi += h * fi;
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("rollout state at step {}", k + 1)));
        }
        states.push(BatchState { x: x.clone(), step: k + 1 });
    }
    Ok(states)
}

/// Terminal state of [`rollout`] without keeping the trajectory.
pub fn rollout_terminal(
    dynamics: &dyn Dynamics,
    grid: &TimeGrid,
    x0: &Matrix,
    controls: &ControlTrajectory,
) -> Result<Matrix> {
    check_batch(dynamics, grid, x0, controls)?;
    let mut x = x0.clone();
    for k in 0..grid.steps() {
        let h = grid.h(k);
        let t = grid.nodes()[k];
        let u = controls.step(k);
        for i in 0..x.rows() {
            let f = dynamics.drift(x.row(i), u.row(i), t)?;
            for (xi, fi) in x.row_mut(i).iter_mut().zip(&f) {
                *xi += h * fi;
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("rollout state at step {}", k + 1)));
        }
    }
    Ok(x)
}
