//! E-MSA solver for the batched terminal-alignment control problem, plus the
//! vanilla and particle-guidance samplers it is compared against.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::{terminal_cost, Evaluation, JointEstimator, Oracle, TargetSpec};
use crate::dynamics::{rollout, rollout_terminal, BatchState, ControlTrajectory, Denoiser, Dynamics, TimeGrid};
use crate::error::{check_len, Error, Result};
use crate::numerics::Matrix;

/// Relative-change floor in the convergence test.
const CONVERGENCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Control-energy weight.
    pub rho: f64,
    /// Proximal mixing weight, in `[0, 1)`.
    pub xi: f64,
    pub max_iters: usize,
    pub batch: usize,
    pub steps: usize,
    /// Per-coordinate box `|u| ≤ u_max`; unbounded when absent.
    pub u_max: Option<f64>,
    /// Relative total-cost change that counts as converged.
    pub tol: f64,
    pub seed: u64,
    pub joint_estimator: JointEstimator,
}

/// Control-energy weight calibrated for the 2-D toys: `Φ` averages over the
/// batch, so per-sample terminal gradients are `O(1/M)` and small.
pub const DEFAULT_RHO: f64 = 5e-6;
/// Control box used by the toy preset. Unbounded updates at `DEFAULT_RHO`
/// eject a few samples far off the data support.
pub const TOY_CONTROL_BOUND: f64 = 2.0;

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: DEFAULT_RHO,
            xi: 0.95,
            max_iters: 10,
            batch: 64,
            steps: 40,
            u_max: None,
            tol: 1e-4,
            seed: 0,
            joint_estimator: JointEstimator::PerSampleProduct,
        }
    }
}

impl SolverConfig {
    /// Defaults plus the toy control box.
    pub fn toy() -> Self {
        Self {
            u_max: Some(TOY_CONTROL_BOUND),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        UpdateCoefficients::from_rho_xi(self.rho, self.xi)?;
        if self.max_iters == 0 || self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("max_iters, batch and steps must be positive".into()));
        }
        if let Some(b) = self.u_max {
            if !(b > 0.0) {
                return Err(Error::Config(format!("u_max must be positive, got {b}")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("tol must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> Result<UpdateCoefficients> {
        UpdateCoefficients::from_rho_xi(self.rho, self.xi)
    }
}

/// `u* = Π(ξ u_ref − η gᵀν)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateCoefficients {
    pub xi: f64,
    pub eta: f64,
}

impl UpdateCoefficients {
    /// `η = (1 − ξ)/ρ`; requires `ρ > 0` and `ξ ∈ [0, 1)`.
    pub fn from_rho_xi(rho: f64, xi: f64) -> Result<Self> {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive and finite, got {rho}")));
        }
        if !(0.0..1.0).contains(&xi) {
            return Err(Error::Config(format!("xi must lie in [0, 1), got {xi}")));
        }
        Ok(Self {
            xi,
            eta: (1.0 - xi) / rho,
        })
    }

    /// `ξ = γ/(ρ + γ)`, `η = 1/(ρ + γ)`; requires `ρ + γ > 0`.
    pub fn from_rho_gamma(rho: f64, gamma: f64) -> Result<Self> {
        let s = rho + gamma;
        if !(s > 0.0 && s.is_finite()) || rho < 0.0 || gamma < 0.0 {
            return Err(Error::Config(format!(
                "need rho, gamma >= 0 with rho + gamma > 0, got {rho} + {gamma}"
            )));
        }
        Ok(Self {
            xi: gamma / s,
            eta: 1.0 / s,
        })
    }
}

/// Closed-form Hamiltonian minimizer. `g` is the `n × m` actuation matrix
/// (identity when absent); the box projection is a clamp.
pub fn control_update(
    u_ref: &[f64],
    nu: &[f64],
    g: Option<&Matrix>,
    coeffs: UpdateCoefficients,
    u_max: Option<f64>,
) -> Result<Vec<f64>> {
    let gt_nu = match g {
        Some(g) => g.transpose_matvec(nu)?,
        None => nu.to_vec(),
    };
    check_len("control dim", u_ref.len(), gt_nu.len())?;
    Ok(u_ref
        .iter()
        .zip(&gt_nu)
        .map(|(u, v)| clamp(coeffs.xi * u - coeffs.eta * v, u_max))
        .collect())
}

#[inline]
fn clamp(v: f64, bound: Option<f64>) -> f64 {
    match bound {
        Some(b) => v.clamp(-b, b),
        None => v,
    }
}

/// `νᵀ g u + ½ρ‖u‖² + ½γ‖u − u_ref‖²`, the `u`-dependent part of the
/// augmented Hamiltonian.
pub fn hamiltonian(u: &[f64], u_ref: &[f64], nu: &[f64], g: Option<&Matrix>, rho: f64, gamma: f64) -> Result<f64> {
    let gu = match g {
        Some(g) => g.matvec(u)?,
        None => u.to_vec(),
    };
    check_len("hamiltonian costate", gu.len(), nu.len())?;
    let lin: f64 = nu.iter().zip(&gu).map(|(a, b)| a * b).sum();
    let energy: f64 = u.iter().map(|v| v * v).sum();
    let prox: f64 = u.iter().zip(u_ref).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(lin + 0.5 * rho * energy + 0.5 * gamma * prox)
}

/// Costate `N_k` for one grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub n: Matrix,
}

/// One transpose-Euler step `N_k = N_{k+1} + h_k (∂F/∂X)ᵀ N_{k+1}` at `X_k`.
fn adjoint_step(dynamics: &dyn Dynamics, x: &Matrix, t: f64, h: f64, n_next: &Matrix) -> Result<Matrix> {
    let mut out = n_next.clone();
    for i in 0..x.rows() {
        let v = dynamics.field_vjp(x.row(i), t, n_next.row(i))?;
        for (o, vi) in out.row_mut(i).iter_mut().zip(&v) {
            *o += h * vi;
        }
    }
    Ok(out)
}

/// Discrete adjoint along a stored trajectory; returns `N_0 … N_K`.
pub fn backward_adjoint(
    dynamics: &dyn Dynamics,
    grid: &TimeGrid,
    trajectory: &[BatchState],
    n_terminal: &Matrix,
) -> Result<Vec<AdjointState>> {
    let k_steps = grid.steps();
    check_len("trajectory length", k_steps + 1, trajectory.len())?;
    check_len("terminal adjoint rows", trajectory[k_steps].x.rows(), n_terminal.rows())?;
    check_len("terminal adjoint cols", trajectory[k_steps].x.cols(), n_terminal.cols())?;
    let mut out = vec![
        AdjointState {
            n: n_terminal.clone()
        };
        k_steps + 1
    ];
    for k in (0..k_steps).rev() {
        let n = adjoint_step(dynamics, &trajectory[k].x, grid.nodes()[k], grid.h(k), &out[k + 1].n)?;
        out[k] = AdjointState { n };
    }
    Ok(out)
}

/// `∂J/∂U_k = h_k (ρ U_k + N_{k+1})` for `J = Φ + ½ρ Σ h_k ‖U_k‖²`.
pub fn cost_gradient(
    grid: &TimeGrid,
    adjoints: &[AdjointState],
    controls: &ControlTrajectory,
    rho: f64,
) -> Result<ControlTrajectory> {
    check_len("adjoint length", controls.steps() + 1, adjoints.len())?;
    let steps = (0..controls.steps())
        .map(|k| {
            let h = grid.h(k);
            let u = controls.step(k);
            let n = &adjoints[k + 1].n;
            let data = u.data().iter().zip(n.data()).map(|(u, n)| h * (rho * u + n)).collect();
            Matrix::new(u.rows(), u.cols(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    ControlTrajectory::from_steps(steps)
}

/// `Φ + ½ρ Σ_k h_k ‖U_k‖²`.
pub fn total_cost(terminal: f64, controls: &ControlTrajectory, grid: &TimeGrid, rho: f64) -> f64 {
    terminal + controls.energy(grid, rho)
}

/// Uncontrolled sampler: rollout with `U ≡ 0`.
pub fn vanilla_sample(dynamics: &dyn Dynamics, grid: &TimeGrid, x_init: &Matrix) -> Result<BatchState> {
    let zeros = ControlTrajectory::zeros(grid.steps(), x_init.rows(), x_init.cols());
    Ok(BatchState {
        x: rollout_terminal(dynamics, grid, x_init, &zeros)?,
        step: grid.steps(),
    })
}

/// Particle guidance: at every step the score is augmented by
/// `−λ ∇_x KL(p̂(x̂(X_t)) ‖ target)` through the Tweedie estimate. `λ = 0`
/// skips the guidance term entirely.
pub fn particle_guidance_sample<D: Denoiser>(
    dynamics: &D,
    grid: &TimeGrid,
    oracle: &dyn Oracle,
    target: &TargetSpec,
    lambda: f64,
    x_init: &Matrix,
    estimator: JointEstimator,
) -> Result<BatchState> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("guidance weight must be nonnegative, got {lambda}")));
    }
    if lambda == 0.0 {
        return vanilla_sample(dynamics, grid, x_init);
    }
    check_len("initial state dim", dynamics.state_dim(), x_init.cols())?;
    // fails early for instances without a denoiser view
    dynamics.guidance_scale(grid.nodes()[0])?;
    let mut x = x_init.clone();
    for k in 0..grid.steps() {
        let t = grid.nodes()[k];
        let h = grid.h(k);
        let scale = dynamics.guidance_scale(t)?;
        let mut x_hat = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let d = dynamics.tweedie(x.row(i), t)?;
            x_hat.row_mut(i).copy_from_slice(&d);
        }
        let eval = terminal_cost(oracle, &x_hat, target, estimator, true)?;
        let grad = eval.gradient.expect("requested");
        for i in 0..x.rows() {
            let g = dynamics.tweedie_vjp(x.row(i), t, grad.row(i))?;
            let f = dynamics.field(x.row(i), t)?;
            for ((xi, fi), gi) in x.row_mut(i).iter_mut().zip(&f).zip(&g) {
                *xi += h * (fi - lambda * scale * gi);
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("guided state at step {}", k + 1)));
        }
    }
    Ok(BatchState { x, step: grid.steps() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Index of the solve within a multi-batch run.
    #[serde(default)]
    pub batch: usize,
    pub iteration: usize,
    pub total_cost: f64,
    pub terminal_cost: f64,
    pub control_energy: f64,
    /// Direct joint KL minus its entropy decomposition (joint targets only).
    pub joint_residual: Option<f64>,
    pub forward_secs: f64,
    pub backward_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub forward_secs: f64,
    pub terminal_secs: f64,
    pub backward_secs: f64,
    pub final_rollout_secs: f64,
    pub total_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub method: String,
    pub instance: String,
    pub config: serde_json::Value,
    /// Independent solves pooled into this report.
    #[serde(default = "one")]
    pub batches: usize,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
    pub final_terminal_cost: Option<f64>,
    pub final_control_energy: f64,
    pub timings: PhaseTimings,
    pub evaluation: Option<Evaluation>,
    /// Approximate high-water heap bytes above the pre-run level.
    pub peak_memory_bytes: Option<u64>,
    pub rng: String,
}

fn one() -> usize {
    1
}

impl RunReport {
    pub fn new(method: &str, instance: &str, config: serde_json::Value) -> Self {
        Self {
            version: crate::VERSION.to_string(),
            method: method.to_string(),
            instance: instance.to_string(),
            config,
            batches: 1,
            iterations: Vec::new(),
            converged: false,
            final_terminal_cost: None,
            final_control_energy: 0.0,
            timings: PhaseTimings::default(),
            evaluation: None,
            peak_memory_bytes: None,
            rng: crate::numerics::Rng::GENERATOR.to_string(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Iterations in which controls were updated.
    pub fn iterations_run(&self) -> usize {
        self.iterations.len()
    }
}

pub struct EmsaOutcome {
    pub state: BatchState,
    pub controls: ControlTrajectory,
    pub report: RunReport,
}

fn relative_change(prev: f64, cur: f64) -> f64 {
    (cur - prev).abs() / prev.abs().max(CONVERGENCE_FLOOR)
}

/// Extended method of successive approximations with explicit Euler.
///
/// Each iteration rolls the batch forward under the current controls,
/// evaluates the terminal KL and its gradient, then sweeps the adjoint
/// backward while replacing `U_k ← Π(ξ U_k − η N_{k+1})` in place. Stops
/// after `max_iters` updates or when the relative total-cost change drops
/// below `tol`, then performs one final rollout.
pub fn solve_emsa<D: Dynamics>(
    dynamics: &D,
    grid: &TimeGrid,
    oracle: &dyn Oracle,
    target: &TargetSpec,
    cfg: &SolverConfig,
    x_init: &Matrix,
) -> Result<EmsaOutcome> {
    cfg.validate()?;
    let coeffs = cfg.coefficients()?;
    check_len("grid steps vs config", cfg.steps, grid.steps())?;
    check_len("initial batch vs config", cfg.batch, x_init.rows())?;
    target.check_oracle(oracle)?;
    let started = Instant::now();
    let (m, n, k_steps) = (x_init.rows(), x_init.cols(), grid.steps());
    let mut controls = ControlTrajectory::zeros(k_steps, m, n);
    let mut report = RunReport::new("emsa", "", serde_json::to_value(cfg)?);
    let mut prev_total: Option<f64> = None;

    for iteration in 0..cfg.max_iters {
        let t0 = Instant::now();
        let states = rollout(dynamics, grid, x_init, &controls).map_err(|e| abort(iteration, None, e))?;
        let forward_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let eval = terminal_cost(oracle, &states[k_steps].x, target, cfg.joint_estimator, true)
            .map_err(|e| abort(iteration, None, e))?;
        report.timings.terminal_secs += t1.elapsed().as_secs_f64();
        let energy = controls.energy(grid, cfg.rho);
        let total = eval.value + energy;
        if !total.is_finite() {
            return Err(Error::SolverAbort {
                iteration,
                step: None,
                what: "total cost".into(),
            });
        }
        if let Some(prev) = prev_total {
            if relative_change(prev, total) < cfg.tol {
                report.converged = true;
                report.timings.forward_secs += forward_secs;
                break;
            }
        }
        prev_total = Some(total);

        let t2 = Instant::now();
        let mut adj = eval.gradient.expect("requested");
        for k in (0..k_steps).rev() {
            // adj holds N_{k+1}
            let u = controls.step_mut(k);
            for (uv, nv) in u.data_mut().iter_mut().zip(adj.data()) {
                *uv = clamp(coeffs.xi * *uv - coeffs.eta * nv, cfg.u_max);
            }
            adj = adjoint_step(dynamics, &states[k].x, grid.nodes()[k], grid.h(k), &adj)
                .map_err(|e| abort(iteration, Some(k), e))?;
            if !adj.is_finite() {
                return Err(Error::SolverAbort {
                    iteration,
                    step: Some(k),
                    what: "adjoint".into(),
                });
            }
        }
        let backward_secs = t2.elapsed().as_secs_f64();
        report.timings.forward_secs += forward_secs;
        report.timings.backward_secs += backward_secs;
        report.iterations.push(IterationRecord {
            batch: 0,
            iteration,
            total_cost: total,
            terminal_cost: eval.value,
            control_energy: energy,
            joint_residual: eval.joint_residual,
            forward_secs,
            backward_secs,
        });
    }

    let t3 = Instant::now();
    let x_final =
        rollout_terminal(dynamics, grid, x_init, &controls).map_err(|e| abort(report.iterations.len(), None, e))?;
    report.timings.final_rollout_secs = t3.elapsed().as_secs_f64();
    let final_eval = terminal_cost(oracle, &x_final, target, cfg.joint_estimator, false)?;
    report.final_terminal_cost = Some(final_eval.value);
    report.final_control_energy = controls.energy(grid, cfg.rho);
    report.timings.total_secs = started.elapsed().as_secs_f64();
    Ok(EmsaOutcome {
        state: BatchState {
            x: x_final,
            step: k_steps,
        },
        controls,
        report,
    })
}

fn abort(iteration: usize, step: Option<usize>, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::SolverAbort { iteration, step, what },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{Axis, RbfOracle, TargetPreset};
    use crate::dynamics::ControlledDynamics;
    use crate::generative::{AlphaSchedule, GenerativeModel, MixtureSpec};
    use crate::numerics::{norm, Rng};
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn substitution_example() {
        let c = UpdateCoefficients { xi: 0.5, eta: 0.5 };
        let u = control_update(&[2.0, 0.0], &[1.0, -1.0], Some(&Matrix::identity(2)), c, None).unwrap();
        assert_eq!(u, vec![0.5, 0.5]);
        let u = control_update(&[2.0, 0.0], &[1.0, -1.0], None, c, Some(0.3)).unwrap();
        assert_eq!(u, vec![0.3, 0.3]);
    }

    #[test]
    fn coefficient_parameterizations_agree() {
        let a = UpdateCoefficients::from_rho_xi(0.1, 0.95).unwrap();
        let gamma = 0.95 * 0.1 / 0.05;
        let b = UpdateCoefficients::from_rho_gamma(0.1, gamma).unwrap();
        assert!((a.xi - b.xi).abs() < 1e-15 && (a.eta - b.eta).abs() < 1e-12);
        assert!(UpdateCoefficients::from_rho_xi(0.0, 0.5).is_err());
        assert!(UpdateCoefficients::from_rho_xi(0.0, 0.0).is_err());
        assert!(UpdateCoefficients::from_rho_xi(1.0, 1.0).is_err());
        assert!(UpdateCoefficients::from_rho_gamma(0.0, 0.0).is_err());
        assert!(UpdateCoefficients::from_rho_gamma(1e-300, -1e-300).is_err());
    }

    /// Brute-force minimizer over a grid on `[−2, 2]²`.
    fn grid_minimizer(u_ref: &[f64], nu: &[f64], g: &Matrix, rho: f64, gamma: f64, bound: Option<f64>) -> Vec<f64> {
        let steps = 400;
        let lo = -2.0;
        let step = 4.0 / steps as f64;
        let mut best = (f64::INFINITY, vec![0.0; 2]);
        for a in 0..=steps {
            for b in 0..=steps {
                let u = [lo + a as f64 * step, lo + b as f64 * step];
                if let Some(m) = bound {
                    if u[0].abs() > m + 1e-12 || u[1].abs() > m + 1e-12 {
                        continue;
                    }
                }
                let h = hamiltonian(&u, u_ref, nu, Some(g), rho, gamma).unwrap();
                if h < best.0 {
                    best = (h, u.to_vec());
                }
            }
        }
        best.1
    }

    #[test]
    fn closed_form_matches_grid_search() {
        let mut rng = Rng::new(13);
        for case in 0..100 {
            let rho = rng.uniform_range(0.2, 2.0);
            let gamma = rng.uniform_range(0.0, 2.0);
            let c = UpdateCoefficients::from_rho_gamma(rho, gamma).unwrap();
            let u_ref = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            let mut g = Matrix::zeros(2, 2);
            g.data_mut().iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
            // keep the unconstrained optimum inside the search window
            let mut nu = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)];
            let probe = control_update(&u_ref, &nu, Some(&g), c, None).unwrap();
            if norm(&probe) > 1.8 {
                let s = 0.5 / norm(&probe);
                nu.iter_mut().for_each(|v| *v *= s);
            }
            let bound = if case % 2 == 0 { None } else { Some(rng.uniform_range(0.1, 0.8)) };
            let closed = control_update(&u_ref, &nu, Some(&g), c, bound).unwrap();
            let brute = grid_minimizer(&u_ref, &nu, &g, rho, gamma, bound);
            for d in 0..2 {
                // grid spacing 0.01
                assert!((closed[d] - brute[d]).abs() <= 0.01 + 1e-12, "case {case}: {closed:?} vs {brute:?}");
            }
        }
    }

    #[test]
    fn box_projection_is_clamp() {
        let c = UpdateCoefficients::from_rho_xi(0.5, 0.2).unwrap();
        let free = control_update(&[3.0, -3.0, 0.1], &[0.0, 0.0, 0.0], None, c, None).unwrap();
        let boxed = control_update(&[3.0, -3.0, 0.1], &[0.0, 0.0, 0.0], None, c, Some(0.5)).unwrap();
        assert_eq!(boxed, free.iter().map(|v| v.clamp(-0.5, 0.5)).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn control_norm_nonincreasing_in_rho(
            u in proptest::array::uniform3(-3.0f64..3.0),
            nu in proptest::array::uniform3(-3.0f64..3.0),
            gamma in 0.0f64..3.0,
            rho in 0.01f64..3.0,
            bump in 0.0f64..3.0,
        ) {
            let a = control_update(&u, &nu, None, UpdateCoefficients::from_rho_gamma(rho, gamma).unwrap(), None).unwrap();
            let b = control_update(&u, &nu, None, UpdateCoefficients::from_rho_gamma(rho + bump, gamma).unwrap(), None).unwrap();
            prop_assert!(norm(&b) <= norm(&a) * (1.0 + 1e-12) + 1e-15);
        }
    }

    struct Linear(f64);

    impl Dynamics for Linear {
        fn state_dim(&self) -> usize {
            1
        }
        fn horizon(&self) -> f64 {
            1.0
        }
        fn field(&self, x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(vec![self.0 * x[0]])
        }
        fn field_vjp(&self, _x: &[f64], _t: f64, v: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![self.0 * v[0]])
        }
    }

    #[test]
    fn scalar_linear_adjoint() {
        let a = -0.7;
        let grid = TimeGrid::new(crate::dynamics::GridKind::FlowLinear, vec![0.0, 0.1, 0.35, 0.6, 1.0]).unwrap();
        let x0 = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        let states = rollout(&Linear(a), &grid, &x0, &ControlTrajectory::zeros(4, 2, 1)).unwrap();
        let nk = Matrix::from_rows(&[[0.5], [-1.5]]).unwrap();
        let adj = backward_adjoint(&Linear(a), &grid, &states, &nk).unwrap();
        for i in 0..2 {
            let mut expect = nk.get(i, 0);
            for k in (0..4).rev() {
                expect *= 1.0 + grid.h(k) * a;
                assert!((adj[k].n.get(i, 0) - expect).abs() < 1e-15);
            }
        }
        let zero = backward_adjoint(&Linear(0.0), &grid, &states, &nk).unwrap();
        assert!(zero.iter().all(|s| s.n == nk));
    }

    #[test]
    fn single_iteration_without_proximal_is_a_gradient_step() {
        let mixture = MixtureSpec::default_toy(&[0.8, 0.2]).unwrap();
        let oracle = RbfOracle::from_mixture(&mixture, 3.0).unwrap();
        let target = TargetSpec::preset(TargetPreset::Uniform, &oracle.axes(), false).unwrap();
        let dynamics = ControlledDynamics::edm(GenerativeModel::AnalyticMixture(mixture), 10.0).unwrap();
        let grid = TimeGrid::edm_uniform(10.0, 8).unwrap();
        let cfg = SolverConfig {
            rho: 0.5,
            xi: 0.0,
            max_iters: 1,
            batch: 6,
            steps: 8,
            ..SolverConfig::default()
        };
        let x0 = dynamics.sample_prior(&mut Rng::new(3), 6);
        let out = solve_emsa(&dynamics, &grid, &oracle, &target, &cfg, &x0).unwrap();
        let states = rollout(&dynamics, &grid, &x0, &ControlTrajectory::zeros(8, 6, 2)).unwrap();
        let nk = terminal_cost(&oracle, &states[8].x, &target, JointEstimator::default(), true)
            .unwrap()
            .gradient
            .unwrap();
        let adj = backward_adjoint(&dynamics, &grid, &states, &nk).unwrap();
        for k in 0..8 {
            for (u, n) in out.controls.step(k).data().iter().zip(adj[k + 1].n.data()) {
                assert_eq!(*u, -2.0 * n);
            }
        }
        assert_eq!(out.report.iterations.len(), 1);
    }

    fn analytic_setup(instance: &str) -> ControlledDynamics {
        let mixture = MixtureSpec::default_toy(&[0.8, 0.2]).unwrap();
        let model = GenerativeModel::AnalyticMixture(mixture);
        match instance {
            "edm" => ControlledDynamics::edm(model, 10.0).unwrap(),
            "ddim" => ControlledDynamics::ddim(model, &AlphaSchedule::default()).unwrap(),
            _ => ControlledDynamics::flow(model).unwrap(),
        }
    }

    fn grid_for(d: &ControlledDynamics, steps: usize) -> TimeGrid {
        match d.instance {
            crate::dynamics::Instance::Edm { horizon } => TimeGrid::edm_uniform(horizon, steps).unwrap(),
            crate::dynamics::Instance::DdimSigma { .. } => TimeGrid::ddim(&AlphaSchedule::default(), steps).unwrap(),
            crate::dynamics::Instance::FlowMatching => TimeGrid::flow(steps).unwrap(),
        }
    }

    /// Oracle whose logits ignore the state: zero terminal gradient.
    struct Constant;

    impl Oracle for Constant {
        fn state_dim(&self) -> usize {
            2
        }
        fn axes(&self) -> Vec<Axis> {
            vec![Axis {
                name: "class".into(),
                classes: 2,
            }]
        }
        fn logits(&self, _x: &[f64]) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![0.0, 0.0]])
        }
        fn logits_vjp(&self, x: &[f64], _c: &[Vec<f64>]) -> Result<Vec<f64>> {
            Ok(vec![0.0; x.len()])
        }
    }

    #[test]
    fn zero_terminal_gradient_reproduces_vanilla() {
        let target = TargetSpec::single("class", vec![0.5, 0.5]).unwrap();
        for name in ["edm", "ddim", "fm"] {
            let d = analytic_setup(name);
            let grid = grid_for(&d, 12);
            let x0 = d.sample_prior(&mut Rng::new(8), 5);
            let cfg = SolverConfig {
                batch: 5,
                steps: 12,
                max_iters: 3,
                ..SolverConfig::default()
            };
            let out = solve_emsa(&d, &grid, &Constant, &target, &cfg, &x0).unwrap();
            assert!(out.controls.iter().all(|u| u.data().iter().all(|v| *v == 0.0)));
            assert_eq!(out.state.x, vanilla_sample(&d, &grid, &x0).unwrap().x, "{name}");
        }
    }

    #[test]
    fn zero_guidance_weight_reproduces_vanilla() {
        let mixture = MixtureSpec::default_toy(&[0.8, 0.2]).unwrap();
        let oracle = RbfOracle::from_mixture(&mixture, 2.0).unwrap();
        let target = TargetSpec::preset(TargetPreset::Uniform, &oracle.axes(), false).unwrap();
        for name in ["edm", "ddim"] {
            let d = analytic_setup(name);
            let grid = grid_for(&d, 12);
            let x0 = d.sample_prior(&mut Rng::new(8), 5);
            let pg = particle_guidance_sample(&d, &grid, &oracle, &target, 0.0, &x0, JointEstimator::default()).unwrap();
            assert_eq!(pg.x, vanilla_sample(&d, &grid, &x0).unwrap().x);
            // constant oracle: guidance gradient vanishes at any weight
            let pg = particle_guidance_sample(&d, &grid, &Constant, &TargetSpec::single("class", vec![0.5, 0.5]).unwrap(), 5.0, &x0, JointEstimator::default()).unwrap();
            assert_eq!(pg.x, vanilla_sample(&d, &grid, &x0).unwrap().x);
        }
        let fm = analytic_setup("fm");
        let grid = grid_for(&fm, 12);
        let x0 = fm.sample_prior(&mut Rng::new(8), 5);
        assert!(matches!(
            particle_guidance_sample(&fm, &grid, &oracle, &target, 1.0, &x0, JointEstimator::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn tweedie_is_gaussian_posterior_mean() {
        let s: f64 = 0.6;
        let m = MixtureSpec::single_gaussian(vec![0.0, 0.0], s).unwrap();
        let d = ControlledDynamics::edm(GenerativeModel::AnalyticMixture(m), 10.0).unwrap();
        for t in [0.0, 3.0, 9.5] {
            let sigma: f64 = 10.0 - t;
            let x = [1.7, -0.4];
            let hat = d.tweedie(&x, t).unwrap();
            for k in 0..2 {
                assert!((hat[k] - x[k] * s * s / (s * s + sigma * sigma)).abs() < 1e-10);
            }
        }
    }

    /// `J(U)` through a full rollout.
    fn objective(
        d: &ControlledDynamics,
        grid: &TimeGrid,
        oracle: &RbfOracle,
        target: &TargetSpec,
        x0: &Matrix,
        u: &ControlTrajectory,
        rho: f64,
    ) -> f64 {
        let xt = rollout_terminal(d, grid, x0, u).unwrap();
        let phi = terminal_cost(oracle, &xt, target, JointEstimator::default(), false).unwrap().value;
        total_cost(phi, u, grid, rho)
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let mixture = MixtureSpec::default_toy(&[0.8, 0.2]).unwrap();
        let oracle = RbfOracle::from_mixture(&mixture, 3.0).unwrap();
        let target = TargetSpec::single("class", vec![0.5, 0.5]).unwrap();
        let d = ControlledDynamics::edm(GenerativeModel::AnalyticMixture(mixture), 10.0).unwrap();
        let grid = TimeGrid::edm_uniform(10.0, 10).unwrap();
        let mut rng = Rng::new(17);
        let x0 = d.sample_prior(&mut rng, 4);
        let rho = 0.3;
        let mut u = ControlTrajectory::zeros(10, 4, 2);
        for k in 0..10 {
            u.step_mut(k).data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.standard_normal());
        }
        let states = rollout(&d, &grid, &x0, &u).unwrap();
        let nk = terminal_cost(&oracle, &states[10].x, &target, JointEstimator::default(), true)
            .unwrap()
            .gradient
            .unwrap();
        let adj = backward_adjoint(&d, &grid, &states, &nk).unwrap();
        let grad = cost_gradient(&grid, &adj, &u, rho).unwrap();
        for _ in 0..20 {
            let (k, i, c) = (rng.index(10), rng.index(4), rng.index(2));
            let h = 1e-5;
            let mut up = u.clone();
            up.step_mut(k).set(i, c, u.step(k).get(i, c) + h);
            let mut um = u.clone();
            um.step_mut(k).set(i, c, u.step(k).get(i, c) - h);
            let fd = (objective(&d, &grid, &oracle, &target, &x0, &up, rho)
                - objective(&d, &grid, &oracle, &target, &x0, &um, rho))
                / (2.0 * h);
            let g = grad.step(k).get(i, c);
            assert!((fd - g).abs() / g.abs().max(1e-6) < 1e-4, "k={k} i={i} c={c}: fd {fd} adj {g}");
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = analytic_setup("edm");
        let grid = grid_for(&d, 40);
        let oracle = RbfOracle::from_mixture(&MixtureSpec::default_toy(&[0.5, 0.5]).unwrap(), 1.0).unwrap();
        let target = TargetSpec::single("class", vec![0.5, 0.5]).unwrap();
        let x0 = d.sample_prior(&mut Rng::new(1), 64);
        for cfg in [
            SolverConfig {
                rho: 0.0,
                ..SolverConfig::default()
            },
            SolverConfig {
                xi: 1.0,
                ..SolverConfig::default()
            },
            SolverConfig {
                u_max: Some(0.0),
                ..SolverConfig::default()
            },
            SolverConfig {
                batch: 32,
                ..SolverConfig::default()
            },
        ] {
            assert!(solve_emsa(&d, &grid, &oracle, &target, &cfg, &x0).is_err());
        }
    }

    #[test]
    fn report_round_trips_and_is_seed_deterministic() {
        let mixture = MixtureSpec::default_toy(&[0.8, 0.2]).unwrap();
        let oracle = RbfOracle::from_mixture(&mixture, 3.0).unwrap();
        let target = TargetSpec::single("class", vec![0.5, 0.5]).unwrap();
        let d = analytic_setup("edm");
        let grid = grid_for(&d, 10);
        let cfg = SolverConfig {
            batch: 8,
            steps: 10,
            max_iters: 4,
            ..SolverConfig::default()
        };
        let run = || {
            let x0 = d.sample_prior(&mut Rng::new(cfg.seed), 8);
            solve_emsa(&d, &grid, &oracle, &target, &cfg, &x0).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.state, b.state);
        let strip = |r: &RunReport| {
            r.iterations
                .iter()
                .map(|it| (it.total_cost, it.terminal_cost, it.control_energy))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.report), strip(&b.report));
        let back = RunReport::from_json(&a.report.to_json().unwrap()).unwrap();
        assert_eq!(back, a.report);
        assert!(a.report.iterations.iter().all(|it| it.total_cost.is_finite()));
    }
}
