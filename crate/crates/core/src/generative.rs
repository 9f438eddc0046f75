//! Pretrained dynamics for the toy setting: closed-form Gaussian-mixture
//! fields used as exact oracles, and small trained networks for the three
//! sampler families (score, noise prediction, velocity).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffnet::{Adam, Checkpoint, HeadKind, MlpNet};
use crate::error::{check_len, Error, Result};
use crate::numerics::{axpy, dot, log_sum_exp, softmax, squared_distance, Matrix, Rng};

/// Smallest noise level fed to a learned network's time input.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub stddev: f64,
    /// Class index of this component on each attribute axis.
    #[serde(default)]
    pub attrs: BTreeMap<String, usize>,
}

/// Isotropic Gaussian mixture with per-component attribute labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub components: Vec<Component>,
}

impl MixtureSpec {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .components
            .first()
            .ok_or_else(|| Error::Config("mixture has no components".into()))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Config("mixture means must be non-empty".into()));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
        }
        let axes: Vec<&String> = first.attrs.keys().collect();
        for (i, c) in self.components.iter().enumerate() {
            check_len("mixture component mean", dim, c.mean.len())?;
            if !(c.weight >= 0.0) || !(c.stddev > 0.0) || c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config(format!(
                    "component {i}: weight must be >= 0, stddev > 0, mean finite"
                )));
            }
            if c.attrs.keys().collect::<Vec<_>>() != axes {
                return Err(Error::Config(format!(
                    "component {i} does not label the same attribute axes as component 0"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    /// Attribute axes as `(name, class count)` in name order.
    pub fn axes(&self) -> Vec<(String, usize)> {
        self.components[0]
            .attrs
            .keys()
            .map(|name| {
                let classes = self.components.iter().map(|c| c.attrs[name]).max().unwrap_or(0) + 1;
                (name.clone(), classes)
            })
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    /// `k` equal-stddev components evenly spaced on a circle in the plane;
    /// axis `"class"` is the component index.
    pub fn circle(weights: &[f64], radius: f64, stddev: f64) -> Result<Self> {
        let k = weights.len();
        let components = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let angle = std::f64::consts::TAU * j as f64 / k as f64;
                Component {
                    weight: w,
                    mean: vec![radius * angle.cos(), radius * angle.sin()],
                    stddev,
                    attrs: BTreeMap::from([("class".to_string(), j)]),
                }
            })
            .collect();
        Self::new(components)
    }

    /// Default single-attribute toy: radius 4, stddev 0.5.
    pub fn default_toy(weights: &[f64]) -> Result<Self> {
        Self::circle(weights, 4.0, 0.5)
    }

    /// Four components at the diagonal angles 45°, 135°, 225°, 315° with two
    /// binary axes: `"x_sign"` = half-plane of the mean's x coordinate and
    /// `"y_sign"` = half-plane of its y coordinate (1 for positive).
    pub fn two_axis(weights: [f64; 4], radius: f64, stddev: f64) -> Result<Self> {
        let components = weights
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let angle = std::f64::consts::FRAC_PI_4 + std::f64::consts::FRAC_PI_2 * j as f64;
                let mean = vec![radius * angle.cos(), radius * angle.sin()];
                let attrs = BTreeMap::from([
                    ("x_sign".to_string(), usize::from(mean[0] > 0.0)),
                    ("y_sign".to_string(), usize::from(mean[1] > 0.0)),
                ]);
                Component {
                    weight: w,
                    mean,
                    stddev,
                    attrs,
                }
            })
            .collect();
        Self::new(components)
    }

    pub fn single_gaussian(mean: Vec<f64>, stddev: f64) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean,
            stddev,
            attrs: BTreeMap::from([("class".to_string(), 0)]),
        }])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MixtureSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Log-weights plus log-densities of `N(x; μ_j, v_j I)` with `v_j = s_j² + σ²`.
    fn component_log_terms(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let n = x.len() as f64;
        self.components
            .iter()
            .map(|c| {
                let var = c.stddev * c.stddev + sigma * sigma;
                c.weight.ln()
                    - squared_distance(x, &c.mean) / (2.0 * var)
                    - 0.5 * n * (std::f64::consts::TAU * var).ln()
            })
            .collect()
    }

    /// `log Σ_j w_j N(x; μ_j, (s_j² + σ²) I)`.
    pub fn log_density(&self, x: &[f64], sigma: f64) -> f64 {
        log_sum_exp(&self.component_log_terms(x, sigma))
    }

    /// Posterior component probabilities at noise level `sigma`.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        softmax(&self.component_log_terms(x, sigma))
    }

    /// Most probable component for a clean sample.
    pub fn classify(&self, x: &[f64]) -> usize {
        let r = self.responsibilities(x, 0.0);
        r.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }

    /// `∇_x log p_σ(x)` of the mixture convolved with `N(0, σ² I)`.
    pub fn score(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let r = self.responsibilities(x, sigma);
        let mut s = vec![0.0; x.len()];
        for (c, rj) in self.components.iter().zip(&r) {
            let var = c.stddev * c.stddev + sigma * sigma;
            for d in 0..x.len() {
                s[d] -= rj * (x[d] - c.mean[d]) / var;
            }
        }
        s
    }

    /// `(∇_x score)ᵀ v`; the score Jacobian is the symmetric log-density Hessian
    /// `Σ r_j (a_j a_jᵀ − I/v_j) − s sᵀ` with `a_j = −(x − μ_j)/v_j`.
    pub fn score_vjp(&self, x: &[f64], sigma: f64, v: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x, sigma);
        let n = x.len();
        let mut s = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut a = vec![0.0; n];
        for (c, &rj) in self.components.iter().zip(&r) {
            let var = c.stddev * c.stddev + sigma * sigma;
            for d in 0..n {
                a[d] = -(x[d] - c.mean[d]) / var;
            }
            axpy(rj, &a, &mut s);
            axpy(rj * dot(&a, v), &a, &mut out);
            axpy(-rj / var, v, &mut out);
        }
        let sv = dot(&s, v);
        axpy(-sv, &s, &mut out);
        out
    }

    fn flow_terms(&self, x: &[f64], tau: f64) -> (Vec<f64>, Vec<(f64, f64, Vec<f64>)>) {
        // per component: (c_j, V_j, d_j = x - (1-τ) μ_j)
        let n = x.len() as f64;
        let mut logs = Vec::with_capacity(self.components.len());
        let mut terms = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let s2 = c.stddev * c.stddev;
            let var = (1.0 - tau) * (1.0 - tau) * s2 + tau * tau;
            let d: Vec<f64> = x.iter().zip(&c.mean).map(|(xi, m)| xi - (1.0 - tau) * m).collect();
            logs.push(
                c.weight.ln() - dot(&d, &d) / (2.0 * var) - 0.5 * n * (std::f64::consts::TAU * var).ln(),
            );
            terms.push(((tau - (1.0 - tau) * s2) / var, var, d));
        }
        (softmax(&logs), terms)
    }

    /// Exact flow-matching velocity `E[x₁ − x₀ | x_τ = x]` for the linear path
    /// `x_τ = (1 − τ) x₀ + τ x₁`, `x₀` from the mixture, `x₁ ~ N(0, I)`.
    pub fn velocity(&self, x: &[f64], tau: f64) -> Vec<f64> {
        let (r, terms) = self.flow_terms(x, tau);
        let mut v = vec![0.0; x.len()];
        for ((c, rj), (cj, _, d)) in self.components.iter().zip(&r).zip(&terms) {
            for k in 0..x.len() {
                v[k] += rj * (cj * d[k] - c.mean[k]);
            }
        }
        v
    }

    /// `(∂velocity/∂x)ᵀ w`.
    pub fn velocity_vjp(&self, x: &[f64], tau: f64, w: &[f64]) -> Vec<f64> {
        let (r, terms) = self.flow_terms(x, tau);
        let n = x.len();
        // ā = Σ r_j a_j with a_j = −d_j / V_j
        let mut a_bar = vec![0.0; n];
        for (rj, (_, var, d)) in r.iter().zip(&terms) {
            axpy(-rj / var, d, &mut a_bar);
        }
        let mut out = vec![0.0; n];
        for ((c, &rj), (cj, var, d)) in self.components.iter().zip(&r).zip(&terms) {
            axpy(rj * cj, w, &mut out);
            let vj_dot_w: f64 = (0..n).map(|k| (cj * d[k] - c.mean[k]) * w[k]).sum();
            for k in 0..n {
                out[k] += rj * (-d[k] / var - a_bar[k]) * vj_dot_w;
            }
        }
        out
    }

    /// Draws `count` samples; returns them with their component indices.
    pub fn sample(&self, rng: &mut Rng, count: usize) -> (Matrix, Vec<usize>) {
        let weights = self.weights();
        let n = self.dim();
        let mut x = Matrix::zeros(count, n);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let j = rng.categorical(&weights);
            let c = &self.components[j];
            for (d, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = c.mean[d] + c.stddev * rng.standard_normal();
            }
            labels.push(j);
        }
        (x, labels)
    }

    /// Draws from the mixture after replacing its component weights.
    pub fn reweighted(&self, weights: &[f64]) -> Result<Self> {
        check_len("reweighted mixture", self.components.len(), weights.len())?;
        let total: f64 = weights.iter().sum();
        let mut out = self.clone();
        for (c, w) in out.components.iter_mut().zip(weights) {
            c.weight = w / total;
        }
        out.validate()?;
        Ok(out)
    }
}

/// Discrete DDIM noise schedule: `ᾱ` decreasing linearly over `levels` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub alpha_bar_start: f64,
    pub alpha_bar_end: f64,
    pub levels: usize,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            alpha_bar_start: 0.9999,
            alpha_bar_end: 0.01,
            levels: 100,
        }
    }
}

impl AlphaSchedule {
    pub fn alpha_bar(&self, level: usize) -> f64 {
        let frac = level as f64 / (self.levels - 1) as f64;
        self.alpha_bar_start + frac * (self.alpha_bar_end - self.alpha_bar_start)
    }

    /// `σ = sqrt((1 − ᾱ)/ᾱ)` at a discrete level.
    pub fn sigma(&self, level: usize) -> f64 {
        let a = self.alpha_bar(level);
        ((1.0 - a) / a).sqrt()
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma(self.levels - 1)
    }
}

/// Noise-level conditioning fed to score and noise networks.
#[inline]
pub fn noise_feature(sigma: f64) -> f64 {
    0.25 * sigma.max(SIGMA_FLOOR).ln()
}

/// A pretrained vector-field model in one of the supported families.
#[derive(Debug, Clone)]
pub enum GenerativeModel {
    /// Closed-form fields of a Gaussian mixture; usable by every instance.
    AnalyticMixture(MixtureSpec),
    /// `s(x, σ) = net(x / sqrt(σ² + σ_data²), ln(σ)/4) / σ`.
    LearnedScore { net: MlpNet, sigma_data: f64 },
    /// `ε(x_t, σ) = net(x_t, ln(σ)/4)` on variance-preserving inputs.
    LearnedNoise { net: MlpNet },
    /// `v(x, τ) = net(x, τ)`, data at `τ = 0`, noise at `τ = 1`.
    LearnedVelocity { net: MlpNet },
}

impl GenerativeModel {
    pub fn state_dim(&self) -> usize {
        match self {
            GenerativeModel::AnalyticMixture(m) => m.dim(),
            GenerativeModel::LearnedScore { net, .. }
            | GenerativeModel::LearnedNoise { net }
            | GenerativeModel::LearnedVelocity { net } => net.state_dim(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            GenerativeModel::AnalyticMixture(_) => "analytic-score",
            GenerativeModel::LearnedScore { .. } => "learned-score",
            GenerativeModel::LearnedNoise { .. } => "learned-noise",
            GenerativeModel::LearnedVelocity { .. } => "learned-velocity",
        }
    }

    fn unsupported(&self, what: &str) -> Error {
        Error::Unsupported(format!("{} model does not provide {what}", self.kind_name()))
    }

    /// `σ · s(x, σ)`: the noise-scaled score, finite as `σ → 0` for learned heads.
    pub fn scaled_score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            GenerativeModel::AnalyticMixture(m) => {
                let mut s = m.score(x, sigma);
                s.iter_mut().for_each(|v| *v *= sigma);
                Ok(s)
            }
            GenerativeModel::LearnedScore { net, sigma_data } => {
                let c_in = 1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt();
                let xin: Vec<f64> = x.iter().map(|v| v * c_in).collect();
                net.forward(&xin, noise_feature(sigma))
            }
            GenerativeModel::LearnedNoise { .. } => {
                // σ s(x̃, σ) = −ε(x̃ / sqrt(1 + σ²), σ)
                let scale = 1.0 / (1.0 + sigma * sigma).sqrt();
                let xin: Vec<f64> = x.iter().map(|v| v * scale).collect();
                let mut e = self.noise(&xin, sigma)?;
                e.iter_mut().for_each(|v| *v = -*v);
                Ok(e)
            }
            GenerativeModel::LearnedVelocity { .. } => Err(self.unsupported("a score")),
        }
    }

    /// `(∂(σ s)/∂x)ᵀ v`.
    pub fn scaled_score_vjp(&self, x: &[f64], sigma: f64, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            GenerativeModel::AnalyticMixture(m) => {
                let mut g = m.score_vjp(x, sigma, v);
                g.iter_mut().for_each(|e| *e *= sigma);
                Ok(g)
            }
            GenerativeModel::LearnedScore { net, sigma_data } => {
                let c_in = 1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt();
                let xin: Vec<f64> = x.iter().map(|e| e * c_in).collect();
                let mut g = net.input_vjp(&xin, noise_feature(sigma), v)?;
                g.iter_mut().for_each(|e| *e *= c_in);
                Ok(g)
            }
            GenerativeModel::LearnedNoise { .. } => {
                let scale = 1.0 / (1.0 + sigma * sigma).sqrt();
                let xin: Vec<f64> = x.iter().map(|e| e * scale).collect();
                let mut g = self.noise_vjp(&xin, sigma, v)?;
                g.iter_mut().for_each(|e| *e *= -scale);
                Ok(g)
            }
            GenerativeModel::LearnedVelocity { .. } => Err(self.unsupported("a score")),
        }
    }

    /// Noise prediction `ε(x_t, σ)` for a variance-preserving input `x_t`.
    pub fn noise(&self, x_t: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            GenerativeModel::LearnedNoise { net } => net.forward(x_t, noise_feature(sigma)),
            GenerativeModel::AnalyticMixture(_) | GenerativeModel::LearnedScore { .. } => {
                // ε = −σ s(x̃, σ) with x̃ = x_t sqrt(1 + σ²)
                let up = (1.0 + sigma * sigma).sqrt();
                let xt: Vec<f64> = x_t.iter().map(|v| v * up).collect();
                let mut e = self.scaled_score(&xt, sigma)?;
                e.iter_mut().for_each(|v| *v = -*v);
                Ok(e)
            }
            GenerativeModel::LearnedVelocity { .. } => Err(self.unsupported("a noise prediction")),
        }
    }

    /// `(∂ε/∂x_t)ᵀ v`.
    pub fn noise_vjp(&self, x_t: &[f64], sigma: f64, v: &[f64]) -> Result<Vec<f64>> {
        match self {
            GenerativeModel::LearnedNoise { net } => net.input_vjp(x_t, noise_feature(sigma), v),
            GenerativeModel::AnalyticMixture(_) | GenerativeModel::LearnedScore { .. } => {
                let up = (1.0 + sigma * sigma).sqrt();
                let xt: Vec<f64> = x_t.iter().map(|e| e * up).collect();
                let mut g = self.scaled_score_vjp(&xt, sigma, v)?;
                g.iter_mut().for_each(|e| *e *= -up);
                Ok(g)
            }
            GenerativeModel::LearnedVelocity { .. } => Err(self.unsupported("a noise prediction")),
        }
    }

    /// Velocity `v(x, τ)` with data at `τ = 0` and noise at `τ = 1`.
    pub fn velocity(&self, x: &[f64], tau: f64) -> Result<Vec<f64>> {
        match self {
            GenerativeModel::AnalyticMixture(m) => Ok(m.velocity(x, tau)),
            GenerativeModel::LearnedVelocity { net } => net.forward(x, tau),
            _ => Err(self.unsupported("a velocity")),
        }
    }

    pub fn velocity_vjp(&self, x: &[f64], tau: f64, w: &[f64]) -> Result<Vec<f64>> {
        match self {
            GenerativeModel::AnalyticMixture(m) => Ok(m.velocity_vjp(x, tau, w)),
            GenerativeModel::LearnedVelocity { net } => net.input_vjp(x, tau, w),
            _ => Err(self.unsupported("a velocity")),
        }
    }
}

impl GenerativeModel {
    /// Checkpoint of a learned model; analytic mixtures have no weights.
    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        let mut ckpt = match self {
            GenerativeModel::AnalyticMixture(_) => {
                return Err(Error::Unsupported("checkpointing an analytic mixture".into()))
            }
            GenerativeModel::LearnedScore { net, sigma_data } => {
                let mut c = Checkpoint::from_net(net, HeadKind::Score, seed);
                c.conditioning.sigma_data = Some(*sigma_data);
                c
            }
            GenerativeModel::LearnedNoise { net } => Checkpoint::from_net(net, HeadKind::Noise, seed),
            GenerativeModel::LearnedVelocity { net } => {
                let mut c = Checkpoint::from_net(net, HeadKind::Velocity, seed);
                c.conditioning.time_direction = Some(VELOCITY_TIME_DIRECTION.into());
                c
            }
        };
        ckpt.optimizer = None;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let net = ckpt.to_net()?;
        match ckpt.head_kind {
            HeadKind::Score => {
                let sigma_data = ckpt
                    .conditioning
                    .sigma_data
                    .ok_or_else(|| Error::Config("score checkpoint lacks sigma_data".into()))?;
                Ok(GenerativeModel::LearnedScore { net, sigma_data })
            }
            HeadKind::Noise => Ok(GenerativeModel::LearnedNoise { net }),
            HeadKind::Velocity => match ckpt.conditioning.time_direction.as_deref() {
                None | Some(VELOCITY_TIME_DIRECTION) => Ok(GenerativeModel::LearnedVelocity { net }),
                Some(other) => Err(Error::Config(format!("unsupported velocity time direction '{other}'"))),
            },
            HeadKind::Oracle => Err(Error::Config("oracle checkpoint is not a generative model".into())),
        }
    }
}

/// Minibatch training settings shared by all regressors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 256,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: MlpNet,
    /// Mean loss over the last (up to) 100 steps; `None` when no steps ran.
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
}

/// Linear decay from `cfg.lr` to zero; regression targets here are noisy and
/// a constant rate leaves the weights jittering around the optimum.
fn decayed_lr(cfg: &TrainConfig, step: usize) -> f64 {
    cfg.lr * (1.0 - step as f64 / cfg.steps as f64)
}

/// One regression problem: fill `inputs`, `times`, `targets` for a minibatch.
trait BatchSource {
    fn fill(&mut self, rng: &mut Rng, inputs: &mut Matrix, times: &mut [f64], targets: &mut Matrix);
}

fn train_regression(
    mut net: MlpNet,
    cfg: &TrainConfig,
    rng: &mut Rng,
    source: &mut dyn BatchSource,
) -> Result<TrainOutcome> {
    let n = net.state_dim();
    let out_dim = net.output_dim();
    let b = cfg.batch_size.max(1);
    let mut opt = Adam::new(net.num_parameters(), cfg.lr);
    let mut params = net.parameters();
    let mut inputs = Matrix::zeros(b, n);
    let mut times = vec![0.0; b];
    let mut targets = Matrix::zeros(b, out_dim);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        source.fill(rng, &mut inputs, &mut times, &mut targets);
        let mut cot = Matrix::zeros(b, out_dim);
        let mut loss = 0.0;
        for i in 0..b {
            let pred = net.forward(inputs.row(i), times[i])?;
            for (k, (p, y)) in pred.iter().zip(targets.row(i)).enumerate() {
                let r = p - y;
                loss += r * r;
                cot.set(i, k, 2.0 * r / b as f64);
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        let grad = net.param_grad(&inputs, &times, &cot)?;
        opt.lr = decayed_lr(cfg, step);
        opt.update(&mut params, &grad.parameters());
        net.set_parameters(&params)?;
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    Ok(TrainOutcome { net, final_loss, losses })
}

fn check_head(net: &MlpNet, mixture: &MixtureSpec) -> Result<()> {
    check_len("network state dim vs mixture", mixture.dim(), net.state_dim())?;
    check_len("network head dim vs mixture", mixture.dim(), net.output_dim())
}

/// Log-uniform noise levels for denoising score matching.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevels {
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl NoiseLevels {
    fn draw(&self, rng: &mut Rng) -> f64 {
        rng.uniform_range(self.sigma_min.ln(), self.sigma_max.ln()).exp()
    }
}

/// Root-mean-square distance of mixture draws from the origin per coordinate,
/// used as `σ_data` for input normalization.
pub fn data_scale(mixture: &MixtureSpec) -> f64 {
    let n = mixture.dim() as f64;
    let second_moment: f64 = mixture
        .components
        .iter()
        .map(|c| c.weight * (dot(&c.mean, &c.mean) / n + c.stddev * c.stddev))
        .sum();
    second_moment.sqrt()
}

/// Denoising score matching with weighting `λ(σ) = σ²`:
/// `E ‖σ s(x + σε, σ) + ε‖²`, `σ` log-uniform on `levels`.
/// The network regresses the noise-scaled score directly.
pub fn train_score_dsm(
    net: MlpNet,
    sigma_data: f64,
    mixture: &MixtureSpec,
    levels: NoiseLevels,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    check_head(&net, mixture)?;
    struct Dsm<'a> {
        mixture: &'a MixtureSpec,
        levels: NoiseLevels,
        sigma_data: f64,
    }
    impl BatchSource for Dsm<'_> {
        fn fill(&mut self, rng: &mut Rng, inputs: &mut Matrix, times: &mut [f64], targets: &mut Matrix) {
            let (clean, _) = self.mixture.sample(rng, inputs.rows());
            for i in 0..inputs.rows() {
                let sigma = self.levels.draw(rng);
                let c_in = 1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt();
                for d in 0..inputs.cols() {
                    let eps = rng.standard_normal();
                    inputs.set(i, d, (clean.get(i, d) + sigma * eps) * c_in);
                    targets.set(i, d, -eps);
                }
                times[i] = noise_feature(sigma);
            }
        }
    }
    train_regression(
        net,
        cfg,
        rng,
        &mut Dsm {
            mixture,
            levels,
            sigma_data,
        },
    )
}

/// Noise-prediction regression `‖ε(√ᾱ x₀ + √(1−ᾱ) ε, σ) − ε‖²` with the level
/// drawn uniformly from the discrete schedule.
pub fn train_noise_pred(
    net: MlpNet,
    mixture: &MixtureSpec,
    schedule: &AlphaSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    check_head(&net, mixture)?;
    struct Ddpm<'a> {
        mixture: &'a MixtureSpec,
        schedule: &'a AlphaSchedule,
    }
    impl BatchSource for Ddpm<'_> {
        fn fill(&mut self, rng: &mut Rng, inputs: &mut Matrix, times: &mut [f64], targets: &mut Matrix) {
            let (clean, _) = self.mixture.sample(rng, inputs.rows());
            for i in 0..inputs.rows() {
                let level = rng.index(self.schedule.levels);
                let a = self.schedule.alpha_bar(level);
                for d in 0..inputs.cols() {
                    let eps = rng.standard_normal();
                    inputs.set(i, d, a.sqrt() * clean.get(i, d) + (1.0 - a).sqrt() * eps);
                    targets.set(i, d, eps);
                }
                times[i] = noise_feature(self.schedule.sigma(level));
            }
        }
    }
    train_regression(net, cfg, rng, &mut Ddpm { mixture, schedule })
}

/// Time-direction tag written into velocity checkpoints.
pub const VELOCITY_TIME_DIRECTION: &str = "data-at-0,noise-at-1";

/// Conditional flow matching on the linear path `x_τ = (1−τ) x₀ + τ x₁`,
/// regressing `v(x_τ, τ)` onto `x₁ − x₀` (`x₀` data, `x₁ ~ N(0, I)`).
pub fn train_velocity_fm(
    net: MlpNet,
    mixture: &MixtureSpec,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    check_head(&net, mixture)?;
    struct Fm<'a> {
        mixture: &'a MixtureSpec,
    }
    impl BatchSource for Fm<'_> {
        fn fill(&mut self, rng: &mut Rng, inputs: &mut Matrix, times: &mut [f64], targets: &mut Matrix) {
            let (clean, _) = self.mixture.sample(rng, inputs.rows());
            for i in 0..inputs.rows() {
                let tau = rng.uniform();
                for d in 0..inputs.cols() {
                    let x0 = clean.get(i, d);
                    let x1 = rng.standard_normal();
                    inputs.set(i, d, (1.0 - tau) * x0 + tau * x1);
                    targets.set(i, d, x1 - x0);
                }
                times[i] = tau;
            }
        }
    }
    train_regression(net, cfg, rng, &mut Fm { mixture })
}

/// Cross-entropy training of a logit head for one attribute axis on clean
/// mixture draws.
pub fn train_classifier(
    mut net: MlpNet,
    mixture: &MixtureSpec,
    axis: &str,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    check_len("classifier state dim", mixture.dim(), net.state_dim())?;
    let (_, classes) = mixture
        .axes()
        .into_iter()
        .find(|(name, _)| name == axis)
        .ok_or_else(|| Error::Config(format!("mixture has no attribute axis '{axis}'")))?;
    check_len("classifier head dim", classes, net.output_dim())?;
    let b = cfg.batch_size.max(1);
    let mut opt = Adam::new(net.num_parameters(), cfg.lr);
    let mut params = net.parameters();
    let times = vec![0.0; b];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x, labels) = mixture.sample(rng, b);
        let mut cot = Matrix::zeros(b, classes);
        let mut loss = 0.0;
        for i in 0..b {
            let target = mixture.components[labels[i]].attrs[axis];
            let logits = net.forward(x.row(i), 0.0)?;
            let p = softmax(&logits);
            loss -= p[target].max(1e-300).ln();
            for (k, pk) in p.iter().enumerate() {
                let onehot = if k == target { 1.0 } else { 0.0 };
                cot.set(i, k, (pk - onehot) / b as f64);
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        let grad = net.param_grad(&x, &times, &cot)?;
        opt.lr = decayed_lr(cfg, step);
        opt.update(&mut params, &grad.parameters());
        net.set_parameters(&params)?;
    }
    let tail = &losses[losses.len().saturating_sub(100)..];
    let final_loss = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    Ok(TrainOutcome { net, final_loss, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::TimeEmbedding;

    fn fd_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|d| {
                let mut xp = x.to_vec();
                xp[d] += h;
                let mut xm = x.to_vec();
                xm[d] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn single_component_score_closed_form() {
        let m = MixtureSpec::single_gaussian(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(m.score(&[2.0, 0.0], 0.0), vec![-2.0, 0.0]);
        for sigma in [0.0, 0.5, 3.0] {
            let s = m.score(&[1.5, -0.5], sigma);
            let v = 1.0 + sigma * sigma;
            assert!((s[0] + 1.5 / v).abs() < 1e-15 && (s[1] - 0.5 / v).abs() < 1e-15);
        }
    }

    #[test]
    fn symmetric_pair_has_zero_score_at_origin() {
        let m = MixtureSpec::circle(&[0.5, 0.5], 3.0, 0.7).unwrap();
        let s = m.score(&[0.0, 0.0], 0.4);
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn score_matches_log_density_differences() {
        let m = MixtureSpec::default_toy(&[0.5, 0.2, 0.3]).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let x = [3.0 * rng.standard_normal(), 3.0 * rng.standard_normal()];
            let sigma = rng.uniform_range(0.0, 3.0);
            let s = m.score(&x, sigma);
            let fd = fd_grad(|y| m.log_density(y, sigma), &x);
            for d in 0..2 {
                assert!((s[d] - fd[d]).abs() <= 1e-6 * (1.0 + s[d].abs()), "{s:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn score_vjp_matches_finite_differences() {
        let m = MixtureSpec::default_toy(&[0.6, 0.4]).unwrap();
        let mut rng = Rng::new(10);
        for _ in 0..30 {
            let x = [3.0 * rng.standard_normal(), 3.0 * rng.standard_normal()];
            let v = [rng.standard_normal(), rng.standard_normal()];
            let sigma = rng.uniform_range(0.1, 3.0);
            let g = m.score_vjp(&x, sigma, &v);
            let fd = fd_grad(|y| dot(&v, &m.score(y, sigma)), &x);
            for d in 0..2 {
                assert!((g[d] - fd[d]).abs() <= 1e-6 * (1.0 + g[d].abs()));
            }
        }
    }

    #[test]
    fn velocity_vjp_matches_finite_differences() {
        let m = MixtureSpec::default_toy(&[0.7, 0.3]).unwrap();
        let mut rng = Rng::new(12);
        for _ in 0..30 {
            let x = [2.0 * rng.standard_normal(), 2.0 * rng.standard_normal()];
            let w = [rng.standard_normal(), rng.standard_normal()];
            let tau = rng.uniform_range(0.05, 1.0);
            let g = m.velocity_vjp(&x, tau, &w);
            let fd = fd_grad(|y| dot(&w, &m.velocity(y, tau)), &x);
            for d in 0..2 {
                assert!((g[d] - fd[d]).abs() <= 1e-6 * (1.0 + g[d].abs()));
            }
        }
    }

    #[test]
    fn standard_normal_data_velocity_is_linear() {
        // linear path with x₀, x₁ ~ N(0, I): v = (2τ − 1) / ((1 − τ)² + τ²) · x
        let m = MixtureSpec::single_gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let x = [1.2, -0.7];
        for tau in [0.0, 0.3, 0.5, 0.8, 1.0] {
            let c = (2.0 * tau - 1.0) / ((1.0 - tau) * (1.0 - tau) + tau * tau);
            let v = m.velocity(&x, tau);
            for k in 0..2 {
                assert!((v[k] - c * x[k]).abs() < 1e-12);
            }
        }
        assert!(m.velocity(&x, 0.5).iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn invalid_mixtures_rejected() {
        let bad_weights = r#"{"components":[{"weight":0.4,"mean":[0,0],"stddev":1}]}"#;
        assert!(MixtureSpec::from_json(bad_weights).is_err());
        let bad_std = r#"{"components":[{"weight":1.0,"mean":[0,0],"stddev":0}]}"#;
        assert!(MixtureSpec::from_json(bad_std).is_err());
        let missing_axis = r#"{"components":[
            {"weight":0.5,"mean":[0,0],"stddev":1,"attrs":{"a":0}},
            {"weight":0.5,"mean":[1,0],"stddev":1,"attrs":{}}]}"#;
        assert!(MixtureSpec::from_json(missing_axis).is_err());
    }

    #[test]
    fn two_axis_labels_follow_half_planes() {
        let m = MixtureSpec::two_axis([0.25; 4], 4.0, 0.5).unwrap();
        assert_eq!(m.axes(), vec![("x_sign".into(), 2), ("y_sign".into(), 2)]);
        for c in &m.components {
            assert_eq!(c.attrs["x_sign"], usize::from(c.mean[0] > 0.0));
            assert_eq!(c.attrs["y_sign"], usize::from(c.mean[1] > 0.0));
        }
    }

    #[test]
    fn zero_steps_leave_net_unchanged() {
        let m = MixtureSpec::single_gaussian(vec![0.0, 0.0], 1.0).unwrap();
        let mut rng = Rng::new(1);
        let net = MlpNet::new(&[3, 8, 2], TimeEmbedding::RawScalar, &mut rng).unwrap();
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train_velocity_fm(net.clone(), &m, &cfg, &mut rng).unwrap();
        assert_eq!(out.net, net);
        assert!(out.final_loss.is_none());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let m = MixtureSpec::default_toy(&[0.5, 0.5]).unwrap();
        let cfg = TrainConfig {
            steps: 20,
            batch_size: 16,
            lr: 1e-3,
        };
        let run = || {
            let mut rng = Rng::new(42);
            let net = MlpNet::new(&[3, 8, 2], TimeEmbedding::RawScalar, &mut rng).unwrap();
            train_noise_pred(net, &m, &AlphaSchedule::default(), &cfg, &mut rng)
                .unwrap()
                .net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wrong_head_dim_rejected() {
        let m = MixtureSpec::default_toy(&[0.5, 0.5]).unwrap();
        let mut rng = Rng::new(1);
        let net = MlpNet::new(&[3, 8, 3], TimeEmbedding::RawScalar, &mut rng).unwrap();
        assert!(train_velocity_fm(net, &m, &TrainConfig::default(), &mut rng).is_err());
    }

    #[test]
    fn learned_noise_and_score_views_agree_for_analytic_model() {
        // ε(x_t) = −σ s(x_t sqrt(1+σ²), σ) for the analytic mixture
        let m = MixtureSpec::default_toy(&[0.3, 0.7]).unwrap();
        let model = GenerativeModel::AnalyticMixture(m.clone());
        let sigma = 1.7;
        let x_t = [0.4, -0.9];
        let e = model.noise(&x_t, sigma).unwrap();
        let up = (1.0 + sigma * sigma).sqrt();
        let s = m.score(&[x_t[0] * up, x_t[1] * up], sigma);
        for d in 0..2 {
            assert!((e[d] + sigma * s[d]).abs() < 1e-14);
        }
    }
}
