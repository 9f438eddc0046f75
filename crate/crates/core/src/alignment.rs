//! Attribute oracles, batch attribute distributions, the KL terminal cost and
//! evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::diffnet::{MlpNet, TimeEmbedding};
use crate::error::{check_len, Error, Result};
use crate::generative::MixtureSpec;
use crate::numerics::{fit_gaussian, softmax, squared_distance, Matrix};

/// Floor inside every `p ln p` so that `0 ln 0 = 0`.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default RBF oracle temperature. At 1.0 the default toy modes (radius 4)
/// sit 32 logits apart and the softmax gradient underflows; 2.0 keeps it usable.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// Log base and χ² form used by [`metrics`], echoed into reports.
pub const METRIC_CONVENTIONS: &str =
    "TV=0.5*sum|P-Q|; JS natural log; chi2 symmetric 0.5*sum (P-Q)^2/(P+Q); KL natural log with 1e-12 floor";

const SUM_TOLERANCE: f64 = 1e-9;

#[inline]
fn plogp(p: f64) -> f64 {
    p * p.max(PROB_FLOOR).ln()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| plogp(v)).sum::<f64>()
}

/// One attribute axis: a name and its class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub classes: usize,
}

/// Differentiable map from a sample to per-axis attribute logits.
pub trait Oracle {
    fn state_dim(&self) -> usize;

    fn axes(&self) -> Vec<Axis>;

    /// Logits for each axis.
    fn logits(&self, x: &[f64]) -> Result<Vec<Vec<f64>>>;

    /// `Σ_a (∂ logits_a / ∂x)ᵀ c_a`.
    fn logits_vjp(&self, x: &[f64], cotangents: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// RBF oracle: logit of class `j` is `−‖x − μ_j‖² / (2τ²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfOracle {
    pub temperature: f64,
    pub axes: Vec<RbfAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfAxis {
    pub name: String,
    pub centers: Vec<Vec<f64>>,
}

impl RbfOracle {
    pub fn new(temperature: f64, axes: Vec<RbfAxis>) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("oracle temperature must be positive, got {temperature}")));
        }
        if axes.is_empty() {
            return Err(Error::Config("oracle needs at least one axis".into()));
        }
        let dim = axes[0].centers.first().map_or(0, Vec::len);
        for axis in &axes {
            if axis.centers.len() < 2 {
                return Err(Error::Config(format!("axis {} needs at least two classes", axis.name)));
            }
            for c in &axis.centers {
                check_len("oracle center", dim, c.len())?;
            }
        }
        Ok(Self { temperature, axes })
    }

    /// One axis per mixture attribute; the class center is the mean of the
    /// component means carrying that class label.
    pub fn from_mixture(mixture: &MixtureSpec, temperature: f64) -> Result<Self> {
        let dim = mixture.dim();
        let mut axes = Vec::new();
        for (name, classes) in mixture.axes() {
            let mut centers = vec![vec![0.0; dim]; classes];
            let mut counts = vec![0usize; classes];
            for comp in &mixture.components {
                let c = comp.attrs[&name];
                for (acc, m) in centers[c].iter_mut().zip(&comp.mean) {
                    *acc += m;
                }
                counts[c] += 1;
            }
            for (c, n) in centers.iter_mut().zip(&counts) {
                if *n == 0 {
                    return Err(Error::Config(format!("class without components on axis {name}")));
                }
                c.iter_mut().for_each(|v| *v /= *n as f64);
            }
            axes.push(RbfAxis { name, centers });
        }
        Self::new(temperature, axes)
    }
}

impl Oracle for RbfOracle {
    fn state_dim(&self) -> usize {
        self.axes[0].centers[0].len()
    }

    fn axes(&self) -> Vec<Axis> {
        self.axes
            .iter()
            .map(|a| Axis {
                name: a.name.clone(),
                classes: a.centers.len(),
            })
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        check_len("oracle input", self.state_dim(), x.len())?;
        let scale = 0.5 / (self.temperature * self.temperature);
        Ok(self
            .axes
            .iter()
            .map(|a| a.centers.iter().map(|c| -scale * squared_distance(x, c)).collect())
            .collect())
    }

    fn logits_vjp(&self, x: &[f64], cotangents: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_len("oracle input", self.state_dim(), x.len())?;
        check_len("oracle cotangent axes", self.axes.len(), cotangents.len())?;
        let inv = 1.0 / (self.temperature * self.temperature);
        let mut out = vec![0.0; x.len()];
        for (axis, cot) in self.axes.iter().zip(cotangents) {
            check_len("oracle cotangent", axis.centers.len(), cot.len())?;
            for (c, w) in axis.centers.iter().zip(cot) {
                for k in 0..x.len() {
                    out[k] -= w * inv * (x[k] - c[k]);
                }
            }
        }
        Ok(out)
    }
}

/// Learned classifier heads, one network per axis.
#[derive(Debug, Clone)]
pub struct ClassifierOracle {
    heads: Vec<(String, MlpNet)>,
    /// Logits are divided by this; trained heads are overconfident and their
    /// softmax saturates on most of the support.
    temperature: f64,
}

impl ClassifierOracle {
    pub fn new(heads: Vec<(String, MlpNet)>) -> Result<Self> {
        if heads.is_empty() {
            return Err(Error::Config("classifier oracle needs at least one head".into()));
        }
        let dim = heads[0].1.state_dim();
        for (name, net) in &heads {
            check_len("classifier head input", dim, net.state_dim())?;
            if net.output_dim() < 2 {
                return Err(Error::Config(format!("classifier head {name} needs at least two logits")));
            }
            if *net.time_embedding() != TimeEmbedding::None {
                return Err(Error::Config(format!("classifier head {name} must not take a time input")));
            }
        }
        Ok(Self { heads, temperature: 1.0 })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("classifier temperature must be positive, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn heads(&self) -> &[(String, MlpNet)] {
        &self.heads
    }
}

impl Oracle for ClassifierOracle {
    fn state_dim(&self) -> usize {
        self.heads[0].1.state_dim()
    }

    fn axes(&self) -> Vec<Axis> {
        self.heads
            .iter()
            .map(|(name, net)| Axis {
                name: name.clone(),
                classes: net.output_dim(),
            })
            .collect()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.heads
            .iter()
            .map(|(_, net)| {
                let mut z = net.forward(x, 0.0)?;
                z.iter_mut().for_each(|v| *v /= self.temperature);
                Ok(z)
            })
            .collect()
    }

    fn logits_vjp(&self, x: &[f64], cotangents: &[Vec<f64>]) -> Result<Vec<f64>> {
        check_len("oracle cotangent axes", self.heads.len(), cotangents.len())?;
        let mut out = vec![0.0; x.len()];
        for ((_, net), cot) in self.heads.iter().zip(cotangents) {
            let g = net.input_vjp(x, 0.0, cot)?;
            for (o, gi) in out.iter_mut().zip(g) {
                *o += gi / self.temperature;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum AttributeOracle {
    Rbf(RbfOracle),
    Classifier(ClassifierOracle),
}

impl AttributeOracle {
    pub fn kind_name(&self) -> &'static str {
        match self {
            AttributeOracle::Rbf(_) => "analytic-rbf",
            AttributeOracle::Classifier(_) => "learned-classifier",
        }
    }

    fn inner(&self) -> &dyn Oracle {
        match self {
            AttributeOracle::Rbf(o) => o,
            AttributeOracle::Classifier(o) => o,
        }
    }
}

impl Oracle for AttributeOracle {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn axes(&self) -> Vec<Axis> {
        self.inner().axes()
    }
    fn logits(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.inner().logits(x)
    }
    fn logits_vjp(&self, x: &[f64], cotangents: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.inner().logits_vjp(x, cotangents)
    }
}

/// Per-axis probability vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDistribution {
    pub axes: Vec<Vec<f64>>,
}

impl AttributeDistribution {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        for (a, p) in axes.iter().enumerate() {
            validate_probs(p, &format!("axis {a}"))?;
        }
        Ok(Self { axes })
    }

    /// Outer product of the axes, flattened with axis 0 varying slowest.
    pub fn product(&self) -> Vec<f64> {
        outer_product(&self.axes)
    }
}

fn validate_probs(p: &[f64], what: &str) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Config(format!("{what}: probabilities must be finite and nonnegative")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Config(format!("{what}: probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

fn outer_product(factors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![1.0];
    for f in factors {
        out = out.iter().flat_map(|a| f.iter().map(move |b| a * b)).collect();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAxis {
    pub name: String,
    pub classes: usize,
    pub probs: Vec<f64>,
}

/// Target attribute distribution; when `joint`, the target over the class
/// product is the product of the per-axis marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub axes: Vec<TargetAxis>,
    #[serde(default)]
    pub joint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPreset {
    Uniform,
    Zigzag,
    Gaussian,
}

impl TargetPreset {
    pub fn probs(self, classes: usize) -> Vec<f64> {
        let raw: Vec<f64> = match self {
            TargetPreset::Uniform => vec![1.0; classes],
            TargetPreset::Zigzag => (0..classes).map(|j| if j % 2 == 0 { 2.0 } else { 1.0 }).collect(),
            TargetPreset::Gaussian => {
                let std = classes as f64 / 4.0;
                let mid = (classes as f64 - 1.0) / 2.0;
                (0..classes)
                    .map(|j| (-0.5 * ((j as f64 - mid) / std).powi(2)).exp())
                    .collect()
            }
        };
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

impl TargetSpec {
    pub fn new(axes: Vec<TargetAxis>, joint: bool) -> Result<Self> {
        let spec = Self { axes, joint };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::Config("target needs at least one axis".into()));
        }
        for a in &self.axes {
            check_len("target classes", a.classes, a.probs.len())?;
            validate_probs(&a.probs, &format!("target axis {}", a.name))?;
        }
        Ok(())
    }

    /// Same preset on every axis.
    pub fn preset(preset: TargetPreset, axes: &[Axis], joint: bool) -> Result<Self> {
        Self::new(
            axes.iter()
                .map(|a| TargetAxis {
                    name: a.name.clone(),
                    classes: a.classes,
                    probs: preset.probs(a.classes),
                })
                .collect(),
            joint,
        )
    }

    pub fn single(name: &str, probs: Vec<f64>) -> Result<Self> {
        Self::new(
            vec![TargetAxis {
                name: name.to_string(),
                classes: probs.len(),
                probs,
            }],
            false,
        )
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn marginals(&self) -> Vec<Vec<f64>> {
        self.axes.iter().map(|a| a.probs.clone()).collect()
    }

    /// Flattened product target (axis 0 slowest).
    pub fn joint_probs(&self) -> Vec<f64> {
        outer_product(&self.marginals())
    }

    /// Checks that the oracle axes match this target by name and size.
    pub fn check_oracle(&self, oracle: &dyn Oracle) -> Result<()> {
        let axes = oracle.axes();
        check_len("target axes vs oracle axes", axes.len(), self.axes.len())?;
        for (o, t) in axes.iter().zip(&self.axes) {
            if o.name != t.name {
                return Err(Error::Config(format!(
                    "target axis {} does not match oracle axis {}",
                    t.name, o.name
                )));
            }
            check_len("target classes vs oracle classes", o.classes, t.classes)?;
        }
        Ok(())
    }
}

/// How the joint attribute distribution is estimated from a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointEstimator {
    /// Batch mean of per-sample products of per-axis softmaxes.
    #[default]
    PerSampleProduct,
    /// Product of the batch-mean marginals.
    ProductOfMarginals,
}

/// Per-sample per-axis softmax probabilities.
pub fn sample_probabilities(oracle: &dyn Oracle, x: &Matrix) -> Result<Vec<Vec<Vec<f64>>>> {
    check_len("batch dim vs oracle", oracle.state_dim(), x.cols())?;
    x.iter_rows()
        .map(|row| Ok(oracle.logits(row)?.iter().map(|l| softmax(l)).collect()))
        .collect()
}

fn mean_marginals(probs: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let m = probs.len() as f64;
    let mut out: Vec<Vec<f64>> = probs[0].iter().map(|a| vec![0.0; a.len()]).collect();
    for sample in probs {
        for (acc, q) in out.iter_mut().zip(sample) {
            for (a, v) in acc.iter_mut().zip(q) {
                *a += v;
            }
        }
    }
    out.iter_mut().flatten().for_each(|v| *v /= m);
    out
}

fn mean_joint(probs: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let m = probs.len() as f64;
    let mut out = outer_product(&probs[0]);
    out.iter_mut().for_each(|v| *v = 0.0);
    for sample in probs {
        for (acc, v) in out.iter_mut().zip(outer_product(sample)) {
            *acc += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= m);
    out
}

/// `p̂ = (1/M) Σ_i softmax(Ψ(x_i))` per axis.
pub fn empirical_distribution(oracle: &dyn Oracle, x: &Matrix) -> Result<AttributeDistribution> {
    if x.rows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    let probs = sample_probabilities(oracle, x)?;
    Ok(AttributeDistribution {
        axes: mean_marginals(&probs),
    })
}

/// Argmax class per axis for every sample.
pub fn hard_labels(oracle: &dyn Oracle, x: &Matrix) -> Result<Vec<Vec<usize>>> {
    check_len("batch dim vs oracle", oracle.state_dim(), x.cols())?;
    x.iter_rows()
        .map(|row| {
            Ok(oracle
                .logits(row)?
                .iter()
                .map(|l| {
                    l.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                        .0
                })
                .collect())
        })
        .collect()
}

/// Normalized argmax histograms per axis.
pub fn hard_histogram(axes: &[Axis], labels: &[Vec<usize>]) -> Result<AttributeDistribution> {
    if labels.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    let mut out: Vec<Vec<f64>> = axes.iter().map(|a| vec![0.0; a.classes]).collect();
    for l in labels {
        check_len("label axes", axes.len(), l.len())?;
        for (hist, &c) in out.iter_mut().zip(l) {
            hist[c] += 1.0;
        }
    }
    let m = labels.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v /= m);
    Ok(AttributeDistribution { axes: out })
}

/// Normalized argmax histogram over the class product (axis 0 slowest).
pub fn hard_joint_histogram(axes: &[Axis], labels: &[Vec<usize>]) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    let size: usize = axes.iter().map(|a| a.classes).product();
    let mut out = vec![0.0; size];
    for l in labels {
        check_len("label axes", axes.len(), l.len())?;
        let idx = l.iter().zip(axes).fold(0, |acc, (&c, a)| acc * a.classes + c);
        out[idx] += 1.0;
    }
    let m = labels.len() as f64;
    out.iter_mut().for_each(|v| *v /= m);
    Ok(out)
}

/// `KL(p ‖ q)` with the `p ln p` floor; a zero `q` entry under positive `p`
/// is an [`Error::InfiniteCost`].
pub fn kl_cost(p: &[f64], q: &[f64], axis: &str) -> Result<f64> {
    check_len("KL support", q.len(), p.len())?;
    let mut total = 0.0;
    for (j, (&pj, &qj)) in p.iter().zip(q).enumerate() {
        if qj <= 0.0 {
            if pj > PROB_FLOOR {
                return Err(Error::InfiniteCost {
                    axis: axis.to_string(),
                    class: j,
                });
            }
            continue;
        }
        total += plogp(pj) - pj * qj.ln();
    }
    Ok(total)
}

/// `∂KL(p‖q)/∂p_j = ln(p_j / q_j) + 1`.
fn kl_grad(p: &[f64], q: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(q)
        .map(|(&pj, &qj)| if qj > 0.0 { pj.max(PROB_FLOOR).ln() - qj.ln() + 1.0 } else { 0.0 })
        .collect()
}

/// `Σ_i KL(p̂_i‖tar_i) + Σ_i H(p̂_i) − H(p̂_joint)`.
pub fn joint_decomposition(marginals: &[Vec<f64>], joint: &[f64], target: &TargetSpec) -> Result<f64> {
    let mut total = -entropy(joint);
    for (p, t) in marginals.iter().zip(&target.axes) {
        total += kl_cost(p, &t.probs, &t.name)? + entropy(p);
    }
    Ok(total)
}

/// Terminal cost evaluated on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEvaluation {
    pub value: f64,
    pub p_hat: AttributeDistribution,
    /// Estimated joint distribution (joint targets only).
    pub p_joint: Option<Vec<f64>>,
    /// Direct joint KL minus its decomposed form (joint targets only).
    pub joint_residual: Option<f64>,
    /// `∂Φ/∂X_T`, `M × n`.
    pub gradient: Option<Matrix>,
}

/// `Φ(X_T)`: KL of the batch attribute distribution to the target, summed
/// over axes, or over the class product when the target is joint.
pub fn terminal_cost(
    oracle: &dyn Oracle,
    x: &Matrix,
    target: &TargetSpec,
    estimator: JointEstimator,
    with_gradient: bool,
) -> Result<CostEvaluation> {
    if x.rows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    target.check_oracle(oracle)?;
    let logits: Vec<Vec<Vec<f64>>> = x.iter_rows().map(|r| oracle.logits(r)).collect::<Result<_>>()?;
    let probs: Vec<Vec<Vec<f64>>> = logits
        .iter()
        .map(|sample| sample.iter().map(|l| softmax(l)).collect())
        .collect();
    let marginals = mean_marginals(&probs);
    let m = x.rows() as f64;

    // dΦ/dq_{i,a} for every sample and axis
    let (value, p_joint, residual, prob_cot): (f64, Option<Vec<f64>>, Option<f64>, Vec<Vec<Vec<f64>>>) =
        if target.joint && target.axes.len() > 1 && estimator == JointEstimator::PerSampleProduct {
            let joint = mean_joint(&probs);
            let tar = target.joint_probs();
            let direct = kl_cost(&joint, &tar, "joint")?;
            let residual = direct - joint_decomposition(&marginals, &joint, target)?;
            let cot = if with_gradient {
                let g = kl_grad(&joint, &tar);
                probs.iter().map(|q| joint_factor_cotangents(q, &g, m)).collect()
            } else {
                Vec::new()
            };
            (direct, Some(joint), Some(residual), cot)
        } else {
            let mut value = 0.0;
            let mut grads = Vec::with_capacity(target.axes.len());
            for (p, t) in marginals.iter().zip(&target.axes) {
                value += kl_cost(p, &t.probs, &t.name)?;
                grads.push(kl_grad(p, &t.probs));
            }
            let (joint, residual) = if target.joint && target.axes.len() > 1 {
                let joint = outer_product(&marginals);
                let residual = kl_cost(&joint, &target.joint_probs(), "joint")?
                    - joint_decomposition(&marginals, &joint, target)?;
                (Some(joint), Some(residual))
            } else {
                (None, None)
            };
            let cot = if with_gradient {
                probs
                    .iter()
                    .map(|_| grads.iter().map(|g| g.iter().map(|v| v / m).collect()).collect())
                    .collect()
            } else {
                Vec::new()
            };
            (value, joint, residual, cot)
        };

    if !value.is_finite() {
        return Err(Error::NonFinite("terminal cost".into()));
    }
    let gradient = if with_gradient {
        let mut grad = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            let logit_cot: Vec<Vec<f64>> = probs[i]
                .iter()
                .zip(&prob_cot[i])
                .map(|(q, c)| softmax_vjp(q, c))
                .collect();
            let g = oracle.logits_vjp(x.row(i), &logit_cot)?;
            grad.row_mut(i).copy_from_slice(&g);
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite("terminal cost gradient".into()));
        }
        Some(grad)
    } else {
        None
    };
    Ok(CostEvaluation {
        value,
        p_hat: AttributeDistribution { axes: marginals },
        p_joint,
        joint_residual: residual,
        gradient,
    })
}

/// Cotangents of one sample's per-axis factors given `g = dΦ/dp̂_joint`:
/// `(1/M) Σ_{j: j_a = c} g_j Π_{b≠a} q_b[j_b]`.
fn joint_factor_cotangents(q: &[Vec<f64>], g: &[f64], m: f64) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = q.iter().map(Vec::len).collect();
    let mut out: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut idx = vec![0usize; sizes.len()];
    for &gj in g {
        for a in 0..sizes.len() {
            let others: f64 = (0..sizes.len()).filter(|&b| b != a).map(|b| q[b][idx[b]]).product();
            out[a][idx[a]] += gj * others / m;
        }
        for a in (0..sizes.len()).rev() {
            idx[a] += 1;
            if idx[a] < sizes[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    out
}

/// Softmax VJP: `q ⊙ (c − q·c)`.
fn softmax_vjp(q: &[f64], c: &[f64]) -> Vec<f64> {
    let qc: f64 = q.iter().zip(c).map(|(a, b)| a * b).sum();
    q.iter().zip(c).map(|(qi, ci)| qi * (ci - qc)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tv: f64,
    pub js: f64,
    pub chi2: f64,
    pub kl: f64,
}

fn kl_floored(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| plogp(pi) - pi * qi.max(PROB_FLOOR).ln())
        .sum()
}

/// Distances between two distributions on the same support.
pub fn metrics(p: &[f64], q: &[f64]) -> Result<Metrics> {
    check_len("metric support", p.len(), q.len())?;
    let tv = 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let chi2 = 0.5
        * p.iter()
            .zip(q)
            .filter(|(a, b)| *a + *b > 0.0)
            .map(|(a, b)| (a - b).powi(2) / (a + b))
            .sum::<f64>();
    let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_floored(p, &mid) + 0.5 * kl_floored(q, &mid);
    Ok(Metrics {
        tv,
        js: js.max(0.0),
        chi2,
        kl: kl_floored(p, q),
    })
}

/// `‖p_tar − E[softmax Ψ(x)]‖₂` over all axes concatenated.
pub fn fairness_discrepancy(oracle: &dyn Oracle, x: &Matrix, target: &TargetSpec) -> Result<f64> {
    target.check_oracle(oracle)?;
    let p = empirical_distribution(oracle, x)?;
    Ok(p.axes
        .iter()
        .zip(&target.axes)
        .map(|(p, t)| squared_distance(p, &t.probs))
        .sum::<f64>()
        .sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetProxy {
    pub value: f64,
    /// A negative eigenvalue was clamped to zero in a matrix square root.
    pub clamped: bool,
}

/// Squared 2-Wasserstein distance between Gaussians fitted to two sample sets.
pub fn frechet_proxy(a: &Matrix, b: &Matrix) -> Result<FrechetProxy> {
    check_len("frechet sample dims", a.cols(), b.cols())?;
    let (mu1, s1) = fit_gaussian(a)?;
    let (mu2, s2) = fit_gaussian(b)?;
    let (s2h, c1) = s2.psd_sqrt()?;
    let inner = s2h.matmul(&s1)?.matmul(&s2h)?;
    let (root, c2) = inner.psd_sqrt()?;
    let value = squared_distance(&mu1, &mu2) + s1.trace() + s2.trace() - 2.0 * root.trace();
    Ok(FrechetProxy {
        value: value.max(0.0),
        clamped: c1 || c2,
    })
}

/// Soft and hard (argmax) distributions of one axis against its target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisEvaluation {
    pub name: String,
    pub target: Vec<f64>,
    pub soft: Vec<f64>,
    pub hard: Vec<f64>,
    pub soft_metrics: Metrics,
    pub hard_metrics: Metrics,
}

/// Evaluation of a sample set against a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: usize,
    pub axes: Vec<AxisEvaluation>,
    /// Over the class product (axis 0 slowest), when the target is joint.
    pub joint: Option<AxisEvaluation>,
    pub fairness_discrepancy: f64,
    pub conventions: String,
}

impl Evaluation {
    /// Hard-label metrics of the joint distribution when present, otherwise
    /// the mean over axes.
    pub fn headline_metrics(&self) -> Metrics {
        match &self.joint {
            Some(j) => j.hard_metrics,
            None => {
                let n = self.axes.len() as f64;
                let mean = |f: fn(&Metrics) -> f64| self.axes.iter().map(|a| f(&a.hard_metrics)).sum::<f64>() / n;
                Metrics {
                    tv: mean(|m| m.tv),
                    js: mean(|m| m.js),
                    chi2: mean(|m| m.chi2),
                    kl: mean(|m| m.kl),
                }
            }
        }
    }

    pub fn headline_tv(&self) -> f64 {
        self.headline_metrics().tv
    }
}

pub fn evaluate(oracle: &dyn Oracle, x: &Matrix, target: &TargetSpec, estimator: JointEstimator) -> Result<Evaluation> {
    if x.rows() == 0 {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    target.check_oracle(oracle)?;
    let axes = oracle.axes();
    let probs = sample_probabilities(oracle, x)?;
    let soft = mean_marginals(&probs);
    let labels = hard_labels(oracle, x)?;
    let hard = hard_histogram(&axes, &labels)?;
    let mut out = Vec::with_capacity(axes.len());
    for ((t, s), h) in target.axes.iter().zip(&soft).zip(&hard.axes) {
        out.push(AxisEvaluation {
            name: t.name.clone(),
            target: t.probs.clone(),
            soft: s.clone(),
            hard: h.clone(),
            soft_metrics: metrics(s, &t.probs)?,
            hard_metrics: metrics(h, &t.probs)?,
        });
    }
    let joint = if target.joint && axes.len() > 1 {
        let tar = target.joint_probs();
        let soft_joint = match estimator {
            JointEstimator::PerSampleProduct => mean_joint(&probs),
            JointEstimator::ProductOfMarginals => outer_product(&soft),
        };
        let hard_joint = hard_joint_histogram(&axes, &labels)?;
        Some(AxisEvaluation {
            name: "joint".into(),
            soft_metrics: metrics(&soft_joint, &tar)?,
            hard_metrics: metrics(&hard_joint, &tar)?,
            target: tar,
            soft: soft_joint,
            hard: hard_joint,
        })
    } else {
        None
    };
    let fd = soft
        .iter()
        .zip(&target.axes)
        .map(|(p, t)| squared_distance(p, &t.probs))
        .sum::<f64>()
        .sqrt();
    Ok(Evaluation {
        samples: x.rows(),
        axes: out,
        joint,
        fairness_discrepancy: fd,
        conventions: METRIC_CONVENTIONS.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, Rng};
    use proptest::prelude::{prop, prop_assert, proptest};

    fn two_class_oracle(temperature: f64) -> RbfOracle {
        RbfOracle::new(
            temperature,
            vec![RbfAxis {
                name: "class".into(),
                centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            }],
        )
        .unwrap()
    }

    fn two_axis_oracle() -> RbfOracle {
        RbfOracle::from_mixture(&MixtureSpec::two_axis([0.4, 0.3, 0.2, 0.1], 2.0, 0.5).unwrap(), 1.5).unwrap()
    }

    #[test]
    fn center_wins_and_midpoint_ties() {
        let o = two_class_oracle(1.0);
        let l = o.logits(&[1.0, 0.0]).unwrap();
        assert!(l[0][1] > l[0][0]);
        let l = o.logits(&[0.0, 3.0]).unwrap();
        assert_eq!(l[0][0], l[0][1]);
    }

    #[test]
    fn single_sample_distribution_is_its_softmax() {
        let o = two_class_oracle(1.0);
        let x = Matrix::from_rows(&[[0.3, 0.2]]).unwrap();
        let p = empirical_distribution(&o, &x).unwrap();
        assert_eq!(p.axes[0], softmax(&o.logits(x.row(0)).unwrap()[0]));
    }

    #[test]
    fn saturated_opposite_samples_average_to_half() {
        let o = two_class_oracle(0.01);
        let x = Matrix::from_rows(&[[-1.0, 0.0], [1.0, 0.0]]).unwrap();
        let p = empirical_distribution(&o, &x).unwrap();
        assert_eq!(p.axes[0], vec![0.5, 0.5]);
    }

    #[test]
    fn symmetric_batch_gives_uniform() {
        let o = two_class_oracle(1.0);
        let x = Matrix::from_rows(&[[-0.4, 1.0], [0.4, 1.0], [0.7, -2.0], [-0.7, -2.0]]).unwrap();
        let p = empirical_distribution(&o, &x).unwrap();
        assert!((p.axes[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_cost(&[0.3, 0.7], &[0.3, 0.7], "a").unwrap(), 0.0);
        let v = kl_cost(&[0.5, 0.5], &[0.25, 0.75], "a").unwrap();
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expect).abs() < 1e-15);
        assert!((v - 0.14384).abs() < 5e-6);
        assert!(matches!(
            kl_cost(&[0.5, 0.5], &[1.0, 0.0], "a"),
            Err(Error::InfiniteCost { class: 1, .. })
        ));
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[0.2, 0.8], &[0.2, 0.8]).unwrap();
        assert_eq!((m.tv, m.js, m.chi2, m.kl), (0.0, 0.0, 0.0, 0.0));
        let m = metrics(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.tv, 1.0);
        assert_eq!(m.chi2, 1.0);
        assert!((m.js - 2f64.ln()).abs() < 1e-12);
        let m = metrics(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((m.tv - 0.25).abs() < 1e-15);
        assert!((m.chi2 - 0.5 * (0.0625 / 0.75 + 0.0625 / 1.25)).abs() < 1e-15);
        assert!((m.chi2 - 0.0667).abs() < 5e-5);
    }

    #[test]
    fn fairness_discrepancy_examples() {
        // logits (ln 0.6, ln 0.4) via a linear stub: RBF centers chosen so softmax = (0.6, 0.4)
        let o = two_class_oracle(1.0);
        // softmax of logit difference 2x₀ equals 0.4 for class 1 at x₀ = 0.5 ln(2/3)
        let x0 = 0.5 * (0.4f64 / 0.6).ln();
        let x = Matrix::from_rows(&[[x0, 0.0]]).unwrap();
        let target = TargetSpec::single("class", vec![0.5, 0.5]).unwrap();
        let fd = fairness_discrepancy(&o, &x, &target).unwrap();
        assert!((fd - 0.02f64.sqrt()).abs() < 1e-12);
        assert!((fd - 0.1414).abs() < 5e-5);
        let x = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(fairness_discrepancy(&o, &x, &target).unwrap(), 0.0);
        let p = empirical_distribution(&o, &x).unwrap();
        assert_eq!(metrics(&p.axes[0], &[0.5, 0.5]).unwrap().tv, 0.0);
    }

    #[test]
    fn presets() {
        assert_eq!(TargetPreset::Uniform.probs(4), vec![0.25; 4]);
        let z = TargetPreset::Zigzag.probs(4);
        for (a, b) in z.iter().zip([2.0 / 6.0, 1.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        let g = TargetPreset::Gaussian.probs(8);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g[3] - g[4]).abs() < 1e-15 && g[3] > g[2] && g[0] < g[1]);
        // std = 2 classes: ratio of center-adjacent to two-away follows the bell
        let ratio = g[4] / g[6];
        assert!((ratio - ((-0.5 * (0.5f64 / 2.0).powi(2)).exp() / (-0.5 * (2.5f64 / 2.0).powi(2)).exp())).abs() < 1e-12);
    }

    #[test]
    fn target_json_round_trip_and_validation() {
        let t = TargetSpec::preset(TargetPreset::Zigzag, &two_axis_oracle().axes(), true).unwrap();
        assert_eq!(TargetSpec::from_json(&t.to_json().unwrap()).unwrap(), t);
        let bad = r#"{"axes":[{"name":"a","classes":2,"probs":[0.5,0.6]}],"joint":false}"#;
        assert!(TargetSpec::from_json(bad).is_err());
        let wrong = r#"{"axes":[{"name":"a","classes":3,"probs":[0.5,0.5]}]}"#;
        assert!(TargetSpec::from_json(wrong).is_err());
    }

    #[test]
    fn target_must_match_oracle() {
        let o = two_class_oracle(1.0);
        let t = TargetSpec::single("other", vec![0.5, 0.5]).unwrap();
        let x = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        assert!(terminal_cost(&o, &x, &t, JointEstimator::default(), false).is_err());
    }

    fn random_batch(rng: &mut Rng, m: usize) -> Matrix {
        let mut x = Matrix::zeros(m, 2);
        x.data_mut().iter_mut().for_each(|v| *v = 1.5 * rng.standard_normal());
        x
    }

    fn check_gradient(oracle: &dyn Oracle, target: &TargetSpec, estimator: JointEstimator, seed: u64) {
        let mut rng = Rng::new(seed);
        for m in [1, 3, 8] {
            let x = random_batch(&mut rng, m);
            let eval = terminal_cost(oracle, &x, target, estimator, true).unwrap();
            let g = eval.gradient.unwrap();
            let h = 1e-6;
            for i in 0..m {
                for d in 0..2 {
                    let mut xp = x.clone();
                    xp.set(i, d, x.get(i, d) + h);
                    let mut xm = x.clone();
                    xm.set(i, d, x.get(i, d) - h);
                    let fd = (terminal_cost(oracle, &xp, target, estimator, false).unwrap().value
                        - terminal_cost(oracle, &xm, target, estimator, false).unwrap().value)
                        / (2.0 * h);
                    let rel = (fd - g.get(i, d)).abs() / g.get(i, d).abs().max(1e-4);
                    assert!(rel < 1e-5, "m={m} i={i} d={d} fd={fd} g={}", g.get(i, d));
                }
            }
        }
    }

    #[test]
    fn single_axis_gradient_matches_finite_differences() {
        let o = two_class_oracle(1.3);
        let t = TargetSpec::single("class", vec![0.3, 0.7]).unwrap();
        check_gradient(&o, &t, JointEstimator::PerSampleProduct, 3);
        let circle = RbfOracle::from_mixture(&MixtureSpec::circle(&[0.25; 4], 2.0, 0.5).unwrap(), 1.0).unwrap();
        let t = TargetSpec::preset(TargetPreset::Zigzag, &circle.axes(), false).unwrap();
        check_gradient(&circle, &t, JointEstimator::PerSampleProduct, 4);
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let o = two_axis_oracle();
        let mut t = TargetSpec::preset(TargetPreset::Uniform, &o.axes(), true).unwrap();
        t.axes[1].probs = vec![0.35, 0.65];
        check_gradient(&o, &t, JointEstimator::PerSampleProduct, 5);
        check_gradient(&o, &t, JointEstimator::ProductOfMarginals, 6);
        t.joint = false;
        check_gradient(&o, &t, JointEstimator::PerSampleProduct, 7);
    }

    #[test]
    fn joint_residual_is_tiny() {
        let o = two_axis_oracle();
        let t = TargetSpec::preset(TargetPreset::Uniform, &o.axes(), true).unwrap();
        let mut rng = Rng::new(9);
        for _ in 0..20 {
            let x = random_batch(&mut rng, 16);
            let e = terminal_cost(&o, &x, &t, JointEstimator::PerSampleProduct, false).unwrap();
            assert!(e.joint_residual.unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn factorized_joint_cost_equals_sum_of_marginal_costs() {
        // single sample: the per-sample product is exactly factorized
        let o = two_axis_oracle();
        let t = TargetSpec::preset(TargetPreset::Zigzag, &o.axes(), true).unwrap();
        let x = Matrix::from_rows(&[[0.3, -0.9]]).unwrap();
        let joint = terminal_cost(&o, &x, &t, JointEstimator::PerSampleProduct, false).unwrap();
        let mut t2 = t.clone();
        t2.joint = false;
        let split = terminal_cost(&o, &x, &t2, JointEstimator::PerSampleProduct, false).unwrap();
        assert!((joint.value - split.value).abs() < 1e-12);
        let pom = terminal_cost(&o, &random_batch(&mut Rng::new(2), 10), &t, JointEstimator::ProductOfMarginals, false)
            .unwrap();
        assert!(pom.joint_residual.unwrap().abs() < 1e-12);
    }

    #[test]
    fn hard_histograms() {
        let o = two_axis_oracle();
        let axes = o.axes();
        let x = Matrix::from_rows(&[[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [2.0, 3.0]]).unwrap();
        let labels = hard_labels(&o, &x).unwrap();
        assert_eq!(labels, vec![vec![1, 1], vec![1, 0], vec![0, 0], vec![1, 1]]);
        let h = hard_histogram(&axes, &labels).unwrap();
        assert_eq!(h.axes, vec![vec![0.25, 0.75], vec![0.5, 0.5]]);
        assert_eq!(hard_joint_histogram(&axes, &labels).unwrap(), vec![0.25, 0.0, 0.25, 0.5]);
    }

    #[test]
    fn evaluation_matches_direct_metrics() {
        let o = two_axis_oracle();
        let t = TargetSpec::preset(TargetPreset::Uniform, &o.axes(), true).unwrap();
        let x = random_batch(&mut Rng::new(4), 50);
        let e = evaluate(&o, &x, &t, JointEstimator::PerSampleProduct).unwrap();
        let labels = hard_labels(&o, &x).unwrap();
        let hj = hard_joint_histogram(&o.axes(), &labels).unwrap();
        assert_eq!(e.joint.as_ref().unwrap().hard_metrics, metrics(&hj, &t.joint_probs()).unwrap());
        assert_eq!(e.headline_tv(), metrics(&hj, &[0.25; 4]).unwrap().tv);
        let fd = fairness_discrepancy(&o, &x, &t).unwrap();
        assert!((e.fairness_discrepancy - fd).abs() < 1e-15);
    }

    #[test]
    fn frechet_examples() {
        let mut rng = Rng::new(11);
        let a = random_batch(&mut rng, 500);
        assert!(frechet_proxy(&a, &a).unwrap().value < 1e-8);

        let n = 10_000;
        let mut b = crate::numerics::sample_standard_normal(&mut rng, n, 2);
        let c = crate::numerics::sample_standard_normal(&mut rng, n, 2);
        assert!(frechet_proxy(&b, &c).unwrap().value < 0.05);
        for i in 0..n {
            b.set(i, 0, b.get(i, 0) + 3.0);
        }
        let v = frechet_proxy(&b, &c).unwrap().value;
        assert!((v - 9.0).abs() < 0.2, "{v}");
        assert!(frechet_proxy(&Matrix::zeros(1, 2), &c).is_err());
    }

    #[test]
    fn classifier_vjp_matches_finite_differences_with_temperature() {
        let mut rng = Rng::new(12);
        let heads = vec![
            ("a".to_string(), MlpNet::new(&[2, 6, 3], TimeEmbedding::None, &mut rng).unwrap()),
            ("b".to_string(), MlpNet::new(&[2, 5, 2], TimeEmbedding::None, &mut rng).unwrap()),
        ];
        let oracle = ClassifierOracle::new(heads).unwrap().with_temperature(3.0).unwrap();
        let raw = oracle.heads()[0].1.forward(&[0.3, -0.2], 0.0).unwrap();
        let scaled = &oracle.logits(&[0.3, -0.2]).unwrap()[0];
        assert!((scaled[1] - raw[1] / 3.0).abs() < 1e-15);
        let cot = vec![vec![0.4, -1.0, 0.7], vec![1.3, 0.2]];
        let x = [0.3, -0.2];
        let g = oracle.logits_vjp(&x, &cot).unwrap();
        let f = |x: &[f64]| -> f64 {
            let z = oracle.logits(x).unwrap();
            z.iter().zip(&cot).map(|(zi, ci)| dot(zi, ci)).sum()
        };
        for d in 0..2 {
            let (mut xp, mut xm) = (x, x);
            xp[d] += 1e-6;
            xm[d] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - g[d]).abs() < 1e-8, "dim {d}: {fd} vs {}", g[d]);
        }
        assert!(ClassifierOracle::new(vec![("a".into(), MlpNet::new(&[2, 2], TimeEmbedding::None, &mut rng).unwrap())])
            .unwrap()
            .with_temperature(0.0)
            .is_err());
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_only_at_target(
            a in prop::collection::vec(0.01f64..1.0, 2..6),
            b in prop::collection::vec(0.01f64..1.0, 6),
        ) {
            let p: Vec<f64> = a.iter().map(|v| v / a.iter().sum::<f64>()).collect();
            let q: Vec<f64> = b[..p.len()].iter().map(|v| v / b[..p.len()].iter().sum::<f64>()).collect();
            let kl = kl_cost(&p, &q, "a").unwrap();
            prop_assert!(kl >= -1e-15);
            prop_assert!(kl_cost(&p, &p, "a").unwrap().abs() < 1e-15);
            if metrics(&p, &q).unwrap().tv > 1e-6 {
                prop_assert!(kl > 0.0);
            }
        }

        #[test]
        fn batch_permutation_invariance(seed in 0u64..1000, shift in 1usize..7) {
            let mut rng = Rng::new(seed);
            let o = two_axis_oracle();
            let t = TargetSpec::preset(TargetPreset::Zigzag, &o.axes(), true).unwrap();
            let x = random_batch(&mut rng, 7);
            let rows: Vec<Vec<f64>> = (0..7).map(|i| x.row((i + shift) % 7).to_vec()).collect();
            let y = Matrix::from_rows(&rows).unwrap();
            let ex = terminal_cost(&o, &x, &t, JointEstimator::PerSampleProduct, true).unwrap();
            let ey = terminal_cost(&o, &y, &t, JointEstimator::PerSampleProduct, true).unwrap();
            prop_assert!((ex.value - ey.value).abs() < 1e-14);
            for (p, q) in ex.p_hat.axes.iter().flatten().zip(ey.p_hat.axes.iter().flatten()) {
                prop_assert!((p - q).abs() < 1e-15);
            }
            let (gx, gy) = (ex.gradient.unwrap(), ey.gradient.unwrap());
            for i in 0..7 {
                for d in 0..2 {
                    prop_assert!((gx.get((i + shift) % 7, d) - gy.get(i, d)).abs() < 1e-14);
                }
            }
            let mx = metrics(&ex.p_hat.axes[0], &t.axes[0].probs).unwrap();
            let my = metrics(&ey.p_hat.axes[0], &t.axes[0].probs).unwrap();
            prop_assert!((mx.tv - my.tv).abs() < 1e-15 && (mx.js - my.js).abs() < 1e-15);
        }

        #[test]
        fn joint_identity_for_random_factors(
            raw in prop::collection::vec(0.01f64..1.0, 30),
        ) {
            // 6 samples of (2-class, 3-class) factors
            let probs: Vec<Vec<Vec<f64>>> = (0..6)
                .map(|i| {
                    let a = &raw[i * 5..i * 5 + 2];
                    let b = &raw[i * 5 + 2..i * 5 + 5];
                    vec![
                        a.iter().map(|v| v / a.iter().sum::<f64>()).collect(),
                        b.iter().map(|v| v / b.iter().sum::<f64>()).collect(),
                    ]
                })
                .collect();
            let target = TargetSpec::new(
                vec![
                    TargetAxis { name: "a".into(), classes: 2, probs: vec![0.3, 0.7] },
                    TargetAxis { name: "b".into(), classes: 3, probs: vec![0.2, 0.5, 0.3] },
                ],
                true,
            ).unwrap();
            let joint = mean_joint(&probs);
            let direct = kl_cost(&joint, &target.joint_probs(), "joint").unwrap();
            let decomposed = joint_decomposition(&mean_marginals(&probs), &joint, &target).unwrap();
            prop_assert!((direct - decomposed).abs() < 1e-9);
        }
    }
}
