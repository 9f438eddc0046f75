//! Small tanh MLPs with hand-written reverse passes.
//!
//! A network maps `[x, embed(t)]` to an output head. Three services are
//! provided: [`MlpNet::forward`], the input vector–Jacobian product
//! [`MlpNet::input_vjp`] (time held constant), and parameter gradients
//! [`MlpNet::param_grad`] for training. Networks are immutable during
//! inference; evaluating one sample never touches another.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numerics::{axpy, Matrix, Rng};

/// How the scalar time/noise condition enters the network input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TimeEmbedding {
    /// No time input (attribute classifiers).
    None,
    RawScalar,
    /// `[sin(f_1 t), cos(f_1 t), …, sin(f_k t), cos(f_k t)]`
    Sinusoidal { frequencies: Vec<f64> },
}

impl TimeEmbedding {
    /// Sinusoidal embedding with `k` geometric frequencies `1, 2, 4, …`.
    pub fn sinusoidal(k: usize) -> Self {
        TimeEmbedding::Sinusoidal {
            frequencies: (0..k).map(|i| (1u64 << i) as f64).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TimeEmbedding::None => 0,
            TimeEmbedding::RawScalar => 1,
            TimeEmbedding::Sinusoidal { frequencies } => 2 * frequencies.len(),
        }
    }

    fn write(&self, t: f64, out: &mut [f64]) {
        match self {
            TimeEmbedding::None => {}
            TimeEmbedding::RawScalar => out[0] = t,
            TimeEmbedding::Sinusoidal { frequencies } => {
                for (i, f) in frequencies.iter().enumerate() {
                    out[2 * i] = (f * t).sin();
                    out[2 * i + 1] = (f * t).cos();
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

/// Affine layer `y = W h + b`, `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    time_embedding: TimeEmbedding,
    layers: Vec<Layer>,
}

/// Per-layer post-activation values of one forward pass; `acts[0]` is the input.
struct Tape {
    acts: Vec<Vec<f64>>,
}

impl MlpNet {
    /// `layer_sizes[0]` is the full input width (state plus time embedding).
    /// Weights are drawn from `N(0, 1/fan_in)`, biases start at zero.
    pub fn new(layer_sizes: &[usize], time_embedding: TimeEmbedding, rng: &mut Rng) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        if layer_sizes[0] <= time_embedding.dim() {
            return Err(Error::Config(format!(
                "input width {} leaves no room for state beside a {}-wide time embedding",
                layer_sizes[0],
                time_embedding.dim()
            )));
        }
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.standard_normal()).collect();
                Layer {
                    weight: Matrix::new(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self { time_embedding, layers })
    }

    /// Assembles a network from explicit layers, validating shapes.
    pub fn from_layers(layers: Vec<Layer>, time_embedding: TimeEmbedding) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("an MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            check_len("MlpNet layer chain", w[0].weight.rows(), w[1].weight.cols())?;
        }
        for l in &layers {
            check_len("MlpNet bias", l.weight.rows(), l.bias.len())?;
        }
        if layers[0].weight.cols() <= time_embedding.dim() {
            return Err(Error::Config("input width must exceed the time embedding width".into()));
        }
        Ok(Self { time_embedding, layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn time_embedding(&self) -> &TimeEmbedding {
        &self.time_embedding
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].weight.cols()];
        sizes.extend(self.layers.iter().map(|l| l.weight.rows()));
        sizes
    }

    pub fn state_dim(&self) -> usize {
        self.layers[0].weight.cols() - self.time_embedding.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.rows()).unwrap_or(0)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Flat parameter vector: per layer, weights row-major then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        check_len("MlpNet::set_parameters", self.num_parameters(), params.len())?;
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    /// A zero-filled network of identical shape.
    pub fn zeros_like(&self) -> MlpNet {
        MlpNet {
            time_embedding: self.time_embedding.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn input(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_len("MlpNet input", self.state_dim(), x.len())?;
        let mut input = vec![0.0; self.layers[0].weight.cols()];
        input[..x.len()].copy_from_slice(x);
        self.time_embedding.write(t, &mut input[x.len()..]);
        Ok(input)
    }

    fn run(&self, x: &[f64], t: f64) -> Result<Tape> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.input(x, t)?);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(acts.last().expect("non-empty"))?;
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
                if i < last {
                    *zi = zi.tanh();
                }
            }
            acts.push(z);
        }
        Ok(Tape { acts })
    }

    /// Reverse pass from an output cotangent. Calls `on_layer(i, delta, h_in)`
    /// with the pre-activation cotangent of layer `i` and its input; returns
    /// the cotangent of the full network input.
    fn backward(
        &self,
        tape: &Tape,
        v: &[f64],
        mut on_layer: impl FnMut(usize, &[f64], &[f64]),
    ) -> Result<Vec<f64>> {
        check_len("MlpNet cotangent", self.output_dim(), v.len())?;
        let mut delta = v.to_vec();
        for i in (0..self.layers.len()).rev() {
            let h_in = &tape.acts[i];
            on_layer(i, &delta, h_in);
            let mut upstream = self.layers[i].weight.transpose_matvec(&delta)?;
            if i > 0 {
                // h_in = tanh(z) for every hidden layer
                for (u, a) in upstream.iter_mut().zip(h_in) {
                    *u *= 1.0 - a * a;
                }
            }
            delta = upstream;
        }
        Ok(delta)
    }

    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut tape = self.run(x, t)?;
        Ok(tape.acts.pop().expect("non-empty"))
    }

    /// `Jᵀ v` with `J = ∂forward/∂x`; time coordinates are dropped.
    pub fn input_vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<Vec<f64>> {
        let tape = self.run(x, t)?;
        let mut g = self.backward(&tape, v, |_, _, _| {})?;
        g.truncate(x.len());
        Ok(g)
    }

    /// Forward value and input VJP in one pass.
    pub fn forward_and_vjp(&self, x: &[f64], t: f64, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let tape = self.run(x, t)?;
        let mut g = self.backward(&tape, v, |_, _, _| {})?;
        g.truncate(x.len());
        Ok((tape.acts.last().expect("non-empty").clone(), g))
    }

    /// Gradient of `Σ_i cotangent_iᵀ · forward(x_i, t_i)` with respect to every
    /// parameter, returned as a network of the same shape.
    pub fn param_grad(&self, batch: &Matrix, times: &[f64], cotangents: &Matrix) -> Result<MlpNet> {
        check_len("param_grad times", batch.rows(), times.len())?;
        check_len("param_grad cotangent rows", batch.rows(), cotangents.rows())?;
        check_len("param_grad cotangent cols", self.output_dim(), cotangents.cols())?;
        let mut grad = self.zeros_like();
        for ((x, &t), v) in batch.iter_rows().zip(times).zip(cotangents.iter_rows()) {
            let tape = self.run(x, t)?;
            self.backward(&tape, v, |i, delta, h_in| {
                let layer = &mut grad.layers[i];
                for (r, &d) in delta.iter().enumerate() {
                    axpy(d, h_in, layer.weight.row_mut(r));
                    layer.bias[r] += d;
                }
            })?;
        }
        Ok(grad)
    }
}

/// Adam-style adaptive optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn record(&self) -> OptimizerRecord {
        OptimizerRecord {
            name: "adam".into(),
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Score,
    Noise,
    Velocity,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub name: String,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Model-specific input conditioning stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    /// Data scale used for EDM-style input normalization of score heads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_data: Option<f64>,
    /// Time direction of a velocity head, e.g. `"data-at-0,noise-at-1"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_direction: Option<String>,
    /// Attribute axis name and class count of an oracle head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<(String, usize)>,
}

/// JSON checkpoint of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub head_kind: HeadKind,
    pub layer_sizes: Vec<usize>,
    pub time_embedding: TimeEmbedding,
    pub activation: Activation,
    pub seed: u64,
    /// Per layer: weights row-major, then bias.
    pub parameters: Vec<Vec<f64>>,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
}

impl Checkpoint {
    pub fn from_net(net: &MlpNet, head_kind: HeadKind, seed: u64) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            head_kind,
            layer_sizes: net.layer_sizes(),
            time_embedding: net.time_embedding.clone(),
            activation: Activation::Tanh,
            seed,
            parameters: net
                .layers
                .iter()
                .map(|l| {
                    let mut p = l.weight.data().to_vec();
                    p.extend_from_slice(&l.bias);
                    p
                })
                .collect(),
            conditioning: Conditioning::default(),
            optimizer: None,
        }
    }

    pub fn to_net(&self) -> Result<MlpNet> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Schema(self.schema_version));
        }
        check_len(
            "checkpoint layer count",
            self.layer_sizes.len().saturating_sub(1),
            self.parameters.len(),
        )?;
        let layers = self
            .layer_sizes
            .windows(2)
            .zip(&self.parameters)
            .map(|(w, p)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                check_len("checkpoint layer parameters", fan_in * fan_out + fan_out, p.len())?;
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("checkpoint parameters".into()));
                }
                Ok(Layer {
                    weight: Matrix::new(fan_out, fan_in, p[..fan_in * fan_out].to_vec())?,
                    bias: p[fan_in * fan_out..].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MlpNet::from_layers(layers, self.time_embedding.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the version before the full schema so that future layouts
        // fail with a version error rather than a field error.
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Config("checkpoint lacks schema_version".into()))?;
        if version != CHECKPOINT_SCHEMA_VERSION as u64 {
            return Err(Error::Schema(version as u32));
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
