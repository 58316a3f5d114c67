//! The ε-prediction network: a tanh MLP over `[x_t | time features | context]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width of the sinusoidal time embedding.
pub const TIME_EMBED_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub sample_dim: usize,
    pub context_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpConfig {
    pub fn input_dim(&self) -> usize {
        self.sample_dim + TIME_EMBED_DIM + self.context_dim
    }

    /// `(out, in)` for every affine layer, first to last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.sample_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Denoiser parameters θ stored as one flat vector, layer by layer
/// (`W_0`, `b_0`, `W_1`, `b_1`, ...), weights row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: MlpConfig,
    flat: Vec<f64>,
}

impl DenoiserParams {
    pub fn zeros(config: MlpConfig) -> Self {
        let n = config.num_params();
        Self {
            config,
            flat: vec![0.0; n],
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
    pub fn init(config: MlpConfig, rng: &mut impl Rng) -> Self {
        let mut flat = Vec::with_capacity(config.num_params());
        for (out, inp) in config.layer_shapes() {
            let bound = 1.0 / (inp as f64).sqrt();
            flat.extend((0..out * inp).map(|_| rng.random_range(-bound..bound)));
            flat.extend(std::iter::repeat_n(0.0, out));
        }
        Self { config, flat }
    }

    pub fn from_flat(config: MlpConfig, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != config.num_params() {
            return Err(Error::shape(
                "DenoiserParams::from_flat",
                &[config.num_params()],
                &[flat.len()],
            ));
        }
        Ok(Self { config, flat })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.flat
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    fn offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = 0;
        self.config
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| {
                let w = off;
                off += o * i + o;
                (w, w + o * i, o, i)
            })
            .collect()
    }

    /// Weight matrix of `layer` as `(out, in, row-major data)`.
    pub fn weight(&self, layer: usize) -> (usize, usize, &[f64]) {
        let (w, b, o, i) = self.offsets()[layer];
        (o, i, &self.flat[w..b])
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [f64] {
        let (w, b, _, _) = self.offsets()[layer];
        &mut self.flat[w..b]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let (_, b, o, _) = self.offsets()[layer];
        &self.flat[b..b + o]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b, o, _) = self.offsets()[layer];
        &mut self.flat[b..b + o]
    }

    pub fn num_layers(&self) -> usize {
        self.config.layer_shapes().len()
    }
}

/// Parameter tensors registered in a [`Graph`].
#[derive(Debug, Clone)]
pub struct ParamNodes {
    layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    /// Registers θ as differentiable leaves.
    pub fn leaves(g: &mut Graph, params: &DenoiserParams) -> Self {
        Self::register(g, params, true)
    }

    /// Registers θ as constants (no gradient is tracked through them).
    pub fn constants(g: &mut Graph, params: &DenoiserParams) -> Self {
        Self::register(g, params, false)
    }

    fn register(g: &mut Graph, params: &DenoiserParams, grad: bool) -> Self {
        let layers = (0..params.num_layers())
            .map(|l| {
                let (o, i, w) = params.weight(l);
                let w = Tensor::matrix(o, i, w.to_vec()).expect("layer shape");
                let b = Tensor::vector(params.bias(l).to_vec());
                if grad {
                    (g.leaf(w), g.leaf(b))
                } else {
                    (g.constant(w), g.constant(b))
                }
            })
            .collect();
        Self { layers }
    }

    /// Gathers per-layer gradients into the flat parameter layout.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for &(w, b) in &self.layers {
            out.extend_from_slice(grads.get(w).data());
            out.extend_from_slice(grads.get(b).data());
        }
        out
    }
}

/// Runs the MLP on an `n x input_dim` node and returns the `n x sample_dim` output.
pub fn mlp_forward_graph(g: &mut Graph, params: &ParamNodes, input: NodeId) -> Result<NodeId> {
    let last = params.layers.len() - 1;
    let mut h = input;
    for (l, &(w, b)) in params.layers.iter().enumerate() {
        h = g.matmul_t(h, w)?;
        h = g.add_row(h, b)?;
        if l < last {
            h = g.tanh(h);
        }
    }
    Ok(h)
}

/// Builds a scalar loss over θ and returns its value and flat gradient.
pub fn value_and_grad(
    params: &DenoiserParams,
    build: impl FnOnce(&mut Graph, &ParamNodes) -> Result<NodeId>,
) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new();
    let pn = ParamNodes::leaves(&mut g, params);
    let out = build(&mut g, &pn)?;
    let (v, grads) = crate::autodiff::forward_backward(&g, out)?;
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss value {v}")));
    }
    Ok((v, pn.flat_grad(&grads)))
}

/// 8 sinusoidal features of `t / steps` at frequencies 1, 2, 4, 8.
pub fn time_embedding(t: usize, steps: usize) -> [f64; TIME_EMBED_DIM] {
    let s = t as f64 / steps as f64;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..4 {
        let a = std::f64::consts::PI * (1u32 << k) as f64 * s;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
    out
}

/// Concatenates `[x | time | context]` row by row.
pub fn assemble_input(x: &Tensor, time_embed: &Tensor, context_embed: &Tensor) -> Result<Tensor> {
    let n = x.rows();
    if time_embed.rows() != n || context_embed.rows() != n {
        return Err(Error::shape("assemble_input", x.shape(), context_embed.shape()));
    }
    let width = x.cols() + time_embed.cols() + context_embed.cols();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        data.extend_from_slice(x.row(i));
        data.extend_from_slice(time_embed.row(i));
        data.extend_from_slice(context_embed.row(i));
    }
    Tensor::matrix(n, width, data)
}

/// Gradient-free forward pass for a batch of rows.
pub fn mlp_forward(
    params: &DenoiserParams,
    input: &Tensor,
    time_embed: &Tensor,
    context_embed: &Tensor,
) -> Result<Tensor> {
    let cfg = params.config();
    if input.cols() != cfg.sample_dim || time_embed.cols() != TIME_EMBED_DIM || context_embed.cols() != cfg.context_dim
    {
        return Err(Error::shape(
            "mlp_forward",
            &[cfg.sample_dim, TIME_EMBED_DIM, cfg.context_dim],
            &[input.cols(), time_embed.cols(), context_embed.cols()],
        ));
    }
    let x = assemble_input(input, time_embed, context_embed)?;
    let mut g = Graph::new();
    let pn = ParamNodes::constants(&mut g, params);
    let xin = g.constant(x);
    let out = mlp_forward_graph(&mut g, &pn, xin)?;
    Ok(g.value(out).clone())
}
