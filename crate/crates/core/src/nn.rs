//! Layers built on the autodiff tape: affine maps, feed-forward stacks and a
//! post-norm Transformer encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Silu,
    LeakyRelu,
}

pub const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Silu => g.silu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Weights uniform in `±1/√fan_in`, bias zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, bound, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Feed-forward stack with an activation between layers and a linear output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists every layer boundary, e.g. `[32, 128, 128, 32]` is a
    /// three-layer network.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        h
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, 1e-5);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    heads: usize,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm_attn: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    norm_ff: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ff_width: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        Self {
            heads,
            query: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            key: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            norm_attn: LayerNorm::new(store, &format!("{name}.norm1"), width),
            ff_in: Linear::new(store, &format!("{name}.ff1"), width, ff_width, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff2"), ff_width, width, true, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm2"), width),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let width = g.shape(x).1;
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let attended = self.output.forward(g, merged);
        let x = g.add(x, attended);
        let x = self.norm_attn.forward(g, x);

        let h = self.ff_in.forward(g, x);
        let h = g.relu(h);
        let h = self.ff_out.forward(g, h);
        let x2 = g.add(x, h);
        self.norm_ff.forward(g, x2)
    }
}

/// Stack of encoder layers over a `len × width` sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    positional: Option<ParamId>,
}

impl TransformerEncoder {
    /// `max_len` sizes the optional learned positional table.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        layers: usize,
        heads: usize,
        ff_width: usize,
        positional_len: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), width, heads, ff_width, rng))
            .collect();
        let positional = positional_len.map(|len| {
            let bound = 1.0 / (width as f64).sqrt();
            store.add_uniform(format!("{name}.positional"), len, width, bound, rng)
        });
        Self { layers, positional }
    }

    pub fn has_positional(&self) -> bool {
        self.positional.is_some()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        if let Some(pos) = self.positional {
            let len = g.shape(x).0;
            let idx: Vec<usize> = (0..len).collect();
            let p = g.embed(pos, &idx);
            h = g.add(h, p);
        }
        for layer in &self.layers {
            h = layer.forward(g, h);
        }
        h
    }
}
