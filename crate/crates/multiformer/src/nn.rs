//! Neural building blocks on top of the tensor engine: linear layers,
//! convolutions, layer norm, feedforward stacks, multi-head attention, and
//! sinusoidal positional encodings.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Graph, ParamId, Params, Scalar, Tensor};

/// Uniform Kaiming-style initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform<T: Scalar>(
    rng: &mut impl Rng,
    shape: &[usize],
    fan_in: usize,
) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::f(dist.sample(rng)))
}

/// Normal initialization with the given standard deviation.
pub fn init_normal<T: Scalar>(rng: &mut impl Rng, shape: &[usize], std: f64) -> ArrayD<T> {
    let dist = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::f(dist.sample(rng)))
}

/// Fully connected layer `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = params.add(&format!("{name}.w"), init_uniform(rng, &[d_out, d_in], d_in));
        let b = params.add(&format!("{name}.b"), init_uniform(rng, &[d_out], d_in));
        Linear { w, b }
    }

    /// `x: [m, in] -> [m, out]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        x.mm_nt(&g.param(p, self.w)).add_row_vec(&g.param(p, self.b))
    }
}

/// Layer normalization over the feature (last) axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(params: &mut Params<T>, name: &str, d: usize) -> Self {
        let gain = params.add(&format!("{name}.gain"), ArrayD::from_elem(IxDyn(&[d]), T::one()));
        let bias = params.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[d])));
        LayerNorm { gain, bias, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        x.layer_norm(&g.param(p, self.gain), &g.param(p, self.bias), T::f(self.eps))
    }
}

/// Two-layer feedforward network with SiLU activation.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl Mlp2 {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp2 {
            lin1: Linear::new(params, rng, &format!("{name}.lin1"), d_in, d_hidden),
            lin2: Linear::new(params, rng, &format!("{name}.lin2"), d_hidden, d_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        self.lin2.forward(g, p, &self.lin1.forward(g, p, x).silu())
    }
}

/// Three-layer MLP used for kernel projections.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    pub lin1: Linear,
    pub lin2: Linear,
    pub lin3: Linear,
}

impl Mlp3 {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp3 {
            lin1: Linear::new(params, rng, &format!("{name}.lin1"), d_in, d_hidden),
            lin2: Linear::new(params, rng, &format!("{name}.lin2"), d_hidden, d_hidden),
            lin3: Linear::new(params, rng, &format!("{name}.lin3"), d_hidden, d_out),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        let h1 = self.lin1.forward(g, p, x).silu();
        let h2 = self.lin2.forward(g, p, &h1).silu();
        self.lin3.forward(g, p, &h2)
    }
}

/// 2-d convolution layer over `[C,H,W]` tensors.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = params.add(
            &format!("{name}.w"),
            init_uniform(rng, &[c_out, c_in, k, k], fan_in),
        );
        let b = params.add(&format!("{name}.b"), init_uniform(rng, &[c_out], fan_in));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Params<T>, x: &Tensor<T>) -> Tensor<T> {
        x.conv2d(&g.param(p, self.w), &g.param(p, self.b), self.stride, self.pad)
    }
}

/// Multi-head attention with optional additive logit bias for masking.
#[derive(Debug, Clone)]
pub struct MultiheadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiheadAttention {
    pub fn new<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        heads: usize,
    ) -> Self {
        Self::new_kv(params, rng, name, d, d, heads)
    }

    /// Attention whose keys/values come from a `d_kv`-wide source.
    pub fn new_kv<T: Scalar>(
        params: &mut Params<T>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        d_kv: usize,
        heads: usize,
    ) -> Self {
        assert!(d % heads == 0, "model width must divide into heads");
        MultiheadAttention {
            wq: Linear::new(params, rng, &format!("{name}.wq"), d, d),
            wk: Linear::new(params, rng, &format!("{name}.wk"), d_kv, d),
            wv: Linear::new(params, rng, &format!("{name}.wv"), d_kv, d),
            wo: Linear::new(params, rng, &format!("{name}.wo"), d, d),
            heads,
            d,
        }
    }

    /// `q_in: [mq,d]`, `k_in`/`v_in: [mk,d]`; `bias` (if any) is added to the
    /// pre-softmax logits of every head, shape `[mq,mk]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Params<T>,
        q_in: &Tensor<T>,
        k_in: &Tensor<T>,
        v_in: &Tensor<T>,
        bias: Option<&ArrayD<T>>,
    ) -> Tensor<T> {
        let q = self.wq.forward(g, p, q_in);
        let k = self.wk.forward(g, p, k_in);
        let v = self.wv.forward(g, p, v_in);
        let dh = self.d / self.heads;
        let scale = T::f(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(1, h * dh, dh);
            let kh = k.narrow(1, h * dh, dh);
            let vh = v.narrow(1, h * dh, dh);
            let mut s = qh.mm_nt(&kh).mul_scalar(scale);
            if let Some(b) = bias {
                s = s.add_const(b);
            }
            outs.push(s.softmax_rows().mm(&vh));
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let o = Tensor::concat(1, &refs);
        self.wo.forward(g, p, &o)
    }

    /// Per-head attention probabilities, for inspection in tests.
    pub fn attention_probs<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Params<T>,
        q_in: &Tensor<T>,
        k_in: &Tensor<T>,
        bias: Option<&ArrayD<T>>,
    ) -> Vec<ArrayD<T>> {
        let q = self.wq.forward(g, p, q_in);
        let k = self.wk.forward(g, p, k_in);
        let dh = self.d / self.heads;
        let scale = T::f(1.0 / (dh as f64).sqrt());
        (0..self.heads)
            .map(|h| {
                let qh = q.narrow(1, h * dh, dh);
                let kh = k.narrow(1, h * dh, dh);
                let mut s = qh.mm_nt(&kh).mul_scalar(scale);
                if let Some(b) = bias {
                    s = s.add_const(b);
                }
                s.softmax_rows().value().clone()
            })
            .collect()
    }
}

/// Sinusoidal 2-d positional encoding for an `h x w` grid, flattened
/// row-major to `[h*w, d]`. Half the channels encode y, half encode x.
pub fn sinusoidal_2d<T: Scalar>(d: usize, h: usize, w: usize) -> ArrayD<T> {
    assert!(d % 4 == 0, "positional encoding width must be divisible by 4");
    let half = d / 2;
    let two_pi = std::f64::consts::TAU;
    let mut out = ndarray::Array2::<T>::zeros((h * w, d));
    for i in 0..h {
        let ye = (i as f64 + 0.5) / h as f64 * two_pi;
        for j in 0..w {
            let xe = (j as f64 + 0.5) / w as f64 * two_pi;
            let row = i * w + j;
            for t in 0..half / 2 {
                let freq = 10000f64.powf(2.0 * t as f64 / half as f64);
                out[[row, 2 * t]] = T::f((ye / freq).sin());
                out[[row, 2 * t + 1]] = T::f((ye / freq).cos());
                out[[row, half + 2 * t]] = T::f((xe / freq).sin());
                out[[row, half + 2 * t + 1]] = T::f((xe / freq).cos());
            }
        }
    }
    out.into_dyn()
}

/// Flatten a `[C,H,W]` tensor to `[H*W, C]` (attention key/value layout).
pub fn flatten_hw<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 3);
    x.reshape(&[s[0], s[1] * s[2]]).transpose2()
}

/// Inverse of [`flatten_hw`]: `[H*W, C]` back to `[C,H,W]`.
pub fn unflatten_hw<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0], h * w);
    x.transpose2().reshape(&[s[1], h, w])
}
