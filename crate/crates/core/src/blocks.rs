//! Gradient reversal, the multilabel binary vector (MBV) bottleneck and the
//! prediction-head layer.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Linear, Norm, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReverser {
    pub lambda_scale: f32,
}

impl Default for GradientReverser {
    fn default() -> Self {
        Self { lambda_scale: 1.0 }
    }
}

impl GradientReverser {
    pub fn new(lambda_scale: f32) -> Result<Self> {
        if !(lambda_scale >= 0.0 && lambda_scale.is_finite()) {
            return Err(Error::Config(format!(
                "GRL scale must be a nonnegative number, got {lambda_scale}"
            )));
        }
        Ok(Self { lambda_scale })
    }

    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        grl_apply(g, x, self.lambda_scale)
    }
}

/// Identity forward; the backward pass delivers `-lambda_scale * grad`.
pub fn grl_apply(g: &mut Graph, x: Var, lambda_scale: f32) -> Var {
    assert!(lambda_scale >= 0.0, "GRL scale must be nonnegative");
    g.grl(x, lambda_scale)
}

/// Per-channel two-way Gumbel-softmax. Logits arrive as `T x 2*dim` with the
/// "on" logits in the first `dim` columns and the "off" logits after them.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MBVBottleneck {
    pub dim: usize,
    pub temperature: f32,
    pub hard_mode: bool,
}

impl MBVBottleneck {
    pub fn new(dim: usize, temperature: f32, hard_mode: bool) -> Result<Self> {
        if dim == 0 || !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!(
                "MBV needs dim > 0 and temperature > 0, got {dim} and {temperature}"
            )));
        }
        Ok(Self {
            dim,
            temperature,
            hard_mode,
        })
    }
}

// keeps the relaxed output strictly inside (0, 1) in f32
const SOFT_EDGE: f32 = 1.0 / 16_777_216.0;

/// Standard Gumbel draw, `-ln(-ln u)` with `u` uniform on the open interval.
pub fn gumbel(rng: &mut (impl RngCore + ?Sized)) -> f64 {
    let u = ((rng.random::<u64>() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    -(-u.ln()).ln()
}

/// Probability of the "on" class under a two-way Gumbel-softmax, or its
/// straight-through binarization when `mbv.hard_mode` is set. Without `rng`
/// no noise is added, so hard mode reduces to `on > off`.
pub fn mbv_encode(
    g: &mut Graph,
    logits: Var,
    mbv: &MBVBottleneck,
    rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let (rows, cols) = g.value(logits).shape();
    if cols != 2 * mbv.dim {
        return Err(Error::shape(format!(
            "MBV over {} channels expects {} logit columns, got {cols}",
            mbv.dim,
            2 * mbv.dim
        )));
    }
    let on = g.slice_cols(logits, 0, mbv.dim);
    let off = g.slice_cols(logits, mbv.dim, cols);
    let mut diff = g.sub(on, off);
    if let Some(rng) = rng {
        let noise = Tensor::from_fn(rows, mbv.dim, |_, _| (gumbel(rng) - gumbel(rng)) as f32);
        let noise = g.constant(noise);
        diff = g.add(diff, noise);
    }
    let scaled = g.scale(diff, 1.0 / mbv.temperature);
    let p = g.sigmoid(scaled);
    let p = g.scale(p, 1.0 - 2.0 * SOFT_EDGE);
    let edge = g.constant(Tensor::full(rows, mbv.dim, SOFT_EDGE));
    let soft = g.add(p, edge);
    Ok(if mbv.hard_mode {
        g.straight_through(soft)
    } else {
        soft
    })
}

/// Affine, GELU, layer normalization, affine; applied frame by frame.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub fc1: Linear,
    pub norm: Norm,
    pub fc2: Linear,
}

impl PredictionHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self {
            in_dim,
            hidden_dim,
            out_dim,
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), in_dim, hidden_dim),
            norm: Norm::new(store, &format!("{name}.norm"), hidden_dim),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden_dim, out_dim),
        }
    }
}

pub fn prediction_head_apply(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    head: &PredictionHead,
) -> Result<Var> {
    let cols = g.value(x).cols();
    if cols != head.in_dim {
        return Err(Error::shape(format!(
            "prediction head expects {} channels, got {cols}",
            head.in_dim
        )));
    }
    let h = head.fc1.forward(g, store, x);
    let h = g.gelu(h);
    let h = head.norm.layer(g, store, h);
    Ok(head.fc2.forward(g, store, h))
}

/// Forward-only evaluation on a plain tensor.
pub fn prediction_head_eval(store: &ParamStore, x: &Tensor, head: &PredictionHead) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = prediction_head_apply(&mut g, store, xv, head)?;
    Ok(g.value(y).clone())
}
