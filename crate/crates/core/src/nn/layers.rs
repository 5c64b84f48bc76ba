//! Parameter bundles for the layer types the encoders, decoder and MAP
//! network are built from.

use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, SeqLayout, Var};
use super::params::{uniform, xavier, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(1, dim)),
        }
    }

    pub fn layer(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }

    pub fn group(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        layout: &SeqLayout,
        groups: usize,
    ) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, layout, groups)
    }
}

/// 1-D convolution along time, "same" length, as im2col + matmul.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub proj: Linear,
    pub kernel: usize,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            proj: Linear::new(store, rng, name, in_ch * kernel, out_ch),
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SeqLayout) -> Var {
        let cols = g.im2col(x, layout, self.kernel);
        self.proj.forward(g, store, cols)
    }
}

#[derive(Clone, Debug)]
struct LstmDir {
    wih: ParamId,
    whh: ParamId,
    bias: ParamId,
}

/// Bidirectional LSTM layer; output is `[forward | backward]`, `2 * hidden` wide.
#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: LstmDir,
    bwd: LstmDir,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Self {
        let bound = 1.0 / (hidden as f32).sqrt();
        let mut dir = |tag: &str| LstmDir {
            wih: store.add(
                format!("{name}.{tag}.wih"),
                uniform(rng, in_dim, 4 * hidden, bound),
            ),
            whh: store.add(
                format!("{name}.{tag}.whh"),
                uniform(rng, hidden, 4 * hidden, bound),
            ),
            bias: store.add(
                format!("{name}.{tag}.bias"),
                uniform(rng, 1, 4 * hidden, bound),
            ),
        };
        let fwd = dir("fwd");
        let bwd = dir("bwd");
        Self { fwd, bwd, hidden }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SeqLayout) -> Var {
        let run = |g: &mut Graph, d: &LstmDir, reverse: bool| {
            let wih = g.param(store, d.wih);
            let whh = g.param(store, d.whh);
            let bias = g.param(store, d.bias);
            let xp = g.matmul(x, wih);
            let xp = g.add_row(xp, bias);
            g.lstm(xp, whh, layout, reverse)
        };
        let f = run(g, &self.fwd, false);
        let b = run(g, &self.bwd, true);
        g.concat_cols(&[f, b])
    }
}
