//! Mask-and-predict adversary: one factor of the assembled representation is
//! hidden and a stack of prediction heads tries to recover it from the rest.
//! Gradients reaching the encoders are reversed.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{grl_apply, prediction_head_apply, PredictionHead};
use crate::error::{Error, Result};
use crate::model::{Factor, FactorSlices};
use crate::nn::{Graph, ParamStore, RowSpan, SeqLayout, Tensor, Var};

/// Parameter-name prefix of every adversary weight.
pub const MAP_PREFIX: &str = "map.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactorMask {
    pub factor: Factor,
    pub channel_slice: Range<usize>,
    pub dim: usize,
}

impl FactorMask {
    pub fn new(factor: Factor, slices: &FactorSlices) -> Self {
        Self {
            factor,
            channel_slice: slices.get(factor),
            dim: slices.total(),
        }
    }

    /// Length-`D` vector: 0 on the masked slice, 1 elsewhere.
    pub fn as_vector(&self) -> Vec<f32> {
        (0..self.dim)
            .map(|c| if self.channel_slice.contains(&c) { 0.0 } else { 1.0 })
            .collect()
    }

    pub fn width(&self) -> usize {
        self.channel_slice.len()
    }
}

/// Uniform draw over the four factors.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, slices: &FactorSlices) -> FactorMask {
    FactorMask::new(Factor::ALL[rng.random_range(0..4)], slices)
}

/// `K` prediction heads mapping `D` channels back to `D` channels.
#[derive(Clone, Debug)]
pub struct MAPNetwork {
    pub heads: Vec<PredictionHead>,
    pub dim: usize,
}

impl MAPNetwork {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        if heads == 0 || dim == 0 || hidden == 0 {
            return Err(Error::Config("MAP network needs at least one nonempty head".into()));
        }
        let heads = (0..heads)
            .map(|i| PredictionHead::new(store, rng, &format!("{MAP_PREFIX}head{i}"), dim, hidden, dim))
            .collect();
        Ok(Self { heads, dim })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for head in &self.heads {
            h = prediction_head_apply(g, store, h, head)?;
        }
        Ok(h)
    }
}

/// Nodes of the adversarial branch for one batch.
#[derive(Clone, Copy, Debug)]
pub struct AdversaryVars {
    /// The reversed representation used as both MAP input and L1 target.
    pub reversed: Var,
    pub prediction: Var,
    pub loss: Var,
}

/// Batched adversarial branch with one mask per item. The representation
/// passes the gradient reverser once; the masked copy feeds the network and
/// the unmasked copy is the L1 target, so every gradient reaching `z` is
/// reversed while the network's own gradients are not.
pub fn adversary_forward(
    g: &mut Graph,
    store: &ParamStore,
    z: Var,
    masks: &[FactorMask],
    layout: &SeqLayout,
    net: &MAPNetwork,
    grl_lambda: f32,
) -> Result<AdversaryVars> {
    let (rows, cols) = g.value(z).shape();
    if cols != net.dim || rows != layout.rows() || masks.len() != layout.batch {
        return Err(Error::shape(format!(
            "adversary got {rows}x{cols} with {} masks; expected {}x{} with {}",
            masks.len(),
            layout.rows(),
            net.dim,
            layout.batch
        )));
    }
    if masks.iter().any(|m| m.dim != cols) {
        return Err(Error::shape("mask width differs from representation width"));
    }
    let reversed = grl_apply(g, z, grl_lambda);
    let mut keep = Tensor::zeros(rows, cols);
    let mut spans = Vec::with_capacity(rows);
    let valid_items = layout.lens.iter().filter(|&&l| l > 0).count().max(1);
    for (b, m) in masks.iter().enumerate() {
        let v = m.as_vector();
        let len = layout.lens[b];
        let w = if len == 0 {
            0.0
        } else {
            1.0 / (len as f64 * m.width() as f64 * valid_items as f64) as f32
        };
        for t in 0..layout.time {
            keep.row_mut(layout.row(b, t)).copy_from_slice(&v);
            spans.push(RowSpan {
                start: m.channel_slice.start,
                end: m.channel_slice.end,
                weight: if t < len { w } else { 0.0 },
            });
        }
    }
    let masked = g.mul_const(reversed, keep);
    let prediction = net.forward(g, store, masked)?;
    let loss = g.slice_l1(reversed, prediction, spans);
    Ok(AdversaryVars {
        reversed,
        prediction,
        loss,
    })
}

/// `net(grl(M * assembled))` for a single `T x D` representation.
pub fn map_predict(
    g: &mut Graph,
    store: &ParamStore,
    assembled: Var,
    mask: &FactorMask,
    net: &MAPNetwork,
    grl_lambda: f32,
) -> Result<Var> {
    let (rows, cols) = g.value(assembled).shape();
    if cols != net.dim || mask.dim != cols {
        return Err(Error::shape(format!(
            "MAP network over {} channels got {cols} (mask {})",
            net.dim, mask.dim
        )));
    }
    let keep = Tensor::from_fn(rows, cols, |_, c| if mask.channel_slice.contains(&c) { 0.0 } else { 1.0 });
    let masked = g.mul_const(assembled, keep);
    let x = grl_apply(g, masked, grl_lambda);
    net.forward(g, store, x)
}

/// Mean absolute error over the masked slice only.
pub fn adversarial_loss(assembled: &Tensor, prediction: &Tensor, mask: &FactorMask) -> Result<f64> {
    if assembled.shape() != prediction.shape() || assembled.cols() != mask.dim {
        return Err(Error::shape(format!(
            "adversarial loss shapes {:?} and {:?} with mask width {}",
            assembled.shape(),
            prediction.shape(),
            mask.dim
        )));
    }
    let mut sum = 0.0f64;
    for t in 0..assembled.rows() {
        for c in mask.channel_slice.clone() {
            sum += (assembled.get(t, c) as f64 - prediction.get(t, c) as f64).abs();
        }
    }
    Ok(sum / (assembled.rows() * mask.width()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{normal, Adam};
    use rand::SeedableRng;

    fn slices() -> FactorSlices {
        FactorSlices::new(2, 4, 3, 2)
    }

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    #[test]
    fn mask_frequencies_are_uniform() {
        let mut r = rng(0);
        let mut counts = [0usize; 4];
        for _ in 0..4000 {
            counts[sample_mask(&mut r, &slices()).factor.index()] += 1;
        }
        for c in counts {
            let f = c as f64 / 4000.0;
            assert!((0.22..=0.28).contains(&f), "{counts:?}");
        }
        let a: Vec<_> = (0..20).map(|_| sample_mask(&mut rng(5), &slices()).factor).collect();
        let b: Vec<_> = (0..20).map(|_| sample_mask(&mut rng(5), &slices()).factor).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn masks_partition_the_channels() {
        let mut covered = vec![0; 11];
        for f in Factor::ALL {
            let v = FactorMask::new(f, &slices()).as_vector();
            for (c, &x) in v.iter().enumerate() {
                if x == 0.0 {
                    covered[c] += 1;
                }
            }
        }
        assert!(covered.iter().all(|&n| n == 1));
        let m = FactorMask::new(Factor::Rhythm, &slices());
        assert_eq!(m.as_vector(), [0., 0., 1., 1., 1., 1., 1., 1., 1., 1., 1.]);
    }

    #[test]
    fn hand_l1() {
        let s = FactorSlices::new(2, 1, 1, 1);
        let mask = FactorMask::new(Factor::Rhythm, &s);
        let z = Tensor::from_rows(&[vec![1., 2., 9., 9., 9.], vec![3., 4., 9., 9., 9.]]).unwrap();
        let mut p = Tensor::zeros(2, 5);
        assert_eq!(adversarial_loss(&z, &p, &mask).unwrap(), 2.5);
        assert_eq!(adversarial_loss(&z, &z, &mask).unwrap(), 0.0);
        p = z.clone();
        p.set(0, 4, -100.0);
        assert_eq!(adversarial_loss(&z, &p, &mask).unwrap(), 0.0);
    }

    fn net(seed: u64, heads: usize) -> (ParamStore, MAPNetwork) {
        let mut store = ParamStore::new();
        let n = MAPNetwork::new(&mut store, &mut rng(seed), 11, heads, 44).unwrap();
        (store, n)
    }

    #[test]
    fn prediction_ignores_lambda_and_sees_zeros() {
        let (store, n) = net(1, 3);
        let z = normal(&mut rng(2), 6, 11, 1.0);
        let mask = FactorMask::new(Factor::Pitch, &slices());
        let run = |lambda: f32| {
            let mut g = Graph::new();
            let v = g.input(z.clone());
            let p = map_predict(&mut g, &store, v, &mask, &n, lambda).unwrap();
            g.value(p).clone()
        };
        assert_eq!(run(0.0), run(1.0));
        assert_eq!(run(1.0), run(3.5));
        // changing the hidden slice cannot change the prediction
        let mut z2 = z.clone();
        for t in 0..6 {
            for c in mask.channel_slice.clone() {
                z2.set(t, c, 42.0);
            }
        }
        let mut g = Graph::new();
        let v = g.input(z2);
        let p = map_predict(&mut g, &store, v, &mask, &n, 1.0).unwrap();
        assert_eq!(g.value(p), &run(1.0));
    }

    #[test]
    fn identity_head_on_masked_slice_follows_zero_propagation() {
        let mut store = ParamStore::new();
        let n = MAPNetwork::new(&mut store, &mut rng(3), 11, 1, 11).unwrap();
        let eye = Tensor::from_fn(11, 11, |r, c| (r == c) as u8 as f32);
        *store.value_mut(n.heads[0].fc1.weight) = eye.clone();
        *store.value_mut(n.heads[0].fc2.weight) = eye;
        let b2: Vec<f32> = (0..11).map(|i| i as f32 * 0.1).collect();
        *store.value_mut(n.heads[0].fc2.bias) = Tensor::from_vec(1, 11, b2.clone()).unwrap();
        let z = normal(&mut rng(4), 3, 11, 1.0);
        let mask = FactorMask::new(Factor::Content, &slices());
        let mut g = Graph::new();
        let v = g.input(z.clone());
        let p = map_predict(&mut g, &store, v, &mask, &n, 1.0).unwrap();
        let p = g.value(p);
        for t in 0..3 {
            // masked inputs are 0, GELU(0) = 0, so the hidden value there is
            // the row's negated normalized mean
            let h: Vec<f64> = (0..11)
                .map(|c| {
                    if mask.channel_slice.contains(&c) {
                        0.0
                    } else {
                        crate::nn::gelu(z.get(t, c)) as f64
                    }
                })
                .collect();
            let mean = h.iter().sum::<f64>() / 11.0;
            let var = h.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 11.0;
            for c in mask.channel_slice.clone() {
                let want = b2[c] as f64 - mean / (var + 1e-5).sqrt();
                assert!((p.get(t, c) as f64 - want).abs() < 1e-5);
            }
        }
    }

    fn batch_grads(lambda: Option<f32>, z: &Tensor, masks: &[FactorMask], layout: &SeqLayout) -> (Tensor, Vec<(crate::nn::ParamId, Tensor)>) {
        let (store, n) = net(7, 3);
        let mut g = Graph::new();
        let v = g.input(z.clone());
        let (loss, src) = match lambda {
            Some(l) => {
                let a = adversary_forward(&mut g, &store, v, masks, layout, &n, l).unwrap();
                (a.loss, v)
            }
            None => {
                // same branch with the reverser removed
                let mut keep = Tensor::zeros(z.rows(), z.cols());
                let mut spans = Vec::new();
                for (b, m) in masks.iter().enumerate() {
                    let w = 1.0 / (layout.lens[b] * m.width() * layout.batch) as f32;
                    for t in 0..layout.time {
                        keep.row_mut(layout.row(b, t)).copy_from_slice(&m.as_vector());
                        spans.push(RowSpan {
                            start: m.channel_slice.start,
                            end: m.channel_slice.end,
                            weight: if t < layout.lens[b] { w } else { 0.0 },
                        });
                    }
                }
                let masked = g.mul_const(v, keep);
                let p = n.forward(&mut g, &store, masked).unwrap();
                (g.slice_l1(v, p, spans), v)
            }
        };
        let grads = g.backward(&[(loss, 1.0)]);
        (grads.wrt(src).unwrap().clone(), grads.params(&g))
    }

    #[test]
    fn reversal_negates_encoder_gradient_only() {
        let layout = SeqLayout {
            batch: 3,
            time: 5,
            lens: vec![5, 3, 4],
        };
        let z = normal(&mut rng(8), 15, 11, 1.0);
        let masks = [Factor::Timbre, Factor::Rhythm, Factor::Pitch].map(|f| FactorMask::new(f, &slices()));
        let (gz_rev, gp_rev) = batch_grads(Some(1.0), &z, &masks, &layout);
        let (gz, gp) = batch_grads(None, &z, &masks, &layout);
        for (a, b) in gz_rev.data().iter().zip(gz.data()) {
            assert_eq!(*a, -*b);
        }
        assert!(gz.data().iter().any(|&v| v != 0.0));
        assert_eq!(gp_rev.len(), gp.len());
        for ((ia, a), (ib, b)) in gp_rev.iter().zip(&gp) {
            assert_eq!(ia, ib);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn batch_loss_matches_per_item_mean() {
        let layout = SeqLayout {
            batch: 2,
            time: 4,
            lens: vec![4, 2],
        };
        let (store, n) = net(9, 2);
        let z = normal(&mut rng(10), 8, 11, 1.0);
        let masks = [FactorMask::new(Factor::Content, &slices()), FactorMask::new(Factor::Timbre, &slices())];
        let mut g = Graph::new();
        let v = g.input(z.clone());
        let a = adversary_forward(&mut g, &store, v, &masks, &layout, &n, 1.0).unwrap();
        let pred = g.value(a.prediction).clone();
        let l0 = adversarial_loss(&z.slice_rows(0, 4), &pred.slice_rows(0, 4), &masks[0]).unwrap();
        let l1 = adversarial_loss(&z.slice_rows(4, 6), &pred.slice_rows(4, 6), &masks[1]).unwrap();
        let got = g.value(a.loss).item() as f64;
        assert!((got - (l0 + l1) / 2.0).abs() < 1e-5 * (1.0 + got));
    }

    #[test]
    fn map_only_updates_reduce_the_loss() {
        let layout = SeqLayout {
            batch: 4,
            time: 16,
            lens: vec![16, 16, 12, 9],
        };
        let (mut store, n) = net(11, 3);
        // correlated channels so the hidden slice is predictable
        let base = normal(&mut rng(12), 64, 3, 1.0);
        let z = Tensor::from_fn(64, 11, |r, c| base.get(r, c % 3) * (1.0 + 0.1 * c as f32));
        let masks: Vec<FactorMask> = Factor::ALL.iter().map(|&f| FactorMask::new(f, &slices())).collect();
        let mut adam = Adam::new(&store, 1e-3);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let mut g = Graph::new();
            let v = g.constant(z.clone());
            let a = adversary_forward(&mut g, &store, v, &masks, &layout, &n, 1.0).unwrap();
            losses.push(g.value(a.loss).item());
            let grads = g.backward(&[(a.loss, 1.0)]).params(&g);
            adam.step(&mut store, &grads, |name| name.starts_with(MAP_PREFIX));
        }
        let avg = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
        assert!(avg(&losses[150..]) < avg(&losses[..50]));
    }
}
