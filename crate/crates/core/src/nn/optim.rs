use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Updates applied so far (bias-correction exponent).
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f32) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| {
                    let (r, c) = store.value(id).shape();
                    Tensor::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of the parameters that have a gradient and pass `filter`.
    /// Moments of filtered-out parameters are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        filter: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        let step = (self.lr as f64 * bc2.sqrt() / bc1) as f32;
        for (id, g) in grads {
            if !filter(store.name(*id)) {
                continue;
            }
            let i = id.index();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(*id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                p[k] -= step * m[k] / (v[k].sqrt() + self.eps * (bc2.sqrt() as f32));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..500 {
            let g = store.value(id).scale(2.0);
            opt.step(&mut store, &[(id, g)], |_| true);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn filtered_parameters_stay_fixed() {
        let mut store = ParamStore::new();
        let a = store.add("map.w", Tensor::scalar(1.0));
        let b = store.add("content.w", Tensor::scalar(1.0));
        let mut opt = Adam::new(&store, 0.1);
        let grads = vec![(a, Tensor::scalar(1.0)), (b, Tensor::scalar(1.0))];
        opt.step(&mut store, &grads, |n| n.starts_with("map."));
        assert!(store.value(a).item() < 1.0);
        assert_eq!(store.value(b).item(), 1.0);
    }
}
