//! SGD with heavy-ball momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v <- momentum * v + grad + wd * p; p <- p - lr * v` for every
    /// parameter in the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        self.step_params(store, &ids, grads)
    }

    pub fn step_params(
        &mut self,
        store: &mut ParamStore,
        ids: &[ParamId],
        grads: &Gradients,
    ) -> Result<()> {
        let missing = ids.iter().find(|&&id| !grads.has_param(id));
        if let Some(&id) = missing {
            return Err(Error::MissingGradient(store.name(id).to_string()));
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for &id in ids {
            let grad = grads.param(id).expect("checked above");
            let param = store.get_mut(id);
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; param.numel()]);
            debug_assert_eq!(v.len(), param.numel());
            for ((p, vi), g) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = self.momentum * *vi + g + self.weight_decay * *p;
                *p -= self.lr * *vi;
            }
        }
        Ok(())
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(id.index()).and_then(|v| v.as_deref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn one_param_step(store: &mut ParamStore, opt: &mut Sgd, id: ParamId, grad: f64) {
        // loss = grad * p
        let mut g = Graph::new();
        let p = g.param(store, id);
        let l = g.scale(p, grad).unwrap();
        let l = g.sum(l).unwrap();
        let grads = g.backward(l).unwrap();
        opt.step(store, &grads).unwrap();
    }

    #[test]
    fn plain_step() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[1], vec![1.0]).unwrap());
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        one_param_step(&mut store, &mut opt, id, 1.0);
        assert!((store.get(id).item() - 0.9).abs() < 1e-15);
        one_param_step(&mut store, &mut opt, id, 0.0);
        assert!((store.get(id).item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 1e-2);
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(&[1], vec![2.0]).unwrap());
        let mut opt = Sgd::new(lr, mu, wd);
        let grads = [0.5, -0.25];
        let (mut p, mut v) = (2.0f64, 0.0f64);
        for &gr in &grads {
            v = mu * v + gr + wd * p;
            p -= lr * v;
            one_param_step(&mut store, &mut opt, id, gr);
        }
        assert!((store.get(id).item() - p).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::ones(&[1]));
        store.add("b", Tensor::ones(&[1]));
        let mut g = Graph::new();
        let pa = g.param(&store, a);
        let l = g.sum(pa).unwrap();
        let grads = g.backward(l).unwrap();
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        assert!(matches!(opt.step(&mut store, &grads), Err(Error::MissingGradient(n)) if n == "b"));
    }
}
