//! AdamW with decoupled weight decay.

use ultradp_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { lr, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    /// Restores saved moments; shapes must match `store`.
    pub fn from_state(store: &ParamStore, lr: f64, weight_decay: f64, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<Self> {
        let ok = m.len() == store.len()
            && v.len() == store.len()
            && store.iter().zip(m.iter().zip(&v)).all(|((_, _, p), (a, b))| a.shape() == p.shape() && b.shape() == p.shape());
        if !ok {
            return Err(Error::Format("optimizer moments do not match the parameters".into()));
        }
        Ok(Self { lr, weight_decay, step, m, v })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// One update. The step is refused, with nothing modified, if any
    /// gradient entry is not finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for ((id, name, p), g) in store.iter().zip(grads) {
            if g.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "gradient of `{name}` is {:?}, parameter is {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if let Some(k) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {} at entry {k} of `{name}` (param #{}), step {}",
                    g.data()[k],
                    id.index(),
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                p[i] -= self.lr * self.weight_decay * p[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p)).unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay() {
        let mut s = one(0.7);
        let mut o = AdamW::new(&s, 0.1, 0.0);
        o.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(s.by_name("p").unwrap().item().unwrap(), 0.7);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut s = one(0.0);
        let mut o = AdamW::new(&s, 0.01, 0.0);
        o.step(&mut s, &[Tensor::scalar(-3.0)]).unwrap();
        assert!((s.by_name("p").unwrap().item().unwrap() - 0.01).abs() < 1e-9);
    }

    #[test]
    fn pure_decay() {
        let mut s = one(1.0);
        let mut o = AdamW::new(&s, 0.001, 0.01);
        o.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        assert!((s.by_name("p").unwrap().item().unwrap() - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut s = one(1.0);
        let mut o = AdamW::new(&s, 0.1, 0.0);
        let e = o.step(&mut s, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(e, Error::Training(ref m) if m.contains("`p`")));
        assert_eq!(o.steps(), 0);
    }
}
