//! Parameter updates: plain SGD (the default), optionally with momentum,
//! and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::train::NamedGrads;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// `p ← p − lr·(g + weight_decay·p)` for every parameter.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &NamedGrads<T>, lr: f64, weight_decay: f64) -> Result<()> {
    check_grads(params, grads)?;
    let (lr, wd) = (T::lit(lr), T::lit(weight_decay));
    for (name, p) in params.iter_mut() {
        for (pv, &gv) in p.data_mut().iter_mut().zip(grads[name].data()) {
            *pv = *pv - lr * (gv + wd * *pv);
        }
    }
    Ok(())
}

fn check_grads<T: Scalar>(params: &ParamStore<T>, grads: &NamedGrads<T>) -> Result<()> {
    for (name, p) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::Contract(format!("no gradient for parameter {name}"))),
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::shape("optimizer step", p.shape(), g.shape()))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Moment buffers; empty for momentum-free SGD.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn cast<U: Scalar>(&self) -> OptimizerState<U> {
        OptimizerState {
            step: self.step,
            first: self.first.cast(),
            second: self.second.cast(),
        }
    }
}

fn slot<'a, T: Scalar>(store: &'a mut ParamStore<T>, name: &str, like: &Tensor<T>) -> &'a mut Tensor<T> {
    if store.get(name).is_none() {
        store.insert(name.to_string(), Tensor::zeros(like.shape().to_vec()));
    }
    store.get_mut(name).expect("inserted")
}

/// One update with the configured rule. Weight decay is added to the
/// gradient (L2) for every rule.
pub fn optimizer_step<T: Scalar>(
    kind: OptimizerKind,
    params: &mut ParamStore<T>,
    grads: &NamedGrads<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<()> {
    state.step += 1;
    match kind {
        OptimizerKind::Sgd if momentum == 0.0 => sgd_step(params, grads, lr, weight_decay),
        OptimizerKind::Sgd => {
            check_grads(params, grads)?;
            let (lr, wd, mu) = (T::lit(lr), T::lit(weight_decay), T::lit(momentum));
            for (name, p) in params.iter_mut() {
                let buf = slot(&mut state.first, name, p);
                for ((pv, &gv), b) in p.data_mut().iter_mut().zip(grads[name].data()).zip(buf.data_mut()) {
                    *b = mu * *b + gv + wd * *pv;
                    *pv = *pv - lr * *b;
                }
            }
            Ok(())
        }
        OptimizerKind::Adam => {
            check_grads(params, grads)?;
            let t = state.step as i32;
            let c1 = 1.0 - ADAM_BETA1.powi(t);
            let c2 = 1.0 - ADAM_BETA2.powi(t);
            let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
            let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(ADAM_EPS));
            let (c1, c2) = (T::lit(c1), T::lit(c2));
            for (name, p) in params.iter_mut() {
                let m = slot(&mut state.first, name, p);
                let v = slot(&mut state.second, name, p);
                let g = grads[name].data();
                for (i, pv) in p.data_mut().iter_mut().enumerate() {
                    let gi = g[i] + wd * *pv;
                    let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                    let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    *pv = *pv - lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                }
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::default();
        p.insert("w".into(), Tensor::scalar(v));
        p
    }

    fn grad(v: f64) -> NamedGrads<f64> {
        let mut g = NamedGrads::new();
        g.insert("w".into(), Tensor::scalar(v));
        g
    }

    #[test]
    fn plain_sgd_arithmetic() {
        let mut p = one(1.0);
        sgd_step(&mut p, &grad(1.0), 0.1, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.9);

        let before = p.clone();
        sgd_step(&mut p, &grad(0.0), 0.1, 0.0).unwrap();
        assert!(p.bit_eq(&before));

        let mut q = one(1.0);
        for k in 1..=5 {
            sgd_step(&mut q, &grad(0.0), 0.5, 0.2).unwrap();
            assert!((q.get("w").unwrap().item() - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let err = sgd_step(&mut one(1.0), &NamedGrads::new(), 0.1, 0.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = one(0.0);
        let mut s = OptimizerState::default();
        for _ in 0..2 {
            optimizer_step(OptimizerKind::Sgd, &mut p, &grad(1.0), &mut s, 1.0, 0.0, 0.5).unwrap();
        }
        // buffers 1 then 1.5
        assert_eq!(p.get("w").unwrap().item(), -2.5);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = one(0.0);
        let mut s = OptimizerState::default();
        optimizer_step(OptimizerKind::Adam, &mut p, &grad(3.0), &mut s, 0.01, 0.0, 0.0).unwrap();
        assert!((p.get("w").unwrap().item() + 0.01).abs() < 1e-9);
    }
}
