//! Parameter updates.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &GradMap, mask: Option<&Mask>) -> Result<()>;
}

/// Plain stochastic gradient descent with a fixed learning rate.
#[derive(Clone, Copy, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &GradMap, mask: Option<&Mask>) -> Result<()> {
        optimizer_step(params, grads, self.lr, mask)
    }
}

/// `w ← w − lr·g` for every parameter; masked positions are forced to `0.0`.
pub fn optimizer_step(params: &mut ParamStore, grads: &GradMap, lr: f64, mask: Option<&Mask>) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config("lr", format!("must be positive and finite, got {lr}")));
    }
    if let Some(m) = mask {
        m.check_params(params)?;
    }
    // validate everything before touching any weight
    for (name, value) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::training(name.clone(), "no gradient supplied"))?;
        if g.shape() != value.shape() {
            return Err(Error::training(
                name.clone(),
                format!("gradient shape {:?} vs parameter {:?}", g.shape(), value.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::training(name.clone(), "non-finite gradient"));
        }
    }
    for (name, value) in params.iter_mut() {
        let g = &grads[name];
        for (w, gv) in value.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * gv;
        }
        if let Some(entry) = mask.and_then(|m| m.entry(name)) {
            for (w, &k) in value.data_mut().iter_mut().zip(entry.keep()) {
                if !k {
                    *w = 0.0;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::new(vec![1, 1], vec![v]).unwrap());
        p
    }

    fn grad(name: &str, g: f64) -> GradMap {
        GradMap::from([(name.to_string(), Tensor::new(vec![1, 1], vec![g]).unwrap())])
    }

    #[test]
    fn one_step_arithmetic() {
        let mut p = single("w", 1.0);
        optimizer_step(&mut p, &grad("w", 2.0), 0.1, None).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn masked_position_stays_zero_bitwise() {
        let mut p = single("w", 0.0);
        let mask = Mask::from_flags(vec![("w".into(), vec![1, 1], vec![false])]).unwrap();
        optimizer_step(&mut p, &grad("w", -123.0), 0.5, Some(&mask)).unwrap();
        assert_eq!(p.get("w").unwrap().item().to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn quadratic_hand_iteration() {
        // loss (w-3)^2, gradient 2(w-3): 0 -> 1.5 -> 2.25 at lr 0.25
        let mut p = single("w", 0.0);
        for expected in [1.5, 2.25] {
            let w = p.get("w").unwrap().item();
            optimizer_step(&mut p, &grad("w", 2.0 * (w - 3.0)), 0.25, None).unwrap();
            assert_eq!(p.get("w").unwrap().item(), expected);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut p = single("layer.w", 1.0);
        let err = optimizer_step(&mut p, &grad("layer.w", f64::NAN), 0.1, None).unwrap_err();
        match err {
            Error::Training { param, .. } => assert_eq!(param, "layer.w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.get("layer.w").unwrap().item(), 1.0);
    }
}
