use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor::{DType, DynTensor, Element, Tensor};
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// First and second moments per slot, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every slot in `grads`.
///
/// A non-finite gradient anywhere aborts the step before anything changes.
pub fn adam_step(
    params: &mut WeightStore,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (slot, g) in grads {
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(slot.clone()));
        }
        let p = params
            .get(slot)
            .ok_or_else(|| TrainError::Config(format!("gradient for unknown slot {slot:?}")))?;
        if p.dims() != g.dims() {
            return Err(TrainError::Config(format!(
                "slot {slot:?} has dims {:?} but its gradient {:?}",
                p.dims(),
                g.dims()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (slot, g) in grads {
        let n = g.len();
        let m = state.m.entry(slot.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(slot.clone()).or_insert_with(|| vec![0.0; n]);
        let p = params.get(slot).expect("checked above");
        let updated: DynTensor = match p.dtype() {
            DType::F32 => update(&p.to_dtype::<f32>(), g, m, v, cfg, bc1, bc2).into(),
            DType::F64 => update(&p.to_dtype::<f64>(), g, m, v, cfg, bc1, bc2).into(),
        };
        params.set(slot.clone(), updated)?;
    }
    Ok(())
}

fn update<T: Element>(
    w: &Tensor<T>,
    g: &Tensor<f32>,
    m: &mut [f32],
    v: &mut [f32],
    cfg: &AdamConfig,
    bc1: f64,
    bc2: f64,
) -> Tensor<T> {
    let mut out = w.clone();
    for (i, (wi, &gi)) in out.data_mut().iter_mut().zip(g.data()).enumerate() {
        let gi = gi as f64;
        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gi;
        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        *wi = T::of_f64(wi.as_f64() - step);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(w: f64) -> WeightStore {
        let mut s = WeightStore::new();
        s.insert("w", Tensor::new(vec![1], vec![w]).unwrap()).unwrap();
        s
    }

    fn value(s: &WeightStore) -> f64 {
        s.get_as::<f64>("w").unwrap().data()[0]
    }

    fn grad(g: f64) -> IndexMap<String, Tensor<f32>> {
        IndexMap::from([("w".to_string(), Tensor::new(vec![1], vec![g as f32]).unwrap())])
    }

    #[test]
    fn zero_gradient_keeps_params_and_counts_step() {
        let mut s = scalar(0.25);
        let mut st = AdamState::new();
        adam_step(&mut s, &grad(0.0), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(value(&s), 0.25);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let mut s = scalar(0.0);
        let mut st = AdamState::new();
        let cfg = AdamConfig::default();
        let mut prev = 0.0;
        for _ in 0..2000 {
            adam_step(&mut s, &grad(0.37), &mut st, &cfg).unwrap();
            let w = value(&s);
            assert!(((prev - w) - cfg.lr).abs() < 1e-8);
            prev = w;
        }
    }

    /// Trajectory of w <- Adam(w, 2w) from w = 1, frozen from an
    /// independent scalar simulation.
    #[test]
    fn quadratic_bowl_trajectory() {
        let mut s = scalar(1.0);
        let mut st = AdamState::new();
        let cfg = AdamConfig::default();
        let (mut below_f, mut below_w) = (None, None);
        for t in 1..=3000u32 {
            let w = value(&s);
            adam_step(&mut s, &grad(2.0 * w), &mut st, &cfg).unwrap();
            let w = value(&s);
            if t == 500 {
                assert!((w - 0.560_507_544_622_190_9).abs() < 1e-5, "{w}");
            }
            if below_f.is_none() && w * w < 1e-3 {
                below_f = Some(t);
            }
            if below_w.is_none() && w.abs() < 1e-3 {
                below_w = Some(t);
            }
        }
        assert!(below_f.unwrap().abs_diff(1870) <= 2, "{below_f:?}");
        assert!(below_w.unwrap().abs_diff(2722) <= 5, "{below_w:?}");
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut s = scalar(0.5);
        let mut st = AdamState::new();
        let err = adam_step(&mut s, &grad(f64::NAN), &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(TrainError::NonFiniteGradient(_))));
        assert_eq!((value(&s), st.step), (0.5, 0));
    }
}
