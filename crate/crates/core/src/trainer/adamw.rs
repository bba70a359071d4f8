use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{LMParams, ParamGrads};

use super::TrainConfig;

/// First and second moments, one tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub step: usize,
}

impl AdamState {
    pub fn new(params: &LMParams) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update: decoupled decay `p *= 1 - lr·wd`, then the
/// bias-corrected Adam step.
pub fn adamw_step(
    params: &mut LMParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.tensors.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.tensors.len(),
            state.m.len()
        )));
    }
    let t = state.step + 1;
    if !grads.all_finite() {
        return Err(Error::Diverged {
            step: t,
            reason: "non-finite gradient".into(),
            last_good: None,
        });
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let lr = cfg.learning_rate;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let decay = 1.0 - lr * cfg.weight_decay;

    let tensors = params.tensors_mut()?;
    for (((p, g), m), v) in tensors
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut());
        for (((p, &g), m), v) in it {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p *= decay;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps);
        }
    }
    state.step = t;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LMConfig;

    fn tiny() -> LMParams {
        LMParams::init(
            &LMConfig {
                vocab_size: 5,
                d_model: 4,
                n_layers: 1,
                n_heads: 1,
                max_seq_len: 4,
            },
            0,
        )
        .unwrap()
    }

    #[test]
    fn zero_grads_without_decay_change_nothing() {
        let mut p = tiny();
        let before = p.clone();
        let g = ParamGrads::zeros_like(&p);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_grads_with_decay_scale_weights() {
        let mut p = tiny();
        let before = p.clone();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut s = AdamState::new(&p);
        let g = ParamGrads::zeros_like(&p);
        adamw_step(&mut p, &g, &mut s, &cfg).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, y * (1.0 - 0.01 * 0.5));
            }
        }
    }

    #[test]
    fn two_steps_match_hand_recursion() {
        let mut p = tiny();
        let x0 = p.tensors()[0].data()[0];
        let g = 0.5;
        let mut grads = ParamGrads::zeros_like(&p);
        grads.tensors[0].data_mut()[0] = g;
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &grads, &mut s, &cfg).unwrap();
        adamw_step(&mut p, &grads, &mut s, &cfg).unwrap();

        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, 0.1, 0.01);
        let mut x = x0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x *= 1.0 - lr * wd;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.tensors()[0].data()[0] - x).abs() < 1e-15);
        // A constant gradient gives steps of almost exactly lr.
        assert!((x0 * (1.0 - lr * wd) * (1.0 - lr * wd) - x - 0.2).abs() < 1e-3);
    }

    #[test]
    fn non_finite_gradient_aborts_with_step() {
        let mut p = tiny();
        let mut g = ParamGrads::zeros_like(&p);
        let mut s = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut s, &TrainConfig::default()).unwrap();
        g.tensors[2].data_mut()[1] = f64::NAN;
        match adamw_step(&mut p, &g, &mut s, &TrainConfig::default()) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frozen_parameters_are_not_updated() {
        let r = tiny().snapshot_reference();
        let mut frozen = r.clone();
        let mut s = AdamState::new(&r);
        let res = adamw_step(&mut frozen, &ParamGrads::zeros_like(&r), &mut s, &TrainConfig::default());
        assert!(res.is_err());
    }
}
