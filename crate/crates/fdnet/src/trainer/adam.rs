//! Adam with bias correction, plus gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor, aligned
/// with the parameter walk order.
#[derive(Clone, Debug)]
pub struct AdamState<E: Element> {
    pub hyper: AdamHyper,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(hyper: AdamHyper, shapes: &[(String, Tensor<E>)]) -> Self {
        AdamState {
            hyper,
            step: 0,
            m: shapes.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: shapes.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Starts an update: bumps the step counter (bias correction uses it).
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter in place; `i` indexes the walk order. Call
    /// `begin_step` once per optimization step first.
    pub fn update_tensor(&mut self, i: usize, param: &mut Tensor<E>, grad: &Tensor<E>) -> Result<()> {
        if grad.shape() != param.shape() {
            return Err(Error::Shape(format!(
                "adam: gradient shape {:?} does not match parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let t = self.step as i32;
        let b1 = E::from_f64(self.hyper.beta1);
        let b2 = E::from_f64(self.hyper.beta2);
        let one = E::ONE;
        let corr1 = one - b1.powi(t);
        let corr2 = one - b2.powi(t);
        let lr = E::from_f64(self.hyper.lr);
        let eps = E::from_f64(self.hyper.eps);

        let m = self.m[i].data_mut();
        let v = self.v[i].data_mut();
        let pd = param.data_mut();
        for j in 0..pd.len() {
            let gj = grad.data()[j];
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            let delta = lr * m_hat / (v_hat.sqrt() + eps);
            if !delta.is_finite() {
                return Err(Error::NonFinite(format!(
                    "adam: non-finite update at parameter {i} element {j}"
                )));
            }
            pd[j] = pd[j] - delta;
        }
        Ok(())
    }

    /// One update over parameters and their gradients (same order as `m`/`v`).
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor<E>>,
        grads: &[Tensor<E>],
    ) -> Result<()> {
        self.begin_step();
        let mut count = 0usize;
        for (i, p) in params.enumerate() {
            self.update_tensor(i, p, &grads[i])?;
            count += 1;
        }
        if count != grads.len() {
            return Err(Error::Shape(format!(
                "adam: {count} parameters but {} gradients",
                grads.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale all gradients so the global L2 norm stays under the limit.
    #[default]
    Norm,
    /// Clamp each element into `[-clip, clip]`.
    Value,
}

/// Clips gradients in place; returns the pre-clip global L2 norm.
/// Non-finite gradients are an error, never clipped away.
pub fn clip_gradients<E: Element>(grads: &mut [Tensor<E>], clip_value: f64, mode: ClipMode) -> Result<f64> {
    if clip_value <= 0.0 {
        return Err(Error::Config("clip_value must be positive".into()));
    }
    let mut sq_sum = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        for (j, &x) in g.data().iter().enumerate() {
            let x = x.to_f64();
            if !x.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient tensor {i} element {j} is {x}"
                )));
            }
            sq_sum += x * x;
        }
    }
    let norm = sq_sum.sqrt();
    match mode {
        ClipMode::Norm => {
            if norm > clip_value {
                let scale = E::from_f64(clip_value / norm);
                for g in grads.iter_mut() {
                    for x in g.data_mut() {
                        *x *= scale;
                    }
                }
            }
        }
        ClipMode::Value => {
            let c = E::from_f64(clip_value);
            for g in grads.iter_mut() {
                for x in g.data_mut() {
                    *x = (*x).maximum(-c).minimum(c);
                }
            }
        }
    }
    Ok(norm)
}

/// Global L2 norm of a gradient set.
pub fn global_norm<E: Element>(grads: &[Tensor<E>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let v = x.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_100_clip_50_halves_everything() {
        // Two tensors with combined norm 100.
        let mut grads = vec![
            Tensor::<f64>::full(&[32], 12.5),   // sum sq = 32 * 156.25 = 5000
            Tensor::<f64>::full(&[32], -12.5),  // total 10000 -> norm 100
        ];
        let norm = clip_gradients(&mut grads, 50.0, ClipMode::Norm).unwrap();
        assert!((norm - 100.0).abs() < 1e-9);
        assert!(grads[0].data().iter().all(|&v| (v - 6.25).abs() < 1e-12));
        assert!((global_norm(&grads) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn small_norm_untouched() {
        let mut grads = vec![Tensor::<f64>::full(&[4], 1.0)];
        clip_gradients(&mut grads, 50.0, ClipMode::Norm).unwrap();
        assert!(grads[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn post_clip_norm_never_exceeds_limit() {
        for scale in [0.1, 1.0, 7.7, 123.0] {
            let mut grads = vec![Tensor::<f64>::from_fn(&[64], |i| (i as f64 - 32.0) * scale)];
            clip_gradients(&mut grads, 50.0, ClipMode::Norm).unwrap();
            assert!(global_norm(&grads) <= 50.0 + 1e-6);
        }
    }

    #[test]
    fn value_mode_clamps_elements() {
        let mut grads = vec![Tensor::<f64>::from_vec(&[3], vec![-80.0, 3.0, 120.0]).unwrap()];
        clip_gradients(&mut grads, 50.0, ClipMode::Value).unwrap();
        assert_eq!(grads[0].data(), &[-50.0, 3.0, 50.0]);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut grads = vec![Tensor::<f64>::from_vec(&[2], vec![1.0, f64::NAN]).unwrap()];
        assert!(clip_gradients(&mut grads, 50.0, ClipMode::Norm).is_err());
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // With a large constant gradient the first Adam update is ~ -lr*sign(g).
        let hyper = AdamHyper {
            lr: 1e-3,
            ..AdamHyper::default()
        };
        let named = vec![("p".to_string(), Tensor::<f64>::full(&[4], 1.0))];
        let mut adam = AdamState::new(hyper, &named);
        let mut p = Tensor::<f64>::full(&[4], 1.0);
        let grads = vec![Tensor::<f64>::full(&[4], 5.0)];
        adam.step(std::iter::once(&mut p), &grads).unwrap();
        for &v in p.data() {
            assert!((v - (1.0 - 1e-3)).abs() < 1e-3 * 1e-3, "update {v}");
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let named = vec![("p".to_string(), Tensor::<f64>::full(&[4], 0.3))];
        let mut adam = AdamState::new(AdamHyper::default(), &named);
        let mut p = Tensor::<f64>::full(&[4], 0.3);
        for _ in 0..5 {
            let grads = vec![Tensor::<f64>::zeros(&[4])];
            adam.step(std::iter::once(&mut p), &grads).unwrap();
        }
        assert!(p.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn identical_seeds_identical_trajectories() {
        let run = || {
            let named = vec![("p".to_string(), Tensor::<f32>::full(&[8], 1.0))];
            let mut adam = AdamState::new(AdamHyper::default(), &named);
            let mut p = Tensor::<f32>::full(&[8], 1.0);
            for i in 0..20 {
                let grads = vec![Tensor::<f32>::from_fn(&[8], |j| ((i * 8 + j) as f32 * 0.37).sin())];
                adam.step(std::iter::once(&mut p), &grads).unwrap();
            }
            p
        };
        assert!(crate::tensor::bitwise_eq(&run(), &run()));
    }

    #[test]
    fn single_step_decreases_quadratic_loss() {
        // L = 0.5 * sum(p^2) over 10 parameters; grad = p.
        let mut p = Tensor::<f64>::from_fn(&[10], |i| (i as f64 - 4.5) * 0.2);
        let loss = |p: &Tensor<f64>| 0.5 * p.data().iter().map(|v| v * v).sum::<f64>();
        let before = loss(&p);
        let hyper = AdamHyper {
            lr: 1e-2,
            ..AdamHyper::default()
        };
        let named = vec![("p".to_string(), p.clone())];
        let mut adam = AdamState::new(hyper, &named);
        let grads = vec![p.clone()];
        adam.step(std::iter::once(&mut p), &grads).unwrap();
        assert!(loss(&p) < before);
    }
}
