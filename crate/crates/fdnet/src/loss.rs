//! Training objective: balanced weighted pixel loss plus gradient difference
//! loss (GDL).
//!
//! The pixel loss runs p = 1 and p = 2 together,
//! `sum w(target) * (|pred-target| + (pred-target)^2)`, with piecewise-constant
//! intensity weights looked up from the target frame so the objective stays
//! fixed during optimization. GDL penalizes mismatched spatial gradients to
//! counter blurring. Both are combined as
//! `lambda_pixel * L_pixel + lambda_gdl * L_gdl`, reported as the mean over
//! the batch axis.

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, Value};
use serde::{Deserialize, Serialize};

/// Intensity domain the weight thresholds live in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    /// Rain rate in mm/h.
    RainRate,
    /// Radar reflectivity in dBZ.
    Dbz,
    /// Unitless values in [0, 1].
    Normalized,
}

/// Piecewise-constant intensity-to-weight lookup. Intervals are half-open
/// `[lo, hi)`: a value exactly at a threshold takes the higher weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    /// Strictly increasing interval boundaries.
    pub thresholds: Vec<f64>,
    /// One weight per interval: `thresholds.len() + 1` entries,
    /// positive and non-decreasing.
    pub weights: Vec<f64>,
    pub domain: ValueDomain,
}

impl WeightScheme {
    pub fn new(thresholds: Vec<f64>, weights: Vec<f64>, domain: ValueDomain) -> Result<Self> {
        if weights.len() != thresholds.len() + 1 {
            return Err(Error::Config(format!(
                "weight scheme needs {} weights for {} thresholds, got {}",
                thresholds.len() + 1,
                thresholds.len(),
                weights.len()
            )));
        }
        if !thresholds.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("weight thresholds must be strictly increasing".into()));
        }
        if !weights.iter().all(|&w| w > 0.0) || !weights.windows(2).all(|w| w[0] <= w[1]) {
            return Err(Error::Config(
                "weights must be positive and non-decreasing in intensity".into(),
            ));
        }
        Ok(WeightScheme {
            thresholds,
            weights,
            domain,
        })
    }

    /// Rain-rate weights: 1 below 2 mm/h, then 2, 5, 10, and 30 from 30 mm/h up.
    pub fn hko_rainrate() -> Self {
        WeightScheme::new(
            vec![2.0, 5.0, 10.0, 30.0],
            vec![1.0, 2.0, 5.0, 10.0, 30.0],
            ValueDomain::RainRate,
        )
        .expect("static scheme is valid")
    }

    /// Reflectivity weights: 1 below 20 dBZ, then 2, 5, 10, and 30 from 50 dBZ up.
    pub fn srad_dbz() -> Self {
        WeightScheme::new(
            vec![20.0, 30.0, 40.0, 50.0],
            vec![1.0, 2.0, 5.0, 10.0, 30.0],
            ValueDomain::Dbz,
        )
        .expect("static scheme is valid")
    }

    /// Every pixel weighs 1.
    pub fn uniform(domain: ValueDomain) -> Self {
        WeightScheme::new(vec![], vec![1.0], domain).expect("static scheme is valid")
    }

    /// Reflectivity-style weights rescaled onto [0, 1]: thresholds
    /// 0.25/0.375/0.5/0.625 mirror 20/30/40/50 dBZ of an 80-dBZ span.
    pub fn normalized_default() -> Self {
        WeightScheme::new(
            vec![0.25, 0.375, 0.5, 0.625],
            vec![1.0, 2.0, 5.0, 10.0, 30.0],
            ValueDomain::Normalized,
        )
        .expect("static scheme is valid")
    }

    /// Weight for a single intensity value.
    pub fn pixel_weight(&self, value: f64) -> f64 {
        let idx = self.thresholds.iter().take_while(|&&t| value >= t).count();
        self.weights[idx]
    }

    /// Weight map of a whole tensor (in the tensor's element type).
    pub fn weights_for<E: Element>(&self, target: &Tensor<E>) -> Tensor<E> {
        target.map(|v| E::from_f64(self.pixel_weight(v.to_f64())))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_pixel: f64,
    pub lambda_gdl: f64,
    /// GDL exponent; 1 keeps plain absolute differences.
    pub gdl_exponent: i32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_pixel: 1.0,
            lambda_gdl: 1.0,
            gdl_exponent: 1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_pixel < 0.0 || self.lambda_gdl < 0.0 {
            return Err(Error::Config("loss lambdas must be >= 0".into()));
        }
        if self.gdl_exponent < 1 {
            return Err(Error::Config("gdl exponent must be an integer >= 1".into()));
        }
        Ok(())
    }
}

/// Batch divisor: rank-5 tensors are `[K, N, C, H, W]` and average over `N`;
/// anything smaller is a single sequence.
fn batch_size(shape: &[usize]) -> usize {
    if shape.len() == 5 {
        shape[1]
    } else {
        1
    }
}

/// `sum w(target) * (|pred-target| + (pred-target)^2)` over every element.
pub fn weighted_pixel_loss<E: Element>(
    g: &Graph<E>,
    pred: Value,
    target: &Tensor<E>,
    scheme: &WeightScheme,
) -> Result<Value> {
    let weights = scheme.weights_for(target);
    g.weighted_pixel_loss(pred, target, &weights)
}

/// Gradient difference loss with integer exponent `lambda >= 1`.
pub fn gdl_loss<E: Element>(g: &Graph<E>, pred: Value, target: &Tensor<E>, exponent: i32) -> Result<Value> {
    g.gdl_loss(pred, target, exponent)
}

/// The grouped objective values for one batch; `pixel` and `gdl` are already
/// divided by the batch size, `total` applies the lambdas.
pub struct LossValues {
    pub pixel: Value,
    pub gdl: Value,
    pub total: Value,
}

pub fn total_loss<E: Element>(
    g: &Graph<E>,
    pred: Value,
    target: &Tensor<E>,
    scheme: &WeightScheme,
    cfg: &LossConfig,
) -> Result<LossValues> {
    cfg.validate()?;
    let inv_batch = 1.0 / batch_size(target.shape()) as f64;
    let pixel_sum = weighted_pixel_loss(g, pred, target, scheme)?;
    let gdl_sum = gdl_loss(g, pred, target, cfg.gdl_exponent)?;
    let pixel = g.scale(pixel_sum, inv_batch)?;
    let gdl = g.scale(gdl_sum, inv_batch)?;
    let p = g.scale(pixel, cfg.lambda_pixel)?;
    let q = g.scale(gdl, cfg.lambda_gdl)?;
    let total = g.add(p, q)?;
    Ok(LossValues { pixel, gdl, total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hko_weight_table() {
        let s = WeightScheme::hko_rainrate();
        assert_eq!(s.pixel_weight(1.0), 1.0);
        assert_eq!(s.pixel_weight(7.0), 5.0);
        assert_eq!(s.pixel_weight(50.0), 30.0);
        // Boundary overlap resolved half-open: exactly 2 mm/h takes weight 2.
        assert_eq!(s.pixel_weight(2.0), 2.0);
        assert_eq!(s.pixel_weight(-3.0), 1.0);
    }

    #[test]
    fn srad_weight_table() {
        let s = WeightScheme::srad_dbz();
        assert_eq!(s.pixel_weight(25.0), 2.0);
        assert_eq!(s.pixel_weight(45.0), 10.0);
        assert_eq!(s.pixel_weight(60.0), 30.0);
    }

    #[test]
    fn uniform_weighs_everything_one() {
        let s = WeightScheme::uniform(ValueDomain::Normalized);
        for v in [-1.0, 0.0, 0.3, 5.0] {
            assert_eq!(s.pixel_weight(v), 1.0);
        }
    }

    #[test]
    fn weights_are_monotone_in_intensity() {
        for s in [WeightScheme::hko_rainrate(), WeightScheme::srad_dbz(), WeightScheme::normalized_default()] {
            let mut prev = 0.0;
            let lo = s.thresholds.first().copied().unwrap_or(0.0) - 5.0;
            let hi = s.thresholds.last().copied().unwrap_or(1.0) + 5.0;
            let mut v = lo;
            while v < hi {
                let w = s.pixel_weight(v);
                assert!(w >= prev);
                prev = w;
                v += 0.1;
            }
        }
    }

    #[test]
    fn invalid_schemes_are_rejected() {
        assert!(WeightScheme::new(vec![2.0, 2.0], vec![1.0, 2.0, 3.0], ValueDomain::Dbz).is_err());
        assert!(WeightScheme::new(vec![2.0], vec![2.0, 1.0], ValueDomain::Dbz).is_err());
        assert!(WeightScheme::new(vec![2.0], vec![1.0], ValueDomain::Dbz).is_err());
    }

    #[test]
    fn single_pixel_srad_example() {
        // target 35 dBZ, pred 30 dBZ: w = 5, loss = 5 * (5 + 25) = 150.
        let g = Graph::<f64>::new();
        let target = Tensor::scalar(35.0);
        let pred = g.constant(Tensor::scalar(30.0));
        let l = weighted_pixel_loss(&g, pred, &target, &WeightScheme::srad_dbz()).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 150.0);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let g = Graph::<f64>::new();
        let target = Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.21).sin().abs());
        let pred = g.constant(target.clone());
        let lv = total_loss(&g, pred, &target, &WeightScheme::normalized_default(), &LossConfig::default()).unwrap();
        assert_eq!(g.value(lv.total).item().unwrap(), 0.0);
    }

    #[test]
    fn doubling_weights_doubles_pixel_loss() {
        let g = Graph::<f64>::new();
        let target = Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.4).cos() * 30.0 + 25.0);
        let pred = g.constant(target.map(|v| v + 3.0));
        let base = WeightScheme::srad_dbz();
        let doubled = WeightScheme::new(
            base.thresholds.clone(),
            base.weights.iter().map(|w| w * 2.0).collect(),
            base.domain,
        )
        .unwrap();
        let l1 = weighted_pixel_loss(&g, pred, &target, &base).unwrap();
        let l2 = weighted_pixel_loss(&g, pred, &target, &doubled).unwrap();
        let v1 = g.value(l1).item().unwrap();
        let v2 = g.value(l2).item().unwrap();
        assert!((v2 - 2.0 * v1).abs() < 1e-9 * v1.abs().max(1.0));
    }

    #[test]
    fn gdl_examples() {
        let g = Graph::<f64>::new();
        // Constant frames: zero.
        let t_const = Tensor::full(&[3, 3], 0.4);
        let p_const = g.constant(Tensor::full(&[3, 3], 0.9));
        let l0 = gdl_loss(&g, p_const, &t_const, 1).unwrap();
        assert_eq!(g.value(l0).item().unwrap(), 0.0);
        // pred == target: zero for any content.
        let t = Tensor::from_fn(&[4, 5], |i| (i as f64 * 1.3).sin());
        let p = g.constant(t.clone());
        let l1 = gdl_loss(&g, p, &t, 1).unwrap();
        assert_eq!(g.value(l1).item().unwrap(), 0.0);
        // 1x2 frames: target [0,1], pred [0,0] -> |1 - 0| = 1.
        let t2 = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let p2 = g.constant(Tensor::zeros(&[1, 2]));
        let l2 = gdl_loss(&g, p2, &t2, 1).unwrap();
        assert_eq!(g.value(l2).item().unwrap(), 1.0);
    }

    #[test]
    fn total_loss_defaults_on_tiny_example() {
        // pixel (1+1) + gdl 1 = 3 with uniform weights.
        let g = Graph::<f64>::new();
        let target = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        let pred = g.constant(Tensor::zeros(&[1, 2]));
        let lv = total_loss(
            &g,
            pred,
            &target,
            &WeightScheme::uniform(ValueDomain::Normalized),
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(g.value(lv.total).item().unwrap(), 3.0);
    }

    #[test]
    fn zero_gdl_lambda_reduces_to_pixel_loss() {
        let g = Graph::<f64>::new();
        let target = Tensor::from_fn(&[2, 4, 4], |i| ((i * 13 % 7) as f64) / 7.0);
        let pred_t = target.map(|v| v * 0.8 + 0.05);
        let pred = g.constant(pred_t);
        let cfg = LossConfig {
            lambda_gdl: 0.0,
            ..LossConfig::default()
        };
        let scheme = WeightScheme::normalized_default();
        let lv = total_loss(&g, pred, &target, &scheme, &cfg).unwrap();
        let pixel_only = weighted_pixel_loss(&g, pred, &target, &scheme).unwrap();
        assert_eq!(
            g.value(lv.total).item().unwrap(),
            g.value(pixel_only).item().unwrap()
        );
    }

    #[test]
    fn batched_rank5_divides_by_batch() {
        let g = Graph::<f64>::new();
        // [K=1, N=2, C=1, H=1, W=1], both samples off by 1 with weight 1.
        let target = Tensor::zeros(&[1, 2, 1, 1, 1]);
        let pred = g.constant(Tensor::full(&[1, 2, 1, 1, 1], 1.0));
        let lv = total_loss(
            &g,
            pred,
            &target,
            &WeightScheme::uniform(ValueDomain::Normalized),
            &LossConfig::default(),
        )
        .unwrap();
        // Per sample: |1| + 1 = 2; summed 4, over N=2 -> 2.
        assert_eq!(g.value(lv.total).item().unwrap(), 2.0);
    }

    #[test]
    fn total_loss_gradient_away_from_kinks() {
        use crate::tensor::grad_check_sampled;
        let target = Tensor::from_fn(&[2, 5, 5], |i| ((i * 29 % 11) as f64) / 11.0);
        // Keep |pred - target| and the GDL terms away from their kinks.
        let pred = target.map(|v| v + 0.21 + 0.013 * (v * 17.0).sin());
        let scheme = WeightScheme::normalized_default();
        let cfg = LossConfig::default();
        let report = grad_check_sampled(
            |g, l| {
                let lv = total_loss(g, l[0], &target, &scheme, &cfg)?;
                Ok(lv.total)
            },
            std::slice::from_ref(&pred),
            usize::MAX,
            1e-5,
            3,
        )
        .unwrap();
        assert!(report.max_rel_err <= 1e-4, "loss gradient error {}", report.max_rel_err);
    }

    #[test]
    fn total_loss_positive_unless_equal() {
        let g = Graph::<f64>::new();
        let target = Tensor::from_fn(&[3, 3], |i| (i as f64 / 9.0).fract());
        let pred = g.constant(target.map(|v| v + 1e-3));
        let lv = total_loss(
            &g,
            pred,
            &target,
            &WeightScheme::normalized_default(),
            &LossConfig::default(),
        )
        .unwrap();
        assert!(g.value(lv.total).item().unwrap() > 0.0);
    }
}
