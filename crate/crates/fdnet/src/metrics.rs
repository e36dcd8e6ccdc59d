//! Forecast verification: balanced errors (BMSE/BMAE) and categorical skill
//! (CSI, HSS) per intensity threshold and per lead time, plus the dBZ/pixel
//! intensity conversions.
//!
//! Thresholding uses the event rule `value >= tau`. Degenerate score
//! denominators yield 0 rather than NaN. Scores are reported two ways:
//! pooled over all lead steps (counts summed first) and as the mean of
//! per-frame scores; the per-frame mean is the headline.

use crate::error::{Error, Result};
use crate::loss::WeightScheme;
use crate::tensor::{Element, Tensor};
use std::fmt::Write as _;

// --- intensity conversions -------------------------------------------------

/// dBZ -> 8-bit pixel: `floor(255 * (dbz + 10) / 70 + 0.5)`, clipped to [0, 255].
pub fn dbz_to_pixel(dbz: f64) -> u8 {
    let p = (255.0 * (dbz + 10.0) / 70.0 + 0.5).floor();
    p.clamp(0.0, 255.0) as u8
}

/// Continuous inverse of [`dbz_to_pixel`]: `70 * pixel / 255 - 10`.
pub fn pixel_to_dbz(pixel: f64) -> f64 {
    70.0 * pixel / 255.0 - 10.0
}

// --- confusion counts and scores -------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub true_neg: u64,
    pub false_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.true_neg += other.true_neg;
        self.false_neg += other.false_neg;
    }
}

/// Pixelwise event counts at threshold `tau` (event when `value >= tau`).
pub fn confusion<E: Element>(pred: &Tensor<E>, target: &Tensor<E>, tau: f64) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "confusion: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        match (p.to_f64() >= tau, t.to_f64() >= tau) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// `CSI = TP/(TP+FN+FP)`;
/// `HSS = (TP*TN - FN*FP) / ((TP+FN)(FN+TN) + (TP+FP)(FP+TN))`.
pub fn skill_scores(c: &ConfusionCounts) -> (f64, f64) {
    let (tp, fp, tn, fneg) = (
        c.true_pos as f64,
        c.false_pos as f64,
        c.true_neg as f64,
        c.false_neg as f64,
    );
    let csi_den = tp + fneg + fp;
    let csi = if csi_den == 0.0 { 0.0 } else { tp / csi_den };
    let hss_den = (tp + fneg) * (fneg + tn) + (tp + fp) * (fp + tn);
    let hss = if hss_den == 0.0 {
        0.0
    } else {
        (tp * tn - fneg * fp) / hss_den
    };
    (csi, hss)
}

/// Balanced errors over `N` frames, weights from the target:
/// `BMSE = (1/N) sum w(x) (x - xhat)^2`, `BMAE` with `|x - xhat|`.
/// A frame is one (H, W) plane, i.e. `numel / (H*W)` frames.
pub fn balanced_errors<E: Element>(
    pred: &Tensor<E>,
    target: &Tensor<E>,
    scheme: &WeightScheme,
) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "balanced_errors: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.shape().len() < 2 {
        return Err(Error::Shape("balanced_errors needs rank >= 2 frames".into()));
    }
    let r = pred.shape().len();
    let frames = (pred.numel() / (pred.shape()[r - 2] * pred.shape()[r - 1])) as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let w = scheme.pixel_weight(t.to_f64());
        let d = t.to_f64() - p.to_f64();
        se += w * d * d;
        ae += w * d.abs();
    }
    Ok((se / frames, ae / frames))
}

// --- per-rollout report ------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ThresholdScores {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub csi: f64,
    pub hss: f64,
}

#[derive(Clone, Debug)]
pub struct StepScores {
    /// 1-based lead step.
    pub lead_step: usize,
    pub minutes: u32,
    pub per_threshold: Vec<ThresholdScores>,
    pub bmse: f64,
    pub bmae: f64,
}

/// Per-threshold, per-lead-time verification scores for one prediction run.
#[derive(Clone, Debug)]
pub struct SkillReport {
    pub cadence_minutes: u32,
    pub steps: Vec<StepScores>,
    /// Pooled counts/scores over all lead steps, one entry per threshold.
    pub pooled: Vec<ThresholdScores>,
    /// Mean of per-frame scores over lead steps: `(threshold, csi, hss)`.
    pub frame_mean: Vec<(f64, f64, f64)>,
    /// Mean balanced errors over lead steps.
    pub avg_bmse: f64,
    pub avg_bmae: f64,
}

/// Scores `preds` against `targets`, both shaped `[K, ...]` with the lead
/// step on the first axis. Lead step `k` (1-based) is labelled
/// `k * cadence_minutes` minutes.
pub fn evaluate_rollout<E: Element>(
    preds: &Tensor<E>,
    targets: &Tensor<E>,
    thresholds: &[f64],
    scheme: &WeightScheme,
    cadence_minutes: u32,
) -> Result<SkillReport> {
    if preds.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "evaluate_rollout: preds {:?} vs targets {:?}",
            preds.shape(),
            targets.shape()
        )));
    }
    if preds.shape().len() < 3 {
        return Err(Error::Shape(
            "evaluate_rollout expects [K, ...] with at least one frame axis".into(),
        ));
    }
    let k_steps = preds.shape()[0];
    if k_steps == 0 {
        return Err(Error::Shape("evaluate_rollout: empty prediction".into()));
    }
    let step_shape: Vec<usize> = preds.shape()[1..].to_vec();
    let per = step_shape.iter().product::<usize>();

    let mut steps = Vec::with_capacity(k_steps);
    let mut pooled_counts = vec![ConfusionCounts::default(); thresholds.len()];
    let mut sum_bmse = 0.0;
    let mut sum_bmae = 0.0;
    let mut sum_scores = vec![(0.0, 0.0); thresholds.len()];

    for k in 0..k_steps {
        let pk = Tensor::from_vec(&step_shape, preds.data()[k * per..(k + 1) * per].to_vec())?;
        let tk = Tensor::from_vec(&step_shape, targets.data()[k * per..(k + 1) * per].to_vec())?;
        let mut per_threshold = Vec::with_capacity(thresholds.len());
        for (ti, &tau) in thresholds.iter().enumerate() {
            let counts = confusion(&pk, &tk, tau)?;
            let (csi, hss) = skill_scores(&counts);
            pooled_counts[ti].merge(&counts);
            sum_scores[ti].0 += csi;
            sum_scores[ti].1 += hss;
            per_threshold.push(ThresholdScores {
                threshold: tau,
                counts,
                csi,
                hss,
            });
        }
        let (bmse, bmae) = balanced_errors(&pk, &tk, scheme)?;
        sum_bmse += bmse;
        sum_bmae += bmae;
        steps.push(StepScores {
            lead_step: k + 1,
            minutes: ((k + 1) as u32) * cadence_minutes,
            per_threshold,
            bmse,
            bmae,
        });
    }

    let pooled = thresholds
        .iter()
        .zip(&pooled_counts)
        .map(|(&tau, counts)| {
            let (csi, hss) = skill_scores(counts);
            ThresholdScores {
                threshold: tau,
                counts: *counts,
                csi,
                hss,
            }
        })
        .collect();
    let frame_mean = thresholds
        .iter()
        .zip(&sum_scores)
        .map(|(&tau, &(cs, hs))| (tau, cs / k_steps as f64, hs / k_steps as f64))
        .collect();

    Ok(SkillReport {
        cadence_minutes,
        steps,
        pooled,
        frame_mean,
        avg_bmse: sum_bmse / k_steps as f64,
        avg_bmae: sum_bmae / k_steps as f64,
    })
}

impl SkillReport {
    /// Per-step, per-threshold rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lead_step,minutes,threshold,tp,fp,tn,fn,csi,hss,bmse,bmae\n");
        for step in &self.steps {
            for t in &step.per_threshold {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                    step.lead_step,
                    step.minutes,
                    t.threshold,
                    t.counts.true_pos,
                    t.counts.false_pos,
                    t.counts.true_neg,
                    t.counts.false_neg,
                    t.csi,
                    t.hss,
                    step.bmse,
                    step.bmae
                );
            }
        }
        out
    }

    /// Frame-wise score curves: one row per (lead step, threshold).
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("lead_step,minutes,threshold,csi,hss\n");
        for step in &self.steps {
            for t in &step.per_threshold {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6}",
                    step.lead_step, step.minutes, t.threshold, t.csi, t.hss
                );
            }
        }
        out
    }

    /// BMSE summary at the landmark lead times (plus the all-step average):
    /// `(label, value)` pairs such as `("30min", ...)`, skipping landmarks
    /// beyond the horizon.
    pub fn bmse_summary(&self) -> Vec<(String, f64)> {
        let mut row = vec![("AVG".to_string(), self.avg_bmse)];
        for minutes in [30u32, 60, 90, 120] {
            if self.cadence_minutes == 0 || minutes % self.cadence_minutes != 0 {
                continue;
            }
            let step = (minutes / self.cadence_minutes) as usize;
            if step >= 1 && step <= self.steps.len() {
                row.push((format!("{minutes}min"), self.steps[step - 1].bmse));
            }
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::ValueDomain;

    #[test]
    fn dbz_pixel_fixtures() {
        assert_eq!(dbz_to_pixel(-10.0), 0);
        assert_eq!(dbz_to_pixel(60.0), 255);
        assert_eq!(dbz_to_pixel(25.0), 128);
        assert_eq!(dbz_to_pixel(-40.0), 0);
        assert_eq!(dbz_to_pixel(99.0), 255);
    }

    #[test]
    fn pixel_dbz_round_trip_all_256() {
        for p in 0u16..=255 {
            let dbz = pixel_to_dbz(p as f64);
            assert_eq!(dbz_to_pixel(dbz), p as u8, "pixel {p}");
        }
    }

    #[test]
    fn confusion_enumeration_example() {
        let pred = Tensor::<f64>::from_vec(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let target = Tensor::<f64>::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = confusion(&pred, &target, 0.5).unwrap();
        assert_eq!(
            (c.true_pos, c.false_pos, c.false_neg, c.true_neg),
            (1, 1, 1, 1)
        );
        assert_eq!(c.total(), 4);
    }

    #[test]
    fn confusion_threshold_above_everything() {
        let pred = Tensor::<f64>::from_fn(&[8], |i| i as f64 / 10.0);
        let c = confusion(&pred, &pred, 5.0).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.false_pos, 0);
        assert_eq!(c.false_neg, 0);
        assert_eq!(c.true_neg, 8);
    }

    #[test]
    fn perfect_prediction_scores() {
        let t = Tensor::<f64>::from_fn(&[16], |i| (i % 3) as f64);
        let c = confusion(&t, &t, 1.0).unwrap();
        assert_eq!(c.false_pos, 0);
        assert_eq!(c.false_neg, 0);
        let (csi, _) = skill_scores(&c);
        assert_eq!(csi, 1.0);
    }

    #[test]
    fn skill_score_fixtures() {
        let c = ConfusionCounts {
            true_pos: 2,
            false_neg: 1,
            false_pos: 1,
            true_neg: 0,
        };
        assert_eq!(skill_scores(&c).0, 0.5);
        let c2 = ConfusionCounts {
            true_pos: 2,
            true_neg: 4,
            false_neg: 1,
            false_pos: 1,
        };
        let (_, hss) = skill_scores(&c2);
        assert!((hss - 7.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_denominators_are_zero() {
        let c = ConfusionCounts::default();
        assert_eq!(skill_scores(&c), (0.0, 0.0));
    }

    #[test]
    fn csi_ignores_tn_hss_does_not() {
        let a = ConfusionCounts {
            true_pos: 3,
            false_pos: 2,
            false_neg: 1,
            true_neg: 10,
        };
        let mut b = a;
        b.true_neg = 100;
        assert_eq!(skill_scores(&a).0, skill_scores(&b).0);
        assert_ne!(skill_scores(&a).1, skill_scores(&b).1);
    }

    #[test]
    fn raising_threshold_never_increases_tp() {
        let pred = Tensor::<f64>::from_fn(&[64], |i| ((i * 37) % 100) as f64);
        let target = Tensor::<f64>::from_fn(&[64], |i| ((i * 53) % 100) as f64);
        let mut prev = u64::MAX;
        for tau in [10.0, 30.0, 50.0, 70.0, 90.0] {
            let c = confusion(&pred, &target, tau).unwrap();
            assert!(c.true_pos <= prev);
            prev = c.true_pos;
        }
    }

    #[test]
    fn balanced_error_fixture() {
        // One 1x1 frame: target 35 dBZ (w = 5), pred 30 -> bmse 125, bmae 25.
        let pred = Tensor::<f64>::from_vec(&[1, 1], vec![30.0]).unwrap();
        let target = Tensor::<f64>::from_vec(&[1, 1], vec![35.0]).unwrap();
        let (bmse, bmae) = balanced_errors(&pred, &target, &WeightScheme::srad_dbz()).unwrap();
        assert_eq!(bmse, 125.0);
        assert_eq!(bmae, 25.0);
    }

    #[test]
    fn uniform_weights_reduce_to_mse_mae() {
        let pred = Tensor::<f64>::from_fn(&[2, 4], |i| i as f64);
        let target = Tensor::<f64>::from_fn(&[2, 4], |i| i as f64 + 0.5);
        let (bmse, bmae) =
            balanced_errors(&pred, &target, &WeightScheme::uniform(ValueDomain::Normalized)).unwrap();
        // 2x4 is two 4-wide rows... rank-2 means a single 2x4 frame.
        assert!((bmse - 8.0 * 0.25).abs() < 1e-12);
        assert!((bmae - 8.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn rollout_report_shapes_and_additivity() {
        // K=20 steps of 2x2 frames.
        let preds = Tensor::<f64>::from_fn(&[20, 1, 1, 2, 2], |i| ((i * 7) % 10) as f64 / 10.0);
        let targets = Tensor::<f64>::from_fn(&[20, 1, 1, 2, 2], |i| ((i * 3) % 10) as f64 / 10.0);
        let scheme = WeightScheme::normalized_default();
        let report = evaluate_rollout(&preds, &targets, &[0.25, 0.5], &scheme, 6).unwrap();
        assert_eq!(report.steps.len(), 20);
        assert_eq!(report.steps[4].minutes, 30);
        assert_eq!(report.steps[9].minutes, 60);
        assert_eq!(report.steps[14].minutes, 90);
        assert_eq!(report.steps[19].minutes, 120);
        // Aggregate counts equal the sums of per-step counts.
        for (ti, pooled) in report.pooled.iter().enumerate() {
            let mut sum = ConfusionCounts::default();
            for s in &report.steps {
                sum.merge(&s.per_threshold[ti].counts);
            }
            assert_eq!(pooled.counts, sum);
            assert_eq!(sum.total(), 20 * 4);
        }
        let summary = report.bmse_summary();
        assert_eq!(summary.len(), 5);
        assert_eq!(summary[0].0, "AVG");
        assert_eq!(summary[4].0, "120min");
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let t = Tensor::<f64>::from_fn(&[3, 1, 1, 4, 4], |i| ((i * 11) % 8) as f64 / 8.0);
        let report =
            evaluate_rollout(&t, &t, &[0.25], &WeightScheme::normalized_default(), 6).unwrap();
        assert_eq!(report.avg_bmse, 0.0);
        for s in &report.steps {
            assert_eq!(s.per_threshold[0].csi, 1.0);
        }
    }

    #[test]
    fn csv_columns() {
        let t = Tensor::<f64>::from_fn(&[2, 1, 1, 2, 2], |i| i as f64 / 16.0);
        let report =
            evaluate_rollout(&t, &t, &[0.1], &WeightScheme::normalized_default(), 6).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "lead_step,minutes,threshold,tp,fp,tn,fn,csi,hss,bmse,bmae"
        );
        assert_eq!(csv.lines().count(), 3);
        let curves = report.curves_csv();
        assert!(curves.starts_with("lead_step,minutes,threshold,csi,hss\n"));
    }
}
