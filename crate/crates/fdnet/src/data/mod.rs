//! Synthetic radar-blob sequences, on-disk ingestion, filtering, windowing
//! and scheduled-sampling masks.
//!
//! Synthetic frames are clipped sums of anisotropic Gaussian blobs that
//! translate, grow/shrink, rotate and decay: smooth shapes whose sub-pixel
//! motion exercises the bilinear warp (square pulses would alias at the
//! edges and confound gradient checks).

pub mod io;

use crate::error::{Error, Result};
use crate::init::derive_rng;
use crate::tensor::{Element, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One radar-echo sequence with frames in `[0, 1]`, shaped `[T, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct Sequence<E: Element> {
    pub id: String,
    pub frames: Tensor<E>,
    pub cadence_minutes: u32,
}

impl<E: Element> Sequence<E> {
    pub fn new(id: impl Into<String>, frames: Tensor<E>, cadence_minutes: u32) -> Result<Self> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Data(format!(
                "sequence frames must be [T,1,H,W], got {shape:?}"
            )));
        }
        if shape[0] < 2 {
            return Err(Error::Data(format!(
                "sequence needs at least 2 frames, got {}",
                shape[0]
            )));
        }
        for &v in frames.data() {
            let f = v.to_f64();
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Data(format!(
                    "sequence values must lie in [0,1], found {f}"
                )));
            }
        }
        Ok(Sequence {
            id: id.into(),
            frames,
            cadence_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        let s = self.frames.shape();
        (s[2], s[3])
    }

    /// Copy of frame `t` as `[1, H, W]`.
    pub fn frame(&self, t: usize) -> Tensor<E> {
        let (h, w) = self.frame_dims();
        let per = h * w;
        Tensor::from_vec(&[1, h, w], self.frames.data()[t * per..(t + 1) * per].to_vec())
            .expect("frame slice length")
    }
}

fn range_field(name: &str, lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::Config(format!(
            "synth.{name}: invalid range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Generator settings for one batch of synthetic sequences.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_sequences: usize,
    /// Frames per sequence.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Peak amplitude range, within (0, 1].
    pub intensity: (f64, f64),
    /// Base radius range in pixels (per axis).
    pub radius: (f64, f64),
    /// Velocity range per component, pixels/frame.
    pub velocity: (f64, f64),
    /// Relative radius growth per frame.
    pub growth: (f64, f64),
    /// Orientation change per frame, radians.
    pub rotation: (f64, f64),
    /// Amplitude decay rate per frame (`exp(-t*decay)`).
    pub decay: (f64, f64),
    /// Probability that a blob is born partway through the sequence.
    pub birth_prob: f64,
    pub cadence_minutes: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_sequences: 64,
            frames: 12,
            height: 32,
            width: 32,
            blobs_min: 1,
            blobs_max: 3,
            intensity: (0.45, 0.95),
            radius: (2.5, 5.0),
            velocity: (-1.2, 1.2),
            growth: (-0.02, 0.06),
            rotation: (-0.1, 0.1),
            decay: (0.0, 0.08),
            birth_prob: 0.15,
            cadence_minutes: 6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 {
            return Err(Error::Config("synth.num_sequences must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("synth.frames must be at least 2".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("synth.height/width must be positive".into()));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return Err(Error::Config(format!(
                "synth.blobs range [{}, {}] invalid",
                self.blobs_min, self.blobs_max
            )));
        }
        range_field("intensity", self.intensity.0, self.intensity.1)?;
        if self.intensity.0 <= 0.0 || self.intensity.1 > 1.0 {
            return Err(Error::Config("synth.intensity must lie in (0, 1]".into()));
        }
        range_field("radius", self.radius.0, self.radius.1)?;
        if self.radius.0 <= 0.0 {
            return Err(Error::Config(format!(
                "synth.radius: degenerate radius {} (must be > 0)",
                self.radius.0
            )));
        }
        range_field("velocity", self.velocity.0, self.velocity.1)?;
        range_field("growth", self.growth.0, self.growth.1)?;
        // Radii must stay positive across the whole sequence.
        let worst = 1.0 + (self.frames as f64 - 1.0) * self.growth.0;
        if worst <= 0.0 {
            return Err(Error::Config(format!(
                "synth.growth: radii collapse to {worst} of base size by the last frame"
            )));
        }
        range_field("rotation", self.rotation.0, self.rotation.1)?;
        range_field("decay", self.decay.0, self.decay.1)?;
        if !(0.0..=1.0).contains(&self.birth_prob) {
            return Err(Error::Config("synth.birth_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

struct Blob {
    center: (f64, f64),
    velocity: (f64, f64),
    intensity: f64,
    radii: (f64, f64),
    growth: f64,
    theta0: f64,
    rotation: f64,
    decay: f64,
    birth: usize,
}

impl Blob {
    fn render<E: Element>(&self, t: usize, frame: &mut [E], h: usize, w: usize) {
        if t < self.birth {
            return;
        }
        let tau = (t - self.birth) as f64;
        let cy = self.center.0 + tau * self.velocity.0;
        let cx = self.center.1 + tau * self.velocity.1;
        let scale = 1.0 + tau * self.growth;
        let ry = self.radii.0 * scale;
        let rx = self.radii.1 * scale;
        let amp = self.intensity * (-tau * self.decay).exp();
        let theta = self.theta0 + tau * self.rotation;
        let (sin_t, cos_t) = theta.sin_cos();
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                let a = (dx * cos_t + dy * sin_t) / rx;
                let b = (-dx * sin_t + dy * cos_t) / ry;
                let q = a * a + b * b;
                if q < 40.0 {
                    frame[y * w + x] += E::from_f64(amp * (-0.5 * q).exp());
                }
            }
        }
    }
}

/// Deterministic synthetic sequences: same config, bitwise-same output.
pub fn gen_synthetic<E: Element>(cfg: &SynthConfig) -> Result<Vec<Sequence<E>>> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Vec::with_capacity(cfg.num_sequences);
    for s in 0..cfg.num_sequences {
        let mut rng = derive_rng(cfg.seed, s as u64);
        let n_blobs = rng.gen_range(cfg.blobs_min..=cfg.blobs_max);
        let blobs: Vec<Blob> = (0..n_blobs)
            .map(|_| {
                let sample = |r: (f64, f64), rng: &mut rand_chacha::ChaCha8Rng| {
                    if r.0 == r.1 {
                        r.0
                    } else {
                        rng.gen_range(r.0..r.1)
                    }
                };
                Blob {
                    center: (
                        rng.gen_range(0.2 * h as f64..0.8 * h as f64),
                        rng.gen_range(0.2 * w as f64..0.8 * w as f64),
                    ),
                    velocity: (
                        sample(cfg.velocity, &mut rng),
                        sample(cfg.velocity, &mut rng),
                    ),
                    intensity: sample(cfg.intensity, &mut rng),
                    radii: (sample(cfg.radius, &mut rng), sample(cfg.radius, &mut rng)),
                    growth: sample(cfg.growth, &mut rng),
                    theta0: rng.gen_range(0.0..std::f64::consts::PI),
                    rotation: sample(cfg.rotation, &mut rng),
                    decay: sample(cfg.decay, &mut rng),
                    birth: if rng.gen_bool(cfg.birth_prob) {
                        rng.gen_range(1..cfg.frames.max(2))
                    } else {
                        0
                    },
                }
            })
            .collect();

        let mut data = vec![E::ZERO; cfg.frames * h * w];
        for t in 0..cfg.frames {
            let frame = &mut data[t * h * w..(t + 1) * h * w];
            for blob in &blobs {
                blob.render(t, frame, h, w);
            }
            for v in frame.iter_mut() {
                *v = (*v).maximum(E::ZERO).minimum(E::ONE);
            }
        }
        let frames = Tensor::from_vec(&[cfg.frames, 1, h, w], data)?;
        out.push(Sequence::new(format!("synth_{s:04}"), frames, cfg.cadence_minutes)?);
    }
    Ok(out)
}

/// Drops sequences with an abrupt all-zero frame adjacent to an active frame
/// (mean above `eps_act`), and sequences that are entirely zero.
pub fn filter_noisy<E: Element>(seqs: Vec<Sequence<E>>, eps_act: f64) -> Vec<Sequence<E>> {
    seqs.into_iter()
        .filter(|seq| {
            let t = seq.len();
            let (h, w) = seq.frame_dims();
            let per = h * w;
            let stats: Vec<(bool, f64)> = (0..t)
                .map(|k| {
                    let frame = &seq.frames.data()[k * per..(k + 1) * per];
                    let all_zero = frame.iter().all(|&v| v.to_f64() == 0.0);
                    let mean = frame.iter().map(|v| v.to_f64()).sum::<f64>() / per as f64;
                    (all_zero, mean)
                })
                .collect();
            if stats.iter().all(|&(z, _)| z) {
                return false;
            }
            for k in 0..t {
                if !stats[k].0 {
                    continue;
                }
                let prev_active = k > 0 && stats[k - 1].1 > eps_act;
                let next_active = k + 1 < t && stats[k + 1].1 > eps_act;
                if prev_active || next_active {
                    return false;
                }
            }
            true
        })
        .collect()
}

/// Number of sliding windows: `floor((T-J-K)/stride) + 1` when `T >= J+K`.
pub fn window_count(t: usize, j: usize, k: usize, stride: usize) -> usize {
    if t >= j + k {
        (t - j - k) / stride + 1
    } else {
        0
    }
}

/// Sliding (inputs, targets) windows of a sequence: inputs `[J,1,H,W]`,
/// targets `[K,1,H,W]`.
pub fn window<E: Element>(
    seq: &Sequence<E>,
    j: usize,
    k: usize,
    stride: usize,
) -> Result<Vec<(Tensor<E>, Tensor<E>)>> {
    if j < 2 {
        return Err(Error::Config("window: J must be at least 2 (flow needs two frames)".into()));
    }
    if k < 1 || stride < 1 {
        return Err(Error::Config("window: K and stride must be at least 1".into()));
    }
    let t = seq.len();
    let (h, w) = seq.frame_dims();
    let per = h * w;
    let mut out = Vec::with_capacity(window_count(t, j, k, stride));
    let mut start = 0;
    while start + j + k <= t {
        let inputs = Tensor::from_vec(
            &[j, 1, h, w],
            seq.frames.data()[start * per..(start + j) * per].to_vec(),
        )?;
        let targets = Tensor::from_vec(
            &[k, 1, h, w],
            seq.frames.data()[(start + j) * per..(start + j + k) * per].to_vec(),
        )?;
        out.push((inputs, targets));
        start += stride;
    }
    Ok(out)
}

/// Linear decay schedule for scheduled sampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSchedule {
    pub start_p: f64,
    pub end_p: f64,
    pub decay_steps: u64,
}

impl Default for SamplingSchedule {
    fn default() -> Self {
        SamplingSchedule {
            start_p: 1.0,
            end_p: 0.0,
            decay_steps: 1000,
        }
    }
}

impl SamplingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.end_p)
            || !(0.0..=1.0).contains(&self.start_p)
            || self.end_p > self.start_p
        {
            return Err(Error::Config(format!(
                "sampling schedule needs 0 <= end_p <= start_p <= 1, got start {} end {}",
                self.start_p, self.end_p
            )));
        }
        Ok(())
    }

    /// Teacher-forcing probability at an iteration.
    pub fn probability(&self, iteration: u64) -> f64 {
        let frac = if self.decay_steps == 0 {
            1.0
        } else {
            (iteration as f64 / self.decay_steps as f64).min(1.0)
        };
        self.start_p - (self.start_p - self.end_p) * frac
    }
}

/// K independent teacher-forcing decisions, deterministic in
/// `(iteration, seed)`.
pub fn sampling_mask(iteration: u64, schedule: &SamplingSchedule, k: usize, seed: u64) -> Vec<bool> {
    let p = schedule.probability(iteration);
    let mut rng = derive_rng(seed ^ 0x5ca1ab1e, iteration);
    (0..k).map(|_| rng.gen_bool(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_blob_cfg() -> SynthConfig {
        SynthConfig {
            seed: 5,
            num_sequences: 1,
            frames: 8,
            height: 40,
            width: 40,
            blobs_min: 1,
            blobs_max: 1,
            intensity: (0.8, 0.8),
            radius: (2.5, 2.5),
            velocity: (1.0, 1.0),
            growth: (0.0, 0.0),
            rotation: (0.0, 0.0),
            decay: (0.0, 0.0),
            birth_prob: 0.0,
            cadence_minutes: 6,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = gen_synthetic::<f64>(&cfg).unwrap();
        let b = gen_synthetic::<f64>(&cfg).unwrap();
        assert_eq!(a.len(), 64);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.id, y.id);
            assert!(crate::tensor::bitwise_eq(&x.frames, &y.frames));
        }
    }

    #[test]
    fn translating_blob_centroid_advances_one_pixel_per_frame() {
        let seqs = gen_synthetic::<f64>(&single_blob_cfg()).unwrap();
        let seq = &seqs[0];
        let (h, w) = seq.frame_dims();
        let centroid = |t: usize| {
            let f = seq.frame(t);
            let mut mass = 0.0;
            let mut my = 0.0;
            let mut mx = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let v = f.data()[y * w + x];
                    mass += v;
                    my += v * y as f64;
                    mx += v * x as f64;
                }
            }
            (my / mass, mx / mass)
        };
        for t in 0..5 {
            let (y0, x0) = centroid(t);
            let (y1, x1) = centroid(t + 1);
            assert!(((y1 - y0) - 1.0).abs() < 0.05, "dy {}", y1 - y0);
            assert!(((x1 - x0) - 1.0).abs() < 0.05, "dx {}", x1 - x0);
        }
    }

    #[test]
    fn pure_translation_conserves_mass() {
        let seqs = gen_synthetic::<f64>(&single_blob_cfg()).unwrap();
        let seq = &seqs[0];
        let mass = |t: usize| seq.frame(t).data().iter().sum::<f64>();
        for t in 0..5 {
            let (m0, m1) = (mass(t), mass(t + 1));
            assert!((m1 - m0).abs() / m0 < 0.02, "mass drift {} -> {}", m0, m1);
        }
    }

    #[test]
    fn decay_makes_frame_max_strictly_decreasing() {
        let cfg = SynthConfig {
            decay: (0.5, 0.5),
            velocity: (0.0, 0.0),
            ..single_blob_cfg()
        };
        let seqs = gen_synthetic::<f64>(&cfg).unwrap();
        let seq = &seqs[0];
        let max_of = |t: usize| {
            seq.frame(t)
                .data()
                .iter()
                .fold(0.0f64, |m, &v| m.max(v))
        };
        for t in 0..seq.len() - 1 {
            assert!(max_of(t + 1) < max_of(t));
        }
    }

    #[test]
    fn degenerate_radius_is_rejected() {
        let cfg = SynthConfig {
            radius: (0.0, 2.0),
            ..SynthConfig::default()
        };
        assert!(matches!(gen_synthetic::<f64>(&cfg), Err(Error::Config(_))));
    }

    fn seq_from_means(means: &[f64]) -> Sequence<f64> {
        let t = means.len();
        let frames = Tensor::from_fn(&[t, 1, 2, 2], |i| means[i / 4]);
        Sequence::new("test", frames, 6).unwrap()
    }

    #[test]
    fn filter_drops_abrupt_zero_between_active() {
        let noisy = seq_from_means(&[0.5, 0.0, 0.5]);
        let clean = seq_from_means(&[0.5, 0.4, 0.3]);
        let kept = filter_noisy(vec![noisy, clean], 1e-3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].id, "test");
    }

    #[test]
    fn filter_drops_entirely_zero_sequence() {
        let dead = seq_from_means(&[0.0, 0.0, 0.0]);
        assert!(filter_noisy(vec![dead], 1e-3).is_empty());
    }

    #[test]
    fn filter_keeps_trailing_quiet_frames() {
        // A zero frame next to only near-zero frames is not "abrupt".
        let fading = seq_from_means(&[0.5, 0.0005, 0.0]);
        assert_eq!(filter_noisy(vec![fading], 1e-3).len(), 1);
    }

    #[test]
    fn window_counts_match_formula() {
        for (t, j, k, stride, want) in [
            (41usize, 21usize, 20usize, 1usize, 1usize),
            (40, 21, 20, 1, 0),
            (30, 5, 20, 1, 6),
            (30, 5, 20, 2, 3),
            (12, 4, 6, 1, 3),
        ] {
            assert_eq!(window_count(t, j, k, stride), want, "T={t} J={j} K={k} s={stride}");
            if t >= 4 {
                let frames = Tensor::<f64>::from_fn(&[t, 1, 2, 2], |i| (i % 7) as f64 / 7.0);
                let seq = Sequence::new("w", frames, 6).unwrap();
                assert_eq!(window(&seq, j, k, stride).unwrap().len(), want);
            }
        }
    }

    #[test]
    fn windows_have_no_target_leakage() {
        let t = 12;
        let frames = Tensor::<f64>::from_fn(&[t, 1, 1, 1], |i| i as f64 / t as f64);
        let seq = Sequence::new("leak", frames, 6).unwrap();
        for (inputs, targets) in window(&seq, 3, 2, 1).unwrap() {
            for tv in targets.data() {
                assert!(!inputs.data().contains(tv));
            }
        }
    }

    #[test]
    fn mask_extremes() {
        let sched = SamplingSchedule {
            start_p: 1.0,
            end_p: 0.0,
            decay_steps: 100,
        };
        assert!(sampling_mask(0, &sched, 8, 3).iter().all(|&b| b));
        assert!(sampling_mask(100, &sched, 8, 3).iter().all(|&b| !b));
        assert!(sampling_mask(10_000, &sched, 8, 3).iter().all(|&b| !b));
    }

    #[test]
    fn mask_rate_approximates_probability() {
        let sched = SamplingSchedule {
            start_p: 0.5,
            end_p: 0.5,
            decay_steps: 1,
        };
        let mut trues = 0usize;
        let n = 10_000;
        for it in 0..n {
            if sampling_mask(it as u64, &sched, 1, 9)[0] {
                trues += 1;
            }
        }
        let rate = trues as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.02, "true rate {rate}");
    }

    #[test]
    fn mask_is_deterministic_per_iteration() {
        let sched = SamplingSchedule::default();
        assert_eq!(sampling_mask(7, &sched, 10, 1), sampling_mask(7, &sched, 10, 1));
        let half = SamplingSchedule {
            start_p: 0.5,
            end_p: 0.5,
            decay_steps: 1,
        };
        assert_ne!(sampling_mask(7, &half, 32, 1), sampling_mask(8, &half, 32, 1));
    }
}
