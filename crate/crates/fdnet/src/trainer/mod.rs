//! Optimization loop: Adam over rollout losses with global-norm gradient
//! clipping, scheduled sampling, periodic validation and checkpointing.
//!
//! Determinism contract: a fixed seed fixes the batch order (per-epoch seeded
//! permutation), the sampling masks (derived from (seed, iteration)) and
//! every numeric step, so the loss log reproduces bitwise across runs and
//! across checkpoint resume.

pub mod adam;
pub mod checkpoint;

pub use adam::{clip_gradients, global_norm, AdamHyper, AdamState, ClipMode};
pub use checkpoint::{
    decode_checkpoint, digest_of, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    ConfigDigests, RawCheckpoint, CKPT_VERSION,
};

use crate::data::{sampling_mask, SamplingSchedule};
use crate::error::{Error, Result};
use crate::loss::{gdl_loss, weighted_pixel_loss, LossConfig, WeightScheme};
use crate::metrics::evaluate_rollout;
use crate::model::{init_params, rollout, BoundModel, ModelConfig, ModelParams};
use crate::tensor::{Element, Graph, Tensor, Value};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_value: f64,
    pub clip_mode: ClipMode,
    pub sampling: SamplingSchedule,
    /// Validate (and consider checkpointing "best") every this many iterations.
    pub eval_every: u64,
    /// Write `latest` checkpoint every this many iterations.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Include the warm-up hindcast predictions in the training loss.
    pub warmup_loss: bool,
    /// Stop early once the loss falls below this fraction of the first
    /// iteration's loss (1.0 disables early stopping).
    pub stop_at_loss_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_iterations: 2000,
            batch_size: 4,
            lr: 1e-4,
            clip_value: 50.0,
            clip_mode: ClipMode::Norm,
            sampling: SamplingSchedule::default(),
            eval_every: 100,
            checkpoint_every: 100,
            seed: 0,
            warmup_loss: true,
            stop_at_loss_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("train: iterations and batch size must be positive".into()));
        }
        if self.lr <= 0.0 || self.clip_value <= 0.0 {
            return Err(Error::Config("train: lr and clip_value must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.stop_at_loss_fraction) {
            return Err(Error::Config("train: stop_at_loss_fraction must be in [0,1]".into()));
        }
        self.sampling.validate()
    }
}

/// One (inputs `[J,1,H,W]`, targets `[K,1,H,W]`) training sample.
pub type WindowSample<E> = (Tensor<E>, Tensor<E>);

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub split: &'static str,
    pub loss_pixel: f64,
    pub loss_gdl: f64,
    pub loss_total: f64,
    pub p_teacher: f64,
}

pub struct TrainOutcome<E: Element> {
    pub checkpoint: Checkpoint<E>,
    pub log: Vec<LogRow>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub best_val_bmse: Option<f64>,
    pub stopped_early: bool,
}

/// Where training writes its artifacts; everything is optional so tests can
/// run fully in memory.
#[derive(Default, Clone)]
pub struct TrainSinks {
    pub out_dir: Option<PathBuf>,
}

impl TrainSinks {
    fn latest_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("latest.fdck"))
    }
    fn best_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("best.fdck"))
    }
    fn metrics_path(&self) -> Option<PathBuf> {
        self.out_dir.as_ref().map(|d| d.join("metrics.csv"))
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("iteration,split,loss_pixel,loss_gdl,loss_total,p_teacher\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.iteration, r.split, r.loss_pixel, r.loss_gdl, r.loss_total, r.p_teacher
        );
    }
    out
}

/// Stacks per-sample `[T,1,H,W]` windows into a `[T,N,1,H,W]` batch tensor.
fn stack_batch<E: Element>(samples: &[&Tensor<E>]) -> Result<Tensor<E>> {
    let shape = samples[0].shape();
    let [t, 1, h, w] = shape[..] else {
        return Err(Error::Shape(format!("window sample must be [T,1,H,W], got {shape:?}")));
    };
    let n = samples.len();
    let per = h * w;
    let mut data = vec![E::ZERO; t * n * per];
    for (si, s) in samples.iter().enumerate() {
        if s.shape() != shape {
            return Err(Error::Shape("ragged batch: window shapes differ".into()));
        }
        for ti in 0..t {
            let src = &s.data()[ti * per..(ti + 1) * per];
            data[(ti * n + si) * per..(ti * n + si + 1) * per].copy_from_slice(src);
        }
    }
    Tensor::from_vec(&[t, n, 1, h, w], data)
}

/// Sum of pixel and GDL losses over a set of per-step predictions against
/// slices of a `[T,N,1,H,W]` target tensor, divided by the batch size.
struct SeqLoss {
    pixel: Value,
    gdl: Value,
    total: Value,
}

fn sequence_loss<E: Element>(
    g: &Graph<E>,
    preds: &[(Value, usize)],
    target_stack: &Tensor<E>,
    scheme: &WeightScheme,
    cfg: &LossConfig,
) -> Result<SeqLoss> {
    let shape = target_stack.shape();
    let (n, h, w) = (shape[1], shape[3], shape[4]);
    let per = n * h * w;
    let mut pixel: Option<Value> = None;
    let mut gdl: Option<Value> = None;
    for &(pred, step) in preds {
        let tgt = Tensor::from_vec(
            &[n, 1, h, w],
            target_stack.data()[step * per..(step + 1) * per].to_vec(),
        )?;
        let p = weighted_pixel_loss(g, pred, &tgt, scheme)?;
        let q = gdl_loss(g, pred, &tgt, cfg.gdl_exponent)?;
        pixel = Some(match pixel {
            None => p,
            Some(a) => g.add(a, p)?,
        });
        gdl = Some(match gdl {
            None => q,
            Some(a) => g.add(a, q)?,
        });
    }
    let inv_n = 1.0 / shape[1] as f64;
    let pixel = g.scale(pixel.expect("at least one prediction"), inv_n)?;
    let gdl = g.scale(gdl.expect("at least one prediction"), inv_n)?;
    let lp = g.scale(pixel, cfg.lambda_pixel)?;
    let lg = g.scale(gdl, cfg.lambda_gdl)?;
    let total = g.add(lp, lg)?;
    Ok(SeqLoss { pixel, gdl, total })
}

/// Forward-only loss and balanced errors of free-running rollouts over a
/// sample set (used for validation).
fn validate<E: Element>(
    params: &ModelParams<E>,
    samples: &[WindowSample<E>],
    batch_size: usize,
    scheme: &WeightScheme,
    loss_cfg: &LossConfig,
    thresholds: &[f64],
) -> Result<(f64, f64, f64, f64)> {
    let mut pixel_sum = 0.0;
    let mut gdl_sum = 0.0;
    let mut total_sum = 0.0;
    let mut bmse_sum = 0.0;
    let mut batches = 0usize;
    for chunk in samples.chunks(batch_size) {
        let inputs = stack_batch(&chunk.iter().map(|(i, _)| i).collect::<Vec<_>>())?;
        let targets = stack_batch(&chunk.iter().map(|(_, t)| t).collect::<Vec<_>>())?;
        let horizon = targets.shape()[0];
        let g = Graph::new();
        let model = params.bind(&g);
        let out = rollout(&model, &g, &inputs, horizon, None, None, true)?;
        let preds: Vec<(Value, usize)> = out.forecast.iter().copied().zip(0..horizon).collect();
        let loss = sequence_loss(&g, &preds, &targets, scheme, loss_cfg)?;
        pixel_sum += g.value(loss.pixel).item()?.to_f64();
        gdl_sum += g.value(loss.gdl).item()?.to_f64();
        total_sum += g.value(loss.total).item()?.to_f64();

        let shape = targets.shape();
        let (n, h, w) = (shape[1], shape[3], shape[4]);
        let mut data = Vec::with_capacity(horizon * n * h * w);
        for v in &out.forecast {
            data.extend_from_slice(g.value(*v).data());
        }
        let pred_stack = Tensor::from_vec(&[horizon, n, 1, h, w], data)?;
        let report = evaluate_rollout(&pred_stack, &targets, thresholds, scheme, 6)?;
        bmse_sum += report.avg_bmse;
        batches += 1;
    }
    let b = batches.max(1) as f64;
    Ok((pixel_sum / b, gdl_sum / b, total_sum / b, bmse_sum / b))
}

#[allow(clippy::too_many_arguments)]
pub fn train<E: Element>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    scheme: &WeightScheme,
    train_samples: &[WindowSample<E>],
    val_samples: &[WindowSample<E>],
    digests: ConfigDigests,
    sinks: &TrainSinks,
    resume: Option<Checkpoint<E>>,
) -> Result<TrainOutcome<E>> {
    train_cfg.validate()?;
    loss_cfg.validate()?;
    model_cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::Config(
            "train: no training samples (dataset empty after filtering/windowing)".into(),
        ));
    }
    if train_samples.len() < train_cfg.batch_size {
        return Err(Error::Config(format!(
            "train: {} samples cannot fill a batch of {}",
            train_samples.len(),
            train_cfg.batch_size
        )));
    }

    let (mut params, mut adam, start_iter) = match resume {
        Some(ckpt) => {
            if ckpt.params.config != *model_cfg {
                return Err(Error::Checkpoint(
                    "resume: checkpoint model config differs from the requested one".into(),
                ));
            }
            (ckpt.params, ckpt.adam, ckpt.iteration)
        }
        None => {
            let params: ModelParams<E> = init_params(model_cfg, train_cfg.seed)?;
            let hyper = AdamHyper {
                lr: train_cfg.lr,
                ..AdamHyper::default()
            };
            let adam = AdamState::new(hyper, &params.named());
            (params, adam, 0)
        }
    };

    let iters_per_epoch = (train_samples.len() / train_cfg.batch_size).max(1) as u64;
    let mut log: Vec<LogRow> = Vec::new();
    let mut metrics_file = match sinks.metrics_path() {
        Some(path) => {
            use std::io::Write as _;
            let mut f = std::fs::File::create(&path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            writeln!(f, "iteration,split,loss_pixel,loss_gdl,loss_total,p_teacher")
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut push_row = |log: &mut Vec<LogRow>,
                        metrics_file: &mut Option<(std::fs::File, PathBuf)>,
                        row: LogRow|
     -> Result<()> {
        if let Some((f, path)) = metrics_file {
            use std::io::Write as _;
            writeln!(
                f,
                "{},{},{},{},{},{}",
                row.iteration, row.split, row.loss_pixel, row.loss_gdl, row.loss_total, row.p_teacher
            )
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        log.push(row);
        Ok(())
    };
    let mut order: Vec<usize> = (0..train_samples.len()).collect();
    let mut first_loss: Option<f64> = None;
    let mut best_val_bmse: Option<f64> = None;
    let mut stopped_early = false;
    let thresholds = val_thresholds(scheme);

    let mut iteration = start_iter;
    while iteration < train_cfg.max_iterations {
        let epoch = iteration / iters_per_epoch;
        let pos = (iteration % iters_per_epoch) as usize;
        if pos == 0 || iteration == start_iter {
            let mut rng = crate::init::derive_rng(train_cfg.seed ^ 0x0e90c4, epoch);
            order = (0..train_samples.len()).collect();
            order.shuffle(&mut rng);
        }
        let idxs = &order[pos * train_cfg.batch_size..(pos + 1) * train_cfg.batch_size];
        let inputs = stack_batch(&idxs.iter().map(|&i| &train_samples[i].0).collect::<Vec<_>>())?;
        let targets = stack_batch(&idxs.iter().map(|&i| &train_samples[i].1).collect::<Vec<_>>())?;

        let horizon = targets.shape()[0];
        let mask = sampling_mask(iteration, &train_cfg.sampling, horizon, train_cfg.seed);
        let p_teacher = train_cfg.sampling.probability(iteration);

        let g = Graph::new();
        let model: BoundModel = params.bind(&g);
        let out = rollout(&model, &g, &inputs, horizon, Some(&targets), Some(&mask), false)
            .map_err(|e| train_diag(e, iteration, idxs))?;

        let mut preds: Vec<(Value, usize)> = Vec::new();
        for (k, v) in out.forecast.iter().enumerate() {
            preds.push((*v, k));
        }
        let mut loss = sequence_loss(&g, &preds, &targets, scheme, loss_cfg)
            .map_err(|e| train_diag(e, iteration, idxs))?;
        if train_cfg.warmup_loss && !out.warmup.is_empty() {
            // Warm-up prediction i hindcasts input frame 2+i.
            let wpreds: Vec<(Value, usize)> = out
                .warmup
                .iter()
                .enumerate()
                .map(|(i, v)| (*v, 2 + i))
                .collect();
            let wloss = sequence_loss(&g, &wpreds, &inputs, scheme, loss_cfg)
                .map_err(|e| train_diag(e, iteration, idxs))?;
            loss = SeqLoss {
                pixel: g.add(loss.pixel, wloss.pixel)?,
                gdl: g.add(loss.gdl, wloss.gdl)?,
                total: g.add(loss.total, wloss.total)?,
            };
        }
        let total = loss.total;

        let loss_pixel = g.value(loss.pixel).item()?.to_f64();
        let loss_gdl = g.value(loss.gdl).item()?.to_f64();
        let loss_total = g.value(total).item()?.to_f64();
        if !loss_total.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss {loss_total} at iteration {iteration} on batch {idxs:?}"
            )));
        }

        let grads_by_node = g.backward(total)?;
        let mut grads: Vec<Tensor<E>> = model
            .names
            .iter()
            .map(|(_, v)| grads_by_node.get_or_zeros(*v))
            .collect();
        clip_gradients(&mut grads, train_cfg.clip_value, train_cfg.clip_mode)
            .map_err(|e| train_diag(e, iteration, idxs))?;
        // Rescaling rounds once per element, so allow single-precision slack.
        debug_assert!(
            !matches!(train_cfg.clip_mode, ClipMode::Norm)
                || global_norm(&grads) <= train_cfg.clip_value * (1.0 + 1e-5) + 1e-6
        );

        adam.begin_step();
        let mut update_err = None;
        let mut pi = 0usize;
        params.visit_mut(&mut |_, t| {
            if update_err.is_none() {
                update_err = adam.update_tensor(pi, t, &grads[pi]).err();
            }
            pi += 1;
        });
        if let Some(e) = update_err {
            return Err(e);
        }

        push_row(
            &mut log,
            &mut metrics_file,
            LogRow {
                iteration,
                split: "train",
                loss_pixel,
                loss_gdl,
                loss_total,
                p_teacher,
            },
        )?;
        if first_loss.is_none() {
            first_loss = Some(loss_total);
        }
        iteration += 1;

        let due_eval = train_cfg.eval_every > 0 && iteration % train_cfg.eval_every == 0;
        if due_eval && !val_samples.is_empty() {
            let (vp, vg, vt, bmse) = validate(
                &params,
                val_samples,
                train_cfg.batch_size,
                scheme,
                loss_cfg,
                &thresholds,
            )?;
            push_row(
                &mut log,
                &mut metrics_file,
                LogRow {
                    iteration,
                    split: "val",
                    loss_pixel: vp,
                    loss_gdl: vg,
                    loss_total: vt,
                    p_teacher: 0.0,
                },
            )?;
            if best_val_bmse.is_none_or(|b| bmse < b) {
                best_val_bmse = Some(bmse);
                if let Some(path) = sinks.best_path() {
                    let ckpt = snapshot(&params, &adam, &digests, iteration);
                    save_checkpoint(&path, &ckpt)?;
                }
            }
        }
        if train_cfg.checkpoint_every > 0 && iteration % train_cfg.checkpoint_every == 0 {
            if let Some(path) = sinks.latest_path() {
                let ckpt = snapshot(&params, &adam, &digests, iteration);
                save_checkpoint(&path, &ckpt)?;
            }
        }

        if train_cfg.stop_at_loss_fraction < 1.0 {
            let first = first_loss.expect("set on first iteration");
            if loss_total <= train_cfg.stop_at_loss_fraction * first {
                stopped_early = true;
                break;
            }
        }
    }

    let final_loss = log
        .iter()
        .rev()
        .find(|r| r.split == "train")
        .map(|r| r.loss_total)
        .unwrap_or(f64::NAN);
    let checkpoint = snapshot(&params, &adam, &digests, iteration);
    if let Some(path) = sinks.latest_path() {
        save_checkpoint(&path, &checkpoint)?;
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        first_loss: first_loss.unwrap_or(f64::NAN),
        final_loss,
        best_val_bmse,
        stopped_early,
    })
}

fn train_diag(e: Error, iteration: u64, batch: &[usize]) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Train(format!(
            "non-finite value at iteration {iteration} on batch {batch:?}: {msg}"
        )),
        other => other,
    }
}

fn snapshot<E: Element>(
    params: &ModelParams<E>,
    adam: &AdamState<E>,
    digests: &ConfigDigests,
    iteration: u64,
) -> Checkpoint<E> {
    Checkpoint {
        version: CKPT_VERSION,
        digests: digests.clone(),
        params: params.clone(),
        adam: adam.clone(),
        iteration,
    }
}

/// Validation skill thresholds in the scheme's own domain: its weight
/// boundaries, or a generic ladder for uniform weighting.
fn val_thresholds(scheme: &WeightScheme) -> Vec<f64> {
    if scheme.thresholds.is_empty() {
        vec![0.25, 0.5]
    } else {
        scheme.thresholds.clone()
    }
}

/// Forecast that repeats the last observed frame at every lead time.
pub fn persistence_forecast<E: Element>(inputs: &Tensor<E>, horizon: usize) -> Result<Tensor<E>> {
    let shape = inputs.shape();
    let [j, n, 1, h, w] = shape[..] else {
        return Err(Error::Shape(format!(
            "persistence needs [J,N,1,H,W] inputs, got {shape:?}"
        )));
    };
    let per = n * h * w;
    let last = &inputs.data()[(j - 1) * per..j * per];
    let mut data = Vec::with_capacity(horizon * per);
    for _ in 0..horizon {
        data.extend_from_slice(last);
    }
    Tensor::from_vec(&[horizon, n, 1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, window, SynthConfig};
    use crate::loss::ValueDomain;

    fn tiny_samples(seed: u64, n: usize) -> Vec<WindowSample<f32>> {
        let cfg = SynthConfig {
            seed,
            num_sequences: n,
            frames: 8,
            height: 16,
            width: 16,
            ..SynthConfig::default()
        };
        let seqs = gen_synthetic::<f32>(&cfg).unwrap();
        let mut out = Vec::new();
        for s in &seqs {
            out.extend(window(s, 3, 2, 3).unwrap());
        }
        out
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            max_iterations: 4,
            batch_size: 2,
            lr: 1e-3,
            eval_every: 2,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            input_height: 16,
            input_width: 16,
            flow_hidden: 4,
            flow_head_hidden: 4,
            def_hidden: 4,
            corr_max_disp: Some(1),
            ..crate::model::tests::tiny_config()
        }
    }

    #[test]
    fn short_run_trains_and_logs() {
        let samples = tiny_samples(1, 4);
        let out = train::<f32>(
            &tiny_model_cfg(),
            &tiny_train_cfg(),
            &LossConfig::default(),
            &WeightScheme::uniform(ValueDomain::Normalized),
            &samples,
            &samples[..2],
            ConfigDigests::default(),
            &TrainSinks::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.log.iter().filter(|r| r.split == "train").count(), 4);
        assert_eq!(out.log.iter().filter(|r| r.split == "val").count(), 2);
        assert!(out.final_loss.is_finite());
        assert_eq!(out.checkpoint.iteration, 4);
    }

    #[test]
    fn fixed_seed_reproduces_loss_log_bitwise() {
        let samples = tiny_samples(2, 4);
        let run = || {
            train::<f32>(
                &tiny_model_cfg(),
                &tiny_train_cfg(),
                &LossConfig::default(),
                &WeightScheme::uniform(ValueDomain::Normalized),
                &samples,
                &[],
                ConfigDigests::default(),
                &TrainSinks::default(),
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.loss_total.to_bits(), y.loss_total.to_bits());
        }
    }

    #[test]
    fn resume_continues_identically() {
        let samples = tiny_samples(3, 4);
        let model_cfg = tiny_model_cfg();
        let loss_cfg = LossConfig::default();
        let scheme = WeightScheme::uniform(ValueDomain::Normalized);

        let full_cfg = TrainConfig {
            max_iterations: 14,
            ..tiny_train_cfg()
        };
        let full = train::<f32>(
            &model_cfg,
            &full_cfg,
            &loss_cfg,
            &scheme,
            &samples,
            &[],
            ConfigDigests::default(),
            &TrainSinks::default(),
            None,
        )
        .unwrap();

        let half_cfg = TrainConfig {
            max_iterations: 4,
            ..tiny_train_cfg()
        };
        let half = train::<f32>(
            &model_cfg,
            &half_cfg,
            &loss_cfg,
            &scheme,
            &samples,
            &[],
            ConfigDigests::default(),
            &TrainSinks::default(),
            None,
        )
        .unwrap();
        // Round-trip the checkpoint through bytes before resuming.
        let bytes = encode_checkpoint(&half.checkpoint);
        let restored: Checkpoint<f32> =
            Checkpoint::from_raw(decode_checkpoint(&bytes).unwrap()).unwrap();
        let resumed = train::<f32>(
            &model_cfg,
            &full_cfg,
            &loss_cfg,
            &scheme,
            &samples,
            &[],
            ConfigDigests::default(),
            &TrainSinks::default(),
            Some(restored),
        )
        .unwrap();

        let full_train: Vec<&LogRow> = full.log.iter().filter(|r| r.split == "train").collect();
        let resumed_train: Vec<&LogRow> = resumed.log.iter().filter(|r| r.split == "train").collect();
        assert_eq!(resumed_train.len(), 10);
        for r in &resumed_train {
            let f = full_train
                .iter()
                .find(|x| x.iteration == r.iteration)
                .expect("iteration present in full run");
            assert_eq!(
                f.loss_total.to_bits(),
                r.loss_total.to_bits(),
                "iteration {} diverged after resume",
                r.iteration
            );
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let r = train::<f32>(
            &tiny_model_cfg(),
            &tiny_train_cfg(),
            &LossConfig::default(),
            &WeightScheme::uniform(ValueDomain::Normalized),
            &[],
            &[],
            ConfigDigests::default(),
            &TrainSinks::default(),
            None,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let inputs = Tensor::<f64>::from_fn(&[3, 2, 1, 2, 2], |i| i as f64);
        let p = persistence_forecast(&inputs, 4).unwrap();
        assert_eq!(p.shape(), &[4, 2, 1, 2, 2]);
        let per = 2 * 2 * 2;
        let last = &inputs.data()[2 * per..3 * per];
        for k in 0..4 {
            assert_eq!(&p.data()[k * per..(k + 1) * per], last);
        }
    }
}
