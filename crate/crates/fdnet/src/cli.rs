//! Command-line surface: data generation, training, prediction, evaluation
//! and image-strip rendering.
//!
//! ```text
//! fdnet <command> [--config PATH] [--seed N] [--out DIR] [--section.key VALUE ...]
//!
//! commands:
//!   gen-data                       write the synthetic dataset + manifest
//!   train      [--resume PATH] [--force] [--ablation NAME]
//!   predict    --checkpoint PATH --input PATH [--horizon K]
//!   evaluate   [--checkpoint PATH] --split NAME [--baseline persistence]
//!   render     --input PATH [--max-frames N]
//! ```
//!
//! Any `--a.b.c VALUE` flag overrides the config key `a.b.c`; precedence is
//! flags > file > defaults. Exit codes: 0 ok, 1 validation, 2 runtime, 3 I/O.

use crate::config::{load_config, Precision, RunConfig};
use crate::data::io::{
    decode_grd, decode_pgm, frame_to_pgm, load_split, save_manifest, save_split, Manifest,
};
use crate::data::{filter_noisy, gen_synthetic, window, Sequence};
use crate::error::{Error, Result};
use crate::metrics::evaluate_rollout;
use crate::model::rollout_frames;
use crate::tensor::{Element, Tensor};
use crate::trainer::{load_checkpoint, persistence_forecast, train, Checkpoint, TrainSinks};
use std::path::{Path, PathBuf};

const USAGE: &str = "usage: fdnet <gen-data|train|predict|evaluate|render> \
[--config PATH] [--seed N] [--out DIR] [--section.key VALUE ...] [command flags]";

#[derive(Debug, Default)]
struct Args {
    command: String,
    config_path: Option<PathBuf>,
    overrides: Vec<(String, String)>,
    out: Option<String>,
    resume: Option<PathBuf>,
    force: bool,
    ablation: Vec<String>,
    checkpoint: Option<PathBuf>,
    input: Option<PathBuf>,
    horizon: Option<usize>,
    split: Option<String>,
    baseline: Option<String>,
    max_frames: Option<usize>,
}

fn parse_args(argv: &[String]) -> Result<Args> {
    let mut args = Args::default();
    let mut it = argv.iter().peekable();
    let Some(cmd) = it.next() else {
        return Err(Error::Config(USAGE.into()));
    };
    args.command = cmd.clone();

    let value_of = |it: &mut std::iter::Peekable<std::slice::Iter<String>>, flag: &str| {
        it.next()
            .cloned()
            .ok_or_else(|| Error::Config(format!("flag --{flag} needs a value")))
    };

    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            return Err(Error::Config(format!("unexpected argument '{arg}'\n{USAGE}")));
        };
        match flag {
            "config" => args.config_path = Some(PathBuf::from(value_of(&mut it, flag)?)),
            "seed" => {
                let v = value_of(&mut it, flag)?;
                args.overrides.push(("train.seed".into(), v.clone()));
                args.overrides.push(("data.synth.seed".into(), v));
            }
            "out" => args.out = Some(value_of(&mut it, flag)?),
            "resume" => args.resume = Some(PathBuf::from(value_of(&mut it, flag)?)),
            "force" => args.force = true,
            "ablation" => args.ablation.push(value_of(&mut it, flag)?),
            "checkpoint" => args.checkpoint = Some(PathBuf::from(value_of(&mut it, flag)?)),
            "input" => args.input = Some(PathBuf::from(value_of(&mut it, flag)?)),
            "horizon" => {
                args.horizon = Some(
                    value_of(&mut it, flag)?
                        .parse()
                        .map_err(|_| Error::Config("--horizon needs an integer".into()))?,
                )
            }
            "split" => args.split = Some(value_of(&mut it, flag)?),
            "baseline" => args.baseline = Some(value_of(&mut it, flag)?),
            "max-frames" => {
                args.max_frames = Some(
                    value_of(&mut it, flag)?
                        .parse()
                        .map_err(|_| Error::Config("--max-frames needs an integer".into()))?,
                )
            }
            key if key.contains('.') => {
                args.overrides.push((key.to_string(), value_of(&mut it, key)?))
            }
            other => {
                return Err(Error::Config(format!("unknown flag --{other}\n{USAGE}")));
            }
        }
    }
    Ok(args)
}

fn apply_ablations(cfg: &mut RunConfig, names: &[String]) -> Result<()> {
    for name in names {
        match name.as_str() {
            "no-deformation" => cfg.model.use_def_output = false,
            "no-flow" => cfg.model.use_flow_output = false,
            "shared-encoder" => cfg.model.separate_encoders = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected no-deformation, no-flow or shared-encoder)"
                )))
            }
        }
    }
    Ok(())
}

/// Entry point used by both the binary and the CLI tests.
pub fn run(argv: &[String]) -> Result<()> {
    let args = parse_args(argv)?;
    let mut cfg = load_config(args.config_path.as_deref(), &args.overrides)?;
    if let Some(out) = &args.out {
        cfg.out = out.clone();
    }
    apply_ablations(&mut cfg, &args.ablation)?;
    cfg.validate()?;

    match args.command.as_str() {
        "gen-data" => cmd_gen_data(&cfg, args.out.as_deref()),
        "train" => match cfg.precision {
            Precision::F32 => cmd_train::<f32>(&cfg, &args),
            Precision::F64 => cmd_train::<f64>(&cfg, &args),
        },
        "predict" => match cfg.precision {
            Precision::F32 => cmd_predict::<f32>(&cfg, &args),
            Precision::F64 => cmd_predict::<f64>(&cfg, &args),
        },
        "evaluate" => match cfg.precision {
            Precision::F32 => cmd_evaluate::<f32>(&cfg, &args),
            Precision::F64 => cmd_evaluate::<f64>(&cfg, &args),
        },
        "render" => cmd_render(&cfg, &args),
        other => Err(Error::Config(format!("unknown command '{other}'\n{USAGE}"))),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

// --- gen-data -------------------------------------------------------------------

fn cmd_gen_data(cfg: &RunConfig, out_override: Option<&str>) -> Result<()> {
    // For gen-data, --out names the dataset root itself.
    let root = PathBuf::from(out_override.unwrap_or(&cfg.data.root));
    ensure_dir(&root)?;
    let mut manifest = Manifest::default();
    for split in ["train", "val", "test"] {
        let synth = cfg.data.synth_for_split(split)?;
        let mut seqs = gen_synthetic::<f32>(&synth)?;
        for (i, s) in seqs.iter_mut().enumerate() {
            s.id = format!("{split}_{i:04}");
        }
        manifest
            .sequences
            .extend(save_split(&root, split, &seqs, cfg.data.format)?);
        println!("gen-data: wrote {} {split} sequences", seqs.len());
    }
    save_manifest(&root, &manifest)?;
    println!("gen-data: manifest at {}", root.join("manifest.json").display());
    Ok(())
}

// --- train ----------------------------------------------------------------------

fn windows_of<E: Element>(
    cfg: &RunConfig,
    seqs: &[Sequence<E>],
) -> Result<Vec<(Tensor<E>, Tensor<E>)>> {
    let mut out = Vec::new();
    for s in seqs {
        out.extend(window(s, cfg.data.j, cfg.data.k, cfg.data.window_stride)?);
    }
    Ok(out)
}

fn load_filtered<E: Element>(cfg: &RunConfig, split: &str) -> Result<Vec<Sequence<E>>> {
    let root = PathBuf::from(&cfg.data.root);
    let seqs = load_split::<E>(&root, split)?;
    Ok(filter_noisy(seqs, cfg.data.eps_act))
}

fn cmd_train<E: Element>(cfg: &RunConfig, args: &Args) -> Result<()> {
    let out_dir = PathBuf::from(&cfg.out);
    ensure_dir(&out_dir)?;
    let train_seqs = load_filtered::<E>(cfg, "train")?;
    let val_seqs = load_filtered::<E>(cfg, "val").unwrap_or_default();
    let train_samples = windows_of(cfg, &train_seqs)?;
    let val_samples = windows_of(cfg, &val_seqs)?;
    let (loss_cfg, scheme) = cfg.loss.to_parts()?;
    let digests = cfg.digests();

    let resume = match &args.resume {
        Some(path) => Some(load_checkpoint::<E>(path, Some(&digests), args.force)?),
        None => None,
    };

    let sinks = TrainSinks {
        out_dir: Some(out_dir.clone()),
    };
    let outcome = train(
        &cfg.model,
        &cfg.train,
        &loss_cfg,
        &scheme,
        &train_samples,
        &val_samples,
        digests,
        &sinks,
        resume,
    )?;
    println!(
        "train: {} iterations, loss {:.6} -> {:.6}{}",
        outcome.checkpoint.iteration,
        outcome.first_loss,
        outcome.final_loss,
        if outcome.stopped_early { " (early stop)" } else { "" }
    );
    if let Some(b) = outcome.best_val_bmse {
        println!("train: best validation BMSE {b:.6}");
    }
    println!("train: artifacts in {}", out_dir.display());
    Ok(())
}

// --- predict --------------------------------------------------------------------

/// Loads a standalone input sequence: a directory in dataset layout
/// (PGM frames or `sequence.grd`) or a bare `.grd` file.
fn load_input_sequence<E: Element>(path: &Path) -> Result<Sequence<E>> {
    if path.is_file() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let (h, w, t, values) = decode_grd(&bytes)?;
        let frames = Tensor::from_vec(
            &[t, 1, h, w],
            values.into_iter().map(|v| E::from_f64(v as f64)).collect(),
        )?;
        return Sequence::new(
            path.file_stem().and_then(|s| s.to_str()).unwrap_or("input"),
            frames,
            6,
        );
    }
    if !path.is_dir() {
        return Err(Error::Data(format!("input {} does not exist", path.display())));
    }
    let grd = path.join("sequence.grd");
    if grd.is_file() {
        return load_input_sequence(&grd);
    }
    // Consecutive frame_%03d.pgm files.
    let mut frames_data = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    let mut t = 0usize;
    loop {
        let fp = path.join(format!("frame_{t:03}.pgm"));
        if !fp.is_file() {
            break;
        }
        let bytes = std::fs::read(&fp).map_err(|e| Error::io(fp.display().to_string(), e))?;
        let (w, h, pixels) = decode_pgm(&bytes)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Data(format!(
                    "frame {t} is {h}x{w}, expected {}x{}",
                    d.0, d.1
                )))
            }
            _ => {}
        }
        frames_data.extend(pixels.into_iter().map(|p| E::from_f64(p as f64 / 255.0)));
        t += 1;
    }
    let (h, w) = dims.ok_or_else(|| {
        Error::Data(format!(
            "no frame_000.pgm or sequence.grd under {}",
            path.display()
        ))
    })?;
    let frames = Tensor::from_vec(&[t, 1, h, w], frames_data)?;
    Sequence::new(
        path.file_name().and_then(|s| s.to_str()).unwrap_or("input"),
        frames,
        6,
    )
}

/// Renders frames side by side with 1px separators; `break_after` widens the
/// gap between the observed and predicted groups.
fn strip_image<E: Element>(frames: &[Tensor<E>], break_after: Option<usize>) -> Result<Vec<u8>> {
    if frames.is_empty() {
        return Err(Error::Data("strip: no frames".into()));
    }
    let shape = frames[0].shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let gap = 1usize;
    let wide_gap = 3usize;
    let gap_at = |i: usize| if break_after == Some(i) { wide_gap } else { gap };
    let mut total_w = 0usize;
    for (i, f) in frames.iter().enumerate() {
        if f.shape() != shape {
            return Err(Error::Data("strip: frames differ in shape".into()));
        }
        total_w += w;
        if i + 1 < frames.len() {
            total_w += gap_at(i + 1);
        }
    }
    let mut pixels = vec![255u8; h * total_w];
    let mut x0 = 0usize;
    for (i, f) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let v = f.data()[y * w + x].to_f64().clamp(0.0, 1.0);
                pixels[y * total_w + x0 + x] = (v * 255.0 + 0.5).floor() as u8;
            }
        }
        x0 += w;
        if i + 1 < frames.len() {
            x0 += gap_at(i + 1);
        }
    }
    crate::data::io::encode_pgm(total_w, h, &pixels)
}

fn cmd_predict<E: Element>(cfg: &RunConfig, args: &Args) -> Result<()> {
    let ckpt_path = args
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("predict: --checkpoint PATH is required".into()))?;
    let input_path = args
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("predict: --input PATH is required".into()))?;
    let horizon = args.horizon.unwrap_or(cfg.data.k);
    let ckpt: Checkpoint<E> = load_checkpoint(ckpt_path, None, true)?;

    let seq = load_input_sequence::<E>(input_path)?;
    let j = cfg.data.j;
    if seq.len() < j {
        return Err(Error::Data(format!(
            "input has {} frames but the observation window needs {j}",
            seq.len()
        )));
    }
    let (h, w) = seq.frame_dims();
    if (h, w) != (ckpt.params.config.input_height, ckpt.params.config.input_width) {
        return Err(Error::Config(format!(
            "input frames are {h}x{w} but the checkpointed model expects {}x{}",
            ckpt.params.config.input_height, ckpt.params.config.input_width
        )));
    }
    // Observation window: the last J frames.
    let start = seq.len() - j;
    let per = h * w;
    let inputs = Tensor::from_vec(
        &[j, 1, 1, h, w],
        seq.frames.data()[start * per..seq.len() * per].to_vec(),
    )?;
    let preds = rollout_frames(&ckpt.params, &inputs, horizon, None, None)?;

    let out_dir = PathBuf::from(&cfg.out);
    ensure_dir(&out_dir)?;
    let mut strip_frames: Vec<Tensor<E>> = (0..j).map(|t| seq.frame(start + t)).collect();
    for k in 0..horizon {
        let frame = Tensor::from_vec(&[1, h, w], preds.data()[k * per..(k + 1) * per].to_vec())?;
        write_file(
            &out_dir.join(format!("frame_pred_{k:03}.pgm")),
            &frame_to_pgm(&frame)?,
        )?;
        strip_frames.push(frame);
    }
    write_file(
        &out_dir.join("strip.pgm"),
        &strip_image(&strip_frames, Some(j))?,
    )?;
    println!(
        "predict: {horizon} frames + strip.pgm in {}",
        out_dir.display()
    );
    Ok(())
}

// --- evaluate -------------------------------------------------------------------

fn cmd_evaluate<E: Element>(cfg: &RunConfig, args: &Args) -> Result<()> {
    let split = args.split.as_deref().unwrap_or("test");
    let baseline = args.baseline.as_deref();
    if let Some(b) = baseline {
        if b != "persistence" {
            return Err(Error::Config(format!(
                "unknown baseline '{b}' (expected persistence)"
            )));
        }
    }
    let seqs = load_filtered::<E>(cfg, split)?;
    let samples = windows_of(cfg, &seqs)?;
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "split '{split}' is empty after filtering/windowing"
        )));
    }
    let (_, scheme) = cfg.loss.to_parts()?;
    let thresholds = cfg.eval.thresholds_for(&scheme);

    let ckpt: Option<Checkpoint<E>> = if baseline.is_none() {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("evaluate: --checkpoint PATH is required".into()))?;
        Some(load_checkpoint(path, None, args.force)?)
    } else {
        None
    };

    let k = cfg.data.k;
    let shape = samples[0].0.shape();
    let (h, w) = (shape[2], shape[3]);
    let per = h * w;
    let n_total = samples.len();
    // Pool every window along the batch axis: [K, N_total, 1, H, W].
    let mut preds_data = vec![E::ZERO; k * n_total * per];
    let mut tgt_data = vec![E::ZERO; k * n_total * per];
    for (si, (inputs, targets)) in samples.iter().enumerate() {
        let inputs5 = Tensor::from_vec(&[cfg.data.j, 1, 1, h, w], inputs.data().to_vec())?;
        let p = match &ckpt {
            Some(c) => rollout_frames(&c.params, &inputs5, k, None, None)?,
            None => persistence_forecast(&inputs5, k)?,
        };
        for step in 0..k {
            let dst = (step * n_total + si) * per;
            preds_data[dst..dst + per].copy_from_slice(&p.data()[step * per..(step + 1) * per]);
            tgt_data[dst..dst + per]
                .copy_from_slice(&targets.data()[step * per..(step + 1) * per]);
        }
    }
    let preds = Tensor::from_vec(&[k, n_total, 1, h, w], preds_data)?;
    let targets = Tensor::from_vec(&[k, n_total, 1, h, w], tgt_data)?;
    let cadence = seqs.first().map_or(6, |s| s.cadence_minutes);
    let report = evaluate_rollout(&preds, &targets, &thresholds, &scheme, cadence)?;

    let out_dir = PathBuf::from(&cfg.out);
    ensure_dir(&out_dir)?;
    let tag = baseline.unwrap_or("model");
    write_file(
        &out_dir.join(format!("report_{tag}_{split}.csv")),
        report.to_csv().as_bytes(),
    )?;
    write_file(
        &out_dir.join(format!("curves_{tag}_{split}.csv")),
        report.curves_csv().as_bytes(),
    )?;

    let summary = report.bmse_summary();
    let header: Vec<String> = summary.iter().map(|(l, _)| l.clone()).collect();
    let values: Vec<String> = summary.iter().map(|(_, v)| format!("{v:.4}")).collect();
    println!("evaluate [{tag}, split {split}, BMSE]:");
    println!("  {}", header.join("\t"));
    println!("  {}", values.join("\t"));
    for (tau, csi, hss) in &report.frame_mean {
        println!("  threshold {tau}: CSI {csi:.4}  HSS {hss:.4} (frame-wise mean)");
    }
    Ok(())
}

// --- render ---------------------------------------------------------------------

fn cmd_render(cfg: &RunConfig, args: &Args) -> Result<()> {
    let input_path = args
        .input
        .as_ref()
        .ok_or_else(|| Error::Config("render: --input PATH is required".into()))?;
    let seq = load_input_sequence::<f32>(input_path)?;
    let limit = args.max_frames.unwrap_or(seq.len()).min(seq.len());
    let frames: Vec<Tensor<f32>> = (0..limit).map(|t| seq.frame(t)).collect();
    let out_dir = PathBuf::from(&cfg.out);
    ensure_dir(&out_dir)?;
    let path = out_dir.join("strip.pgm");
    write_file(&path, &strip_image(&frames, None)?)?;
    println!("render: {} frames -> {}", limit, path.display());
    Ok(())
}
