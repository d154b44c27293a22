//! End-to-end drivers: pseudo-label generation, training, inference, and
//! evaluation over clip directories.
//!
//! Training builds one graph per sampled clip, averages the frame losses,
//! scales by the clip count, and accumulates gradients into the parameter
//! set before each optimizer step. Runs are deterministic given the seed:
//! the same config produces bit-identical loss logs, checkpoints, and
//! saliency maps.

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::graph::Graph;
use crate::io::{self, Flow, IoError, LoadedClip};
use crate::metrics::{DatasetMetrics, Evaluator};
use crate::model::{FrameInput, Model};
use crate::nn::ParamSet;
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use crate::supervision::{
    flood_fill, frame_loss, FrameTargets, PointAnnotation, SupervisionError,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error("{clip}: frame {frame} has no point annotation")]
    MissingAnnotation { clip: String, frame: String },
    #[error("{clip}: frame {frame} is {got_h}x{got_w}, run expects {want_h}x{want_w}")]
    FrameExtent {
        clip: String,
        frame: String,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("step {step}: {term} is not finite, aborting")]
    NonFinite { step: usize, term: &'static str },
    #[error("no frames matched between predictions and ground truth")]
    NoOverlap,
    #[error("{0}")]
    Dataset(String),
}

// -- frame preparation --------------------------------------------------------

/// One frame ready for the network: cast image, colorized flow, and the
/// supervision targets derived from its points.
#[derive(Clone)]
pub struct PreparedFrame<F: Scalar> {
    pub name: String,
    pub flow_rgb: Tensor<F>,
    pub targets: FrameTargets<F>,
}

pub struct PreparedClip<F: Scalar> {
    pub name: String,
    pub frames: Vec<PreparedFrame<F>>,
}

fn annotation_map(clip: &LoadedClip) -> HashMap<&str, &PointAnnotation> {
    clip.points.iter().map(|a| (a.frame.as_str(), a)).collect()
}

fn clip_name(dir: &Path) -> String {
    dir.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("clip")
        .to_string()
}

fn prepare_frame<F: Scalar>(
    name: &str,
    img: &Tensor<f64>,
    flow: &Flow,
    ann: &PointAnnotation,
    cfg: &RunConfig,
) -> Result<PreparedFrame<F>, PipelineError> {
    let targets = FrameTargets::prepare(img, ann, &cfg.supervision)?;
    let flow_rgb = io::flow_to_rgb(flow).cast::<F>();
    Ok(PreparedFrame {
        name: name.to_string(),
        flow_rgb,
        targets,
    })
}

fn check_extent(
    cfg: &RunConfig,
    clip: &str,
    frame: &str,
    img: &Tensor<f64>,
) -> Result<(), PipelineError> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h != cfg.input_h || w != cfg.input_w {
        return Err(PipelineError::FrameExtent {
            clip: clip.to_string(),
            frame: frame.to_string(),
            got_h: h,
            got_w: w,
            want_h: cfg.input_h,
            want_w: cfg.input_w,
        });
    }
    Ok(())
}

fn prepare_clip<F: Scalar>(
    clip: &LoadedClip,
    cfg: &RunConfig,
) -> Result<PreparedClip<F>, PipelineError> {
    let name = clip_name(&clip.dir);
    let anns = annotation_map(clip);
    let mut frames = Vec::with_capacity(clip.frames.len());
    for (i, frame_name) in clip.names.iter().enumerate() {
        check_extent(cfg, &name, frame_name, &clip.frames[i])?;
        let ann = anns
            .get(frame_name.as_str())
            .ok_or_else(|| PipelineError::MissingAnnotation {
                clip: name.clone(),
                frame: frame_name.clone(),
            })?;
        frames.push(prepare_frame(
            frame_name,
            &clip.frames[i],
            &clip.flows[i],
            ann,
            cfg,
        )?);
    }
    Ok(PreparedClip { name, frames })
}

// -- geometric augmentation ---------------------------------------------------

/// Bilinear plane resize with half-pixel centers.
fn resize_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    if (sh, sw) == (dh, dw) {
        return src.to_vec();
    }
    let mut out = vec![0.0; dh * dw];
    let sy = sh as f64 / dh as f64;
    let sx = sw as f64 / dw as f64;
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, sh as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, sw as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn hflip_image(img: &Tensor<f64>) -> Tensor<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    Tensor::from_fn(img.shape(), |idx| {
        // from_fn walks row-major; recover (c, y, x) and mirror x.
        let c = idx / (h * w);
        let rem = idx % (h * w);
        let (y, x) = (rem / w, rem % w);
        d[c * h * w + y * w + (w - 1 - x)]
    })
}

fn hflip_flow(flow: &Flow) -> Flow {
    let mut out = Flow::zeros(flow.h, flow.w);
    for y in 0..flow.h {
        for x in 0..flow.w {
            let (u, v) = flow.at(flow.w - 1 - x, y);
            out.set(x, y, -u, v);
        }
    }
    out
}

fn hflip_points(ann: &PointAnnotation, w: usize) -> PointAnnotation {
    let flip = |pts: &[[usize; 2]]| pts.iter().map(|p| [w - 1 - p[0], p[1]]).collect();
    PointAnnotation {
        frame: ann.frame.clone(),
        fg: flip(&ann.fg),
        bg: flip(&ann.bg),
    }
}

struct CropBox {
    oy: usize,
    ox: usize,
    ch: usize,
    cw: usize,
}

fn crop_resize_image(img: &Tensor<f64>, b: &CropBox, dh: usize, dw: usize) -> Tensor<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut planes = Vec::with_capacity(3 * dh * dw);
    for c in 0..3 {
        let mut crop = Vec::with_capacity(b.ch * b.cw);
        for y in 0..b.ch {
            let row = (b.oy + y) * w + b.ox;
            crop.extend_from_slice(&d[c * h * w + row..c * h * w + row + b.cw]);
        }
        planes.extend(resize_plane(&crop, b.ch, b.cw, dh, dw));
    }
    Tensor::from_vec(&[3, dh, dw], planes).expect("sized")
}

fn crop_resize_flow(flow: &Flow, b: &CropBox, dh: usize, dw: usize) -> Flow {
    let mut u = Vec::with_capacity(b.ch * b.cw);
    let mut v = Vec::with_capacity(b.ch * b.cw);
    for y in 0..b.ch {
        for x in 0..b.cw {
            let (fu, fv) = flow.at(b.ox + x, b.oy + y);
            u.push(fu as f64);
            v.push(fv as f64);
        }
    }
    let su = dw as f64 / b.cw as f64;
    let sv = dh as f64 / b.ch as f64;
    let ur = resize_plane(&u, b.ch, b.cw, dh, dw);
    let vr = resize_plane(&v, b.ch, b.cw, dh, dw);
    let mut out = Flow::zeros(dh, dw);
    for i in 0..dh * dw {
        out.uv[2 * i] = (ur[i] * su) as f32;
        out.uv[2 * i + 1] = (vr[i] * sv) as f32;
    }
    out
}

/// Remaps point coordinates through a crop; points outside the box are
/// dropped.
fn crop_points(ann: &PointAnnotation, b: &CropBox, dh: usize, dw: usize) -> PointAnnotation {
    let remap = |pts: &[[usize; 2]]| {
        pts.iter()
            .filter(|p| {
                p[0] >= b.ox && p[0] < b.ox + b.cw && p[1] >= b.oy && p[1] < b.oy + b.ch
            })
            .map(|p| {
                let x = ((p[0] - b.ox) as f64 + 0.5) * (dw as f64 / b.cw as f64) - 0.5;
                let y = ((p[1] - b.oy) as f64 + 0.5) * (dh as f64 / b.ch as f64) - 0.5;
                [
                    (x.round().max(0.0) as usize).min(dw - 1),
                    (y.round().max(0.0) as usize).min(dh - 1),
                ]
            })
            .collect()
    };
    PointAnnotation {
        frame: ann.frame.clone(),
        fg: remap(&ann.fg),
        bg: remap(&ann.bg),
    }
}

// -- training -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub bce: f64,
    pub pbce: f64,
    pub smooth: f64,
    pub gcrf: f64,
}

impl StepLoss {
    /// One training-log line: `step total l_bce l_pbce l_smooth l_gcrf` as
    /// bare space-separated columns.
    pub fn log_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.step, self.total, self.bce, self.pbce, self.smooth, self.gcrf
        )
    }
}

pub struct TrainReport {
    pub losses: Vec<StepLoss>,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
}

pub struct Trainer<F: Scalar> {
    pub cfg: RunConfig,
    pub ps: ParamSet<F>,
    pub model: Model,
    opt: Optimizer<F>,
    raw: Vec<LoadedClip>,
    prepared: Vec<PreparedClip<F>>,
    rng: ChaCha20Rng,
    pub losses: Vec<StepLoss>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: &RunConfig, data_root: &Path) -> Result<Self, PipelineError> {
        let dirs = io::scan_clips(data_root)?;
        let raw = dirs
            .iter()
            .map(|d| io::load_clip(d))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_clips(cfg, raw)
    }

    pub fn from_clips(cfg: &RunConfig, raw: Vec<LoadedClip>) -> Result<Self, PipelineError> {
        if raw.is_empty() {
            return Err(PipelineError::Dataset("training set is empty".into()));
        }
        let prepared = raw
            .iter()
            .map(|c| prepare_clip(c, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let model = Model::new(&mut ps, &mut init_rng, cfg.model_config())?;
        let opt = Optimizer::new(cfg.optim.clone(), &ps, cfg.train.steps.max(1));
        Ok(Trainer {
            cfg: cfg.clone(),
            ps,
            model,
            opt,
            raw,
            prepared,
            rng: ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            losses: Vec::new(),
        })
    }

    /// Replaces the freshly initialized weights with a saved checkpoint,
    /// e.g. to finetune a single-frame pre-training run on whole clips.
    /// Both training modes build the identical parameter set, so
    /// checkpoints transfer across the phase boundary unchanged.
    pub fn load_checkpoint(&mut self, prefix: &Path) -> Result<(), PipelineError> {
        io::load_params(prefix, &mut self.ps)?;
        Ok(())
    }

    /// Frames for one sampled window of one clip, augmented when enabled.
    fn sample_clip(&mut self, idx: usize) -> Result<Vec<PreparedFrame<F>>, PipelineError> {
        let len = self.prepared[idx].frames.len();
        let window = if self.cfg.train.single_frame {
            1
        } else {
            self.cfg.clip_frames.min(len)
        };
        let start = if len > window {
            self.rng.gen_range(0..=len - window)
        } else {
            0
        };
        if !self.cfg.train.augment {
            return Ok(self.prepared[idx].frames[start..start + window].to_vec());
        }

        let flip = self.rng.gen_bool(0.5);
        let (h, w) = (self.cfg.input_h, self.cfg.input_w);
        let scale = self.rng.gen_range(0.75..=1.0);
        let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
        let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let mut b = CropBox {
            oy: self.rng.gen_range(0..=h - ch),
            ox: self.rng.gen_range(0..=w - cw),
            ch,
            cw,
        };
        let clip = &self.raw[idx];
        let anns = annotation_map(clip);
        let name = clip_name(&clip.dir);

        // A crop that strips every foreground or background point from any
        // frame in the window is abandoned; the flip still applies.
        let window_anns: Vec<&PointAnnotation> = (start..start + window)
            .map(|i| {
                anns.get(clip.names[i].as_str())
                    .copied()
                    .ok_or_else(|| PipelineError::MissingAnnotation {
                        clip: name.clone(),
                        frame: clip.names[i].clone(),
                    })
            })
            .collect::<Result<_, _>>()?;
        let crop_ok = window_anns.iter().all(|a| {
            let cropped = crop_points(a, &b, h, w);
            !cropped.fg.is_empty() && !cropped.bg.is_empty()
        });
        if !crop_ok {
            b = CropBox {
                oy: 0,
                ox: 0,
                ch: h,
                cw: w,
            };
        }

        let mut out = Vec::with_capacity(window);
        for (k, i) in (start..start + window).enumerate() {
            let mut img = crop_resize_image(&clip.frames[i], &b, h, w);
            let mut flow = crop_resize_flow(&clip.flows[i], &b, h, w);
            let mut ann = crop_points(window_anns[k], &b, h, w);
            if flip {
                img = hflip_image(&img);
                flow = hflip_flow(&flow);
                ann = hflip_points(&ann, w);
            }
            out.push(prepare_frame(&clip.names[i], &img, &flow, &ann, &self.cfg)?);
        }
        Ok(out)
    }

    /// One optimizer step over freshly sampled clips.
    pub fn step(&mut self) -> Result<StepLoss, PipelineError> {
        let step = self.opt.steps_taken();
        let n_clips = self.cfg.train.clips_per_step.max(1);
        self.ps.zero_grads();
        let mut total = 0.0f64;
        let mut parts = [0.0f64; 4];
        for _ in 0..n_clips {
            let idx = self.rng.gen_range(0..self.prepared.len());
            let frames = self.sample_clip(idx)?;
            let mut g = Graph::<F>::new();
            let bd = self.ps.bind(&mut g);
            let inputs: Vec<FrameInput> = frames
                .iter()
                .map(|f| FrameInput {
                    rgb: g.constant(&f.targets.image),
                    flow: g.constant(&f.flow_rgb),
                })
                .collect();
            let outs = self.model.forward_clip(&mut g, &bd, &inputs)?;
            let mut clip_total = None;
            let denom = (frames.len() * n_clips) as f64;
            for (out, frame) in outs.iter().zip(&frames) {
                let heads = [
                    out.side_full[0],
                    out.side_full[1],
                    out.side_full[2],
                    out.side_full[3],
                    out.final_full,
                ];
                let lb = frame_loss(&mut g, heads, &frame.targets, &self.cfg.supervision)?;
                clip_total = Some(match clip_total {
                    None => lb.total,
                    Some(acc) => g.add(acc, lb.total)?,
                });
                parts[0] += lb.bce / denom;
                parts[1] += lb.pbce / denom;
                parts[2] += lb.smooth / denom;
                parts[3] += lb.gcrf / denom;
            }
            let scaled = g.scale(clip_total.expect("clip has frames"), F::c(1.0 / denom));
            g.backward(scaled)?;
            self.ps.accumulate_from(&g, &bd);
            total += g.scalar_value(scaled).as_f64();
        }
        let loss = StepLoss {
            step,
            total,
            bce: parts[0],
            pbce: parts[1],
            smooth: parts[2],
            gcrf: parts[3],
        };
        for (term, v) in [
            ("bce", loss.bce),
            ("pbce", loss.pbce),
            ("smooth", loss.smooth),
            ("gcrf", loss.gcrf),
            ("total", loss.total),
        ] {
            if !v.is_finite() {
                return Err(PipelineError::NonFinite { step, term });
            }
        }
        self.opt.step(&mut self.ps);
        self.losses.push(loss.clone());
        Ok(loss)
    }

    /// Runs the configured number of steps, streaming log lines, writing
    /// `train.log` and periodic checkpoints under `out_dir`.
    pub fn run(
        &mut self,
        out_dir: &Path,
        mut sink: impl FnMut(&str),
    ) -> Result<TrainReport, PipelineError> {
        fs::create_dir_all(out_dir).map_err(|source| IoError::File {
            path: out_dir.to_path_buf(),
            source,
        })?;
        let log_path = out_dir.join("train.log");
        let mut log = fs::File::create(&log_path).map_err(|source| IoError::File {
            path: log_path.clone(),
            source,
        })?;
        let mut checkpoints = Vec::new();
        let steps = self.cfg.train.steps;
        let every = self.cfg.train.checkpoint_every;
        for i in 0..steps {
            let loss = self.step()?;
            let line = loss.log_line();
            writeln!(log, "{line}").map_err(|source| IoError::File {
                path: log_path.clone(),
                source,
            })?;
            sink(&line);
            if every > 0 && (i + 1) % every == 0 && i + 1 < steps {
                let prefix = out_dir.join(format!("ckpt_{:06}", i + 1));
                io::save_params(&prefix, &self.ps)?;
                checkpoints.push(prefix);
            }
        }
        let final_prefix = out_dir.join("ckpt_final");
        io::save_params(&final_prefix, &self.ps)?;
        checkpoints.push(final_prefix);
        Ok(TrainReport {
            losses: self.losses.clone(),
            checkpoints,
            log_path,
        })
    }
}

// -- inference ----------------------------------------------------------------

/// Runs the network over every clip under `data_root` and writes one 8-bit
/// saliency PGM per frame, mirroring the clip layout under `out_dir`.
pub fn infer<F: Scalar>(
    cfg: &RunConfig,
    ckpt_prefix: &Path,
    data_root: &Path,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, PipelineError> {
    let mut init_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut ps = ParamSet::<F>::new();
    let model = Model::new(&mut ps, &mut init_rng, cfg.model_config())?;
    io::load_params(ckpt_prefix, &mut ps)?;

    let mut outputs = Vec::new();
    for dir in io::scan_clips(data_root)? {
        let clip = io::load_clip(&dir)?;
        let name = clip_name(&dir);
        let clip_out = out_dir.join(&name);
        fs::create_dir_all(&clip_out).map_err(|source| IoError::File {
            path: clip_out.clone(),
            source,
        })?;
        for chunk_start in (0..clip.frames.len()).step_by(cfg.clip_frames.max(1)) {
            let chunk_end = (chunk_start + cfg.clip_frames.max(1)).min(clip.frames.len());
            let mut g = Graph::<F>::new();
            let bd = ps.bind(&mut g);
            let mut inputs = Vec::new();
            for i in chunk_start..chunk_end {
                check_extent(cfg, &name, &clip.names[i], &clip.frames[i])?;
                let rgb = clip.frames[i].cast::<F>();
                let flow_rgb = io::flow_to_rgb(&clip.flows[i]).cast::<F>();
                inputs.push(FrameInput {
                    rgb: g.constant(&rgb),
                    flow: g.constant(&flow_rgb),
                });
            }
            let outs = model.forward_clip(&mut g, &bd, &inputs)?;
            for (k, out) in outs.iter().enumerate() {
                let map: Vec<f64> = g
                    .data(out.final_full)
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let path = clip_out.join(format!("{}.pgm", clip.names[chunk_start + k]));
                io::write_saliency(&path, &map, cfg.input_h, cfg.input_w)?;
                outputs.push(path);
            }
        }
    }
    Ok(outputs)
}

// -- evaluation ---------------------------------------------------------------

pub struct EvalReport {
    pub per_clip: Vec<(String, DatasetMetrics)>,
    pub overall: DatasetMetrics,
    /// Frames present on one side only, as `clip/frame` paths.
    pub unmatched: Vec<String>,
}

/// Scores prediction PGMs against ground-truth masks. Frames are matched
/// by clip directory and frame stem; unmatched frames on either side are
/// reported and excluded.
pub fn evaluate(
    cfg: &RunConfig,
    pred_root: &Path,
    data_root: &Path,
) -> Result<EvalReport, PipelineError> {
    let mut overall = Evaluator::new(
        crate::metrics::DEFAULT_BETA2,
        crate::metrics::DEFAULT_ALPHA,
        cfg.eval_aggregate,
    );
    let mut per_clip = Vec::new();
    let mut unmatched = Vec::new();
    let mut matched = 0usize;
    for dir in io::scan_clips(data_root)? {
        let name = clip_name(&dir);
        let clip = io::load_clip(&dir)?;
        let mut clip_eval = Evaluator::new(
            crate::metrics::DEFAULT_BETA2,
            crate::metrics::DEFAULT_ALPHA,
            cfg.eval_aggregate,
        );
        let mut clip_matched = 0usize;
        let mut pred_seen = Vec::new();
        for (i, frame) in clip.names.iter().enumerate() {
            let Some(gt) = &clip.gt[i] else { continue };
            let pred_path = pred_root.join(&name).join(format!("{frame}.pgm"));
            if !pred_path.exists() {
                unmatched.push(format!("{name}/{frame}"));
                continue;
            }
            pred_seen.push(format!("{frame}.pgm"));
            let (pred, ph, pw) = io::read_pgm_unit(&pred_path)?;
            let (gh, gw) = (gt.shape()[0], gt.shape()[1]);
            if (ph, pw) != (gh, gw) {
                return Err(PipelineError::Dataset(format!(
                    "{name}/{frame}: prediction is {pw}x{ph}, ground truth {gw}x{gh}"
                )));
            }
            clip_eval
                .add_frame(&pred, gt.data(), gh, gw)
                .map_err(|e| PipelineError::Dataset(format!("{name}/{frame}: {e}")))?;
            overall
                .add_frame(&pred, gt.data(), gh, gw)
                .map_err(|e| PipelineError::Dataset(format!("{name}/{frame}: {e}")))?;
            clip_matched += 1;
            matched += 1;
        }
        // Predictions with no ground-truth partner are unmatched too.
        let clip_pred_dir = pred_root.join(&name);
        if clip_pred_dir.is_dir() {
            let mut entries: Vec<_> = fs::read_dir(&clip_pred_dir)
                .map_err(|source| IoError::File {
                    path: clip_pred_dir.clone(),
                    source,
                })?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".pgm") && !pred_seen.contains(n))
                .collect();
            entries.sort();
            for n in entries {
                unmatched.push(format!("{name}/{}", n.trim_end_matches(".pgm")));
            }
        }
        if clip_matched > 0 {
            per_clip.push((name, clip_eval.finish()));
        }
    }
    if matched == 0 {
        return Err(PipelineError::NoOverlap);
    }
    Ok(EvalReport {
        per_clip,
        overall: overall.finish(),
        unmatched,
    })
}

// -- pseudo-label generation ----------------------------------------------------

pub struct LabelSummary {
    pub written: usize,
    pub skipped: usize,
    pub fg_fraction: f64,
    pub bg_fraction: f64,
    pub unlabeled_fraction: f64,
    pub outputs: Vec<PathBuf>,
}

/// Flood-fills every annotated frame into a tri-level PGM under `out_dir`,
/// mirroring the clip layout. Frames without annotations are skipped and
/// counted.
pub fn pseudolabel(
    cfg: &RunConfig,
    data_root: &Path,
    out_dir: &Path,
) -> Result<LabelSummary, PipelineError> {
    let mut summary = LabelSummary {
        written: 0,
        skipped: 0,
        fg_fraction: 0.0,
        bg_fraction: 0.0,
        unlabeled_fraction: 0.0,
        outputs: Vec::new(),
    };
    let mut counts = [0usize; 3];
    for dir in io::scan_clips(data_root)? {
        let clip = io::load_clip(&dir)?;
        let name = clip_name(&dir);
        let anns = annotation_map(&clip);
        let clip_out = out_dir.join(&name);
        fs::create_dir_all(&clip_out).map_err(|source| IoError::File {
            path: clip_out.clone(),
            source,
        })?;
        for (i, frame) in clip.names.iter().enumerate() {
            let Some(ann) = anns.get(frame.as_str()) else {
                summary.skipped += 1;
                continue;
            };
            let label = flood_fill(&clip.frames[i], ann, &cfg.supervision.fill)?;
            for &v in &label.map {
                match v {
                    crate::supervision::PseudoLabel::FG => counts[0] += 1,
                    crate::supervision::PseudoLabel::BG => counts[1] += 1,
                    _ => counts[2] += 1,
                }
            }
            let path = clip_out.join(format!("{frame}.pgm"));
            io::write_label(&path, &label)?;
            summary.outputs.push(path);
            summary.written += 1;
        }
    }
    let total = (counts[0] + counts[1] + counts[2]).max(1) as f64;
    summary.fg_fraction = counts[0] as f64 / total;
    summary.bg_fraction = counts[1] as f64 / total;
    summary.unlabeled_fraction = counts[2] as f64 / total;
    Ok(summary)
}
