//! Run configuration: a flat `key = value` text format.
//!
//! One key per line, `#` starts a comment, unknown keys are rejected with
//! their line number. Rendering writes every key in a fixed order using
//! shortest-round-trip float formatting, so `parse(render(c)) == c` holds
//! exactly.

use thiserror::Error;

use crate::encoder::{EncoderConfig, SplitSpec};
use crate::fusion::{CrossFrameConfig, GateConfig};
use crate::io::SynthConfig;
use crate::metrics::FAggregate;
use crate::model::ModelConfig;
use crate::optim::{OptimConfig, OptimKind};
use crate::supervision::SupervisionConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line}: {msg}")]
    Line { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Clips drawn per optimization step.
    pub clips_per_step: usize,
    pub checkpoint_every: usize,
    /// Train on single frames, which bypasses cross-frame attention.
    pub single_frame: bool,
    /// Random horizontal flips and crops.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            clips_per_step: 2,
            checkpoint_every: 100,
            single_frame: false,
            augment: false,
        }
    }
}

/// Everything a run needs, assembled from defaults plus a config file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub precision: Precision,
    pub seed: u64,
    pub input_h: usize,
    pub input_w: usize,
    pub clip_frames: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub fusion_reduction: usize,
    pub fusion_token_hidden: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub decoder_width: usize,
    pub supervision: SupervisionConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub eval_aggregate: FAggregate,
    pub synth_clips: usize,
    pub synth_frames: usize,
    pub synth_h: usize,
    pub synth_w: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            precision: Precision::F32,
            seed: 7,
            input_h: 64,
            input_w: 64,
            clip_frames: 4,
            encoder_dim: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            fusion_reduction: 2,
            fusion_token_hidden: 8,
            fusion_layers: 3,
            fusion_heads: 4,
            decoder_width: 64,
            supervision: SupervisionConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            eval_aggregate: FAggregate::Curve,
            synth_clips: 8,
            synth_frames: 4,
            synth_h: 64,
            synth_w: 64,
        }
    }
}

impl RunConfig {
    /// Parses overrides on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Line {
                line,
                msg: format!("expected key = value, got {content:?}"),
            })?;
            cfg.apply(key.trim(), value.trim())
                .map_err(|msg| ConfigError::Line { line, msg })?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("bad value {value:?} for {key}"))
        }
        let s = &mut self.supervision;
        let o = &mut self.optim;
        let t = &mut self.train;
        match key {
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(format!("precision must be f32 or f64, got {value:?}")),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "input.h" => self.input_h = num(key, value)?,
            "input.w" => self.input_w = num(key, value)?,
            "clip.frames" => self.clip_frames = num(key, value)?,
            "encoder.dim" => self.encoder_dim = num(key, value)?,
            "encoder.depth" => self.encoder_depth = num(key, value)?,
            "encoder.heads" => self.encoder_heads = num(key, value)?,
            "fusion.reduction" => self.fusion_reduction = num(key, value)?,
            "fusion.token_hidden" => self.fusion_token_hidden = num(key, value)?,
            "fusion.layers" => self.fusion_layers = num(key, value)?,
            "fusion.heads" => self.fusion_heads = num(key, value)?,
            "decoder.width" => self.decoder_width = num(key, value)?,
            "supervision.gamma" => s.fill.gamma = num(key, value)?,
            "supervision.color_threshold" => s.fill.color_threshold = num(key, value)?,
            "supervision.edge_quantile" => s.edge_quantile = num(key, value)?,
            "supervision.crf_kernel" => s.crf_kernel = num(key, value)?,
            "supervision.sigma_pt" => s.sigma_pt = num(key, value)?,
            "supervision.sigma_i" => s.sigma_i = num(key, value)?,
            "loss.edge" => s.edge_weight = num(key, value)?,
            "loss.side_pbce" => s.side_pbce_weight = num(key, value)?,
            "loss.side_smooth" => s.side_smooth_weight = num(key, value)?,
            "loss.final_pbce" => s.final_pbce_weight = num(key, value)?,
            "loss.final_smooth" => s.final_smooth_weight = num(key, value)?,
            "loss.final_gcrf" => s.final_gcrf_weight = num(key, value)?,
            "optim.kind" => {
                o.kind = match value {
                    "sgd" => OptimKind::Sgd,
                    "adam" => OptimKind::Adam,
                    _ => return Err(format!("optim.kind must be sgd or adam, got {value:?}")),
                }
            }
            "optim.lr" => o.lr = num(key, value)?,
            "optim.cross_lr" => o.cross_lr = num(key, value)?,
            "optim.momentum" => o.momentum = num(key, value)?,
            "optim.poly_power" => o.poly_power = num(key, value)?,
            "optim.beta1" => o.beta1 = num(key, value)?,
            "optim.beta2" => o.beta2 = num(key, value)?,
            "optim.eps" => o.eps = num(key, value)?,
            "train.steps" => t.steps = num(key, value)?,
            "train.clips_per_step" => t.clips_per_step = num(key, value)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, value)?,
            "train.single_frame" => t.single_frame = parse_bool(key, value)?,
            "train.augment" => t.augment = parse_bool(key, value)?,
            "eval.f_aggregate" => {
                self.eval_aggregate = match value {
                    "curve" => FAggregate::Curve,
                    "frame" => FAggregate::Frame,
                    _ => {
                        return Err(format!(
                            "eval.f_aggregate must be curve or frame, got {value:?}"
                        ))
                    }
                }
            }
            "synth.clips" => self.synth_clips = num(key, value)?,
            "synth.frames" => self.synth_frames = num(key, value)?,
            "synth.h" => self.synth_h = num(key, value)?,
            "synth.w" => self.synth_w = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Canonical text form; parsing it reproduces this config exactly.
    pub fn render(&self) -> String {
        let s = &self.supervision;
        let o = &self.optim;
        let t = &self.train;
        let lines: Vec<String> = vec![
            format!(
                "precision = {}",
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
            ),
            format!("seed = {}", self.seed),
            format!("input.h = {}", self.input_h),
            format!("input.w = {}", self.input_w),
            format!("clip.frames = {}", self.clip_frames),
            format!("encoder.dim = {}", self.encoder_dim),
            format!("encoder.depth = {}", self.encoder_depth),
            format!("encoder.heads = {}", self.encoder_heads),
            format!("fusion.reduction = {}", self.fusion_reduction),
            format!("fusion.token_hidden = {}", self.fusion_token_hidden),
            format!("fusion.layers = {}", self.fusion_layers),
            format!("fusion.heads = {}", self.fusion_heads),
            format!("decoder.width = {}", self.decoder_width),
            format!("supervision.gamma = {}", s.fill.gamma),
            format!("supervision.color_threshold = {}", s.fill.color_threshold),
            format!("supervision.edge_quantile = {}", s.edge_quantile),
            format!("supervision.crf_kernel = {}", s.crf_kernel),
            format!("supervision.sigma_pt = {}", s.sigma_pt),
            format!("supervision.sigma_i = {}", s.sigma_i),
            format!("loss.edge = {}", s.edge_weight),
            format!("loss.side_pbce = {}", s.side_pbce_weight),
            format!("loss.side_smooth = {}", s.side_smooth_weight),
            format!("loss.final_pbce = {}", s.final_pbce_weight),
            format!("loss.final_smooth = {}", s.final_smooth_weight),
            format!("loss.final_gcrf = {}", s.final_gcrf_weight),
            format!(
                "optim.kind = {}",
                match o.kind {
                    OptimKind::Sgd => "sgd",
                    OptimKind::Adam => "adam",
                }
            ),
            format!("optim.lr = {}", o.lr),
            format!("optim.cross_lr = {}", o.cross_lr),
            format!("optim.momentum = {}", o.momentum),
            format!("optim.poly_power = {}", o.poly_power),
            format!("optim.beta1 = {}", o.beta1),
            format!("optim.beta2 = {}", o.beta2),
            format!("optim.eps = {}", o.eps),
            format!("train.steps = {}", t.steps),
            format!("train.clips_per_step = {}", t.clips_per_step),
            format!("train.checkpoint_every = {}", t.checkpoint_every),
            format!("train.single_frame = {}", t.single_frame),
            format!("train.augment = {}", t.augment),
            format!(
                "eval.f_aggregate = {}",
                match self.eval_aggregate {
                    FAggregate::Curve => "curve",
                    FAggregate::Frame => "frame",
                }
            ),
            format!("synth.clips = {}", self.synth_clips),
            format!("synth.frames = {}", self.synth_frames),
            format!("synth.h = {}", self.synth_h),
            format!("synth.w = {}", self.synth_w),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Network architecture implied by this run.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                input_h: self.input_h,
                input_w: self.input_w,
                splits: [
                    SplitSpec::new(7, 4, 2),
                    SplitSpec::new(3, 2, 1),
                    SplitSpec::new(3, 2, 1),
                ],
                embed_dims: [self.encoder_dim; 3],
                depth: self.encoder_depth,
                heads: self.encoder_heads,
                mlp_ratio: 1.0,
                ln_eps: 1e-5,
            },
            gate: GateConfig {
                reduction: self.fusion_reduction,
                token_hidden: self.fusion_token_hidden,
                ln_eps: 1e-5,
            },
            cross: CrossFrameConfig {
                layers: self.fusion_layers,
                heads: self.fusion_heads,
                mlp_ratio: 1.0,
                mlp_residual: false,
                ln_eps: 1e-5,
            },
            decoder_width: self.decoder_width,
        }
    }

    /// Synthetic dataset settings implied by this run.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            clips: self.synth_clips,
            frames: self.synth_frames,
            h: self.synth_h,
            w: self.synth_w,
            seed: self.seed,
        }
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{key} must be true or false, got {value:?}")),
    }
}
