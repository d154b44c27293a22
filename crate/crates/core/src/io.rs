//! File formats and dataset plumbing.
//!
//! Everything on disk is a simple, exactly specified format: binary PPM
//! frames, binary PGM maps, the standard `.flo` optical-flow container,
//! JSONL point annotations, and a two-file checkpoint (text manifest plus
//! flat 32-bit payload). Readers reject malformed input with positioned
//! errors; every writer/reader pair round-trips byte for byte.
//!
//! A synthetic clip generator provides deterministic desk-scale data: a
//! textured shape translating over a textured background with exact
//! masks, flow fields, and point annotations.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::supervision::{PointAnnotation, PseudoLabel};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad flow magic {got} at byte 0, expected 202021.25")]
    FloMagic { path: PathBuf, got: f32 },
    #[error("{path}: flow dimensions {w}x{h} at byte 4 are not usable")]
    FloDims { path: PathBuf, w: i32, h: i32 },
    #[error("{path}: truncated at byte {offset}, needed {needed} more")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },
    #[error("{path}: byte {offset}: {msg}")]
    Pnm {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("{path}: line {line}: {msg}")]
    Points {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{path}: {msg}")]
    Dataset { path: PathBuf, msg: String },
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

// -- PNM images --------------------------------------------------------------

struct PnmHeader {
    w: usize,
    h: usize,
    data_start: usize,
}

fn parse_pnm_header(path: &Path, bytes: &[u8], magic: &str) -> Result<PnmHeader, IoError> {
    let err = |offset: usize, msg: String| IoError::Pnm {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(err(0, format!("expected {magic} header")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and # comments may separate the header fields.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(err(start, "expected a decimal header field".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are utf8");
        *field = text
            .parse()
            .map_err(|_| err(start, format!("header field {text} out of range")))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(pos, format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(err(2, format!("degenerate image extent {w}x{h}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(pos, "expected single whitespace before pixel data".into()));
    }
    Ok(PnmHeader {
        w,
        h,
        data_start: pos + 1,
    })
}

fn pnm_payload<'a>(
    path: &Path,
    bytes: &'a [u8],
    header: &PnmHeader,
    len: usize,
) -> Result<&'a [u8], IoError> {
    let end = header.data_start + len;
    if bytes.len() < end {
        return Err(IoError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: end - bytes.len(),
        });
    }
    Ok(&bytes[header.data_start..end])
}

/// Reads a binary PPM into a `[3, h, w]` image with values in [0, 1].
pub fn read_ppm(path: &Path) -> Result<Tensor<f64>, IoError> {
    let bytes = read_file(path)?;
    let header = parse_pnm_header(path, &bytes, "P6")?;
    let (w, h) = (header.w, header.h);
    let data = pnm_payload(path, &bytes, &header, 3 * w * h)?;
    let mut out = vec![0.0f64; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            out[c * w * h + i] = data[3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::from_vec(&[3, h, w], out).expect("sized by header"))
}

/// Writes a `[3, h, w]` image with values in [0, 1] as binary PPM.
pub fn write_ppm(path: &Path, img: &Tensor<f64>) -> Result<(), IoError> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..w * h {
        for c in 0..3 {
            bytes.push(quantize(d[c * w * h + i]));
        }
    }
    write_file(path, &bytes)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a binary PGM as raw bytes plus its extent.
pub fn read_pgm(path: &Path) -> Result<(Vec<u8>, usize, usize), IoError> {
    let bytes = read_file(path)?;
    let header = parse_pnm_header(path, &bytes, "P5")?;
    let data = pnm_payload(path, &bytes, &header, header.w * header.h)?;
    Ok((data.to_vec(), header.h, header.w))
}

/// Writes raw bytes as binary PGM.
pub fn write_pgm(path: &Path, data: &[u8], h: usize, w: usize) -> Result<(), IoError> {
    assert_eq!(data.len(), h * w, "pgm payload must match extent");
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(data);
    write_file(path, &bytes)
}

/// Reads a PGM of byte values into a unit-range map.
pub fn read_pgm_unit(path: &Path) -> Result<(Vec<f64>, usize, usize), IoError> {
    let (data, h, w) = read_pgm(path)?;
    Ok((data.iter().map(|&v| v as f64 / 255.0).collect(), h, w))
}

/// Writes a tri-level pseudo-label map.
pub fn write_label(path: &Path, label: &PseudoLabel) -> Result<(), IoError> {
    write_pgm(path, &label.map, label.h, label.w)
}

/// Reads a tri-level pseudo-label map back.
pub fn read_label(path: &Path) -> Result<PseudoLabel, IoError> {
    let (map, h, w) = read_pgm(path)?;
    Ok(PseudoLabel { h, w, map })
}

// -- optical flow ------------------------------------------------------------

pub const FLO_MAGIC: f32 = 202021.25;

/// Dense 2-channel flow field; `uv` interleaves (u, v) per pixel,
/// row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub h: usize,
    pub w: usize,
    pub uv: Vec<f32>,
}

impl Flow {
    pub fn zeros(h: usize, w: usize) -> Self {
        Flow {
            h,
            w,
            uv: vec![0.0; 2 * h * w],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = 2 * (y * self.w + x);
        (self.uv[i], self.uv[i + 1])
    }

    pub fn set(&mut self, x: usize, y: usize, u: f32, v: f32) {
        let i = 2 * (y * self.w + x);
        self.uv[i] = u;
        self.uv[i + 1] = v;
    }
}

/// Reads a `.flo` file: magic float, width, height, then interleaved
/// 32-bit (u, v) pairs, all little-endian.
pub fn read_flo(path: &Path) -> Result<Flow, IoError> {
    let bytes = read_file(path)?;
    let need = |offset: usize, n: usize| -> Result<(), IoError> {
        if bytes.len() < offset + n {
            Err(IoError::Truncated {
                path: path.to_path_buf(),
                offset: bytes.len(),
                needed: offset + n - bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(0, 12)?;
    let magic = f32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if magic != FLO_MAGIC {
        return Err(IoError::FloMagic {
            path: path.to_path_buf(),
            got: magic,
        });
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || w > 1 << 20 || h > 1 << 20 {
        return Err(IoError::FloDims {
            path: path.to_path_buf(),
            w,
            h,
        });
    }
    let (w, h) = (w as usize, h as usize);
    need(12, 8 * w * h)?;
    let uv = bytes[12..12 + 8 * w * h]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Flow { h, w, uv })
}

pub fn write_flo(path: &Path, flow: &Flow) -> Result<(), IoError> {
    assert_eq!(flow.uv.len(), 2 * flow.h * flow.w);
    let mut bytes = Vec::with_capacity(12 + 4 * flow.uv.len());
    bytes.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    bytes.extend_from_slice(&(flow.w as i32).to_le_bytes());
    bytes.extend_from_slice(&(flow.h as i32).to_le_bytes());
    for v in &flow.uv {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

/// Color-wheel encoding of a flow field: direction becomes hue, magnitude
/// becomes saturation (normalized by the frame maximum). A frame with no
/// motion encodes as uniform mid-gray.
pub fn flow_to_rgb(flow: &Flow) -> Tensor<f64> {
    let plane = flow.h * flow.w;
    let mut mags = vec![0.0f64; plane];
    let mut peak = 0.0f64;
    for i in 0..plane {
        let (u, v) = (flow.uv[2 * i] as f64, flow.uv[2 * i + 1] as f64);
        mags[i] = (u * u + v * v).sqrt();
        peak = peak.max(mags[i]);
    }
    let mut out = vec![0.5f64; 3 * plane];
    if peak > 0.0 {
        for i in 0..plane {
            let (u, v) = (flow.uv[2 * i] as f64, flow.uv[2 * i + 1] as f64);
            let hue = (v.atan2(u) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
            let (r, g, b) = hsv_to_rgb(hue, mags[i] / peak, 1.0);
            out[i] = r;
            out[plane + i] = g;
            out[2 * plane + i] = b;
        }
    }
    Tensor::from_vec(&[3, flow.h, flow.w], out).expect("sized by flow")
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h * 6.0) % 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

// -- point annotations -------------------------------------------------------

/// Reads JSONL point annotations, one frame per line.
pub fn read_points(path: &Path) -> Result<Vec<PointAnnotation>, IoError> {
    let bytes = read_file(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ann: PointAnnotation =
            serde_json::from_str(line).map_err(|e| IoError::Points {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_points(path: &Path, anns: &[PointAnnotation]) -> Result<(), IoError> {
    let mut bytes = Vec::new();
    for ann in anns {
        serde_json::to_writer(&mut bytes, ann).expect("annotations serialize");
        bytes.push(b'\n');
    }
    write_file(path, &bytes)
}

// -- checkpoints -------------------------------------------------------------

use crate::nn::ParamSet;

/// Writes `<prefix>.manifest` (text) and `<prefix>.bin` (flat little-endian
/// 32-bit values). Values from a 64-bit parameter set are narrowed.
pub fn save_params<F: Scalar>(prefix: &Path, ps: &ParamSet<F>) -> Result<(), IoError> {
    let mut manifest = String::from("ckpt-v1\n");
    manifest.push_str(&format!("params {}\n", ps.len()));
    manifest.push_str(&format!("payload {}\n", ps.numel()));
    let mut payload = Vec::with_capacity(4 * ps.numel());
    let mut offset = 0usize;
    for (name, t) in ps.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name} {} {offset}\n", dims.join("x")));
        for &v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    write_file(&prefix.with_extension("manifest"), manifest.as_bytes())?;
    write_file(&prefix.with_extension("bin"), &payload)
}

/// Loads a checkpoint saved by [`save_params`] into a parameter set with
/// identical names and shapes.
pub fn load_params<F: Scalar>(prefix: &Path, ps: &mut ParamSet<F>) -> Result<(), IoError> {
    let man_path = prefix.with_extension("manifest");
    let err = |msg: String| IoError::Checkpoint {
        path: man_path.clone(),
        msg,
    };
    let text = String::from_utf8(read_file(&man_path)?)
        .map_err(|_| err("manifest is not utf8".into()))?;
    let mut lines = text.lines();
    if lines.next() != Some("ckpt-v1") {
        return Err(err("missing ckpt-v1 header".into()));
    }
    let field = |line: Option<&str>, key: &str| -> Result<usize, IoError> {
        let line = line.ok_or_else(|| err(format!("missing {key} line")))?;
        let rest = line
            .strip_prefix(key)
            .ok_or_else(|| err(format!("expected {key} line, got {line:?}")))?;
        rest.trim()
            .parse()
            .map_err(|_| err(format!("bad {key} count {rest:?}")))
    };
    let params = field(lines.next(), "params")?;
    let payload_len = field(lines.next(), "payload")?;
    if params != ps.len() {
        return Err(err(format!(
            "checkpoint has {params} parameters, model has {}",
            ps.len()
        )));
    }
    if payload_len != ps.numel() {
        return Err(err(format!(
            "checkpoint payload {payload_len} values, model needs {}",
            ps.numel()
        )));
    }
    let bin_path = prefix.with_extension("bin");
    let payload = read_file(&bin_path)?;
    if payload.len() != 4 * payload_len {
        return Err(IoError::Truncated {
            path: bin_path,
            offset: payload.len(),
            needed: 4 * payload_len - payload.len().min(4 * payload_len),
        });
    }
    let mut seen = 0usize;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (name, dims, offset) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some(n), Some(d), Some(o), None) => (n, d, o),
            _ => return Err(err(format!("malformed manifest line {line:?}"))),
        };
        let id = ps
            .find(name)
            .ok_or_else(|| err(format!("parameter {name} not in model")))?;
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse().map_err(|_| err(format!("bad dims {dims:?}"))))
            .collect::<Result<_, _>>()?;
        let offset: usize = offset
            .parse()
            .map_err(|_| err(format!("bad offset in line {line:?}")))?;
        let t = ps.get_mut(id);
        if t.shape() != shape {
            return Err(err(format!(
                "parameter {name} has shape {:?} in model, {shape:?} in checkpoint",
                t.shape()
            )));
        }
        if offset + t.numel() > payload_len {
            return Err(err(format!("parameter {name} overruns the payload")));
        }
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            let at = 4 * (offset + k);
            let raw = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
            *v = F::c(raw as f64);
        }
        seen += 1;
    }
    if seen != params {
        return Err(err(format!("manifest lists {seen} parameters, header says {params}")));
    }
    Ok(())
}

// -- synthetic clips ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub clips: usize,
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            clips: 8,
            frames: 4,
            h: 64,
            w: 64,
            seed: 7,
        }
    }
}

/// One generated clip, fully in memory.
pub struct SynthClip {
    pub frames: Vec<Tensor<f64>>,
    pub flows: Vec<Flow>,
    /// Ground-truth masks, 0 or 255 per pixel.
    pub masks: Vec<Vec<u8>>,
    pub points: Vec<PointAnnotation>,
}

#[derive(Clone, Copy)]
enum Shape {
    Disk { r: i64 },
    Rect { rx: i64, ry: i64 },
}

impl Shape {
    fn contains(&self, cx: i64, cy: i64, x: i64, y: i64) -> bool {
        match *self {
            Shape::Disk { r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Shape::Rect { rx, ry } => (x - cx).abs() <= rx && (y - cy).abs() <= ry,
        }
    }

    fn reach(&self) -> i64 {
        match *self {
            Shape::Disk { r } => r,
            Shape::Rect { rx, ry } => rx.max(ry),
        }
    }
}

const TEXTURE_NOISE: f64 = 0.02;

fn texture(rng: &mut ChaCha20Rng, base: [f64; 3]) -> [f64; 3] {
    [
        (base[0] + rng.gen_range(-TEXTURE_NOISE..=TEXTURE_NOISE)).clamp(0.0, 1.0),
        (base[1] + rng.gen_range(-TEXTURE_NOISE..=TEXTURE_NOISE)).clamp(0.0, 1.0),
        (base[2] + rng.gen_range(-TEXTURE_NOISE..=TEXTURE_NOISE)).clamp(0.0, 1.0),
    ]
}

/// Generates one clip: a textured shape translating at constant velocity
/// over a textured background. Flow at shape pixels equals the per-frame
/// displacement; the foreground point is the mask centroid.
pub fn generate_clip(rng: &mut ChaCha20Rng, frames: usize, h: usize, w: usize) -> SynthClip {
    assert!(h >= 16 && w >= 16, "synthetic clips need at least 16x16");
    let color = |rng: &mut ChaCha20Rng| {
        [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ]
    };
    let bg: [f64; 3] = color(rng);
    let fg: [f64; 3] = loop {
        let c = color(rng);
        let d2: f64 = c.iter().zip(&bg).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2.sqrt() >= 0.35 {
            break c;
        }
    };
    let span = (frames as i64 - 1).max(0);
    let min_extent = h.min(w) as i64;
    // A shape of this reach moving one pixel per frame always fits with a
    // one-pixel margin on both sides.
    let reach_limit = (min_extent - 3 - span) / 2;
    let max_reach = (min_extent / 5).max(4).min(reach_limit);
    assert!(
        max_reach >= 2,
        "clip of {frames} frames does not fit a {h}x{w} canvas"
    );
    let min_reach = (max_reach / 2).max(2);
    let shape = if rng.gen_bool(0.5) {
        Shape::Disk {
            r: rng.gen_range(min_reach..=max_reach),
        }
    } else {
        Shape::Rect {
            rx: rng.gen_range(min_reach..=max_reach),
            ry: rng.gen_range(min_reach..=max_reach),
        }
    };
    let reach = shape.reach();
    let fits = |extent: i64, d: i64| {
        reach + 1 + (-d * span).max(0) <= extent - 2 - reach - (d * span).max(0)
    };
    let (dx, dy) = loop {
        let d = (rng.gen_range(-2i64..=2), rng.gen_range(-2i64..=2));
        if d != (0, 0) && fits(w as i64, d.0) && fits(h as i64, d.1) {
            break d;
        }
    };
    let mut sample_start = |extent: i64, d: i64| {
        let lo = reach + 1 + (-d * span).max(0);
        let hi = extent - 2 - reach - (d * span).max(0);
        rng.gen_range(lo..=hi)
    };
    let cx0 = sample_start(w as i64, dx);
    let cy0 = sample_start(h as i64, dy);

    let mut clip = SynthClip {
        frames: Vec::with_capacity(frames),
        flows: Vec::with_capacity(frames),
        masks: Vec::with_capacity(frames),
        points: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let cx = cx0 + dx * t as i64;
        let cy = cy0 + dy * t as i64;
        let mut img = vec![0.0f64; 3 * h * w];
        let mut mask = vec![0u8; h * w];
        let mut flow = Flow::zeros(h, w);
        let mut sx = 0usize;
        let mut sy = 0usize;
        let mut area = 0usize;
        for y in 0..h {
            for x in 0..w {
                let inside = shape.contains(cx, cy, x as i64, y as i64);
                let color = texture(rng, if inside { fg } else { bg });
                for c in 0..3 {
                    img[c * h * w + y * w + x] = color[c];
                }
                if inside {
                    mask[y * w + x] = 255;
                    flow.set(x, y, dx as f32, dy as f32);
                    sx += x;
                    sy += y;
                    area += 1;
                }
            }
        }
        let fg_point = [
            (sx as f64 / area as f64).round() as usize,
            (sy as f64 / area as f64).round() as usize,
        ];
        debug_assert_eq!(mask[fg_point[1] * w + fg_point[0]], 255);
        let bg_point = loop {
            let p = [rng.gen_range(0..w), rng.gen_range(0..h)];
            if mask[p[1] * w + p[0]] == 0 {
                break p;
            }
        };
        clip.frames
            .push(Tensor::from_vec(&[3, h, w], img).expect("sized"));
        clip.flows.push(flow);
        clip.masks.push(mask);
        clip.points.push(PointAnnotation {
            frame: format!("f{t:03}"),
            fg: vec![fg_point],
            bg: vec![bg_point],
        });
    }
    clip
}

/// Writes a full synthetic dataset tree under `root`:
/// `clip_NNN/{frames/fNNN.ppm, flow/fNNN.flo, gt/fNNN.pgm, points.jsonl}`.
/// Identical configs produce identical bytes.
pub fn synth_dataset(cfg: &SynthConfig, root: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut dirs = Vec::with_capacity(cfg.clips);
    for c in 0..cfg.clips {
        let clip = generate_clip(&mut rng, cfg.frames, cfg.h, cfg.w);
        let dir = root.join(format!("clip_{c:03}"));
        for sub in ["frames", "flow", "gt"] {
            fs::create_dir_all(dir.join(sub)).map_err(|source| IoError::File {
                path: dir.join(sub),
                source,
            })?;
        }
        for t in 0..cfg.frames {
            write_ppm(&dir.join(format!("frames/f{t:03}.ppm")), &clip.frames[t])?;
            write_flo(&dir.join(format!("flow/f{t:03}.flo")), &clip.flows[t])?;
            write_pgm(
                &dir.join(format!("gt/f{t:03}.pgm")),
                &clip.masks[t],
                cfg.h,
                cfg.w,
            )?;
        }
        write_points(&dir.join("points.jsonl"), &clip.points)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

// -- dataset scanning --------------------------------------------------------

/// One clip loaded from disk.
pub struct LoadedClip {
    pub dir: PathBuf,
    pub names: Vec<String>,
    pub frames: Vec<Tensor<f64>>,
    pub flows: Vec<Flow>,
    pub points: Vec<PointAnnotation>,
    pub gt: Vec<Option<Tensor<f64>>>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, IoError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|source| IoError::File {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| IoError::File {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Lists `clip_*` directories under a dataset root, sorted by name.
pub fn scan_clips(root: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut out = Vec::new();
    let entries = fs::read_dir(root).map_err(|source| IoError::File {
        path: root.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| IoError::File {
            path: root.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        let is_clip = path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("clip_"));
        if is_clip {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(IoError::Dataset {
            path: root.to_path_buf(),
            msg: "no clip_* directories found".into(),
        });
    }
    Ok(out)
}

/// Loads one clip directory: frames, flow, points, and ground truth when
/// present. Frames and flows are matched by sort order and must agree in
/// count and extent.
pub fn load_clip(dir: &Path) -> Result<LoadedClip, IoError> {
    let frame_paths = sorted_files(&dir.join("frames"), "ppm")?;
    if frame_paths.is_empty() {
        return Err(IoError::Dataset {
            path: dir.to_path_buf(),
            msg: "clip has no frames".into(),
        });
    }
    let flow_paths = sorted_files(&dir.join("flow"), "flo")?;
    if flow_paths.len() != frame_paths.len() {
        return Err(IoError::Dataset {
            path: dir.to_path_buf(),
            msg: format!(
                "{} frames but {} flow files",
                frame_paths.len(),
                flow_paths.len()
            ),
        });
    }
    let mut names = Vec::new();
    let mut frames = Vec::new();
    let mut flows = Vec::new();
    for (fp, lp) in frame_paths.iter().zip(&flow_paths) {
        let img = read_ppm(fp)?;
        let flow = read_flo(lp)?;
        if flow.h != img.shape()[1] || flow.w != img.shape()[2] {
            return Err(IoError::Dataset {
                path: lp.clone(),
                msg: format!(
                    "flow extent {}x{} does not match frame {}x{}",
                    flow.w,
                    flow.h,
                    img.shape()[2],
                    img.shape()[1]
                ),
            });
        }
        names.push(
            fp.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string(),
        );
        frames.push(img);
        flows.push(flow);
    }
    let points_path = dir.join("points.jsonl");
    let points = if points_path.exists() {
        read_points(&points_path)?
    } else {
        Vec::new()
    };
    let gt_dir = dir.join("gt");
    let mut gt = Vec::with_capacity(names.len());
    for name in &names {
        let p = gt_dir.join(format!("{name}.pgm"));
        if p.exists() {
            let (m, h, w) = read_pgm_unit(&p)?;
            gt.push(Some(Tensor::from_vec(&[h, w], m).expect("sized")));
        } else {
            gt.push(None);
        }
    }
    Ok(LoadedClip {
        dir: dir.to_path_buf(),
        names,
        frames,
        flows,
        points,
        gt,
    })
}

/// Writes a saliency map in [0, 1] as an 8-bit PGM.
pub fn write_saliency(path: &Path, map: &[f64], h: usize, w: usize) -> Result<(), IoError> {
    let bytes: Vec<u8> = map.iter().map(|&v| quantize(v)).collect();
    write_pgm(path, &bytes, h, w)
}

/// Appends one line to a log file, creating it on first use.
pub fn append_line(path: &Path, line: &str) -> Result<(), IoError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| IoError::File {
            path: path.to_path_buf(),
            source,
        })?;
    writeln!(f, "{line}").map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use tempfile::tempdir;

    #[test]
    fn flo_fixture_and_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&202021.25f32.to_le_bytes());
        bytes.extend_from_slice(&2i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        for v in [1.0f32, 0.0, 0.0, 1.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        let flow = read_flo(&path).unwrap();
        assert_eq!((flow.w, flow.h), (2, 1));
        assert_eq!(flow.at(0, 0), (1.0, 0.0));
        assert_eq!(flow.at(1, 0), (0.0, 1.0));

        let out = dir.path().join("b.flo");
        write_flo(&out, &flow).unwrap();
        assert_eq!(fs::read(&out).unwrap(), bytes, "round trip must be bit-exact");
    }

    #[test]
    fn flo_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&1i32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_flo(&path), Err(IoError::FloMagic { .. })));

        let mut ok = Vec::new();
        ok.extend_from_slice(&202021.25f32.to_le_bytes());
        ok.extend_from_slice(&4i32.to_le_bytes());
        ok.extend_from_slice(&4i32.to_le_bytes());
        ok.extend_from_slice(&[0u8; 16]); // far short of 4*4*8 bytes
        fs::write(&path, &ok).unwrap();
        match read_flo(&path) {
            Err(IoError::Truncated { offset, needed, .. }) => {
                assert_eq!(offset, 28);
                assert_eq!(needed, 12 + 128 - 28);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn ppm_and_pgm_round_trips() {
        let dir = tempdir().unwrap();
        let mut rng = StdRng::seed_from_u64(1);
        let img = Tensor::from_fn(&[3, 5, 7], |_| {
            rand::Rng::gen_range(&mut rng, 0..=255) as f64 / 255.0
        });
        let p = dir.path().join("img.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
        write_ppm(&dir.path().join("img2.ppm"), &back).unwrap();
        assert_eq!(
            fs::read(dir.path().join("img.ppm")).unwrap(),
            fs::read(dir.path().join("img2.ppm")).unwrap()
        );

        let g = dir.path().join("map.pgm");
        write_pgm(&g, &vec![128u8; 12], 3, 4).unwrap();
        let (data, h, w) = read_pgm(&g).unwrap();
        assert_eq!((h, w), (3, 4));
        assert!(data.iter().all(|&v| v == 128));
    }

    #[test]
    fn pnm_reader_handles_comments_and_rejects_garbage() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n2 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        fs::write(&p, &bytes).unwrap();
        let (data, h, w) = read_pgm(&p).unwrap();
        assert_eq!((h, w, data), (2, 2, vec![1, 2, 3, 4]));

        fs::write(&p, b"P5\n2 2\n65535\n....").unwrap();
        assert!(matches!(read_pgm(&p), Err(IoError::Pnm { .. })));
        fs::write(&p, b"P6\n2 2\n255\nxx").unwrap();
        assert!(matches!(read_ppm(&p), Err(IoError::Truncated { .. })));
    }

    #[test]
    fn flow_colors_zero_gray_and_opposites_complementary() {
        let zero = Flow::zeros(3, 3);
        let rgb = flow_to_rgb(&zero);
        assert!(rgb.data().iter().all(|&v| v == 0.5));

        let mut flow = Flow::zeros(1, 2);
        flow.set(0, 0, 1.0, 0.0);
        flow.set(1, 0, -1.0, 0.0);
        let rgb = flow_to_rgb(&flow);
        let px = |i: usize| [rgb.data()[i], rgb.data()[2 + i], rgb.data()[4 + i]];
        // Rightward motion lands mid-wheel (cyan), leftward at the wrap (red).
        assert_eq!(px(0), [0.0, 1.0, 1.0]);
        assert_eq!(px(1), [1.0, 0.0, 0.0]);
        assert!(rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn points_round_trip_and_line_errors() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("points.jsonl");
        let anns = vec![
            PointAnnotation {
                frame: "f000".into(),
                fg: vec![[3, 4]],
                bg: vec![[0, 0]],
            },
            PointAnnotation {
                frame: "f001".into(),
                fg: vec![[5, 6], [7, 8]],
                bg: vec![[1, 1]],
            },
        ];
        write_points(&p, &anns).unwrap();
        assert_eq!(read_points(&p).unwrap(), anns);

        fs::write(&p, b"{\"frame\":\"a\",\"fg\":[[1,1]],\"bg\":[[0,0]]}\nnot json\n").unwrap();
        match read_points(&p) {
            Err(IoError::Points { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected line error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let mut rng = StdRng::seed_from_u64(2);
        let mut ps = ParamSet::<f32>::new();
        ps.add("a.w", crate::nn::trunc_normal(&[3, 4], 0.5, &mut rng));
        ps.add("a.b", crate::nn::trunc_normal(&[4], 0.5, &mut rng));
        ps.add("deep.layer.gain", Tensor::full(&[7], 1.25f32));
        save_params(&prefix, &ps).unwrap();

        let mut restored = ParamSet::<f32>::new();
        restored.add("a.w", Tensor::zeros(&[3, 4]));
        restored.add("a.b", Tensor::zeros(&[4]));
        restored.add("deep.layer.gain", Tensor::zeros(&[7]));
        load_params(&prefix, &mut restored).unwrap();
        for (id_a, id_b) in ps.ids().zip(restored.ids()) {
            assert_eq!(ps.get(id_a).data(), restored.get(id_b).data());
        }

        let prefix2 = dir.path().join("ckpt2");
        save_params(&prefix2, &restored).unwrap();
        assert_eq!(
            fs::read(prefix.with_extension("bin")).unwrap(),
            fs::read(prefix2.with_extension("bin")).unwrap()
        );
        assert_eq!(
            fs::read(prefix.with_extension("manifest")).unwrap(),
            fs::read(prefix2.with_extension("manifest")).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_mismatched_model() {
        let dir = tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let mut ps = ParamSet::<f32>::new();
        ps.add("a.w", Tensor::full(&[2, 2], 1.0f32));
        save_params(&prefix, &ps).unwrap();

        let mut other = ParamSet::<f32>::new();
        other.add("b.w", Tensor::zeros(&[2, 2]));
        assert!(matches!(
            load_params(&prefix, &mut other),
            Err(IoError::Checkpoint { .. })
        ));
        let mut wrong_shape = ParamSet::<f32>::new();
        wrong_shape.add("a.w", Tensor::zeros(&[4]));
        assert!(matches!(
            load_params(&prefix, &mut wrong_shape),
            Err(IoError::Checkpoint { .. })
        ));
    }

    #[test]
    fn synth_is_deterministic_and_self_consistent() {
        let cfg = SynthConfig {
            clips: 2,
            frames: 3,
            h: 32,
            w: 32,
            seed: 11,
        };
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        synth_dataset(&cfg, d1.path()).unwrap();
        synth_dataset(&cfg, d2.path()).unwrap();
        for clip in ["clip_000", "clip_001"] {
            for t in 0..3 {
                for rel in [
                    format!("{clip}/frames/f{t:03}.ppm"),
                    format!("{clip}/flow/f{t:03}.flo"),
                    format!("{clip}/gt/f{t:03}.pgm"),
                ] {
                    assert_eq!(
                        fs::read(d1.path().join(&rel)).unwrap(),
                        fs::read(d2.path().join(&rel)).unwrap(),
                        "{rel} must be reproducible"
                    );
                }
            }
            assert_eq!(
                fs::read(d1.path().join(clip).join("points.jsonl")).unwrap(),
                fs::read(d2.path().join(clip).join("points.jsonl")).unwrap()
            );
        }

        let loaded = load_clip(&d1.path().join("clip_000")).unwrap();
        assert_eq!(loaded.frames.len(), 3);
        for t in 0..3 {
            let mask = loaded.gt[t].as_ref().unwrap();
            let flow = &loaded.flows[t];
            let fgp = loaded.points[t].fg[0];
            assert!(mask.data()[fgp[1] * 32 + fgp[0]] > 0.5, "centroid inside mask");
            let bgp = loaded.points[t].bg[0];
            assert!(mask.data()[bgp[1] * 32 + bgp[0]] < 0.5, "bg point outside mask");
            // Flow is the constant displacement on the mask, zero off it.
            let mut displacement = None;
            for y in 0..32 {
                for x in 0..32 {
                    let (u, v) = flow.at(x, y);
                    if mask.data()[y * 32 + x] > 0.5 {
                        let d = displacement.get_or_insert((u, v));
                        assert_eq!(*d, (u, v));
                        assert!((u, v) != (0.0, 0.0));
                    } else {
                        assert_eq!((u, v), (0.0, 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn scan_finds_sorted_clips() {
        let dir = tempdir().unwrap();
        for name in ["clip_002", "clip_000", "clip_001", "notes"] {
            fs::create_dir(dir.path().join(name)).unwrap();
        }
        let clips = scan_clips(dir.path()).unwrap();
        let names: Vec<_> = clips
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap().to_string())
            .collect();
        assert_eq!(names, ["clip_000", "clip_001", "clip_002"]);
        assert!(scan_clips(&dir.path().join("notes")).is_err());
    }
}
