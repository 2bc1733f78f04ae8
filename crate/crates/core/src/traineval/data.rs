//! Synthetic misaligned tracklets, clip sampling and on-disk export.
//!
//! Each identity is a procedurally drawn figure (head, patterned torso,
//! legs, optional bag) on a grey canvas. Frames are crops around the figure
//! whose position and size are jittered per frame, with a smooth horizontal
//! sway of the lower body, so consecutive frames are spatially misaligned.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Tensor};

/// Per-frame misalignment amplitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Largest crop displacement in canvas pixels, per axis.
    pub max_shift: f64,
    /// Crop size multiplier range.
    pub scale_range: [f64; 2],
    /// Peak horizontal sway of the lower body in canvas pixels.
    pub deformation: f64,
}

impl Jitter {
    pub fn none() -> Jitter {
        Jitter { max_shift: 0.0, scale_range: [1.0, 1.0], deformation: 0.0 }
    }
}

impl Default for Jitter {
    fn default() -> Jitter {
        Jitter { max_shift: 8.0, scale_range: [0.75, 1.25], deformation: 4.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub tracklets_per_id: usize,
    pub frames_per_tracklet: usize,
    /// Canvas `[height, width]`.
    pub canvas: [usize; 2],
    /// Nominal crop `[height, width]` around the figure.
    pub crop: [usize; 2],
    /// Working resolution `[height, width]` of the produced frames.
    pub size: [usize; 2],
    pub jitter: Jitter,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            num_identities: 16,
            tracklets_per_id: 4,
            frames_per_tracklet: 40,
            canvas: [80, 40],
            crop: [64, 32],
            size: [32, 16],
            jitter: Jitter::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [self.num_identities, self.tracklets_per_id, self.frames_per_tracklet];
        if sizes.contains(&0) || self.canvas.contains(&0) || self.crop.contains(&0) || self.size.contains(&0) {
            return Err(Error::config("identity, tracklet, frame and image sizes must be positive"));
        }
        if self.crop[0] > self.canvas[0] || self.crop[1] > self.canvas[1] {
            return Err(Error::config(format!("crop {:?} exceeds canvas {:?}", self.crop, self.canvas)));
        }
        let [lo, hi] = self.jitter.scale_range;
        if !(lo > 0.5 && hi < 1.5 && lo <= hi) {
            return Err(Error::config(format!("scale range [{lo}, {hi}] must lie inside (0.5, 1.5)")));
        }
        if !(self.jitter.max_shift >= 0.0 && self.jitter.deformation >= 0.0) {
            return Err(Error::config("jitter amplitudes must be non-negative"));
        }
        Ok(())
    }
}

/// One tracklet: frames of shape `(C, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackletSample {
    pub frames: Vec<Array3<f64>>,
    pub person_id: usize,
    pub camera_id: usize,
    pub tracklet_id: usize,
}

impl TrackletSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::invalid(format!("tracklet {} has no frames", self.tracklet_id)))?;
        if self.frames.iter().any(|f| f.shape() != first.shape()) {
            return Err(Error::shape(format!("tracklet {} mixes frame shapes", self.tracklet_id)));
        }
        Ok(())
    }

    /// Stacks the frames at `indices` into `(T, 3, H, W)`, repeating single
    /// channel frames and mirroring horizontally when `flip` is set.
    pub fn clip(&self, indices: &[usize], flip: bool) -> Result<Array> {
        self.validate()?;
        let (c, h, w) = self.frames[0].dim();
        if c != 1 && c != 3 {
            return Err(Error::shape(format!("frames need 1 or 3 channels, got {c}")));
        }
        let mut out = Array::zeros(ndarray::IxDyn(&[indices.len(), 3, h, w]));
        for (t, &i) in indices.iter().enumerate() {
            let frame = self
                .frames
                .get(i)
                .ok_or_else(|| Error::invalid(format!("frame {i} outside tracklet of {}", self.len())))?;
            for ch in 0..3 {
                let src = frame.index_axis(ndarray::Axis(0), if c == 1 { 0 } else { ch });
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x };
                        out[[t, ch, y, x]] = (src[[y, sx]] - PIXEL_MEAN) / PIXEL_STD;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Input normalisation applied by [`TrackletSample::clip`].
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

/// Stacks equally long clips `(T, 3, H, W)` into a batch `(N, T, 3, H, W)`.
pub fn batch(clips: &[Array]) -> Result<Tensor> {
    let views: Vec<_> = clips.iter().map(|c| c.view()).collect();
    let stacked = ndarray::stack(ndarray::Axis(0), &views).map_err(|e| Error::shape(format!("cannot batch clips: {e}")))?;
    Ok(Tensor::new(stacked))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tracklets: Vec<TrackletSample>,
}

impl Dataset {
    pub fn num_frames(&self) -> usize {
        self.tracklets.iter().map(TrackletSample::len).sum()
    }

    /// Sorted distinct person ids.
    pub fn person_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.tracklets.iter().map(|t| t.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Splits off the last `held_out` tracklets of every identity as the
    /// test set; the rest is the training set.
    pub fn split(&self, held_out: usize) -> Result<(Dataset, Dataset)> {
        let (mut train, mut test) = (Dataset::default(), Dataset::default());
        for id in self.person_ids() {
            let own: Vec<&TrackletSample> = self.tracklets.iter().filter(|t| t.person_id == id).collect();
            if own.len() <= held_out {
                return Err(Error::config(format!(
                    "identity {id} has {} tracklets, cannot hold out {held_out}",
                    own.len()
                )));
            }
            let cut = own.len() - held_out;
            train.tracklets.extend(own[..cut].iter().map(|t| (*t).clone()));
            test.tracklets.extend(own[cut..].iter().map(|t| (*t).clone()));
        }
        Ok((train, test))
    }
}

/// Frame indices of one training clip: `clip_len` frames `stride` apart.
/// The clip covers a window of `clip_len · stride` frames whose start is
/// drawn uniformly from the positions that keep the window inside the
/// tracklet. Tracklets no longer than the window start at frame 0 and wrap
/// modulo their length.
pub fn sample_clip<R: Rng + ?Sized>(len: usize, clip_len: usize, stride: usize, rng: &mut R) -> Result<Vec<usize>> {
    if len == 0 {
        return Err(Error::invalid("cannot sample a clip from an empty tracklet"));
    }
    if clip_len == 0 || stride == 0 {
        return Err(Error::invalid("clip length and stride must be positive"));
    }
    let window = clip_len * stride;
    let start = if len > window { rng.random_range(0..len - window) } else { 0 };
    Ok((0..clip_len).map(|k| (start + k * stride) % len).collect())
}

/// Appearance parameters of one synthetic identity.
#[derive(Clone, Debug)]
struct Figure {
    head: f64,
    torso: f64,
    torso_width: f64,
    pattern: usize,
    pattern_freq: f64,
    pattern_contrast: f64,
    upper_legs: f64,
    lower_legs: f64,
    leg_gap: f64,
    bag: Option<(f64, f64)>,
}

impl Figure {
    fn random(rng: &mut ChaCha8Rng, index: usize) -> Figure {
        Figure {
            head: rng.random_range(0.55..0.95),
            torso: rng.random_range(0.1..0.9),
            torso_width: rng.random_range(0.65..0.95),
            pattern: index % 5,
            pattern_freq: rng.random_range(2.0..5.0),
            pattern_contrast: rng.random_range(0.15..0.35),
            upper_legs: rng.random_range(0.05..0.95),
            lower_legs: rng.random_range(0.05..0.95),
            leg_gap: rng.random_range(0.05..0.25),
            bag: rng.random_bool(0.5).then(|| (if rng.random_bool(0.5) { 1.0 } else { -1.0 }, rng.random_range(0.0..1.0))),
        }
    }

    /// Intensity at normalised figure coordinates `v` (0 top, 1 bottom) and
    /// `u` (-1 left edge, 1 right edge), or `None` outside the figure.
    fn sample(&self, v: f64, u: f64) -> Option<f64> {
        let tau = std::f64::consts::TAU;
        if !(0.0..1.0).contains(&v) {
            return None;
        }
        if v < 0.16 {
            let (dv, du) = ((v - 0.08) / 0.08, u / 0.32);
            return (dv * dv + du * du <= 1.0).then_some(self.head);
        }
        if let Some((side, level)) = self.bag {
            if (0.25..0.5).contains(&v) && (u * side) > self.torso_width && (u * side) < self.torso_width + 0.3 {
                return Some(level);
            }
        }
        if v < 0.55 {
            if u.abs() > self.torso_width {
                return None;
            }
            let (a, b) = ((v - 0.16) / 0.39, (u + 1.0) / 2.0);
            let wave = match self.pattern {
                0 => 0.0,
                1 => (tau * self.pattern_freq * a).sin(),
                2 => (tau * self.pattern_freq * b).sin(),
                3 => (tau * self.pattern_freq * (a + b) / 2.0).sin(),
                _ => (tau * self.pattern_freq * a).sin().signum() * (tau * self.pattern_freq * b).sin().signum(),
            };
            return Some((self.torso + self.pattern_contrast * wave).clamp(0.0, 1.0));
        }
        let w = u.abs();
        if w < self.leg_gap || w > 0.6 {
            return None;
        }
        Some(if v < 0.75 { self.upper_legs } else { self.lower_legs })
    }
}

/// Camera-specific background and photometric response.
fn background(camera: usize, y: f64, x: f64) -> f64 {
    let phase = camera as f64 * 1.7;
    0.45 + 0.08 * (0.21 * y + phase).sin() * (0.33 * x - phase).cos()
}

fn camera_gain(camera: usize) -> (f64, f64) {
    if camera % 2 == 0 {
        (1.0, 0.0)
    } else {
        (0.85, 0.08)
    }
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn render_canvas(figure: &Figure, cfg: &SynthConfig, camera: usize, sway: &dyn Fn(f64) -> f64) -> Array2<f64> {
    let [ch, cw] = cfg.canvas;
    let (top, height) = ((ch - cfg.crop[0]) as f64 / 2.0 + cfg.crop[0] as f64 * 0.06, cfg.crop[0] as f64 * 0.88);
    let (centre, half_width) = (cw as f64 / 2.0, cfg.crop[1] as f64 * 0.3);
    let (gain, offset) = camera_gain(camera);
    Array2::from_shape_fn((ch, cw), |(y, x)| {
        let (y, x) = (y as f64 + 0.5, x as f64 + 0.5);
        let v = (y - top) / height;
        let u = (x - centre - sway(v)) / half_width;
        let value = figure.sample(v, u).unwrap_or_else(|| background(camera, y, x));
        (gain * value + offset).clamp(0.0, 1.0)
    })
}

fn render_tracklet(figure: &Figure, cfg: &SynthConfig, person_id: usize, index: usize, tracklet_id: usize) -> TrackletSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(tracklet_id as u64 + 1)));
    let camera_id = index % 2;
    let j = &cfg.jitter;
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let [oh, ow] = cfg.size;
    let frames = (0..cfg.frames_per_tracklet)
        .map(|f| {
            let phase = phase0 + f as f64 * 0.9;
            let amp = j.deformation;
            let sway = move |v: f64| if v > 0.5 { amp * ((v - 0.5) * 2.0) * phase.sin() } else { 0.0 };
            let canvas = render_canvas(figure, cfg, camera_id, &sway);
            let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..hi) } else { lo };
            let (dy, dx) = (uniform(-j.max_shift, j.max_shift), uniform(-j.max_shift, j.max_shift));
            let scale = uniform(j.scale_range[0], j.scale_range[1]);
            let (crop_h, crop_w) = (cfg.crop[0] as f64 * scale, cfg.crop[1] as f64 * scale);
            let (cy, cx) = (cfg.canvas[0] as f64 / 2.0 + dy, cfg.canvas[1] as f64 / 2.0 + dx);
            Array3::from_shape_fn((1, oh, ow), |(_, y, x)| {
                let sy = cy - crop_h / 2.0 + (y as f64 + 0.5) * crop_h / oh as f64 - 0.5;
                let sx = cx - crop_w / 2.0 + (x as f64 + 0.5) * crop_w / ow as f64 - 0.5;
                bilinear(&canvas, sy, sx)
            })
        })
        .collect();
    TrackletSample { frames, person_id, camera_id, tracklet_id }
}

/// Deterministic synthetic dataset; tracklets alternate between two
/// cameras and are rendered in parallel with per-tracklet generators.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let figures: Vec<Figure> = (0..cfg.num_identities).map(|i| Figure::random(&mut rng, i)).collect();
    let tracklets = (0..cfg.num_identities * cfg.tracklets_per_id)
        .into_par_iter()
        .map(|t| {
            let (id, index) = (t / cfg.tracklets_per_id, t % cfg.tracklets_per_id);
            render_tracklet(&figures[id], cfg, id, index, t)
        })
        .collect();
    Ok(Dataset { tracklets })
}

/// Manifest entry for one exported tracklet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub tracklet_id: usize,
    pub person_id: usize,
    pub camera_id: usize,
    /// Frame paths relative to the dataset root.
    pub frames: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: Option<SynthConfig>,
    pub tracklets: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Binary PGM (P5) of a single-channel frame, values clamped to `[0, 1]`.
pub fn encode_pgm(frame: &Array2<f64>) -> Vec<u8> {
    let (h, w) = frame.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(frame.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Array2<f64>> {
    let bad = |m: &str| Error::Format(format!("pgm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("magic must be P5"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit maps are supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Array2::from_shape_vec((h, w), data.iter().map(|&b| b as f64 / 255.0).collect()).map_err(|e| bad(&e.to_string()))
}

/// Writes one directory per tracklet of PGM frames plus `manifest.json`.
pub fn export(dataset: &Dataset, config: Option<&SynthConfig>, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(dataset.tracklets.len());
    for t in &dataset.tracklets {
        t.validate()?;
        let dir = format!("{:04}", t.tracklet_id);
        fs::create_dir_all(root.join(&dir))?;
        let mut frames = Vec::with_capacity(t.len());
        for (i, frame) in t.frames.iter().enumerate() {
            if frame.dim().0 != 1 {
                return Err(Error::invalid("only single-channel frames can be exported as PGM"));
            }
            let rel = format!("{dir}/{i:03}.pgm");
            fs::write(root.join(&rel), encode_pgm(&frame.index_axis(ndarray::Axis(0), 0).to_owned()))?;
            frames.push(rel);
        }
        entries.push(ManifestEntry { tracklet_id: t.tracklet_id, person_id: t.person_id, camera_id: t.camera_id, frames });
    }
    let manifest = Manifest { config: config.cloned(), tracklets: entries };
    fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Reads a dataset written by [`export`].
pub fn import(root: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(root.join(MANIFEST_FILE))?)?;
    let mut tracklets = Vec::with_capacity(manifest.tracklets.len());
    for e in manifest.tracklets {
        let frames = e
            .frames
            .iter()
            .map(|f| Ok(decode_pgm(&fs::read(root.join(f))?)?.insert_axis(ndarray::Axis(0))))
            .collect::<Result<Vec<_>>>()?;
        let t = TrackletSample { frames, person_id: e.person_id, camera_id: e.camera_id, tracklet_id: e.tracklet_id };
        t.validate()?;
        tracklets.push(t);
    }
    Ok(Dataset { tracklets })
}
