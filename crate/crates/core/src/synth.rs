//! Deterministic synthetic feature sequences.
//!
//! Frames are produced directly in embedding space: a static background of
//! random embeddings, moving distractor boxes whose embedding has a fixed
//! cosine similarity to the target, the target box itself (with optional
//! appearance drift), an occluder that covers the target during occlusion
//! windows, and i.i.d. Gaussian noise on every element.
//!
//! Randomness comes from ChaCha8 streams keyed by `(seed, stream)`: scene
//! constants use stream 0, random-walk trajectories one stream per object and
//! frame noise one stream per frame, so any frame can be regenerated on its
//! own.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::binfmt::{self, Blob};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::keyval;
use crate::tensor::FeatureMap;

pub const SEQUENCE_MAGIC: [u8; 4] = *b"TCTS";

const TRAJECTORY_STREAM: u64 = 1 << 32;
const FRAME_STREAM: u64 = 1 << 48;

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// `start + t·velocity`.
    Linear {
        start: (f64, f64),
        velocity: (f64, f64),
    },
    /// `center + amplitude·sin(2πt/period + phase)`, per axis (the column
    /// axis uses cosine so paths are elliptical).
    Sinusoidal {
        center: (f64, f64),
        amplitude: (f64, f64),
        period: f64,
        phase: f64,
    },
    /// Gaussian steps of std `step`, reflected at the grid border.
    RandomWalk { start: (f64, f64), step: f64 },
}

impl Motion {
    fn to_text(&self) -> String {
        match self {
            Motion::Linear { start, velocity } => {
                format!(
                    "linear {} {} {} {}",
                    start.0, start.1, velocity.0, velocity.1
                )
            }
            Motion::Sinusoidal {
                center,
                amplitude,
                period,
                phase,
            } => format!(
                "sinusoidal {} {} {} {} {} {}",
                center.0, center.1, amplitude.0, amplitude.1, period, phase
            ),
            Motion::RandomWalk { start, step } => {
                format!("random_walk {} {} {}", start.0, start.1, step)
            }
        }
    }

    fn parse(words: &[&str]) -> std::result::Result<Motion, String> {
        let nums = |ws: &[&str]| -> std::result::Result<Vec<f64>, String> {
            ws.iter()
                .map(|w| {
                    w.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| format!("`{w}` is not a finite number"))
                })
                .collect()
        };
        let (kind, rest) = words.split_first().ok_or("missing motion kind")?;
        let v = nums(rest)?;
        let want = |n: usize| {
            if v.len() == n {
                Ok(())
            } else {
                Err(format!("{kind} motion takes {n} numbers, got {}", v.len()))
            }
        };
        match *kind {
            "linear" => {
                want(4)?;
                Ok(Motion::Linear {
                    start: (v[0], v[1]),
                    velocity: (v[2], v[3]),
                })
            }
            "sinusoidal" => {
                want(6)?;
                Ok(Motion::Sinusoidal {
                    center: (v[0], v[1]),
                    amplitude: (v[2], v[3]),
                    period: v[4],
                    phase: v[5],
                })
            }
            "random_walk" => {
                want(3)?;
                Ok(Motion::RandomWalk {
                    start: (v[0], v[1]),
                    step: v[2],
                })
            }
            other => Err(format!("unknown motion `{other}`")),
        }
    }

    /// Continuous centers for frames `0..frames`, kept within
    /// `[lo, hi_r]×[lo, hi_c]` only for random walks.
    fn trajectory(&self, frames: usize, bounds: Bounds, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
        match *self {
            Motion::Linear { start, velocity } => (0..frames)
                .map(|t| {
                    let t = t as f64;
                    (start.0 + t * velocity.0, start.1 + t * velocity.1)
                })
                .collect(),
            Motion::Sinusoidal {
                center,
                amplitude,
                period,
                phase,
            } => (0..frames)
                .map(|t| {
                    let a = std::f64::consts::TAU * t as f64 / period + phase;
                    (
                        center.0 + amplitude.0 * a.sin(),
                        center.1 + amplitude.1 * a.cos(),
                    )
                })
                .collect(),
            Motion::RandomWalk { start, step } => {
                let mut p = start;
                let mut out = Vec::with_capacity(frames);
                for t in 0..frames {
                    if t > 0 {
                        let dr: f64 = rng.sample(StandardNormal);
                        let dc: f64 = rng.sample(StandardNormal);
                        p = (
                            reflect(p.0 + step * dr, bounds.lo, bounds.hi_r),
                            reflect(p.1 + step * dc, bounds.lo, bounds.hi_c),
                        );
                    }
                    out.push(p);
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Bounds {
    lo: f64,
    hi_r: f64,
    hi_c: f64,
}

fn reflect(mut v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    let span = hi - lo;
    // fold into [lo, hi]
    v = (v - lo).rem_euclid(2.0 * span);
    if v > span {
        v = 2.0 * span - v;
    }
    lo + v
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistractorSpec {
    /// Cosine similarity between distractor and target signature.
    pub similarity: f64,
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Target and distractors occupy `(2r+1)×(2r+1)` boxes.
    pub target_radius: usize,
    /// Explicit target signature; drawn from the seed when absent.
    pub signature: Option<Vec<f64>>,
    /// Per-element RMS of a drawn signature.
    pub target_amplitude: f64,
    /// Per-element standard deviation of the static background.
    pub background_amplitude: f64,
    pub motion: Motion,
    pub distractors: Vec<DistractorSpec>,
    /// Half-open `[start, end)` frame ranges during which the target is
    /// covered.
    pub occlusions: Vec<(usize, usize)>,
    /// Per-element noise standard deviation.
    pub noise: f64,
    /// Appearance drift per frame, as the tangent growth of the angle
    /// between the current target embedding and its signature.
    pub drift: f64,
}

impl SceneSpec {
    /// Noise-free, distractor-free, drift-free scene with a slowly moving
    /// target.
    pub fn clean(seed: u64, frames: usize) -> SceneSpec {
        SceneSpec {
            seed,
            frames,
            height: 10,
            width: 10,
            channels: 32,
            target_radius: 1,
            signature: None,
            target_amplitude: 1.0,
            background_amplitude: 0.5,
            motion: Motion::Sinusoidal {
                center: (4.5, 4.5),
                amplitude: (2.5, 2.5),
                period: 80.0,
                phase: 0.3,
            },
            distractors: Vec::new(),
            occlusions: Vec::new(),
            noise: 0.0,
            drift: 0.0,
        }
    }

    pub fn box_size(&self) -> usize {
        2 * self.target_radius + 1
    }

    pub fn is_occluded(&self, t: usize) -> bool {
        self.occlusions.iter().any(|&(s, e)| s <= t && t < e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::param(
                "frames, height, width and channels must be positive",
            ));
        }
        if self.box_size() > self.height || self.box_size() > self.width {
            return Err(Error::param(format!(
                "target box {0}x{0} does not fit a {1}x{2} grid",
                self.box_size(),
                self.height,
                self.width
            )));
        }
        if let Some(sig) = &self.signature {
            if sig.len() != self.channels {
                return Err(Error::param(format!(
                    "signature has {} values for {} channels",
                    sig.len(),
                    self.channels
                )));
            }
            if sig.iter().all(|v| *v == 0.0) {
                return Err(Error::param("signature must be non-zero"));
            }
        }
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(self.target_amplitude.is_finite() && self.target_amplitude > 0.0) {
            return Err(Error::param("target_amplitude must be > 0"));
        }
        if !nonneg(self.background_amplitude) || !nonneg(self.noise) || !nonneg(self.drift) {
            return Err(Error::param(
                "background_amplitude, noise and drift must be non-negative",
            ));
        }
        for d in &self.distractors {
            if !(0.0..=1.0).contains(&d.similarity) {
                return Err(Error::param(format!(
                    "distractor similarity {} outside [0, 1]",
                    d.similarity
                )));
            }
        }
        for m in std::iter::once(&self.motion).chain(self.distractors.iter().map(|d| &d.motion)) {
            match m {
                Motion::Sinusoidal { period, .. } if !(*period > 0.0) => {
                    return Err(Error::param("sinusoidal period must be > 0"))
                }
                Motion::RandomWalk { step, .. } if !(*step >= 0.0) => {
                    return Err(Error::param("random walk step must be >= 0"))
                }
                _ => {}
            }
        }
        for &(s, e) in &self.occlusions {
            if s >= e {
                return Err(Error::param(format!("empty occlusion window [{s}, {e})")));
            }
            if s == 0 {
                return Err(Error::param("the first frame must show the target"));
            }
        }
        Ok(())
    }

    fn bounds(&self) -> Bounds {
        let r = self.target_radius as f64;
        Bounds {
            lo: r,
            hi_r: self.height as f64 - 1.0 - r,
            hi_c: self.width as f64 - 1.0 - r,
        }
    }

    /// Plain-text `key = value` form; see [`SceneSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "frames = {}", self.frames);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "target_radius = {}", self.target_radius);
        let _ = writeln!(s, "target_amplitude = {}", self.target_amplitude);
        let _ = writeln!(s, "background_amplitude = {}", self.background_amplitude);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "drift = {}", self.drift);
        let _ = writeln!(s, "motion = {}", self.motion.to_text());
        for d in &self.distractors {
            let _ = writeln!(s, "distractor = {} {}", d.similarity, d.motion.to_text());
        }
        for (a, b) in &self.occlusions {
            let _ = writeln!(s, "occlusion = {a} {b}");
        }
        if let Some(sig) = &self.signature {
            let vals: Vec<String> = sig.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "signature = {}", vals.join(", "));
        }
        s
    }

    /// Parses the scene format. Unknown keys and repeated scalar keys are
    /// errors; `distractor` and `occlusion` may repeat. Missing keys take the
    /// values of [`SceneSpec::clean`] with seed 0 and 100 frames.
    pub fn parse(text: &str, path: &Path) -> Result<SceneSpec> {
        let mut spec = SceneSpec::clean(0, 100);
        let mut seen = std::collections::HashSet::new();
        for e in keyval::parse(text, path)? {
            let repeatable = matches!(e.key.as_str(), "distractor" | "occlusion");
            if !repeatable && !seen.insert(e.key.clone()) {
                return Err(keyval::parse_error(
                    path,
                    e.line,
                    format!("duplicate key `{}`", e.key),
                ));
            }
            let err = |m: String| keyval::parse_error(path, e.line, m);
            match e.key.as_str() {
                "seed" => spec.seed = keyval::value(&e, path)?,
                "frames" => spec.frames = keyval::value(&e, path)?,
                "height" => spec.height = keyval::value(&e, path)?,
                "width" => spec.width = keyval::value(&e, path)?,
                "channels" => spec.channels = keyval::value(&e, path)?,
                "target_radius" => spec.target_radius = keyval::value(&e, path)?,
                "target_amplitude" => spec.target_amplitude = keyval::value(&e, path)?,
                "background_amplitude" => spec.background_amplitude = keyval::value(&e, path)?,
                "noise" => spec.noise = keyval::value(&e, path)?,
                "drift" => spec.drift = keyval::value(&e, path)?,
                "motion" => {
                    let words: Vec<&str> = e.value.split_whitespace().collect();
                    spec.motion = Motion::parse(&words).map_err(err)?;
                }
                "distractor" => {
                    let words: Vec<&str> = e.value.split_whitespace().collect();
                    let (rho, rest) = words
                        .split_first()
                        .ok_or_else(|| err("distractor needs a similarity and a motion".into()))?;
                    let similarity = rho
                        .parse::<f64>()
                        .map_err(|_| err(format!("`{rho}` is not a similarity")))?;
                    let motion = Motion::parse(rest).map_err(err)?;
                    spec.distractors.push(DistractorSpec { similarity, motion });
                }
                "occlusion" => {
                    let v: Vec<&str> = e.value.split_whitespace().collect();
                    let parsed: Option<Vec<usize>> = v.iter().map(|w| w.parse().ok()).collect();
                    match parsed.as_deref() {
                        Some([a, b]) => spec.occlusions.push((*a, *b)),
                        _ => return Err(err("occlusion takes `start end` frame indices".into())),
                    }
                }
                "signature" => spec.signature = Some(keyval::numbers(&e, path)?),
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        spec.validate()
            .map_err(|e| keyval::parse_error(path, 0, e.to_string()))?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SceneSpec> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// One generated frame with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub feature: FeatureMap,
    /// Target center cell (integer-valued).
    pub center: (f64, f64),
    /// Ground-truth box around `center`.
    pub target: BBox,
    pub visible: bool,
}

/// Scene-level constants derived from the seed.
#[derive(Debug, Clone)]
pub struct SceneBasis {
    pub signature: Vec<f64>,
    pub drift_direction: Vec<f64>,
    pub distractor_signatures: Vec<Vec<f64>>,
    pub occluder: Vec<f64>,
    /// `H·W` background embeddings, row-major over cells.
    pub background: Vec<Vec<f64>>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Unit vector orthogonal to `s` (assumed non-zero).
fn orthogonal_unit(rng: &mut ChaCha8Rng, s: &[f64]) -> Vec<f64> {
    let s_norm2 = s.iter().map(|x| x * x).sum::<f64>();
    loop {
        let mut u = gaussian_vec(rng, s.len(), 1.0);
        let d: f64 = u.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / s_norm2;
        u.iter_mut().zip(s).for_each(|(a, b)| *a -= d * b);
        let n = norm(&u);
        if n > 1e-6 {
            u.iter_mut().for_each(|a| *a /= n);
            return u;
        }
    }
}

impl SceneBasis {
    pub fn new(spec: &SceneSpec) -> Result<SceneBasis> {
        spec.validate()?;
        let c = spec.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let drawn = gaussian_vec(&mut rng, c, 1.0);
        let signature = match &spec.signature {
            Some(s) => s.clone(),
            None => {
                let scale = spec.target_amplitude * (c as f64).sqrt() / norm(&drawn);
                drawn.iter().map(|v| v * scale).collect()
            }
        };
        let s_norm = norm(&signature);
        let drift_direction = if c > 1 {
            orthogonal_unit(&mut rng, &signature)
        } else {
            vec![0.0]
        };
        let mut distractor_signatures = Vec::with_capacity(spec.distractors.len());
        for d in &spec.distractors {
            if c == 1 && d.similarity < 1.0 {
                return Err(Error::param(
                    "a single channel cannot hold a distractor with similarity < 1",
                ));
            }
            let u = if c > 1 {
                orthogonal_unit(&mut rng, &signature)
            } else {
                vec![0.0]
            };
            let off = (1.0 - d.similarity * d.similarity).sqrt() * s_norm;
            distractor_signatures.push(
                signature
                    .iter()
                    .zip(&u)
                    .map(|(s, u)| d.similarity * s + off * u)
                    .collect(),
            );
        }
        let occ = gaussian_vec(&mut rng, c, 1.0);
        let occ_scale = s_norm / norm(&occ);
        let occluder = occ.iter().map(|v| v * occ_scale).collect();
        let background = (0..spec.height * spec.width)
            .map(|_| gaussian_vec(&mut rng, c, spec.background_amplitude))
            .collect();
        Ok(SceneBasis {
            signature,
            drift_direction,
            distractor_signatures,
            occluder,
            background,
        })
    }

    /// Target embedding at frame `t` before noise: the signature rotated
    /// towards the drift direction, with the signature's norm.
    pub fn target_embedding(&self, spec: &SceneSpec, t: usize) -> Vec<f64> {
        let step = t as f64 * spec.drift;
        if step == 0.0 {
            return self.signature.clone();
        }
        let s_norm = norm(&self.signature);
        let mixed: Vec<f64> = self
            .signature
            .iter()
            .zip(&self.drift_direction)
            .map(|(s, d)| s + step * s_norm * d)
            .collect();
        let scale = s_norm / norm(&mixed);
        mixed.iter().map(|v| v * scale).collect()
    }
}

fn cell_trajectory(
    motion: &Motion,
    spec: &SceneSpec,
    stream: u64,
    what: &str,
) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(TRAJECTORY_STREAM + stream);
    let b = spec.bounds();
    motion
        .trajectory(spec.frames, b, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(t, (r, c))| {
            let (rr, cc) = (r.round(), c.round());
            if rr < b.lo || rr > b.hi_r || cc < b.lo || cc > b.hi_c {
                Err(Error::param(format!(
                    "{what} leaves the grid at frame {t}: center ({r:.2}, {c:.2})"
                )))
            } else {
                Ok((rr as usize, cc as usize))
            }
        })
        .collect()
}

/// Per-frame cell centers of the target and each distractor.
pub fn trajectories(spec: &SceneSpec) -> Result<(Vec<(usize, usize)>, Vec<Vec<(usize, usize)>>)> {
    spec.validate()?;
    let target = cell_trajectory(&spec.motion, spec, 0, "target")?;
    let distractors = spec
        .distractors
        .iter()
        .enumerate()
        .map(|(i, d)| cell_trajectory(&d.motion, spec, 1 + i as u64, &format!("distractor {i}")))
        .collect::<Result<_>>()?;
    Ok((target, distractors))
}

/// Renders the whole sequence. Bit-identical for identical specs.
pub fn generate(spec: &SceneSpec) -> Result<Vec<SyntheticFrame>> {
    let basis = SceneBasis::new(spec)?;
    let (target_path, distractor_paths) = trajectories(spec)?;
    (0..spec.frames)
        .into_par_iter()
        .map(|t| {
            render_frame(
                spec,
                &basis,
                target_path[t],
                distractor_paths.iter().map(|p| p[t]),
                t,
            )
        })
        .collect()
}

fn render_frame(
    spec: &SceneSpec,
    basis: &SceneBasis,
    target: (usize, usize),
    distractors: impl Iterator<Item = (usize, usize)>,
    t: usize,
) -> Result<SyntheticFrame> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let r = spec.target_radius;
    let hw = h * w;
    let mut data = vec![0.0; c * hw];
    let paint = |center: (usize, usize), emb: &[f64], data: &mut [f64]| {
        for row in center.0 - r..=center.0 + r {
            for col in center.1 - r..=center.1 + r {
                for (ch, v) in emb.iter().enumerate() {
                    data[ch * hw + row * w + col] = *v;
                }
            }
        }
    };
    for (cell, emb) in basis.background.iter().enumerate() {
        for (ch, v) in emb.iter().enumerate() {
            data[ch * hw + cell] = *v;
        }
    }
    for (center, sig) in distractors.zip(&basis.distractor_signatures) {
        paint(center, sig, &mut data);
    }
    let visible = !spec.is_occluded(t);
    if visible {
        paint(target, &basis.target_embedding(spec, t), &mut data);
    } else {
        paint(target, &basis.occluder, &mut data);
    }
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(FRAME_STREAM + t as u64);
        for v in &mut data {
            *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let center = (target.0 as f64, target.1 as f64);
    let size = spec.box_size() as f64;
    Ok(SyntheticFrame {
        feature: FeatureMap::new(c, h, w, data)?,
        center,
        target: BBox::centered(center, size, size)?,
        visible,
    })
}

/// Writes a sequence as `TCTS` blob: header dims are `H`, `W`; payload is
/// `[frames, C, box_h, box_w]` followed, per frame, by
/// `[row, col, visible, C·H·W values]`.
pub fn write_sequence<W: Write>(w: W, frames: &[SyntheticFrame]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::param("empty sequence"))?;
    let f = &first.feature;
    let dim = |v: usize| u16::try_from(v).map_err(|_| Error::param("grid too large"));
    let mut payload = vec![
        frames.len() as f64,
        f.channels() as f64,
        first.target.height,
        first.target.width,
    ];
    for fr in frames {
        if !fr.feature.same_shape(f) {
            return Err(Error::dim("frames differ in shape"));
        }
        payload.extend([fr.center.0, fr.center.1, if fr.visible { 1.0 } else { 0.0 }]);
        payload.extend_from_slice(fr.feature.data());
    }
    binfmt::write_blob(
        w,
        &Blob {
            magic: SEQUENCE_MAGIC,
            a: dim(f.height())?,
            b: dim(f.width())?,
            payload,
        },
    )
}

pub fn read_sequence<R: Read>(r: R) -> Result<Vec<SyntheticFrame>> {
    let blob = binfmt::read_blob(r, SEQUENCE_MAGIC)?;
    let (h, w) = (blob.a as usize, blob.b as usize);
    let p = &blob.payload;
    if p.len() < 4 {
        return Err(Error::Format("sequence header truncated".into()));
    }
    let (n, c) = (p[0] as usize, p[1] as usize);
    let (bh, bw) = (p[2], p[3]);
    let per = 3 + c * h * w;
    if p.len() != 4 + n * per {
        return Err(Error::Format(format!(
            "sequence payload has {} values, expected {}",
            p.len(),
            4 + n * per
        )));
    }
    p[4..]
        .chunks_exact(per)
        .map(|chunk| {
            let center = (chunk[0], chunk[1]);
            Ok(SyntheticFrame {
                feature: FeatureMap::new(c, h, w, chunk[3..].to_vec())?,
                center,
                target: BBox::centered(center, bh, bw)?,
                visible: chunk[2] != 0.0,
            })
        })
        .collect()
}

/// The fixed hard-scene suite, on the clean scene's grid with target
/// amplitude 0.5:
/// distractors with similarity spread over `[0.7, 0.95]`, drift `0.02` per
/// frame, one occlusion window per scene and noise `0.3`.
pub fn benchmark_suite(count: usize, base_seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| benchmark_scene(i, count, base_seed))
        .collect()
}

fn benchmark_scene(i: usize, count: usize, base_seed: u64) -> SceneSpec {
    let seed = base_seed.wrapping_add(i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut spec = SceneSpec::clean(seed, 60);
    spec.target_amplitude = 0.5;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mid = ((h - 1.0) / 2.0, (w - 1.0) / 2.0);
    spec.noise = 0.3;
    spec.drift = 0.02;
    spec.motion = Motion::Sinusoidal {
        center: mid,
        amplitude: (rng.random_range(1.5..3.0), rng.random_range(1.5..3.0)),
        period: rng.random_range(50.0..90.0),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
    };
    let n_distractors = 2 + i % 2;
    let base_rho = if count > 1 {
        0.7 + 0.25 * i as f64 / (count - 1) as f64
    } else {
        0.85
    };
    for k in 0..n_distractors {
        let similarity = (base_rho - 0.05 * k as f64).clamp(0.7, 0.95);
        let start = (
            rng.random_range(2.0..h - 3.0),
            rng.random_range(2.0..w - 3.0),
        );
        spec.distractors.push(DistractorSpec {
            similarity,
            motion: Motion::RandomWalk {
                start,
                step: rng.random_range(0.2..0.5),
            },
        });
    }
    let start = rng.random_range(15..35);
    spec.occlusions
        .push((start, start + rng.random_range(3..7)));
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{cross_correlate, CorrelationKernel};

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
    }

    #[test]
    fn clean_scene_cells_equal_signature() {
        let spec = SceneSpec::clean(3, 10);
        let basis = SceneBasis::new(&spec).unwrap();
        for f in generate(&spec).unwrap() {
            let (r, c) = (f.center.0 as usize, f.center.1 as usize);
            for dr in 0..3 {
                for dc in 0..3 {
                    assert_eq!(
                        f.feature.embedding_at(r + dr - 1, c + dc - 1),
                        basis.signature
                    );
                }
            }
            assert!(f.visible);
        }
    }

    #[test]
    fn explicit_signature_is_used_verbatim() {
        let mut spec = SceneSpec::clean(3, 2);
        spec.channels = 3;
        spec.signature = Some(vec![0.5, -1.0, 2.0]);
        let f = &generate(&spec).unwrap()[1];
        let (r, c) = (f.center.0 as usize, f.center.1 as usize);
        assert_eq!(f.feature.embedding_at(r, c), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = &benchmark_suite(2, 11)[1];
        assert_eq!(generate(spec).unwrap(), generate(spec).unwrap());
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(generate(spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn distractor_similarity_by_construction() {
        let mut spec = SceneSpec::clean(5, 4);
        spec.distractors.push(DistractorSpec {
            similarity: 0.9,
            motion: Motion::Linear {
                start: (2.0, 2.0),
                velocity: (0.0, 0.0),
            },
        });
        let basis = SceneBasis::new(&spec).unwrap();
        assert!((cosine(&basis.signature, &basis.distractor_signatures[0]) - 0.9).abs() < 1e-9);
        let f = &generate(&spec).unwrap()[0];
        assert!((cosine(&f.feature.embedding_at(2, 2), &basis.signature) - 0.9).abs() < 1e-9);
    }

    #[test]
    fn drift_rotates_away_from_signature() {
        let mut spec = SceneSpec::clean(5, 60);
        spec.drift = 0.02;
        let basis = SceneBasis::new(&spec).unwrap();
        let e = basis.target_embedding(&spec, 50);
        // tan θ = 50·0.02 = 1
        assert!((cosine(&e, &basis.signature) - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((norm(&e) - norm(&basis.signature)).abs() < 1e-9);
    }

    #[test]
    fn occlusion_hides_target() {
        let mut spec = SceneSpec::clean(5, 10);
        spec.occlusions.push((3, 5));
        let basis = SceneBasis::new(&spec).unwrap();
        let frames = generate(&spec).unwrap();
        let vis: Vec<bool> = frames.iter().map(|f| f.visible).collect();
        assert_eq!(
            vis,
            [true, true, true, false, false, true, true, true, true, true]
        );
        let f = &frames[3];
        assert_eq!(
            f.feature
                .embedding_at(f.center.0 as usize, f.center.1 as usize),
            basis.occluder
        );
    }

    #[test]
    fn leaving_the_grid_is_an_error() {
        let mut spec = SceneSpec::clean(1, 50);
        spec.motion = Motion::Linear {
            start: (5.0, 5.0),
            velocity: (0.5, 0.0),
        };
        assert!(matches!(generate(&spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn random_walk_stays_inside() {
        let mut spec = SceneSpec::clean(9, 400);
        spec.motion = Motion::RandomWalk {
            start: (6.0, 6.0),
            step: 2.0,
        };
        let (path, _) = trajectories(&spec).unwrap();
        assert!(path
            .iter()
            .all(|&(r, c)| (1..=12).contains(&r) && (1..=12).contains(&c)));
        assert_eq!(reflect(-1.0, 0.0, 10.0), 1.0);
        assert_eq!(reflect(12.0, 0.0, 10.0), 8.0);
    }

    #[test]
    fn noise_free_signature_peak_is_ground_truth() {
        let mut spec = benchmark_suite(3, 40)[2].clone();
        spec.noise = 0.0;
        let basis = SceneBasis::new(&spec).unwrap();
        for (t, f) in generate(&spec).unwrap().iter().enumerate() {
            if !f.visible {
                continue;
            }
            let e = basis.target_embedding(&spec, t);
            let mut data = Vec::with_capacity(e.len() * 9);
            for v in &e {
                data.extend(std::iter::repeat_n(*v, 9));
            }
            let k = CorrelationKernel::new(e.len(), 3, 3, data, 0.0).unwrap();
            let r = cross_correlate(&k, &f.feature).unwrap();
            assert_eq!(
                r.argmax(),
                (f.center.0 as usize, f.center.1 as usize),
                "frame {t}"
            );
        }
    }

    #[test]
    fn scene_text_round_trip() {
        let mut spec = benchmark_suite(4, 3)[3].clone();
        spec.signature = Some(vec![0.1; spec.channels]);
        let parsed = SceneSpec::parse(&spec.to_text(), Path::new("t.scene")).unwrap();
        assert_eq!(parsed, spec);
    }

    #[test]
    fn scene_parse_errors_carry_lines() {
        let err =
            SceneSpec::parse("frames = 10\nfrobnicate = 1\n", Path::new("a.scene")).unwrap_err();
        assert!(err.to_string().starts_with("a.scene:2: unknown key"));
        let err = SceneSpec::parse("seed = 1\nseed = 2\n", Path::new("a.scene")).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
        let err = SceneSpec::parse("motion = teleport 1 2\n", Path::new("a.scene")).unwrap_err();
        assert!(err.to_string().contains("a.scene:1"));
    }

    #[test]
    fn sequence_binary_round_trip() {
        let frames = generate(&benchmark_suite(1, 2)[0]).unwrap();
        let mut buf = Vec::new();
        write_sequence(&mut buf, &frames[..5]).unwrap();
        assert_eq!(&buf[..4], b"TCTS");
        assert_eq!(read_sequence(&buf[..]).unwrap(), frames[..5].to_vec());
    }

    #[test]
    fn suite_matches_declared_ranges() {
        for s in benchmark_suite(20, 1000) {
            assert_eq!(s.noise, 0.3);
            assert_eq!(s.drift, 0.02);
            assert!(!s.occlusions.is_empty());
            assert!(s
                .distractors
                .iter()
                .all(|d| (0.7..=0.95).contains(&d.similarity)));
            generate(&s).unwrap();
        }
    }
}
