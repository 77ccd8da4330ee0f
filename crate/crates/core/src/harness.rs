//! Online tracking loop, overlap metrics and the ablation runner.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::attention::{LinearProjection, Temperature};
use crate::error::{Error, Result};
use crate::geometry::{BBox, CellBox};
use crate::keyval;
use crate::memory::{TemplateEnsemble, DEFAULT_INTERVAL, DEFAULT_MAX_SIZE};
use crate::models::{
    crop_target_kernel, cross_correlate, solve_dcf, CorrelationKernel, GaussianLabel, ResponseMap,
    DEFAULT_LAMBDA, DEFAULT_SIGMA,
};
use crate::synth::{generate, SceneSpec, SyntheticFrame};
use crate::tensor::{instance_normalize, reshape_to_embeddings, FeatureMap, MaskVector, NORM_EPS};
use crate::transformer::{decode, encode, EncodedTemplates, ProjectionInit, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pipeline {
    Siamese,
    Dcf,
}

impl Pipeline {
    pub const ALL: [Pipeline; 2] = [Pipeline::Siamese, Pipeline::Dcf];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Siamese => "siamese",
            Pipeline::Dcf => "dcf",
        }
    }
}

impl std::str::FromStr for Pipeline {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "siamese" => Ok(Pipeline::Siamese),
            "dcf" => Ok(Pipeline::Dcf),
            _ => Err(format!("unknown pipeline `{s}` (siamese|dcf)")),
        }
    }
}

/// Which transformer parts are active. Declaration order is the ablation
/// table's row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TransformerMode {
    /// Baseline: normalized raw features only.
    Off,
    /// Encoder on the templates; the search patch skips the decoder.
    EncoderOnly,
    /// Encoder + decoder with only the feature transformation.
    FeatureOnly,
    /// Encoder + decoder with only the mask transformation.
    MaskOnly,
    /// Encoder + decoder with both transformations.
    Full,
}

impl TransformerMode {
    pub const ALL: [TransformerMode; 5] = [
        TransformerMode::Off,
        TransformerMode::EncoderOnly,
        TransformerMode::FeatureOnly,
        TransformerMode::MaskOnly,
        TransformerMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TransformerMode::Off => "off",
            TransformerMode::EncoderOnly => "encoder",
            TransformerMode::FeatureOnly => "feature",
            TransformerMode::MaskOnly => "mask",
            TransformerMode::Full => "full",
        }
    }

    pub fn uses_encoder(self) -> bool {
        self != TransformerMode::Off
    }

    pub fn uses_decoder(self) -> bool {
        matches!(
            self,
            TransformerMode::FeatureOnly | TransformerMode::MaskOnly | TransformerMode::Full
        )
    }

    /// `(mask, feature)` decoder branches.
    fn branches(self) -> (bool, bool) {
        match self {
            TransformerMode::FeatureOnly => (false, true),
            TransformerMode::MaskOnly => (true, false),
            TransformerMode::Full => (true, true),
            _ => (false, false),
        }
    }
}

impl std::str::FromStr for TransformerMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "off" => Ok(TransformerMode::Off),
            "encoder" | "encoder_only" => Ok(TransformerMode::EncoderOnly),
            "feature" | "feature_only" => Ok(TransformerMode::FeatureOnly),
            "mask" | "mask_only" => Ok(TransformerMode::MaskOnly),
            "full" => Ok(TransformerMode::Full),
            _ => Err(format!(
                "unknown mode `{s}` (off|encoder|mask|feature|full)"
            )),
        }
    }
}

/// Motion prior applied to the response before localization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    None,
    /// `r·(1 − w) + r·hann·w`, with the Hann window centered on the previous
    /// target position and reaching zero half a grid away.
    Hann {
        weight: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub pipeline: Pipeline,
    pub mode: TransformerMode,
    pub window: Window,
    pub interval: usize,
    pub max_size: usize,
    pub lambda: f64,
    /// DCF filter size; defaults to the initial target box.
    pub kernel_size: Option<(usize, usize)>,
    pub sigma_label: f64,
    pub sigma_mask: f64,
    pub tau: Temperature,
    pub projection: ProjectionInit,
    pub projection_seed: u64,
    pub self_weights: Option<PathBuf>,
    pub cross_weights: Option<PathBuf>,
    /// Build update masks from ground truth instead of the prediction.
    pub oracle_masks: bool,
    /// Skip an update when the peak response falls below this fraction of
    /// the running mean peak.
    pub confidence_gate: Option<f64>,
    pub pin_first: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            pipeline: Pipeline::Siamese,
            mode: TransformerMode::Full,
            window: Window::None,
            interval: DEFAULT_INTERVAL,
            max_size: DEFAULT_MAX_SIZE,
            lambda: DEFAULT_LAMBDA,
            kernel_size: None,
            sigma_label: DEFAULT_SIGMA,
            sigma_mask: DEFAULT_SIGMA,
            tau: Temperature::DEFAULT,
            projection: ProjectionInit::Orthonormal,
            projection_seed: 0x7c7,
            self_weights: None,
            cross_weights: None,
            oracle_masks: false,
            confidence_gate: None,
            pin_first: false,
        }
    }
}

impl TrackerConfig {
    pub fn with(pipeline: Pipeline, mode: TransformerMode) -> Self {
        TrackerConfig {
            pipeline,
            mode,
            ..Default::default()
        }
    }

    /// The ten `(pipeline, mode)` variants of the ablation, sharing every
    /// other setting with `self`.
    pub fn ablation_grid(&self) -> Vec<TrackerConfig> {
        Pipeline::ALL
            .iter()
            .flat_map(|&p| {
                TransformerMode::ALL.iter().map(move |&m| TrackerConfig {
                    pipeline: p,
                    mode: m,
                    ..self.clone()
                })
            })
            .collect()
    }

    pub fn transformer_config(&self, channels: usize) -> Result<TransformerConfig> {
        let mut cfg = TransformerConfig::seeded(channels, self.projection, self.projection_seed)?;
        if let Some(p) = &self.self_weights {
            cfg.set_self_projection(Arc::new(LinearProjection::load(p)?))?;
        }
        if let Some(p) = &self.cross_weights {
            cfg.set_cross_projection(Arc::new(LinearProjection::load(p)?))?;
        }
        let (mask, feature) = self.mode.branches();
        Ok(cfg.with_tau(self.tau).with_branches(mask, feature))
    }

    fn validate(&self) -> Result<()> {
        if self.interval == 0 || self.max_size == 0 {
            return Err(Error::param("interval and max_size must be >= 1"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::param("lambda must be >= 0"));
        }
        if let Window::Hann { weight } = self.window {
            if !(0.0..=1.0).contains(&weight) {
                return Err(Error::param("window weight must lie in [0, 1]"));
            }
        }
        if let Some(g) = self.confidence_gate {
            if !(g.is_finite() && g >= 0.0) {
                return Err(Error::param("confidence gate must be >= 0"));
            }
        }
        Ok(())
    }

    /// Reads a tracker file of `key = value` lines. Keys: `pipeline`,
    /// `mode`, `window` (`none` or `hann <weight>`), `interval`, `max_size`,
    /// `lambda`, `kernel_size` (`<h> <w>`), `sigma_label`, `sigma_mask`,
    /// `tau`, `projection` (`orthonormal`|`uniform`), `projection_seed`,
    /// `self_weights`, `cross_weights`, `oracle_masks`, `confidence_gate`
    /// (`off` or a ratio), `pin_first`. Relative weight paths resolve against
    /// the file's directory.
    pub fn parse(text: &str, path: &Path) -> Result<TrackerConfig> {
        let mut cfg = TrackerConfig::default();
        let mut seen = std::collections::HashSet::new();
        let base = path.parent().unwrap_or(Path::new(""));
        for e in keyval::parse(text, path)? {
            let err = |m: String| keyval::parse_error(path, e.line, m);
            if !seen.insert(e.key.clone()) {
                return Err(err(format!("duplicate key `{}`", e.key)));
            }
            match e.key.as_str() {
                "pipeline" => cfg.pipeline = e.value.parse().map_err(err)?,
                "mode" => cfg.mode = e.value.parse().map_err(err)?,
                "window" => {
                    let words: Vec<&str> = e.value.split_whitespace().collect();
                    cfg.window = match words.as_slice() {
                        ["none"] => Window::None,
                        ["hann", w] => Window::Hann {
                            weight: w.parse().map_err(|_| err(format!("bad weight `{w}`")))?,
                        },
                        _ => return Err(err("window is `none` or `hann <weight>`".into())),
                    };
                }
                "interval" => cfg.interval = keyval::value(&e, path)?,
                "max_size" => cfg.max_size = keyval::value(&e, path)?,
                "lambda" => cfg.lambda = keyval::value(&e, path)?,
                "kernel_size" => {
                    let v = keyval::numbers(&e, path)?;
                    match v.as_slice() {
                        [h, w]
                            if *h >= 1.0 && *w >= 1.0 && h.fract() == 0.0 && w.fract() == 0.0 =>
                        {
                            cfg.kernel_size = Some((*h as usize, *w as usize))
                        }
                        _ => return Err(err("kernel_size takes two positive integers".into())),
                    }
                }
                "sigma_label" => cfg.sigma_label = keyval::value(&e, path)?,
                "sigma_mask" => cfg.sigma_mask = keyval::value(&e, path)?,
                "tau" => {
                    cfg.tau = Temperature::new(keyval::value(&e, path)?)
                        .map_err(|x| err(x.to_string()))?
                }
                "projection" => {
                    cfg.projection = match e.value.as_str() {
                        "orthonormal" => ProjectionInit::Orthonormal,
                        "uniform" => ProjectionInit::Uniform,
                        other => return Err(err(format!("unknown projection `{other}`"))),
                    }
                }
                "projection_seed" => cfg.projection_seed = keyval::value(&e, path)?,
                "self_weights" => cfg.self_weights = Some(base.join(&e.value)),
                "cross_weights" => cfg.cross_weights = Some(base.join(&e.value)),
                "oracle_masks" => cfg.oracle_masks = keyval::value(&e, path)?,
                "confidence_gate" => {
                    cfg.confidence_gate = match e.value.as_str() {
                        "off" => None,
                        _ => Some(keyval::value(&e, path)?),
                    }
                }
                "pin_first" => cfg.pin_first = keyval::value(&e, path)?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        cfg.validate()
            .map_err(|x| keyval::parse_error(path, 0, x.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrackerConfig> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !(bx.height > 0.0 && bx.width > 0.0) {
            return Err(Error::param(format!("box {bx:?} has non-positive extent")));
        }
    }
    let ih = ((a.row + a.height).min(b.row + b.height) - a.row.max(b.row)).max(0.0);
    let iw = ((a.col + a.width).min(b.col + b.width) - a.col.max(b.col)).max(0.0);
    let inter = ih * iw;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Debug, Clone)]
pub struct TrackResult {
    /// Predicted center cell per frame; frame 0 is the initialization.
    pub centers: Vec<(usize, usize)>,
    pub boxes: Vec<BBox>,
    pub overlaps: Vec<f64>,
    /// Mean overlap over frames `1..N`.
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub encoder_invocations: usize,
    pub updates: usize,
    /// Ensemble size after the last frame.
    pub stored_templates: usize,
    pub wall_time: Duration,
    /// Localization response per frame, frame 0 included.
    pub responses: Vec<ResponseMap>,
    /// Propagated mask `A_TS·M′` per frame when the decoder ran.
    pub masks: Vec<Option<Vec<f64>>>,
}

impl TrackResult {
    /// `frame,row,col,iou` table.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,row,col,iou\n");
        for (t, ((r, c), o)) in self.centers.iter().zip(&self.overlaps).enumerate() {
            let _ = writeln!(s, "{t},{r},{c},{o:.6}");
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "frames {}\nao {:.6}\nsr50 {:.6}\nsr75 {:.6}\nencoder_invocations {}\nupdates {}\n",
            self.centers.len(),
            self.ao,
            self.sr50,
            self.sr75,
            self.encoder_invocations,
            self.updates
        )
    }
}

/// Everything derived from the current ensemble.
struct Model {
    encoded: EncodedTemplates,
    masks: MaskVector,
    kernel: CorrelationKernel,
}

struct Tracker<'a> {
    cfg: &'a TrackerConfig,
    tcfg: TransformerConfig,
    ensemble: TemplateEnsemble,
    model: Model,
    encoder_invocations: usize,
    half: (usize, usize),
    grid: (usize, usize),
}

impl<'a> Tracker<'a> {
    fn new(first: &SyntheticFrame, cfg: &'a TrackerConfig) -> Result<Self> {
        let fm = &first.feature;
        let grid = (fm.height(), fm.width());
        let box_h = first.target.height.round() as usize;
        let box_w = first.target.width.round() as usize;
        if box_h == 0 || box_w == 0 {
            return Err(Error::param("initial box is empty"));
        }
        let half = ((box_h - 1) / 2, (box_w - 1) / 2);
        let center = round_cell(first.center, grid);
        let target = CellBox::clamped_around(center, half.0, half.1, grid.0, grid.1)?;
        let mask = gaussian_mask(grid, center, cfg.sigma_mask)?;
        let ensemble =
            TemplateEnsemble::init(fm.clone(), mask, target, cfg.max_size, cfg.interval)?
                .with_pinned_first(cfg.pin_first);
        let tcfg = cfg.transformer_config(fm.channels())?;
        let mut encoder_invocations = 0;
        let model = build_model(&ensemble, cfg, &tcfg, &mut encoder_invocations)?;
        Ok(Tracker {
            cfg,
            tcfg,
            ensemble,
            model,
            encoder_invocations,
            half,
            grid,
        })
    }

    /// Response for one search patch, plus the propagated mask if any.
    fn respond(&self, search: &FeatureMap) -> Result<(ResponseMap, Option<Vec<f64>>)> {
        let (features, mask) = if self.cfg.mode.uses_decoder() {
            let d = decode(search, &self.model.encoded, &self.model.masks, &self.tcfg)?;
            (d.feature_map()?, d.propagated_mask().map(<[f64]>::to_vec))
        } else {
            let s = instance_normalize(
                &reshape_to_embeddings(search),
                search.spatial_len(),
                NORM_EPS,
            )?;
            (
                FeatureMap::from_embeddings(&s, search.height(), search.width())?,
                None,
            )
        };
        Ok((cross_correlate(&self.model.kernel, &features)?, mask))
    }

    fn update(
        &mut self,
        frame: &SyntheticFrame,
        predicted: (usize, usize),
        t: usize,
    ) -> Result<bool> {
        let center = if self.cfg.oracle_masks {
            round_cell(frame.center, self.grid)
        } else {
            predicted
        };
        let mask = gaussian_mask(self.grid, center, self.cfg.sigma_mask)?;
        let target =
            CellBox::clamped_around(center, self.half.0, self.half.1, self.grid.0, self.grid.1)?;
        let updated = self
            .ensemble
            .maybe_update(frame.feature.clone(), mask, target, t)?;
        if updated {
            self.model = build_model(
                &self.ensemble,
                self.cfg,
                &self.tcfg,
                &mut self.encoder_invocations,
            )?;
        }
        Ok(updated)
    }
}

fn round_cell(c: (f64, f64), grid: (usize, usize)) -> (usize, usize) {
    let clamp = |v: f64, n: usize| (v.round().max(0.0) as usize).min(n - 1);
    (clamp(c.0, grid.0), clamp(c.1, grid.1))
}

fn gaussian_mask(grid: (usize, usize), center: (usize, usize), sigma: f64) -> Result<MaskVector> {
    Ok(
        GaussianLabel::at_cell(grid.0, grid.1, (center.0 as f64, center.1 as f64), sigma)?
            .to_mask(),
    )
}

fn build_model(
    ensemble: &TemplateEnsemble,
    cfg: &TrackerConfig,
    tcfg: &TransformerConfig,
    encoder_invocations: &mut usize,
) -> Result<Model> {
    let encoded = if cfg.mode.uses_encoder() {
        *encoder_invocations += 1;
        encode(ensemble, tcfg)?
    } else {
        EncodedTemplates::normalized(ensemble.templates(), tcfg.eps)?
    };
    let kernel = match cfg.pipeline {
        Pipeline::Siamese => crop_target_kernel(&encoded, ensemble.latest_target())?,
        Pipeline::Dcf => {
            let (h, w) = (encoded.height(), encoded.width());
            let labels = ensemble
                .targets()
                .iter()
                .map(|b| {
                    let (r, c) = b.center();
                    GaussianLabel::at_cell(h, w, (r as f64, c as f64), cfg.sigma_label)
                })
                .collect::<Result<Vec<_>>>()?;
            let first = ensemble.targets()[0];
            let size = cfg.kernel_size.unwrap_or((first.height, first.width));
            solve_dcf(&encoded.to_feature_maps()?, &labels, cfg.lambda, size)?
        }
    };
    Ok(Model {
        encoded,
        masks: ensemble.concat_masks()?,
        kernel,
    })
}

/// Separable Hann window centered on `center`, zero beyond half the grid.
pub fn hann_window(grid: (usize, usize), center: (usize, usize)) -> Vec<f64> {
    let axis = |n: usize, c: usize| -> Vec<f64> {
        let half = (n as f64 / 2.0).max(1.0);
        (0..n)
            .map(|i| {
                let d = (i as f64 - c as f64).abs();
                if d >= half {
                    0.0
                } else {
                    0.5 * (1.0 + (std::f64::consts::PI * d / half).cos())
                }
            })
            .collect()
    };
    let (rows, cols) = (axis(grid.0, center.0), axis(grid.1, center.1));
    rows.iter()
        .flat_map(|r| cols.iter().map(move |c| r * c))
        .collect()
}

/// Applies the motion prior around `prev`.
pub fn apply_window(r: ResponseMap, window: Window, prev: (usize, usize)) -> Result<ResponseMap> {
    match window {
        Window::None => Ok(r),
        Window::Hann { weight } => {
            let hann = hann_window((r.height(), r.width()), prev);
            let blend: Vec<f64> = hann.iter().map(|h| (1.0 - weight) + weight * h).collect();
            r.weighted(&blend)
        }
    }
}

/// Runs the tracker over a sequence, initialized from frame 0's ground
/// truth only.
pub fn track(seq: &[SyntheticFrame], cfg: &TrackerConfig) -> Result<TrackResult> {
    if seq.len() < 2 {
        return Err(Error::param(format!(
            "tracking needs at least 2 frames, got {}",
            seq.len()
        )));
    }
    cfg.validate()?;
    let start = Instant::now();
    let first = &seq[0];
    let mut tracker = Tracker::new(first, cfg)?;
    let box_h = first.target.height;
    let box_w = first.target.width;

    let init_center = round_cell(first.center, tracker.grid);
    let (r0, m0) = tracker.respond(&first.feature)?;
    let mut centers = vec![init_center];
    let mut boxes = vec![first.target];
    let mut overlaps = vec![1.0];
    let mut responses = vec![r0];
    let mut masks = vec![m0];
    let mut updates = 0;
    let mut peak_sum = 0.0;

    for (t, frame) in seq.iter().enumerate().skip(1) {
        if !frame.feature.same_shape(&first.feature) {
            return Err(Error::dim(format!(
                "frame {t} differs in shape from frame 0"
            )));
        }
        let prev = *centers.last().expect("non-empty");
        let (raw, mask) = tracker.respond(&frame.feature)?;
        let response = apply_window(raw, cfg.window, prev)?;
        let center = response.argmax();
        let peak = response.max_value();
        let predicted = BBox::centered((center.0 as f64, center.1 as f64), box_h, box_w)?;
        let overlap = if frame.visible {
            iou(&predicted, &frame.target)?
        } else {
            0.0
        };

        let gated = match cfg.confidence_gate {
            Some(ratio) if t > 1 => peak < ratio * peak_sum / (t - 1) as f64,
            _ => false,
        };
        peak_sum += peak;
        if !gated && tracker.update(frame, center, t)? {
            updates += 1;
        }

        centers.push(center);
        boxes.push(predicted);
        overlaps.push(overlap);
        responses.push(response);
        masks.push(mask);
    }

    let scored = &overlaps[1..];
    let n = scored.len() as f64;
    let ao = scored.iter().sum::<f64>() / n;
    let sr50 = scored.iter().filter(|o| **o > 0.5).count() as f64 / n;
    let sr75 = scored.iter().filter(|o| **o > 0.75).count() as f64 / n;
    Ok(TrackResult {
        centers,
        boxes,
        overlaps,
        ao,
        sr50,
        sr75,
        encoder_invocations: tracker.encoder_invocations,
        updates,
        stored_templates: tracker.ensemble.len(),
        wall_time: start.elapsed(),
        responses,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub pipeline: Pipeline,
    pub mode: TransformerMode,
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    /// Per-scene AO in suite order.
    pub scene_ao: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, pipeline: Pipeline, mode: TransformerMode) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.pipeline == pipeline && r.mode == mode)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pipeline,mode,ao,sr50,sr75,scenes\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{}",
                r.pipeline.name(),
                r.mode.name(),
                r.ao,
                r.sr50,
                r.sr75,
                r.scene_ao.len()
            );
        }
        s
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:<8} {:>7} {:>7} {:>7}",
            "pipeline", "mode", "AO", "SR0.5", "SR0.75"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:<8} {:>7.3} {:>7.3} {:>7.3}",
                r.pipeline.name(),
                r.mode.name(),
                r.ao,
                r.sr50,
                r.sr75
            )?;
        }
        Ok(())
    }
}

/// Tracks every scene under every configuration and averages per
/// configuration. Rows are ordered by pipeline, then by
/// [`TransformerMode`] order. `threads` caps parallelism (`None` uses
/// rayon's default).
pub fn run_ablation(
    suite: &[SceneSpec],
    modes: &[TrackerConfig],
    threads: Option<usize>,
) -> Result<AblationTable> {
    if suite.is_empty() {
        return Err(Error::param("ablation suite is empty"));
    }
    if modes.is_empty() {
        return Err(Error::param("no tracker configurations given"));
    }
    let run = || -> Result<AblationTable> {
        let sequences: Vec<Vec<SyntheticFrame>> =
            suite.par_iter().map(generate).collect::<Result<_>>()?;
        let jobs: Vec<(usize, usize)> = (0..modes.len())
            .flat_map(|m| (0..sequences.len()).map(move |s| (m, s)))
            .collect();
        let results: Vec<TrackResult> = jobs
            .par_iter()
            .map(|&(m, s)| track(&sequences[s], &modes[m]))
            .collect::<Result<_>>()?;
        let mut rows: Vec<AblationRow> = modes
            .iter()
            .enumerate()
            .map(|(m, cfg)| {
                let per = &results[m * sequences.len()..(m + 1) * sequences.len()];
                let mean = |f: &dyn Fn(&TrackResult) -> f64| {
                    per.iter().map(f).sum::<f64>() / per.len() as f64
                };
                AblationRow {
                    pipeline: cfg.pipeline,
                    mode: cfg.mode,
                    ao: mean(&|r| r.ao),
                    sr50: mean(&|r| r.sr50),
                    sr75: mean(&|r| r.sr75),
                    scene_ao: per.iter().map(|r| r.ao).collect(),
                }
            })
            .collect();
        rows.sort_by_key(|r| (r.pipeline, r.mode));
        Ok(AblationTable { rows })
    };
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::param(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}
