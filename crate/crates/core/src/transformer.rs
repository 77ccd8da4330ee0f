//! Encoder and decoder of the temporal-context transformer.
//!
//! The two halves run as parallel branches. The encoder lets the templates of
//! the ensemble reinforce each other through self-attention:
//!
//! ```text
//! T̂ = InsNorm(A_TT·T′ + T′),      A_TT = Atten(φ(T′), φ(T′))
//! ```
//!
//! The decoder first applies the same self-attention block (same `φ`) to the
//! search patch, then propagates the template masks and the masked template
//! features into the search frame through cross-attention:
//!
//! ```text
//! Ŝ       = InsNorm(A_SS·S′ + S′)
//! A_TS    = Atten(ϕ(Ŝ), ϕ(T̂))
//! Ŝ_mask  = InsNorm((A_TS·M′) ⊗ Ŝ)
//! Ŝ_feat  = InsNorm(A_TS·(T̂ ⊗ M′) + Ŝ)
//! Ŝ_final = InsNorm(Ŝ_feat + Ŝ_mask)
//! ```
//!
//! Exactly one encoder layer and one decoder layer; no feed-forward
//! sublayers, single head.

use std::sync::Arc;

use crate::attention::{
    attention, reduced_channels, transform_scalars, transform_values, AttentionMatrix,
    LinearProjection, Temperature,
};
use crate::error::{Error, Result};
use crate::memory::TemplateEnsemble;
use crate::tensor::{
    concat_embeddings, instance_normalize, reshape_to_embeddings, EmbeddingMatrix, FeatureMap,
    MaskVector, NORM_EPS,
};

/// How projection weights are initialized when none are loaded from file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionInit {
    /// Orthonormal random rows; keeps similar embeddings similar.
    Orthonormal,
    /// Uniform on `[−1/√C, 1/√C]`.
    Uniform,
}

/// Output scaling after instance normalization. `Unit` is the plain
/// Frobenius division; `SqrtCount` additionally multiplies by the square
/// root of the number of elements in the patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormScale {
    #[default]
    Unit,
    SqrtCount,
}

#[derive(Debug, Clone)]
pub struct TransformerConfig {
    pub tau: Temperature,
    channels: usize,
    /// `φ`, used by the encoder and the decoder self-attention.
    self_projection: Arc<LinearProjection>,
    /// `ϕ`, used by the cross-attention.
    cross_projection: Arc<LinearProjection>,
    pub eps: f64,
    pub mask_branch: bool,
    pub feature_branch: bool,
    pub norm_scale: NormScale,
}

impl TransformerConfig {
    pub fn new(
        channels: usize,
        self_projection: Arc<LinearProjection>,
        cross_projection: Arc<LinearProjection>,
    ) -> Result<Self> {
        for (name, p) in [("self", &self_projection), ("cross", &cross_projection)] {
            if p.in_channels() != channels {
                return Err(Error::dim(format!(
                    "{name} projection takes {} channels, config has {channels}",
                    p.in_channels()
                )));
            }
        }
        Ok(TransformerConfig {
            tau: Temperature::DEFAULT,
            channels,
            self_projection,
            cross_projection,
            eps: NORM_EPS,
            mask_branch: true,
            feature_branch: true,
            norm_scale: NormScale::Unit,
        })
    }

    /// Both projections reduce `C` to `⌈C/4⌉`, drawn from `seed` and
    /// `seed + 1`.
    pub fn seeded(channels: usize, init: ProjectionInit, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("channels must be positive"));
        }
        let out = reduced_channels(channels);
        let make = |s| match init {
            ProjectionInit::Orthonormal => LinearProjection::seeded_orthonormal(channels, out, s),
            ProjectionInit::Uniform => LinearProjection::seeded_uniform(channels, out, s),
        };
        Self::new(
            channels,
            Arc::new(make(seed)?),
            Arc::new(make(seed.wrapping_add(1))?),
        )
    }

    pub fn with_branches(mut self, mask: bool, feature: bool) -> Self {
        self.mask_branch = mask;
        self.feature_branch = feature;
        self
    }

    pub fn with_tau(mut self, tau: Temperature) -> Self {
        self.tau = tau;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn self_projection(&self) -> &Arc<LinearProjection> {
        &self.self_projection
    }

    pub fn cross_projection(&self) -> &Arc<LinearProjection> {
        &self.cross_projection
    }

    /// Swaps `φ` for both branches at once.
    pub fn set_self_projection(&mut self, p: Arc<LinearProjection>) -> Result<()> {
        if p.in_channels() != self.channels {
            return Err(Error::dim("self projection channel mismatch"));
        }
        self.self_projection = p;
        Ok(())
    }

    pub fn set_cross_projection(&mut self, p: Arc<LinearProjection>) -> Result<()> {
        if p.in_channels() != self.channels {
            return Err(Error::dim("cross projection channel mismatch"));
        }
        self.cross_projection = p;
        Ok(())
    }

    fn ins_norm(&self, x: &EmbeddingMatrix, block_rows: usize) -> Result<EmbeddingMatrix> {
        let y = instance_normalize(x, block_rows, self.eps)?;
        match self.norm_scale {
            NormScale::Unit => Ok(y),
            NormScale::SqrtCount => y.scaled(((block_rows * x.cols()) as f64).sqrt()),
        }
    }

    fn check_channels(&self, c: usize) -> Result<()> {
        if c != self.channels {
            return Err(Error::dim(format!(
                "input has {c} channels, transformer expects {}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// `T̂` together with the ensemble geometry needed to reshape it back.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTemplates {
    embeddings: EmbeddingMatrix,
    n: usize,
    height: usize,
    width: usize,
}

impl EncodedTemplates {
    /// Wraps per-template maps without running the encoder (the
    /// transformer-off baseline still feeds the same downstream code).
    pub fn from_maps(maps: &[FeatureMap]) -> Result<Self> {
        let embeddings = concat_embeddings(maps)?;
        Ok(EncodedTemplates {
            embeddings,
            n: maps.len(),
            height: maps[0].height(),
            width: maps[0].width(),
        })
    }

    /// Per-template instance normalization only, the encoder-free stand-in
    /// for `T̂`.
    pub fn normalized(maps: &[FeatureMap], eps: f64) -> Result<Self> {
        let mut out = Self::from_maps(maps)?;
        let hw = out.height * out.width;
        out.embeddings = instance_normalize(&out.embeddings, hw, eps)?;
        Ok(out)
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn template(&self, i: usize) -> Result<FeatureMap> {
        if i >= self.n {
            return Err(Error::OutOfBounds(format!(
                "template {i} of an ensemble of {}",
                self.n
            )));
        }
        let hw = self.height * self.width;
        FeatureMap::from_embeddings(&self.embeddings.block(i * hw, hw)?, self.height, self.width)
    }

    pub fn latest(&self) -> Result<FeatureMap> {
        self.template(self.n - 1)
    }

    /// `T_encoded`, one `C×H×W` map per template.
    pub fn to_feature_maps(&self) -> Result<Vec<FeatureMap>> {
        (0..self.n).map(|i| self.template(i)).collect()
    }
}

/// `Ŝ_final` reshaped to the search geometry, plus the propagated mask
/// `A_TS·M′` whenever cross-attention ran.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedSearch {
    embeddings: EmbeddingMatrix,
    height: usize,
    width: usize,
    propagated_mask: Option<Vec<f64>>,
}

impl DecodedSearch {
    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn propagated_mask(&self) -> Option<&[f64]> {
        self.propagated_mask.as_deref()
    }

    /// `S_decoded ∈ R^{C×H×W}`.
    pub fn feature_map(&self) -> Result<FeatureMap> {
        FeatureMap::from_embeddings(&self.embeddings, self.height, self.width)
    }
}

/// Shared self-attention block: `InsNorm(Atten(φX, φX)·X + X)`, normalized
/// per patch of `block_rows` rows.
fn self_attend(
    x: &EmbeddingMatrix,
    block_rows: usize,
    cfg: &TransformerConfig,
) -> Result<EmbeddingMatrix> {
    let p = cfg.self_projection.project(x)?;
    let a = attention(&p, &p, cfg.tau)?;
    let mixed = transform_values(&a, x)?;
    cfg.ins_norm(&mixed.add(x)?, block_rows)
}

/// Encodes raw template maps; see [`encode`].
pub fn encode_maps(maps: &[FeatureMap], cfg: &TransformerConfig) -> Result<EncodedTemplates> {
    let first = maps.first().ok_or(Error::EmptyEnsemble)?;
    cfg.check_channels(first.channels())?;
    let t = concat_embeddings(maps)?;
    let hw = first.spatial_len();
    Ok(EncodedTemplates {
        embeddings: self_attend(&t, hw, cfg)?,
        n: maps.len(),
        height: first.height(),
        width: first.width(),
    })
}

/// `T̂ = InsNorm(A_TT·T′ + T′)` over the whole ensemble, with each template
/// normalized as its own patch.
pub fn encode(templates: &TemplateEnsemble, cfg: &TransformerConfig) -> Result<EncodedTemplates> {
    encode_maps(templates.templates(), cfg)
}

/// `Ŝ = InsNorm(A_SS·S′ + S′)`.
pub fn decode_self(search: &FeatureMap, cfg: &TransformerConfig) -> Result<EmbeddingMatrix> {
    cfg.check_channels(search.channels())?;
    let s = reshape_to_embeddings(search);
    self_attend(&s, s.rows(), cfg)
}

/// `A_TS = Atten(ϕ(Ŝ), ϕ(T̂))`, one row per search location over all
/// template locations.
pub fn cross_attention(
    s_hat: &EmbeddingMatrix,
    t_hat: &EncodedTemplates,
    cfg: &TransformerConfig,
) -> Result<AttentionMatrix> {
    if s_hat.cols() != t_hat.channels() {
        return Err(Error::dim(format!(
            "search has {} channels, templates {}",
            s_hat.cols(),
            t_hat.channels()
        )));
    }
    let q = cfg.cross_projection.project(s_hat)?;
    let k = cfg.cross_projection.project(&t_hat.embeddings)?;
    attention(&q, &k, cfg.tau)
}

/// `A_TS·M′`: each search location's attention-weighted template mask.
pub fn transported_mask(a: &AttentionMatrix, m: &MaskVector) -> Result<Vec<f64>> {
    let mut out = transform_scalars(a, m.data())?;
    // convex combinations of [0, 1] values; clip rounding spill
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// `Ŝ_mask = InsNorm((A_TS·M′) ⊗ Ŝ)`.
pub fn propagate_mask(
    a: &AttentionMatrix,
    m: &MaskVector,
    s_hat: &EmbeddingMatrix,
    cfg: &TransformerConfig,
) -> Result<EmbeddingMatrix> {
    if a.n_query() != s_hat.rows() {
        return Err(Error::dim(format!(
            "attention has {} queries, search has {} rows",
            a.n_query(),
            s_hat.rows()
        )));
    }
    let weights = transported_mask(a, m)?;
    cfg.ins_norm(&s_hat.scale_rows(&weights)?, s_hat.rows())
}

/// `Ŝ_feat = InsNorm(A_TS·(T̂ ⊗ M′) + Ŝ)`.
pub fn propagate_features(
    a: &AttentionMatrix,
    t_hat: &EncodedTemplates,
    m: &MaskVector,
    s_hat: &EmbeddingMatrix,
    cfg: &TransformerConfig,
) -> Result<EmbeddingMatrix> {
    if a.n_query() != s_hat.rows() {
        return Err(Error::dim(format!(
            "attention has {} queries, search has {} rows",
            a.n_query(),
            s_hat.rows()
        )));
    }
    let masked = t_hat.embeddings.scale_rows(m.data())?;
    let moved = transform_values(a, &masked)?;
    cfg.ins_norm(&moved.add(s_hat)?, s_hat.rows())
}

/// Full decoder. With both branches disabled the result is `Ŝ`; with one
/// branch disabled it is that branch's output alone.
pub fn decode(
    search: &FeatureMap,
    t_hat: &EncodedTemplates,
    m: &MaskVector,
    cfg: &TransformerConfig,
) -> Result<DecodedSearch> {
    if m.len() != t_hat.embeddings.rows() {
        return Err(Error::dim(format!(
            "mask of length {} for {} template locations",
            m.len(),
            t_hat.embeddings.rows()
        )));
    }
    let s_hat = decode_self(search, cfg)?;
    let (h, w) = (search.height(), search.width());
    if !cfg.mask_branch && !cfg.feature_branch {
        return Ok(DecodedSearch {
            embeddings: s_hat,
            height: h,
            width: w,
            propagated_mask: None,
        });
    }
    let a = cross_attention(&s_hat, t_hat, cfg)?;
    let moved_mask = transported_mask(&a, m)?;
    let s_mask = if cfg.mask_branch {
        Some(propagate_mask(&a, m, &s_hat, cfg)?)
    } else {
        None
    };
    let s_feat = if cfg.feature_branch {
        Some(propagate_features(&a, t_hat, m, &s_hat, cfg)?)
    } else {
        None
    };
    let embeddings = match (s_feat, s_mask) {
        (Some(f), Some(mk)) => cfg.ins_norm(&f.add(&mk)?, f.rows())?,
        (Some(only), None) | (None, Some(only)) => only,
        (None, None) => unreachable!("handled above"),
    };
    Ok(DecodedSearch {
        embeddings,
        height: h,
        width: w,
        propagated_mask: Some(moved_mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(c: usize) -> TransformerConfig {
        TransformerConfig::seeded(c, ProjectionInit::Orthonormal, 7).unwrap()
    }

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::new(
            c,
            h,
            w,
            (0..c * h * w)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn uniform_map(c: usize, h: usize, w: usize) -> FeatureMap {
        let emb: Vec<f64> = (0..c).map(|i| 0.3 + i as f64 * 0.1).collect();
        let mut data = Vec::new();
        for v in &emb {
            data.extend(std::iter::repeat_n(*v, h * w));
        }
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn shared_projection_is_one_object() {
        let c = cfg(8);
        let before = Arc::clone(c.self_projection());
        let cloned = c.clone();
        assert!(Arc::ptr_eq(c.self_projection(), cloned.self_projection()));
        assert!(Arc::ptr_eq(&before, c.self_projection()));
        assert!(!Arc::ptr_eq(c.self_projection(), c.cross_projection()));
    }

    #[test]
    fn config_rejects_wrong_projection_width() {
        let p = Arc::new(LinearProjection::seeded_uniform(4, 1, 0).unwrap());
        assert!(TransformerConfig::new(8, p.clone(), p).is_err());
    }

    #[test]
    fn encode_uniform_rows_is_a_fixed_point() {
        let c = cfg(8);
        let t = uniform_map(8, 3, 3);
        let enc = encode_maps(std::slice::from_ref(&t), &c).unwrap();
        let direct = instance_normalize(&reshape_to_embeddings(&t), 9, NORM_EPS).unwrap();
        for (a, b) in enc.embeddings().data().iter().zip(direct.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_blocks_have_unit_norm() {
        let c = cfg(8);
        let maps: Vec<_> = (0..3).map(|s| random_map(8, 3, 4, s)).collect();
        let enc = encode_maps(&maps, &c).unwrap();
        assert_eq!(enc.embeddings().rows(), 36);
        for i in 0..3 {
            assert!((enc.embeddings().block_norm(i * 12, 12) - 1.0).abs() < 1e-9);
        }
        let back = enc.to_feature_maps().unwrap();
        assert_eq!(back.len(), 3);
        assert!(back[0].same_shape(&maps[0]));
    }

    #[test]
    fn duplicated_templates_encode_identically() {
        let c = cfg(8);
        let t = random_map(8, 3, 3, 4);
        let enc = encode_maps(&[t.clone(), t], &c).unwrap();
        let (a, b) = (enc.template(0).unwrap(), enc.template(1).unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_errors() {
        let c = cfg(8);
        assert!(matches!(encode_maps(&[], &c), Err(Error::EmptyEnsemble)));
        assert!(matches!(
            encode_maps(&[random_map(4, 2, 2, 0)], &c),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            encode_maps(&[random_map(8, 2, 2, 0), random_map(8, 2, 3, 0)], &c),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn decode_self_matches_single_template_encode() {
        let c = cfg(8);
        let s = random_map(8, 4, 4, 2);
        let a = decode_self(&s, &c).unwrap();
        let b = encode_maps(std::slice::from_ref(&s), &c).unwrap();
        assert_eq!(&a, b.embeddings());
        assert!((a.frobenius_norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_embeddings_attend_uniformly() {
        let c = cfg(8);
        let s = decode_self(&uniform_map(8, 2, 2), &c).unwrap();
        let t = encode_maps(&[uniform_map(8, 2, 2), uniform_map(8, 2, 2)], &c).unwrap();
        let a = cross_attention(&s, &t, &c).unwrap();
        assert_eq!((a.n_query(), a.n_key()), (4, 8));
        for q in 0..4 {
            for k in 0..8 {
                assert!((a.get(q, k) - 0.125).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mask_of_ones_passes_search_through() {
        let c = cfg(8);
        let s = random_map(8, 3, 3, 1);
        let t = encode_maps(&[random_map(8, 3, 3, 2)], &c).unwrap();
        let s_hat = decode_self(&s, &c).unwrap();
        let a = cross_attention(&s_hat, &t, &c).unwrap();
        let ones = MaskVector::filled(9, 1.0).unwrap();
        let out = propagate_mask(&a, &ones, &s_hat, &c).unwrap();
        for (x, y) in out.data().iter().zip(s_hat.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let zeros = MaskVector::filled(9, 0.0).unwrap();
        let out = propagate_mask(&a, &zeros, &s_hat, &c).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
        let feat = propagate_features(&a, &t, &zeros, &s_hat, &c).unwrap();
        for (x, y) in feat.data().iter().zip(s_hat.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_with_branches_off_returns_self_attention() {
        let c = cfg(8).with_branches(false, false);
        let s = random_map(8, 3, 3, 5);
        let t = encode_maps(&[random_map(8, 3, 3, 6)], &c).unwrap();
        let m = MaskVector::filled(9, 0.5).unwrap();
        let d = decode(&s, &t, &m, &c).unwrap();
        assert_eq!(d.embeddings(), &decode_self(&s, &c).unwrap());
        assert!(d.propagated_mask().is_none());
    }

    #[test]
    fn decode_rejects_short_mask() {
        let c = cfg(8);
        let s = random_map(8, 3, 3, 5);
        let t = encode_maps(&[random_map(8, 3, 3, 6)], &c).unwrap();
        let m = MaskVector::filled(4, 0.5).unwrap();
        assert!(matches!(decode(&s, &t, &m, &c), Err(Error::Dimension(_))));
    }

    #[test]
    fn sqrt_count_scaling() {
        let mut c = cfg(8);
        c.norm_scale = NormScale::SqrtCount;
        let s = decode_self(&random_map(8, 2, 2, 3), &c).unwrap();
        assert!((s.frobenius_norm() - (32f64).sqrt()).abs() < 1e-9);
    }
}
