//! Single-head attention with ℓ2-normalized queries and keys, and the 1×1
//! channel-reducing projections that feed it.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::binfmt::{self, Blob};
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize_rows, matmul_transposed, EmbeddingMatrix, NORM_EPS};

/// Magic tag of projection-weight files.
pub const WEIGHTS_MAGIC: [u8; 4] = *b"TCTW";

/// Softmax temperature; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub const DEFAULT: Temperature = Temperature(1.0 / 30.0);

    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Temperature(tau))
        } else {
            Err(Error::param(format!("temperature must be > 0, got {tau}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Bias-free 1×1 projection `X ↦ X·Wᵀ` from `in_channels` to `out_channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProjection {
    in_channels: usize,
    out_channels: usize,
    /// `out_channels × in_channels`, row-major.
    weights: EmbeddingMatrix,
}

/// Default reduced width: `⌈C/4⌉`.
pub fn reduced_channels(c: usize) -> usize {
    c.div_ceil(4)
}

impl LinearProjection {
    pub fn from_weights(
        out_channels: usize,
        in_channels: usize,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let weights = EmbeddingMatrix::new(out_channels, in_channels, weights)?;
        Ok(LinearProjection {
            in_channels,
            out_channels,
            weights,
        })
    }

    /// Weights drawn uniformly from `[−1/√C, 1/√C]`.
    pub fn seeded_uniform(in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (in_channels as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..in_channels * out_channels)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Self::from_weights(out_channels, in_channels, w)
    }

    /// Random projection with orthonormal rows, so inner products between
    /// embeddings are roughly preserved (up to the dimension ratio).
    pub fn seeded_orthonormal(in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        if out_channels > in_channels {
            return Err(Error::param(format!(
                "cannot build {out_channels} orthonormal rows in {in_channels} dimensions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(out_channels);
        while rows.len() < out_channels {
            let mut v: Vec<f64> = (0..in_channels)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                rows.push(v);
            }
        }
        Self::from_weights(out_channels, in_channels, rows.concat())
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &EmbeddingMatrix {
        &self.weights
    }

    pub fn project(&self, x: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if x.cols() != self.in_channels {
            return Err(Error::dim(format!(
                "projection expects {} channels, input has {}",
                self.in_channels,
                x.cols()
            )));
        }
        matmul_transposed(x, &self.weights)
    }

    /// Header `TCTW`, `C` and `C/4` as little-endian u16, then the weights
    /// as little-endian f64, row-major.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let blob = Blob {
            magic: WEIGHTS_MAGIC,
            a: dim16(self.in_channels)?,
            b: dim16(self.out_channels)?,
            payload: self.weights.data().to_vec(),
        };
        binfmt::write_blob(w, &blob)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let blob = binfmt::read_blob(r, WEIGHTS_MAGIC)?;
        let (c, out) = (blob.a as usize, blob.b as usize);
        if blob.payload.len() != c * out {
            return Err(Error::Format(format!(
                "weights header says {out}x{c} but payload holds {} values",
                blob.payload.len()
            )));
        }
        Self::from_weights(out, c, blob.payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn dim16(v: usize) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::param(format!("dimension {v} does not fit in u16")))
}

/// Row-stochastic `Nq×Nk` propagation matrix: row `q` holds the weights of
/// query `q` over all keys.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    inner: EmbeddingMatrix,
}

impl AttentionMatrix {
    pub fn n_query(&self) -> usize {
        self.inner.rows()
    }

    pub fn n_key(&self) -> usize {
        self.inner.cols()
    }

    pub fn get(&self, q: usize, k: usize) -> f64 {
        self.inner.get(q, k)
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.inner.row(q)
    }

    pub fn as_matrix(&self) -> &EmbeddingMatrix {
        &self.inner
    }

    /// Wraps a caller-supplied matrix after checking that every row is a
    /// probability distribution.
    pub fn from_matrix(m: EmbeddingMatrix) -> Result<Self> {
        for q in 0..m.rows() {
            let row = m.row(q);
            if row.iter().any(|v| *v < 0.0) {
                return Err(Error::param(format!(
                    "attention row {q} has a negative weight"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::param(format!("attention row {q} sums to {s}")));
            }
        }
        Ok(AttentionMatrix { inner: m })
    }
}

/// `Softmax(Q̄K̄ᵀ/τ)` normalized over keys, so each query row sums to one.
pub fn attention(
    q: &EmbeddingMatrix,
    k: &EmbeddingMatrix,
    tau: Temperature,
) -> Result<AttentionMatrix> {
    if q.cols() != k.cols() {
        return Err(Error::dim(format!(
            "query width {} differs from key width {}",
            q.cols(),
            k.cols()
        )));
    }
    let qn = l2_normalize_rows(q, NORM_EPS);
    let kn = l2_normalize_rows(k, NORM_EPS);
    let logits = matmul_transposed(&qn, &kn)?;
    let inv_tau = 1.0 / tau.value();
    let nk = k.rows();
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(nk) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) * inv_tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(AttentionMatrix {
        inner: EmbeddingMatrix::from_parts(q.rows(), nk, data)?,
    })
}

/// `A·V`: every output row is the attention-weighted mix of value rows.
pub fn transform_values(a: &AttentionMatrix, v: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    if a.n_key() != v.rows() {
        return Err(Error::dim(format!(
            "attention over {} keys applied to {} value rows",
            a.n_key(),
            v.rows()
        )));
    }
    crate::tensor::matmul(&a.inner, v)
}

/// `A·m` for a column of per-key scalars.
pub fn transform_scalars(a: &AttentionMatrix, values: &[f64]) -> Result<Vec<f64>> {
    if a.n_key() != values.len() {
        return Err(Error::dim(format!(
            "attention over {} keys applied to {} values",
            a.n_key(),
            values.len()
        )));
    }
    Ok((0..a.n_query())
        .map(|q| a.row(q).iter().zip(values).map(|(w, v)| w * v).sum())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
        assert_eq!(Temperature::default().value(), 1.0 / 30.0);
    }

    #[test]
    fn reduced_width_is_quarter_rounded_up() {
        assert_eq!(reduced_channels(512), 128);
        assert_eq!(reduced_channels(4), 1);
        assert_eq!(reduced_channels(5), 2);
    }

    #[test]
    fn selector_projection() {
        let p = LinearProjection::from_weights(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let y = p.project(&m(&[&[7.0, 8.0, 9.0, 10.0]])).unwrap();
        assert_eq!(y.data(), &[7.0]);

        let z = LinearProjection::from_weights(1, 4, vec![0.0; 4]).unwrap();
        assert_eq!(
            z.project(&m(&[&[7.0, 8.0, 9.0, 10.0]])).unwrap().data(),
            &[0.0]
        );
    }

    #[test]
    fn projection_channel_mismatch() {
        let p = LinearProjection::seeded_uniform(8, 2, 1).unwrap();
        assert!(matches!(
            p.project(&m(&[&[1.0, 2.0]])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn projection_matches_naive_oracle() {
        let p = LinearProjection::seeded_uniform(8, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = EmbeddingMatrix::new(4, 8, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let y = p.project(&x).unwrap();
        for n in 0..4 {
            for o in 0..2 {
                let mut s = 0.0;
                for c in 0..8 {
                    s += x.get(n, c) * p.weights().get(o, c);
                }
                assert!((y.get(n, o) - s).abs() < 1e-14);
            }
        }
        let bound = 1.0 / 8f64.sqrt();
        assert!(p.weights().data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn orthonormal_rows() {
        let p = LinearProjection::seeded_orthonormal(16, 4, 5).unwrap();
        let w = p.weights();
        for i in 0..4 {
            for j in 0..4 {
                let d: f64 = w.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_file_round_trip() {
        let p = LinearProjection::seeded_uniform(12, 3, 11).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"TCTW");
        assert_eq!(&buf[4..8], &[12, 0, 3, 0]);
        assert_eq!(buf.len(), 8 + 36 * 8);
        assert_eq!(LinearProjection::read_from(&buf[..]).unwrap(), p);

        buf[0] = b'X';
        assert!(LinearProjection::read_from(&buf[..]).is_err());
    }

    #[test]
    fn single_key_gives_all_ones() {
        let a = attention(
            &m(&[&[1.0, 2.0], &[-3.0, 0.5]]),
            &m(&[&[0.2, 0.1]]),
            Temperature::DEFAULT,
        )
        .unwrap();
        assert_eq!(a.as_matrix().data(), &[1.0, 1.0]);
    }

    #[test]
    fn two_key_softmax_by_hand() {
        let q = m(&[&[1.0, 0.0]]);
        let k = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let a = attention(&q, &k, Temperature::new(1.0).unwrap()).unwrap();
        let e = std::f64::consts::E;
        assert!((a.get(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((a.get(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((a.get(0, 0) - 0.7311).abs() < 1e-4);

        let sharp = attention(&q, &k, Temperature::DEFAULT).unwrap();
        let tail = 1.0 / (30f64.exp() + 1.0);
        assert!((tail - 9.36e-14).abs() < 1e-16);
        assert!((sharp.get(0, 1) - tail).abs() < 1e-20);
        assert!((sharp.get(0, 0) - (1.0 - tail)).abs() < 1e-15);
    }

    #[test]
    fn attention_width_mismatch() {
        let r = attention(&m(&[&[1.0, 0.0]]), &m(&[&[1.0]]), Temperature::DEFAULT);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn one_hot_selects_rows() {
        let a = AttentionMatrix::from_matrix(m(&[&[0.0, 0.0, 1.0], &[1.0, 0.0, 0.0]])).unwrap();
        let v = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let y = transform_values(&a, &v).unwrap();
        assert_eq!(y.data(), &[5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn uniform_weights_average() {
        let a = AttentionMatrix::from_matrix(m(&[&[0.25; 4], &[0.25; 4]])).unwrap();
        let v = m(&[&[1.0, 0.0], &[3.0, 4.0], &[5.0, 8.0], &[7.0, 0.0]]);
        let y = transform_values(&a, &v).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0, 4.0, 3.0]);
    }

    #[test]
    fn transform_rejects_mismatch() {
        let a = AttentionMatrix::from_matrix(m(&[&[0.5, 0.5]])).unwrap();
        assert!(transform_values(&a, &m(&[&[1.0]])).is_err());
        assert!(AttentionMatrix::from_matrix(m(&[&[0.5, 0.6]])).is_err());
    }

    fn stochastic(rows: usize, cols: usize) -> impl Strategy<Value = AttentionMatrix> {
        prop::collection::vec(0.01f64..1.0, rows * cols).prop_map(move |mut d| {
            for row in d.chunks_mut(cols) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            AttentionMatrix::from_matrix(EmbeddingMatrix::new(rows, cols, d).unwrap()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn transform_matches_triple_loop(
            a in stochastic(3, 4),
            v in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let v = EmbeddingMatrix::new(4, 2, v).unwrap();
            let y = transform_values(&a, &v).unwrap();
            let direct = matmul(a.as_matrix(), &v).unwrap();
            for q in 0..3 {
                for c in 0..2 {
                    let mut s = 0.0;
                    for k in 0..4 {
                        s += a.get(q, k) * v.get(k, c);
                    }
                    prop_assert!((y.get(q, c) - s).abs() < 1e-12);
                    prop_assert_eq!(y.get(q, c), direct.get(q, c));
                }
            }
        }
    }
}
