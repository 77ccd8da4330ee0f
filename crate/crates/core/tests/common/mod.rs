//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls into the library's numeric kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use tct_core::models::{CorrelationKernel, GaussianLabel};

use tct_core::attention::LinearProjection;
use tct_core::tensor::{EmbeddingMatrix, FeatureMap, MaskVector};
use tct_core::transformer::TransformerConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows, cols, random_vec(rng, rows * cols)).unwrap()
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, random_vec(rng, c * h * w)).unwrap()
}

/// Row-wise softmax of cosine similarities, written out longhand.
pub fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let k: Vec<Vec<f64>> = k.iter().map(unit).collect();
    q.iter()
        .map(|qi| {
            let qi = unit(qi);
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        })
        .collect()
}

pub fn rows(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Valid-mode correlation at the top-left offset `(p, q)`.
fn correlate_at(
    f: &[f64],
    c: usize,
    kh: usize,
    kw: usize,
    x: &FeatureMap,
    p: usize,
    q: usize,
) -> f64 {
    let mut s = 0.0;
    for ch in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                s += f[(ch * kh + u) * kw + v] * x.get(ch, p + u, q + v);
            }
        }
    }
    s
}

/// Four-loop correlation, zero-padded and centered to the search size.
pub fn naive_correlate(k: &CorrelationKernel, x: &FeatureMap) -> Vec<f64> {
    let (h, w) = (x.height(), x.width());
    let (kh, kw) = (k.height(), k.width());
    let (oh, ow) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; h * w];
    for p in 0..=h - kh {
        for q in 0..=w - kw {
            out[(p + oh) * w + q + ow] =
                correlate_at(k.data(), k.channels(), kh, kw, x, p, q) + k.bias;
        }
    }
    out
}

/// `Σᵢ ‖f ∗ Tᵢ − yᵢ‖² + λ‖f‖²` and its gradient, over valid positions with
/// labels read at the center cell.
pub fn ridge_objective(
    f: &[f64],
    templates: &[FeatureMap],
    labels: &[GaussianLabel],
    lambda: f64,
    (kh, kw): (usize, usize),
) -> (f64, Vec<f64>) {
    let c = templates[0].channels();
    let (oh, ow) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut value = lambda * f.iter().map(|v| v * v).sum::<f64>();
    let mut grad: Vec<f64> = f.iter().map(|v| 2.0 * lambda * v).collect();
    for (t, y) in templates.iter().zip(labels) {
        for p in 0..=t.height() - kh {
            for q in 0..=t.width() - kw {
                let r = correlate_at(f, c, kh, kw, t, p, q) - y.get(p + oh, q + ow);
                value += r * r;
                for ch in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            grad[(ch * kh + u) * kw + v] += 2.0 * r * t.get(ch, p + u, q + v);
                        }
                    }
                }
            }
        }
    }
    (value, grad)
}

/// Gradient descent with a fixed step below `1/L`, where `L` bounds the
/// Hessian's largest eigenvalue by power iteration.
pub fn gradient_descent_dcf(
    templates: &[FeatureMap],
    labels: &[GaussianLabel],
    lambda: f64,
    size: (usize, usize),
    steps: usize,
) -> Vec<f64> {
    let n = templates[0].channels() * size.0 * size.1;
    let zero = vec![0.0; n];
    let (_, g0) = ridge_objective(&zero, templates, labels, lambda, size);
    // Hessian-vector product: grad(v) − grad(0) = H·v for a quadratic.
    let hv = |v: &[f64]| {
        let (_, g) = ridge_objective(v, templates, labels, lambda, size);
        g.iter().zip(&g0).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let mut v = vec![1.0; n];
    let mut l = 1.0;
    for _ in 0..100 {
        let w = hv(&v);
        l = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / l).collect();
    }
    let step = 1.0 / (1.05 * l);
    let mut f = zero;
    for _ in 0..steps {
        let (_, g) = ridge_objective(&f, templates, labels, lambda, size);
        for (fi, gi) in f.iter_mut().zip(&g) {
            *fi -= step * gi;
        }
    }
    f
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(1e-300)
}

/// A random DCF instance within the acceptance bounds.
pub struct DcfInstance {
    pub templates: Vec<FeatureMap>,
    pub labels: Vec<GaussianLabel>,
    pub lambda: f64,
    pub size: (usize, usize),
}

pub fn random_dcf_instance(seed: u64) -> DcfInstance {
    let mut r = rng(seed);
    let c = r.random_range(1..=4);
    let kh = r.random_range(1..=3);
    let kw = r.random_range(1..=3);
    let h = r.random_range(10..=16);
    let w = r.random_range(10..=16);
    let n = r.random_range(1..=3);
    let templates: Vec<FeatureMap> = (0..n).map(|_| random_map(&mut r, c, h, w)).collect();
    let labels = (0..n)
        .map(|_| {
            let center = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
            GaussianLabel::new(h, w, center, 0.1).unwrap()
        })
        .collect();
    DcfInstance {
        templates,
        labels,
        lambda: 10f64.powf(r.random_range(-1.0..0.0)),
        size: (kh, kw),
    }
}

/// One randomized case of the attention algebra: row-stochasticity,
/// agreement with the longhand softmax, scale invariance, key-permutation
/// equivariance and temperature monotonicity.
pub fn attention_case(seed: u64) -> Result<(), String> {
    use tct_core::attention::{attention, transform_values, Temperature};

    let mut r = rng(seed);
    let nq = r.random_range(1..=6);
    let nk = r.random_range(2..=8);
    let c = r.random_range(1..=6);
    let q = random_matrix(&mut r, nq, c);
    let k = random_matrix(&mut r, nk, c);
    let v = random_matrix(&mut r, nk, c);
    let tau = Temperature::new(r.random_range(0.05..2.0)).unwrap();
    let a = attention(&q, &k, tau).map_err(|e| e.to_string())?;

    let oracle = naive_attention(&rows(&q), &rows(&k), tau.value());
    for i in 0..nq {
        let row = a.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
            return Err(format!("seed {seed}: row {i} not stochastic: {row:?}"));
        }
        for (x, y) in row.iter().zip(&oracle[i]) {
            if (x - y).abs() > 1e-12 {
                return Err(format!("seed {seed}: {x} vs oracle {y}"));
            }
        }
    }

    let alpha = r.random_range(0.01..100.0);
    let beta = r.random_range(0.01..100.0);
    let scaled = attention(&q.scaled(alpha).unwrap(), &k.scaled(beta).unwrap(), tau).unwrap();
    for (x, y) in scaled.as_matrix().data().iter().zip(a.as_matrix().data()) {
        if (x - y).abs() > 1e-12 {
            return Err(format!(
                "seed {seed}: scale by ({alpha}, {beta}) moved {y} to {x}"
            ));
        }
    }

    let mut perm: Vec<usize> = (0..nk).collect();
    for i in (1..nk).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let permute = |m: &EmbeddingMatrix| {
        EmbeddingMatrix::from_rows(&perm.iter().map(|&p| m.row(p).to_vec()).collect::<Vec<_>>())
            .unwrap()
    };
    let ap = attention(&q, &permute(&k), tau).unwrap();
    for i in 0..nq {
        for (j, &p) in perm.iter().enumerate() {
            if (ap.get(i, j) - a.get(i, p)).abs() > 1e-12 {
                return Err(format!(
                    "seed {seed}: permuted weight mismatch at ({i},{j})"
                ));
            }
        }
    }
    let out = transform_values(&a, &v).unwrap();
    let out_p = transform_values(&ap, &permute(&v)).unwrap();
    for (x, y) in out.data().iter().zip(out_p.data()) {
        if (x - y).abs() > 1e-12 {
            return Err(format!("seed {seed}: transform not permutation invariant"));
        }
    }

    let taus =
        [1.0, 0.2, 1.0 / 30.0].map(|t| attention(&q, &k, Temperature::new(t).unwrap()).unwrap());
    let q_unit = naive_attention(&rows(&q), &rows(&k), 1e9);
    for i in 0..nq {
        // equal logits have equal weights at any temperature
        let flat = q_unit[i].iter().all(|x| (x - q_unit[i][0]).abs() < 1e-15);
        if flat {
            continue;
        }
        let peaks: Vec<f64> = taus
            .iter()
            .map(|t| t.row(i).iter().cloned().fold(0.0, f64::max))
            .collect();
        if !(peaks[0] < peaks[1] && (peaks[1] < peaks[2] || peaks[2] == 1.0)) {
            return Err(format!(
                "seed {seed}: row {i} peaks not increasing: {peaks:?}"
            ));
        }
    }
    Ok(())
}

pub const GRID: usize = 3;
pub const CELLS: usize = GRID * GRID;
pub const CHANNELS: usize = 4 * CELLS;

/// Projections that keep only the first `CELLS` channels, so one-hot
/// embeddings in those channels stay orthogonal after projection.
pub fn selector_config() -> TransformerConfig {
    let mut w = vec![0.0; CELLS * CHANNELS];
    for i in 0..CELLS {
        w[i * CHANNELS + i] = 1.0;
    }
    let p = Arc::new(LinearProjection::from_weights(CELLS, CHANNELS, w).unwrap());
    TransformerConfig::new(CHANNELS, p.clone(), p).unwrap()
}

/// Search map whose cell `p` holds the unit vector `e_p`, and a template
/// holding the same cells shuffled: template cell `j` equals search cell
/// `perm[j]`.
pub fn shuffled_pair(perm: &[usize]) -> (FeatureMap, FeatureMap) {
    let one_hot = |cell_of: &dyn Fn(usize) -> usize| {
        let mut data = vec![0.0; CHANNELS * CELLS];
        for j in 0..CELLS {
            data[cell_of(j) * CELLS + j] = 1.0;
        }
        FeatureMap::new(CHANNELS, GRID, GRID, data).unwrap()
    };
    (one_hot(&|j| j), one_hot(&|j| perm[j]))
}

pub fn gaussian_mask(center: usize) -> MaskVector {
    let (cr, cc) = ((center / GRID) as f64, (center % GRID) as f64);
    MaskVector::new(
        (0..CELLS)
            .map(|p| {
                let (r, c) = ((p / GRID) as f64, (p % GRID) as f64);
                (-((r - cr).powi(2) + (c - cc).powi(2)) / 2.0).exp()
            })
            .collect(),
    )
    .unwrap()
}
