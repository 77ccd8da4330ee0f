//! Response generation: Siamese cross-correlation with a cropped template
//! kernel, and a discriminative correlation filter learned by ridge
//! regression against Gaussian labels.

use std::io::{Read, Write};
use std::path::Path;

use crate::binfmt::{self, Blob};
use crate::error::{Error, Result};
use crate::geometry::CellBox;
use crate::tensor::{FeatureMap, MaskVector};
use crate::transformer::EncodedTemplates;

pub const KERNEL_MAGIC: [u8; 4] = *b"TCTK";

/// Largest normal-equation system `solve_dcf` will assemble.
pub const MAX_DCF_UNKNOWNS: usize = 4096;

pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_LAMBDA: f64 = 1e-2;

/// `exp(−‖y − c‖² / 2σ²)` sampled at cell centers of an `H×W` grid, with
/// coordinates normalized to `[0, 1]²`: cell `(i, j)` sits at
/// `((i + 0.5)/H, (j + 0.5)/W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLabel {
    height: usize,
    width: usize,
    center: (f64, f64),
    sigma: f64,
    data: Vec<f64>,
}

impl GaussianLabel {
    pub fn new(height: usize, width: usize, center: (f64, f64), sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::param(format!("sigma must be > 0, got {sigma}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::param("label grid must be non-empty"));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(center.0) || !in_unit(center.1) {
            return Err(Error::param(format!(
                "label center {center:?} outside [0, 1]^2"
            )));
        }
        let denom = 2.0 * sigma * sigma;
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            let dy = (i as f64 + 0.5) / height as f64 - center.0;
            for j in 0..width {
                let dx = (j as f64 + 0.5) / width as f64 - center.1;
                data.push((-(dy * dy + dx * dx) / denom).exp());
            }
        }
        Ok(GaussianLabel {
            height,
            width,
            center,
            sigma,
            data,
        })
    }

    /// Label peaked exactly on the center of cell `(row, col)`.
    pub fn at_cell(height: usize, width: usize, cell: (f64, f64), sigma: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            (
                (cell.0 + 0.5) / height as f64,
                (cell.1 + 0.5) / width as f64,
            ),
            sigma,
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn to_mask(&self) -> MaskVector {
        MaskVector::new(self.data.clone()).expect("gaussian values lie in (0, 1]")
    }
}

/// Multi-channel correlation kernel plus scalar bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationKernel {
    channels: usize,
    height: usize,
    width: usize,
    /// Channel-major, like [`FeatureMap`].
    data: Vec<f64>,
    pub bias: f64,
}

impl CorrelationKernel {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        bias: f64,
    ) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::dim("kernel extents must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::dim(format!(
                "kernel {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if !bias.is_finite() || data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel"));
        }
        Ok(CorrelationKernel {
            channels,
            height,
            width,
            data,
            bias,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[inline]
    pub fn get(&self, c: usize, u: usize, v: usize) -> f64 {
        self.data[(c * self.height + u) * self.width + v]
    }

    /// Header `TCTK` with `k_h`, `k_w`; payload is the bias followed by the
    /// channel-major weights. The channel count follows from the length.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut payload = Vec::with_capacity(self.data.len() + 1);
        payload.push(self.bias);
        payload.extend_from_slice(&self.data);
        let dim = |v: usize| {
            u16::try_from(v).map_err(|_| Error::param(format!("kernel size {v} exceeds u16")))
        };
        binfmt::write_blob(
            w,
            &Blob {
                magic: KERNEL_MAGIC,
                a: dim(self.height)?,
                b: dim(self.width)?,
                payload,
            },
        )
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let blob = binfmt::read_blob(r, KERNEL_MAGIC)?;
        let area = blob.a as usize * blob.b as usize;
        let Some((bias, data)) = blob.payload.split_first() else {
            return Err(Error::Format("kernel file has no payload".into()));
        };
        if area == 0 || data.is_empty() || data.len() % area != 0 {
            return Err(Error::Format(format!(
                "{} weights do not tile a {}x{} kernel",
                data.len(),
                blob.a,
                blob.b
            )));
        }
        Self::new(
            data.len() / area,
            blob.a as usize,
            blob.b as usize,
            data.to_vec(),
            *bias,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// An `H×W` confidence map aligned with search coordinates. Only the
/// `valid` window holds correlation outputs; cells outside it are zero
/// padding and never win [`ResponseMap::argmax`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    valid: CellBox,
}

impl ResponseMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::with_valid(
            height,
            width,
            data,
            CellBox {
                row: 0,
                col: 0,
                height,
                width,
            },
        )
    }

    pub fn with_valid(height: usize, width: usize, data: Vec<f64>, valid: CellBox) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "{height}x{width} response needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if !valid.fits(height, width) {
            return Err(Error::dim(format!(
                "valid window {valid:?} outside {height}x{width}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response map"));
        }
        Ok(ResponseMap {
            height,
            width,
            data,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid(&self) -> CellBox {
        self.valid
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Largest value inside the valid window; ties go to the smallest
    /// row-major index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (self.valid.row, self.valid.col);
        let mut best_v = f64::NEG_INFINITY;
        for r in self.valid.row..self.valid.row + self.valid.height {
            for c in self.valid.col..self.valid.col + self.valid.width {
                let v = self.get(r, c);
                if v > best_v {
                    best_v = v;
                    best = (r, c);
                }
            }
        }
        best
    }

    pub fn max_value(&self) -> f64 {
        let (r, c) = self.argmax();
        self.get(r, c)
    }

    /// Multiplies every cell by the matching weight.
    pub fn weighted(&self, weights: &[f64]) -> Result<ResponseMap> {
        if weights.len() != self.data.len() {
            return Err(Error::dim("weight map size differs from response"));
        }
        ResponseMap::with_valid(
            self.height,
            self.width,
            self.data.iter().zip(weights).map(|(a, b)| a * b).collect(),
            self.valid,
        )
    }
}

/// `r = k ∗ x + b·1`: valid-mode cross-correlation summed over channels,
/// written back into an `H×W` map so that output cell `(i, j)` scores a
/// kernel centered on search cell `(i, j)`.
pub fn cross_correlate(kernel: &CorrelationKernel, search: &FeatureMap) -> Result<ResponseMap> {
    if kernel.channels != search.channels() {
        return Err(Error::dim(format!(
            "kernel has {} channels, search {}",
            kernel.channels,
            search.channels()
        )));
    }
    let (h, w) = (search.height(), search.width());
    if kernel.height > h || kernel.width > w {
        return Err(Error::dim(format!(
            "{}x{} kernel larger than {h}x{w} search",
            kernel.height, kernel.width
        )));
    }
    let out_h = h - kernel.height + 1;
    let out_w = w - kernel.width + 1;
    let (oh, ow) = ((kernel.height - 1) / 2, (kernel.width - 1) / 2);
    let mut valid = vec![kernel.bias; out_h * out_w];
    let s = search.data();
    for c in 0..kernel.channels {
        for u in 0..kernel.height {
            for v in 0..kernel.width {
                let k = kernel.get(c, u, v);
                if k == 0.0 {
                    continue;
                }
                for p in 0..out_h {
                    let src = &s[(c * h + p + u) * w + v..(c * h + p + u) * w + v + out_w];
                    let dst = &mut valid[p * out_w..(p + 1) * out_w];
                    for (d, x) in dst.iter_mut().zip(src) {
                        *d += k * x;
                    }
                }
            }
        }
    }
    let mut data = vec![0.0; h * w];
    for p in 0..out_h {
        data[(p + oh) * w + ow..(p + oh) * w + ow + out_w]
            .copy_from_slice(&valid[p * out_w..(p + 1) * out_w]);
    }
    ResponseMap::with_valid(
        h,
        w,
        data,
        CellBox {
            row: oh,
            col: ow,
            height: out_h,
            width: out_w,
        },
    )
}

/// The `C×k_h×k_w` sub-tensor of `fm` under `target`, with zero bias.
pub fn crop_kernel(fm: &FeatureMap, target: CellBox) -> Result<CorrelationKernel> {
    if !target.fits(fm.height(), fm.width()) {
        return Err(Error::OutOfBounds(format!(
            "box {target:?} outside {}x{} map",
            fm.height(),
            fm.width()
        )));
    }
    let mut data = Vec::with_capacity(fm.channels() * target.height * target.width);
    for c in 0..fm.channels() {
        for u in 0..target.height {
            for v in 0..target.width {
                data.push(fm.get(c, target.row + u, target.col + v));
            }
        }
    }
    CorrelationKernel::new(fm.channels(), target.height, target.width, data, 0.0)
}

/// Siamese model: the target region of the most recent encoded template.
pub fn crop_target_kernel(
    encoded: &EncodedTemplates,
    target: CellBox,
) -> Result<CorrelationKernel> {
    crop_kernel(&encoded.latest()?, target)
}

/// Minimizes `Σᵢ ‖f ∗ Tᵢ − yᵢ‖² + λ‖f‖²` exactly.
///
/// The correlation is evaluated over valid positions only; position `(p, q)`
/// is scored against the label at its center cell `(p + ⌊(k_h−1)/2⌋,
/// q + ⌊(k_w−1)/2⌋)`, matching [`cross_correlate`]. The regularized normal
/// equations are assembled densely and solved by Cholesky factorization.
pub fn solve_dcf(
    templates: &[FeatureMap],
    labels: &[GaussianLabel],
    lambda: f64,
    kernel_size: (usize, usize),
) -> Result<CorrelationKernel> {
    let first = templates.first().ok_or(Error::EmptyEnsemble)?;
    if labels.len() != templates.len() {
        return Err(Error::dim(format!(
            "{} labels for {} templates",
            labels.len(),
            templates.len()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::param(format!("lambda must be >= 0, got {lambda}")));
    }
    let (kh, kw) = kernel_size;
    let (c, h, w) = (first.channels(), first.height(), first.width());
    if kh == 0 || kw == 0 || kh > h || kw > w {
        return Err(Error::dim(format!(
            "{kh}x{kw} kernel for {h}x{w} templates"
        )));
    }
    for (t, y) in templates.iter().zip(labels) {
        if !t.same_shape(first) {
            return Err(Error::dim("templates differ in shape"));
        }
        if y.height() != h || y.width() != w {
            return Err(Error::dim(format!(
                "{}x{} label for {h}x{w} template",
                y.height(),
                y.width()
            )));
        }
    }
    let d = c * kh * kw;
    if d > MAX_DCF_UNKNOWNS {
        return Err(Error::param(format!(
            "{d} filter coefficients exceed the dense solver limit of {MAX_DCF_UNKNOWNS}"
        )));
    }

    let (out_h, out_w) = (h - kh + 1, w - kw + 1);
    let (oh, ow) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut x = vec![0.0; d];
    for (t, y) in templates.iter().zip(labels) {
        for p in 0..out_h {
            for q in 0..out_w {
                let mut j = 0;
                for ch in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            x[j] = t.get(ch, p + u, q + v);
                            j += 1;
                        }
                    }
                }
                let target = y.get(p + oh, q + ow);
                for a in 0..d {
                    let xa = x[a];
                    if xa == 0.0 {
                        continue;
                    }
                    rhs[a] += xa * target;
                    let row = &mut gram[a * d..a * d + a + 1];
                    for (g, xb) in row.iter_mut().zip(&x[..=a]) {
                        *g += xa * xb;
                    }
                }
            }
        }
    }
    for a in 0..d {
        gram[a * d + a] += lambda;
    }
    let f = cholesky_solve(&mut gram, &rhs, d)
        .ok_or_else(|| Error::param("normal equations are singular; use lambda > 0".to_string()))?;
    CorrelationKernel::new(c, kh, kw, f, 0.0)
}

/// Solves `G·x = b` for symmetric positive definite `G` whose lower triangle
/// (row-major, `n×n`) is filled. Overwrites `g` with its Cholesky factor.
/// Returns `None` when a pivot is not safely positive.
fn cholesky_solve(g: &mut [f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let scale = (0..n).map(|i| g[i * n + i].abs()).fold(0.0, f64::max);
    let tiny = scale * 1e-13;
    for j in 0..n {
        let mut diag = g[j * n + j];
        for k in 0..j {
            diag -= g[j * n + k] * g[j * n + k];
        }
        if !(diag > tiny) {
            return None;
        }
        let l_jj = diag.sqrt();
        g[j * n + j] = l_jj;
        for i in j + 1..n {
            let mut s = g[i * n + j];
            for k in 0..j {
                s -= g[i * n + k] * g[j * n + k];
            }
            g[i * n + j] = s / l_jj;
        }
    }
    // L·z = b
    let mut z = b.to_vec();
    for i in 0..n {
        let mut s = z[i];
        for k in 0..i {
            s -= g[i * n + k] * z[k];
        }
        z[i] = s / g[i * n + i];
    }
    // Lᵀ·x = z
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= g[k * n + i] * z[k];
        }
        z[i] = s / g[i * n + i];
    }
    Some(z)
}
