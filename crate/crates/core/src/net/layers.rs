//! Individual TSMNet layers, each with an explicit backward pass.
//!
//! Trial tensors are stored per observation: a raw trial is a `P × T`
//! matrix, a temporal-filter output stacks the `F` filtered copies into an
//! `(F·P) × T` matrix with row index `f·P + p`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matfun::{spd_map, spd_map_backward, symmetrize, ScalarFun, SpdMatrix, SymMatrix};
use crate::optim::{stiefel_defect, STIEFEL_TOL};

/// Source index of every position of a reflect-padded row of length `len`.
fn reflect_indices(len: usize, left: usize, right: usize) -> Vec<usize> {
    let n = len as isize;
    (0..len + left + right)
        .map(|i| {
            let j = i as isize - left as isize;
            let j = if j < 0 { -j } else if j >= n { 2 * (n - 1) - j } else { j };
            j as usize
        })
        .collect()
}

/// Bank of `F` temporal FIR filters applied to every channel, reflect "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TempConv {
    /// `F × K` kernel matrix.
    pub kernels: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct TempConvTape {
    /// Row-major reflect-padded input, `P` rows of length `T + K − 1`.
    padded: Vec<f64>,
    index: Vec<usize>,
    channels: usize,
    time: usize,
}

impl TempConv {
    pub fn filters(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernels.ncols()
    }

    fn padding(&self) -> (usize, usize) {
        let k = self.kernel_len();
        let left = (k - 1) / 2;
        (left, k - 1 - left)
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, TempConvTape)> {
        let (p, t) = x.shape();
        let k = self.kernel_len();
        if t < k {
            return Err(Error::invalid(format!("temporal convolution needs at least {k} samples, got {t}")));
        }
        let (left, right) = self.padding();
        let index = reflect_indices(t, left, right);
        let width = index.len();
        let mut padded = vec![0.0; p * width];
        for ch in 0..p {
            for (c, &src) in index.iter().enumerate() {
                padded[ch * width + c] = x[(ch, src)];
            }
        }
        let f = self.filters();
        let mut out = vec![0.0; f * p * t];
        for fi in 0..f {
            for ch in 0..p {
                let dst = &mut out[(fi * p + ch) * t..(fi * p + ch + 1) * t];
                let row = &padded[ch * width..(ch + 1) * width];
                for ki in 0..k {
                    let w = self.kernels[(fi, ki)];
                    for (o, &v) in dst.iter_mut().zip(&row[ki..ki + t]) {
                        *o += w * v;
                    }
                }
            }
        }
        Ok((DMatrix::from_row_slice(f * p, t, &out), TempConvTape { padded, index, channels: p, time: t }))
    }

    fn upstream_rows(upstream: &DMatrix<f64>) -> Vec<f64> {
        upstream.transpose().as_slice().to_vec()
    }

    /// Kernel gradient for the upstream `(F·P) × T` gradient.
    pub fn kernel_grad(&self, tape: &TempConvTape, upstream: &DMatrix<f64>) -> DMatrix<f64> {
        let (p, t, width) = (tape.channels, tape.time, tape.index.len());
        let (f, k) = (self.filters(), self.kernel_len());
        let up = Self::upstream_rows(upstream);
        let mut dk = DMatrix::zeros(f, k);
        for fi in 0..f {
            for ch in 0..p {
                let g = &up[(fi * p + ch) * t..(fi * p + ch + 1) * t];
                let row = &tape.padded[ch * width..(ch + 1) * width];
                for ki in 0..k {
                    dk[(fi, ki)] += g.iter().zip(&row[ki..ki + t]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        dk
    }

    /// Kernel gradient and input gradient.
    pub fn backward(&self, tape: &TempConvTape, upstream: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (p, t, width) = (tape.channels, tape.time, tape.index.len());
        let (f, k) = (self.filters(), self.kernel_len());
        let up = Self::upstream_rows(upstream);
        let mut dpad = vec![0.0; p * width];
        for fi in 0..f {
            for ch in 0..p {
                let g = &up[(fi * p + ch) * t..(fi * p + ch + 1) * t];
                let row = &mut dpad[ch * width..(ch + 1) * width];
                for ki in 0..k {
                    let w = self.kernels[(fi, ki)];
                    for (d, &gv) in row[ki..ki + t].iter_mut().zip(g) {
                        *d += w * gv;
                    }
                }
            }
        }
        let mut dx = DMatrix::zeros(p, t);
        for ch in 0..p {
            for (c, &src) in tape.index.iter().enumerate() {
                dx[(ch, src)] += dpad[ch * width + c];
            }
        }
        (self.kernel_grad(tape, upstream), dx)
    }
}

/// Spatio-spectral filters: a full-height linear map over the stacked rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatConv {
    /// `S × (F·P)` weights; column `f·P + p` multiplies filter `f`, channel `p`.
    pub weights: DMatrix<f64>,
}

impl SpatConv {
    pub fn forward(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if h.nrows() != self.weights.ncols() {
            return Err(Error::invalid(format!(
                "spatial convolution expects {} stacked rows, got {}",
                self.weights.ncols(),
                h.nrows()
            )));
        }
        Ok(&self.weights * h)
    }

    /// Weight gradient and input gradient.
    pub fn backward(&self, h: &DMatrix<f64>, upstream: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (upstream * h.transpose(), self.weights.transpose() * upstream)
    }
}

/// Row-centered samples of a trial, `X̃`.
pub fn center_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    c
}

/// Sample covariance `X̃X̃ᵀ / (T−1)`; returns it with the centered input.
pub fn cov_pool_forward(x: &DMatrix<f64>) -> Result<(SymMatrix, DMatrix<f64>)> {
    let t = x.ncols();
    if t < 2 {
        return Err(Error::invalid(format!("covariance pooling needs at least 2 samples, got {t}")));
    }
    let centered = center_rows(x);
    let z = &centered * centered.transpose() / (t as f64 - 1.0);
    Ok((SymMatrix::from_symmetrized(z), centered))
}

/// Input gradient of covariance pooling given the centered input.
pub fn cov_pool_backward(centered: &DMatrix<f64>, upstream: &DMatrix<f64>) -> DMatrix<f64> {
    let t = centered.ncols() as f64;
    // Rows of the result already sum to zero, so the centering adjoint is a no-op.
    (upstream + upstream.transpose()) * centered / (t - 1.0)
}

fn check_bimap(w: &DMatrix<f64>) -> Result<()> {
    let defect = stiefel_defect(w);
    if !(defect < STIEFEL_TOL) {
        return Err(Error::ModelState(format!("BiMap weight left the Stiefel manifold: ‖WᵀW − I‖_F = {defect:e}")));
    }
    Ok(())
}

/// `WᵀZW` for a Stiefel `W`.
pub fn bimap_forward(z: &SymMatrix, w: &DMatrix<f64>) -> Result<SymMatrix> {
    check_bimap(w)?;
    if z.dim() != w.nrows() {
        return Err(Error::invalid(format!("BiMap expects {}×{} inputs, got {}", w.nrows(), w.nrows(), z.dim())));
    }
    Ok(SymMatrix::from_symmetrized(w.transpose() * z.matrix() * w))
}

/// Input gradient `W·Ḡ·Wᵀ` and Euclidean weight gradient `2·Z·W·Ḡ` (Ḡ = sym(upstream)).
pub fn bimap_backward(z: &SymMatrix, w: &DMatrix<f64>, upstream: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let g = symmetrize(upstream);
    let dz = symmetrize(&(w * &g * w.transpose()));
    let dw = z.matrix() * w * &g * 2.0;
    (dz, dw)
}

/// Eigenvalue rectification; also reports how many eigenvalues were clipped.
pub fn reeig_forward(z: &SymMatrix, eps: f64) -> Result<(SpdMatrix, usize)> {
    let clipped = z.eig().values.iter().filter(|&&l| !(l > eps)).count();
    let out = spd_map(z, ScalarFun::ReThreshold(eps))?;
    let out = SpdMatrix::from_sym(out).map_err(|_| Error::numeric("reeig: rectified matrix is not positive definite"))?;
    Ok((out, clipped))
}

pub fn reeig_backward(z: &SymMatrix, eps: f64, upstream: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_map_backward(z, ScalarFun::ReThreshold(eps), upstream)?.into_matrix())
}

pub fn tangent_dim(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Row-wise upper triangle with `√2` off-diagonal weights (norm preserving).
pub fn upper_vec(s: &DMatrix<f64>) -> DVector<f64> {
    let d = s.nrows();
    let mut v = Vec::with_capacity(tangent_dim(d));
    for i in 0..d {
        v.push(s[(i, i)]);
        for j in i + 1..d {
            v.push(std::f64::consts::SQRT_2 * s[(i, j)]);
        }
    }
    DVector::from_vec(v)
}

/// Adjoint of [`upper_vec`] as a symmetric matrix gradient.
pub fn upper_vec_backward(g: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(d, d);
    let mut idx = 0;
    let half = std::f64::consts::FRAC_1_SQRT_2;
    for i in 0..d {
        s[(i, i)] = g[idx];
        idx += 1;
        for j in i + 1..d {
            s[(i, j)] = half * g[idx];
            s[(j, i)] = half * g[idx];
            idx += 1;
        }
    }
    s
}

/// LogEig followed by vectorization.
pub fn log_eig_forward(z: &SpdMatrix) -> DVector<f64> {
    upper_vec(z.log().matrix())
}

pub fn log_eig_backward(z: &SpdMatrix, g: &DVector<f64>) -> Result<DMatrix<f64>> {
    let up = upper_vec_backward(g, z.dim());
    Ok(spd_map_backward(z.as_sym(), ScalarFun::Log, &up)?.into_matrix())
}

/// Outputs of the softmax classifier on a batch.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub probs: DMatrix<f64>,
    pub loss: f64,
}

/// Affine map `[v, 1]·W` with `W` of shape `(n_features + 1) × C`, softmax and
/// mean cross-entropy.
pub fn classifier_forward(features: &DMatrix<f64>, weights: &DMatrix<f64>, labels: Option<&[usize]>) -> Result<ClassifierOutput> {
    let (m, n) = features.shape();
    let c = weights.ncols();
    if weights.nrows() != n + 1 {
        return Err(Error::invalid(format!("classifier expects {} features, got {n}", weights.nrows() - 1)));
    }
    let logits = features * weights.rows(0, n) + DMatrix::from_fn(m, c, |_, j| weights[(n, j)]);
    let mut probs = logits;
    for mut row in probs.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    let mut loss = 0.0;
    if let Some(labels) = labels {
        if labels.len() != m {
            return Err(Error::invalid(format!("{} labels for {m} observations", labels.len())));
        }
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
            }
            loss -= probs[(i, y)].max(f64::MIN_POSITIVE).ln();
        }
        loss /= m.max(1) as f64;
    }
    Ok(ClassifierOutput { probs, loss })
}

/// Weight gradient and feature gradient of the mean cross-entropy.
pub fn classifier_backward(
    features: &DMatrix<f64>,
    weights: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    labels: &[usize],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, n) = features.shape();
    let mut dlogits = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        dlogits[(i, y)] -= 1.0;
    }
    dlogits /= m as f64;
    let augmented = DMatrix::from_fn(m, n + 1, |i, j| if j < n { features[(i, j)] } else { 1.0 });
    let dw = augmented.transpose() * &dlogits;
    let dv = dlogits * weights.rows(0, n).transpose();
    (dw, dv)
}
