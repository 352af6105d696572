//! Learnable separable kernels.
//!
//! A separable layer runs a vertical `n×1` bank into `c_e` extra feature maps
//! and a horizontal `1×n` bank out of them, with nothing nonlinear in between.
//! The composition is therefore a single square layer whose kernels are sums
//! of outer products:
//!
//! ```text
//! W[i, t] = Σ_j  vertical[j, t] ⊗ horizontal[i, j]
//! ```
//!
//! [`merge_layers`] computes that square layer, [`decompose_layer`] goes the
//! other way through a truncated SVD, and [`svd_factorize`] splits a single
//! kernel into rank-1 terms.

use crate::conv::{Conv1d, Conv2d, ConvGrads, Orientation, Padding};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor4};

/// Dense row-major `f64` matrix for kernel algebra.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidShape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Matrix {
            rows: rows.len(),
            cols: N,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.get(r, c);
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::mismatch((self.rows, self.cols), (other.rows, other.cols)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            for (c, &vc) in v.iter().enumerate() {
                self.data[r * self.cols + c] += ur * vc;
            }
        }
    }
}

/// Thin singular value decomposition `A = U · diag(s) · Vᵀ`, singular values descending.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × p` with orthonormal columns (zero columns for zero singular values).
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    /// `n × p` with orthonormal columns.
    pub v: Matrix,
}

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// One-sided (Hestenes) Jacobi SVD.
///
/// Column pairs of a working copy of `A` are rotated until every pair is
/// orthogonal to within `1e-10` relative, or 100 sweeps have run. Wide inputs
/// are handled through their transpose.
pub fn svd(a: &Matrix) -> Svd {
    if a.rows < a.cols {
        let t = svd(&a.transpose());
        return Svd { u: t.v, singular_values: t.singular_values, v: t.u };
    }
    let (m, n) = (a.rows, a.cols);
    // column-major working copies so rotations touch contiguous memory
    let mut work: Vec<Vec<f64>> = (0..n).map(|c| (0..m).map(|r| a.get(r, c)).collect()).collect();
    let mut vecs: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| if r == c { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = work[p].iter().zip(&work[q]).fold(
                    (0.0, 0.0, 0.0),
                    |(al, be, ga), (&x, &y)| (al + x * x, be + y * y, ga + x * y),
                );
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut vecs, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = work
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|v| v * v).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    for (k, &(sigma, j)) in order.iter().enumerate() {
        singular_values.push(sigma);
        if sigma > 0.0 {
            for r in 0..m {
                u.set(r, k, work[j][r] / sigma);
            }
        }
        for r in 0..n {
            v.set(r, k, vecs[j][r]);
        }
    }
    Svd { u, singular_values, v }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Outer product `u · vᵀ`: a column kernel times a row kernel.
pub fn merge_pair(u: &[f64], v: &[f64]) -> Result<Matrix> {
    if u.len() != v.len() {
        return Err(Error::mismatch(u.len(), v.len()));
    }
    let mut m = Matrix::zeros(u.len(), v.len());
    m.add_outer(u, v);
    Ok(m)
}

/// A separable kernel `u ⊗ v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneFactor {
    /// Column (vertical) factor, carries the singular value.
    pub u: Vec<f64>,
    /// Row (horizontal) factor, unit norm when produced by [`svd_factorize`].
    pub v: Vec<f64>,
}

impl RankOneFactor {
    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.u.len(), self.v.len());
        m.add_outer(&self.u, &self.v);
        m
    }
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub factors: Vec<RankOneFactor>,
    /// `‖K − Σ u vᵀ‖_F`, measured on the reconstruction.
    pub residual_norm: f64,
}

impl Factorization {
    pub fn reconstruct(&self, n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for f in &self.factors {
            m.add_outer(&f.u, &f.v);
        }
        m
    }
}

/// Makes the first non-negligible entry of `u` positive, flipping `v` alongside.
fn canonical_sign(u: &mut [f64], v: &mut [f64]) {
    let scale = u.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(&first) = u.iter().find(|x| x.abs() > 1e-12 * scale) {
        if first < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Splits an `n×n` kernel into at most `rank` rank-1 kernels, largest first.
///
/// Singular values are folded into the column factors. Numerically zero
/// singular values produce no factor.
pub fn svd_factorize(kernel: &Matrix, rank: usize) -> Result<Factorization> {
    let n = kernel.rows;
    if kernel.cols != n {
        return Err(Error::InvalidShape(format!(
            "kernel must be square, got {}x{}",
            kernel.rows, kernel.cols
        )));
    }
    if rank < 1 || rank > n {
        return Err(Error::InvalidRank { rank, n });
    }
    let dec = svd(kernel);
    let floor = dec.singular_values.first().copied().unwrap_or(0.0) * f64::EPSILON * n as f64;
    let mut factors = Vec::with_capacity(rank);
    for k in 0..rank {
        let sigma = dec.singular_values[k];
        if sigma <= floor || sigma == 0.0 {
            break;
        }
        let mut u: Vec<f64> = (0..n).map(|r| dec.u.get(r, k) * sigma).collect();
        let mut v: Vec<f64> = (0..n).map(|r| dec.v.get(r, k)).collect();
        canonical_sign(&mut u, &mut v);
        factors.push(RankOneFactor { u, v });
    }
    let mut out = Factorization { factors, residual_norm: 0.0 };
    out.residual_norm = kernel.sub(&out.reconstruct(n))?.frobenius_norm();
    Ok(out)
}

/// Gradients of a staged separable layer.
#[derive(Debug, Clone)]
pub struct SeparableGrads<T: Element> {
    pub input: Option<Tensor4<T>>,
    pub vertical: Vec<T>,
    pub horizontal: Vec<T>,
    pub horizontal_bias: Option<Vec<T>>,
}

/// A vertical bank into `c_e` extra maps followed by a horizontal bank.
///
/// The vertical stage never carries a bias so that the pair stays exactly
/// mergeable under zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparablePair<T: Element = f32> {
    vertical: Conv1d<T>,
    horizontal: Conv1d<T>,
}

impl<T: Element> SeparablePair<T> {
    pub fn new(vertical: Conv1d<T>, horizontal: Conv1d<T>) -> Result<Self> {
        if vertical.orientation() != Orientation::Vertical {
            return Err(Error::InvalidLayer("first stage must be vertical (n×1)".into()));
        }
        if horizontal.orientation() != Orientation::Horizontal {
            return Err(Error::InvalidLayer("second stage must be horizontal (1×n)".into()));
        }
        if vertical.bias().is_some() {
            return Err(Error::InvalidLayer("the vertical stage must not carry a bias".into()));
        }
        if vertical.k() != horizontal.k() {
            return Err(Error::InvalidLayer(format!(
                "kernel lengths differ: {} vs {}",
                vertical.k(),
                horizontal.k()
            )));
        }
        if vertical.c_out() != horizontal.c_in() {
            return Err(Error::InvalidLayer(format!(
                "extra-layer width mismatch: vertical emits {}, horizontal takes {}",
                vertical.c_out(),
                horizontal.c_in()
            )));
        }
        if vertical.padding() != horizontal.padding() {
            return Err(Error::InvalidLayer("both stages must use the same padding".into()));
        }
        Ok(SeparablePair { vertical, horizontal })
    }

    pub fn zeros(c_in: usize, c_e: usize, c_out: usize, k: usize, bias: bool, padding: Padding) -> Result<Self> {
        Self::new(
            Conv1d::zeros(Orientation::Vertical, c_in, c_e, k, false, padding)?,
            Conv1d::zeros(Orientation::Horizontal, c_e, c_out, k, bias, padding)?,
        )
    }

    pub fn vertical(&self) -> &Conv1d<T> {
        &self.vertical
    }

    pub fn horizontal(&self) -> &Conv1d<T> {
        &self.horizontal
    }

    pub fn vertical_mut(&mut self) -> &mut Conv1d<T> {
        &mut self.vertical
    }

    pub fn horizontal_mut(&mut self) -> &mut Conv1d<T> {
        &mut self.horizontal
    }

    pub fn stages_mut(&mut self) -> (&mut Conv1d<T>, &mut Conv1d<T>) {
        (&mut self.vertical, &mut self.horizontal)
    }

    pub fn c_in(&self) -> usize {
        self.vertical.c_in()
    }

    pub fn c_extra(&self) -> usize {
        self.vertical.c_out()
    }

    pub fn c_out(&self) -> usize {
        self.horizontal.c_out()
    }

    pub fn k(&self) -> usize {
        self.vertical.k()
    }

    pub fn padding(&self) -> Padding {
        self.vertical.padding()
    }

    pub fn param_count(&self) -> usize {
        self.vertical.param_count() + self.horizontal.param_count()
    }

    /// Extra-layer maps `f_e` and the layer output.
    pub fn forward_staged(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let extra = self.vertical.forward(x)?;
        let out = self.horizontal.forward(&extra)?;
        Ok((extra, out))
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.forward_staged(x)?.1)
    }

    pub fn backward(
        &self,
        x: &Tensor4<T>,
        extra: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        need_input: bool,
    ) -> Result<SeparableGrads<T>> {
        let ConvGrads { input: grad_extra, weight: horizontal, bias } =
            self.horizontal.backward_with(extra, grad_out, true)?;
        let grad_extra = grad_extra.expect("input gradient requested");
        let ConvGrads { input, weight: vertical, .. } = self.vertical.backward_with(x, &grad_extra, need_input)?;
        Ok(SeparableGrads { input, vertical, horizontal, horizontal_bias: bias })
    }

    pub fn merged(&self) -> Conv2d<T> {
        merge_layers(self)
    }

    pub fn cast<U: Element>(&self) -> SeparablePair<U> {
        SeparablePair {
            vertical: self.vertical.cast(),
            horizontal: self.horizontal.cast(),
        }
    }
}

/// The square layer equivalent to a staged separable pair.
pub fn merge_layers<T: Element>(pair: &SeparablePair<T>) -> Conv2d<T> {
    let (c_in, c_e, c_out, n) = (pair.c_in(), pair.c_extra(), pair.c_out(), pair.k());
    let mut weights = Vec::with_capacity(c_out * c_in * n * n);
    let mut kernel = Matrix::zeros(n, n);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for i in 0..c_out {
        for t in 0..c_in {
            kernel.data.fill(0.0);
            for j in 0..c_e {
                for (dst, &w) in u.iter_mut().zip(pair.vertical.taps(j, t)) {
                    *dst = w.as_f64();
                }
                for (dst, &w) in v.iter_mut().zip(pair.horizontal.taps(i, j)) {
                    *dst = w.as_f64();
                }
                kernel.add_outer(&u, &v);
            }
            weights.extend(kernel.data.iter().map(|&w| T::from_f64(w)));
        }
    }
    let weight = Tensor4::from_vec((c_out, c_in, n, n), weights).expect("dims match weight count");
    Conv2d::new(weight, pair.horizontal.bias().map(<[T]>::to_vec), pair.padding())
        .expect("merged layer inherits valid geometry")
}

/// Sum over all `(i, t)` kernels of `‖A[i,t] − B[i,t]‖_F`.
pub fn kernel_distance<T: Element>(a: &Conv2d<T>, b: &Conv2d<T>) -> Result<f64> {
    if a.weight().dims() != b.weight().dims() {
        return Err(Error::mismatch(a.weight().dims(), b.weight().dims()));
    }
    let mut total = 0.0;
    for i in 0..a.c_out() {
        for t in 0..a.c_in() {
            let sq: f64 = a
                .kernel(i, t)
                .iter()
                .zip(b.kernel(i, t))
                .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
                .sum();
            total += sq.sqrt();
        }
    }
    Ok(total)
}

/// Factorizes a square layer into a separable pair with `c_extra` extra maps.
///
/// The weights are folded into a `(c_in·n) × (c_out·n)` matrix with
/// `M[(t,a), (i,b)] = W[i,t][a,b]`; a rank-`c_extra` truncation `Σ_j σ_j u_j v_jᵀ`
/// of it is exactly a staged pair with `vertical[j,t][a] = σ_j u_j[(t,a)]` and
/// `horizontal[i,j][b] = v_j[(i,b)]`. Extra channels beyond the matrix rank are
/// zero. Returns the pair and its summed per-kernel Frobenius error.
pub fn decompose_layer<T: Element>(layer: &Conv2d<T>, c_extra: usize) -> Result<(SeparablePair<T>, f64)> {
    if c_extra == 0 {
        return Err(Error::InvalidArgument("extra-layer width must be at least 1".into()));
    }
    let (c_in, c_out, n) = (layer.c_in(), layer.c_out(), layer.k());
    let (rows, cols) = (c_in * n, c_out * n);
    let mut folded = Matrix::zeros(rows, cols);
    for i in 0..c_out {
        for t in 0..c_in {
            let kern = layer.kernel(i, t);
            for a in 0..n {
                for b in 0..n {
                    folded.set(t * n + a, i * n + b, kern[a * n + b].as_f64());
                }
            }
        }
    }
    let dec = svd(&folded);
    let mut vertical = vec![T::zero(); c_extra * c_in * n];
    let mut horizontal = vec![T::zero(); c_out * c_extra * n];
    for j in 0..c_extra.min(dec.singular_values.len()) {
        let sigma = dec.singular_values[j];
        if sigma == 0.0 {
            break;
        }
        let mut u: Vec<f64> = (0..rows).map(|r| dec.u.get(r, j) * sigma).collect();
        let mut v: Vec<f64> = (0..cols).map(|r| dec.v.get(r, j)).collect();
        canonical_sign(&mut u, &mut v);
        for t in 0..c_in {
            for a in 0..n {
                vertical[(j * c_in + t) * n + a] = T::from_f64(u[t * n + a]);
            }
        }
        for i in 0..c_out {
            for b in 0..n {
                horizontal[(i * c_extra + j) * n + b] = T::from_f64(v[i * n + b]);
            }
        }
    }
    let pair = SeparablePair::new(
        Conv1d::new(Orientation::Vertical, c_in, c_extra, n, vertical, None, layer.padding())?,
        Conv1d::new(
            Orientation::Horizontal,
            c_extra,
            c_out,
            n,
            horizontal,
            layer.bias().map(<[T]>::to_vec),
            layer.padding(),
        )?,
    )?;
    let err = kernel_distance(&merge_layers(&pair), layer)?;
    Ok((pair, err))
}
