//! Direct stride-1 convolution (cross-correlation, no kernel flip), activations
//! and pixel shuffle, each with an exact reverse-mode backward pass.
//!
//! Square and 1-D layers share one rectangular-kernel engine: a vertical 1-D
//! layer is a `k×1` kernel and a horizontal one is `1×k`. Same-zero padding adds
//! `(k-1)/2` zeros on both sides of each convolved axis only, so 1-D layers never
//! pad the axis they do not touch.
//!
//! Every output element is accumulated in `f64` in a fixed order: input channel,
//! then kernel row, then kernel column, with the bias added last.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Element, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    SameZero,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::SameZero => (k - 1) / 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// `k×1` kernel, convolves along rows (the `h` axis).
    Vertical,
    /// `1×k` kernel, convolves along columns (the `w` axis).
    Horizontal,
}

/// Gradients returned by a convolution backward pass.
#[derive(Debug, Clone)]
pub struct ConvGrads<T: Element> {
    /// `None` when the caller asked to skip the input gradient.
    pub input: Option<Tensor4<T>>,
    /// Same layout as the layer weights.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c_out: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
}

impl Geometry {
    fn output_dims(&self, x: Dims) -> Result<Dims> {
        if x.c != self.c_in {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.c_in),
                got: format!("{} channels", x.c),
            });
        }
        let (h, w) = (x.h + 2 * self.ph, x.w + 2 * self.pw);
        if h < self.kh || w < self.kw {
            return Err(Error::InvalidShape(format!(
                "input {}x{} is smaller than the {}x{} kernel",
                x.h, x.w, self.kh, self.kw
            )));
        }
        Ok(Dims::new(x.n, self.c_out, h - self.kh + 1, w - self.kw + 1))
    }

    /// Output columns `[lo, hi)` whose tap `j` lands inside an input row of width `w_in`.
    #[inline]
    fn col_range(&self, j: usize, w_in: usize, w_out: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(j);
        let hi = (w_in + self.pw).saturating_sub(j).min(w_out);
        (lo, hi.max(lo))
    }
}

fn to_f64_vec<T: Element>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn correlate_forward<T: Element>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: Option<&[T]>,
    g: Geometry,
) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let od = g.output_dims(xd)?;
    let xs = to_f64_vec(x.as_slice());
    let ws = to_f64_vec(weight);
    let (in_plane, out_plane) = (xd.plane(), od.plane());
    let ksz = g.kh * g.kw;
    let mut out = Vec::with_capacity(od.len());
    let mut acc = vec![0.0f64; out_plane];
    for b in 0..xd.n {
        for o in 0..g.c_out {
            acc.fill(0.0);
            for c in 0..g.c_in {
                let xp = &xs[(b * xd.c + c) * in_plane..][..in_plane];
                let wk = &ws[(o * g.c_in + c) * ksz..][..ksz];
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let wv = wk[i * g.kw + j];
                        let (x_lo, x_hi) = g.col_range(j, xd.w, od.w);
                        for y in 0..od.h {
                            let sy = y + i;
                            if sy < g.ph || sy - g.ph >= xd.h {
                                continue;
                            }
                            let row = &xp[(sy - g.ph) * xd.w..][..xd.w];
                            let dst = &mut acc[y * od.w..][..od.w];
                            for ox in x_lo..x_hi {
                                dst[ox] += wv * row[ox + j - g.pw];
                            }
                        }
                    }
                }
            }
            let bv = bias.map_or(0.0, |b| b[o].as_f64());
            out.extend(acc.iter().map(|&a| T::from_f64(a + bv)));
        }
    }
    Tensor4::from_vec(od, out)
}

fn correlate_backward<T: Element>(
    x: &Tensor4<T>,
    weight: &[T],
    has_bias: bool,
    g: Geometry,
    grad_out: &Tensor4<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let xd = x.dims();
    let od = g.output_dims(xd)?;
    if grad_out.dims() != od {
        return Err(Error::mismatch(od, grad_out.dims()));
    }
    let xs = to_f64_vec(x.as_slice());
    let gs = to_f64_vec(grad_out.as_slice());
    let ws = to_f64_vec(weight);
    let (in_plane, out_plane) = (xd.plane(), od.plane());
    let ksz = g.kh * g.kw;

    let mut grad_w = vec![0.0f64; g.c_out * g.c_in * ksz];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            let gw = &mut grad_w[(o * g.c_in + c) * ksz..][..ksz];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let (x_lo, x_hi) = g.col_range(j, xd.w, od.w);
                    let mut s = 0.0f64;
                    for b in 0..xd.n {
                        let xp = &xs[(b * xd.c + c) * in_plane..][..in_plane];
                        let gp = &gs[(b * od.c + o) * out_plane..][..out_plane];
                        for y in 0..od.h {
                            let sy = y + i;
                            if sy < g.ph || sy - g.ph >= xd.h {
                                continue;
                            }
                            let row = &xp[(sy - g.ph) * xd.w..][..xd.w];
                            let grow = &gp[y * od.w..][..od.w];
                            for ox in x_lo..x_hi {
                                s += grow[ox] * row[ox + j - g.pw];
                            }
                        }
                    }
                    gw[i * g.kw + j] = s;
                }
            }
        }
    }

    let grad_b = has_bias.then(|| {
        (0..g.c_out)
            .map(|o| {
                let s: f64 = (0..xd.n)
                    .map(|b| gs[(b * od.c + o) * out_plane..][..out_plane].iter().sum::<f64>())
                    .sum();
                T::from_f64(s)
            })
            .collect()
    });

    let grad_x = if need_input {
        let mut gx = Vec::with_capacity(xd.len());
        let mut acc = vec![0.0f64; in_plane];
        for b in 0..xd.n {
            for c in 0..g.c_in {
                acc.fill(0.0);
                for o in 0..g.c_out {
                    let gp = &gs[(b * od.c + o) * out_plane..][..out_plane];
                    let wk = &ws[(o * g.c_in + c) * ksz..][..ksz];
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let wv = wk[i * g.kw + j];
                            let (x_lo, x_hi) = g.col_range(j, xd.w, od.w);
                            for y in 0..od.h {
                                let sy = y + i;
                                if sy < g.ph || sy - g.ph >= xd.h {
                                    continue;
                                }
                                let dst = &mut acc[(sy - g.ph) * xd.w..][..xd.w];
                                let grow = &gp[y * od.w..][..od.w];
                                for ox in x_lo..x_hi {
                                    dst[ox + j - g.pw] += wv * grow[ox];
                                }
                            }
                        }
                    }
                }
                gx.extend(acc.iter().map(|&v| T::from_f64(v)));
            }
        }
        Some(Tensor4::from_vec(xd, gx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: grad_x,
        weight: grad_w.into_iter().map(T::from_f64).collect(),
        bias: grad_b,
    })
}

fn check_bias<T>(bias: &Option<Vec<T>>, c_out: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != c_out => Err(Error::InvalidLayer(format!(
            "bias has {} entries for {c_out} output channels",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn check_finite<T: Element>(w: &[T]) -> Result<()> {
    if w.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidLayer("weights must be finite".into()))
    }
}

/// Square `k×k` convolution with weights laid out `(c_out, c_in, k, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Element = f32> {
    weight: Tensor4<T>,
    bias: Option<Vec<T>>,
    padding: Padding,
}

impl<T: Element> Conv2d<T> {
    pub fn new(weight: Tensor4<T>, bias: Option<Vec<T>>, padding: Padding) -> Result<Self> {
        let d = weight.dims();
        if d.h != d.w || d.h % 2 == 0 {
            return Err(Error::InvalidLayer(format!(
                "square kernels must be k×k with odd k, got {}x{}",
                d.h, d.w
            )));
        }
        check_bias(&bias, d.n)?;
        check_finite(weight.as_slice())?;
        Ok(Conv2d { weight, bias, padding })
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, bias: bool, padding: Padding) -> Result<Self> {
        let weight = Tensor4::zeros((c_out, c_in, k, k))?;
        Self::new(weight, bias.then(|| vec![T::zero(); c_out]), padding)
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().n
    }

    pub fn k(&self) -> usize {
        self.weight.dims().h
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn weight(&self) -> &Tensor4<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        self.weight.as_mut_slice()
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [T]> {
        self.bias.as_deref_mut()
    }

    /// Weights and bias borrowed together.
    pub fn params_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (self.weight.as_mut_slice(), self.bias.as_deref_mut())
    }

    /// Single kernel `k_{t,i}` from input channel `t` to output channel `i`, row-major.
    pub fn kernel(&self, out_ch: usize, in_ch: usize) -> &[T] {
        let k2 = self.k() * self.k();
        &self.weight.as_slice()[(out_ch * self.c_in() + in_ch) * k2..][..k2]
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn geometry(&self) -> Geometry {
        let k = self.k();
        let p = self.padding.amount(k);
        Geometry { c_out: self.c_out(), c_in: self.c_in(), kh: k, kw: k, ph: p, pw: p }
    }

    pub fn output_dims(&self, x: Dims) -> Result<Dims> {
        self.geometry().output_dims(x)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        correlate_forward(x, self.weight.as_slice(), self.bias.as_deref(), self.geometry())
    }

    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<ConvGrads<T>> {
        self.backward_with(x, grad_out, true)
    }

    pub fn backward_with(
        &self,
        x: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        need_input: bool,
    ) -> Result<ConvGrads<T>> {
        correlate_backward(
            x,
            self.weight.as_slice(),
            self.bias.is_some(),
            self.geometry(),
            grad_out,
            need_input,
        )
    }

    pub fn cast<U: Element>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
            padding: self.padding,
        }
    }
}

/// 1-D convolution along one spatial axis, weights laid out `(c_out, c_in, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T: Element = f32> {
    orientation: Orientation,
    /// Stored as a rectangular kernel bank: `(c_out, c_in, k, 1)` or `(c_out, c_in, 1, k)`.
    weight: Tensor4<T>,
    bias: Option<Vec<T>>,
    padding: Padding,
}

impl<T: Element> Conv1d<T> {
    /// `taps` holds `c_out * c_in * k` values in `(c_out, c_in, k)` order.
    pub fn new(
        orientation: Orientation,
        c_in: usize,
        c_out: usize,
        k: usize,
        taps: Vec<T>,
        bias: Option<Vec<T>>,
        padding: Padding,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::InvalidLayer(format!("1-D kernels need odd length, got {k}")));
        }
        let dims = match orientation {
            Orientation::Vertical => (c_out, c_in, k, 1),
            Orientation::Horizontal => (c_out, c_in, 1, k),
        };
        let weight = Tensor4::from_vec(dims, taps).map_err(|e| Error::InvalidLayer(e.to_string()))?;
        check_bias(&bias, c_out)?;
        check_finite(weight.as_slice())?;
        Ok(Conv1d { orientation, weight, bias, padding })
    }

    pub fn zeros(
        orientation: Orientation,
        c_in: usize,
        c_out: usize,
        k: usize,
        bias: bool,
        padding: Padding,
    ) -> Result<Self> {
        let n = c_in
            .checked_mul(c_out)
            .and_then(|v| v.checked_mul(k))
            .ok_or_else(|| Error::InvalidShape("1-D layer too large".into()))?;
        Self::new(orientation, c_in, c_out, k, vec![T::zero(); n], bias.then(|| vec![T::zero(); c_out]), padding)
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().n
    }

    pub fn k(&self) -> usize {
        let d = self.weight.dims();
        d.h.max(d.w)
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    pub fn weight(&self) -> &Tensor4<T> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        self.weight.as_mut_slice()
    }

    pub fn bias(&self) -> Option<&[T]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [T]> {
        self.bias.as_deref_mut()
    }

    /// Weights and bias borrowed together.
    pub fn params_mut(&mut self) -> (&mut [T], Option<&mut [T]>) {
        (self.weight.as_mut_slice(), self.bias.as_deref_mut())
    }

    /// Taps of the kernel from input channel `in_ch` to output channel `out_ch`.
    pub fn taps(&self, out_ch: usize, in_ch: usize) -> &[T] {
        let k = self.k();
        &self.weight.as_slice()[(out_ch * self.c_in() + in_ch) * k..][..k]
    }

    pub fn param_count(&self) -> usize {
        self.weight.as_slice().len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    fn geometry(&self) -> Geometry {
        let k = self.k();
        let p = self.padding.amount(k);
        let (kh, kw, ph, pw) = match self.orientation {
            Orientation::Vertical => (k, 1, p, 0),
            Orientation::Horizontal => (1, k, 0, p),
        };
        Geometry { c_out: self.c_out(), c_in: self.c_in(), kh, kw, ph, pw }
    }

    pub fn output_dims(&self, x: Dims) -> Result<Dims> {
        self.geometry().output_dims(x)
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        correlate_forward(x, self.weight.as_slice(), self.bias.as_deref(), self.geometry())
    }

    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<ConvGrads<T>> {
        self.backward_with(x, grad_out, true)
    }

    pub fn backward_with(
        &self,
        x: &Tensor4<T>,
        grad_out: &Tensor4<T>,
        need_input: bool,
    ) -> Result<ConvGrads<T>> {
        correlate_backward(
            x,
            self.weight.as_slice(),
            self.bias.is_some(),
            self.geometry(),
            grad_out,
            need_input,
        )
    }

    pub fn cast<U: Element>(&self) -> Conv1d<U> {
        Conv1d {
            orientation: self.orientation,
            weight: self.weight.cast(),
            bias: self.bias.as_ref().map(|b| b.iter().map(|&v| U::from_f64(v.as_f64())).collect()),
            padding: self.padding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Identity => "identity",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "relu" => ActivationKind::Relu,
            "tanh" => ActivationKind::Tanh,
            "sigmoid" => ActivationKind::Sigmoid,
            "identity" | "id" => ActivationKind::Identity,
            _ => return None,
        })
    }

    fn apply<T: Element>(self, v: T) -> T {
        match self {
            ActivationKind::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            ActivationKind::Tanh => v.tanh(),
            ActivationKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
            ActivationKind::Identity => v,
        }
    }

    fn derivative<T: Element>(self, v: T) -> T {
        match self {
            // the kink at 0 takes derivative 0
            ActivationKind::Relu => {
                if v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Tanh => {
                let t = v.tanh();
                T::one() - t * t
            }
            ActivationKind::Sigmoid => {
                let s = self.apply(v);
                s * (T::one() - s)
            }
            ActivationKind::Identity => T::one(),
        }
    }

    pub fn forward<T: Element>(self, x: &Tensor4<T>) -> Tensor4<T> {
        match self {
            ActivationKind::Identity => x.clone(),
            _ => x.map(|v| self.apply(v)),
        }
    }

    /// `grad_out ⊙ σ'(x)` where `x` is the activation input.
    pub fn backward<T: Element>(self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        if x.dims() != grad_out.dims() {
            return Err(Error::mismatch(x.dims(), grad_out.dims()));
        }
        if self == ActivationKind::Identity {
            return Ok(grad_out.clone());
        }
        let data = x
            .as_slice()
            .iter()
            .zip(grad_out.as_slice())
            .map(|(&v, &g)| g * self.derivative(v))
            .collect();
        Tensor4::from_vec(x.dims(), data)
    }
}

/// Rearranges `(n, c·r², h, w)` into `(n, c, h·r, w·r)`:
/// `out[b, c, y·r+i, x·r+j] = in[b, c·r²+i·r+j, y, x]`.
pub fn pixel_shuffle<T: Element>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    if r == 0 || d.c % (r * r) != 0 {
        return Err(Error::InvalidShape(format!(
            "pixel shuffle by {r} needs channels divisible by {}, got {}",
            r * r,
            d.c
        )));
    }
    let od = Dims::new(d.n, d.c / (r * r), d.h * r, d.w * r);
    let src = x.as_slice();
    let mut out = vec![T::zero(); od.len()];
    for b in 0..od.n {
        for c in 0..od.c {
            for oy in 0..od.h {
                let (y, i) = (oy / r, oy % r);
                for ox in 0..od.w {
                    let (xx, j) = (ox / r, ox % r);
                    let ic = c * r * r + i * r + j;
                    out[((b * od.c + c) * od.h + oy) * od.w + ox] = src[x.offset(b, ic, y, xx)];
                }
            }
        }
    }
    Tensor4::from_vec(od, out)
}

/// Inverse of [`pixel_shuffle`]; also its backward pass.
pub fn pixel_unshuffle<T: Element>(x: &Tensor4<T>, r: usize) -> Result<Tensor4<T>> {
    let d = x.dims();
    if r == 0 || d.h % r != 0 || d.w % r != 0 {
        return Err(Error::InvalidShape(format!(
            "pixel unshuffle by {r} needs spatial dims divisible by {r}, got {}x{}",
            d.h, d.w
        )));
    }
    let od = Dims::new(d.n, d.c * r * r, d.h / r, d.w / r);
    let src = x.as_slice();
    let mut out = vec![T::zero(); od.len()];
    for b in 0..d.n {
        for c in 0..d.c {
            for oy in 0..d.h {
                let (y, i) = (oy / r, oy % r);
                for ox in 0..d.w {
                    let (xx, j) = (ox / r, ox % r);
                    let ic = c * r * r + i * r + j;
                    out[((b * od.c + ic) * od.h + y) * od.w + xx] = src[x.offset(b, c, oy, ox)];
                }
            }
        }
    }
    Tensor4::from_vec(od, out)
}
