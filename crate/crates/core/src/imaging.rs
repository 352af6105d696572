//! Image I/O, luminance conversion, bicubic resampling, degradation,
//! quality metrics and patch extraction.
//!
//! Planes hold luminance on the `[0, 255]` scale unless a function says
//! otherwise.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dims, Element, Rng, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    Gray = 1,
    Rgb = 3,
}

/// 8-bit image, row-major with interleaved samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub width: usize,
    pub height: usize,
    pub channels: Channels,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, channels: Channels, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * channels as usize {
            return Err(Error::InvalidShape(format!(
                "{width}x{height}x{} image cannot hold {} samples",
                channels as usize,
                data.len()
            )));
        }
        Ok(ImageU8 { width, height, channels, data })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn unsupported(path: &Path, reason: impl ToString) -> Error {
    Error::UnsupportedFormat { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Reads an 8-bit gray or RGB PNG; alpha channels are dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageU8> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| match e {
        png::DecodingError::IoError(source) => Error::Io { path: path.to_path_buf(), source },
        other => unsupported(path, other),
    })?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(unsupported(path, format!("{depth:?} bit depth")));
    }
    let (channels, stride) = match color {
        png::ColorType::Grayscale => (Channels::Gray, 1),
        png::ColorType::GrayscaleAlpha => (Channels::Gray, 2),
        png::ColorType::Rgb => (Channels::Rgb, 3),
        png::ColorType::Rgba => (Channels::Rgb, 4),
        png::ColorType::Indexed => return Err(unsupported(path, "palette images")),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| unsupported(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let keep = channels as usize;
    let mut data = Vec::with_capacity(w * h * keep);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size).take(h) {
        for px in row[..w * stride].chunks_exact(stride) {
            data.extend_from_slice(&px[..keep]);
        }
    }
    ImageU8::new(w, h, channels, data)
}

/// Encodes an image as PNG bytes.
pub fn encode_png(img: &ImageU8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(match img.channels {
            Channels::Gray => png::ColorType::Grayscale,
            Channels::Rgb => png::ColorType::Rgb,
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
        writer
            .write_image_data(&img.data)
            .map_err(|e| Error::InvalidArgument(format!("png encode: {e}")))?;
    }
    Ok(out)
}

pub fn save_png(img: &ImageU8, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(&bytes).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

/// Single-channel `f64` image.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneF {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl PlaneF {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::InvalidShape(format!(
                "{width}x{height} plane cannot hold {} samples",
                data.len()
            )));
        }
        Ok(PlaneF { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<PlaneF> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidShape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..][..w]);
        }
        PlaneF::new(w, h, data)
    }

    /// Largest top-left crop whose sides are multiples of `s`.
    pub fn crop_to_multiple(&self, s: usize) -> Result<PlaneF> {
        if s == 0 {
            return Err(Error::InvalidArgument("scale must be >= 1".into()));
        }
        self.crop(0, 0, self.width - self.width % s, self.height - self.height % s)
    }

    /// `1×1×h×w` tensor with samples multiplied by `factor`.
    pub fn to_tensor<T: Element>(&self, factor: f64) -> Tensor4<T> {
        let data = self.data.iter().map(|&v| T::from_f64(v * factor)).collect();
        Tensor4::from_vec(Dims::new(1, 1, self.height, self.width), data).expect("plane dims are valid")
    }

    /// Plane `(n, c)` of a tensor, samples multiplied by `factor`.
    pub fn from_tensor<T: Element>(t: &Tensor4<T>, n: usize, c: usize, factor: f64) -> PlaneF {
        let d = t.dims();
        PlaneF {
            width: d.w,
            height: d.h,
            data: t.plane(n, c).iter().map(|&v| v.as_f64() * factor).collect(),
        }
    }

    /// Gray image after rounding and clamping to `[0, 255]`.
    pub fn to_image(&self) -> ImageU8 {
        let data = self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
        ImageU8 { width: self.width, height: self.height, channels: Channels::Gray, data }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Luminance on `[0, 255]`: BT.601 studio swing for RGB
/// (`Y = 16 + (65.481 R + 128.553 G + 24.966 B) / 255`), gray passes through.
pub fn rgb_to_y(img: &ImageU8) -> PlaneF {
    let data = match img.channels {
        Channels::Gray => img.data.iter().map(|&v| v as f64).collect(),
        Channels::Rgb => img
            .data
            .chunks_exact(3)
            .map(|p| 16.0 + (65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64) / 255.0)
            .collect(),
    };
    PlaneF { width: img.width, height: img.height, data }
}

const CUBIC_A: f64 = -0.5;

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Normalized taps `(source index, weight)` for each output sample along one axis.
///
/// Output sample `o` is centred at `(o + 0.5) / scale - 0.5` in input
/// coordinates. When shrinking, the kernel is stretched by `1/scale`.
/// Out-of-range taps read the nearest edge sample.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let stretch = if scale < 1.0 { 1.0 / scale } else { 1.0 };
    let radius = 2.0 * stretch;
    (0..out_len)
        .map(|o| {
            let center = (o as f64 + 0.5) / scale - 0.5;
            let lo = (center - radius).floor() as isize;
            let hi = (center + radius).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            for j in lo..=hi {
                let wgt = cubic((center - j as f64) / stretch);
                if wgt == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(i, _)| *i == idx) {
                    Some(t) => t.1 += wgt,
                    None => taps.push((idx, wgt)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling (`a = −0.5`) with antialiasing on downscale.
pub fn bicubic_resize(plane: &PlaneF, out_w: usize, out_h: usize) -> Result<PlaneF> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidShape(format!("output size {out_w}x{out_h} must be >= 1")));
    }
    if (out_w, out_h) == (plane.width, plane.height) {
        return Ok(plane.clone());
    }
    let xt = axis_taps(plane.width, out_w);
    let yt = axis_taps(plane.height, out_h);
    let mut tmp = vec![0.0; out_w * plane.height];
    for y in 0..plane.height {
        let row = &plane.data[y * plane.width..][..plane.width];
        for (x, taps) in xt.iter().enumerate() {
            tmp[y * out_w + x] = taps.iter().map(|&(i, w)| w * row[i]).sum();
        }
    }
    let mut out = vec![0.0; out_w * out_h];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..out_w {
            out[y * out_w + x] = taps.iter().map(|&(i, w)| w * tmp[i * out_w + x]).sum();
        }
    }
    PlaneF::new(out_w, out_h, out)
}

/// Low-resolution plane and its bicubic re-upscale to the original size.
pub fn degrade(hr: &PlaneF, scale: usize) -> Result<(PlaneF, PlaneF)> {
    if scale == 0 {
        return Err(Error::InvalidArgument("scale must be >= 1".into()));
    }
    if hr.width % scale != 0 || hr.height % scale != 0 {
        return Err(Error::InvalidShape(format!(
            "{}x{} is not divisible by scale {scale}; crop first",
            hr.width, hr.height
        )));
    }
    if scale == 1 {
        return Ok((hr.clone(), hr.clone()));
    }
    let lr = bicubic_resize(hr, hr.width / scale, hr.height / scale)?;
    let coarse = bicubic_resize(&lr, hr.width, hr.height)?;
    Ok((lr, coarse))
}

fn shaved_pair<'a>(a: &'a PlaneF, b: &'a PlaneF, shave: usize) -> Result<(PlaneF, PlaneF)> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::mismatch((a.width, a.height), (b.width, b.height)));
    }
    if 2 * shave >= a.width || 2 * shave >= a.height {
        return Err(Error::InvalidShape(format!(
            "shaving {shave} leaves nothing of {}x{}",
            a.width, a.height
        )));
    }
    let (w, h) = (a.width - 2 * shave, a.height - 2 * shave);
    Ok((a.crop(shave, shave, w, h)?, b.crop(shave, shave, w, h)?))
}

/// Reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio with peak 255, after removing `shave` border pixels.
pub fn psnr(a: &PlaneF, b: &PlaneF, shave: usize) -> Result<f64> {
    let (a, b) = shaved_pair(a, b, shave)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const SSIM_C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Valid-mode separable Gaussian filtering.
fn filter_valid(data: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * data[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity over all 11×11 Gaussian (σ = 1.5) windows that
/// fit inside the shaved planes.
pub fn ssim(a: &PlaneF, b: &PlaneF, shave: usize) -> Result<f64> {
    let (a, b) = shaved_pair(a, b, shave)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidShape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} after shaving, got {}x{}",
            a.width, a.height
        )));
    }
    let g = gaussian_window();
    let (w, h) = (a.width, a.height);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a.data, w, h, &g);
    let mu_b = filter_valid(&b.data, w, h, &g);
    let e_aa = filter_valid(&prod(&a.data, &a.data), w, h, &g);
    let e_bb = filter_valid(&prod(&b.data, &b.data), w, h, &g);
    let e_ab = filter_valid(&prod(&a.data, &b.data), w, h, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / n as f64)
}

/// Aligned `(input, target)` patches.
///
/// `patch` and `stride` are in input pixels; the target may be an integer
/// multiple of the input size, in which case its patches scale with it.
pub fn extract_patches(input: &PlaneF, target: &PlaneF, patch: usize, stride: usize) -> Result<Vec<(PlaneF, PlaneF)>> {
    if stride == 0 || patch == 0 {
        return Err(Error::InvalidArgument("patch size and stride must be >= 1".into()));
    }
    if target.width % input.width != 0
        || target.height % input.height != 0
        || target.width / input.width != target.height / input.height
    {
        return Err(Error::mismatch((input.width, input.height), (target.width, target.height)));
    }
    let f = target.width / input.width;
    if patch > input.width || patch > input.height {
        return Err(Error::InvalidShape(format!(
            "patch {patch} exceeds {}x{} image",
            input.width, input.height
        )));
    }
    let ny = (input.height - patch) / stride + 1;
    let nx = (input.width - patch) / stride + 1;
    let mut out = Vec::with_capacity(nx * ny);
    for py in 0..ny {
        for px in 0..nx {
            let (x0, y0) = (px * stride, py * stride);
            out.push((
                input.crop(x0, y0, patch, patch)?,
                target.crop(x0 * f, y0 * f, patch * f, patch * f)?,
            ));
        }
    }
    Ok(out)
}

/// Seeded synthetic scene on `[16, 235]`: a smooth gradient overlaid with
/// hard-edged rectangles, discs and stripe patches, plus faint oriented
/// sinusoidal texture.
pub fn synthetic_scene(rng: &mut Rng, width: usize, height: usize) -> PlaneF {
    let (w, h) = (width as f64, height as f64);
    let gx = rng.uniform(-60.0, 60.0) / w;
    let gy = rng.uniform(-60.0, 60.0) / h;
    let base = rng.uniform(90.0, 160.0);
    let mut data: Vec<f64> = (0..height)
        .flat_map(|y| (0..width).map(move |x| base + gx * x as f64 + gy * y as f64))
        .collect();
    let shapes = 6 + rng.below(6);
    for _ in 0..shapes {
        let level = rng.uniform(20.0, 235.0);
        let cx = rng.uniform(0.0, w);
        let cy = rng.uniform(0.0, h);
        let size = rng.uniform(0.08, 0.35) * w.min(h);
        match rng.below(3) {
            0 => {
                let (hw, hh) = (size, size * rng.uniform(0.4, 1.6));
                for y in 0..height {
                    for x in 0..width {
                        if (x as f64 - cx).abs() < hw / 2.0 && (y as f64 - cy).abs() < hh / 2.0 {
                            data[y * width + x] = level;
                        }
                    }
                }
            }
            1 => {
                let r2 = (size / 2.0) * (size / 2.0);
                for y in 0..height {
                    for x in 0..width {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        if dx * dx + dy * dy < r2 {
                            data[y * width + x] = level;
                        }
                    }
                }
            }
            _ => {
                let period = rng.uniform(3.0, 9.0);
                let theta = rng.uniform(0.0, std::f64::consts::PI);
                let (c, s) = (theta.cos(), theta.sin());
                let other = rng.uniform(20.0, 235.0);
                for y in 0..height {
                    for x in 0..width {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        if dx.abs() < size / 2.0 && dy.abs() < size / 2.0 {
                            let phase = ((dx * c + dy * s) / period).floor() as i64;
                            data[y * width + x] = if phase % 2 == 0 { level } else { other };
                        }
                    }
                }
            }
        }
    }
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.uniform(0.0, std::f64::consts::PI);
            let freq = rng.uniform(0.15, 0.6);
            (freq * theta.cos(), freq * theta.sin(), rng.uniform(0.0, 6.3), rng.uniform(1.0, 3.0))
        })
        .collect();
    for y in 0..height {
        for x in 0..width {
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum();
            let v = &mut data[y * width + x];
            *v = (*v + t).clamp(16.0, 235.0);
        }
    }
    PlaneF { width, height, data }
}
