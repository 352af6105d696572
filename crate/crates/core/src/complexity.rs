//! Model descriptions plus parameter and operation accounting.
//!
//! Operation counts keep multiplications and additions apart. For a square
//! layer on a `w×h` map, with `A = c_in·c_out`:
//!
//! ```text
//! mul = A·w·h·k²        add = A·(w·h·(k²−1) + 1)
//! ```
//!
//! and for a separable layer with `B = c_in·c_e`, `C = c_e·c_out`:
//!
//! ```text
//! mul = (B+C)·w·h·k     add = (B+C)·(w·h·(k−1) + 1)
//! ```
//!
//! All counts are exact integers; ratios are exact rationals.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use num_rational::Ratio;

use crate::conv::ActivationKind;
use crate::error::{Error, Result};

/// Multiplications and additions of a computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct FlopCount {
    pub mul: u64,
    pub add: u64,
}

impl FlopCount {
    pub const ZERO: FlopCount = FlopCount { mul: 0, add: 0 };

    pub const fn new(mul: u64, add: u64) -> Self {
        FlopCount { mul, add }
    }

    /// One `k×k` window: `k²` multiplications and `k²−1` additions.
    pub const fn window(k: u64) -> Self {
        FlopCount { mul: k * k, add: k * k - 1 }
    }

    pub const fn total(&self) -> u64 {
        self.mul + self.add
    }
}

impl Add for FlopCount {
    type Output = FlopCount;
    fn add(self, rhs: FlopCount) -> FlopCount {
        FlopCount { mul: self.mul + rhs.mul, add: self.add + rhs.add }
    }
}

impl AddAssign for FlopCount {
    fn add_assign(&mut self, rhs: FlopCount) {
        *self = *self + rhs;
    }
}

impl Sum for FlopCount {
    fn sum<I: Iterator<Item = FlopCount>>(iter: I) -> FlopCount {
        iter.fold(FlopCount::ZERO, Add::add)
    }
}

impl fmt::Display for FlopCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}+{}i", self.mul, self.add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Square,
    /// Vertical then horizontal 1-D stage through `c_extra` maps.
    Separable { c_extra: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub has_bias: bool,
    pub activation: ActivationKind,
}

impl LayerSpec {
    pub fn square(c_in: usize, c_out: usize, k: usize, activation: ActivationKind) -> Self {
        LayerSpec { kind: LayerKind::Square, c_in, c_out, k, has_bias: true, activation }
    }

    /// Separable layer with `c_extra = c_out`.
    pub fn separable(c_in: usize, c_out: usize, k: usize, activation: ActivationKind) -> Self {
        LayerSpec {
            kind: LayerKind::Separable { c_extra: c_out },
            c_in,
            c_out,
            k,
            has_bias: true,
            activation,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.kind, LayerKind::Separable { .. })
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.k % 2 == 0 || self.k == 0 {
            return Err(Error::InvalidSpec(format!("layer {index}: kernel size {} must be odd", self.k)));
        }
        if self.c_in == 0 || self.c_out == 0 {
            return Err(Error::InvalidSpec(format!("layer {index}: channel counts must be >= 1")));
        }
        if let LayerKind::Separable { c_extra: 0 } = self.kind {
            return Err(Error::InvalidSpec(format!("layer {index}: extra-layer width must be >= 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Upsampling {
    /// Bicubic upscale first; the network maps coarse HR to HR.
    PreBicubic,
    /// Network runs at LR and ends with a pixel shuffle by the factor.
    PostPixelShuffle(usize),
    /// Like `PreBicubic`, with the network input added back to its output.
    ResidualPreBicubic,
}

/// Channel widths used when expanding model names.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub srcnn: (usize, usize),
    pub espcn: (usize, usize),
    pub vdsr: usize,
}

impl Widths {
    /// Full published widths.
    pub const FULL: Widths = Widths { srcnn: (64, 32), espcn: (64, 32), vdsr: 64 };
    /// Desk-scale widths for CPU training.
    pub const DESK: Widths = Widths { srcnn: (16, 8), espcn: (16, 8), vdsr: 16 };
    pub const TINY: Widths = Widths { srcnn: (8, 4), espcn: (8, 4), vdsr: 8 };

    pub fn preset(name: &str) -> Option<Widths> {
        match name {
            "full" => Some(Self::FULL),
            "desk" => Some(Self::DESK),
            "tiny" => Some(Self::TINY),
            _ => None,
        }
    }
}

/// A network architecture: the unit of counting and construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: String,
    /// Super-resolution factor the model is built for.
    pub scale: usize,
    pub layers: Vec<LayerSpec>,
    pub upsampling: Upsampling,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Srcnn,
    Espcn,
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, scale: usize, layers: Vec<LayerSpec>, upsampling: Upsampling) -> Result<Self> {
        let spec = ModelSpec { name: name.into(), scale, layers, upsampling };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec(format!("{}: no layers", self.name)));
        }
        if self.scale == 0 {
            return Err(Error::InvalidSpec(format!("{}: scale must be >= 1", self.name)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(i)?;
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].c_out != pair[1].c_in {
                return Err(Error::InvalidSpec(format!(
                    "{}: layer {} emits {} channels but layer {} takes {}",
                    self.name,
                    i,
                    pair[0].c_out,
                    i + 1,
                    pair[1].c_in
                )));
            }
        }
        if self.layers[0].c_in != 1 {
            return Err(Error::InvalidSpec(format!("{}: input must be a single luminance channel", self.name)));
        }
        let last = self.layers.last().expect("non-empty").c_out;
        let want = match self.upsampling {
            Upsampling::PostPixelShuffle(r) => {
                if r < 2 {
                    return Err(Error::InvalidSpec(format!("{}: pixel shuffle factor must be >= 2", self.name)));
                }
                if r != self.scale {
                    return Err(Error::InvalidSpec(format!(
                        "{}: pixel shuffle factor {r} differs from scale {}",
                        self.name, self.scale
                    )));
                }
                r * r
            }
            _ => 1,
        };
        if last != want {
            return Err(Error::InvalidSpec(format!(
                "{}: last layer must emit {want} channels, got {last}",
                self.name
            )));
        }
        Ok(())
    }

    /// SRCNN-style three-layer network on a bicubic-upscaled input.
    ///
    /// `kernels` uses the `9-5-5` notation; an `s` prefix (`9-s5-5`) makes that
    /// layer separable.
    pub fn srcnn(kernels: &str, widths: (usize, usize), scale: usize) -> Result<Self> {
        Self::three_layer(Family::Srcnn, kernels, widths, scale)
    }

    /// ESPCN-style three-layer network at LR resolution with a pixel shuffle.
    pub fn espcn(kernels: &str, widths: (usize, usize), scale: usize) -> Result<Self> {
        Self::three_layer(Family::Espcn, kernels, widths, scale)
    }

    fn three_layer(family: Family, kernels: &str, (n1, n2): (usize, usize), scale: usize) -> Result<Self> {
        let tokens: Vec<&str> = kernels.split('-').collect();
        if tokens.len() != 3 {
            return Err(Error::InvalidSpec(format!("expected three kernel sizes, got `{kernels}`")));
        }
        let (out, acts, up, prefix) = match family {
            Family::Srcnn => (
                1,
                [ActivationKind::Relu, ActivationKind::Relu, ActivationKind::Identity],
                Upsampling::PreBicubic,
                "SRCNN",
            ),
            Family::Espcn => (
                scale * scale,
                [ActivationKind::Tanh, ActivationKind::Tanh, ActivationKind::Sigmoid],
                Upsampling::PostPixelShuffle(scale),
                "ESPCN",
            ),
        };
        let channels = [(1, n1), (n1, n2), (n2, out)];
        let mut layers = Vec::with_capacity(3);
        let mut any_sep = false;
        for (i, tok) in tokens.iter().enumerate() {
            let (sep, digits) = match tok.strip_prefix('s') {
                Some(rest) => (true, rest),
                None => (false, *tok),
            };
            let k: usize = digits
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad kernel size `{tok}` in `{kernels}`")))?;
            let (c_in, c_out) = channels[i];
            any_sep |= sep;
            layers.push(if sep {
                LayerSpec::separable(c_in, c_out, k, acts[i])
            } else {
                LayerSpec::square(c_in, c_out, k, acts[i])
            });
        }
        let name = format!("{}{prefix}-{kernels}", if any_sep { "S-" } else { "" });
        Self::new(name, scale, layers, up)
    }

    /// VDSR(B^N): a 3×3 input conv, `blocks` 3×3 conv+ReLU blocks, a 3×3 output
    /// conv and a global residual connection. The input and output convs carry
    /// no bias.
    pub fn vdsr(blocks: usize, width: usize, separable: bool, scale: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::InvalidSpec("VDSR needs at least one block".into()));
        }
        let mut layers = vec![LayerSpec::square(1, width, 3, ActivationKind::Relu).without_bias()];
        for _ in 0..blocks {
            layers.push(if separable {
                LayerSpec::separable(width, width, 3, ActivationKind::Relu)
            } else {
                LayerSpec::square(width, width, 3, ActivationKind::Relu)
            });
        }
        layers.push(LayerSpec::square(width, 1, 3, ActivationKind::Identity).without_bias());
        let name = format!("{}VDSR-B{blocks}", if separable { "S-" } else { "" });
        Self::new(name, scale, layers, Upsampling::ResidualPreBicubic)
    }

    /// Expands a model name such as `SRCNN`, `S-SRCNN-9-s5-5`, `S-ESPCN` or
    /// `VDSR-B3`.
    pub fn from_name(name: &str, widths: Widths, scale: usize) -> Result<Self> {
        let (sep, rest) = match name.strip_prefix("S-") {
            Some(r) => (true, r),
            None => (false, name),
        };
        let unknown = || Error::InvalidSpec(format!("unknown model `{name}`"));
        if let Some(blocks) = rest.strip_prefix("VDSR-B") {
            let n: usize = blocks.parse().map_err(|_| unknown())?;
            return Self::vdsr(n, widths.vdsr, sep, scale);
        }
        let (family, tail) = match rest.split_once('-') {
            Some((f, t)) => (f, Some(t)),
            None => (rest, None),
        };
        let (builder, default_sq, default_sep): (fn(&str, (usize, usize), usize) -> Result<Self>, _, _) =
            match family {
                "SRCNN" => (Self::srcnn, "9-5-5", "9-s5-5"),
                "ESPCN" => (Self::espcn, "5-3-3", "5-s3-3"),
                _ => return Err(unknown()),
            };
        let w = if family == "SRCNN" { widths.srcnn } else { widths.espcn };
        let kernels = tail.unwrap_or(if sep { default_sep } else { default_sq });
        let spec = builder(kernels, w, scale)?;
        if sep != spec.layers.iter().any(LayerSpec::is_separable) {
            return Err(Error::InvalidSpec(format!(
                "`{name}`: the S- prefix must match the presence of separable layers"
            )));
        }
        Ok(spec)
    }

    pub fn is_separable(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_separable)
    }

    /// Separable layers that touch a single-channel map, where the 1-D
    /// factorization costs more parameters than the square kernel it replaces.
    pub fn lsk_warnings(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_separable() && (l.c_in == 1 || l.c_out == 1))
            .map(|(i, l)| {
                format!(
                    "{}: layer {i} is separable with {}→{} channels, which inflates its parameter count",
                    self.name, l.c_in, l.c_out
                )
            })
            .collect()
    }

    /// Same architecture with every separable layer replaced by a square one.
    pub fn merged(&self) -> ModelSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerSpec { kind: LayerKind::Square, ..*l })
            .collect();
        ModelSpec { name: format!("{}+merged", self.name), layers, ..self.clone() }
    }

    /// Square layers with more than one input and output channel become
    /// separable with `c_extra` extra maps.
    pub fn decomposed(&self, c_extra: usize) -> ModelSpec {
        let layers = self
            .layers
            .iter()
            .map(|l| match l.kind {
                LayerKind::Square if l.c_in > 1 && l.c_out > 1 => {
                    LayerSpec { kind: LayerKind::Separable { c_extra }, ..*l }
                }
                _ => *l,
            })
            .collect();
        ModelSpec { name: format!("{}+decomposed{c_extra}", self.name), layers, ..self.clone() }
    }

    /// Lossless text form, e.g.
    /// `name=SRCNN-9-5-5;scale=2;up=pre;layers=sq:1:64:9:b:relu,sep32:64:32:5:b:relu,...`
    pub fn to_descriptor(&self) -> String {
        let up = match self.upsampling {
            Upsampling::PreBicubic => "pre".to_string(),
            Upsampling::ResidualPreBicubic => "residual".to_string(),
            Upsampling::PostPixelShuffle(r) => format!("shuffle{r}"),
        };
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| {
                let kind = match l.kind {
                    LayerKind::Square => "sq".to_string(),
                    LayerKind::Separable { c_extra } => format!("sep{c_extra}"),
                };
                format!(
                    "{kind}:{}:{}:{}:{}:{}",
                    l.c_in,
                    l.c_out,
                    l.k,
                    if l.has_bias { "b" } else { "nb" },
                    l.activation.name()
                )
            })
            .collect();
        format!("name={};scale={};up={up};layers={}", self.name, self.scale, layers.join(","))
    }

    pub fn from_descriptor(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::InvalidSpec(format!("malformed descriptor ({what}): `{s}`"));
        let mut name = None;
        let mut scale = None;
        let mut up = None;
        let mut layers = None;
        for field in s.split(';') {
            let (k, v) = field.split_once('=').ok_or_else(|| bad("field"))?;
            match k {
                "name" => name = Some(v.to_string()),
                "scale" => scale = Some(v.parse::<usize>().map_err(|_| bad("scale"))?),
                "up" => {
                    up = Some(match v {
                        "pre" => Upsampling::PreBicubic,
                        "residual" => Upsampling::ResidualPreBicubic,
                        _ => Upsampling::PostPixelShuffle(
                            v.strip_prefix("shuffle")
                                .and_then(|r| r.parse().ok())
                                .ok_or_else(|| bad("up"))?,
                        ),
                    })
                }
                "layers" => {
                    let parsed: Result<Vec<LayerSpec>> = v
                        .split(',')
                        .map(|l| {
                            let parts: Vec<&str> = l.split(':').collect();
                            if parts.len() != 6 {
                                return Err(bad("layer"));
                            }
                            let kind = if parts[0] == "sq" {
                                LayerKind::Square
                            } else {
                                let c_extra = parts[0]
                                    .strip_prefix("sep")
                                    .and_then(|c| c.parse().ok())
                                    .ok_or_else(|| bad("layer kind"))?;
                                LayerKind::Separable { c_extra }
                            };
                            let num = |p: &str| p.parse::<usize>().map_err(|_| bad("layer number"));
                            Ok(LayerSpec {
                                kind,
                                c_in: num(parts[1])?,
                                c_out: num(parts[2])?,
                                k: num(parts[3])?,
                                has_bias: match parts[4] {
                                    "b" => true,
                                    "nb" => false,
                                    _ => return Err(bad("bias flag")),
                                },
                                activation: ActivationKind::from_name(parts[5]).ok_or_else(|| bad("activation"))?,
                            })
                        })
                        .collect();
                    layers = Some(parsed?);
                }
                _ => return Err(bad("unknown field")),
            }
        }
        Self::new(
            name.ok_or_else(|| bad("missing name"))?,
            scale.ok_or_else(|| bad("missing scale"))?,
            layers.ok_or_else(|| bad("missing layers"))?,
            up.ok_or_else(|| bad("missing up"))?,
        )
    }
}

/// Parameter counting conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountOptions {
    /// Count `c_extra` biases for the extra layer of each biased separable
    /// layer, although the staged form does not allocate them.
    pub count_extra_bias: bool,
}

impl CountOptions {
    /// Exactly the scalars a built network allocates.
    pub const ALLOCATED: CountOptions = CountOptions { count_extra_bias: false };
}

impl Default for CountOptions {
    fn default() -> Self {
        CountOptions { count_extra_bias: true }
    }
}

pub fn layer_param_count(layer: &LayerSpec, opts: CountOptions) -> u64 {
    let (ci, co, k) = (layer.c_in as u64, layer.c_out as u64, layer.k as u64);
    let bias = if layer.has_bias { co } else { 0 };
    match layer.kind {
        LayerKind::Square => ci * k * k * co + bias,
        LayerKind::Separable { c_extra } => {
            let ce = c_extra as u64;
            let extra_bias = if layer.has_bias && opts.count_extra_bias { ce } else { 0 };
            ci * k * ce + ce * k * co + bias + extra_bias
        }
    }
}

pub fn param_count(spec: &ModelSpec, opts: CountOptions) -> u64 {
    spec.layers.iter().map(|l| layer_param_count(l, opts)).sum()
}

/// Weight ratio of a separable layer to the square layer it replaces.
pub fn param_ratio(c_prev: u64, c_extra: u64, c_next: u64, k: u64) -> Ratio<u64> {
    Ratio::new(c_prev * k * c_extra + c_extra * k * c_next, c_prev * k * k * c_next)
}

/// Operations of one layer applied to a `w×h` map.
pub fn flop_conv(k: u64, c_in: u64, c_out: u64, h: u64, w: u64, kind: LayerKind) -> FlopCount {
    let wh = w * h;
    match kind {
        LayerKind::Square => {
            let a = c_in * c_out;
            FlopCount { mul: a * wh * k * k, add: a * (wh * (k * k - 1) + 1) }
        }
        LayerKind::Separable { c_extra } => {
            let ce = c_extra as u64;
            let b = c_in * ce;
            let c = ce * c_out;
            let extra = FlopCount { mul: b * wh * k, add: b * (wh * (k - 1) + 1) };
            let out = FlopCount { mul: c * wh * k, add: c * (wh * (k - 1) + 1) };
            extra + out
        }
    }
}

fn flop_layer(l: &LayerSpec, h: u64, w: u64) -> FlopCount {
    flop_conv(l.k as u64, l.c_in as u64, l.c_out as u64, h, w, l.kind)
}

/// Operations with every layer evaluated on `feat_h × feat_w` feature maps.
pub fn flop_model_at(spec: &ModelSpec, feat_h: u64, feat_w: u64) -> FlopCount {
    spec.layers.iter().map(|l| flop_layer(l, feat_h, feat_w)).sum()
}

/// Operations to produce an `out_h × out_w` super-resolved image.
///
/// Pre-upsampling models convolve at output resolution; post-upsampling
/// models convolve at `out/scale` before the shuffle.
pub fn flop_model(spec: &ModelSpec, out_h: u64, out_w: u64, scale: u64) -> Result<FlopCount> {
    match spec.upsampling {
        Upsampling::PostPixelShuffle(r) => {
            if scale == 0 || out_h % scale != 0 || out_w % scale != 0 {
                return Err(Error::InvalidShape(format!(
                    "{out_h}x{out_w} output is not divisible by scale {scale}"
                )));
            }
            if r as u64 != scale {
                return Err(Error::InvalidShape(format!(
                    "{} upsamples by {r}, not by {scale}",
                    spec.name
                )));
            }
            Ok(flop_model_at(spec, out_h / scale, out_w / scale))
        }
        _ => Ok(flop_model_at(spec, out_h, out_w)),
    }
}

/// Bias additions at `h × w`: one per output element of every biased layer.
pub fn bias_ops_at(spec: &ModelSpec, h: u64, w: u64) -> u64 {
    spec.layers.iter().filter(|l| l.has_bias).map(|l| l.c_out as u64 * h * w).sum()
}

/// Square-over-separable operation ratios for equal channel counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopRatios {
    /// Multiplication ratio, exactly `k/2`.
    pub alpha: Ratio<u64>,
    /// Addition ratio at the given map size.
    pub beta: Ratio<u64>,
    /// Addition ratio as `w·h → ∞`: `(k+1)/2`.
    pub beta_limit: Ratio<u64>,
}

pub fn flop_ratios(k: u64, h: u64, w: u64) -> FlopRatios {
    // channel counts cancel; take c = 1 so A = 1 and B + C = 2
    let sq = flop_conv(k, 1, 1, h, w, LayerKind::Square);
    let sep = flop_conv(k, 1, 1, h, w, LayerKind::Separable { c_extra: 1 });
    FlopRatios {
        alpha: Ratio::new(sq.mul, sep.mul),
        beta: Ratio::new(sq.add, sep.add),
        beta_limit: Ratio::new(k + 1, 2),
    }
}

/// One (normal, separable) comparison row.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub normal: String,
    pub separable: String,
    pub params_normal: u64,
    pub params_separable: u64,
    pub param_decline_pct: f64,
    pub flops_normal: FlopCount,
    pub flops_separable: FlopCount,
    pub bias_ops_normal: u64,
    pub bias_ops_separable: u64,
    /// Headline operation count: weight multiplications plus bias additions.
    pub table_ops_normal: u64,
    pub table_ops_separable: u64,
    pub flop_decline_pct: f64,
}

pub fn decline_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        return 0.0;
    }
    100.0 * (1.0 - after as f64 / before as f64)
}

/// Parameter and operation comparison with every model's feature maps at
/// `h × w`, which is how published figures for `512×512` are obtained for
/// both pre- and post-upsampling models.
pub fn comparison_report(pairs: &[(ModelSpec, ModelSpec)], h: u64, w: u64, opts: CountOptions) -> Vec<ComparisonRow> {
    pairs
        .iter()
        .map(|(normal, sep)| {
            let (pn, ps) = (param_count(normal, opts), param_count(sep, opts));
            let (fn_, fs) = (flop_model_at(normal, h, w), flop_model_at(sep, h, w));
            let (bn, bs) = (bias_ops_at(normal, h, w), bias_ops_at(sep, h, w));
            let (tn, ts) = (fn_.mul + bn, fs.mul + bs);
            ComparisonRow {
                normal: normal.name.clone(),
                separable: sep.name.clone(),
                params_normal: pn,
                params_separable: ps,
                param_decline_pct: decline_pct(pn, ps),
                flops_normal: fn_,
                flops_separable: fs,
                bias_ops_normal: bn,
                bias_ops_separable: bs,
                table_ops_normal: tn,
                table_ops_separable: ts,
                flop_decline_pct: decline_pct(tn, ts),
            }
        })
        .collect()
}
