//! Networks built from a [`ModelSpec`], reverse-mode passes over the layer
//! stack, optimizers and the training loop.
//!
//! Image tensors fed to a network hold luminance scaled to `[0, 1]`.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::complexity::{LayerKind, ModelSpec, Upsampling};
use crate::conv::{pixel_shuffle, pixel_unshuffle, ActivationKind, Conv1d, Conv2d, Padding};
use crate::error::{Error, Result};
use crate::imaging::{degrade, extract_patches, psnr, PlaneF};
use crate::lsk::{decompose_layer, SeparablePair};
use crate::tensor::{Dims, Element, Rng, Tensor4};

fn push_conv1d<'a, T: Element>(out: &mut Vec<&'a mut [T]>, c: &'a mut Conv1d<T>) {
    let (w, b) = c.params_mut();
    out.push(w);
    out.extend(b);
}

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn fresh_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Element = f32> {
    Conv(Conv2d<T>),
    /// Vertical then horizontal 1-D stage, no activation in between.
    Separable(SeparablePair<T>),
    Activation(ActivationKind),
    PixelShuffle(usize),
    /// Adds the network input back onto the running output.
    ResidualAdd,
}

/// Name, shape and initialization fan-in of one trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub dims: Vec<usize>,
    /// `None` for biases, which start at zero.
    pub fan_in: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Network<T: Element = f32> {
    spec: ModelSpec,
    layers: Vec<Layer<T>>,
    /// Changes whenever parameters may have been mutated; tapes remember it.
    generation: u64,
}

impl<T: Element> PartialEq for Network<T> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.layers == other.layers
    }
}

/// Intermediates saved by [`Network::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T: Element = f32> {
    generation: u64,
    inputs: Vec<Tensor4<T>>,
    extras: Vec<Option<Tensor4<T>>>,
    output: Dims,
}

/// Parameter gradients in [`Network::param_infos`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Element = f32> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|g| g.is_finite())
    }
}

/// Builds a randomly initialized `f32` network and returns it with any
/// warnings about parameter-inflating separable layers.
///
/// Weights are drawn from `U(−1/√fan_in, 1/√fan_in)` with `fan_in = c_in·k²`
/// for square layers and `c_in·k` for each 1-D stage; biases start at zero.
pub fn build_model(spec: &ModelSpec, rng: &mut Rng) -> Result<(Network<f32>, Vec<String>)> {
    let mut net = Network::zeros(spec)?;
    let infos = net.param_infos();
    for (info, p) in infos.iter().zip(net.params_mut()) {
        if let Some(fan_in) = info.fan_in {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in p.iter_mut() {
                *v = rng.uniform(-bound, bound) as f32;
            }
        }
    }
    Ok((net, spec.lsk_warnings()))
}

impl<T: Element> Network<T> {
    /// Network with every parameter zero.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let pad = Padding::SameZero;
        let mut layers = Vec::new();
        for l in &spec.layers {
            layers.push(match l.kind {
                LayerKind::Square => Layer::Conv(Conv2d::zeros(l.c_in, l.c_out, l.k, l.has_bias, pad)?),
                LayerKind::Separable { c_extra } => {
                    Layer::Separable(SeparablePair::zeros(l.c_in, c_extra, l.c_out, l.k, l.has_bias, pad)?)
                }
            });
            if l.activation != ActivationKind::Identity {
                layers.push(Layer::Activation(l.activation));
            }
        }
        match spec.upsampling {
            Upsampling::PreBicubic => {}
            Upsampling::PostPixelShuffle(r) => layers.push(Layer::PixelShuffle(r)),
            Upsampling::ResidualPreBicubic => layers.push(Layer::ResidualAdd),
        }
        Ok(Network { spec: spec.clone(), layers, generation: fresh_generation() })
    }

    /// Network with parameters given in [`Network::param_infos`] order.
    pub fn from_params(spec: &ModelSpec, tensors: Vec<Vec<T>>) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let infos = net.param_infos();
        if tensors.len() != infos.len() {
            return Err(Error::mismatch(
                format!("{} parameter tensors", infos.len()),
                format!("{} tensors", tensors.len()),
            ));
        }
        for ((info, dst), src) in infos.iter().zip(net.params_mut()).zip(&tensors) {
            if dst.len() != src.len() {
                return Err(Error::mismatch(
                    format!("{} values for {}", dst.len(), info.name),
                    src.len(),
                ));
            }
            if src.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidLayer(format!("{} holds non-finite values", info.name)));
            }
            dst.copy_from_slice(src);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Trainable tensors in a fixed order: per conv stage `s`, either
    /// `conv{s}.weight` and `conv{s}.bias`, or `conv{s}.vertical.weight`,
    /// `conv{s}.horizontal.weight` and `conv{s}.horizontal.bias`.
    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        let mut stage = 0;
        let bias = |name: String, n: usize| ParamInfo { name, dims: vec![n], fan_in: None };
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    let d = c.weight().dims();
                    out.push(ParamInfo {
                        name: format!("conv{stage}.weight"),
                        dims: d.as_array().to_vec(),
                        fan_in: Some(c.c_in() * c.k() * c.k()),
                    });
                    if c.bias().is_some() {
                        out.push(bias(format!("conv{stage}.bias"), c.c_out()));
                    }
                    stage += 1;
                }
                Layer::Separable(p) => {
                    for (label, conv) in [("vertical", p.vertical()), ("horizontal", p.horizontal())] {
                        out.push(ParamInfo {
                            name: format!("conv{stage}.{label}.weight"),
                            dims: conv.weight().dims().as_array().to_vec(),
                            fan_in: Some(conv.c_in() * conv.k()),
                        });
                    }
                    if p.horizontal().bias().is_some() {
                        out.push(bias(format!("conv{stage}.horizontal.bias"), p.c_out()));
                    }
                    stage += 1;
                }
                _ => {}
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(c.weight().as_slice());
                    out.extend(c.bias());
                }
                Layer::Separable(p) => {
                    out.push(p.vertical().weight().as_slice());
                    out.push(p.horizontal().weight().as_slice());
                    out.extend(p.horizontal().bias());
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable parameter views; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.generation = fresh_generation();
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    let (w, b) = c.params_mut();
                    out.push(w);
                    out.extend(b);
                }
                Layer::Separable(p) => {
                    let (v, h) = p.stages_mut();
                    push_conv1d(&mut out, v);
                    push_conv1d(&mut out, h);
                }
                _ => {}
            }
        }
        out
    }

    /// Number of trainable scalars actually allocated.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(c.cast()),
                Layer::Separable(p) => Layer::Separable(p.cast()),
                Layer::Activation(a) => Layer::Activation(*a),
                Layer::PixelShuffle(r) => Layer::PixelShuffle(*r),
                Layer::ResidualAdd => Layer::ResidualAdd,
            })
            .collect();
        Network { spec: self.spec.clone(), layers, generation: fresh_generation() }
    }

    /// Every separable pair replaced by its equivalent square layer.
    pub fn merged(&self) -> Network<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Separable(p) => Layer::Conv(p.merged()),
                other => other.clone(),
            })
            .collect();
        Network { spec: self.spec.merged(), layers, generation: fresh_generation() }
    }

    /// Square layers with several input and output channels factorized into
    /// pairs with `c_extra` extra maps. Returns `(conv stage, residual)` per
    /// factorized layer.
    pub fn decomposed(&self, c_extra: usize) -> Result<(Network<T>, Vec<(usize, f64)>)> {
        let mut residuals = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut stage = 0;
        for l in &self.layers {
            layers.push(match l {
                Layer::Conv(c) if c.c_in() > 1 && c.c_out() > 1 => {
                    let (pair, err) = decompose_layer(c, c_extra)?;
                    residuals.push((stage, err));
                    Layer::Separable(pair)
                }
                other => other.clone(),
            });
            if matches!(l, Layer::Conv(_) | Layer::Separable(_)) {
                stage += 1;
            }
        }
        let net = Network { spec: self.spec.decomposed(c_extra), layers, generation: fresh_generation() };
        Ok((net, residuals))
    }

    fn check_input(&self, x: Dims) -> Result<()> {
        let c_in = self.spec.layers[0].c_in;
        if x.c != c_in {
            return Err(Error::mismatch(format!("{c_in} input channel(s)"), format!("{} channels", x.c)));
        }
        Ok(())
    }

    /// Output and the tape needed to differentiate it.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tape<T>)> {
        self.check_input(x.dims())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut extras = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut extra = None;
            let next = match layer {
                Layer::Conv(c) => c.forward(&h)?,
                Layer::Separable(p) => {
                    let (e, out) = p.forward_staged(&h)?;
                    extra = Some(e);
                    out
                }
                Layer::Activation(a) => a.forward(&h),
                Layer::PixelShuffle(r) => pixel_shuffle(&h, *r)?,
                Layer::ResidualAdd => h.add(x)?,
            };
            extras.push(extra);
            inputs.push(std::mem::replace(&mut h, next));
        }
        let tape = Tape { generation: self.generation, inputs, extras, output: h.dims() };
        Ok((h, tape))
    }

    /// Forward pass without keeping intermediates.
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x.dims())?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(&h)?,
                Layer::Separable(p) => p.forward(&h)?,
                Layer::Activation(a) => a.forward(&h),
                Layer::PixelShuffle(r) => pixel_shuffle(&h, *r)?,
                Layer::ResidualAdd => h.add(x)?,
            };
        }
        Ok(h)
    }

    /// Output of every conv stage after its activation, in stage order.
    pub fn stage_outputs(&self, x: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
        self.check_input(x.dims())?;
        let mut outs: Vec<Tensor4<T>> = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward(&h)?,
                Layer::Separable(p) => p.forward(&h)?,
                Layer::Activation(a) => {
                    let y = a.forward(&h);
                    outs.pop();
                    outs.push(y.clone());
                    y
                }
                Layer::PixelShuffle(r) => pixel_shuffle(&h, *r)?,
                Layer::ResidualAdd => h.add(x)?,
            };
            if matches!(layer, Layer::Conv(_) | Layer::Separable(_)) {
                outs.push(h.clone());
            }
        }
        Ok(outs)
    }

    /// Parameter gradients of `Σ grad_y ⊙ y` for the forward pass recorded in `tape`.
    pub fn backward(&self, tape: &Tape<T>, grad_y: &Tensor4<T>) -> Result<Gradients<T>> {
        if tape.generation != self.generation || tape.inputs.len() != self.layers.len() {
            return Err(Error::InvalidState(
                "tape was recorded before the parameters last changed".into(),
            ));
        }
        if grad_y.dims() != tape.output {
            return Err(Error::mismatch(tape.output, grad_y.dims()));
        }
        let mut per_layer: Vec<Vec<Vec<T>>> = vec![Vec::new(); self.layers.len()];
        let mut g = Some(grad_y.clone());
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let Some(grad) = g.take() else { break };
            let x = &tape.inputs[li];
            let need_input = li > 0;
            g = match layer {
                Layer::Conv(c) => {
                    let cg = c.backward_with(x, &grad, need_input)?;
                    per_layer[li].push(cg.weight);
                    per_layer[li].extend(cg.bias);
                    cg.input
                }
                Layer::Separable(p) => {
                    let extra = tape.extras[li]
                        .as_ref()
                        .ok_or_else(|| Error::InvalidState("tape lacks extra-layer maps".into()))?;
                    let sg = p.backward(x, extra, &grad, need_input)?;
                    per_layer[li].push(sg.vertical);
                    per_layer[li].push(sg.horizontal);
                    per_layer[li].extend(sg.horizontal_bias);
                    sg.input
                }
                Layer::Activation(a) => Some(a.backward(x, &grad)?),
                Layer::PixelShuffle(r) => Some(pixel_unshuffle(&grad, *r)?),
                // the skip branch only reaches the network input
                Layer::ResidualAdd => Some(grad),
            };
        }
        Ok(Gradients { tensors: per_layer.into_iter().flatten().collect() })
    }
}

/// Which baseline recipe a spec belongs to, read off its upsampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Srcnn,
    Espcn,
    Vdsr,
}

impl Family {
    pub fn of(spec: &ModelSpec) -> Family {
        match spec.upsampling {
            Upsampling::PreBicubic => Family::Srcnn,
            Upsampling::PostPixelShuffle(_) => Family::Espcn,
            Upsampling::ResidualPreBicubic => Family::Vdsr,
        }
    }
}

/// Network input for a cropped HR plane (LR for post-upsampling models,
/// bicubic coarse HR otherwise) together with the bicubic baseline.
pub fn prepare_input(spec: &ModelSpec, hr: &PlaneF) -> Result<(PlaneF, PlaneF)> {
    let (lr, coarse) = degrade(hr, spec.scale)?;
    Ok(match spec.upsampling {
        Upsampling::PostPixelShuffle(_) => (lr, coarse),
        _ => (coarse.clone(), coarse),
    })
}

/// Runs a plane on the `[0, 255]` scale through the network.
pub fn predict_plane<T: Element>(net: &Network<T>, input: &PlaneF) -> Result<PlaneF> {
    let y = net.predict(&input.to_tensor(1.0 / 255.0))?;
    Ok(PlaneF::from_tensor(&y, 0, 0, 255.0))
}

/// One training or validation pair, both `1×1×h×w` on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T: Element = f32> {
    pub input: Tensor4<T>,
    pub target: Tensor4<T>,
}

/// Examples from `(network input, HR target)` planes on `[0, 255]`. With
/// `patch = Some((size, stride))` each pair is cut into aligned patches
/// measured in input pixels; otherwise whole planes are used.
pub fn make_examples<T: Element>(pairs: &[(PlaneF, PlaneF)], patch: Option<(usize, usize)>) -> Result<Vec<Example<T>>> {
    let mut out = Vec::new();
    let to_example = |i: &PlaneF, t: &PlaneF| Example { input: i.to_tensor(1.0 / 255.0), target: t.to_tensor(1.0 / 255.0) };
    for (input, target) in pairs {
        match patch {
            Some((size, stride)) => {
                for (pi, pt) in extract_patches(input, target, size, stride)? {
                    out.push(to_example(&pi, &pt));
                }
            }
            None => {
                extract_patches(input, target, input.width.min(input.height), 1)?;
                out.push(to_example(input, target));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    L1,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::L1 => "l1",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "mse" => Some(LossKind::Mse),
            "l1" => Some(LossKind::L1),
            _ => None,
        }
    }
}

/// Mean loss over all elements and its gradient with respect to `y`.
pub fn loss_and_grad<T: Element>(kind: LossKind, y: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    if y.dims() != target.dims() {
        return Err(Error::mismatch(target.dims(), y.dims()));
    }
    let n = y.as_slice().len() as f64;
    let mut total = 0.0;
    let grad = y
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            match kind {
                LossKind::Mse => {
                    total += d * d;
                    T::from_f64(2.0 * d / n)
                }
                LossKind::L1 => {
                    total += d.abs();
                    // subgradient 0 at d = 0
                    T::from_f64(if d == 0.0 { 0.0 } else { d.signum() / n })
                }
            }
        })
        .collect();
    Ok((total / n, Tensor4::from_vec(y.dims(), grad)?))
}

/// Piecewise-constant learning rate indexed by 1-based epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    /// `(first epoch, rate)`, starting at epoch 1 with strictly increasing epochs.
    steps: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { steps: vec![(1, lr)] }
    }

    pub fn new(steps: Vec<(usize, f64)>) -> Result<Self> {
        if steps.first().map(|s| s.0) != Some(1) {
            return Err(Error::InvalidArgument("learning-rate schedule must start at epoch 1".into()));
        }
        if steps.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidArgument("schedule epochs must increase".into()));
        }
        if steps.iter().any(|s| !s.1.is_finite() || s.1 < 0.0) {
            return Err(Error::InvalidArgument("learning rates must be finite and >= 0".into()));
        }
        Ok(LrSchedule { steps })
    }

    /// Parses `0.01,0.001@30,0.0001@80`: the first rate applies from epoch 1,
    /// each later `rate@epoch` from that epoch on.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("bad learning-rate schedule `{s}`"));
        let mut steps = Vec::new();
        for (i, part) in s.split(',').map(str::trim).enumerate() {
            let (lr, epoch) = match part.split_once('@') {
                Some((lr, e)) => (lr, e.trim().parse::<usize>().map_err(|_| bad())?),
                None if i == 0 => (part, 1),
                None => return Err(bad()),
            };
            steps.push((epoch, lr.trim().parse::<f64>().map_err(|_| bad())?));
        }
        Self::new(steps)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.steps
            .iter()
            .take_while(|(start, _)| *start <= epoch.max(1))
            .last()
            .map_or(self.steps[0].1, |s| s.1)
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (epoch, lr)) in self.steps.iter().enumerate() {
            if i == 0 {
                write!(f, "{lr}")?;
            } else {
                write!(f, ",{lr}@{epoch}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const SGD_MOMENTUM: OptimizerKind = OptimizerKind::Sgd { momentum: 0.9 };
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::SGD_MOMENTUM),
            "adam" => Some(Self::ADAM),
            _ => None,
        }
    }
}

/// Optimizer state; moment buffers live in `f64` and are sized on the first step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    schedule: LrSchedule,
    clip: Option<f64>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule, clip: Option<f64>) -> Self {
        Optimizer { kind, schedule, clip, first: Vec::new(), second: Vec::new(), steps: 0 }
    }

    /// Applies one update and returns the learning rate used. Gradients are
    /// rescaled first when their global norm exceeds the clip threshold.
    pub fn step<T: Element>(&mut self, net: &mut Network<T>, grads: &Gradients<T>, epoch: usize) -> Result<f64> {
        let lr = self.schedule.lr_at(epoch);
        let mut params = net.params_mut();
        if params.len() != grads.tensors.len()
            || params.iter().zip(&grads.tensors).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::mismatch("gradients shaped like the parameters", "different layout"));
        }
        if self.first.is_empty() {
            self.first = grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        let scale = match self.clip {
            Some(c) => {
                let norm = grads.global_norm();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.steps += 1;
        for (ti, (p, g)) in params.iter_mut().zip(&grads.tensors).enumerate() {
            let m = &mut self.first[ti];
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((pv, gv), mv) in p.iter_mut().zip(g).zip(m.iter_mut()) {
                        *mv = momentum * *mv + gv.as_f64() * scale;
                        *pv = T::from_f64(pv.as_f64() - lr * *mv);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = &mut self.second[ti];
                    let c1 = 1.0 - beta1.powi(self.steps as i32);
                    let c2 = 1.0 - beta2.powi(self.steps as i32);
                    for (((pv, gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gs = gv.as_f64() * scale;
                        *mv = beta1 * *mv + (1.0 - beta1) * gs;
                        *vv = beta2 * *vv + (1.0 - beta2) * gs * gs;
                        let update = (*mv / c1) / ((*vv / c2).sqrt() + eps);
                        *pv = T::from_f64(pv.as_f64() - lr * update);
                    }
                }
            }
        }
        Ok(lr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Global-norm gradient clipping threshold.
    pub clip: Option<f64>,
}

impl TrainConfig {
    /// Epochs, batch size and initial learning rates of the reference
    /// configurations. SRCNN and VDSR use SGD with momentum, ESPCN uses Adam
    /// with its rate dropping to 1e-3 at epoch 30 and 1e-4 at epoch 80.
    pub fn reference(family: Family) -> Self {
        let base = TrainConfig {
            epochs: 400,
            batch_size: 16,
            seed: 0,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::SGD_MOMENTUM,
            schedule: LrSchedule::constant(1e-4),
            clip: None,
        };
        match family {
            Family::Srcnn => base,
            Family::Espcn => TrainConfig {
                epochs: 100,
                batch_size: 64,
                optimizer: OptimizerKind::ADAM,
                schedule: LrSchedule { steps: vec![(1, 1e-2), (30, 1e-3), (80, 1e-4)] },
                ..base
            },
            Family::Vdsr => TrainConfig {
                epochs: 80,
                schedule: LrSchedule::constant(0.1),
                clip: Some(0.4),
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Example-weighted mean training loss over the epoch.
    pub loss: f64,
    /// Mean validation PSNR in dB, if a validation set was given.
    pub val_psnr: Option<f64>,
}

/// Mean PSNR of clamped network outputs against the targets, shaving
/// `spec.scale` border pixels.
pub fn validation_psnr<T: Element>(net: &Network<T>, examples: &[Example<T>]) -> Result<f64> {
    let shave = net.spec().scale;
    let mut total = 0.0;
    for ex in examples {
        let y = net.predict(&ex.input)?;
        let mut out = PlaneF::from_tensor(&y, 0, 0, 255.0);
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
        let target = PlaneF::from_tensor(&ex.target, 0, 0, 255.0);
        total += psnr(&out, &target, shave)?;
    }
    Ok(total / examples.len() as f64)
}

/// Mini-batch training. Batches are drawn in a seeded shuffled order each
/// epoch; `on_epoch` sees the log entry and the network after every epoch and
/// may abort by returning an error. A non-finite loss or gradient stops the
/// run before the offending update is applied.
pub fn train<T: Element, F>(
    net: &mut Network<T>,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &Network<T>) -> Result<()>,
{
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.schedule.clone(), cfg.clip);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut lr = cfg.schedule.lr_at(epoch);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&Tensor4<T>> = batch.iter().map(|&i| &train_set[i].input).collect();
            let targets: Vec<&Tensor4<T>> = batch.iter().map(|&i| &train_set[i].target).collect();
            let x = Tensor4::stack(&inputs)?;
            let t = Tensor4::stack(&targets)?;
            let (y, tape) = net.forward(&x)?;
            let (loss, grad_y) = loss_and_grad(cfg.loss, &y, &t)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let grads = net.backward(&tape, &grad_y)?;
            if !grads.is_finite() {
                return Err(Error::Diverged { epoch, loss: f64::NAN });
            }
            lr = opt.step(net, &grads, epoch)?;
            loss_sum += loss * batch.len() as f64;
        }
        let val_psnr = if val_set.is_empty() { None } else { Some(validation_psnr(net, val_set)?) };
        let log = EpochLog { epoch, lr, loss: loss_sum / train_set.len() as f64, val_psnr };
        on_epoch(&log, net)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Largest relative difference between analytic and central-difference
/// gradients of a random linear projection of the output.
///
/// Denominators are floored at 1e-3 of the largest analytic gradient so that
/// vanishing components are compared on the scale of the whole gradient.
pub fn grad_check(net: &Network<f64>, x: &Tensor4<f64>, eps: f64) -> Result<f64> {
    let (y, tape) = net.forward(x)?;
    let mut rng = Rng::new(0x6a09_e667);
    let proj = Tensor4::random_uniform(&mut rng, y.dims(), -1.0, 1.0)?;
    let analytic = net.backward(&tape, &proj)?;
    let objective = |n: &Network<f64>| -> Result<f64> {
        let y = n.predict(x)?;
        Ok(y.as_slice().iter().zip(proj.as_slice()).map(|(a, b)| a * b).sum())
    };
    let g_max = analytic.tensors.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * g_max).max(f64::MIN_POSITIVE);
    let mut work = net.clone();
    let mut worst = 0.0f64;
    for (ti, grads) in analytic.tensors.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work.params()[ti][j];
            work.params_mut()[ti][j] = orig + eps;
            let plus = objective(&work)?;
            work.params_mut()[ti][j] = orig - eps;
            let minus = objective(&work)?;
            work.params_mut()[ti][j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::{param_count, CountOptions, LayerSpec, Widths};

    fn toy(name: &str) -> ModelSpec {
        ModelSpec::from_name(name, Widths::TINY, 2).unwrap()
    }

    fn random_input<T: Element>(seed: u64, dims: (usize, usize, usize, usize)) -> Tensor4<T> {
        Tensor4::random_uniform(&mut Rng::new(seed), dims, 0.05, 0.95).unwrap()
    }

    #[test]
    fn allocated_params_match_counter() {
        for name in ["SRCNN", "S-SRCNN", "ESPCN", "S-ESPCN", "VDSR-B2", "S-VDSR-B3"] {
            for widths in [Widths::TINY, Widths::FULL] {
                let spec = ModelSpec::from_name(name, widths, 2).unwrap();
                let net = Network::<f32>::zeros(&spec).unwrap();
                assert_eq!(net.param_count() as u64, param_count(&spec, CountOptions::ALLOCATED), "{name}");
                let infos = net.param_infos();
                assert_eq!(infos.iter().map(|i| i.dims.iter().product::<usize>()).sum::<usize>(), net.param_count());
            }
        }
    }

    #[test]
    fn layer_stacks() {
        let net = Network::<f32>::zeros(&ModelSpec::from_name("SRCNN", Widths::FULL, 3).unwrap()).unwrap();
        let convs = net.layers().iter().filter(|l| matches!(l, Layer::Conv(_))).count();
        let relus = net.layers().iter().filter(|l| **l == Layer::Activation(ActivationKind::Relu)).count();
        assert_eq!((convs, relus, net.layers().len()), (3, 2, 5));

        let net = Network::<f32>::zeros(&toy("S-ESPCN")).unwrap();
        let kinds: Vec<_> = net
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => format!("conv{}", c.k()),
                Layer::Separable(p) => format!("sep{}", p.k()),
                Layer::Activation(a) => a.name().to_string(),
                Layer::PixelShuffle(r) => format!("shuffle{r}"),
                Layer::ResidualAdd => "residual".into(),
            })
            .collect();
        assert_eq!(kinds, ["conv5", "tanh", "sep3", "tanh", "conv3", "sigmoid", "shuffle2"]);

        let net = Network::<f32>::zeros(&toy("S-VDSR-B2")).unwrap();
        assert_eq!(net.layers().iter().filter(|l| matches!(l, Layer::Separable(_))).count(), 2);
        assert_eq!(net.layers().last(), Some(&Layer::ResidualAdd));
    }

    #[test]
    fn zero_weight_outputs() {
        let x = random_input::<f32>(1, (2, 1, 9, 7));
        let vdsr = Network::<f32>::zeros(&toy("S-VDSR-B2")).unwrap();
        assert_eq!(vdsr.predict(&x).unwrap(), x);
        let srcnn = Network::<f32>::zeros(&toy("SRCNN")).unwrap();
        assert!(srcnn.predict(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let espcn = Network::<f32>::zeros(&toy("ESPCN")).unwrap();
        let y = espcn.predict(&x).unwrap();
        assert_eq!(y.dims(), Dims::new(2, 1, 18, 14));
        assert!(y.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn stage_outputs_follow_activations() {
        let (net, _) = build_model(&toy("S-SRCNN"), &mut Rng::new(8)).unwrap();
        let x = random_input::<f32>(9, (1, 1, 7, 7));
        let outs = net.stage_outputs(&x).unwrap();
        assert_eq!(outs.len(), 3);
        assert_eq!(outs[0].dims().c, 8);
        assert_eq!(outs[1].dims().c, 4);
        assert!(outs[0].as_slice().iter().all(|&v| v >= 0.0));
        assert_eq!(outs[2], net.predict(&x).unwrap());
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let net = Network::<f32>::zeros(&toy("SRCNN")).unwrap();
        let x = Tensor4::<f32>::zeros((1, 3, 8, 8)).unwrap();
        assert!(matches!(net.predict(&x), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn build_is_seeded_and_bounded() {
        let spec = toy("S-SRCNN");
        let (a, warnings) = build_model(&spec, &mut Rng::new(9)).unwrap();
        let (b, _) = build_model(&spec, &mut Rng::new(9)).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(a, b);
        for (info, p) in a.param_infos().iter().zip(a.params()) {
            match info.fan_in {
                Some(f) => {
                    let bound = 1.0 / (f as f32).sqrt();
                    assert!(p.iter().all(|v| v.abs() <= bound), "{}", info.name);
                    assert!(p.iter().any(|&v| v != 0.0));
                }
                None => assert!(p.iter().all(|&v| v == 0.0)),
            }
        }
        assert_eq!(a.param_infos()[2].name, "conv1.vertical.weight");
        assert_eq!(a.param_infos()[2].fan_in, Some(8 * 5));
    }

    #[test]
    fn inflating_spec_warns() {
        let layers = vec![
            LayerSpec::separable(1, 4, 3, ActivationKind::Relu),
            LayerSpec::square(4, 1, 3, ActivationKind::Identity),
        ];
        let spec = ModelSpec::new("odd", 2, layers, Upsampling::PreBicubic).unwrap();
        let (_, warnings) = build_model(&spec, &mut Rng::new(0)).unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn zero_grad_in_zero_grad_out() {
        let (net, _) = build_model(&toy("S-ESPCN"), &mut Rng::new(2)).unwrap();
        let x = random_input(3, (1, 1, 6, 6));
        let (y, tape) = net.forward(&x).unwrap();
        let g = net.backward(&tape, &Tensor4::zeros(y.dims()).unwrap()).unwrap();
        assert!(g.tensors.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(g.tensors.len(), net.params().len());
    }

    #[test]
    fn stale_tape_rejected() {
        let (mut net, _) = build_model(&toy("SRCNN"), &mut Rng::new(2)).unwrap();
        let x = random_input(3, (1, 1, 6, 6));
        let (y, tape) = net.forward(&x).unwrap();
        net.params_mut()[0][0] += 0.5;
        assert!(matches!(net.backward(&tape, &y), Err(Error::InvalidState(_))));
        let wrong = Tensor4::zeros((1, 1, 5, 6)).unwrap();
        let (_, tape) = net.forward(&x).unwrap();
        assert!(matches!(net.backward(&tape, &wrong), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn single_layer_matches_conv_backward() {
        let layers = vec![LayerSpec::square(1, 1, 3, ActivationKind::Identity)];
        let spec = ModelSpec::new("one", 1, layers, Upsampling::PreBicubic).unwrap();
        let (net, _) = build_model(&spec, &mut Rng::new(4)).unwrap();
        let net = net.cast::<f64>();
        let x = random_input::<f64>(5, (1, 1, 5, 5));
        let gy = random_input::<f64>(6, (1, 1, 5, 5));
        let (_, tape) = net.forward(&x).unwrap();
        let g = net.backward(&tape, &gy).unwrap();
        let Layer::Conv(conv) = &net.layers()[0] else { panic!("expected conv") };
        let direct = conv.backward(&x, &gy).unwrap();
        assert_eq!(g.tensors[0], direct.weight);
        assert_eq!(g.tensors[1], direct.bias.unwrap());
    }

    #[test]
    fn merged_network_matches_staged() {
        for name in ["S-SRCNN", "S-ESPCN", "S-VDSR-B2"] {
            let (net, _) = build_model(&toy(name), &mut Rng::new(11)).unwrap();
            let x = random_input::<f32>(12, (1, 1, 10, 9));
            let merged = net.merged();
            assert!(!merged.spec().is_separable());
            let d = net.predict(&x).unwrap().max_abs_diff(&merged.predict(&x).unwrap()).unwrap();
            assert!(d < 1e-5, "{name}: {d}");
        }
    }

    #[test]
    fn decompose_round_trip_preserves_outputs() {
        let (net, _) = build_model(&toy("SRCNN"), &mut Rng::new(13)).unwrap();
        let full = 8 * 5;
        let (dec, residuals) = net.decomposed(full).unwrap();
        assert_eq!(residuals.len(), 1);
        assert_eq!(residuals[0].0, 1);
        assert!(residuals[0].1 < 1e-4);
        assert_eq!(dec.param_count() as u64, param_count(dec.spec(), CountOptions::ALLOCATED));
        let x = random_input::<f32>(14, (1, 1, 12, 12));
        let d = net.predict(&x).unwrap().max_abs_diff(&dec.predict(&x).unwrap()).unwrap();
        assert!(d < 1e-4, "{d}");
    }

    #[test]
    fn from_params_round_trip() {
        let (net, _) = build_model(&toy("S-VDSR-B1"), &mut Rng::new(15)).unwrap();
        let tensors: Vec<Vec<f32>> = net.params().iter().map(|p| p.to_vec()).collect();
        let back = Network::from_params(net.spec(), tensors.clone()).unwrap();
        assert_eq!(back, net);
        let mut short = tensors;
        short[0].pop();
        assert!(Network::from_params(net.spec(), short).is_err());
    }

    #[test]
    fn losses() {
        let y = Tensor4::<f64>::from_vec((1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = Tensor4::<f64>::from_vec((1, 1, 1, 4), vec![1.0, 0.0, 3.0, 6.0]).unwrap();
        let (l, g) = loss_and_grad(LossKind::Mse, &y, &t).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(g.as_slice(), &[0.0, 1.0, 0.0, -1.0]);
        let (l, g) = loss_and_grad(LossKind::L1, &y, &t).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.as_slice(), &[0.0, 0.25, 0.0, -0.25]);
    }

    #[test]
    fn schedule_parsing() {
        let s = LrSchedule::parse("0.01, 0.001@30,0.0001@80").unwrap();
        assert_eq!(s.lr_at(1), 0.01);
        assert_eq!(s.lr_at(29), 0.01);
        assert_eq!(s.lr_at(30), 0.001);
        assert_eq!(s.lr_at(100), 0.0001);
        assert_eq!(s.to_string(), "0.01,0.001@30,0.0001@80");
        assert_eq!(LrSchedule::parse(&s.to_string()).unwrap(), s);
        assert_eq!(TrainConfig::reference(Family::Espcn).schedule, s);
        for bad in ["", "x", "0.1,0.2", "0.1,0.2@5,0.3@5", "-1"] {
            assert!(LrSchedule::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn reference_configs() {
        let v = TrainConfig::reference(Family::Vdsr);
        assert_eq!((v.epochs, v.batch_size, v.clip), (80, 16, Some(0.4)));
        assert_eq!(v.schedule.lr_at(1), 0.1);
        let s = TrainConfig::reference(Family::Srcnn);
        assert_eq!((s.epochs, s.schedule.lr_at(1)), (400, 1e-4));
        assert_eq!(Family::of(&toy("S-ESPCN")), Family::Espcn);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let (mut net, _) = build_model(&toy("VDSR-B1"), &mut Rng::new(1)).unwrap();
        let before: Vec<Vec<f32>> = net.params().iter().map(|p| p.to_vec()).collect();
        let grads = Gradients { tensors: before.iter().map(|p| vec![100.0f32; p.len()]).collect() };
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, LrSchedule::constant(1.0), Some(0.4));
        opt.step(&mut net, &grads, 1).unwrap();
        let moved: f64 = net
            .params()
            .iter()
            .zip(&before)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)))
            .sum::<f64>()
            .sqrt();
        assert!((moved - 0.4).abs() < 1e-4, "{moved}");
    }

    fn overfit_data(seed: u64) -> Vec<Example<f32>> {
        let mut rng = Rng::new(seed);
        let hr = crate::imaging::synthetic_scene(&mut rng, 34, 34).crop(0, 0, 33, 33).unwrap();
        let pair = (crate::imaging::bicubic_resize(&crate::imaging::bicubic_resize(&hr, 17, 17).unwrap(), 33, 33).unwrap(), hr);
        make_examples(&[pair], None).unwrap()
    }

    #[test]
    fn overfits_one_patch() {
        let data = overfit_data(21);
        let (mut net, _) = build_model(&toy("S-SRCNN"), &mut Rng::new(22)).unwrap();
        let (y, _) = net.forward(&data[0].input).unwrap();
        let initial = loss_and_grad(LossKind::Mse, &y, &data[0].target).unwrap().0;
        let cfg = TrainConfig {
            epochs: 500,
            batch_size: 1,
            seed: 1,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::ADAM,
            schedule: LrSchedule::constant(1e-3),
            clip: None,
        };
        let logs = train(&mut net, &data, &[], &cfg, |_, _| Ok(())).unwrap();
        let (y, _) = net.forward(&data[0].input).unwrap();
        let last = loss_and_grad(LossKind::Mse, &y, &data[0].target).unwrap().0;
        assert!(last < 0.1 * initial, "{initial} -> {last}");
        assert_eq!(logs.len(), 500);
        assert!(logs.iter().all(|l| l.val_psnr.is_none()));
    }

    #[test]
    fn zero_lr_leaves_parameters_and_runs_repeat() {
        let data = overfit_data(23);
        let spec = toy("S-SRCNN");
        let (start, _) = build_model(&spec, &mut Rng::new(24)).unwrap();
        for optimizer in [OptimizerKind::SGD_MOMENTUM, OptimizerKind::ADAM] {
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 1,
                seed: 5,
                loss: LossKind::Mse,
                optimizer,
                schedule: LrSchedule::constant(0.0),
                clip: Some(0.4),
            };
            let mut net = start.clone();
            train(&mut net, &data, &data, &cfg, |_, _| Ok(())).unwrap();
            assert_eq!(net, start);
        }
        let cfg = TrainConfig { schedule: LrSchedule::constant(1e-3), ..TrainConfig::reference(Family::Srcnn) };
        let cfg = TrainConfig { epochs: 2, optimizer: OptimizerKind::ADAM, ..cfg };
        let run = || {
            let mut net = start.clone();
            let logs = train(&mut net, &data, &data, &cfg, |_, _| Ok(())).unwrap();
            (net, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_ne!(a, start);
    }

    #[test]
    fn divergence_is_reported() {
        let data = overfit_data(25);
        let (mut net, _) = build_model(&toy("SRCNN"), &mut Rng::new(26)).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 1,
            seed: 0,
            loss: LossKind::Mse,
            optimizer: OptimizerKind::Sgd { momentum: 0.9 },
            schedule: LrSchedule::constant(1e6),
            clip: None,
        };
        let err = train(&mut net, &data, &[], &cfg, |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(train(&mut net, &[], &[], &cfg, |_, _| Ok(())).is_err());
    }

    #[test]
    fn grad_check_linear_chain() {
        let layers = vec![
            LayerSpec::square(1, 3, 3, ActivationKind::Identity),
            LayerSpec::separable(3, 2, 3, ActivationKind::Identity),
            LayerSpec::square(2, 1, 3, ActivationKind::Identity),
        ];
        let spec = ModelSpec::new("linear", 1, layers, Upsampling::PreBicubic).unwrap();
        let (net, _) = build_model(&spec, &mut Rng::new(31)).unwrap();
        let x = random_input::<f64>(32, (1, 1, 6, 6));
        let err = grad_check(&net.cast(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_nonlinear_toys() {
        for name in ["S-SRCNN", "S-ESPCN", "S-VDSR-B1"] {
            let (net, _) = build_model(&toy(name), &mut Rng::new(33)).unwrap();
            let x = random_input::<f64>(34, (1, 1, 6, 6));
            let err = grad_check(&net.cast(), &x, 1e-6).unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
