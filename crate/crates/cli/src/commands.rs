//! One function per subcommand. Each returns a structured outcome; the
//! binary prints its `text` and `warnings`.

use std::path::PathBuf;

use lsk_core::complexity::{comparison_report, ComparisonRow, CountOptions, ModelSpec, Upsampling};
use lsk_core::imaging::{encode_png, psnr, ssim, ImageU8, Channels, PlaneF};
use lsk_core::train::{build_model, make_examples, predict_plane, train, EpochLog, Family, TrainConfig};
use lsk_core::{Error, Rng};

use crate::checkpoint::{load_network, save_network};
use crate::config::{required, Config};
use crate::dataset::{file_names, list_pngs, load_dataset, load_y, manifest_bytes, ManifestRow, Sample, MANIFEST};
use crate::report::{fmt_g, fmt_k, fmt_pct, fmt_psnr, fmt_ssim, Table};
use crate::{atomic_write, create_dir, CliError, Result};

/// Baseline and separable pairs compared when `models` is not set.
pub const DEFAULT_PAIRS: [(&str, &str); 5] = [
    ("SRCNN", "S-SRCNN"),
    ("ESPCN", "S-ESPCN"),
    ("VDSR-B1", "S-VDSR-B1"),
    ("VDSR-B2", "S-VDSR-B2"),
    ("VDSR-B3", "S-VDSR-B3"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutput {
    pub rows: Vec<ComparisonRow>,
    pub table: Table,
    pub warnings: Vec<String>,
}

/// Parameter and operation comparison of (baseline, variant) model pairs.
///
/// Defaults: full widths, ×2, `512x512` feature maps. Operation columns
/// give multiplications and additions separately; `ops` is weight
/// multiplications plus one addition per biased output element.
pub fn cmd_analyze(cfg: &Config) -> Result<AnalyzeOutput> {
    let widths = cfg.widths("full");
    let scale = cfg.scale.unwrap_or(2);
    let (h, w) = cfg.resolution.unwrap_or((512, 512));
    let names: Vec<String> = match &cfg.models {
        Some(m) => m.clone(),
        None => DEFAULT_PAIRS.iter().flat_map(|(a, b)| [a.to_string(), b.to_string()]).collect(),
    };
    if names.len() % 2 != 0 {
        return Err(CliError::Usage("`models` is read as (baseline, variant) pairs; give an even count".into()));
    }
    let mut warnings = Vec::new();
    let mut pairs = Vec::new();
    for pair in names.chunks(2) {
        let a = ModelSpec::from_name(&pair[0], widths, scale)?;
        let b = ModelSpec::from_name(&pair[1], widths, scale)?;
        warnings.extend(a.lsk_warnings());
        warnings.extend(b.lsk_warnings());
        pairs.push((a, b));
    }
    let opts = CountOptions { count_extra_bias: cfg.count_extra_bias.unwrap_or(true) };
    let rows = comparison_report(&pairs, h, w, opts);
    let mut table = Table::new([
        "baseline",
        "variant",
        "params_k",
        "variant_params_k",
        "param_decline_pct",
        "mul_g",
        "add_g",
        "variant_mul_g",
        "variant_add_g",
        "ops_g",
        "variant_ops_g",
        "ops_decline_pct",
    ]);
    for r in &rows {
        table.push(vec![
            r.normal.clone(),
            r.separable.clone(),
            fmt_k(r.params_normal),
            fmt_k(r.params_separable),
            fmt_pct(r.param_decline_pct),
            fmt_g(r.flops_normal.mul),
            fmt_g(r.flops_normal.add),
            fmt_g(r.flops_separable.mul),
            fmt_g(r.flops_separable.add),
            fmt_g(r.table_ops_normal),
            fmt_g(r.table_ops_separable),
            fmt_pct(r.flop_decline_pct),
        ]);
    }
    if let Some(dir) = &cfg.out_dir {
        create_dir(dir)?;
        atomic_write(&dir.join("analysis.csv"), &table.to_csv()?)?;
    }
    Ok(AnalyzeOutput { rows, table, warnings })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DegradeOutput {
    pub rows: Vec<ManifestRow>,
}

fn quantized(p: &PlaneF) -> PlaneF {
    PlaneF { data: p.data.iter().map(|v| v.round().clamp(0.0, 255.0)).collect(), ..p.clone() }
}

/// Writes `{stem}_hr.png`, `{stem}_lr_x{s}.png` and `{stem}_bicubic_x{s}.png`
/// (luminance only) for every PNG in `hr_dir`, plus `manifest.csv`.
///
/// HR images are cropped to a multiple of the scale and rounded to 8 bits
/// before degradation, so the saved files are mutually consistent.
pub fn cmd_degrade(cfg: &Config) -> Result<DegradeOutput> {
    let hr_dir = required(&cfg.hr_dir, "hr_dir")?;
    let out_dir = required(&cfg.out_dir, "out_dir")?;
    let scale = *required(&cfg.scale, "scale")?;
    let inputs = list_pngs(hr_dir)?;
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("{} contains no PNG files", hr_dir.display())));
    }
    create_dir(out_dir)?;
    let mut rows = Vec::with_capacity(inputs.len());
    for path in inputs {
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let y = load_y(&path)?;
        let hr = quantized(&y.crop_to_multiple(scale).map_err(|_| {
            CliError::Usage(format!("{} is smaller than the scale factor {scale}", path.display()))
        })?);
        let (lr, coarse) = lsk_core::imaging::degrade(&hr, scale)?;
        let (hr_name, lr_name, bic_name) = file_names(&stem, scale);
        for (name, plane) in [(&hr_name, &hr), (&lr_name, &lr), (&bic_name, &coarse)] {
            atomic_write(&out_dir.join(name), &encode_png(&plane.to_image())?)?;
        }
        rows.push(ManifestRow {
            stem,
            hr: hr_name,
            lr: lr_name,
            bicubic: bic_name,
            width: hr.width,
            height: hr.height,
            scale,
        });
    }
    atomic_write(&out_dir.join(MANIFEST), &manifest_bytes(&rows)?)?;
    Ok(DegradeOutput { rows })
}

fn network_input<'a>(spec: &ModelSpec, s: &'a Sample) -> &'a PlaneF {
    match spec.upsampling {
        Upsampling::PostPixelShuffle(_) => &s.lr,
        _ => &s.bicubic,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub logs: Vec<EpochLog>,
    /// Epoch of `best.lskc`.
    pub best_epoch: usize,
    /// Mean bicubic PSNR on the validation set.
    pub bicubic_psnr: Option<f64>,
    pub warnings: Vec<String>,
    pub text: String,
}

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from("epoch,lr,loss,val_psnr\n");
    for l in logs {
        let psnr = l.val_psnr.map(fmt_psnr).unwrap_or_default();
        out.push_str(&format!("{},{},{:.8},{}\n", l.epoch, l.lr, l.loss, psnr));
    }
    out
}

/// Trains a model on a degraded dataset.
///
/// Writes `metrics.csv` after every epoch, `best.lskc` whenever validation
/// PSNR improves (training loss when there is no validation set) and
/// `final.lskc` at the end. If training diverges, the parameters from
/// before the failing step go to `last_good.lskc` and the error is returned.
pub fn cmd_train(cfg: &Config) -> Result<TrainOutput> {
    let model = required(&cfg.model, "model")?;
    let train_dir = required(&cfg.train_dir, "train_dir")?;
    let out_dir = required(&cfg.out_dir, "out_dir")?;
    let (scale, train_samples) = load_dataset(train_dir)?;
    if cfg.scale.is_some_and(|s| s != scale) {
        return Err(CliError::Usage(format!("{} was degraded at ×{scale}, not ×{}", train_dir.display(), cfg.scale.unwrap())));
    }
    let val_samples = match &cfg.val_dir {
        Some(dir) => {
            let (vs, samples) = load_dataset(dir)?;
            if vs != scale {
                return Err(CliError::Usage(format!("validation set is ×{vs}, training set ×{scale}")));
            }
            samples
        }
        None => Vec::new(),
    };
    let spec = ModelSpec::from_name(model, cfg.widths("desk"), scale)?;
    let family = Family::of(&spec);
    let reference = TrainConfig::reference(family);
    let seed = cfg.seed.unwrap_or(0);
    let tc = TrainConfig {
        epochs: cfg.epochs.unwrap_or(reference.epochs),
        batch_size: cfg.batch_size.unwrap_or(reference.batch_size),
        seed: seed.wrapping_add(1),
        loss: cfg.loss.unwrap_or(reference.loss),
        optimizer: cfg.optimizer.unwrap_or(reference.optimizer),
        schedule: cfg.lr_schedule.clone().unwrap_or(reference.schedule),
        clip: cfg.clip.unwrap_or(reference.clip),
    };
    let (default_patch, default_stride) = match family {
        Family::Espcn => (17, 13),
        _ => (33, 14),
    };
    let patch = (cfg.patch_size.unwrap_or(default_patch), cfg.patch_stride.unwrap_or(default_stride));
    let pairs = |samples: &[Sample]| -> Vec<(PlaneF, PlaneF)> {
        samples.iter().map(|s| (network_input(&spec, s).clone(), s.hr.clone())).collect()
    };
    let train_set = make_examples::<f32>(&pairs(&train_samples), Some(patch))?;
    let val_set = make_examples::<f32>(&pairs(&val_samples), None)?;
    let bicubic_psnr = (!val_samples.is_empty())
        .then(|| val_samples.iter().map(|s| psnr(&s.bicubic, &s.hr, scale)).collect::<lsk_core::Result<Vec<_>>>())
        .transpose()?
        .map(|v| mean(v.into_iter()));

    let (mut net, warnings) = build_model(&spec, &mut Rng::new(seed))?;
    create_dir(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut logs: Vec<EpochLog> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let result = train(&mut net, &train_set, &val_set, &tc, |log, net| {
        logs.push(log.clone());
        atomic_write(&metrics_path, metrics_csv(&logs).as_bytes()).map_err(|e| Error::InvalidState(e.to_string()))?;
        // higher is better for PSNR; negate the loss so one comparison serves both
        let score = log.val_psnr.unwrap_or(-log.loss);
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((log.epoch, score));
            save_network(net, &out_dir.join("best.lskc")).map_err(|e| Error::InvalidState(e.to_string()))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, Error::Diverged { .. }) {
            save_network(&net, &out_dir.join("last_good.lskc"))?;
        }
        return Err(e.into());
    }
    save_network(&net, &out_dir.join("final.lskc"))?;
    let best_epoch = best.map_or(0, |b| b.0);
    let last = logs.last().expect("at least one epoch");
    let mut text = format!(
        "{}: {} epochs, final loss {:.6}",
        spec.name, tc.epochs, last.loss
    );
    if let (Some(v), Some(b)) = (last.val_psnr, bicubic_psnr) {
        text.push_str(&format!(", val PSNR {} dB (bicubic {} dB), best epoch {best_epoch}", fmt_psnr(v), fmt_psnr(b)));
    }
    text.push('\n');
    Ok(TrainOutput { logs, best_epoch, bicubic_psnr, warnings, text })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub bicubic_psnr: f64,
    pub bicubic_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub mean: EvalRow,
    pub table: Table,
}

/// PSNR and SSIM of a checkpoint and of the bicubic baseline on a degraded
/// dataset, shaving `scale` border pixels. Network outputs are clamped to
/// `[0, 255]`.
pub fn cmd_eval(cfg: &Config) -> Result<EvalOutput> {
    let ck = required(&cfg.checkpoint, "checkpoint")?;
    let dir = required(&cfg.val_dir, "val_dir")?;
    let net = load_network(ck)?;
    let spec = net.spec().clone();
    let (scale, samples) = load_dataset(dir)?;
    if scale != spec.scale || cfg.scale.is_some_and(|s| s != spec.scale) {
        return Err(CliError::Usage(format!(
            "{} is a ×{} model but the dataset is ×{scale}",
            spec.name, spec.scale
        )));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let mut sr = predict_plane(&net, network_input(&spec, s))?;
        sr.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 255.0));
        rows.push(EvalRow {
            image: s.stem.clone(),
            psnr: psnr(&sr, &s.hr, scale)?,
            ssim: ssim(&sr, &s.hr, scale)?,
            bicubic_psnr: psnr(&s.bicubic, &s.hr, scale)?,
            bicubic_ssim: ssim(&s.bicubic, &s.hr, scale)?,
        });
    }
    let mean = EvalRow {
        image: "mean".into(),
        psnr: mean(rows.iter().map(|r| r.psnr)),
        ssim: mean(rows.iter().map(|r| r.ssim)),
        bicubic_psnr: mean(rows.iter().map(|r| r.bicubic_psnr)),
        bicubic_ssim: mean(rows.iter().map(|r| r.bicubic_ssim)),
    };
    let mut table = Table::new(["image", "psnr", "ssim", "bicubic_psnr", "bicubic_ssim"]);
    for r in rows.iter().chain([&mean]) {
        table.push(vec![
            r.image.clone(),
            fmt_psnr(r.psnr),
            fmt_ssim(r.ssim),
            fmt_psnr(r.bicubic_psnr),
            fmt_ssim(r.bicubic_ssim),
        ]);
    }
    if let Some(out) = &cfg.out_dir {
        create_dir(out)?;
        atomic_write(&out.join("eval.csv"), &table.to_csv()?)?;
    }
    Ok(EvalOutput { rows, mean, table })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOutput {
    pub model: String,
    /// `(conv stage, summed per-kernel error)` for decomposed layers.
    pub residuals: Vec<(usize, f64)>,
    pub warnings: Vec<String>,
    pub text: String,
}

/// `mode = merge` folds every separable pair into a square layer;
/// `mode = decompose` factorizes multi-channel square layers with `c_extra`
/// extra maps.
pub fn cmd_convert(cfg: &Config) -> Result<ConvertOutput> {
    let ck = required(&cfg.checkpoint, "checkpoint")?;
    let output = required(&cfg.output, "output")?;
    let mode = required(&cfg.mode, "mode")?;
    let net = load_network(ck)?;
    let mut warnings = Vec::new();
    let (converted, residuals) = match mode.as_str() {
        "merge" => {
            if !net.spec().is_separable() {
                warnings.push(format!("{} has no separable layers; writing it unchanged", net.spec().name));
                (net.clone(), Vec::new())
            } else {
                (net.merged(), Vec::new())
            }
        }
        _ => {
            let c_extra = *required(&cfg.c_extra, "c_extra")?;
            let (d, r) = net.decomposed(c_extra)?;
            if r.is_empty() {
                warnings.push(format!("{} has no multi-channel square layers to decompose", net.spec().name));
            }
            (d, r)
        }
    };
    save_network(&converted, output)?;
    let mut text = format!("{} -> {} ({} parameters)\n", net.spec().name, converted.spec().name, converted.param_count());
    for (stage, err) in &residuals {
        text.push_str(&format!("conv{stage}: residual {err:.6e}\n"));
    }
    Ok(ConvertOutput { model: converted.spec().name.clone(), residuals, warnings, text })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpOutput {
    pub maps: Vec<PathBuf>,
    pub montage: PathBuf,
}

/// Min-max normalization to `[0, 255]`; flat maps become mid gray.
pub fn normalize_map(data: &[f64]) -> Vec<u8> {
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
        return vec![128; data.len()];
    }
    data.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

const MONTAGE_GAP: usize = 1;

fn montage(maps: &[Vec<u8>], w: usize, h: usize) -> Result<ImageU8> {
    let cols = (maps.len() as f64).sqrt().ceil().max(1.0) as usize;
    let rows = maps.len().div_ceil(cols);
    let mw = cols * w + (cols - 1) * MONTAGE_GAP;
    let mh = rows * h + (rows - 1) * MONTAGE_GAP;
    let mut data = vec![0u8; mw * mh];
    for (i, m) in maps.iter().enumerate() {
        let (x0, y0) = ((i % cols) * (w + MONTAGE_GAP), (i / cols) * (h + MONTAGE_GAP));
        for y in 0..h {
            data[(y0 + y) * mw + x0..][..w].copy_from_slice(&m[y * w..][..w]);
        }
    }
    Ok(ImageU8::new(mw, mh, Channels::Gray, data)?)
}

/// Feature maps of conv stage `layer` (1-based, after its activation) for
/// `image` fed directly as network input: one PNG per map plus a montage.
pub fn cmd_dump_features(cfg: &Config) -> Result<DumpOutput> {
    let ck = required(&cfg.checkpoint, "checkpoint")?;
    let image = required(&cfg.image, "image")?;
    let layer = *required(&cfg.layer, "layer")?;
    let out_dir = required(&cfg.out_dir, "out_dir")?;
    let net = load_network(ck)?;
    let input = load_y(image)?;
    let stages = net.stage_outputs(&input.to_tensor::<f32>(1.0 / 255.0))?;
    let feats = stages.get(layer - 1).ok_or_else(|| {
        CliError::Usage(format!("layer {layer} is out of range; {} has {} conv stages", net.spec().name, stages.len()))
    })?;
    create_dir(out_dir)?;
    let d = feats.dims();
    let mut maps = Vec::with_capacity(d.c);
    let mut paths = Vec::with_capacity(d.c);
    for c in 0..d.c {
        let plane: Vec<f64> = feats.plane(0, c).iter().map(|&v| v as f64).collect();
        let pixels = normalize_map(&plane);
        let path = out_dir.join(format!("stage{layer}_map{c:03}.png"));
        atomic_write(&path, &encode_png(&ImageU8::new(d.w, d.h, Channels::Gray, pixels.clone())?)?)?;
        maps.push(pixels);
        paths.push(path);
    }
    let montage_path = out_dir.join(format!("stage{layer}_montage.png"));
    atomic_write(&montage_path, &encode_png(&montage(&maps, d.w, d.h)?)?)?;
    Ok(DumpOutput { maps: paths, montage: montage_path })
}

/// Convenience for tests and callers that build configurations in code.
pub fn config_with(pairs: &[(&str, &str)]) -> Result<Config> {
    let mut cfg = Config::default();
    for (k, v) in pairs {
        cfg.set(&format!("{k}={v}"))?;
    }
    Ok(cfg)
}
