//! `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. Keys may appear once per
//! file. Recognised keys:
//!
//! | key | value |
//! |---|---|
//! | `model` | model name, e.g. `S-SRCNN` or `VDSR-B3` |
//! | `models` | comma-separated names, read as (baseline, variant) pairs |
//! | `scale` | upscaling factor |
//! | `preset` | channel widths: `full`, `desk` or `tiny` |
//! | `epochs`, `batch_size`, `seed` | integers |
//! | `lr_schedule` | `0.01,0.001@30` style piecewise-constant rates |
//! | `optimizer` | `sgd` (momentum 0.9) or `adam` |
//! | `loss` | `mse` or `l1` |
//! | `clip` | global gradient-norm threshold or `none` |
//! | `patch_size`, `patch_stride` | training patches, in network-input pixels |
//! | `count_extra_bias` | `true`/`false`, see the complexity module |
//! | `resolution` | `HxW` feature-map size for operation counts |
//! | `hr_dir`, `train_dir`, `val_dir`, `out_dir` | directories |
//! | `checkpoint`, `image`, `output` | files |
//! | `mode` | `merge` or `decompose` |
//! | `c_extra` | extra-layer width for `decompose` |
//! | `layer` | 1-based conv stage for feature dumps |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use lsk_core::complexity::Widths;
use lsk_core::train::{LossKind, LrSchedule, OptimizerKind};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: Option<String>,
    pub models: Option<Vec<String>>,
    pub scale: Option<usize>,
    pub preset: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub lr_schedule: Option<LrSchedule>,
    pub optimizer: Option<OptimizerKind>,
    pub loss: Option<LossKind>,
    /// `Some(None)` disables clipping explicitly.
    pub clip: Option<Option<f64>>,
    pub patch_size: Option<usize>,
    pub patch_stride: Option<usize>,
    pub count_extra_bias: Option<bool>,
    pub resolution: Option<(u64, u64)>,
    pub hr_dir: Option<PathBuf>,
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub mode: Option<String>,
    pub c_extra: Option<usize>,
    pub layer: Option<usize>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

fn positive(key: &str, value: &str) -> std::result::Result<usize, String> {
    match parse::<usize>(key, value)? {
        0 => Err(format!("`{key}` must be >= 1")),
        v => Ok(v),
    }
}

fn fill<T>(slot: &mut Option<T>, key: &str, value: T, overwrite: bool) -> std::result::Result<(), String> {
    if slot.is_some() && !overwrite {
        return Err(format!("duplicate key `{key}`"));
    }
    *slot = Some(value);
    Ok(())
}

impl Config {
    /// Parses a configuration file; errors carry the 1-based line number.
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse_str(&text, path)
    }

    pub fn parse_str(text: &str, origin: &Path) -> Result<Config> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Config { path: origin.to_path_buf(), line: i + 1, message };
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.assign(key.trim(), value.trim(), false).map_err(err)?;
        }
        Ok(cfg)
    }

    /// Applies a `key=value` override, replacing any earlier value.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{assignment}`")))?;
        self.assign(key.trim(), value.trim(), true).map_err(CliError::Usage)
    }

    fn assign(&mut self, key: &str, value: &str, overwrite: bool) -> std::result::Result<(), String> {
        let path = |v: &str| PathBuf::from(v);
        match key {
            "model" => fill(&mut self.model, key, value.to_string(), overwrite),
            "models" => {
                let names: Vec<String> = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                if names.is_empty() {
                    return Err("`models` needs at least one name".into());
                }
                fill(&mut self.models, key, names, overwrite)
            }
            "scale" => fill(&mut self.scale, key, positive(key, value)?, overwrite),
            "preset" => {
                if Widths::preset(value).is_none() {
                    return Err(format!("unknown preset `{value}` (expected full, desk or tiny)"));
                }
                fill(&mut self.preset, key, value.to_string(), overwrite)
            }
            "epochs" => fill(&mut self.epochs, key, positive(key, value)?, overwrite),
            "batch_size" => fill(&mut self.batch_size, key, positive(key, value)?, overwrite),
            "seed" => fill(&mut self.seed, key, parse(key, value)?, overwrite),
            "lr_schedule" => {
                let s = LrSchedule::parse(value).map_err(|e| e.to_string())?;
                fill(&mut self.lr_schedule, key, s, overwrite)
            }
            "optimizer" => {
                let o = OptimizerKind::from_name(value).ok_or_else(|| format!("unknown optimizer `{value}`"))?;
                fill(&mut self.optimizer, key, o, overwrite)
            }
            "loss" => {
                let l = LossKind::from_name(value).ok_or_else(|| format!("unknown loss `{value}`"))?;
                fill(&mut self.loss, key, l, overwrite)
            }
            "clip" => {
                let c = if value == "none" {
                    None
                } else {
                    let v: f64 = parse(key, value)?;
                    if !(v.is_finite() && v > 0.0) {
                        return Err("`clip` must be positive or `none`".into());
                    }
                    Some(v)
                };
                fill(&mut self.clip, key, c, overwrite)
            }
            "patch_size" => fill(&mut self.patch_size, key, positive(key, value)?, overwrite),
            "patch_stride" => fill(&mut self.patch_stride, key, positive(key, value)?, overwrite),
            "count_extra_bias" => fill(&mut self.count_extra_bias, key, parse(key, value)?, overwrite),
            "resolution" => {
                let (h, w) = value.split_once('x').ok_or_else(|| format!("`resolution` must look like 512x512, got `{value}`"))?;
                let h = positive(key, h.trim())? as u64;
                let w = positive(key, w.trim())? as u64;
                fill(&mut self.resolution, key, (h, w), overwrite)
            }
            "hr_dir" => fill(&mut self.hr_dir, key, path(value), overwrite),
            "train_dir" => fill(&mut self.train_dir, key, path(value), overwrite),
            "val_dir" => fill(&mut self.val_dir, key, path(value), overwrite),
            "out_dir" => fill(&mut self.out_dir, key, path(value), overwrite),
            "checkpoint" => fill(&mut self.checkpoint, key, path(value), overwrite),
            "image" => fill(&mut self.image, key, path(value), overwrite),
            "output" => fill(&mut self.output, key, path(value), overwrite),
            "mode" => {
                if value != "merge" && value != "decompose" {
                    return Err(format!("`mode` must be merge or decompose, got `{value}`"));
                }
                fill(&mut self.mode, key, value.to_string(), overwrite)
            }
            "c_extra" => fill(&mut self.c_extra, key, positive(key, value)?, overwrite),
            "layer" => fill(&mut self.layer, key, positive(key, value)?, overwrite),
            _ => Err(format!("unknown key `{key}`")),
        }
    }

    pub fn widths(&self, default: &str) -> Widths {
        Widths::preset(self.preset.as_deref().unwrap_or(default)).expect("presets are validated on assignment")
    }
}

/// Unwraps a required setting or reports which key is missing.
pub(crate) fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("missing required setting `{key}`")))
}
