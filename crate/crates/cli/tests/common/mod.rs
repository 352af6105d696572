//! Fixtures shared by the CLI integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use lsk_cli::commands::config_with;
use lsk_cli::{cmd_degrade, Config};
use lsk_core::imaging::{encode_png, synthetic_scene};
use lsk_core::Rng;

/// Writes `count` seeded synthetic scenes as gray PNGs named `img{i:02}.png`.
pub fn write_scenes(dir: &Path, count: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = Rng::new(seed);
    for i in 0..count {
        let scene = synthetic_scene(&mut rng, size, size);
        std::fs::write(dir.join(format!("img{i:02}.png")), encode_png(&scene.to_image()).unwrap()).unwrap();
    }
}

/// Synthetic HR scenes degraded at `scale` into `root/name`.
pub fn degraded_set(root: &Path, name: &str, count: usize, size: usize, scale: usize, seed: u64) -> PathBuf {
    let hr = root.join(format!("{name}_hr"));
    write_scenes(&hr, count, size, seed);
    let out = root.join(name);
    cmd_degrade(&cfg(&[
        ("hr_dir", hr.to_str().unwrap()),
        ("out_dir", out.to_str().unwrap()),
        ("scale", &scale.to_string()),
    ]))
    .unwrap();
    out
}

pub fn cfg(pairs: &[(&str, &str)]) -> Config {
    config_with(pairs).unwrap()
}

pub fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}
