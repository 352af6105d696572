//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Runs as a plain binary so the lines are always printed.

use std::path::Path;
use std::time::{Duration, Instant};

use lsk_cli::checkpoint::Checkpoint;
use lsk_cli::commands::{config_with, metrics_csv, DEFAULT_PAIRS};
use lsk_cli::{cmd_analyze, cmd_degrade, cmd_eval, cmd_train, Config};
use lsk_core::complexity::{flop_ratios, param_ratio, LayerSpec, ModelSpec, Upsampling, Widths};
use lsk_core::conv::{ActivationKind, Conv1d, Orientation, Padding};
use lsk_core::imaging::{bicubic_resize, encode_png, psnr, ssim, synthetic_scene, PlaneF};
use lsk_core::lsk::{merge_layers, svd_factorize, Matrix, SeparablePair};
use lsk_core::train::{build_model, grad_check};
use lsk_core::{Rng, Tensor4};
use num_rational::Ratio;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_rel(got: f64, want: f64, rel: f64) -> bool {
    (got - want).abs() <= rel * want.abs()
}

fn cfg(pairs: &[(&str, &str)]) -> Result<Config, String> {
    config_with(pairs).map_err(|e| e.to_string())
}

fn table_params() -> Outcome {
    let out = cmd_analyze(&Config::default()).map_err(|e| e.to_string())?;
    let rows = &out.rows;
    ensure(rows.len() == 5, || format!("{} rows", rows.len()))?;
    let k = |n: u64| n as f64 / 1e3;
    // rows follow DEFAULT_PAIRS; row names carry kernel-size suffixes
    let by_name = |name: &str| -> u64 {
        DEFAULT_PAIRS
            .iter()
            .zip(rows)
            .find_map(|((n, s), r)| {
                if *n == name {
                    Some(r.params_normal)
                } else if *s == name {
                    Some(r.params_separable)
                } else {
                    None
                }
            })
            .expect("model in default table")
    };
    ensure(lsk_cli::report::fmt_k(by_name("S-SRCNN")) == "21.47", || format!("S-SRCNN {}", k(by_name("S-SRCNN"))))?;
    ensure(lsk_cli::report::fmt_k(by_name("S-ESPCN")) == "12.10", || format!("S-ESPCN {}", k(by_name("S-ESPCN"))))?;
    let targets: [(&str, f64, f64); 8] = [
        ("SRCNN", 57.23, 0.002),
        ("ESPCN", 21.28, 0.002),
        ("VDSR-B1", 38.08, 0.005),
        ("VDSR-B2", 75.01, 0.005),
        ("VDSR-B3", 111.9, 0.005),
        ("S-VDSR-B1", 25.86, 0.005),
        ("S-VDSR-B2", 50.56, 0.005),
        ("S-VDSR-B3", 75.26, 0.005),
    ];
    for (name, want, tol) in targets {
        let got = k(by_name(name));
        ensure(within_rel(got, want, tol), || format!("{name} {got:.3}K vs {want}K (±{}%)", tol * 100.0))?;
    }
    let declines = [62.48, 43.14, 32.09, 32.60, 32.74];
    let mut worst: f64 = 0.0;
    for (r, want) in rows.iter().zip(declines) {
        let d = (r.param_decline_pct - want).abs();
        worst = worst.max(d);
        ensure(d <= 0.5, || format!("{} decline {:.2}% vs {want}%", r.separable, r.param_decline_pct))?;
    }
    Ok(format!("17 counts in tolerance, worst decline gap {worst:.2} pp"))
}

fn table_flops() -> Outcome {
    let out = cmd_analyze(&Config::default()).map_err(|e| e.to_string())?;
    let want = [15.02, 5.64, 5.58, 3.17, 10.02, 6.81, 19.71, 13.30, 29.41, 19.80];
    let got: Vec<(String, u64)> = out
        .rows
        .iter()
        .zip(DEFAULT_PAIRS)
        .flat_map(|(r, (n, s))| [(n.to_string(), r.table_ops_normal), (s.to_string(), r.table_ops_separable)])
        .collect();
    let mut worst: f64 = 0.0;
    for ((name, ops), w) in got.iter().zip(want) {
        let g = *ops as f64 / 1e9;
        let rel = (g - w).abs() / w;
        worst = worst.max(rel);
        ensure(rel <= 0.01, || format!("{name} {g:.3}G vs {w}G"))?;
    }
    Ok(format!("weight muls + bias ops at 512x512, worst {:.3}%", worst * 100.0))
}

fn ratios() -> Outcome {
    for k in [3u64, 5, 9] {
        for c in [1u64, 4, 16, 64] {
            ensure(param_ratio(c, c, c, k) == Ratio::new(2, k), || format!("param_ratio c={c} k={k}"))?;
        }
        let mut last_gap = None;
        for side in [8u64, 64, 512, 4096] {
            let r = flop_ratios(k, side, side);
            ensure(r.alpha == Ratio::new(k, 2), || format!("alpha k={k}: {}", r.alpha))?;
            ensure(r.beta_limit == Ratio::new(k + 1, 2), || format!("beta limit k={k}"))?;
            let gap = if r.beta_limit >= r.beta { r.beta_limit - r.beta } else { r.beta - r.beta_limit };
            ensure(last_gap.is_none_or(|g| gap < g), || format!("beta not converging at k={k}"))?;
            last_gap = Some(gap);
        }
        ensure(Ratio::new(k, 2) >= Ratio::new(3, 2) && Ratio::new(k + 1, 2) >= Ratio::from_integer(2), || "bounds".into())?;
    }
    Ok("eta = 2/k, alpha = k/2, beta -> (k+1)/2 for k in {3,5,9}".into())
}

fn random_pair(rng: &mut Rng, c_in: usize, c_e: usize, c_out: usize, k: usize, padding: Padding) -> SeparablePair<f32> {
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect() };
    let (v, h, b) = (draw(c_e * c_in * k), draw(c_out * c_e * k), draw(c_out));
    SeparablePair::new(
        Conv1d::new(Orientation::Vertical, c_in, c_e, k, v, None, padding).unwrap(),
        Conv1d::new(Orientation::Horizontal, c_e, c_out, k, h, Some(b), padding).unwrap(),
    )
    .unwrap()
}

fn merge_suite() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for padding in [Padding::SameZero, Padding::Valid] {
        let mut rng = Rng::new(0x4d45_5247);
        for case in 0..100 {
            let k = [3, 5, 9][rng.below(3)];
            let (c_in, c_e, c_out) = (1 + rng.below(8), 1 + rng.below(8), 1 + rng.below(8));
            let (mut h, mut w) = (1 + rng.below(16), 1 + rng.below(16));
            if padding == Padding::Valid {
                (h, w) = (h.max(k), w.max(k));
            }
            let pair = random_pair(&mut rng, c_in, c_e, c_out, k, padding);
            let x = Tensor4::<f32>::random_uniform(&mut rng, (1, c_in, h, w), -1.0, 1.0).map_err(|e| e.to_string())?;
            let d = pair.forward(&x).unwrap().max_abs_diff(&merge_layers(&pair).forward(&x).unwrap()).unwrap();
            worst = worst.max(d);
            ensure(d < 1e-5, || format!("{padding:?} case {case}: {d:e}"))?;
        }
    }
    let mut model_worst: f64 = 0.0;
    for (name, scale) in [("S-SRCNN", 2), ("S-ESPCN", 3), ("S-VDSR-B3", 2)] {
        let spec = ModelSpec::from_name(name, Widths::TINY, scale).unwrap();
        let (net, _) = build_model(&spec, &mut Rng::new(11)).unwrap();
        let x = Tensor4::<f32>::random_uniform(&mut Rng::new(12), (2, 1, 15, 13), 0.0, 1.0).unwrap();
        let d = net.predict(&x).unwrap().max_abs_diff(&net.merged().predict(&x).unwrap()).unwrap();
        model_worst = model_worst.max(d);
        ensure(d < 1e-4, || format!("{name}: {d:e}"))?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(30), || format!("took {t:?}"))?;
    Ok(format!("200 layer cases max {worst:.1e}, 3 models max {model_worst:.1e}, {:.1}s", t.as_secs_f64()))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for name in ["S-SRCNN", "S-ESPCN", "S-VDSR-B1"] {
        let spec = ModelSpec::from_name(name, Widths::TINY, 2).unwrap();
        let (net, _) = build_model(&spec, &mut Rng::new(33)).unwrap();
        let x = Tensor4::<f64>::random_uniform(&mut Rng::new(34), (1, 1, 6, 6), 0.05, 0.95).unwrap();
        let err = grad_check(&net.cast(), &x, 1e-6).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        ensure(err < 1e-3, || format!("{name}: {err:e}"))?;
    }
    let linear = ModelSpec::new(
        "linear",
        1,
        vec![
            LayerSpec::square(1, 3, 3, ActivationKind::Identity),
            LayerSpec::separable(3, 2, 3, ActivationKind::Identity),
            LayerSpec::square(2, 1, 3, ActivationKind::Identity),
        ],
        Upsampling::PreBicubic,
    )
    .unwrap();
    let (net, _) = build_model(&linear, &mut Rng::new(31)).unwrap();
    let x = Tensor4::<f64>::random_uniform(&mut Rng::new(32), (1, 1, 6, 6), 0.05, 0.95).unwrap();
    let lin = grad_check(&net.cast(), &x, 1e-5).map_err(|e| e.to_string())?;
    ensure(lin < 1e-6, || format!("linear: {lin:e}"))?;
    let t = start.elapsed();
    ensure(t < Duration::from_secs(60), || format!("took {t:?}"))?;
    Ok(format!("toys max {worst:.1e}, linear {lin:.1e}, {:.1}s", t.as_secs_f64()))
}

fn factorization() -> Outcome {
    let sobel = Matrix::from_rows(&[[1.0, 0.0, -1.0], [2.0, 0.0, -2.0], [1.0, 0.0, -1.0]]);
    let f = svd_factorize(&sobel, 1).map_err(|e| e.to_string())?;
    ensure(f.factors.len() == 1 && f.residual_norm < 1e-6, || format!("sobel residual {:e}", f.residual_norm))?;
    let mut rng = Rng::new(0x5356_4431);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = [3, 5, 7, 9][case % 4];
        let k = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let residuals: Vec<f64> = (1..=n).map(|r| svd_factorize(&k, r).unwrap().residual_norm).collect();
        ensure(residuals.windows(2).all(|w| w[1] <= w[0] + 1e-12), || format!("case {case}: not monotone {residuals:?}"))?;
        let rel = residuals[n - 1] / k.frobenius_norm();
        worst = worst.max(rel);
        ensure(rel < 1e-5, || format!("case {case}: full-rank residual {rel:e}·‖K‖"))?;
    }
    Ok(format!("sobel residual {:.1e}, full rank max {worst:.1e}·‖K‖", f.residual_norm))
}

fn metrics() -> Outcome {
    let mut rng = Rng::new(77);
    let a = synthetic_scene(&mut rng, 40, 40);
    let p = psnr(&a, &a, 0).map_err(|e| e.to_string())?;
    ensure(p == 100.0, || format!("psnr(a,a) = {p}"))?;
    let base = PlaneF::new(40, 40, (0..1600).map(|i| (i % 200) as f64).collect()).unwrap();
    let shifted = PlaneF { data: base.data.iter().map(|v| v + 1.0).collect(), ..base.clone() };
    let off = psnr(&base, &shifted, 0).map_err(|e| e.to_string())?;
    ensure((off - 48.13).abs() <= 0.01, || format!("offset-1 psnr {off}"))?;
    let s = ssim(&a, &a, 0).map_err(|e| e.to_string())?;
    ensure((s - 1.0).abs() < 1e-12, || format!("ssim(a,a) = {s}"))?;
    let mut worst: f64 = 0.0;
    for (w, h, ow, oh) in [(10, 10, 20, 20), (24, 18, 8, 6), (7, 9, 21, 27), (30, 30, 13, 17)] {
        let c = PlaneF::filled(w, h, 123.4).unwrap();
        let r = bicubic_resize(&c, ow, oh).map_err(|e| e.to_string())?;
        let d = r.data.iter().map(|v| (v - 123.4).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
        ensure(d < 1e-4, || format!("{w}x{h} -> {ow}x{oh}: {d:e}"))?;
    }
    Ok(format!("cap 100 dB, offset-1 {off:.4} dB, ssim 1, constant drift {worst:.1e}"))
}

/// HR scenes split 16/4, degraded at ×2 through the CLI pipeline.
fn toy_dataset(root: &Path) -> Result<(String, String), String> {
    let mut rng = Rng::new(7);
    let scenes: Vec<PlaneF> = (0..20).map(|_| synthetic_scene(&mut rng, 48, 48)).collect();
    let mut dirs = Vec::new();
    for (name, range) in [("train", 0..16), ("val", 16..20)] {
        let hr = root.join(format!("{name}_hr"));
        std::fs::create_dir_all(&hr).map_err(|e| e.to_string())?;
        for i in range {
            let png = encode_png(&scenes[i].to_image()).map_err(|e| e.to_string())?;
            std::fs::write(hr.join(format!("scene{i:02}.png")), png).map_err(|e| e.to_string())?;
        }
        let out = root.join(name);
        cmd_degrade(&cfg(&[("hr_dir", hr.to_str().unwrap()), ("out_dir", out.to_str().unwrap()), ("scale", "2")])?)
            .map_err(|e| e.to_string())?;
        dirs.push(out.to_str().unwrap().to_string());
    }
    Ok((dirs[0].clone(), dirs[1].clone()))
}

/// Training settings shared by criteria 8 and 9.
fn train_cfg(model: &str, train: &str, val: &str, out: &Path, epochs: usize) -> Result<Config, String> {
    cfg(&[
        ("model", model),
        ("preset", "desk"),
        ("scale", "2"),
        ("train_dir", train),
        ("val_dir", val),
        ("out_dir", out.to_str().unwrap()),
        ("epochs", &epochs.to_string()),
        ("batch_size", "4"),
        ("optimizer", "adam"),
        ("lr_schedule", "2e-3,1e-3@60,3e-4@120,1e-4@170"),
        ("patch_size", "33"),
        ("patch_stride", "15"),
        ("seed", "0"),
    ])
}

fn toy_training(root: &Path) -> Outcome {
    let start = Instant::now();
    let (train, val) = toy_dataset(root)?;
    let mut mean = Vec::new();
    for model in ["SRCNN", "S-SRCNN"] {
        let out = root.join(model);
        cmd_train(&train_cfg(model, &train, &val, &out, 200)?).map_err(|e| format!("{model}: {e}"))?;
        let ck = out.join("final.lskc");
        let ev = cmd_eval(&cfg(&[("checkpoint", ck.to_str().unwrap()), ("val_dir", &val)])?).map_err(|e| e.to_string())?;
        mean.push(ev.mean);
    }
    let (sr, ssr) = (&mean[0], &mean[1]);
    let line = format!(
        "bicubic {:.2} dB, SRCNN {:.2} dB (+{:.2}), S-SRCNN {:.2} dB (+{:.2}), gap {:.2} dB, {:.0}s",
        sr.bicubic_psnr,
        sr.psnr,
        sr.psnr - sr.bicubic_psnr,
        ssr.psnr,
        ssr.psnr - ssr.bicubic_psnr,
        (sr.psnr - ssr.psnr).abs(),
        start.elapsed().as_secs_f64()
    );
    ensure(sr.psnr >= sr.bicubic_psnr + 0.3, || format!("SRCNN below bicubic + 0.3 dB: {line}"))?;
    ensure(ssr.psnr >= ssr.bicubic_psnr + 0.3, || format!("S-SRCNN below bicubic + 0.3 dB: {line}"))?;
    ensure((sr.psnr - ssr.psnr).abs() <= 1.0, || format!("gap above 1 dB: {line}"))?;
    ensure(start.elapsed() < Duration::from_secs(600), || format!("over 10 min: {line}"))?;
    Ok(line)
}

fn determinism(root: &Path) -> Outcome {
    let (train, val) = toy_dataset(&root.join("data"))?;
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = root.join(run);
        let res = cmd_train(&train_cfg("S-SRCNN", &train, &val, &out, 4)?).map_err(|e| e.to_string())?;
        let csv = std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?;
        ensure(csv == metrics_csv(&res.logs).into_bytes(), || "metrics.csv differs from the returned log".into())?;
        runs.push((csv, std::fs::read(out.join("final.lskc")).map_err(|e| e.to_string())?));
    }
    ensure(runs[0].0 == runs[1].0, || "metric CSVs differ between seeded runs".into())?;
    ensure(runs[0].1 == runs[1].1, || "checkpoints differ between seeded runs".into())?;
    let ck = Checkpoint::from_bytes(&runs[0].1).map_err(|e| e.to_string())?;
    let net = ck.to_network()?;
    let again = Checkpoint::from_network(&net);
    let bit_exact = again.tensors.iter().zip(&ck.tensors).all(|(a, b)| {
        a.data.len() == b.data.len() && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    ensure(bit_exact && again.to_bytes() == runs[0].1, || "checkpoint round trip not bit-exact".into())?;
    Ok(format!("2 seeded runs byte-identical ({} CSV bytes), round trip bit-exact", runs[0].0.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("published parameter counts", Box::new(table_params)),
        ("published operation counts", Box::new(table_flops)),
        ("analytical ratios", Box::new(ratios)),
        ("merge equivalence", Box::new(merge_suite)),
        ("gradient correctness", Box::new(gradients)),
        ("rank-1 factorization", Box::new(factorization)),
        ("metric oracles", Box::new(metrics)),
        ("toy training", Box::new({
            let r = root.join("c8");
            move || toy_training(&r)
        })),
        ("determinism", Box::new({
            let r = root.join("c9");
            move || determinism(&r)
        })),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
