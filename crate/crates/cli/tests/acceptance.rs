//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Full sizes take about two hours on one CPU core. `ATN_ACCEPTANCE_QUICK=1`
//! shrinks every experiment for development (results are then not meaningful)
//! and `ATN_ACCEPTANCE_STRICT=1` makes any failure exit nonzero.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use atn_core::augment::AugmentConfig;
use atn_core::biomarkers::{aggregate, intertapering, intratapering, segment_volume, Aggregation};
use atn_core::fwhm::{measure_fwhm, FwhmConfig};
use atn_core::imgproc::gaussian_blur;
use atn_core::nets::checkpoint::{cnr_container, refiner_container};
use atn_core::nets::{
    measure, train_cnr, train_refiner, CnrConfig, CnrTrainConfig, PatchStream, Refiner, RefinerConfig,
    RefinerTrainConfig,
};
use atn_core::patches3d::{SegmentSeries, SeriesPoint};
use atn_core::perceptual::{
    build_extractor, feature_loss, gram, style_loss, AtnLossConfig, AtnObjective, ExtractorConfig, FeatureExtractor,
    IdentityExtractor, LossNorm, VggExtractor,
};
use atn_core::rng::{derive_seed, rng, stream_seed};
use atn_core::survival::{concordance_index, cox_fit, simulate_survival, Covariate, CoxOptions, SurvivalRecord};
use atn_core::synthgen::{generate_patches, render_patch, sample_label, Domain, PseudoRealConfig, SynthConfig};
use atn_core::Patch;
use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
    /// Digest of everything the criterion computed, for the determinism check.
    digest: String,
}

fn quick() -> bool {
    std::env::var_os("ATN_ACCEPTANCE_QUICK").is_some()
}

fn digest_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- criterion 1

/// Desk-scale settings shared by the domain-shift and convergence experiments.
struct DeskSetup {
    loss: AtnLossConfig,
    refiner: RefinerConfig,
    refiner_train: RefinerTrainConfig,
    cnr: CnrConfig,
    cnr_train: CnrTrainConfig,
}

fn desk_setup() -> DeskSetup {
    DeskSetup {
        loss: AtnLossConfig {
            style_weight: 100.0,
            ..Default::default()
        },
        refiner: RefinerConfig { width: 16, blocks: 2 },
        refiner_train: RefinerTrainConfig {
            steps: 200,
            batch_size: 16,
            learning_rate: 0.001,
            ..Default::default()
        },
        cnr: CnrConfig {
            conv_widths: vec![16, 32, 64, 64],
            hidden: 128,
            input_size: 32,
        },
        cnr_train: CnrTrainConfig {
            epochs: 12,
            batch_size: 32,
            augment_per_epoch: false,
            ..Default::default()
        },
    }
}

fn lumen_mae(m: &atn_core::nets::Cnr<f32>, test: &[Patch]) -> f64 {
    let got = measure(m, test).expect("measurement");
    let e: Vec<f64> = got
        .iter()
        .zip(test)
        .map(|(d, p)| (d.label.lumen_radius() - p.label.unwrap().lumen_radius()).abs())
        .collect();
    mean(&e)
}

/// Returns `(CNR-A MAE, CNR-B MAE, digest of both models)`.
fn domain_shift_seed(seed: u64, n_train: usize, n_test: usize, epochs: usize, steps: usize) -> (f64, f64, String) {
    let s = desk_setup();
    let sc = SynthConfig::default();
    let real_domain = Domain::PseudoReal(PseudoRealConfig::default());
    let train = generate_patches(n_train, &sc, &Domain::Synthetic, stream_seed(seed, "train")).unwrap();
    let style_pool = generate_patches(n_test, &sc, &real_domain, stream_seed(seed, "style")).unwrap();
    let test = generate_patches(n_test, &sc, &real_domain, stream_seed(seed, "test")).unwrap();
    let aug = AugmentConfig::default();
    let phi = build_extractor(&ExtractorConfig::default()).unwrap();
    let obj = AtnObjective::new(&phi, &s.loss).unwrap();
    let syn = PatchStream::new(&train, aug.clone(), false, stream_seed(seed, "refiner-synthetic")).unwrap();
    let real = PatchStream::new(&style_pool, aug.clone(), true, stream_seed(seed, "refiner-real")).unwrap();
    let refiner = Refiner::<f32>::new(&s.refiner, stream_seed(seed, "refiner-init")).unwrap();
    let rt = RefinerTrainConfig {
        steps,
        seed: stream_seed(seed, "refiner-train"),
        ..s.refiner_train
    };
    let run = train_refiner(refiner, &syn, &real, &obj, &rt, None).unwrap();
    let ct = CnrTrainConfig {
        epochs,
        seed: stream_seed(seed, "cnr"),
        ..s.cnr_train
    };
    let a = train_cnr(&s.cnr, &ct, &aug, &train, None).unwrap().model;
    let b = train_cnr(&s.cnr, &ct, &aug, &train, Some(&run.model)).unwrap().model;
    let mut h = Sha256::new();
    h.update(refiner_container(&run.model, "").to_bytes());
    h.update(cnr_container(&a, "").to_bytes());
    h.update(cnr_container(&b, "").to_bytes());
    (lumen_mae(&a, &test), lumen_mae(&b, &test), hex::encode(h.finalize()))
}

fn criterion_1() -> Outcome {
    // halved sizes: 10,000 training synthetics and 1,000 pseudo-real test patches
    let (n_train, n_test, epochs, steps) = if quick() { (400, 100, 1, 10) } else { (10_000, 1_000, 12, 200) };
    let mut wins = 0;
    let mut parts = Vec::new();
    let mut digests = Vec::new();
    for seed in 1..=5u64 {
        let t = Instant::now();
        let (a, b, d) = domain_shift_seed(seed, n_train, n_test, epochs, steps);
        if b < a {
            wins += 1;
        }
        parts.push(format!("s{seed} A {a:.3} B {b:.3}"));
        digests.push(d);
        eprintln!("criterion 1 seed {seed}: A {a:.4} B {b:.4} ({:.0} s)", t.elapsed().as_secs_f64());
    }
    Outcome {
        pass: wins >= 4,
        detail: format!("CNR-B better in {wins}/5 seeds (need 4); {}", parts.join(", ")),
        digest: digests.join(""),
    }
}

// ---------------------------------------------------------------- criterion 2

fn refiner_history(lr: f64, steps: usize, seed: u64) -> (Vec<f64>, bool) {
    let s = desk_setup();
    let sc = SynthConfig::default();
    let syn_pool = generate_patches(2_000, &sc, &Domain::Synthetic, stream_seed(seed, "conv-syn")).unwrap();
    let real_pool = generate_patches(
        500,
        &sc,
        &Domain::PseudoReal(PseudoRealConfig::default()),
        stream_seed(seed, "conv-real"),
    )
    .unwrap();
    let aug = AugmentConfig::default();
    let phi = build_extractor(&ExtractorConfig::default()).unwrap();
    // library default weights; the desk experiment's heavy style weight is not part of this check
    let obj = AtnObjective::new(&phi, &AtnLossConfig::default()).unwrap();
    let syn = PatchStream::new(&syn_pool, aug.clone(), false, 1).unwrap();
    let real = PatchStream::new(&real_pool, aug, true, 2).unwrap();
    let model = Refiner::<f32>::new(&s.refiner, seed).unwrap();
    let cfg = RefinerTrainConfig {
        steps,
        batch_size: 8,
        learning_rate: lr,
        seed,
        ..Default::default()
    };
    let run = train_refiner(model, &syn, &real, &obj, &cfg, None).unwrap();
    (run.history.iter().map(|r| r.loss.total).collect(), run.divergence.is_some())
}

fn criterion_2() -> Outcome {
    let steps = if quick() { 120 } else { 2_000 };
    let w = 50;
    let (slow, slow_div) = refiner_history(0.001, steps, 3);
    let (fast, fast_div) = refiner_history(0.1, steps, 3);
    let start = mean(&slow[..w.min(slow.len())]);
    let end = if slow.len() >= w { mean(&slow[slow.len() - w..]) } else { f64::INFINITY };
    let halved = !slow_div && slow.len() == steps && end <= 0.5 * start;
    let fast_end = if fast.len() >= w { mean(&fast[fast.len() - w..]) } else { f64::NAN };
    let ordered = fast_div || fast_end > end;
    let mut all = slow.clone();
    all.extend(&fast);
    Outcome {
        pass: halved && ordered,
        detail: format!(
            "lr 0.001: first-{w} mean {start:.4}, last-{w} mean {end:.4} (ratio {:.3}, need <= 0.5); lr 0.1: {}",
            end / start,
            if fast_div {
                format!("diverged at step {}", fast.len() + 1)
            } else {
                format!("last-{w} mean {fast_end:.4} vs {end:.4}")
            }
        ),
        digest: digest_f64(&all),
    }
}

// ---------------------------------------------------------------- criterion 3

fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((h, w), |_| r.sample::<f64, _>(StandardNormal))
}

fn activations(phi: &dyn FeatureExtractor<f64>, x: &Array2<f64>, layer: &str) -> Array3<f64> {
    let j = phi.layer_index(layer).unwrap();
    phi.forward(x, j).unwrap().activations[j].clone()
}

/// Gram by explicit loops.
fn gram_oracle(a: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = a.dim();
    let mut g = Array2::zeros((c, c));
    for i in 0..c {
        for j in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += a[[i, y, x]] * a[[j, y, x]];
                }
            }
            g[[i, j]] = s / (c * h * w) as f64;
        }
    }
    g
}

fn dist(a: impl Iterator<Item = f64>, norm: LossNorm) -> f64 {
    a.map(|d| match norm {
        LossNorm::L1 => d.abs(),
        LossNorm::SquaredL2 => d * d,
    })
    .sum()
}

fn feature_oracle(phi: &dyn FeatureExtractor<f64>, layers: &[&str], y: &Array2<f64>, x: &Array2<f64>, n: LossNorm) -> f64 {
    layers
        .iter()
        .map(|l| {
            let (a, b) = (activations(phi, y, l), activations(phi, x, l));
            dist(a.iter().zip(b.iter()).map(|(u, v)| u - v), n) / a.len() as f64
        })
        .sum()
}

fn style_oracle(phi: &dyn FeatureExtractor<f64>, layers: &[&str], y: &Array2<f64>, s: &Array2<f64>, n: LossNorm) -> f64 {
    layers
        .iter()
        .map(|l| {
            let a = activations(phi, y, l);
            let (ga, gs) = (gram_oracle(&a), gram_oracle(&activations(phi, s, l)));
            dist(ga.iter().zip(gs.iter()).map(|(u, v)| u - v), n) / a.len() as f64
        })
        .sum()
}

fn criterion_3() -> Outcome {
    let mut worst_value = 0.0f64;
    let mut worst_grad = 0.0f64;
    let mut values = Vec::new();
    let identity = IdentityExtractor::canonical();
    let small_vgg = VggExtractor::<f64>::random([3, 4, 4, 5], 1, true, None, 17);
    let extractors: [(&str, &dyn FeatureExtractor<f64>); 2] = [("identity", &identity), ("vgg", &small_vgg)];
    let layer_sets: [&[&str]; 3] = [&["relu1_2"], &["relu1_2", "relu2_2"], &["relu3_3", "relu4_3"]];
    for (_, phi) in extractors {
        for (k, layers) in layer_sets.iter().enumerate() {
            for norm in [LossNorm::L1, LossNorm::SquaredL2] {
                let seed = 100 * k as u64 + norm as u64;
                let (x, y, s) = (random_image(16, 16, seed), random_image(16, 16, seed + 1), random_image(16, 16, seed + 2));
                let names: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
                for l in layers.iter() {
                    let a = activations(phi, &y, l);
                    let d = (&gram(&a) - &gram_oracle(&a)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    worst_value = worst_value.max(d);
                }
                let f = feature_loss(phi, &names, &y, &x, norm).unwrap();
                let fo = feature_oracle(phi, layers, &y, &x, norm);
                let st = style_loss(phi, &names, &y, &s, norm).unwrap();
                let so = style_oracle(phi, layers, &y, &s, norm);
                let cfg = AtnLossConfig {
                    feature_layers: names.clone(),
                    style_layers: names.clone(),
                    style_cumulative: false,
                    reg_lambda: 0.3,
                    feature_weight: 0.7,
                    style_weight: 2.5,
                    norm,
                };
                let obj = AtnObjective::new(phi, &cfg).unwrap();
                let targets = obj.targets(&x, &s).unwrap();
                let (total, grad) = obj.loss_and_grad(&y, &targets).unwrap();
                let reg = y.iter().zip(x.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
                let total_o = 0.7 * fo + 2.5 * so + 0.3 * reg;
                for (got, want) in [(f, fo), (st, so), (total.total, total_o)] {
                    worst_value = worst_value.max((got - want).abs() / want.abs().max(1.0));
                    values.push(got);
                }
                // central differences on a subset of pixels
                let eps = 1e-6;
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for idx in (0..y.len()).step_by(7) {
                    let (r, c) = (idx / 16, idx % 16);
                    let mut yp = y.clone();
                    yp[[r, c]] += eps;
                    let mut ym = y.clone();
                    ym[[r, c]] -= eps;
                    let lp = obj.loss_and_grad(&yp, &targets).unwrap().0.total;
                    let lm = obj.loss_and_grad(&ym, &targets).unwrap().0.total;
                    let fd = (lp - lm) / (2.0 * eps);
                    num += (grad[[r, c]] - fd).powi(2);
                    den += fd.powi(2);
                }
                worst_grad = worst_grad.max((num / den.max(1e-300)).sqrt());
            }
        }
    }
    Outcome {
        pass: worst_value <= 1e-6 && worst_grad < 1e-4,
        detail: format!(
            "max oracle deviation {worst_value:.2e} (need <= 1e-6); max gradient relative error {worst_grad:.2e} (need < 1e-4)"
        ),
        digest: digest_f64(&values),
    }
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let n = if quick() { 60 } else { 500 };
    let label_cfg = SynthConfig {
        lumen_radius_range: [1.0, 6.0],
        ..Default::default()
    };
    let render_cfg = SynthConfig::default();
    let fwhm = FwhmConfig::default();
    let noise = Normal::new(0.0, 25.0).unwrap();
    let mut r = rng(stream_seed(4, "noise"));
    let (mut clean, mut noisy) = (Vec::new(), Vec::new());
    let (mut clean_fail, mut noisy_fail) = (0, 0);
    for i in 0..n as u64 {
        let label = sample_label(&label_cfg, derive_seed(stream_seed(4, "label"), i)).unwrap();
        let mut p = render_patch(&label, &render_cfg, derive_seed(stream_seed(4, "render"), i)).unwrap();
        p.pixels = gaussian_blur(&p.pixels, 0.5);
        let mut q = p.clone();
        q.pixels.mapv_inplace(|v| v + noise.sample(&mut r) as f32);
        let truth = label.lumen_radius();
        match measure_fwhm(&p, &fwhm) {
            Ok(m) => clean.push((m.label.lumen_radius() - truth).abs()),
            Err(_) => clean_fail += 1,
        }
        match measure_fwhm(&q, &fwhm) {
            Ok(m) => noisy.push((m.label.lumen_radius() - truth).abs()),
            Err(_) => noisy_fail += 1,
        }
    }
    let (c, z) = (mean(&clean), mean(&noisy));
    Outcome {
        pass: c <= 0.25 && z > c,
        detail: format!(
            "clean MAE {c:.4} mm over {} patches ({clean_fail} failed; need <= 0.25); with 25 HU noise {z:.4} mm ({noisy_fail} failed; need > clean)",
            clean.len()
        ),
        digest: digest_f64(&[clean.clone(), noisy.clone()].concat()),
    }
}

// ---------------------------------------------------------------- criterion 5

fn series(d: &[(f64, f64)], areas: Option<&[f64]>) -> SegmentSeries {
    SegmentSeries {
        segment_id: 1,
        parent_id: None,
        generation: 2,
        method: "oracle".into(),
        points: d
            .iter()
            .enumerate()
            .map(|(i, &(x, dia))| SeriesPoint {
                arclength_mm: x,
                diameter_mm: Some(dia),
                area_mm2: Some(areas.map_or(std::f64::consts::PI * dia * dia / 4.0, |a| a[i])),
            })
            .collect(),
    }
}

fn constant(d: f64, n: usize) -> SegmentSeries {
    series(&(0..n).map(|i| (1.0 + 0.5 * i as f64, d)).collect::<Vec<_>>(), None)
}

fn criterion_5() -> Outcome {
    let mut worst = 0.0f64;
    let mut check = |got: f64, want: f64| worst = worst.max((got - want).abs());
    check(intertapering(&constant(3.0, 5), &constant(3.0, 5)).unwrap(), 0.0);
    check(intertapering(&constant(3.0, 5), &constant(4.0, 5)).unwrap(), 0.25);
    let base = intertapering(&constant(3.3, 6), &constant(4.1, 7)).unwrap();
    for k in [0.37, 2.0, 11.5] {
        check(intertapering(&constant(3.3 * k, 6), &constant(4.1 * k, 7)).unwrap(), base);
    }
    check(intratapering(&constant(2.5, 9)).unwrap(), 0.0);
    let line: Vec<(f64, f64)> = (0..20).map(|i| (1.0 + 0.5 * i as f64, 4.0 - 0.1 * (1.0 + 0.5 * i as f64))).collect();
    check(intratapering(&series(&line, None)).unwrap(), 0.025);
    // noisy series against the closed-form normal equations
    let mut r = rng(55);
    let noisy: Vec<(f64, f64)> = (0..30)
        .map(|i| {
            let x = 1.0 + 0.5 * i as f64;
            (x, 5.0 - 0.07 * x + 0.05 * r.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let n = noisy.len() as f64;
    let (sx, sy) = (noisy.iter().map(|p| p.0).sum::<f64>(), noisy.iter().map(|p| p.1).sum::<f64>());
    let sxx = noisy.iter().map(|p| p.0 * p.0).sum::<f64>();
    let sxy = noisy.iter().map(|p| p.0 * p.1).sum::<f64>();
    let m = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let c = (sy - m * sx) / n;
    check(intratapering(&series(&noisy, None)).unwrap(), -m / c);
    let ten = vec![10.0; 10];
    let pts: Vec<(f64, f64)> = (0..10).map(|i| (1.0 + 0.5 * i as f64, 3.0)).collect();
    check(segment_volume(&series(&pts, Some(&ten))).unwrap(), 50.0);
    let twenty = vec![20.0; 10];
    check(segment_volume(&series(&pts, Some(&twenty))).unwrap(), 100.0);
    check(aggregate(&[0.1, 0.3], Aggregation::Mean).unwrap(), 0.2);
    for mode in [Aggregation::Mean, Aggregation::Median] {
        check(aggregate(&[0.42], mode).unwrap(), 0.42);
    }
    check(aggregate(&[0.0, 0.0, 1.0], Aggregation::Mean).unwrap(), 1.0 / 3.0);
    check(aggregate(&[0.0, 0.0, 1.0], Aggregation::Median).unwrap(), 0.0);

    // frustum: areas at the centres of 0.5 mm slabs
    let mut frustum_err = 0.0f64;
    for (len, r0, r1) in [(10.0, 3.0, 2.0), (14.0, 2.2, 1.1), (25.0, 4.0, 3.9)] {
        let k = (len / 0.5) as usize;
        let pts: Vec<(f64, f64)> = (0..k)
            .map(|i| {
                let x = 0.25 + 0.5 * i as f64;
                (x, 2.0 * (r0 + (r1 - r0) * x / len))
            })
            .collect();
        let v = segment_volume(&series(&pts, None)).unwrap();
        let exact = std::f64::consts::PI * len / 3.0 * (r0 * r0 + r0 * r1 + r1 * r1);
        frustum_err = frustum_err.max((v - exact).abs() / exact);
    }
    Outcome {
        pass: worst <= 1e-9 && frustum_err <= 0.02,
        detail: format!("max deviation from exact examples {worst:.2e} (need <= 1e-9); frustum relative error {:.3}% (need <= 2%)", 100.0 * frustum_err),
        digest: digest_f64(&[worst, frustum_err]),
    }
}

// ---------------------------------------------------------------- criterion 6

fn record(id: usize, t: f64, e: bool, x: f64) -> SurvivalRecord {
    SurvivalRecord {
        patient_id: format!("p{id}"),
        time_days: t,
        event: e,
        age: 70.0,
        gender: 1.0,
        smoker: 1.0,
        fvc: None,
        dlco: None,
        biomarker: Some(x),
    }
}

fn pair_oracle(risk: &[f64], t: &[f64], e: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risk.len() {
        for j in 0..risk.len() {
            if e[i] && t[i] < t[j] {
                den += 1.0;
                num += if risk[i] > risk[j] {
                    1.0
                } else if risk[i] == risk[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn criterion_6() -> Outcome {
    let seeds = if quick() { 5 } else { 20 };
    let mut betas = Vec::new();
    let mut c_exact = true;
    for s in 0..seeds {
        let mut r = rng(derive_seed(stream_seed(6, "cohort"), s));
        let x: Vec<f64> = (0..500).map(|_| r.sample(StandardNormal)).collect();
        let eta: Vec<f64> = x.iter().map(|v| 0.7 * v).collect();
        let st = simulate_survival(&eta, 1.0, 0.25, &mut r);
        let recs: Vec<_> = st.iter().zip(&x).enumerate().map(|(i, (&(t, e), &v))| record(i, t, e, v)).collect();
        let fit = cox_fit(&recs, &[Covariate::Biomarker], &CoxOptions::default()).unwrap();
        betas.push(fit.beta[0]);
        let t: Vec<f64> = st.iter().map(|p| p.0.ceil()).collect();
        let e: Vec<bool> = st.iter().map(|p| p.1).collect();
        let risk: Vec<f64> = x.iter().map(|v| (v * 4.0).round()).collect();
        c_exact &= concordance_index(&risk, &t, &e).unwrap() == pair_oracle(&risk, &t, &e);
        let lp: Vec<f64> = x.iter().map(|v| fit.linear_predictor(&[*v])).collect();
        let raw_t: Vec<f64> = st.iter().map(|p| p.0).collect();
        c_exact &= fit.concordance == pair_oracle(&lp, &raw_t, &e);
    }
    let mut sorted = betas.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[(seeds as usize - 1) / 2] + sorted[seeds as usize / 2]);
    let t: Vec<f64> = (1..=40).map(|i| i as f64).collect();
    let e = vec![true; 40];
    let risk: Vec<f64> = t.iter().map(|v| -v).collect();
    let neg: Vec<f64> = risk.iter().map(|v| -v).collect();
    let perfect = concordance_index(&risk, &t, &e).unwrap();
    let reversed = concordance_index(&neg, &t, &e).unwrap();
    Outcome {
        pass: (median - 0.7).abs() <= 0.15 && c_exact && perfect == 1.0 && reversed == 0.0,
        detail: format!(
            "median beta {median:.4} over {seeds} seeds (truth 0.7 +/- 0.15); concordance equals pair oracle: {c_exact}; perfect {perfect}, reversed {reversed}"
        ),
        digest: digest_f64(&betas),
    }
}

// ---------------------------------------------------------------- criterion 7

fn run_atn(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_atn"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`atn {}` exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stdout).trim()
        ))
    }
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

/// The end-to-end pipeline under `root`; returns the survival table path.
fn smoke_pipeline(root: &Path) -> Result<PathBuf, String> {
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let d = |s: &str| root.join(s).to_str().unwrap().to_string();
    let n = if quick() { "200" } else { "2000" };
    let mut common = vec!["--config", cfg, "--deterministic"];
    if quick() {
        common.extend(["--set", "refiner_train.steps=5", "--set", "cohort.patients=6"]);
    }
    let run = |args: &[&str]| run_atn(&[args, &common[..]].concat());
    run(&["synth-generate", "--n", n, "--out", &d("synthetic")])?;
    run(&["pseudoreal-generate", "--n", "500", "--out", &d("real")])?;
    run(&["train-refiner", "--synthetic", &d("synthetic"), "--real", &d("real"), "--out", &d("refiner")])?;
    run(&["train-cnr", "--train", &d("synthetic"), "--out", &d("cnr_raw")])?;
    run(&[
        "train-cnr", "--train", &d("synthetic"), "--refiner", &d("refiner/refiner.atn"), "--out", &d("cnr_refined"),
    ])?;
    run(&["simulate-cohort", "--out", &d("cohort")])?;
    run(&["extract-patches", "--cohort", &d("cohort"), "--out", &d("patches")])?;
    run(&["fwhm", "--input", &d("patches"), "--out", &d("measure_fwhm")])?;
    for m in ["raw", "refined"] {
        run(&[
            "measure", "--model", &d(&format!("cnr_{m}/cnr.atn")), "--input", &d("patches"), "--out",
            &d(&format!("measure_cnr_{m}")),
        ])?;
    }
    for (m, name) in [("fwhm", "fwhm"), ("cnr_raw", "cnr-raw"), ("cnr_refined", "cnr-refined")] {
        run(&[
            "biomarkers", "--index", &d("patches/index.csv"), "--measurements",
            &d(&format!("measure_{m}/measurements.csv")), "--method", name, "--out", &d(&format!("biomarkers_{m}")),
        ])?;
    }
    run(&[
        "survival", "--clinical", &d("cohort/clinical.csv"), "--biomarkers", &d("biomarkers_fwhm/biomarkers.csv"),
        "--biomarkers", &d("biomarkers_cnr_raw/biomarkers.csv"), "--biomarkers",
        &d("biomarkers_cnr_refined/biomarkers.csv"), "--out", &d("survival"),
    ])?;
    run(&["plot", "loss", "--history", &d("refiner/history.csv"), "--out", &d("figures")])?;
    Ok(root.join("survival/table.csv"))
}

fn check_table(path: &Path) -> Result<String, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let header: Vec<String> = r.headers().map_err(|e| e.to_string())?.iter().map(str::to_string).collect();
    let want = atn_core::survival::TABLE_HEADER;
    if header != want {
        return Err(format!("header {header:?}"));
    }
    let mut keys = Vec::new();
    let mut filled = 0;
    let mut cells = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        keys.push((rec[0].to_string(), rec[1].to_string()));
        for v in rec.iter().skip(2) {
            cells += 1;
            filled += usize::from(!v.is_empty());
        }
    }
    let mut expected = Vec::new();
    for b in ["volume", "intertapering", "intratapering"] {
        for m in ["fwhm", "cnr-raw", "cnr-refined"] {
            expected.push((b.to_string(), m.to_string()));
        }
    }
    if keys != expected {
        return Err(format!("rows {keys:?}"));
    }
    Ok(format!("{} rows x {} columns, {filled}/{cells} cells filled", keys.len(), header.len()))
}

fn criterion_7(root: &Path) -> Outcome {
    let t = Instant::now();
    let result = smoke_pipeline(root).and_then(|p| check_table(&p));
    let secs = t.elapsed().as_secs_f64();
    match result {
        Ok(shape) => Outcome {
            pass: secs < 600.0,
            detail: format!("pipeline exit 0, table {shape}, {secs:.0} s (need < 600 s)"),
            digest: String::new(),
        },
        Err(e) => Outcome {
            pass: false,
            detail: format!("{e} after {secs:.0} s"),
            digest: String::new(),
        },
    }
}

// ---------------------------------------------------------------- criterion 8

fn files_under(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, PathBuf>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files_under(root, &p, out);
        } else {
            out.insert(p.strip_prefix(root).unwrap().to_path_buf(), p);
        }
    }
}

/// Compare two pipeline trees: every file byte for byte, except run.json
/// where only the configuration hash and input hashes must match (argv and
/// paths name the output directory).
fn compare_trees(a: &Path, b: &Path) -> Result<usize, String> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    files_under(a, a, &mut fa);
    files_under(b, b, &mut fb);
    if fa.keys().ne(fb.keys()) {
        return Err("the two runs wrote different file sets".into());
    }
    for (rel, pa) in &fa {
        let (x, y) = (fs::read(pa).unwrap(), fs::read(&fb[rel]).unwrap());
        if rel.file_name().is_some_and(|n| n == "run.json") {
            let (x, y): (serde_json::Value, serde_json::Value) =
                (serde_json::from_slice(&x).unwrap(), serde_json::from_slice(&y).unwrap());
            let hashes = |v: &serde_json::Value| {
                let inputs: Vec<_> = v["inputs"].as_array().unwrap().iter().map(|i| i["sha256"].clone()).collect();
                (v["config_sha256"].clone(), inputs, v["seeds"].clone())
            };
            if hashes(&x) != hashes(&y) {
                return Err(format!("{} differs in config or input hashes", rel.display()));
            }
        } else if x != y {
            return Err(format!("{} differs", rel.display()));
        }
    }
    Ok(fa.len())
}

fn criterion_8(first_smoke: &Path, second_smoke: &Path, digests: &[(u8, String)], reruns: &[(u8, String)]) -> Outcome {
    let mut problems = Vec::new();
    let files = match smoke_pipeline(second_smoke).and_then(|_| compare_trees(first_smoke, second_smoke)) {
        Ok(n) => n,
        Err(e) => {
            problems.push(format!("pipeline: {e}"));
            0
        }
    };
    for ((k, a), (_, b)) in digests.iter().zip(reruns) {
        if a != b {
            problems.push(format!("criterion {k} digest changed"));
        }
    }
    Outcome {
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            format!(
                "{files} pipeline files identical across two --deterministic runs; criteria {} reproduce bit-identically",
                digests.iter().map(|d| d.0.to_string()).collect::<Vec<_>>().join(", ")
            )
        } else {
            problems.join("; ")
        },
        digest: String::new(),
    }
}

fn main() {
    // `cargo test -- --list` and filters from other harnesses
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let names = [
        "domain-shift benefit",
        "refiner convergence",
        "loss correctness",
        "FWHM baseline accuracy",
        "biomarker exactness",
        "Cox and concordance correctness",
        "pipeline integrity",
        "determinism",
    ];
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let report = |k: u8, o: &Outcome| {
        println!(
            "criterion {k} ({}): {}  {}",
            names[k as usize - 1],
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    let cheap: [(u8, fn() -> Outcome); 4] = [(3, criterion_3), (4, criterion_4), (5, criterion_5), (6, criterion_6)];
    for (k, f) in [(1u8, criterion_1 as fn() -> Outcome), (2, criterion_2)].into_iter().chain(cheap) {
        let t = Instant::now();
        let o = f();
        eprintln!("criterion {k} took {:.0} s", t.elapsed().as_secs_f64());
        report(k, &o);
        results.push((k, o));
    }
    let first = tmp.path().join("smoke_a");
    let o7 = criterion_7(&first);
    report(7, &o7);
    results.push((7, o7));

    // determinism: rerun the cheap criteria and a reduced domain-shift seed
    let mut digests: Vec<(u8, String)> = results
        .iter()
        .filter(|(k, _)| (3..=6).contains(k))
        .map(|(k, o)| (*k, o.digest.clone()))
        .collect();
    let mut reruns: Vec<(u8, String)> = cheap.iter().map(|(k, f)| (*k, f().digest)).collect();
    let small = || domain_shift_seed(9, 300, 60, 1, 5).2;
    digests.push((1, small()));
    reruns.push((1, small()));
    let conv = || digest_f64(&refiner_history(0.001, 20, 9).0);
    digests.push((2, conv()));
    reruns.push((2, conv()));
    let o8 = criterion_8(&first, &tmp.path().join("smoke_b"), &digests, &reruns);
    report(8, &o8);
    results.push((8, o8));

    let failed: Vec<u8> = results.iter().filter(|(_, o)| !o.pass).map(|(k, _)| *k).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!(" (failed: {failed:?})") }
    );
    if !failed.is_empty() && std::env::var_os("ATN_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
