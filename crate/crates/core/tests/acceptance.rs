//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! nonzero when a gating criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use retseg::config::PipelineConfig;
use retseg::dataset;
use retseg::enhance::{self, ClaheParams, Distribution, Kernel, KernelSpec};
use retseg::eval::{self, ConfusionCounts, ImageResult};
use retseg::imagio::{BinaryImage, GrayImage};
use retseg::mlp::{self, MlpParams, Samples, TrainConfig};
use retseg::morphbin::{self, StructuringElement};
use retseg::pipeline;

const ORACLE_INSTANCES: usize = 120;
const ORACLE_BUDGET_S: f64 = 60.0;
const GRAD_NETS: usize = 100;
const GRAD_EPS: f64 = 1e-5;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET_S: f64 = 30.0;
const KERNEL_TOL: f64 = 1e-9;
const AUC_TOL: f64 = 1e-12;
const TOY_SEEDS: u64 = 10;
const TOY_REQUIRED: usize = 9;
const TOY_EPOCHS: usize = 200;
const PUBLISHED_AVERAGE: f64 = 0.9492;
const PUBLISHED_TOL: f64 = 0.00005;
const PUBLISHED_ACCURACIES: [f64; 20] = [
    0.9680, 0.9574, 0.9116, 0.9476, 0.9523, 0.9291, 0.9575, 0.9551, 0.9428, 0.9457, 0.9579, 0.9627,
    0.9629, 0.9158, 0.9555, 0.9447, 0.9505, 0.9571, 0.9544, 0.9545,
];
const SYNTH_COUNT: usize = 20;
const SYNTH_MIN_ACCURACY: f64 = 0.90;
const SYNTH_TIME_BUDGET_S: f64 = 60.0;
const DRIVE_TOL: f64 = 0.02;

struct Outcome {
    gating_failures: usize,
}

impl Outcome {
    fn record(&mut self, name: &str, pass: bool, gating: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let soft = if gating { "" } else { " (soft)" };
        println!("{tag} {name}{soft}: {detail}");
        if !pass && gating {
            self.gating_failures += 1;
        }
    }

    fn skip(&self, name: &str, why: &str) {
        println!("SKIP {name}: {why}");
    }
}

fn main() {
    let mut out = Outcome { gating_failures: 0 };
    oracle_equivalences(&mut out);
    gradient_check(&mut out);
    gaussian_kernel(&mut out);
    confusion_and_roc(&mut out);
    rprop_toy(&mut out);
    published_average(&mut out);
    synthetic_end_to_end(&mut out);
    drive_reproduction(&mut out);
    if out.gating_failures > 0 {
        println!("{} gating criterion/criteria failed", out.gating_failures);
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- oracles

fn random_gray(rng: &mut ChaCha8Rng) -> GrayImage {
    let w = rng.random_range(1..=16);
    let h = rng.random_range(1..=16);
    // Narrow value ranges make ties and repeated values common.
    let hi: u8 = if rng.random_bool(0.3) {
        rng.random_range(1..=8)
    } else {
        255
    };
    GrayImage::from_fn(w, h, |_, _| rng.random_range(0..=hi)).unwrap()
}

fn at(img: &GrayImage, x: isize, y: isize) -> u8 {
    let cx = x.clamp(0, img.width() as isize - 1) as usize;
    let cy = y.clamp(0, img.height() as isize - 1) as usize;
    img.data()[cy * img.width() + cx]
}

fn each_pixel(img: &GrayImage, f: impl Fn(isize, isize) -> u8) -> Vec<u8> {
    let mut v = Vec::with_capacity(img.len());
    for y in 0..img.height() as isize {
        for x in 0..img.width() as isize {
            v.push(f(x, y));
        }
    }
    v
}

fn naive_median(img: &GrayImage, k: usize) -> Vec<u8> {
    let r = (k / 2) as isize;
    each_pixel(img, |x, y| {
        let mut win = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                win.push(at(img, x + dx, y + dy));
            }
        }
        win.sort_unstable();
        win[win.len() / 2]
    })
}

fn naive_erode(img: &GrayImage, se: &[(isize, isize)]) -> GrayImage {
    let d = each_pixel(img, |x, y| {
        se.iter()
            .map(|&(dx, dy)| at(img, x + dx, y + dy))
            .min()
            .unwrap()
    });
    GrayImage::new(img.width(), img.height(), d).unwrap()
}

fn naive_dilate(img: &GrayImage, se: &[(isize, isize)]) -> GrayImage {
    let d = each_pixel(img, |x, y| {
        se.iter()
            .map(|&(dx, dy)| at(img, x - dx, y - dy))
            .max()
            .unwrap()
    });
    GrayImage::new(img.width(), img.height(), d).unwrap()
}

fn sub(a: &GrayImage, b: &GrayImage) -> Vec<u8> {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x.saturating_sub(y))
        .collect()
}

fn random_se(rng: &mut ChaCha8Rng) -> Vec<(isize, isize)> {
    if rng.random_bool(0.5) {
        let r = rng.random_range(0..=3i64) as isize;
        let mut v = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    v.push((dx, dy));
                }
            }
        }
        v
    } else {
        let mut v = vec![(0, 0)];
        for _ in 0..rng.random_range(0..8) {
            v.push((
                rng.random_range(-3..=3i64) as isize,
                rng.random_range(-3..=3i64) as isize,
            ));
        }
        v
    }
}

/// Threshold maximizing `w0·w1·(μ0 − μ1)²` over all `t` with both classes
/// non-empty, compared as exact fractions; smallest `t` wins ties.
fn naive_otsu(img: &GrayImage) -> u8 {
    let px = img.data();
    let n = px.len() as u128;
    let mut best: Option<(u128, u128, u8)> = None;
    for t in 0..=255u8 {
        let c0: Vec<u128> = px.iter().filter(|&&v| v <= t).map(|&v| v as u128).collect();
        let c1: Vec<u128> = px.iter().filter(|&&v| v > t).map(|&v| v as u128).collect();
        if c0.is_empty() || c1.is_empty() {
            continue;
        }
        let (n0, n1) = (c0.len() as u128, c1.len() as u128);
        let (s0, s1): (u128, u128) = (c0.iter().sum(), c1.iter().sum());
        // w0 w1 (μ0 − μ1)² = (n0/n)(n1/n)(s0/n0 − s1/n1)² = (s0 n1 − s1 n0)² / (n² n0 n1)
        let diff = (s0 * n1).abs_diff(s1 * n0);
        let num = diff * diff;
        let den = n * n * n0 * n1;
        match best {
            Some((bn, bd, _)) if num * bd <= bn * den => {}
            _ => best = Some((num, den, t)),
        }
    }
    best.map_or(px[0], |b| b.2)
}

fn naive_convolve(img: &GrayImage, k: &Kernel) -> Vec<u8> {
    let r = k.radius() as isize;
    each_pixel(img, |x, y| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                acc += k.at(dx, dy) * f64::from(at(img, x + dx, y + dy));
            }
        }
        acc.clamp(0.0, 255.0).round() as u8
    })
}

fn global_equalization(img: &GrayImage) -> Vec<u8> {
    let n = img.len() as u64;
    let mut hist = [0u64; 256];
    for &v in img.data() {
        hist[v as usize] += 1;
    }
    let mut cdf = [0u64; 256];
    let mut acc = 0;
    for (c, h) in cdf.iter_mut().zip(hist) {
        acc += h;
        *c = acc;
    }
    // round(255·cdf/n) with halves rounded up, in integers
    img.data()
        .iter()
        .map(|&v| ((2 * 255 * cdf[v as usize] + n) / (2 * n)) as u8)
        .collect()
}

fn oracle_equivalences(out: &mut Outcome) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0AC1E);
    let mut mismatches: Vec<String> = Vec::new();
    let mut max_conv_diff = 0u8;
    for i in 0..ORACLE_INSTANCES {
        let img = random_gray(&mut rng);
        let k = 2 * rng.random_range(1..=3) + 1;
        if enhance::median_filter(&img, k).unwrap().data() != naive_median(&img, k).as_slice() {
            mismatches.push(format!("median#{i}"));
        }

        let offs = random_se(&mut rng);
        let se = StructuringElement::from_offsets(offs.iter().copied());
        let e = naive_erode(&img, &offs);
        let d = naive_dilate(&img, &offs);
        let o = naive_dilate(&e, &offs);
        let c = naive_erode(&d, &offs);
        let checks = [
            ("erode", morphbin::erode(&img, &se), e.data().to_vec()),
            ("dilate", morphbin::dilate(&img, &se), d.data().to_vec()),
            ("open", morphbin::open(&img, &se), o.data().to_vec()),
            ("close", morphbin::close(&img, &se), c.data().to_vec()),
            ("tophat", morphbin::tophat(&img, &se), sub(&img, &o)),
            ("bothat", morphbin::bothat(&img, &se), sub(&c, &img)),
        ];
        for (name, got, want) in checks {
            if got.data() != want.as_slice() {
                mismatches.push(format!("{name}#{i}"));
            }
        }

        if morphbin::otsu_threshold(&img) != naive_otsu(&img) {
            mismatches.push(format!("otsu#{i}"));
        }

        let side = 2 * rng.random_range(0..=3) + 1;
        let weights: Vec<f64> = (0..side * side)
            .map(|_| rng.random_range(-0.3..1.0))
            .collect();
        let kernel = Kernel::new(side, weights).unwrap();
        let got = enhance::convolve(&img, &kernel);
        for (&a, &b) in got.data().iter().zip(&naive_convolve(&img, &kernel)) {
            max_conv_diff = max_conv_diff.max(a.abs_diff(b));
        }

        let he = ClaheParams {
            tiles_x: 1,
            tiles_y: 1,
            bins: 256,
            clip_limit: 1.0,
            distribution: Distribution::Uniform,
            ..ClaheParams::default()
        };
        if enhance::clahe(&img, &he).unwrap().data() != global_equalization(&img).as_slice() {
            mismatches.push(format!("clahe#{i}"));
        }
    }
    if max_conv_diff > 1 {
        mismatches.push(format!("convolve max diff {max_conv_diff}"));
    }
    let secs = start.elapsed().as_secs_f64();
    out.record(
        "oracle equivalences",
        mismatches.is_empty() && secs < ORACLE_BUDGET_S,
        true,
        format!(
            "{ORACLE_INSTANCES} instances x 10 operations, mismatches {:?}, convolve max |diff| {max_conv_diff}, {secs:.2} s",
            &mismatches[..mismatches.len().min(5)]
        ),
    );
}

// --------------------------------------------------------------- gradient

fn gradient_check(out: &mut Outcome) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let mut worst = 0.0f64;
    for net in 0..GRAD_NETS {
        let dim = rng.random_range(1..=9);
        let mut p = mlp::init_params(dim, 10, net as u64);
        for v in p.values_mut() {
            *v *= rng.random_range(0.5..4.0);
        }
        let rows = rng.random_range(1..=12);
        let features: Vec<f64> = (0..rows * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let labels: Vec<u8> = (0..rows).map(|_| rng.random_range(0..=1)).collect();
        let batch = Samples::new(dim, features, labels).unwrap();
        let (_, grad) = mlp::loss_and_grad(&p, &batch).unwrap();

        let mut numeric = vec![0.0; p.values().len()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let orig = p.values()[j];
            p.values_mut()[j] = orig + GRAD_EPS;
            let plus = mlp::loss_and_grad(&p, &batch).unwrap().0;
            p.values_mut()[j] = orig - GRAD_EPS;
            let minus = mlp::loss_and_grad(&p, &batch).unwrap().0;
            p.values_mut()[j] = orig;
            *n = (plus - minus) / (2.0 * GRAD_EPS);
        }
        let diff = norm(grad.values().iter().zip(&numeric).map(|(a, b)| a - b));
        let scale = norm(grad.values().iter().copied()).max(norm(numeric.iter().copied()));
        let rel = if scale == 0.0 { diff } else { diff / scale };
        worst = worst.max(rel);
    }
    let secs = start.elapsed().as_secs_f64();
    out.record(
        "gradient check",
        worst < GRAD_REL_TOL && secs < GRAD_BUDGET_S,
        true,
        format!(
            "{GRAD_NETS} nets, eps {GRAD_EPS:e}, worst relative error {worst:.3e}, {secs:.2} s"
        ),
    );
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

// ----------------------------------------------------------------- kernel

fn gaussian_kernel(out: &mut Outcome) {
    let raw = enhance::gaussian_kernel(&KernelSpec {
        sigma: 1.0,
        radius: 3,
        normalized: false,
    })
    .unwrap();
    let centre = raw.at(0, 0);
    let centre_ok = (centre - 1.0 / (2.0 * std::f64::consts::PI)).abs() <= KERNEL_TOL;

    let mut symmetric = true;
    for sigma in [0.5, 1.0, 1.7, 2.3] {
        let k = enhance::gaussian_kernel(&KernelSpec::for_sigma(sigma)).unwrap();
        let r = k.radius() as isize;
        for dy in -r..=r {
            for dx in -r..=r {
                let v = k.at(dx, dy);
                let images = [
                    (-dx, dy),
                    (dx, -dy),
                    (-dx, -dy),
                    (dy, dx),
                    (-dy, dx),
                    (dy, -dx),
                    (-dy, -dx),
                ];
                symmetric &= images
                    .iter()
                    .all(|&(a, b)| k.at(a, b).to_bits() == v.to_bits());
            }
        }
    }

    let mut worst_sum = 0.0f64;
    for sigma in [0.5, 1.0, 1.7, 2.3, 4.0] {
        let k = enhance::gaussian_kernel(&KernelSpec::for_sigma(sigma)).unwrap();
        worst_sum = worst_sum.max((k.sum() - 1.0).abs());
    }
    out.record(
        "gaussian kernel",
        centre_ok && symmetric && worst_sum <= KERNEL_TOL,
        true,
        format!("centre {centre:.12}, 8-fold symmetric {symmetric}, max |sum - 1| {worst_sum:.2e}"),
    );
}

// -------------------------------------------------------------- confusion

fn bin(w: usize, h: usize, d: &[u8]) -> BinaryImage {
    BinaryImage::new(w, h, d.to_vec()).unwrap()
}

fn confusion_and_roc(out: &mut Outcome) {
    let mut notes = Vec::new();
    let pred = bin(2, 2, &[1, 1, 0, 0]);
    let truth = bin(2, 2, &[1, 0, 1, 0]);
    let c = eval::confusion(&pred, &truth, None).unwrap();
    let hand =
        c == ConfusionCounts {
            tp: 1,
            tn: 1,
            fp: 1,
            fn_: 1,
        } && eval::accuracy(&c).unwrap() == 0.5;
    notes.push(format!("2x2 {hand}"));

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t: Vec<u8> = (0..64).map(|_| rng.random_range(0..=1)).collect();
    let truth = bin(8, 8, &t);
    let inv = bin(8, 8, &t.iter().map(|v| 1 - v).collect::<Vec<_>>());
    let same = eval::accuracy(&eval::confusion(&truth, &truth, None).unwrap()).unwrap() == 1.0;
    let flip = eval::accuracy(&eval::confusion(&inv, &truth, None).unwrap()).unwrap() == 0.0;
    notes.push(format!("identity {same}, complement {flip}"));

    let scores = [0.9, 0.8, 0.7, 0.4, 0.3, 0.2];
    let labels = [1, 1, 0, 1, 0, 0];
    let auc = eval::roc_points(&scores, &labels).unwrap().auc;
    let auc_ok = (auc - 8.0 / 9.0).abs() <= AUC_TOL;
    notes.push(format!("AUC {auc:.15}"));
    out.record(
        "confusion and ROC",
        hand && same && flip && auc_ok,
        true,
        notes.join(", "),
    );
}

// ------------------------------------------------------------------ rprop

/// Two Gaussian blobs of 100 points each around (-1.5, -1.5) and (1.5, 1.5).
fn two_blobs(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.4).unwrap();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for i in 0..200 {
        let class = (i % 2) as u8;
        let c = if class == 1 { 1.5 } else { -1.5 };
        feats.push(c + noise.sample(&mut rng));
        feats.push(c + noise.sample(&mut rng));
        labels.push(class);
    }
    (feats, labels)
}

fn rprop_toy(out: &mut Outcome) {
    let mut perfect = 0;
    let mut deterministic = true;
    let mut epochs = Vec::new();
    for seed in 0..TOY_SEEDS {
        let (x, y) = two_blobs(100 + seed);
        let cfg = TrainConfig {
            seed,
            max_epochs: TOY_EPOCHS,
            ..TrainConfig::default()
        };
        let (p, h) = mlp::train(2, &x, &y, &cfg).unwrap();
        let (p2, h2) = mlp::train(2, &x, &y, &cfg).unwrap();
        deterministic &= p
            .values()
            .iter()
            .zip(p2.values())
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && h == h2;
        let correct = h
            .split
            .train
            .iter()
            .filter(|&&i| predict(&p, &x[2 * i..2 * i + 2]) == y[i])
            .count();
        if correct == h.split.train.len() {
            perfect += 1;
        }
        epochs.push(h.epochs_run());
    }
    out.record(
        "rprop two-blob toy",
        perfect >= TOY_REQUIRED && deterministic,
        true,
        format!("{perfect}/{TOY_SEEDS} seeds at 100% train accuracy, epochs run {epochs:?}, deterministic {deterministic}"),
    );
}

fn predict(p: &MlpParams, x: &[f64]) -> u8 {
    mlp::classify(mlp::forward(p, x))
}

// ------------------------------------------------------ published average

fn published_average(out: &mut Outcome) {
    let results: Vec<ImageResult> = PUBLISHED_ACCURACIES
        .iter()
        .enumerate()
        .map(|(i, &acc)| {
            let correct = (acc * 10_000.0).round() as u64;
            let counts = ConfusionCounts {
                tp: correct / 10,
                tn: correct - correct / 10,
                fp: (10_000 - correct) / 2,
                fn_: 10_000 - correct - (10_000 - correct) / 2,
            };
            ImageResult::new(format!("{}_training", 21 + i), counts, 0.0).unwrap()
        })
        .collect();
    let report = eval::report(&results).unwrap();
    let diff = (report.average - PUBLISHED_AVERAGE).abs();
    let printed = String::from_utf8_lossy(&report.csv)
        .lines()
        .any(|l| l.starts_with("AVERAGE") && l.contains(",0.9492,"));
    out.record(
        "published per-image average",
        diff <= PUBLISHED_TOL && printed,
        true,
        format!(
            "mean {:.6}, |diff| {diff:.6}, AVERAGE row prints 0.9492: {printed}",
            report.average
        ),
    );
}

// ------------------------------------------------------------ end to end

fn synthetic_end_to_end(out: &mut Outcome) {
    let cfg = PipelineConfig::default();
    let samples = dataset::synth_samples(&cfg.synth, SYNTH_COUNT).unwrap();
    let dims = (samples[0].image.width(), samples[0].image.height());
    let exp = pipeline::run_experiment(&samples, &cfg, 1).unwrap();
    out.record(
        "synthetic end-to-end accuracy",
        exp.report.average >= SYNTH_MIN_ACCURACY,
        true,
        format!(
            "{SYNTH_COUNT} images {}x{} (width x height), average accuracy {:.4} (bound {SYNTH_MIN_ACCURACY})",
            dims.0, dims.1, exp.report.average
        ),
    );
    out.record(
        "synthetic end-to-end time",
        exp.segmentation_s <= SYNTH_TIME_BUDGET_S,
        false,
        format!(
            "total segmentation {:.2} s single-threaded (budget {SYNTH_TIME_BUDGET_S} s)",
            exp.segmentation_s
        ),
    );
}

// ------------------------------------------------------------------ DRIVE

fn drive_reproduction(out: &mut Outcome) {
    let Some(dir) = std::env::var_os("RETSEG_DRIVE_DIR") else {
        out.skip(
            "DRIVE reproduction",
            "set RETSEG_DRIVE_DIR to a DRIVE training directory",
        );
        return;
    };
    let cfg = PipelineConfig::default();
    let entries = match dataset::discover(std::path::Path::new(&dir), None) {
        Ok(e) => e,
        Err(e) => {
            out.record("DRIVE reproduction", false, false, e.to_string());
            return;
        }
    };
    let samples: Result<Vec<_>, _> = entries.iter().map(dataset::load_sample).collect();
    let exp = match samples.and_then(|s| pipeline::run_experiment(&s, &cfg, 1)) {
        Ok(e) => e,
        Err(e) => {
            out.record("DRIVE reproduction", false, false, e.to_string());
            return;
        }
    };
    let mut ranked: Vec<(&str, f64)> = exp
        .results
        .iter()
        .map(|r| (r.id.as_str(), r.accuracy))
        .collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
    let lowest: Vec<&str> = ranked.iter().take(4).map(|r| r.0).collect();
    let ordering = ["23", "34"]
        .iter()
        .all(|k| lowest.iter().any(|id| id.starts_with(k)));
    let diff = (exp.report.average - PUBLISHED_AVERAGE).abs();
    out.record(
        "DRIVE reproduction",
        diff <= DRIVE_TOL && ordering,
        false,
        format!(
            "average {:.4} (target {PUBLISHED_AVERAGE} +/- {DRIVE_TOL}), four lowest {lowest:?}",
            exp.report.average
        ),
    );
}
