use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use retseg::config::PipelineConfig;
use retseg::dataset;
use retseg::enhance::{self, ClaheParams};
use retseg::eval::{self, ImageResult};
use retseg::imagio::{BinaryImage, GrayImage};
use retseg::mlp::{self, TrainConfig};
use retseg::pipeline;
use retseg::synth::{self, SynthConfig};

fn random_binary(seed: u64, w: usize, h: usize, p: f64) -> BinaryImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h).map(|_| u8::from(rng.random_bool(p))).collect();
    BinaryImage::new(w, h, data).unwrap()
}

#[test]
fn identity_task_is_learned_within_fifty_epochs() {
    let img = random_binary(4, 64, 64, 0.3);
    let feats = mlp::pixel_features(&img, 1).unwrap();
    let cfg = TrainConfig {
        max_epochs: 50,
        ..TrainConfig::default()
    };
    let (p, h) = mlp::train(feats.dim, &feats.values, img.data(), &cfg).unwrap();
    assert!(h.epochs_run() <= 50);
    assert!(1.0 - h.best().train_err >= 0.99, "{:?}", h.best());

    let pred = mlp::predict_image(&p, &img, 1).unwrap();
    let same = pred
        .labels
        .data()
        .iter()
        .zip(img.data())
        .filter(|(a, b)| a == b)
        .count();
    assert!(same as f64 >= 0.99 * img.len() as f64);
    assert_eq!(pred, mlp::predict_image(&p, &img, 1).unwrap());
}

#[test]
fn default_synthetic_image_has_plausible_vessel_fraction() {
    for seed in [1, 2, 3] {
        let s = synth::generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!((s.image.width(), s.image.height()), (565, 584));
        let fov = s.fov.count_ones();
        let vessels = s.truth.count_ones();
        assert!(s
            .truth
            .data()
            .iter()
            .zip(s.fov.data())
            .all(|(&t, &f)| t <= f));
        let frac = vessels as f64 / fov as f64;
        assert!(
            (0.05..=0.15).contains(&frac),
            "seed {seed}: vessel fraction {frac}"
        );
    }
}

#[test]
fn clahe_raises_snr_of_low_contrast_ramp() {
    let ramp = GrayImage::from_fn(128, 128, |x, y| (100 + (x + y) * 40 / 254) as u8).unwrap();
    let out = enhance::clahe(&ramp, &ClaheParams::default()).unwrap();
    assert!(enhance::snr(&out).unwrap().snr > enhance::snr(&ramp).unwrap().snr);
}

#[test]
fn stages_are_deterministic_and_complemented() {
    let cfg = PipelineConfig::default();
    let sample = dataset::synth_samples(&cfg.synth, 1).unwrap().remove(0);
    let a = pipeline::preprocess(&sample.image, &cfg).unwrap();
    let b = pipeline::preprocess(&sample.image, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.named().iter().map(|(n, _)| *n).collect::<Vec<_>>(),
        pipeline::STAGE_NAMES
    );
    for (x, y) in a.binary.data().iter().zip(a.complemented.data()) {
        assert_eq!(x + y, 1);
    }
    // vessels are dark in the green channel, so the enhanced map lights them up
    let on_vessel = a
        .binary
        .data()
        .iter()
        .zip(sample.truth.data())
        .filter(|(&b, &t)| b == 1 && t == 1)
        .count();
    assert!(on_vessel as f64 > 0.5 * sample.truth.count_ones() as f64);
}

#[test]
fn perfect_predictions_report_unit_accuracy() {
    let results: Vec<ImageResult> = (0..3)
        .map(|i| {
            let t = random_binary(i, 16, 16, 0.2);
            let c = eval::confusion(&t, &t, None).unwrap();
            ImageResult::new(format!("{i:02}"), c, 0.0).unwrap()
        })
        .collect();
    let r = eval::report(&results).unwrap();
    assert_eq!(r.average, 1.0);
    assert!(String::from_utf8(r.csv)
        .unwrap()
        .contains("AVERAGE,,,,,1.0000,"));
}

#[test]
fn held_out_mode_excludes_training_image() {
    let mut cfg = PipelineConfig {
        synth: SynthConfig {
            width: 120,
            height: 120,
            fov_margin: 4,
            vessel_width_range: (1.5, 5.0),
            ..SynthConfig::default()
        },
        se_radius: 4,
        ..PipelineConfig::default()
    };
    cfg.train_index = 1;
    cfg.eval_split = retseg::config::EvalSplit::HeldOut;
    let samples = dataset::synth_samples(&cfg.synth, 3).unwrap();
    let exp = pipeline::run_experiment(&samples, &cfg, 2).unwrap();
    assert_eq!(exp.train_id, "02_image");
    let ids: Vec<_> = exp.results.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["01_image", "03_image"]);
    let names: Vec<_> = exp.diagnostics.iter().map(|d| d.name).collect();
    assert_eq!(names, ["train", "val", "test", "all"]);
    let roc = String::from_utf8(pipeline::roc_csv(&exp.diagnostics)).unwrap();
    assert!(roc.starts_with("split,fpr,tpr\n"));
}
