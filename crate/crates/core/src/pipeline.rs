//! The end-to-end experiment: preprocess every image, train the classifier on
//! one of them, segment all of them and score the result.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, EvalSplit, PipelineConfig, ThresholdMode};
use crate::dataset::Sample;
use crate::enhance::{self, EnhanceError};
use crate::eval::{self, ConfusionCounts, EvalError, ImageResult, Report, Roc};
use crate::imagio::{BinaryImage, GrayImage, Image, ImageError, RgbImage};
use crate::mlp::{self, MlpError, MlpParams, Prediction, TrainHistory};
use crate::morphbin;
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: ImageError },
    #[error("{path}: expected {expected}, found {found}")]
    WrongKind {
        path: PathBuf,
        expected: &'static str,
        found: &'static str,
    },
    #[error("no counterpart found for `{0}`")]
    MissingCounterpart(String),
    #[error("no input images")]
    NoInputs,
    #[error("training index {index} out of range for {count} images")]
    TrainIndex { index: usize, count: usize },
    #[error("`{id}`: image {image:?} and truth {truth:?} differ in size")]
    SizeMismatch {
        id: String,
        image: (usize, usize),
        truth: (usize, usize),
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Every intermediate of the preprocessing chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Stages {
    pub green: GrayImage,
    pub clahe: GrayImage,
    pub adjusted: GrayImage,
    pub median: GrayImage,
    pub matched: GrayImage,
    pub enhanced: GrayImage,
    pub threshold: u8,
    pub binary: BinaryImage,
    pub complemented: BinaryImage,
}

pub const STAGE_NAMES: [&str; 8] = [
    "green",
    "clahe",
    "adjusted",
    "median",
    "matched",
    "enhanced",
    "binary",
    "complemented",
];

impl Stages {
    /// `(name, image)` pairs in pipeline order, matching [`STAGE_NAMES`].
    pub fn named(&self) -> Vec<(&'static str, Image)> {
        let imgs: [Image; 8] = [
            self.green.clone().into(),
            self.clahe.clone().into(),
            self.adjusted.clone().into(),
            self.median.clone().into(),
            self.matched.clone().into(),
            self.enhanced.clone().into(),
            self.binary.clone().into(),
            self.complemented.clone().into(),
        ];
        STAGE_NAMES.into_iter().zip(imgs).collect()
    }
}

/// Green channel → CLAHE → stretch → median → Gaussian → hat combination →
/// threshold → complement.
///
/// A stretch whose quantiles coincide (flat image) passes the image through.
pub fn preprocess(rgb: &RgbImage, cfg: &PipelineConfig) -> Result<Stages, PipelineError> {
    let green = enhance::green_channel(rgb);
    let clahe = enhance::clahe(&green, &cfg.clahe)?;
    let adjusted = match enhance::adjust_intensity(&clahe, cfg.stretch_low, cfg.stretch_high) {
        Ok(img) => img,
        Err(EnhanceError::DegenerateRange(_)) => clahe.clone(),
        Err(e) => return Err(e.into()),
    };
    let median = enhance::median_filter(&adjusted, cfg.median_window)?;
    let kernel = enhance::gaussian_kernel(&cfg.kernel_spec())?;
    let matched = enhance::convolve(&median, &kernel);
    let se = morphbin::disk_se(cfg.se_radius);
    let enhanced = morphbin::combine_hats(&matched, &se, cfg.hat_combination);
    let threshold = match cfg.threshold {
        ThresholdMode::Otsu => morphbin::otsu_threshold(&enhanced),
        ThresholdMode::Fixed => cfg.threshold_level,
    };
    let binary = morphbin::binarize(&enhanced, threshold);
    let complemented = morphbin::complement(&binary);
    Ok(Stages {
        green,
        clahe,
        adjusted,
        median,
        matched,
        enhanced,
        threshold,
        binary,
        complemented,
    })
}

/// Per-pixel training rows from a preprocessed image and its truth.
pub fn training_rows(
    input: &BinaryImage,
    truth: &BinaryImage,
    window: usize,
) -> Result<mlp::PixelFeatures, PipelineError> {
    if (input.width(), input.height()) != (truth.width(), truth.height()) {
        return Err(PipelineError::SizeMismatch {
            id: "training pair".into(),
            image: (input.width(), input.height()),
            truth: (truth.width(), truth.height()),
        });
    }
    Ok(mlp::pixel_features(input, window)?)
}

/// Trains on `input` (a complemented binary image) against `truth`.
pub fn train_on_image(
    input: &BinaryImage,
    truth: &BinaryImage,
    cfg: &PipelineConfig,
) -> Result<(MlpParams, TrainHistory), PipelineError> {
    let feats = training_rows(input, truth, cfg.mlp_window)?;
    Ok(mlp::train(
        feats.dim,
        &feats.values,
        truth.data(),
        &cfg.train,
    )?)
}

/// Per-split ROC curves and confusion counts on the training image.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDiagnostics {
    pub name: &'static str,
    pub roc: Option<Roc>,
    pub counts: ConfusionCounts,
}

pub fn split_diagnostics(
    history: &TrainHistory,
    prediction: &Prediction,
    truth: &BinaryImage,
) -> Vec<SplitDiagnostics> {
    let all: Vec<usize> = (0..truth.len()).collect();
    let parts: [(&'static str, &[usize]); 4] = [
        ("train", &history.split.train),
        ("val", &history.split.val),
        ("test", &history.split.test),
        ("all", &all),
    ];
    parts
        .into_iter()
        .map(|(name, idx)| {
            let scores: Vec<f64> = idx.iter().map(|&i| prediction.scores[i]).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| truth.data()[i]).collect();
            let mut counts = ConfusionCounts::default();
            for &i in idx {
                match (prediction.labels.data()[i], truth.data()[i]) {
                    (1, 1) => counts.tp += 1,
                    (0, 0) => counts.tn += 1,
                    (1, 0) => counts.fp += 1,
                    _ => counts.fn_ += 1,
                }
            }
            SplitDiagnostics {
                name,
                roc: eval::roc_points(&scores, &labels).ok(),
                counts,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedImage {
    pub id: String,
    pub stages: Stages,
    pub prediction: Prediction,
    pub preprocess_s: f64,
    pub predict_s: f64,
}

impl SegmentedImage {
    pub fn runtime_s(&self) -> f64 {
        self.preprocess_s + self.predict_s
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub params: MlpParams,
    pub history: TrainHistory,
    pub train_id: String,
    pub diagnostics: Vec<SplitDiagnostics>,
    pub images: Vec<SegmentedImage>,
    pub results: Vec<ImageResult>,
    pub report: Report,
    /// Sum of per-image preprocessing and prediction time.
    pub segmentation_s: f64,
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, PipelineError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Runs preprocessing, training on `samples[cfg.train_index]`, segmentation
/// of every sample and evaluation. Per-image work runs on `jobs` threads;
/// results are collected in input order so the outcome does not depend on it.
pub fn run_experiment(
    samples: &[Sample],
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<Experiment, PipelineError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(PipelineError::NoInputs);
    }
    if cfg.train_index >= samples.len() {
        return Err(PipelineError::TrainIndex {
            index: cfg.train_index,
            count: samples.len(),
        });
    }
    for s in samples {
        let dims = (s.image.width(), s.image.height());
        let truth = (s.truth.width(), s.truth.height());
        if dims != truth {
            return Err(PipelineError::SizeMismatch {
                id: s.id.clone(),
                image: dims,
                truth,
            });
        }
    }
    let pool = thread_pool(jobs)?;

    let staged: Vec<(Stages, f64)> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let (stages, secs) = timed(|| preprocess(&s.image, cfg));
                stages.map(|st| (st, secs))
            })
            .collect::<Result<_, _>>()
    })?;

    let train_sample = &samples[cfg.train_index];
    let (params, history) = train_on_image(
        &staged[cfg.train_index].0.complemented,
        &train_sample.truth,
        cfg,
    )?;

    let images: Vec<SegmentedImage> = pool.install(|| {
        samples
            .par_iter()
            .zip(staged.into_par_iter())
            .map(|(s, (stages, preprocess_s))| {
                let (prediction, predict_s) =
                    timed(|| mlp::predict_image(&params, &stages.complemented, cfg.mlp_window));
                Ok(SegmentedImage {
                    id: s.id.clone(),
                    stages,
                    prediction: prediction?,
                    preprocess_s,
                    predict_s,
                })
            })
            .collect::<Result<_, PipelineError>>()
    })?;

    let diagnostics = split_diagnostics(
        &history,
        &images[cfg.train_index].prediction,
        &train_sample.truth,
    );

    let mut results = Vec::new();
    for (i, (s, seg)) in samples.iter().zip(&images).enumerate() {
        if cfg.eval_split == EvalSplit::HeldOut && i == cfg.train_index {
            continue;
        }
        let mask = if cfg.use_mask { s.mask.as_ref() } else { None };
        let counts = eval::confusion(&seg.prediction.labels, &s.truth, mask)?;
        results.push(ImageResult::new(s.id.clone(), counts, seg.runtime_s())?);
    }
    let report = eval::report(&results)?;
    let segmentation_s = images.iter().map(SegmentedImage::runtime_s).sum();
    Ok(Experiment {
        params,
        history,
        train_id: train_sample.id.clone(),
        diagnostics,
        images,
        results,
        report,
        segmentation_s,
    })
}

/// ROC points of every split as CSV rows `split,fpr,tpr`.
pub fn roc_csv(diagnostics: &[SplitDiagnostics]) -> Vec<u8> {
    let mut rows = vec![vec!["split".to_string(), "fpr".into(), "tpr".into()]];
    for d in diagnostics {
        if let Some(roc) = &d.roc {
            rows.extend(roc.to_csv_rows(d.name));
        }
    }
    crate::imagio::write_csv(&rows)
}

/// Per-split confusion counts and ROC AUC as CSV.
pub fn confusion_csv(diagnostics: &[SplitDiagnostics]) -> Vec<u8> {
    let mut rows = vec![["split", "tp", "tn", "fp", "fn", "accuracy", "auc"]
        .map(String::from)
        .to_vec()];
    for d in diagnostics {
        let c = d.counts;
        rows.push(vec![
            d.name.to_string(),
            c.tp.to_string(),
            c.tn.to_string(),
            c.fp.to_string(),
            c.fn_.to_string(),
            c.accuracy().map(|a| format!("{a:.4}")).unwrap_or_default(),
            d.roc
                .as_ref()
                .map(|r| format!("{:.4}", r.auc))
                .unwrap_or_default(),
        ]);
    }
    crate::imagio::write_csv(&rows)
}
