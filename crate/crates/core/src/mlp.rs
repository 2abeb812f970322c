//! Per-pixel two-class classifier: one tanh hidden layer feeding a softmax
//! output, trained full-batch with iRprop− and validation early stopping.
//!
//! Parameters live in one flat vector laid out as `[w1 | b1 | w2 | b2]`, with
//! `w1` (`hidden × input`) and `w2` (`2 × hidden`) row-major. Gradients share
//! the same layout, which keeps the optimizer a plain elementwise loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imagio::BinaryImage;

pub const MODEL_MAGIC: &str = "retseg-mlp";
pub const MODEL_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("feature window {0} must be odd")]
    EvenWindow(usize),
    #[error("{0} samples supplied, at least 20 required")]
    TooFewSamples(usize),
    #[error("training partition contains a single class")]
    SingleClassTraining,
    #[error("empty batch")]
    EmptyBatch,
    #[error("parameter and gradient shapes disagree")]
    ShapeMismatch,
    #[error("model expects {expected} inputs, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {0} is not a class index (0 or 1)")]
    BadLabel(u8),
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("model file: {0}")]
    Parse(String),
}

/// Weights and biases of the `input → hidden (tanh) → 2 (softmax)` network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    input_dim: usize,
    hidden_dim: usize,
    values: Vec<f64>,
}

impl MlpParams {
    fn parameter_count(input_dim: usize, hidden_dim: usize) -> usize {
        hidden_dim * input_dim + hidden_dim + 2 * hidden_dim + 2
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            values: vec![0.0; Self::parameter_count(input_dim, hidden_dim)],
        }
    }

    pub fn from_values(
        input_dim: usize,
        hidden_dim: usize,
        values: Vec<f64>,
    ) -> Result<Self, MlpError> {
        if input_dim == 0 || hidden_dim == 0 {
            return Err(MlpError::InvalidConfig("dimensions must be at least 1"));
        }
        if values.len() != Self::parameter_count(input_dim, hidden_dim) {
            return Err(MlpError::ShapeMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MlpError::InvalidConfig("parameters must be finite"));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            values,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden_dim * self.input_dim;
        let w2 = b1 + self.hidden_dim;
        let b2 = w2 + 2 * self.hidden_dim;
        (b1, w2, b2)
    }

    pub fn w1(&self) -> &[f64] {
        &self.values[..self.offsets().0]
    }

    pub fn b1(&self) -> &[f64] {
        let (b1, w2, _) = self.offsets();
        &self.values[b1..w2]
    }

    pub fn w2(&self) -> &[f64] {
        let (_, w2, b2) = self.offsets();
        &self.values[w2..b2]
    }

    pub fn b2(&self) -> &[f64] {
        &self.values[self.offsets().2..]
    }

    fn same_shape(&self, other: &MlpParams) -> bool {
        self.input_dim == other.input_dim && self.hidden_dim == other.hidden_dim
    }

    /// Serializes as the `retseg-mlp v1` text format.
    pub fn to_text(&self) -> String {
        let row = |vals: &[f64]| {
            vals.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut out = format!(
            "{MODEL_MAGIC} {MODEL_VERSION} {} {}\n",
            self.input_dim, self.hidden_dim
        );
        for r in self.w1().chunks(self.input_dim) {
            out.push_str(&row(r));
            out.push('\n');
        }
        out.push_str(&row(self.b1()));
        out.push('\n');
        for r in self.w2().chunks(self.hidden_dim) {
            out.push_str(&row(r));
            out.push('\n');
        }
        out.push_str(&row(self.b2()));
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<Self, MlpError> {
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [magic, version, input, hidden] = fields[..] else {
            return Err(MlpError::Parse(
                "header must be `retseg-mlp v1 <input> <hidden>`".into(),
            ));
        };
        if magic != MODEL_MAGIC {
            return Err(MlpError::Parse(format!("unknown magic `{magic}`")));
        }
        if version != MODEL_VERSION {
            return Err(MlpError::Parse(format!("unsupported version `{version}`")));
        }
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| MlpError::Parse(format!("bad dimension `{s}`")))
        };
        let (input_dim, hidden_dim) = (dim(input)?, dim(hidden)?);
        let values = body
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| MlpError::Parse(format!("bad number `{t}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let expected = Self::parameter_count(input_dim, hidden_dim);
        if values.len() != expected {
            return Err(MlpError::Parse(format!(
                "expected {expected} values, found {}",
                values.len()
            )));
        }
        Self::from_values(input_dim, hidden_dim, values)
    }
}

/// Uniform `[−0.5, 0.5]` initialization from a seeded generator.
pub fn init_params(input_dim: usize, hidden_dim: usize, seed: u64) -> MlpParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut p = MlpParams::zeros(input_dim, hidden_dim);
    for v in p.values_mut() {
        *v = rng.random_range(-0.5..=0.5);
    }
    p
}

struct Activations {
    hidden: Vec<f64>,
    logits: [f64; 2],
}

fn activations(p: &MlpParams, x: &[f64]) -> Activations {
    let hidden: Vec<f64> = p
        .w1()
        .chunks_exact(p.input_dim)
        .zip(p.b1())
        .map(|(row, b)| (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b).tanh())
        .collect();
    let mut logits = [0.0; 2];
    for (k, (row, b)) in p.w2().chunks_exact(p.hidden_dim).zip(p.b2()).enumerate() {
        logits[k] = row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b;
    }
    Activations { hidden, logits }
}

fn softmax(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Class probabilities `(p(background), p(vessel))`.
///
/// Panics if `x` does not have `input_dim` entries.
pub fn forward(p: &MlpParams, x: &[f64]) -> [f64; 2] {
    assert_eq!(x.len(), p.input_dim, "feature length must equal input_dim");
    softmax(activations(p, x).logits)
}

/// Argmax class; an exact tie goes to class 0.
pub fn classify(probs: [f64; 2]) -> u8 {
    u8::from(probs[1] > probs[0])
}

/// Labelled samples with per-row multiplicities. Duplicate rows can be folded
/// into one weighted row without changing the mean loss or its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
    weights: Vec<f64>,
}

impl Samples {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self, MlpError> {
        let weights = vec![1.0; labels.len()];
        Self::weighted(dim, features, labels, weights)
    }

    pub fn weighted(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<u8>,
        weights: Vec<f64>,
    ) -> Result<Self, MlpError> {
        if dim == 0 || features.len() != dim * labels.len() || weights.len() != labels.len() {
            return Err(MlpError::ShapeMismatch);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(MlpError::BadLabel(bad));
        }
        Ok(Self {
            dim,
            features,
            labels,
            weights,
        })
    }

    /// Gathers `rows` of a feature matrix, merging identical `(features, label)`
    /// pairs. Row order of the result is deterministic.
    pub fn aggregate(
        dim: usize,
        features: &[f64],
        labels: &[u8],
        rows: &[usize],
    ) -> Result<Self, MlpError> {
        let mut groups: BTreeMap<(Vec<u64>, u8), f64> = BTreeMap::new();
        for &r in rows {
            let key: Vec<u64> = features[r * dim..(r + 1) * dim]
                .iter()
                .map(|v| v.to_bits())
                .collect();
            *groups.entry((key, labels[r])).or_insert(0.0) += 1.0;
        }
        let mut out_features = Vec::with_capacity(groups.len() * dim);
        let mut out_labels = Vec::with_capacity(groups.len());
        let mut weights = Vec::with_capacity(groups.len());
        for ((key, label), count) in groups {
            out_features.extend(key.into_iter().map(f64::from_bits));
            out_labels.push(label);
            weights.push(count);
        }
        Self::weighted(dim, out_features, out_labels, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of distinct rows.
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.contains(&0) && self.labels.contains(&1)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], u8, f64)> + '_ {
        (0..self.rows()).map(|i| (self.row(i), self.labels[i], self.weights[i]))
    }
}

/// Mean cross-entropy and misclassification rate without gradients.
pub fn evaluate(p: &MlpParams, batch: &Samples) -> (f64, f64) {
    let (mut loss, mut wrong) = (0.0, 0.0);
    for (x, label, weight) in batch.iter() {
        let z = activations(p, x).logits;
        loss += weight * cross_entropy(z, label);
        if classify(softmax(z)) != label {
            wrong += weight;
        }
    }
    let total = batch.total_weight();
    (loss / total, wrong / total)
}

fn cross_entropy(z: [f64; 2], label: u8) -> f64 {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    lse - z[usize::from(label)]
}

/// Mean cross-entropy over the batch and its gradient by backpropagation.
pub fn loss_and_grad(p: &MlpParams, batch: &Samples) -> Result<(f64, MlpParams), MlpError> {
    if batch.rows() == 0 {
        return Err(MlpError::EmptyBatch);
    }
    if batch.dim() != p.input_dim {
        return Err(MlpError::DimensionMismatch {
            expected: p.input_dim,
            got: batch.dim(),
        });
    }
    let (n_in, n_hid) = (p.input_dim, p.hidden_dim);
    let mut grad = MlpParams::zeros(n_in, n_hid);
    let (o_b1, o_w2, o_b2) = grad.offsets();
    let w2 = p.w2().to_vec();
    let mut loss = 0.0;
    let mut delta_hidden = vec![0.0; n_hid];
    for (x, label, weight) in batch.iter() {
        let act = activations(p, x);
        loss += weight * cross_entropy(act.logits, label);
        let probs = softmax(act.logits);
        let delta_out = [
            weight * (probs[0] - f64::from(u8::from(label == 0))),
            weight * (probs[1] - f64::from(label)),
        ];
        let g = grad.values_mut();
        for k in 0..2 {
            for (j, h) in act.hidden.iter().enumerate() {
                g[o_w2 + k * n_hid + j] += delta_out[k] * h;
            }
            g[o_b2 + k] += delta_out[k];
        }
        for (j, d) in delta_hidden.iter_mut().enumerate() {
            let back = w2[j] * delta_out[0] + w2[n_hid + j] * delta_out[1];
            *d = back * (1.0 - act.hidden[j] * act.hidden[j]);
        }
        for (j, &d) in delta_hidden.iter().enumerate() {
            for (i, &xi) in x.iter().enumerate() {
                g[j * n_in + i] += d * xi;
            }
            g[o_b1 + j] += d;
        }
    }
    let total = batch.total_weight();
    for v in grad.values_mut() {
        *v /= total;
    }
    Ok((loss / total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpropConfig {
    pub eta_plus: f64,
    pub eta_minus: f64,
    pub delta0: f64,
    pub delta_min: f64,
    pub delta_max: f64,
}

impl Default for RpropConfig {
    fn default() -> Self {
        Self {
            eta_plus: 1.2,
            eta_minus: 0.5,
            delta0: 0.07,
            delta_min: 1e-6,
            delta_max: 50.0,
        }
    }
}

impl RpropConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        if !(0.0 < self.eta_minus && self.eta_minus < 1.0 && 1.0 < self.eta_plus) {
            return Err(MlpError::InvalidConfig("need 0 < eta_minus < 1 < eta_plus"));
        }
        if !(0.0 < self.delta_min && self.delta_min <= self.delta0 && self.delta0 <= self.delta_max)
        {
            return Err(MlpError::InvalidConfig(
                "need 0 < delta_min <= delta0 <= delta_max",
            ));
        }
        Ok(())
    }
}

/// Per-weight step sizes and last gradients for iRprop−.
#[derive(Debug, Clone, PartialEq)]
pub struct RpropState {
    config: RpropConfig,
    steps: Vec<f64>,
    prev_grad: Vec<f64>,
}

impl RpropState {
    pub fn new(config: RpropConfig, params: &MlpParams) -> Self {
        let n = params.values().len();
        Self {
            config,
            steps: vec![config.delta0; n],
            prev_grad: vec![0.0; n],
        }
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn prev_grad(&self) -> &[f64] {
        &self.prev_grad
    }

    pub fn config(&self) -> &RpropConfig {
        &self.config
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One iRprop− update: grow the step while the gradient sign holds, shrink it
/// and skip the move on a sign change, then step against the gradient sign.
pub fn rprop_step(
    state: &mut RpropState,
    params: &mut MlpParams,
    grad: &MlpParams,
) -> Result<(), MlpError> {
    if !params.same_shape(grad) || state.steps.len() != params.values.len() {
        return Err(MlpError::ShapeMismatch);
    }
    let c = state.config;
    for (((w, &g), step), prev) in params
        .values
        .iter_mut()
        .zip(&grad.values)
        .zip(&mut state.steps)
        .zip(&mut state.prev_grad)
    {
        let mut g = g;
        let agreement = *prev * g;
        if agreement > 0.0 {
            *step = (*step * c.eta_plus).min(c.delta_max);
        } else if agreement < 0.0 {
            *step = (*step * c.eta_minus).max(c.delta_min);
            g = 0.0;
        }
        *w -= sign(g) * *step;
        *prev = g;
    }
    Ok(())
}

/// Disjoint train / validation / test index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut at `round(0.90 n)` and `round(0.95 n)`.
pub fn split_pixels(n: usize, seed: u64) -> Result<SplitIndices, MlpError> {
    if n < 20 {
        return Err(MlpError::TooFewSamples(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = |f: f64| (f * n as f64 + 0.5).floor() as usize;
    let (a, b) = (cut(0.90), cut(0.95));
    Ok(SplitIndices {
        test: idx[b..].to_vec(),
        val: idx[a..b].to_vec(),
        train: idx[..a].to_vec(),
    })
}

/// Row-major per-pixel feature matrix and the pixel each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFeatures {
    pub dim: usize,
    pub values: Vec<f64>,
    pub coords: Vec<(usize, usize)>,
}

impl PixelFeatures {
    pub fn rows(&self) -> usize {
        self.coords.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

/// One row per pixel in raster order: the flattened `window × window`
/// neighbourhood (edge-replicated), or just the pixel itself for `window = 1`.
pub fn pixel_features(img: &BinaryImage, window: usize) -> Result<PixelFeatures, MlpError> {
    if window.is_multiple_of(2) {
        return Err(MlpError::EvenWindow(window));
    }
    let r = (window / 2) as isize;
    let dim = window * window;
    let n = img.len();
    let mut values = Vec::with_capacity(n * dim);
    let mut coords = Vec::with_capacity(n);
    for y in 0..img.height() {
        for x in 0..img.width() {
            for dy in -r..=r {
                for dx in -r..=r {
                    values.push(f64::from(img.get_clamped(x as isize + dx, y as isize + dy)));
                }
            }
            coords.push((x, y));
        }
    }
    Ok(PixelFeatures {
        dim,
        values,
        coords,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub hidden_dim: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub rprop: RpropConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 21,
            hidden_dim: 10,
            max_epochs: 1000,
            patience: 6,
            rprop: RpropConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    ValidationStop,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::ValidationStop => "validation_stop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_ce: f64,
    pub val_ce: f64,
    pub test_ce: f64,
    pub train_err: f64,
    pub val_err: f64,
    pub test_err: f64,
}

/// Per-epoch metrics. Record 0 is the initial network; record `e` follows
/// the `e`-th update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop: StopReason,
    pub split: SplitIndices,
}

impl TrainHistory {
    /// Number of updates performed.
    pub fn epochs_run(&self) -> usize {
        self.records.len() - 1
    }

    pub fn best(&self) -> &EpochRecord {
        &self.records[self.best_epoch]
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut rows = vec![vec![
            "epoch".to_string(),
            "train_ce".into(),
            "val_ce".into(),
            "test_ce".into(),
            "train_err".into(),
            "val_err".into(),
            "test_err".into(),
        ]];
        for r in &self.records {
            rows.push(vec![
                r.epoch.to_string(),
                r.train_ce.to_string(),
                r.val_ce.to_string(),
                r.test_ce.to_string(),
                r.train_err.to_string(),
                r.val_err.to_string(),
                r.test_err.to_string(),
            ]);
        }
        crate::imagio::write_csv(&rows)
    }
}

/// Trains on a random 90/5/5 split of the rows and returns the parameters of
/// the epoch with the lowest validation cross-entropy.
pub fn train(
    dim: usize,
    features: &[f64],
    labels: &[u8],
    config: &TrainConfig,
) -> Result<(MlpParams, TrainHistory), MlpError> {
    config.rprop.validate()?;
    if config.hidden_dim == 0 || dim == 0 {
        return Err(MlpError::InvalidConfig("dimensions must be at least 1"));
    }
    if features.len() != dim * labels.len() {
        return Err(MlpError::ShapeMismatch);
    }
    let split = split_pixels(labels.len(), config.seed)?;
    let train_set = Samples::aggregate(dim, features, labels, &split.train)?;
    let val_set = Samples::aggregate(dim, features, labels, &split.val)?;
    let test_set = Samples::aggregate(dim, features, labels, &split.test)?;
    if !train_set.has_both_classes() {
        return Err(MlpError::SingleClassTraining);
    }

    let mut params = init_params(dim, config.hidden_dim, config.seed);
    let mut state = RpropState::new(config.rprop, &params);
    let record = |epoch: usize, p: &MlpParams| {
        let (train_ce, train_err) = evaluate(p, &train_set);
        let (val_ce, val_err) = evaluate(p, &val_set);
        let (test_ce, test_err) = evaluate(p, &test_set);
        EpochRecord {
            epoch,
            train_ce,
            val_ce,
            test_ce,
            train_err,
            val_err,
            test_err,
        }
    };

    let mut records = vec![record(0, &params)];
    let mut best = (0, records[0].val_ce, params.clone());
    let mut stop = StopReason::MaxEpochs;
    for epoch in 1..=config.max_epochs {
        let (_, grad) = loss_and_grad(&params, &train_set)?;
        rprop_step(&mut state, &mut params, &grad)?;
        let r = record(epoch, &params);
        records.push(r);
        if r.val_ce < best.1 {
            best = (epoch, r.val_ce, params.clone());
        } else if epoch - best.0 >= config.patience {
            stop = StopReason::ValidationStop;
            break;
        }
    }
    Ok((
        best.2,
        TrainHistory {
            records,
            best_epoch: best.0,
            stop,
            split,
        },
    ))
}

/// Per-pixel labels and vessel-class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: BinaryImage,
    pub scores: Vec<f64>,
}

pub fn predict_image(
    p: &MlpParams,
    img: &BinaryImage,
    window: usize,
) -> Result<Prediction, MlpError> {
    if window.is_multiple_of(2) {
        return Err(MlpError::EvenWindow(window));
    }
    if window * window != p.input_dim {
        return Err(MlpError::DimensionMismatch {
            expected: p.input_dim,
            got: window * window,
        });
    }
    let feats = pixel_features(img, window)?;
    // binary inputs admit few distinct rows; evaluate each once
    let mut cache: BTreeMap<Vec<u64>, [f64; 2]> = BTreeMap::new();
    let mut labels = Vec::with_capacity(feats.rows());
    let mut scores = Vec::with_capacity(feats.rows());
    for i in 0..feats.rows() {
        let row = feats.row(i);
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let probs = *cache.entry(key).or_insert_with(|| forward(p, row));
        labels.push(classify(probs));
        scores.push(probs[1]);
    }
    Ok(Prediction {
        labels: BinaryImage::new(img.width(), img.height(), labels).expect("labels are 0/1"),
        scores,
    })
}
