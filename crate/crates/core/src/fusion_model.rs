//! Per-cell fusion classifier.
//!
//! A one-hidden-layer network over standardized multi-scale features:
//! `softmax(W2 · relu(W1 · (x − μ) / σ + b1) + b2)`. Training minimizes the
//! cross-entropy weighted per cell by pseudo-label confidence and normalized
//! by the total weight, using plain minibatch SGD with hand-derived
//! gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bev_grid::BevGrid;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::pseudo_label::PseudoLabelGrid;
use crate::{argmax, rng, VOID};

/// Lower clamp applied to probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Smallest standard deviation kept by the feature standardization.
pub const MIN_FEATURE_STD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparams {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub batch_cells: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            lr: 0.05,
            epochs: 30,
            seed: 0,
            hidden: 32,
            batch_cells: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub num_classes: usize,
    pub hidden: usize,
    /// `hidden × dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `num_classes × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub hyper: Hyperparams,
}

/// Gradient of the loss with respect to every field of [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl Gradients {
    fn zeros(p: &ModelParams) -> Self {
        Gradients {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
            feature_mean: vec![0.0; p.dim],
            feature_std: vec![0.0; p.dim],
        }
    }

    fn scale(&mut self, s: f64) {
        for v in self.fields_mut().into_iter().flat_map(|f| f.iter_mut()) {
            *v *= s;
        }
    }

    fn fields_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.feature_mean,
            &mut self.feature_std,
        ]
    }

    pub fn fields(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("feature_mean", &self.feature_mean),
            ("feature_std", &self.feature_std),
        ]
    }
}

fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-uniform weights, zero biases, identity standardization.
pub fn init(dim: usize, num_classes: usize, hidden: usize, seed: u64) -> Result<ModelParams> {
    if dim == 0 || num_classes == 0 || hidden == 0 {
        return Err(Error::InvalidParameter(format!(
            "model dimensions must be positive (D={dim}, K={num_classes}, hidden={hidden})"
        )));
    }
    let mut prng = rng::seeded(seed);
    let b1 = xavier_bound(dim, hidden);
    let w1 = (0..hidden * dim).map(|_| prng.random_range(-b1..=b1)).collect();
    let b2 = xavier_bound(hidden, num_classes);
    let w2 = (0..num_classes * hidden).map(|_| prng.random_range(-b2..=b2)).collect();
    Ok(ModelParams {
        dim,
        num_classes,
        hidden,
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; num_classes],
        feature_mean: vec![0.0; dim],
        feature_std: vec![1.0; dim],
        hyper: Hyperparams {
            seed,
            hidden,
            ..Default::default()
        },
    })
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let (d, k, h) = (self.dim, self.num_classes, self.hidden);
        let shapes = [
            ("w1", self.w1.len(), h * d),
            ("b1", self.b1.len(), h),
            ("w2", self.w2.len(), k * h),
            ("b2", self.b2.len(), k),
            ("feature_mean", self.feature_mean.len(), d),
            ("feature_std", self.feature_std.len(), d),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::DimensionMismatch(format!("{name} has {got} entries, expected {want}")));
            }
        }
        let all = [&self.w1, &self.b1, &self.w2, &self.b2, &self.feature_mean, &self.feature_std];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        if self.feature_std.iter().any(|s| *s < MIN_FEATURE_STD) {
            return Err(Error::InvalidParameter(format!("feature std below {MIN_FEATURE_STD:e}")));
        }
        Ok(())
    }

    /// Class probabilities for one raw feature vector.
    pub fn forward_cell(&self, x: &[f64]) -> Vec<f64> {
        let mut scratch = Scratch::new(self);
        scratch.forward(self, x);
        scratch.probs
    }

    /// Sets the standardization to the per-feature mean and population
    /// standard deviation over the cells of `batch` with positive weight.
    /// Constant features keep a unit scale.
    pub fn fit_standardization(&mut self, batch: &TrainBatch) -> Result<()> {
        if batch.dim != self.dim {
            return Err(Error::DimensionMismatch(format!("batch has {} features, model expects {}", batch.dim, self.dim)));
        }
        let cells: Vec<usize> = (0..batch.len()).filter(|&i| batch.weights[i] > 0.0).collect();
        if cells.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = cells.len() as f64;
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for &i in &cells {
            for (m, x) in mean.iter_mut().zip(batch.cell(i)) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in &cells {
            for ((v, x), m) in var.iter_mut().zip(batch.cell(i)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        self.feature_std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < MIN_FEATURE_STD { 1.0 } else { s }
            })
            .collect();
        self.feature_mean = mean;
        Ok(())
    }
}

struct Scratch {
    xhat: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    probs: Vec<f64>,
    dlogits: Vec<f64>,
    dact: Vec<f64>,
    dxhat: Vec<f64>,
}

impl Scratch {
    fn new(p: &ModelParams) -> Self {
        Scratch {
            xhat: vec![0.0; p.dim],
            pre: vec![0.0; p.hidden],
            act: vec![0.0; p.hidden],
            probs: vec![0.0; p.num_classes],
            dlogits: vec![0.0; p.num_classes],
            dact: vec![0.0; p.hidden],
            dxhat: vec![0.0; p.dim],
        }
    }

    fn forward(&mut self, p: &ModelParams, x: &[f64]) {
        for j in 0..p.dim {
            self.xhat[j] = (x[j] - p.feature_mean[j]) / p.feature_std[j];
        }
        for h in 0..p.hidden {
            let row = &p.w1[h * p.dim..(h + 1) * p.dim];
            let a = row.iter().zip(&self.xhat).map(|(w, x)| w * x).sum::<f64>() + p.b1[h];
            self.pre[h] = a;
            self.act[h] = a.max(0.0);
        }
        for k in 0..p.num_classes {
            let row = &p.w2[k * p.hidden..(k + 1) * p.hidden];
            self.probs[k] = row.iter().zip(&self.act).map(|(w, a)| w * a).sum::<f64>() + p.b2[k];
        }
        softmax_in_place(&mut self.probs);
    }
}

/// Numerically stable softmax (max subtracted before exponentiation).
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities for every cell, as a `K`-channel grid.
pub fn forward_grid(params: &ModelParams, features: &FeatureGrid) -> Result<BevGrid> {
    if features.channels() != params.dim {
        return Err(Error::DimensionMismatch(format!(
            "feature grid has {} channels, model expects {}",
            features.channels(),
            params.dim
        )));
    }
    let spec = *features.spec();
    let n = spec.num_cells();
    let k = params.num_classes;
    let mut out = BevGrid::zeros(spec, k);
    let mut scratch = Scratch::new(params);
    let mut x = vec![0.0; params.dim];
    let src = features.grid.values();
    let dst = out.values_mut();
    for idx in 0..n {
        for (j, v) in x.iter_mut().enumerate() {
            *v = src[j * n + idx];
        }
        scratch.forward(params, &x);
        for c in 0..k {
            dst[c * n + idx] = scratch.probs[c];
        }
    }
    Ok(out)
}

/// `Σ w·(−ln p[y]) / Σ w` over cells of a `K × cells` probability layout;
/// zero when all weights are zero.
pub fn weighted_ce_loss(probs: &[f64], num_classes: usize, labels: &[u8], weights: &[f64]) -> Result<f64> {
    let n = labels.len();
    if weights.len() != n || probs.len() != n * num_classes {
        return Err(Error::DimensionMismatch(format!(
            "{} probabilities, {n} labels and {} weights for {num_classes} classes",
            probs.len(),
            weights.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..n {
        let w = weights[c];
        if w <= 0.0 {
            continue;
        }
        let y = labels[c] as usize;
        if y >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes,
            });
        }
        num += w * -probs[y * n + c].max(PROB_FLOOR).ln();
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Cell-major training examples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub dim: usize,
    /// `cells × dim`.
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub weights: Vec<f64>,
}

impl TrainBatch {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u8>, weights: Vec<f64>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        if weights.len() != n || features.len() != n * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} features, {n} labels and {} weights for dimension {dim}",
                features.len(),
                weights.len()
            )));
        }
        for (l, w) in labels.iter().zip(&weights) {
            if !(0.0..=1.0).contains(w) {
                return Err(Error::InvalidParameter(format!("cell weight {w} outside [0, 1]")));
            }
            if *w > 0.0 && *l as usize >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: *l as usize,
                    num_classes,
                });
            }
        }
        Ok(TrainBatch {
            dim,
            features,
            labels,
            weights,
        })
    }

    /// Cells of a feature grid with per-cell labels and weights. Cells with
    /// zero weight are dropped.
    pub fn from_grid(features: &FeatureGrid, labels: &[u8], weights: &[f64], num_classes: usize) -> Result<Self> {
        let n = features.spec().num_cells();
        if labels.len() != n || weights.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} labels and {} weights for {n} cells",
                labels.len(),
                weights.len()
            )));
        }
        let dim = features.channels();
        let src = features.grid.values();
        let mut out_f = Vec::new();
        let mut out_l = Vec::new();
        let mut out_w = Vec::new();
        for idx in 0..n {
            if weights[idx] <= 0.0 {
                continue;
            }
            out_f.extend((0..dim).map(|j| src[j * n + idx]));
            out_l.push(labels[idx]);
            out_w.push(weights[idx]);
        }
        TrainBatch::new(dim, out_f, out_l, out_w, num_classes)
    }

    /// Pseudo-label targets weighted by their confidence.
    pub fn from_pseudo(features: &FeatureGrid, labels: &PseudoLabelGrid) -> Result<Self> {
        TrainBatch::from_grid(features, &labels.label, &labels.weight, labels.num_classes)
    }

    /// Every non-void cell with unit weight.
    pub fn from_labels(features: &FeatureGrid, labels: &[u8], num_classes: usize) -> Result<Self> {
        let weights: Vec<f64> = labels.iter().map(|&l| if l == VOID { 0.0 } else { 1.0 }).collect();
        TrainBatch::from_grid(features, labels, &weights, num_classes)
    }

    pub fn concat(batches: &[TrainBatch]) -> Result<Self> {
        let dim = batches.first().ok_or(Error::EmptyDataset)?.dim;
        let mut out = TrainBatch {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
            weights: Vec::new(),
        };
        for b in batches {
            if b.dim != dim {
                return Err(Error::DimensionMismatch(format!("batch dimensions {} and {dim}", b.dim)));
            }
            out.features.extend_from_slice(&b.features);
            out.labels.extend_from_slice(&b.labels);
            out.weights.extend_from_slice(&b.weights);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Weighted loss and its gradient over `cells`; the standardization
/// gradients are skipped unless `with_standardization`.
fn loss_and_grad_over(
    params: &ModelParams,
    batch: &TrainBatch,
    cells: &[usize],
    with_standardization: bool,
    grads: &mut Gradients,
    scratch: &mut Scratch,
) -> f64 {
    for f in grads.fields_mut() {
        f.iter_mut().for_each(|v| *v = 0.0);
    }
    let total_w: f64 = cells.iter().map(|&i| batch.weights[i]).filter(|w| *w > 0.0).sum();
    if total_w <= 0.0 {
        return 0.0;
    }
    let (d, h, k) = (params.dim, params.hidden, params.num_classes);
    let mut loss = 0.0;
    for &i in cells {
        let w = batch.weights[i];
        if w <= 0.0 {
            continue;
        }
        let x = batch.cell(i);
        let y = batch.labels[i] as usize;
        scratch.forward(params, x);
        let py = scratch.probs[y];
        loss += w * -py.max(PROB_FLOOR).ln();
        if py < PROB_FLOOR {
            // clamped: the loss is locally flat
            continue;
        }
        for c in 0..k {
            scratch.dlogits[c] = w * (scratch.probs[c] - if c == y { 1.0 } else { 0.0 });
        }
        scratch.dact.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..k {
            let g = scratch.dlogits[c];
            grads.b2[c] += g;
            let w2_row = &params.w2[c * h..(c + 1) * h];
            let gw2_row = &mut grads.w2[c * h..(c + 1) * h];
            for j in 0..h {
                gw2_row[j] += g * scratch.act[j];
                scratch.dact[j] += g * w2_row[j];
            }
        }
        if with_standardization {
            scratch.dxhat.iter_mut().for_each(|v| *v = 0.0);
        }
        for j in 0..h {
            if scratch.pre[j] <= 0.0 {
                continue;
            }
            let g = scratch.dact[j];
            grads.b1[j] += g;
            let gw1_row = &mut grads.w1[j * d..(j + 1) * d];
            for (gw, xh) in gw1_row.iter_mut().zip(&scratch.xhat) {
                *gw += g * xh;
            }
            if with_standardization {
                let w1_row = &params.w1[j * d..(j + 1) * d];
                for (dx, wv) in scratch.dxhat.iter_mut().zip(w1_row) {
                    *dx += g * wv;
                }
            }
        }
        if with_standardization {
            for m in 0..d {
                let s = params.feature_std[m];
                grads.feature_mean[m] -= scratch.dxhat[m] / s;
                grads.feature_std[m] -= scratch.dxhat[m] * (x[m] - params.feature_mean[m]) / (s * s);
            }
        }
    }
    grads.scale(1.0 / total_w);
    loss / total_w
}

/// Normalized weighted cross-entropy of the whole batch and its gradient
/// with respect to every model parameter.
pub fn loss_and_grad(params: &ModelParams, batch: &TrainBatch) -> Result<(f64, Gradients)> {
    check_batch(params, batch)?;
    let cells: Vec<usize> = (0..batch.len()).collect();
    let mut grads = Gradients::zeros(params);
    let mut scratch = Scratch::new(params);
    let loss = loss_and_grad_over(params, batch, &cells, true, &mut grads, &mut scratch);
    Ok((loss, grads))
}

/// Loss only.
pub fn batch_loss(params: &ModelParams, batch: &TrainBatch) -> Result<f64> {
    check_batch(params, batch)?;
    let mut scratch = Scratch::new(params);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..batch.len() {
        let w = batch.weights[i];
        if w <= 0.0 {
            continue;
        }
        scratch.forward(params, batch.cell(i));
        num += w * -scratch.probs[batch.labels[i] as usize].max(PROB_FLOOR).ln();
        den += w;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

fn check_batch(params: &ModelParams, batch: &TrainBatch) -> Result<()> {
    if batch.dim != params.dim {
        return Err(Error::DimensionMismatch(format!(
            "batch has {} features, model expects {}",
            batch.dim, params.dim
        )));
    }
    for (l, w) in batch.labels.iter().zip(&batch.weights) {
        if *w > 0.0 && *l as usize >= params.num_classes {
            return Err(Error::LabelOutOfRange {
                label: *l as usize,
                num_classes: params.num_classes,
            });
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_cells: usize,
    pub seed: u64,
}

impl From<&Hyperparams> for TrainConfig {
    fn from(h: &Hyperparams) -> Self {
        TrainConfig {
            epochs: h.epochs,
            lr: h.lr,
            batch_cells: h.batch_cells,
            seed: h.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss over the whole dataset after each epoch.
    pub loss_trace: Vec<f64>,
}

/// Minibatch SGD. The standardization is fit on `dataset` first; cell order
/// is reshuffled every epoch from a stream seeded by `config.seed`.
pub fn train(params: &ModelParams, dataset: &TrainBatch, config: &TrainConfig) -> Result<TrainOutcome> {
    check_batch(params, dataset)?;
    if !dataset.weights.iter().any(|w| *w > 0.0) {
        return Err(Error::EmptyDataset);
    }
    if config.batch_cells == 0 {
        return Err(Error::InvalidParameter("batch size must be positive".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidParameter(format!("learning rate {} must be >= 0", config.lr)));
    }
    let mut p = params.clone();
    p.fit_standardization(dataset)?;
    p.hyper = Hyperparams {
        lr: config.lr,
        epochs: config.epochs,
        seed: config.seed,
        hidden: p.hidden,
        batch_cells: config.batch_cells,
    };
    let mut order: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.weights[i] > 0.0).collect();
    let mut prng = rng::stream(config.seed, &[0x7261_696e]);
    let mut grads = Gradients::zeros(&p);
    let mut scratch = Scratch::new(&p);
    let mut trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut prng);
        for chunk in order.chunks(config.batch_cells) {
            loss_and_grad_over(&p, dataset, chunk, false, &mut grads, &mut scratch);
            sgd_step(&mut p.w1, &grads.w1, config.lr);
            sgd_step(&mut p.b1, &grads.b1, config.lr);
            sgd_step(&mut p.w2, &grads.w2, config.lr);
            sgd_step(&mut p.b2, &grads.b2, config.lr);
        }
        trace.push(batch_loss(&p, dataset)?);
    }
    Ok(TrainOutcome {
        params: p,
        loss_trace: trace,
    })
}

fn sgd_step(param: &mut [f64], grad: &[f64], lr: f64) {
    for (p, g) in param.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub confidence: Vec<f64>,
    pub probs: BevGrid,
}

/// Dense argmax labels (ties to the lowest class) with max-probability
/// confidence.
pub fn predict_grid(params: &ModelParams, features: &FeatureGrid) -> Result<Prediction> {
    let probs = forward_grid(params, features)?;
    let n = probs.spec().num_cells();
    let k = params.num_classes;
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    let mut p = vec![0.0; k];
    for idx in 0..n {
        for (c, v) in p.iter_mut().enumerate() {
            *v = probs.values()[c * n + idx];
        }
        let best = argmax(&p);
        labels.push(best as u8);
        confidence.push(p[best]);
    }
    Ok(Prediction {
        labels,
        confidence,
        probs,
    })
}
