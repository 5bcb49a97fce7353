//! Sample-quality scoring. A small softmax classifier is trained locally on
//! the labeled dataset, and generated images are scored by the exponentiated
//! mean KL divergence between each sample's class posterior and the marginal
//! over a split — confident, diverse samples score high; collapsed or
//! ambiguous ones score near 1. The score of `n` samples under a `C`-class
//! classifier always lands in [1, C].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, shuffled_indices};
use crate::error::{Error, Result};
use crate::nn::{BoundLinear, BoundTrunk, ConvTrunk, Leafer, LinearLayer, ParamBindings, Resample, record_leaves};
use crate::tensor::{Adam, Graph, Tensor, VarId};
use crate::train::apply_phase;

/// Canonical parameter-name prefix for the classifier.
pub const PREFIX_CLASSIFIER: &str = "clf";

/// RNG stream for classifier weight init, disjoint from the trainer's streams.
const INIT_STREAM: u64 = 5 << 56;

/// Rows scored per forward pass when running the classifier in inference.
const PREDICT_CHUNK: usize = 128;

// ---- classifier ------------------------------------------------------------

/// Three halving conv stages followed by an affine head over the flattened
/// feature grid. Same trunk shape as the model encoders, separate parameters.
pub struct Classifier {
    pub trunk: ConvTrunk<f32>,
    pub head: LinearLayer<f32>,
    image_size: usize,
    channels: usize,
    classes: usize,
    inner_width: usize,
}

impl Classifier {
    pub fn new<R: rand::Rng + ?Sized>(
        rng: &mut R,
        image_size: usize,
        channels: usize,
        classes: usize,
        widths: [usize; 3],
    ) -> Self {
        let [w1, w2, w3] = widths;
        let side = image_size / 8;
        Classifier {
            trunk: ConvTrunk::new(rng, &[channels, w1, w2, w3], Resample::Halve),
            head: LinearLayer::new(rng, w3 * side * side, classes),
            image_size,
            channels,
            classes,
            inner_width: w3,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bind(&self, graph: &mut Graph<f32>, reg: &mut ParamBindings) -> BoundClassifier {
        self.bind_with(graph, &mut record_leaves(reg))
    }

    pub fn bind_with(&self, graph: &mut Graph<f32>, leafer: &mut Leafer<f32>) -> BoundClassifier {
        BoundClassifier {
            trunk: self.trunk.bind_with(graph, &format!("{PREFIX_CLASSIFIER}.trunk"), leafer),
            head: self.head.bind_with(graph, &format!("{PREFIX_CLASSIFIER}.head"), leafer),
            image_size: self.image_size,
            channels: self.channels,
            inner_width: self.inner_width,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f32>)) {
        self.trunk.visit(&format!("{PREFIX_CLASSIFIER}.trunk"), f);
        self.head.visit(&format!("{PREFIX_CLASSIFIER}.head"), f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.trunk.visit_mut(&format!("{PREFIX_CLASSIFIER}.trunk"), f);
        self.head.visit_mut(&format!("{PREFIX_CLASSIFIER}.head"), f);
    }

    /// Class posteriors for a batch of images, one probability row per
    /// sample. Rows are softmax outputs computed in f64, so each sums to 1
    /// up to rounding. Large batches are forwarded in chunks.
    pub fn predict_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f64>> {
        if x.rank() != 4 {
            return Err(Error::Dimension(format!(
                "classifier expects [B,C,S,S] images, got {:?}",
                x.shape()
            )));
        }
        let batch = x.dim(0);
        let row = x.dim(1) * x.dim(2) * x.dim(3);
        let mut out = Vec::with_capacity(batch * self.classes);
        let mut lo = 0;
        while lo < batch {
            let hi = (lo + PREDICT_CHUNK).min(batch);
            let chunk = Tensor::new(
                vec![hi - lo, x.dim(1), x.dim(2), x.dim(3)],
                x.data()[lo * row..hi * row].to_vec(),
            )?;
            let logits = self.logits(&chunk)?;
            for r in 0..hi - lo {
                out.extend(softmax_row(&logits.data()[r * self.classes..(r + 1) * self.classes]));
            }
            lo = hi;
        }
        Tensor::new(vec![batch, self.classes], out)
    }

    /// Raw (pre-softmax) class scores for a batch.
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut graph = Graph::new();
        let mut reg = ParamBindings::new();
        let bound = self.bind(&mut graph, &mut reg);
        let xv = graph.constant(x.clone());
        let y = bound.logits(&mut graph, xv)?;
        Ok(graph.value(y).clone())
    }
}

pub struct BoundClassifier {
    trunk: BoundTrunk,
    head: BoundLinear,
    image_size: usize,
    channels: usize,
    inner_width: usize,
}

impl BoundClassifier {
    pub fn logits(&self, graph: &mut Graph<f32>, x: VarId) -> Result<VarId> {
        let shape = graph.value(x).shape().to_vec();
        if shape.len() != 4
            || shape[1] != self.channels
            || shape[2] != self.image_size
            || shape[3] != self.image_size
        {
            return Err(Error::Dimension(format!(
                "classifier expects [B,{},{},{}], got {shape:?}",
                self.channels, self.image_size, self.image_size
            )));
        }
        let h = self.trunk.apply(graph, x)?;
        let side = self.image_size / 8;
        let flat = graph.reshape(h, vec![shape[0], self.inner_width * side * side])?;
        self.head.apply(graph, flat)
    }
}

/// Numerically stable softmax of one logit row, widened to f64.
fn softmax_row(logits: &[f32]) -> Vec<f64> {
    let top = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

// ---- classifier training -----------------------------------------------------

pub struct ClassifierConfig {
    pub widths: [usize; 3],
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            widths: [8, 16, 32],
            learning_rate: 1e-3,
            epochs: 10,
            batch: 32,
            seed: 1,
            holdout_fraction: 0.2,
        }
    }
}

impl ClassifierConfig {
    fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Usage("classifier widths must be nonzero".into()));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Usage("classifier epochs and batch must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Usage(format!(
                "classifier learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Usage(format!(
                "classifier holdout fraction must be in [0,1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// A trained classifier plus the accuracy it reached on the held-out rows.
pub struct TrainedClassifier {
    pub model: Classifier,
    pub holdout_accuracy: f64,
}

/// Trains a softmax classifier on `dataset` with one integer label per image.
/// Deterministic for a fixed config: same seed, same weights, same accuracy.
/// The returned report carries the held-out accuracy actually reached — the
/// caller decides whether it is good enough for scoring.
pub fn train_classifier(
    dataset: &Dataset,
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if labels.len() != dataset.len() {
        return Err(Error::Usage(format!(
            "{} labels for {} images",
            labels.len(),
            dataset.len()
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    for &l in labels {
        seen[l] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Usage("classifier training needs at least two classes".into()));
    }
    let size = dataset.image_size();
    if size < 8 || !size.is_multiple_of(8) {
        return Err(Error::Usage(format!(
            "classifier image size must be a positive multiple of 8, got {size}"
        )));
    }

    let (train_idx, holdout_idx) = dataset.split_holdout(cfg.holdout_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::Usage("no training rows left after the holdout split".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(INIT_STREAM);
    let mut model = Classifier::new(&mut rng, size, dataset.channels(), classes, cfg.widths);
    let mut optimizer: Adam<f32> = Adam::new(cfg.learning_rate as f32);
    let batch = cfg.batch.min(train_idx.len());

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(cfg.seed, epoch as u64, train_idx.len());
        for slots in order.chunks(batch) {
            let rows: Vec<usize> = slots.iter().map(|&s| train_idx[s]).collect();
            let x = dataset.batch(&rows)?;
            let y: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();

            let mut graph = Graph::new();
            let mut reg = ParamBindings::new();
            let bound = model.bind(&mut graph, &mut reg);
            let xv = graph.constant(x);
            let logits = bound.logits(&mut graph, xv)?;
            let loss = graph.softmax_cross_entropy(logits, &y)?;
            let value = graph.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "classifier loss became non-finite ({value}) in epoch {epoch}"
                )));
            }
            graph.backward(loss)?;
            apply_phase(&mut optimizer, &graph, &reg, PREFIX_CLASSIFIER, &mut |f| {
                model.visit_mut(f)
            })?;
        }
    }

    let eval_idx = if holdout_idx.is_empty() { &train_idx } else { &holdout_idx };
    let holdout_accuracy = classification_accuracy(&model, dataset, eval_idx, labels)?;
    Ok(TrainedClassifier { model, holdout_accuracy })
}

/// Fraction of `indices` whose argmax class matches its label. Ties break
/// toward the lowest class index.
pub fn classification_accuracy(
    model: &Classifier,
    dataset: &Dataset,
    indices: &[usize],
    labels: &[usize],
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::Usage("accuracy over an empty index set".into()));
    }
    let mut hits = 0usize;
    for rows in indices.chunks(PREDICT_CHUNK) {
        let x = dataset.batch(rows)?;
        let probs = model.predict_probs(&x)?;
        let c = probs.dim(1);
        for (r, &row_index) in rows.iter().enumerate() {
            let row = &probs.data()[r * c..(r + 1) * c];
            let best = row
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc })
                .0;
            if best == labels[row_index] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / indices.len() as f64)
}

// ---- scoring -------------------------------------------------------------------

/// Outcome of scoring one set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    /// Mean of the per-split scores.
    pub score: f64,
    pub split_scores: Vec<f64>,
    pub splits: usize,
    pub samples: usize,
}

impl ScoreReport {
    /// Plain-text `key: value` block, one line per field.
    pub fn to_text(&self) -> String {
        let splits: Vec<String> = self.split_scores.iter().map(|s| s.to_string()).collect();
        format!(
            "score: {}\nsamples: {}\nsplits: {}\nsplit_scores: {}\n",
            self.score,
            self.samples,
            self.splits,
            splits.join(" ")
        )
    }
}

/// Scores generated images with a trained classifier: predict a class
/// posterior per sample, then exponentiate the mean KL divergence to the
/// split marginal. `splits` consecutive groups are scored independently and
/// averaged; pass 1 to score the whole batch as one group.
pub fn inception_score(
    model: &Classifier,
    samples: &Tensor<f32>,
    splits: usize,
) -> Result<ScoreReport> {
    if samples.rank() != 4 {
        return Err(Error::Dimension(format!(
            "scoring expects [B,C,S,S] samples, got {:?}",
            samples.shape()
        )));
    }
    let probs = model.predict_probs(samples)?;
    score_from_probabilities(&probs, splits)
}

/// The scoring core, exposed for callers that already hold per-sample class
/// distributions. `probs` is [B, classes]; every row must be a probability
/// distribution (entries ≥ 0, summing to 1 within 1e-6). The usual identity
/// 0·ln 0 = 0 applies, and the split marginal of row `p` is never zero where
/// `p` is positive, so each KL term is finite.
pub fn score_from_probabilities(probs: &Tensor<f64>, splits: usize) -> Result<ScoreReport> {
    if probs.rank() != 2 {
        return Err(Error::Dimension(format!(
            "expected [B,classes] probabilities, got {:?}",
            probs.shape()
        )));
    }
    let (n, c) = (probs.dim(0), probs.dim(1));
    if splits == 0 {
        return Err(Error::Usage("need at least one split".into()));
    }
    if n < splits {
        return Err(Error::Usage(format!("{n} samples cannot fill {splits} splits")));
    }
    for r in 0..n {
        let row = &probs.data()[r * c..(r + 1) * c];
        let total: f64 = row.iter().sum();
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Usage(format!(
                "row {r} is not a probability distribution (sum {total})"
            )));
        }
    }

    let mut split_scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let lo = s * n / splits;
        let hi = (s + 1) * n / splits;
        let rows = hi - lo;

        let mut marginal = vec![0.0f64; c];
        for r in lo..hi {
            for (m, &p) in marginal.iter_mut().zip(&probs.data()[r * c..(r + 1) * c]) {
                *m += p;
            }
        }
        for m in &mut marginal {
            *m /= rows as f64;
        }

        let mut kl_sum = 0.0f64;
        for r in lo..hi {
            let row = &probs.data()[r * c..(r + 1) * c];
            for (&p, &q) in row.iter().zip(&marginal) {
                if p > 0.0 {
                    kl_sum += p * (p / q).ln();
                }
            }
        }
        split_scores.push((kl_sum / rows as f64).exp());
    }

    let score = split_scores.iter().sum::<f64>() / splits as f64;
    Ok(ScoreReport { score, split_scores, splits, samples: n })
}
