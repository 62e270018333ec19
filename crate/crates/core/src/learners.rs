//! Conservative and radical learners: imprinted heads, cross-entropy
//! objectives, SGD training sessions and EMA consolidation.

use std::ops::Range;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AdapterSet, FrozenBackbone};
use crate::error::{Error, Result};
use crate::numerics::{argmax, gemm, Matrix};
use crate::stream::TaskData;

/// Rows embedded per forward call outside of training.
const EMBED_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Conservative,
    Radical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub adapters: AdapterSet,
    /// `d × classes`; column `j` is the weight vector of class `j`.
    pub classifier: Matrix,
    pub role: Role,
}

impl LearnerState {
    pub fn num_classes(&self) -> usize {
        self.classifier.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_first: usize,
    pub epochs_later: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Apply weak augmentation when the data carries an image shape.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            epochs_first: 20,
            epochs_later: 15,
            lr_init: 0.01,
            momentum: 0.9,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::InvalidParameter("lr_init must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationConfig {
    pub alpha: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        Self { alpha: 0.99 }
    }
}

/// Mean training loss per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter().map(|x| x / norm).collect()
    } else {
        v.to_vec()
    }
}

/// Imprinted weights: for each class, the re-normalized mean of its
/// L2-normalized embeddings. Returns a `d × classes` matrix.
pub fn imprint_classifier(per_class: &[Matrix]) -> Result<Matrix> {
    let d = per_class.first().map_or(0, Matrix::cols);
    let mut w = Matrix::zeros(d, per_class.len());
    for (class, emb) in per_class.iter().enumerate() {
        if emb.rows() == 0 {
            return Err(Error::MissingPrototype { class });
        }
        if emb.cols() != d {
            return Err(Error::shape("imprint_classifier", format!("{d} columns"), emb.cols()));
        }
        let mut mean = vec![0.0; d];
        for i in 0..emb.rows() {
            for (m, v) in mean.iter_mut().zip(normalized(emb.row(i))) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= emb.rows() as f64);
        w.set_column(class, &normalized(&mean));
    }
    Ok(w)
}

/// Imprint columns for every class in `classes`, using labelled embeddings.
pub fn imprint_from_labels(embeddings: &Matrix, labels: &[usize], classes: Range<usize>) -> Result<Matrix> {
    let per_class: Vec<Matrix> = classes
        .clone()
        .map(|c| {
            let rows: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
            embeddings.select_rows(&rows)
        })
        .collect();
    imprint_classifier(&per_class).map_err(|e| match e {
        Error::MissingPrototype { class } => Error::MissingPrototype {
            class: class + classes.start,
        },
        other => other,
    })
}

#[derive(Debug, Clone)]
pub struct CeOutput {
    pub loss: f64,
    /// `∂loss/∂embeddings`, `N × d`.
    pub grad_embeddings: Matrix,
    /// `∂loss/∂W`, `d × classes`.
    pub grad_classifier: Matrix,
}

/// Mean cross-entropy of `softmax(embeddings · W)`.
pub fn loss_ce(classifier: &Matrix, embeddings: &Matrix, labels: &[usize]) -> Result<CeOutput> {
    if embeddings.cols() != classifier.rows() {
        return Err(Error::shape("loss_ce", format!("embedding width {}", classifier.rows()), embeddings.cols()));
    }
    if embeddings.rows() != labels.len() {
        return Err(Error::shape("loss_ce", format!("{} labels", embeddings.rows()), labels.len()));
    }
    let k = classifier.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    let n = labels.len();
    let mut dlogits = embeddings.matmul(classifier)?;
    let mut loss = 0.0;
    let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    for (i, &y) in labels.iter().enumerate() {
        let row = dlogits.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        // -log p_y = log Σ exp(z - max) - (z_y - max)
        loss += sum.ln() - row[y].ln();
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= inv_n);
    }
    let grad_classifier = embeddings.matmul_tn(&dlogits)?;
    let grad_embeddings = dlogits.matmul_nt(classifier)?;
    Ok(CeOutput {
        loss: loss * inv_n,
        grad_embeddings,
        grad_classifier,
    })
}

#[derive(Debug, Clone)]
pub struct RadicalLoss {
    pub loss: f64,
    pub cls_loss: f64,
    pub cross_loss: f64,
    /// Gradient for the radical embeddings (first term only).
    pub grad_embeddings: Matrix,
    /// Gradient for `W_R` from both terms.
    pub grad_classifier: Matrix,
}

/// `CE(W_Rᵀφ_R, y) + CE(W_Rᵀφ_C, y)`. The conservative embeddings are
/// constants: no gradient is produced for them.
pub fn loss_radical(
    classifier: &Matrix,
    embeddings_radical: &Matrix,
    embeddings_conservative: &Matrix,
    labels: &[usize],
) -> Result<RadicalLoss> {
    if embeddings_radical.shape() != embeddings_conservative.shape() {
        return Err(Error::shape(
            "loss_radical",
            format!("{}x{}", embeddings_radical.rows(), embeddings_radical.cols()),
            format!("{}x{}", embeddings_conservative.rows(), embeddings_conservative.cols()),
        ));
    }
    let cls = loss_ce(classifier, embeddings_radical, labels)?;
    let cross = loss_ce(classifier, embeddings_conservative, labels)?;
    let mut grad_classifier = cls.grad_classifier;
    grad_classifier.add_assign(&cross.grad_classifier)?;
    Ok(RadicalLoss {
        loss: cls.loss + cross.loss,
        cls_loss: cls.loss,
        cross_loss: cross.loss,
        grad_embeddings: cls.grad_embeddings,
        grad_classifier,
    })
}

/// Per-epoch cosine annealing from `lr_init` towards zero.
pub fn cosine_lr(lr_init: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return lr_init;
    }
    0.5 * lr_init * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

/// Embed a full input matrix in fixed-size chunks. Chunks run on the
/// current rayon pool; the chunk layout is fixed, so results do not depend
/// on the thread count.
pub fn embed_all(backbone: &FrozenBackbone, adapters: &AdapterSet, inputs: &Matrix) -> Result<Matrix> {
    let d = backbone.embed_dim();
    let n = inputs.rows();
    let starts: Vec<usize> = (0..n).step_by(EMBED_CHUNK).collect();
    let parts: Vec<Matrix> = starts
        .par_iter()
        .map(|&start| {
            let rows: Vec<usize> = (start..(start + EMBED_CHUNK).min(n)).collect();
            backbone.embed_inference(&inputs.select_rows(&rows), adapters)
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(n * d);
    parts.iter().for_each(|p| data.extend_from_slice(p.data()));
    Matrix::new(n, d, data)
}

/// `argmax Wᵀφ(x)` for every row.
pub fn predict_head(backbone: &FrozenBackbone, state: &LearnerState, inputs: &Matrix) -> Result<Vec<usize>> {
    let logits = embed_all(backbone, &state.adapters, inputs)?.matmul(&state.classifier)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

fn sgd_step(param: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, lr: f64, momentum: f64) {
    for ((p, g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(velocity.data_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn canonical_rows(data: &TaskData) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..data.len()).collect();
    rows.sort_by_key(|&i| data.ids[i]);
    rows
}

fn assemble_batch(data: &TaskData, rows: &[usize], augment: bool, rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
    let mut x = data.inputs.select_rows(rows);
    if augment {
        if let Some(aug) = data.augmentation {
            let mut buf = vec![0.0; x.cols()];
            for i in 0..x.rows() {
                aug.apply(x.row(i), rng, &mut buf);
                x.row_mut(i).copy_from_slice(&buf);
            }
        }
    }
    (x, rows.iter().map(|&r| data.labels[r]).collect())
}

enum Objective<'a> {
    /// Session-one domain alignment: re-imprint the head after every epoch.
    Align,
    /// Plain cross-entropy on the current task.
    Plain,
    /// `L_cls-R + L_CR` against a frozen conservative learner.
    Radical { conservative: &'a AdapterSet },
}

/// Prototypes for `classes`, summed in id order so storage order never
/// changes the result.
fn prototypes(backbone: &FrozenBackbone, adapters: &AdapterSet, data: &TaskData, classes: Range<usize>) -> Result<Matrix> {
    let rows = canonical_rows(data);
    let emb = embed_all(backbone, adapters, &data.inputs.select_rows(&rows))?;
    let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
    imprint_from_labels(&emb, &labels, classes)
}

fn reimprint(backbone: &FrozenBackbone, state: &mut LearnerState, data: &TaskData) -> Result<()> {
    state.classifier = prototypes(backbone, &state.adapters, data, 0..state.num_classes())?;
    Ok(())
}

fn train_loop(
    backbone: &FrozenBackbone,
    state: &mut LearnerState,
    data: &TaskData,
    config: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    objective: Objective<'_>,
) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog::default();
    let mut adapter_velocity = state.adapters.zeros_like();
    let mut head_velocity = Matrix::zeros(state.classifier.rows(), state.classifier.cols());
    let canonical = canonical_rows(data);
    for epoch in 0..epochs {
        let lr = cosine_lr(config.lr_init, epoch, epochs);
        let mut order = canonical.clone();
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        for rows in order.chunks(config.batch_size) {
            let (x, y) = assemble_batch(data, rows, config.augment, rng);
            let (emb, trace) = backbone.embed(&x, &state.adapters)?;
            let (loss, grad_emb, grad_head) = match objective {
                Objective::Align | Objective::Plain => {
                    let out = loss_ce(&state.classifier, &emb, &y)?;
                    (out.loss, out.grad_embeddings, out.grad_classifier)
                }
                Objective::Radical { conservative } => {
                    let emb_c = backbone.embed_inference(&x, conservative)?;
                    let out = loss_radical(&state.classifier, &emb, &emb_c, &y)?;
                    (out.loss, out.grad_embeddings, out.grad_classifier)
                }
            };
            loss_sum += loss * rows.len() as f64;
            let grads = backbone.backward_adapters(&trace, &grad_emb)?;
            for ((p, g), v) in state
                .adapters
                .params_mut()
                .zip(grads.params())
                .zip(adapter_velocity.params_mut())
            {
                sgd_step(p, g, v, lr, config.momentum);
            }
            sgd_step(&mut state.classifier, &grad_head, &mut head_velocity, lr, config.momentum);
        }
        log.epoch_losses.push(loss_sum / data.len() as f64);
        if matches!(objective, Objective::Align) {
            reimprint(backbone, state, data)?;
            head_velocity = Matrix::zeros(state.classifier.rows(), state.classifier.cols());
        }
    }
    Ok(log)
}

/// Session-one domain alignment for the conservative learner. The head is
/// imprinted before training and re-imprinted after every epoch.
pub fn train_session_one(
    backbone: &FrozenBackbone,
    adapters: AdapterSet,
    data: &TaskData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LearnerState> {
    train_session_one_logged(backbone, adapters, data, config, rng).map(|(s, _)| s)
}

pub fn train_session_one_logged(
    backbone: &FrozenBackbone,
    adapters: AdapterSet,
    data: &TaskData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LearnerState, TrainLog)> {
    if data.is_empty() {
        return Err(Error::EmptyTask(1));
    }
    let classes = data.labels.iter().max().map_or(0, |m| m + 1);
    let mut state = LearnerState {
        adapters,
        classifier: Matrix::zeros(backbone.embed_dim(), classes),
        role: Role::Conservative,
    };
    reimprint(backbone, &mut state, data)?;
    let log = train_loop(backbone, &mut state, data, config, config.epochs_first, rng, Objective::Align)?;
    Ok((state, log))
}

/// Initialize the radical adapters as an independent copy of the
/// conservative ones.
pub fn forward_transfer(conservative: &LearnerState) -> AdapterSet {
    conservative.adapters.clone()
}

/// Grow the head to `new_total` classes, imprinting the new columns from
/// the learner's current embeddings of `data`. Existing columns are kept.
pub fn expand_classifier(
    backbone: &FrozenBackbone,
    state: &mut LearnerState,
    data: &TaskData,
    new_total: usize,
) -> Result<()> {
    let current = state.num_classes();
    if new_total <= current {
        return Err(Error::InvalidExpansion {
            current,
            requested: new_total,
        });
    }
    let fresh = prototypes(backbone, &state.adapters, data, current..new_total)?;
    let mut w = state.classifier.widen(new_total);
    for (j, class) in (current..new_total).enumerate() {
        w.set_column(class, &fresh.column(j));
    }
    state.classifier = w;
    Ok(())
}

fn require_expanded(state: &LearnerState, data: &TaskData) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyTask(0));
    }
    let needed = data.labels.iter().max().map_or(0, |m| m + 1);
    if state.num_classes() < needed {
        return Err(Error::State(format!(
            "classifier has {} columns but task labels reach {}; expand before training",
            state.num_classes(),
            needed - 1
        )));
    }
    Ok(())
}

/// Radical update on task `t ≥ 2`: SGD on `L_cls-R + L_CR` with the
/// conservative learner frozen.
pub fn train_radical(
    backbone: &FrozenBackbone,
    state: LearnerState,
    conservative: &LearnerState,
    data: &TaskData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LearnerState> {
    train_radical_logged(backbone, state, conservative, data, config, rng).map(|(s, _)| s)
}

pub fn train_radical_logged(
    backbone: &FrozenBackbone,
    mut state: LearnerState,
    conservative: &LearnerState,
    data: &TaskData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LearnerState, TrainLog)> {
    require_expanded(&state, data)?;
    state.role = Role::Radical;
    let log = train_loop(
        backbone,
        &mut state,
        data,
        config,
        config.epochs_later,
        rng,
        Objective::Radical {
            conservative: &conservative.adapters,
        },
    )?;
    Ok((state, log))
}

/// Plain cross-entropy session used by the sequential finetune baseline.
pub fn train_finetune(
    backbone: &FrozenBackbone,
    mut state: LearnerState,
    data: &TaskData,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LearnerState> {
    require_expanded(&state, data)?;
    train_loop(backbone, &mut state, data, config, config.epochs_later, rng, Objective::Plain)?;
    Ok(state)
}

/// `θ_C ← α·θ_C + (1−α)·θ_R`, elementwise.
pub fn consolidate_ema(conservative: &AdapterSet, radical: &AdapterSet, config: &ConsolidationConfig) -> Result<AdapterSet> {
    let alpha = config.alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("EMA alpha must lie in [0, 1], got {alpha}")));
    }
    if !conservative.same_shape(radical) {
        return Err(Error::shape("consolidate_ema", "adapter sets of equal shape", "mismatch"));
    }
    let mut out = conservative.clone();
    for (c, r) in out.params_mut().zip(radical.params()) {
        for (a, b) in c.data_mut().iter_mut().zip(r.data()) {
            *a = ema_blend(*a, *b, alpha);
        }
    }
    Ok(out)
}

/// One EMA step, clamped into the closed interval of its sources so
/// rounding can never leave it.
#[inline]
fn ema_blend(old: f64, new: f64, alpha: f64) -> f64 {
    if alpha == 1.0 {
        return old;
    }
    if alpha == 0.0 {
        return new;
    }
    let v = alpha * old + (1.0 - alpha) * new;
    v.clamp(old.min(new), old.max(new))
}

/// Head logits `φ(x)·W` as an output-only helper for tests and reports.
pub fn head_logits(embeddings: &Matrix, classifier: &Matrix) -> Result<Matrix> {
    if embeddings.cols() != classifier.rows() {
        return Err(Error::shape("head_logits", classifier.rows(), embeddings.cols()));
    }
    let mut out = Matrix::zeros(embeddings.rows(), classifier.cols());
    gemm(1.0, embeddings, false, classifier, false, 0.0, &mut out);
    Ok(out)
}
