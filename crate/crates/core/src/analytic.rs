//! Random-feature ridge classifier fitted from recursively accumulated
//! sufficient statistics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, gemm, solve_ridge, Matrix};

/// Default ridge grid, `10^-3 … 10^3`.
pub const DEFAULT_BETA_GRID: [f64; 7] = [1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3];
/// Used when session one has too few samples per class for cross-validation.
pub const FALLBACK_BETA: f64 = 1.0;
pub const CV_FOLDS: usize = 5;

/// Fixed random expansion `h = ReLU(φ W_rand)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    w_rand: Matrix,
}

impl ProjectionHead {
    /// Draw a `d × m` standard-normal matrix from `seed`.
    pub fn new(d: usize, m: usize, seed: u64) -> Result<Self> {
        if d == 0 || m <= d {
            return Err(Error::InvalidParameter(format!(
                "projection dim must exceed embedding dim ({m} <= {d})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_rand = Matrix::from_fn(d, m, |_, _| StandardNormal.sample(&mut rng));
        Ok(Self { w_rand })
    }

    /// Wrap an explicit matrix; only the shape constraint is checked.
    pub fn from_matrix(w_rand: Matrix) -> Result<Self> {
        if w_rand.rows() == 0 || w_rand.cols() <= w_rand.rows() {
            return Err(Error::InvalidParameter(format!(
                "projection dim must exceed embedding dim ({} <= {})",
                w_rand.cols(),
                w_rand.rows()
            )));
        }
        Ok(Self { w_rand })
    }

    pub fn input_dim(&self) -> usize {
        self.w_rand.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_rand.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w_rand
    }
}

pub fn project(embeddings: &Matrix, head: &ProjectionHead) -> Result<Matrix> {
    if embeddings.cols() != head.input_dim() {
        return Err(Error::shape("project", head.input_dim(), embeddings.cols()));
    }
    let mut h = embeddings.matmul(&head.w_rand)?;
    h.relu_inplace();
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    /// Accumulated `HᵀH`, `M × M`.
    pub gram: Matrix,
    /// Accumulated `HᵀY`, `M × classes`.
    pub cross: Matrix,
    pub count: usize,
}

impl SuffStats {
    pub fn new(m: usize, classes: usize) -> Self {
        Self {
            gram: Matrix::zeros(m, m),
            cross: Matrix::zeros(m, classes),
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.gram.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.cross.cols()
    }

    /// Largest `|G_ij − G_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let m = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                worst = worst.max((self.gram.get(i, j) - self.gram.get(j, i)).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticClassifier {
    /// `M × classes`.
    pub weights: Matrix,
    pub beta: f64,
}

impl AnalyticClassifier {
    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }
}

/// `G += HᵀH`, `C += HᵀY`, `N += rows`.
pub fn accumulate(mut stats: SuffStats, h: &Matrix, labels: &[usize]) -> Result<SuffStats> {
    accumulate_into(&mut stats, h, labels)?;
    Ok(stats)
}

pub fn accumulate_into(stats: &mut SuffStats, h: &Matrix, labels: &[usize]) -> Result<()> {
    if h.rows() != labels.len() {
        return Err(Error::shape("accumulate", format!("{} labels", h.rows()), labels.len()));
    }
    if h.rows() == 0 {
        return Ok(());
    }
    if h.cols() != stats.dim() {
        return Err(Error::shape("accumulate", stats.dim(), h.cols()));
    }
    let k = stats.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    gemm(1.0, h, true, h, false, 1.0, &mut stats.gram);
    // HᵀY with one-hot Y: add each row of H into its label's column
    let m = stats.dim();
    for (i, &y) in labels.iter().enumerate() {
        let row = h.row(i);
        let cross = stats.cross.data_mut();
        for (p, v) in row.iter().enumerate() {
            cross[p * k + y] += v;
        }
    }
    debug_assert_eq!(stats.cross.rows(), m);
    stats.count += labels.len();
    Ok(())
}

/// Append zero columns to `C` and `Ŵ` so both cover `new_total` classes.
pub fn expand_classes(
    stats: SuffStats,
    classifier: Option<AnalyticClassifier>,
    new_total: usize,
) -> Result<(SuffStats, Option<AnalyticClassifier>)> {
    let current = stats.num_classes();
    if new_total <= current {
        return Err(Error::InvalidExpansion {
            current,
            requested: new_total,
        });
    }
    let stats = SuffStats {
        cross: stats.cross.widen(new_total),
        ..stats
    };
    let classifier = classifier.map(|c| AnalyticClassifier {
        weights: c.weights.widen(new_total),
        beta: c.beta,
    });
    Ok((stats, classifier))
}

/// `Ŵ = (G + βI)⁻¹ C`.
pub fn fit(stats: &SuffStats, beta: f64) -> Result<AnalyticClassifier> {
    let weights = solve_ridge(&stats.gram, &stats.cross, beta)?;
    Ok(AnalyticClassifier { weights, beta })
}

/// `z = h Ŵ`.
pub fn logits(h: &Matrix, classifier: &AnalyticClassifier) -> Result<Matrix> {
    if h.cols() != classifier.weights.rows() {
        return Err(Error::shape("logits", classifier.weights.rows(), h.cols()));
    }
    h.matmul(&classifier.weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BetaSelection {
    pub beta: f64,
    /// Mean held-out accuracy per grid value (empty on fallback).
    pub scores: Vec<f64>,
    pub warning: Option<String>,
}

/// Choose `β` by 5-fold cross-validation on session-one projected features.
/// Sample `i` goes to fold `i mod 5`; ties prefer the larger `β`.
pub fn select_beta(h: &Matrix, labels: &[usize], num_classes: usize, grid: &[f64]) -> Result<BetaSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty beta grid".into()));
    }
    if let Some(b) = grid.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta grid values must be positive, got {b}")));
    }
    if h.rows() != labels.len() {
        return Err(Error::shape("select_beta", format!("{} labels", h.rows()), labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Label {
            label,
            classes: num_classes,
        });
    }
    if grid.len() == 1 {
        return Ok(BetaSelection {
            beta: grid[0],
            scores: Vec::new(),
            warning: None,
        });
    }
    let mut counts = vec![0usize; num_classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(min) = counts.iter().copied().min().filter(|&m| m < CV_FOLDS) {
        return Ok(BetaSelection {
            beta: FALLBACK_BETA,
            scores: Vec::new(),
            warning: Some(format!(
                "only {min} samples in the smallest class (need {CV_FOLDS}); using beta = {FALLBACK_BETA}"
            )),
        });
    }

    let m = h.cols();
    let folds: Vec<(Vec<usize>, Vec<usize>)> = (0..CV_FOLDS)
        .map(|f| (0..labels.len()).partition(|i| i % CV_FOLDS != f))
        .collect();
    let mut scores = vec![0.0; grid.len()];
    for (train, held) in &folds {
        let mut stats = SuffStats::new(m, num_classes);
        let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        accumulate_into(&mut stats, &h.select_rows(train), &train_labels)?;
        let h_held = h.select_rows(held);
        for (score, &beta) in scores.iter_mut().zip(grid) {
            let z = logits(&h_held, &fit(&stats, beta)?)?;
            let correct = held.iter().enumerate().filter(|(r, &i)| argmax(z.row(*r)) == labels[i]).count();
            *score += correct as f64 / held.len() as f64;
        }
    }
    scores.iter_mut().for_each(|s| *s /= CV_FOLDS as f64);

    let mut best = 0;
    for i in 1..grid.len() {
        let better = scores[i] > scores[best] + 1e-12;
        let tie_larger = (scores[i] - scores[best]).abs() <= 1e-12 && grid[i] > grid[best];
        if better || tie_larger {
            best = i;
        }
    }
    Ok(BetaSelection {
        beta: grid[best],
        scores,
        warning: None,
    })
}
