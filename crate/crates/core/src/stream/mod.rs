//! Datasets, disjoint-class task streams, evaluation and metrics.

mod augment;
mod baselines;
mod io;
pub mod synth;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{Augmentation, ImageShape, MAX_ROTATION_DEG};
pub use baselines::{run_baseline_finetune, run_baseline_joint, BaselineConfig};
pub use io::{load_dataset, read_idx, write_idx_images, write_idx_labels, DataFormat, IdxArray, Manifest};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Inputs with dense integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Split {
        Split {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub image_shape: Option<ImageShape>,
    /// Standardized value of a zero-intensity pixel.
    pub background: f64,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.inputs.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.train.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn augmentation(&self) -> Option<Augmentation> {
        self.image_shape.map(|shape| Augmentation {
            shape,
            fill: self.background,
        })
    }
}

/// Training data for one session, labels already mapped to incremental
/// class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Stable sample identifiers; batch order is derived from these, not
    /// from row order.
    pub ids: Vec<usize>,
    pub augmentation: Option<Augmentation>,
}

impl TaskData {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::shape("TaskData", format!("{} labels", inputs.rows()), labels.len()));
        }
        let ids = (0..labels.len()).collect();
        Ok(Self {
            inputs,
            labels,
            ids,
            augmentation: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Distinct labels, ascending.
    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskOrder {
    Given,
    Reversed,
    Shuffled,
}

impl std::str::FromStr for TaskOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "given" => Ok(Self::Given),
            "reversed" => Ok(Self::Reversed),
            "shuffled" | "seeded-shuffle" => Ok(Self::Shuffled),
            other => Err(Error::InvalidParameter(format!(
                "unknown task order {other:?} (given | reversed | shuffled)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Given => "given",
            Self::Reversed => "reversed",
            Self::Shuffled => "shuffled",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub num_tasks: usize,
    /// Original class ids introduced by each task, in session order.
    pub class_partition: Vec<Vec<usize>>,
    pub order: TaskOrder,
}

impl TaskSpec {
    pub fn sizes(&self) -> Vec<usize> {
        self.class_partition.iter().map(Vec::len).collect()
    }

    /// Original class ids in the order they are introduced.
    pub fn class_order(&self) -> Vec<usize> {
        self.class_partition.iter().flatten().copied().collect()
    }
}

/// Partition `num_classes` classes into `num_tasks` groups; the remainder
/// goes to the earliest tasks.
pub fn split_tasks(num_classes: usize, num_tasks: usize, order: TaskOrder, seed: u64) -> Result<TaskSpec> {
    if num_tasks == 0 || num_tasks > num_classes {
        return Err(Error::InvalidSplit {
            classes: num_classes,
            tasks: num_tasks,
        });
    }
    let mut classes: Vec<usize> = (0..num_classes).collect();
    if order == TaskOrder::Shuffled {
        classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let base = num_classes / num_tasks;
    let extra = num_classes % num_tasks;
    let mut groups = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let size = base + usize::from(t < extra);
        groups.push(classes[start..start + size].to_vec());
        start += size;
    }
    if order == TaskOrder::Reversed {
        groups.reverse();
    }
    Ok(TaskSpec {
        num_tasks,
        class_partition: groups,
        order,
    })
}

/// A dataset laid out as a class-incremental session sequence.
#[derive(Debug, Clone)]
pub struct TaskStream {
    spec: TaskSpec,
    /// original class id -> incremental index
    label_map: Vec<usize>,
    train: Split,
    test: Split,
    augmentation: Option<Augmentation>,
}

impl TaskStream {
    pub fn new(dataset: &Dataset, spec: TaskSpec) -> Result<Self> {
        let order = spec.class_order();
        let mut label_map = vec![usize::MAX; dataset.num_classes];
        for (idx, &class) in order.iter().enumerate() {
            if class >= dataset.num_classes || label_map[class] != usize::MAX {
                return Err(Error::InvalidParameter(format!(
                    "task partition repeats or exceeds class {class}"
                )));
            }
            label_map[class] = idx;
        }
        if order.len() != dataset.num_classes {
            return Err(Error::InvalidParameter(format!(
                "task partition covers {} of {} classes",
                order.len(),
                dataset.num_classes
            )));
        }
        Ok(Self {
            spec,
            label_map,
            train: dataset.train.clone(),
            test: dataset.test.clone(),
            augmentation: dataset.augmentation(),
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn num_tasks(&self) -> usize {
        self.spec.num_tasks
    }

    pub fn set_augmentation(&mut self, augmentation: Option<Augmentation>) {
        self.augmentation = augmentation;
    }

    /// Classes seen after session `t` (1-based).
    pub fn classes_through(&self, t: usize) -> usize {
        self.spec.class_partition[..t].iter().map(Vec::len).sum()
    }

    /// Incremental index range introduced by session `t` (1-based).
    pub fn session_classes(&self, t: usize) -> std::ops::Range<usize> {
        self.classes_through(t - 1)..self.classes_through(t)
    }

    fn gather(&self, split: &Split, keep: impl Fn(usize) -> bool) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (i, &l) in split.labels.iter().enumerate() {
            let mapped = self.label_map[l];
            if keep(mapped) {
                rows.push(i);
                labels.push(mapped);
            }
        }
        (rows, labels)
    }

    /// Training data of session `t` (1-based).
    pub fn train_session(&self, t: usize) -> TaskData {
        let range = self.session_classes(t);
        let (rows, labels) = self.gather(&self.train, |c| range.contains(&c));
        TaskData {
            inputs: self.train.inputs.select_rows(&rows),
            labels,
            ids: rows,
            augmentation: self.augmentation,
        }
    }

    /// All training data, for joint training.
    pub fn train_all(&self) -> TaskData {
        let (rows, labels) = self.gather(&self.train, |_| true);
        TaskData {
            inputs: self.train.inputs.select_rows(&rows),
            labels,
            ids: rows,
            augmentation: self.augmentation,
        }
    }

    /// Test samples of every class seen through session `t`.
    pub fn test_through(&self, t: usize) -> Split {
        self.test_through_with_ids(t).0
    }

    /// As [`test_through`](Self::test_through), plus each sample's row in
    /// the original test split.
    pub fn test_through_with_ids(&self, t: usize) -> (Split, Vec<usize>) {
        let seen = self.classes_through(t);
        let (rows, labels) = self.gather(&self.test, |c| c < seen);
        let split = Split {
            inputs: self.test.inputs.select_rows(&rows),
            labels,
        };
        (split, rows)
    }
}

/// Top-1 accuracy in percent.
pub fn evaluate<F>(predict: F, test: &Split) -> Result<f64>
where
    F: FnOnce(&Matrix) -> Result<Vec<usize>>,
{
    if test.is_empty() {
        return Err(Error::EmptyEval);
    }
    let predictions = predict(&test.inputs)?;
    if predictions.len() != test.len() {
        return Err(Error::shape("evaluate", format!("{} predictions", test.len()), predictions.len()));
    }
    Ok(accuracy(&predictions, &test.labels))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

/// `(Acc_Avg, Acc_Last)`.
pub fn metrics(accuracies: &[f64]) -> Result<(f64, f64)> {
    let last = *accuracies.last().ok_or(Error::EmptyMetrics)?;
    let avg = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok((avg, last))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub accuracies: Vec<f64>,
    pub acc_avg: f64,
    pub acc_last: f64,
}

impl SessionResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        let (acc_avg, acc_last) = metrics(&accuracies)?;
        Ok(Self {
            accuracies,
            acc_avg,
            acc_last,
        })
    }
}
