//! Reference protocols: sequential finetuning (lower bound) and joint
//! training on all classes at once (upper bound).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{evaluate, SessionResult, TaskStream};
use crate::backbone::FrozenBackbone;
use crate::error::{Error, Result};
use crate::learners::{expand_classifier, predict_head, train_finetune, train_session_one, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineConfig {
    pub train: TrainConfig,
}

/// One adapter + cross-entropy head trained task after task, with no
/// consolidation, analytic head or fusion.
pub fn run_baseline_finetune(
    backbone: &FrozenBackbone,
    stream: &TaskStream,
    config: &BaselineConfig,
) -> Result<SessionResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let adapters = backbone.init_adapters(&mut rng);
    let first = stream.train_session(1);
    let mut state = train_session_one(backbone, adapters, &first, &config.train, &mut rng)
        .map_err(|e| e.in_session(1, "finetune"))?;
    let mut accuracies = Vec::with_capacity(stream.num_tasks());
    let acc = evaluate(|x| predict_head(backbone, &state, x), &stream.test_through(1))
        .map_err(|e| e.in_session(1, "evaluate"))?;
    accuracies.push(acc);
    for t in 2..=stream.num_tasks() {
        let data = stream.train_session(t);
        if data.is_empty() {
            return Err(Error::EmptyTask(t));
        }
        expand_classifier(backbone, &mut state, &data, stream.classes_through(t))
            .map_err(|e| e.in_session(t, "expand classifier"))?;
        state = train_finetune(backbone, state, &data, &config.train, &mut rng)
            .map_err(|e| e.in_session(t, "finetune"))?;
        let acc = evaluate(|x| predict_head(backbone, &state, x), &stream.test_through(t))
            .map_err(|e| e.in_session(t, "evaluate"))?;
        accuracies.push(acc);
    }
    SessionResult::from_accuracies(accuracies)
}

/// Train a single learner on the union of all tasks; returns the final
/// accuracy on the full test set.
pub fn run_baseline_joint(backbone: &FrozenBackbone, stream: &TaskStream, config: &BaselineConfig) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let adapters = backbone.init_adapters(&mut rng);
    let data = stream.train_all();
    let state = train_session_one(backbone, adapters, &data, &config.train, &mut rng)
        .map_err(|e| e.in_session(1, "joint training"))?;
    evaluate(
        |x| predict_head(backbone, &state, x),
        &stream.test_through(stream.num_tasks()),
    )
}
