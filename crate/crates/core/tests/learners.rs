use crcl_core::backbone::{BackboneConfig, FrozenBackbone};
use crcl_core::learners::{
    consolidate_ema, expand_classifier, forward_transfer, imprint_from_labels, loss_radical, predict_head,
    train_radical, train_radical_logged, train_session_one, ConsolidationConfig, TrainConfig,
};
use crcl_core::numerics::Matrix;
use crcl_core::stream::{accuracy, TaskData};
use crcl_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn toy_backbone() -> FrozenBackbone {
    FrozenBackbone::from_config(&BackboneConfig {
        input_dim: 4,
        hidden_dim: 8,
        embed_dim: 4,
        num_blocks: 2,
        adapter_dim: 3,
        seed: 11,
        bypass: false,
    })
    .unwrap()
}

/// Gaussian blobs in 4-d, one centre per class, well separated.
fn blobs(classes: &[usize], per_class: usize, seed: u64) -> TaskData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = [[3.0, 0.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0], [0.0, 0.0, 3.0, 0.0], [0.0, 0.0, 0.0, 3.0]];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..per_class * classes.len() {
        let c = classes[i % classes.len()];
        rows.push((0..4).map(|j| centres[c][j] + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect());
        labels.push(c);
    }
    TaskData::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        epochs_first: epochs,
        epochs_later: epochs,
        lr_init: 0.05,
        augment: false,
        ..TrainConfig::default()
    }
}

#[test]
fn session_one_fits_separable_toy() {
    let bb = toy_backbone();
    let data = blobs(&[0, 1], 50, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adapters = bb.init_adapters(&mut rng);
    let state = train_session_one(&bb, adapters, &data, &config(20), &mut rng).unwrap();
    let pred = predict_head(&bb, &state, &data.inputs).unwrap();
    assert!(accuracy(&pred, &data.labels) >= 99.0);
}

#[test]
fn zero_epochs_is_pure_imprinting() {
    let bb = toy_backbone();
    let data = blobs(&[0, 1], 20, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adapters = bb.init_adapters(&mut rng);
    let state = train_session_one(&bb, adapters, &data, &config(0), &mut rng).unwrap();
    let frozen = bb.embed_frozen(&data.inputs).unwrap();
    assert_eq!(state.classifier, imprint_from_labels(&frozen, &data.labels, 0..2).unwrap());
}

#[test]
fn session_one_is_deterministic() {
    let bb = toy_backbone();
    let data = blobs(&[0, 1], 30, 3);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let adapters = bb.init_adapters(&mut rng);
        train_session_one(&bb, adapters, &data, &config(5), &mut rng).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn row_order_does_not_change_training() {
    let bb = toy_backbone();
    let data = blobs(&[0, 1], 30, 4);
    let n = data.len();
    let perm: Vec<usize> = (0..n).rev().collect();
    let permuted = TaskData {
        inputs: data.inputs.select_rows(&perm),
        labels: perm.iter().map(|&i| data.labels[i]).collect(),
        ids: perm.iter().map(|&i| data.ids[i]).collect(),
        augmentation: None,
    };
    let run = |d: &TaskData| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let adapters = bb.init_adapters(&mut rng);
        train_session_one(&bb, adapters, d, &config(3), &mut rng).unwrap().adapters
    };
    assert_eq!(run(&data), run(&permuted));
}

#[test]
fn empty_session_one_is_rejected() {
    let bb = toy_backbone();
    let data = TaskData::new(Matrix::zeros(0, 4), Vec::new()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let adapters = bb.init_adapters(&mut rng);
    let err = train_session_one(&bb, adapters, &data, &config(1), &mut rng).unwrap_err();
    assert!(matches!(err, Error::EmptyTask(1)));
}

#[test]
fn forward_transfer_copies_without_aliasing() {
    let bb = toy_backbone();
    let data = blobs(&[0, 1], 20, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let adapters = bb.init_adapters(&mut rng);
    let conservative = train_session_one(&bb, adapters, &data, &config(2), &mut rng).unwrap();
    let before = conservative.adapters.checksum();
    let mut radical = forward_transfer(&conservative);
    assert_eq!(radical.max_abs_diff(&conservative.adapters).unwrap(), 0.0);
    radical.adapters_mut()[0].w_up.data_mut()[0] += 1.0;
    assert_eq!(conservative.adapters.checksum(), before);

    let mut zero = conservative.clone();
    zero.adapters = bb.zero_adapters();
    assert_eq!(forward_transfer(&zero).max_abs(), 0.0);
}

#[test]
fn radical_training_on_one_new_class() {
    let bb = toy_backbone();
    let checksum = bb.checksum();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let adapters = bb.init_adapters(&mut rng);
    let cfg = config(5);
    let conservative = train_session_one(&bb, adapters, &blobs(&[0, 1], 40, 7), &cfg, &mut rng).unwrap();

    let new = blobs(&[2], 40, 8);
    let mut radical = conservative.clone();
    radical.adapters = forward_transfer(&conservative);

    let unexpanded = train_radical(&bb, radical.clone(), &conservative, &new, &cfg, &mut rng.clone());
    assert!(matches!(unexpanded, Err(Error::State(_))));

    expand_classifier(&bb, &mut radical, &new, 3).unwrap();
    assert_eq!(radical.classifier.column(0), conservative.classifier.column(0));

    // immediately after transfer both learners embed identically
    let phi_r = bb.embed_inference(&new.inputs, &radical.adapters).unwrap();
    let phi_c = bb.embed_inference(&new.inputs, &conservative.adapters).unwrap();
    let at_start = loss_radical(&radical.classifier, &phi_r, &phi_c, &new.labels).unwrap();
    assert_eq!(at_start.cls_loss, at_start.cross_loss);

    let new_column = radical.classifier.column(2);
    let (trained, log) = train_radical_logged(&bb, radical, &conservative, &new, &cfg, &mut rng).unwrap();
    let l = &log.epoch_losses;
    assert!(l[0] > l[1] && l[1] > l[2], "losses {l:?}");
    assert_ne!(trained.classifier.column(2), new_column);

    let merged = consolidate_ema(&conservative.adapters, &trained.adapters, &ConsolidationConfig::default()).unwrap();
    assert!(merged.same_shape(&conservative.adapters));
    assert_eq!(bb.checksum(), checksum);
}

#[test]
fn radical_training_is_reproducible() {
    let bb = toy_backbone();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let adapters = bb.init_adapters(&mut rng);
    let cfg = config(3);
    let conservative = train_session_one(&bb, adapters, &blobs(&[0, 1], 30, 9), &cfg, &mut rng).unwrap();
    let new = blobs(&[2, 3], 30, 10);
    let run = || {
        let mut r = conservative.clone();
        r.adapters = forward_transfer(&conservative);
        expand_classifier(&bb, &mut r, &new, 4).unwrap();
        train_radical(&bb, r, &conservative, &new, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    };
    assert_eq!(run(), run());
}
