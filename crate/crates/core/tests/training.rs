use std::collections::BTreeSet;

use sda_core::dsp::{self, WindowBatch};
use sda_core::net::{init_params, Architecture};
use sda_core::synth::{generate_cohort_records, SynthConfig};
use sda_core::train::*;

fn cohort(n: usize, ga: (f64, f64), offset: usize) -> Vec<WindowBatch> {
    let config = SynthConfig {
        n_infants: n,
        ga_range_weeks: ga,
        record_minutes: 4.0,
        seizure_rate_per_hour: 45.0,
        seizure_amplitude_uv: (60.0, 90.0),
        n_test_infants: 0,
        n_control_infants: 0,
        id_offset: offset,
        seed: 21,
        ..Default::default()
    };
    generate_cohort_records(&config)
        .unwrap()
        .iter()
        .map(|(r, _)| dsp::prepare_record(r, 8, 0.5).unwrap())
        .collect()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        batch_size: 16,
        max_windows_per_epoch: Some(48),
        seed: 3,
        ..Default::default()
    }
}

fn checkpoint_bytes(c: &ModelCheckpoint) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    c.save(&p).unwrap();
    std::fs::read(p).unwrap()
}

fn split(batches: &[WindowBatch]) -> (Vec<WindowBatch>, Vec<WindowBatch>) {
    let val: Vec<WindowBatch> = batches.iter().filter(|b| b.n_positive() > 0).take(1).cloned().collect();
    let train = batches.iter().filter(|b| b.record_id != val[0].record_id).cloned().collect();
    (train, val)
}

#[test]
fn training_is_deterministic() {
    let data = cohort(4, (27.0, 33.0), 0);
    let (train, val) = split(&data);
    let run = || train_model(&train, &val, &quick_config(), init_params(Architecture::TINY, 3)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(checkpoint_bytes(&a.checkpoint), checkpoint_bytes(&b.checkpoint));
}

#[test]
fn single_epoch_budget() {
    let data = cohort(4, (27.0, 33.0), 0);
    let (train, val) = split(&data);
    let config = TrainConfig { max_epochs: 1, ..quick_config() };
    let out = train_model(&train, &val, &config, init_params(Architecture::TINY, 3)).unwrap();
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].stopped);
    assert_eq!(out.checkpoint.meta.epoch, 1);
}

#[test]
fn zero_weight_records_change_nothing() {
    let data = cohort(4, (27.0, 33.0), 0);
    let (train, val) = split(&data);
    let mut silent = cohort(1, (30.0, 30.0), 50).remove(0);
    silent.sample_weights.iter_mut().for_each(|w| *w = 0.0);
    let mut with_silent = train.clone();
    with_silent.insert(1, silent);

    let config = quick_config();
    let a = train_model(&train, &val, &config, init_params(Architecture::TINY, 3)).unwrap();
    let b = train_model(&with_silent, &val, &config, init_params(Architecture::TINY, 3)).unwrap();
    assert_eq!(checkpoint_bytes(&a.checkpoint), checkpoint_bytes(&b.checkpoint));
}

#[test]
fn disjoint_ids_and_both_classes_required() {
    let data = cohort(4, (27.0, 33.0), 0);
    let (train, val) = split(&data);
    let err = train_model(&data, &val, &quick_config(), init_params(Architecture::TINY, 3)).unwrap_err();
    assert!(err.to_string().contains("both the training and validation"));
    let mut one_class = val.clone();
    one_class[0].labels.iter_mut().for_each(|l| *l = 0);
    assert!(train_model(&train, &one_class, &quick_config(), init_params(Architecture::TINY, 3)).is_err());
}

#[test]
fn ensemble_members_get_distinct_validation_sets() {
    let data = cohort(12, (27.0, 33.0), 0);
    let sets = choose_validation_sets(&data, &(0..12).collect::<Vec<_>>(), 3, 0).unwrap();
    assert_eq!(sets.len(), 3);
    let ids: BTreeSet<&Vec<usize>> = sets.iter().collect();
    assert_eq!(ids.len(), 3);
    let flat: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    assert_eq!(flat.len(), 9, "12 records leave room for disjoint sets");
}

#[test]
fn ga_transfer_moves_every_conv_layer_and_keeps_init() {
    let data = cohort(6, (27.0, 33.0), 0);
    let config = quick_config();
    let base = train_ensemble(&data, &config, Architecture::TINY, 1).unwrap();
    assert_eq!(base.model.members.len(), 3);

    let init = transfer_init(&base.model.members[0], &Architecture::TINY).unwrap();
    assert_eq!(init, base.model.members[0].params);
    assert!(transfer_init(&base.model.members[0], &Architecture::STANDARD).is_err());

    let mut all = data.clone();
    all.extend(cohort(4, (23.0, 25.5), 100));
    let group = GaGroup::new(1, DEFAULT_DECAY_SPAN_WEEKS).unwrap();
    let tuned_config = TrainConfig { use_lars: true, lr: 0.01, ..config };
    let tuned = train_ga_specific(&all, &group, &base.model, &tuned_config, 1).unwrap();
    for (before, after) in base.model.members.iter().zip(&tuned.model.members) {
        assert!(after.meta.val_record_ids.iter().all(|id| id.as_str() >= "inf100"));
        for (i, (a, b)) in before.params.convs.iter().zip(&after.params.convs).enumerate() {
            assert_ne!(a.weights, b.weights, "conv {i} did not move");
        }
    }
}
