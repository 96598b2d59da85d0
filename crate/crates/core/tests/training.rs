//! Small-scale end-to-end training sanity checks.

mod common;

use mmfusion::backbone::BackboneConfig;
use mmfusion::data::synthetic::{generate_synthetic, RegionSpec, SyntheticConfig};
use mmfusion::data::{stratified_split, LoadedDataset};
use mmfusion::eval::{evaluate, train, validate_bacc, PairingScheme, TrainConfig, TrainScheme};
use mmfusion::fusion::{build_model, FusionStrategy};

fn tiny_synthetic(subjects: usize, s_pet: f64, s_mri: f64, seed: u64) -> LoadedDataset {
    let cfg = SyntheticConfig {
        subjects,
        shape: [12, 12, 12],
        spacing: [1.5; 3],
        s_pet,
        s_mri,
        noise_sigma: 0.05,
        num_classes: 2,
        pet_region: RegionSpec { center: [6.0, 6.0, 4.0], radius: 2.5 },
        mri_region: RegionSpec { center: [6.0, 6.0, 8.0], radius: 2.5 },
        smooth_sigma: 1.5,
        seed,
    };
    LoadedDataset::from_synthetic(generate_synthetic(&cfg).unwrap())
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { block_channels: [2, 2, 4, 4], head_hidden: 8, dropout: 0.0, ..Default::default() }
}

fn split_indices(data: &LoadedDataset, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let plans = stratified_split(&data.records, seed, 1).unwrap();
    let by_id = data.index_by_id();
    let idx = |ids: &[String]| ids.iter().map(|i| by_id[i.as_str()]).collect::<Vec<_>>();
    (idx(&plans[0].train), idx(&plans[0].val), idx(&plans[0].test))
}

#[test]
fn training_reduces_loss_on_separable_data() {
    let data = tiny_synthetic(32, 0.8, 0.0, 5);
    let (tr, va, _) = split_indices(&data, 5);
    let mut model = build_model(FusionStrategy::SinglePet, &tiny_backbone(), None, 1).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        augment: false,
        ..Default::default()
    };
    let hist = train(&mut model, &data, &tr, &va, &cfg, 3).unwrap();
    let first = hist.epochs.first().unwrap().train_loss;
    let last = hist.epochs.last().unwrap().train_loss;
    assert!(last < first, "loss did not decrease: {first} -> {last}");
}

#[test]
fn training_is_deterministic_for_a_fixed_seed() {
    let data = tiny_synthetic(24, 0.8, 0.0, 6);
    let (tr, va, _) = split_indices(&data, 6);
    let cfg = TrainConfig { epochs: 3, batch_size: 8, augment: true, ..Default::default() };
    let mut baccs = Vec::new();
    for _ in 0..2 {
        let mut model = build_model(FusionStrategy::Late, &tiny_backbone(), None, 2).unwrap();
        let hist = train(&mut model, &data, &tr, &va, &cfg, 9).unwrap();
        baccs.push(
            hist.epochs
                .iter()
                .map(|e| (e.train_loss, e.val_bacc))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(baccs[0], baccs[1], "same seed must reproduce the same history");
}

#[test]
fn untrained_model_sits_near_chance_on_null_data() {
    // zero signal strength: nothing separates the classes
    let data = tiny_synthetic(60, 0.0, 0.0, 8);
    let (_, _, te) = split_indices(&data, 8);
    let mut model = build_model(FusionStrategy::Late, &tiny_backbone(), None, 4).unwrap();
    let r = evaluate(&mut model, &data, &te, PairingScheme::Correct, 16, 1).unwrap();
    assert!(
        (r.bacc_mean - 0.5).abs() <= 0.35,
        "untrained chance-level check wildly off: {}",
        r.bacc_mean
    );
}

#[test]
fn pet_only_model_is_invariant_to_mri_pairing() {
    let data = tiny_synthetic(40, 0.6, 0.0, 9);
    let (tr, va, te) = split_indices(&data, 9);
    let mut model = build_model(FusionStrategy::SinglePet, &tiny_backbone(), None, 5).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, augment: false, ..Default::default() };
    train(&mut model, &data, &tr, &va, &cfg, 11).unwrap();
    let correct = evaluate(&mut model, &data, &te, PairingScheme::Correct, 16, 21).unwrap();
    let random = evaluate(&mut model, &data, &te, PairingScheme::RandomMri, 16, 21).unwrap();
    assert_eq!(correct.bacc_mean.to_bits(), random.bacc_mean.to_bits());
    assert_eq!(correct.confusion, random.confusion);
}

#[test]
fn middle_fusion_trains_with_l1_penalty() {
    let data = tiny_synthetic(24, 0.8, 0.0, 10);
    let (tr, va, _) = split_indices(&data, 10);
    let mut model = build_model(FusionStrategy::Middle, &tiny_backbone(), None, 6).unwrap();
    let gamma_ids = model.exchange_gammas();
    let before: f32 = gamma_ids
        .iter()
        .map(|&id| model.store.value(id).data().iter().map(|g| g.abs()).sum::<f32>())
        .sum();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, augment: false, ..Default::default() };
    train(&mut model, &data, &tr, &va, &cfg, 12).unwrap();
    let after: f32 = gamma_ids
        .iter()
        .map(|&id| model.store.value(id).data().iter().map(|g| g.abs()).sum::<f32>())
        .sum();
    assert!(after.is_finite() && after > 0.0);
    // the l1 penalty pulls the exchange gammas down from their init
    assert!(after < before, "l1 penalty had no shrinking effect: {before} -> {after}");
}

#[test]
fn random_mri_training_scheme_runs() {
    let data = tiny_synthetic(24, 0.8, 0.0, 11);
    let (tr, va, _) = split_indices(&data, 11);
    let mut model = build_model(FusionStrategy::Late, &tiny_backbone(), None, 7).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        augment: false,
        train_scheme: TrainScheme::RandomMriPairs,
        ..Default::default()
    };
    train(&mut model, &data, &tr, &va, &cfg, 13).unwrap();
    let bacc = validate_bacc(&mut model, &data, &va, &cfg).unwrap();
    assert!((0.0..=1.0).contains(&bacc));
}
