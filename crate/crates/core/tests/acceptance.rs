//! Acceptance suite: one test per project acceptance criterion, each
//! printing a `criterion N: PASS` line (visible with `--nocapture`).

mod common;

use common::{gradcheck, project, rand_tensor, rand_tensor_away_from_zero};
use mmfusion::backbone::BackboneConfig;
use mmfusion::data::synthetic::{generate_synthetic, RegionSpec, SyntheticConfig};
use mmfusion::data::{stratified_split, LoadedDataset, Volume};
use mmfusion::attribution::{integrated_gradients, modality_contribution};
use mmfusion::eval::{balanced_accuracy, evaluate, train, PairingScheme, TrainConfig, TrainScheme};
use mmfusion::fusion::{build_model, channel_exchange, ExchangeConfig, FusionStrategy, MultiModalModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::{Mutex, OnceLock};

// ---------------------------------------------------------------- fixtures

struct TrainedFixture {
    data: LoadedDataset,
    test_idx: Vec<usize>,
    model: Mutex<MultiModalModel>,
    correct: f64,
    random_mri: f64,
    random_pet: f64,
}

fn desk_backbone() -> BackboneConfig {
    BackboneConfig { block_channels: [4, 8, 16, 32], dropout: 0.0, ..Default::default() }
}

fn criterion_synthetic(s_pet: f64, s_mri: f64, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        subjects: 200,
        shape: [32, 32, 32],
        spacing: [1.5; 3],
        s_pet,
        s_mri,
        noise_sigma: 0.05,
        num_classes: 2,
        pet_region: RegionSpec { center: [16.0, 16.0, 11.0], radius: 5.0 },
        mri_region: RegionSpec { center: [16.0, 16.0, 21.0], radius: 5.0 },
        smooth_sigma: 2.0,
        seed,
    }
}

fn train_late_fusion(s_pet: f64, s_mri: f64) -> TrainedFixture {
    let data = LoadedDataset::from_synthetic(generate_synthetic(&criterion_synthetic(s_pet, s_mri, 7)).unwrap());
    let plans = stratified_split(&data.records, 7, 1).unwrap();
    let by_id = data.index_by_id();
    let idx = |ids: &[String]| ids.iter().map(|i| by_id[i.as_str()]).collect::<Vec<_>>();
    let (tr, va, te) = (idx(&plans[0].train), idx(&plans[0].val), idx(&plans[0].test));
    let mut model = build_model(FusionStrategy::Late, &desk_backbone(), None, 11).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        augment: false,
        train_scheme: TrainScheme::CorrectPairs,
        ..Default::default()
    };
    train(&mut model, &data, &tr, &va, &cfg, 13).unwrap();
    let mut bacc = |scheme| evaluate(&mut model, &data, &te, scheme, 16, 17).unwrap().bacc_mean;
    let (correct, random_mri, random_pet) = (
        bacc(PairingScheme::Correct),
        bacc(PairingScheme::RandomMri),
        bacc(PairingScheme::RandomPet),
    );
    TrainedFixture { data, test_idx: te, model: Mutex::new(model), correct, random_mri, random_pet }
}

fn pet_dominant() -> &'static TrainedFixture {
    static FIX: OnceLock<TrainedFixture> = OnceLock::new();
    FIX.get_or_init(|| train_late_fusion(0.5, 0.0))
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { block_channels: [2, 2, 4, 4], head_hidden: 8, dropout: 0.0, ..Default::default() }
}

// --------------------------------------------------------------- criteria

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    let mut worst = 0.0f64;

    for &stride in &[1usize, 2] {
        let x = rand_tensor(&[2, 2, 4, 4, 4], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[2, 2, 3, 3, 3], -0.5, 0.5, &mut rng);
        let b = rand_tensor(&[2], -0.5, 0.5, &mut rng);
        let od = (4 + 2 - 3) / stride + 1;
        let proj = rand_tensor(&[2, 2, od, od, od], -1.0, 1.0, &mut rng);
        worst = worst.max(gradcheck(&[x, w, b], &|tape, vars| {
            let y = tape.conv3d(vars[0], vars[1], Some(vars[2]), stride).unwrap();
            project(tape, y, &proj)
        }));
    }

    let x = rand_tensor(&[3, 2, 5], -2.0, 2.0, &mut rng);
    let gamma = rand_tensor(&[2], 0.5, 1.5, &mut rng);
    let beta = rand_tensor(&[2], -0.5, 0.5, &mut rng);
    let proj = rand_tensor(&[3, 2, 5], -1.0, 1.0, &mut rng);
    worst = worst.max(gradcheck(&[x, gamma, beta], &|tape, vars| {
        let (y, _, _) = tape.batch_norm_train(vars[0], vars[1], vars[2], 1e-5).unwrap();
        project(tape, y, &proj)
    }));

    let x = rand_tensor(&[3, 4], -1.0, 1.0, &mut rng);
    let w = rand_tensor(&[2, 4], -1.0, 1.0, &mut rng);
    let b = rand_tensor(&[2], -1.0, 1.0, &mut rng);
    let labels = vec![0usize, 1, 0];
    worst = worst.max(gradcheck(&[x, w, b], &|tape, vars| {
        let y = tape.linear(vars[0], vars[1], vars[2]).unwrap();
        let lp = tape.log_softmax(y).unwrap();
        tape.nll_mean(lp, &labels).unwrap()
    }));

    let x = rand_tensor_away_from_zero(&[2, 3, 2, 2, 2], &mut rng);
    let proj = rand_tensor(&[2, 3], -1.0, 1.0, &mut rng);
    worst = worst.max(gradcheck(&[x], &|tape, vars| {
        let r = tape.relu(vars[0]);
        let y = tape.global_avg_pool(r).unwrap();
        project(tape, y, &proj)
    }));

    println!("criterion 1: PASS — analytic gradients match central differences (worst rel err {worst:.2e})");
}

#[test]
fn criterion_02_architecture_invariants() {
    use mmfusion::nn::ParamStore;
    let mut store = ParamStore::<f32>::new();
    let cfg = BackboneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bb = mmfusion::backbone::Backbone::build(&mut store, "", &cfg, &mut rng).unwrap();

    assert_eq!(bb.conv_layer_count(), 12);
    for conv in bb.conv_layers() {
        assert_eq!(&store.value(conv.weight).shape()[2..], &[3, 3, 3]);
    }
    assert_eq!(
        bb.spatial_plan([113, 137, 113]),
        vec![[113, 137, 113], [57, 69, 57], [29, 35, 29], [15, 18, 15]]
    );
    assert_eq!(bb.fc1.in_features, cfg.block_channels[3]);
    assert_eq!(bb.fc1.out_features, 64);
    assert_eq!(bb.fc2.out_features, cfg.num_classes);

    let late = build_model(FusionStrategy::Late, &cfg, None, 1).unwrap();
    let mlp = late.mlp_layers().unwrap();
    assert_eq!(
        (mlp[0].in_features, mlp[0].out_features, mlp[1].out_features, mlp[2].out_features),
        (2 * cfg.block_channels[3], 128, 64, cfg.num_classes)
    );

    let middle = build_model(FusionStrategy::Middle, &cfg, None, 1).unwrap();
    let b = middle.branches();
    assert_eq!(b[0].stem.weight, b[1].stem.weight, "middle branches must share conv weights");
    assert_ne!(b[0].blocks[0].bn2.gamma, b[1].blocks[0].bn2.gamma, "BN must be per-branch");

    println!("criterion 2: PASS — backbone (12×3³ convs, 113/137/113→15/18/15) and fusion wiring hold");
}

#[test]
fn criterion_03_integrated_gradients_completeness() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for strategy in [FusionStrategy::Late, FusionStrategy::Early, FusionStrategy::SinglePet, FusionStrategy::Middle] {
        let mut model = build_model(strategy, &tiny_backbone(), None, 50).unwrap();
        for _ in 0..6 {
            let mk = |rng: &mut ChaCha8Rng| {
                Volume::new([8, 8, 8], [1.5; 3], (0..512).map(|_| rng.random::<f32>()).collect()).unwrap()
            };
            let (pet, mri) = (mk(&mut rng), mk(&mut rng));
            let class = rng.random_range(0..2);
            let r = integrated_gradients(&mut model, &pet, &mri, class, 256, 32).unwrap();
            let rel = r.relative_residual();
            assert!(rel <= 0.01, "{strategy:?}: completeness residual {rel:.4} > 1%");
            worst = worst.max(rel);
            checked += 1;
        }
    }
    assert!(checked >= 20);
    println!("criterion 3: PASS — IG completeness ≤1% on {checked} inputs at 256 steps (worst {worst:.4})");
}

#[test]
fn criterion_04_pet_signal_dominates_pairing_behavior() {
    let fix = pet_dominant();
    assert!(fix.correct >= 0.85, "correct-pairing BACC {:.3} < 0.85", fix.correct);
    assert!(
        (fix.correct - fix.random_mri).abs() <= 0.05,
        "random-MRI BACC {:.3} strays from correct {:.3}",
        fix.random_mri,
        fix.correct
    );
    assert!(fix.random_pet <= 0.60, "random-PET BACC {:.3} > 0.60", fix.random_pet);
    println!(
        "criterion 4: PASS — PET-signal late fusion: correct {:.3}, random-MRI {:.3}, random-PET {:.3}",
        fix.correct, fix.random_mri, fix.random_pet
    );
}

#[test]
fn criterion_05_mri_signal_mirror() {
    let fix = train_late_fusion(0.0, 0.5);
    assert!(fix.correct >= 0.85, "correct-pairing BACC {:.3} < 0.85", fix.correct);
    assert!(
        (fix.correct - fix.random_pet).abs() <= 0.05,
        "random-PET BACC {:.3} strays from correct {:.3}",
        fix.random_pet,
        fix.correct
    );
    assert!(fix.random_mri <= 0.60, "random-MRI BACC {:.3} > 0.60", fix.random_mri);
    println!(
        "criterion 5: PASS — MRI-signal late fusion: correct {:.3}, random-PET {:.3}, random-MRI {:.3}",
        fix.correct, fix.random_pet, fix.random_mri
    );
}

#[test]
fn criterion_06_attribution_tracks_the_informative_modality() {
    let fix = pet_dominant();
    let mut model = fix.model.lock().unwrap();
    let subjects: Vec<usize> = fix.test_idx.iter().copied().take(20).collect();
    let mut pet_wins = 0usize;
    for &i in &subjects {
        let label = fix.data.records[i].diagnosis.label(2).unwrap();
        let r = integrated_gradients(&mut model, &fix.data.pet[i], &fix.data.mri[i], label, 32, 8).unwrap();
        let c = modality_contribution(&r);
        if c.sum_abs_pet > c.sum_abs_mri {
            pet_wins += 1;
        }
    }
    let frac = pet_wins as f64 / subjects.len() as f64;
    assert!(frac >= 0.8, "PET dominated attribution for only {pet_wins}/{} subjects", subjects.len());
    println!(
        "criterion 6: PASS — Σ|IG| favors PET for {pet_wins}/{} test subjects ({:.0}%)",
        subjects.len(),
        frac * 100.0
    );
}

#[test]
fn criterion_07_balanced_accuracy_is_duplication_invariant_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for classes in [2usize, 3] {
        for _ in 0..25 {
            let n = rng.random_range(3..40);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let base = balanced_accuracy(&labels, &preds, classes).unwrap();
            // dataset duplicated 100× must give the bit-identical value
            let mut l100 = Vec::new();
            let mut p100 = Vec::new();
            for _ in 0..100 {
                l100.extend_from_slice(&labels);
                p100.extend_from_slice(&preds);
            }
            let dup = balanced_accuracy(&l100, &p100, classes).unwrap();
            assert_eq!(base.to_bits(), dup.to_bits(), "duplication changed BACC bits");
            // and 100 recomputations must be bit-identical
            for _ in 0..100 {
                assert_eq!(balanced_accuracy(&labels, &preds, classes).unwrap().to_bits(), base.to_bits());
            }
        }
    }
    println!("criterion 7: PASS — BACC bit-identical under 100× duplication and repeated evaluation");
}

#[test]
fn criterion_08_channel_exchange_semantics() {
    use mmfusion::tensor::Tensor;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    // independent naive oracle over random cases
    for _ in 0..50 {
        let (n, c, s) = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..5));
        let numel = n * c * s;
        let fa = Tensor::from_vec(&[n, c, s], (0..numel).map(|_| rng.random::<f32>()).collect()).unwrap();
        let fb = Tensor::from_vec(&[n, c, s], (0..numel).map(|_| rng.random::<f32>()).collect()).unwrap();
        let ga: Vec<f32> = (0..c).map(|_| rng.random::<f32>() * 0.04).collect();
        let gb: Vec<f32> = (0..c).map(|_| rng.random::<f32>() * 0.04).collect();
        let tau = 0.02f32;
        let (oa, ob) = channel_exchange(&fa, &fb, &ga, &gb, tau).unwrap();
        for sample in 0..n {
            for ch in 0..c {
                let base = (sample * c + ch) * s;
                let expect_a = if ga[ch].abs() < tau { fb.data() } else { fa.data() };
                let expect_b = if gb[ch].abs() < tau { fa.data() } else { fb.data() };
                assert_eq!(&oa.data()[base..base + s], &expect_a[base..base + s]);
                assert_eq!(&ob.data()[base..base + s], &expect_b[base..base + s]);
            }
        }
    }

    // τ → 0: an exchanging middle model converges to the non-exchanging one
    let mk = |threshold: f64, blocks: Vec<usize>| {
        let exch = ExchangeConfig { bn_threshold: threshold, exchange_blocks: blocks, ..Default::default() };
        build_model(FusionStrategy::Middle, &tiny_backbone(), Some(exch), 42).unwrap()
    };
    let mut with_exchange = mk(1e-12, vec![0, 1, 2, 3]);
    let mut without = mk(0.5, vec![]);
    let mut rng2 = ChaCha8Rng::seed_from_u64(1);
    use mmfusion::tensor::Tensor as T32;
    let pet = T32::from_vec(&[2, 1, 8, 8, 8], (0..1024).map(|_| rng2.random::<f32>()).collect()).unwrap();
    let mri = T32::from_vec(&[2, 1, 8, 8, 8], (0..1024).map(|_| rng2.random::<f32>()).collect()).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let a = with_exchange.run(pet.clone(), mri.clone(), false, &mut r).unwrap();
    let b = without.run(pet, mri, false, &mut r).unwrap();
    let (la, lb) = (a.tape.value(a.output.logp), b.tape.value(b.output.logp));
    let max_diff = la
        .data()
        .iter()
        .zip(lb.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    assert!(max_diff <= 1e-6, "τ→0 limit differs from no-exchange model by {max_diff}");

    println!("criterion 8: PASS — exchange matches the threshold oracle; τ→0 limit within 1e-6");
}

#[test]
fn criterion_09_unused_modality_pairing_is_bit_identical() {
    let syn = SyntheticConfig {
        subjects: 40,
        shape: [12, 12, 12],
        s_pet: 0.6,
        s_mri: 0.0,
        pet_region: RegionSpec { center: [6.0, 6.0, 4.0], radius: 2.5 },
        mri_region: RegionSpec { center: [6.0, 6.0, 8.0], radius: 2.5 },
        seed: 91,
        ..criterion_synthetic(0.6, 0.0, 91)
    };
    let data = LoadedDataset::from_synthetic(generate_synthetic(&syn).unwrap());
    let plans = stratified_split(&data.records, 9, 1).unwrap();
    let by_id = data.index_by_id();
    let idx = |ids: &[String]| ids.iter().map(|i| by_id[i.as_str()]).collect::<Vec<_>>();
    let (tr, va, te) = (idx(&plans[0].train), idx(&plans[0].val), idx(&plans[0].test));
    let mut model = build_model(FusionStrategy::SinglePet, &tiny_backbone(), None, 5).unwrap();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, augment: false, ..Default::default() };
    train(&mut model, &data, &tr, &va, &cfg, 11).unwrap();

    let correct = evaluate(&mut model, &data, &te, PairingScheme::Correct, 16, 21).unwrap();
    let random = evaluate(&mut model, &data, &te, PairingScheme::RandomMri, 16, 21).unwrap();
    assert_eq!(correct.bacc_mean.to_bits(), random.bacc_mean.to_bits());
    assert_eq!(correct.confusion, random.confusion);
    for rep in &random.per_rep_bacc {
        assert_eq!(rep.to_bits(), correct.bacc_mean.to_bits());
    }
    println!("criterion 9: PASS — PET-only model: random-MRI evaluation bit-identical to correct pairing");
}

#[test]
fn criterion_10_cli_pipeline_is_reproducible() {
    let config = serde_json::json!({
        "synthetic": {
            "subjects": 60,
            "shape": [16, 16, 16],
            "s_pet": 0.5,
            "s_mri": 0.0,
            "num_classes": 2,
            "pet_region": {"center": [8.0, 8.0, 5.0], "radius": 3.0},
            "mri_region": {"center": [8.0, 8.0, 11.0], "radius": 3.0},
            "seed": 1
        },
        "folds": 1,
        "strategies": ["late"],
        "backbone": {
            "in_channels": 1, "block_channels": [2, 2, 4, 4], "num_classes": 2,
            "dropout": 0.0, "head_hidden": 8, "bn_momentum": 0.05, "bn_eps": 1e-5
        },
        "train": {"num_classes": 2, "epochs": 5, "batch_size": 16, "learning_rate": 0.005,
                   "weight_decay": 1e-4, "plateau_factor": 0.1, "plateau_patience": 10,
                   "min_learning_rate": 1e-6, "augment": false, "train_scheme": "correct_pairs"}
    });

    let run = |seed: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("cfg.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        for verb in ["generate", "split", "train", "evaluate", "report"] {
            let out = std::process::Command::new(env!("CARGO_BIN_EXE_mmfusion"))
                .args([verb, "--config"])
                .arg(&cfg_path)
                .args(["--seed", seed, "--out"])
                .arg(dir.path())
                .output()
                .unwrap();
            assert_eq!(
                out.status.code(),
                Some(0),
                "{verb} failed: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        }
        (
            std::fs::read(dir.path().join("results.csv")).unwrap(),
            std::fs::read(dir.path().join("summary.csv")).unwrap(),
            std::fs::read(dir.path().join("report.md")).unwrap(),
        )
    };

    let a = run("5");
    let b = run("5");
    assert_eq!(a.0, b.0, "results.csv differs between identical runs");
    assert_eq!(a.1, b.1, "summary.csv differs between identical runs");
    assert_eq!(a.2, b.2, "report.md differs between identical runs");
    println!("criterion 10: PASS — full CLI pipeline twice with one seed → byte-identical result files");
}
