//! Training and evaluation: balanced accuracy, randomized modality pairing,
//! the training loop (AdamW + reduce-on-plateau, best-validation-epoch
//! selection), and repeated-pairing test evaluation.

use crate::checkpoint::Snapshot;
use crate::data::{augment, LoadedDataset, Volume};
use crate::error::{Error, Result};
use crate::fusion::MultiModalModel;
use crate::nn::{AdamW, PlateauMode, PlateauScheduler};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How PET and MRI volumes are paired at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingScheme {
    /// Each subject's own PET and MRI.
    Correct,
    /// PET kept, MRI drawn from a different subject (derangement).
    RandomMri,
    /// MRI kept, PET drawn from a different subject (derangement).
    RandomPet,
}

impl PairingScheme {
    pub const ALL: [PairingScheme; 3] = [PairingScheme::Correct, PairingScheme::RandomMri, PairingScheme::RandomPet];

    pub fn label(self) -> &'static str {
        match self {
            PairingScheme::Correct => "correct",
            PairingScheme::RandomMri => "random_mri",
            PairingScheme::RandomPet => "random_pet",
        }
    }
}

impl std::str::FromStr for PairingScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correct" => Ok(PairingScheme::Correct),
            "random_mri" => Ok(PairingScheme::RandomMri),
            "random_pet" => Ok(PairingScheme::RandomPet),
            other => Err(Error::config(format!("unknown pairing scheme '{other}'"))),
        }
    }
}

/// How pairs are presented during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScheme {
    CorrectPairs,
    /// Re-derange the MRI assignment every epoch.
    RandomMriPairs,
}

/// Mean of per-class recalls. Classes absent from `labels` are excluded (with
/// a warning); an empty label list is an error.
pub fn balanced_accuracy(labels: &[usize], preds: &[usize], num_classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::data("balanced accuracy of an empty set".to_string()));
    }
    if labels.len() != preds.len() {
        return Err(Error::shape(format!(
            "label/prediction count mismatch: {} vs {}",
            labels.len(),
            preds.len()
        )));
    }
    let mut total = vec![0usize; num_classes];
    let mut hit = vec![0usize; num_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= num_classes {
            return Err(Error::data(format!("label {y} out of range for {num_classes} classes")));
        }
        total[y] += 1;
        if p == y {
            hit[y] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if total[c] == 0 {
            log::warn!("class {c} absent from evaluation set; excluded from balanced accuracy");
            continue;
        }
        acc += hit[c] as f64 / total[c] as f64;
        present += 1;
    }
    if present == 0 {
        return Err(Error::data("no class present in evaluation set".to_string()));
    }
    Ok(acc / present as f64)
}

/// A uniform random derangement (no index maps to itself) via Sattolo's
/// single-cycle shuffle. Requires at least two elements.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::data(format!("cannot derange {n} element(s)")));
    }
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    Ok(p)
}

fn stack_volumes(vols: &[&Volume]) -> Result<Tensor<f32>> {
    let shape = vols[0].shape;
    let mut data = Vec::with_capacity(vols.len() * vols[0].numel());
    for v in vols {
        if v.shape != shape {
            return Err(Error::shape("volumes in a batch must share a shape".to_string()));
        }
        data.extend_from_slice(&v.data);
    }
    Tensor::from_vec(&[vols.len(), 1, shape[0], shape[1], shape[2]], data)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
    pub augment: bool,
    pub train_scheme: TrainScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            num_classes: 2,
            epochs: 120,
            batch_size: 16,
            learning_rate: 0.005,
            weight_decay: 1e-4,
            plateau_factor: 0.1,
            plateau_patience: 10,
            min_learning_rate: 1e-6,
            augment: true,
            train_scheme: TrainScheme::CorrectPairs,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) {
            return Err(Error::config("plateau_factor must be in (0,1)".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_bacc: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_bacc: f64,
}

/// Class labels of a subject subset under the task's class count.
pub fn subset_labels(data: &LoadedDataset, ids: &[usize], num_classes: usize) -> Result<Vec<usize>> {
    ids.iter()
        .map(|&i| {
            data.records[i].diagnosis.label(num_classes).ok_or_else(|| {
                Error::data(format!(
                    "subject {} has no label in the {num_classes}-class task",
                    data.records[i].subject_id
                ))
            })
        })
        .collect()
}

/// Argmax predictions over a subject subset; `mri_of[k]` gives the position
/// within `ids` whose MRI is paired with PET `ids[k]` (and vice versa for
/// `pet_of`). Identity slices mean correct pairing.
pub fn predict(
    model: &mut MultiModalModel,
    data: &LoadedDataset,
    ids: &[usize],
    pet_of: &[usize],
    mri_of: &[usize],
    batch_size: usize,
) -> Result<Vec<usize>> {
    let classes = model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // inference path never draws
    let mut preds = Vec::with_capacity(ids.len());
    for chunk in (0..ids.len()).collect::<Vec<_>>().chunks(batch_size) {
        let pet: Vec<&Volume> = chunk.iter().map(|&k| &data.pet[ids[pet_of[k]]]).collect();
        let mri: Vec<&Volume> = chunk.iter().map(|&k| &data.mri[ids[mri_of[k]]]).collect();
        let pass = model.run(stack_volumes(&pet)?, stack_volumes(&mri)?, false, &mut rng)?;
        let lp = pass.tape.value(pass.output.logp);
        for row in 0..chunk.len() {
            let r = &lp.data()[row * classes..(row + 1) * classes];
            let mut best = 0;
            for c in 1..classes {
                if r[c] > r[best] {
                    best = c;
                }
            }
            preds.push(best);
        }
    }
    Ok(preds)
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Validation balanced accuracy under correct pairing.
pub fn validate_bacc(
    model: &mut MultiModalModel,
    data: &LoadedDataset,
    val_ids: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let id = identity(val_ids.len());
    let preds = predict(model, data, val_ids, &id, &id, cfg.batch_size)?;
    balanced_accuracy(&subset_labels(data, val_ids, cfg.num_classes)?, &preds, cfg.num_classes)
}

/// Train a model in place. The weights left in the model afterwards are those
/// of the epoch with the best validation balanced accuracy.
pub fn train(
    model: &mut MultiModalModel,
    data: &LoadedDataset,
    train_ids: &[usize],
    val_ids: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_ids.is_empty() || val_ids.is_empty() {
        return Err(Error::data("train and validation sets must be nonempty".to_string()));
    }
    if model.num_classes() != cfg.num_classes {
        return Err(Error::config("model and training class counts differ".to_string()));
    }
    let labels = subset_labels(data, train_ids, cfg.num_classes)?;
    let l1_lambda = model.config.exchange.as_ref().map(|e| e.l1_lambda as f32);

    let mut opt = AdamW::new(&model.store, cfg.learning_rate as f32, cfg.weight_decay as f32);
    let mut sched = PlateauScheduler::new(
        PlateauMode::Maximize,
        cfg.learning_rate,
        cfg.plateau_factor,
        cfg.plateau_patience,
        cfg.min_learning_rate,
    )?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Snapshot)> = None;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("train/epoch{epoch}")));
        let mut order: Vec<usize> = (0..train_ids.len()).collect();
        order.shuffle(&mut rng);
        // within-epoch MRI reassignment for the randomized-pair regime
        let mri_map: Vec<usize> = match cfg.train_scheme {
            TrainScheme::CorrectPairs => identity(train_ids.len()),
            TrainScheme::RandomMriPairs => derangement(train_ids.len(), &mut rng)?,
        };

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // batch-norm in training mode needs at least two samples
            if chunk.len() < 2 {
                continue;
            }
            let mut pet_vols = Vec::with_capacity(chunk.len());
            let mut mri_vols = Vec::with_capacity(chunk.len());
            let mut y = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let pv = &data.pet[train_ids[k]];
                let mv = &data.mri[train_ids[mri_map[k]]];
                if cfg.augment {
                    pet_vols.push(augment(pv, &mut rng));
                    mri_vols.push(augment(mv, &mut rng));
                } else {
                    pet_vols.push(pv.clone());
                    mri_vols.push(mv.clone());
                }
                y.push(labels[k]);
            }
            let pet = stack_volumes(&pet_vols.iter().collect::<Vec<_>>())?;
            let mri = stack_volumes(&mri_vols.iter().collect::<Vec<_>>())?;

            let mut tape = crate::tape::Tape::new();
            let pet_var = tape.leaf(pet);
            let mri_var = tape.leaf(mri);
            let out = model.forward(&mut tape, pet_var, mri_var, true, &mut rng)?;
            let mut loss = tape.nll_mean(out.logp, &y)?;
            if let (Some(lambda), Some(l1)) = (l1_lambda, out.l1) {
                let penalty = tape.scale(l1, lambda);
                loss = tape.add(loss, penalty)?;
            }
            let loss_val = tape.value(loss).item() as f64;
            if !loss_val.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            let (_, param_grads) = tape.backward(loss)?;
            model.store.zero_grads();
            model.store.accumulate(&param_grads);
            opt.step(&mut model.store);
            loss_sum += loss_val;
            batches += 1;
        }

        let val_bacc = validate_bacc(model, data, val_ids, cfg)?;
        let lr = sched.step(val_bacc);
        opt.lr = lr as f32;

        if best.as_ref().map_or(true, |(_, b, _)| val_bacc > *b) {
            best = Some((epoch, val_bacc, Snapshot::of(model)));
        }
        history.push(EpochStats {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_bacc,
            learning_rate: lr,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} val_bacc {:.4} lr {:.6}",
            history.last().unwrap().train_loss,
            val_bacc,
            lr
        );
    }

    let (best_epoch, best_val_bacc, snapshot) = best.expect("epochs >= 1");
    snapshot.restore(model)?;
    Ok(TrainHistory { epochs: history, best_epoch, best_val_bacc })
}

/// Number of repetitions used for randomized pairings.
pub const RANDOM_PAIRING_REPS: usize = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub scheme: PairingScheme,
    pub bacc_mean: f64,
    pub bacc_std: f64,
    pub per_rep_bacc: Vec<f64>,
    /// Row = true class, column = predicted; averaged over repetitions.
    pub confusion: Vec<Vec<f64>>,
}

/// Sample (n−1) standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

/// Evaluate a trained model on a subject subset under a pairing scheme.
/// Randomized schemes are repeated `RANDOM_PAIRING_REPS` times with fresh
/// derangements; the correct scheme runs once.
pub fn evaluate(
    model: &mut MultiModalModel,
    data: &LoadedDataset,
    test_ids: &[usize],
    scheme: PairingScheme,
    batch_size: usize,
    seed: u64,
) -> Result<EvalResult> {
    let classes = model.num_classes();
    let labels = subset_labels(data, test_ids, classes)?;
    let reps = match scheme {
        PairingScheme::Correct => 1,
        _ => RANDOM_PAIRING_REPS,
    };
    let n = test_ids.len();
    let mut per_rep_bacc = Vec::with_capacity(reps);
    let mut confusion = vec![vec![0.0f64; classes]; classes];
    for rep in 0..reps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("eval/{}/rep{rep}", scheme.label())));
        let id = identity(n);
        let (pet_of, mri_of) = match scheme {
            PairingScheme::Correct => (id.clone(), id),
            PairingScheme::RandomMri => (id, derangement(n, &mut rng)?),
            PairingScheme::RandomPet => (derangement(n, &mut rng)?, id),
        };
        let preds = predict(model, data, test_ids, &pet_of, &mri_of, batch_size)?;
        per_rep_bacc.push(balanced_accuracy(&labels, &preds, classes)?);
        for (&y, &p) in labels.iter().zip(&preds) {
            confusion[y][p] += 1.0;
        }
    }
    for row in &mut confusion {
        for v in row.iter_mut() {
            *v /= reps as f64;
        }
    }
    Ok(EvalResult {
        scheme,
        bacc_mean: per_rep_bacc.iter().sum::<f64>() / reps as f64,
        bacc_std: sample_std(&per_rep_bacc),
        per_rep_bacc,
        confusion,
    })
}
