//! Single-modality baselines and the three fusion strategies.
//!
//! * early: elementwise GM ⊙ PET product, single branch
//! * late: two independent branches, embeddings concatenated into an MLP
//! * middle: shared conv weights, per-branch BN, threshold-guided channel
//!   exchange at the second BN of every residual block, ℓ1-penalized gammas

use crate::backbone::{block_merge, block_pre_merge, Backbone, BackboneConfig};
use crate::data::Volume;
use crate::error::{Error, Result};
use crate::nn::{LinearLayer, ParamStore};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    SinglePet,
    SingleMri,
    Early,
    Middle,
    Late,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::SinglePet,
        FusionStrategy::SingleMri,
        FusionStrategy::Early,
        FusionStrategy::Middle,
        FusionStrategy::Late,
    ];

    pub fn is_multimodal(self) -> bool {
        matches!(self, FusionStrategy::Early | FusionStrategy::Middle | FusionStrategy::Late)
    }

    pub fn label(self) -> &'static str {
        match self {
            FusionStrategy::SinglePet => "PET only",
            FusionStrategy::SingleMri => "MRI only",
            FusionStrategy::Early => "Early Fusion",
            FusionStrategy::Middle => "Middle Fusion",
            FusionStrategy::Late => "Late Fusion",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_pet" => Ok(FusionStrategy::SinglePet),
            "single_mri" => Ok(FusionStrategy::SingleMri),
            "early" => Ok(FusionStrategy::Early),
            "middle" => Ok(FusionStrategy::Middle),
            "late" => Ok(FusionStrategy::Late),
            other => Err(Error::config(format!("unknown fusion strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExchangeConfig {
    pub l1_lambda: f64,
    pub bn_threshold: f64,
    /// Residual blocks whose second BN is an exchange point.
    pub exchange_blocks: Vec<usize>,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        ExchangeConfig { l1_lambda: 0.005, bn_threshold: 0.02, exchange_blocks: vec![0, 1, 2, 3] }
    }
}

impl ExchangeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bn_threshold <= 0.0 {
            return Err(Error::config("bn_threshold must be > 0".to_string()));
        }
        if self.l1_lambda < 0.0 {
            return Err(Error::config("l1_lambda must be >= 0".to_string()));
        }
        if self.exchange_blocks.iter().any(|&b| b >= crate::backbone::BLOCK_COUNT) {
            return Err(Error::config("exchange block index out of range".to_string()));
        }
        Ok(())
    }
}

/// Architecture + strategy description; everything needed to rebuild a model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionModelConfig {
    pub strategy: FusionStrategy,
    pub backbone: BackboneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exchange: Option<ExchangeConfig>,
}

/// Elementwise GM ⊙ PET masking of two preprocessed volumes.
pub fn early_fuse(gm: &Volume, pet: &Volume) -> Result<Volume> {
    if gm.shape != pet.shape {
        return Err(Error::shape(format!(
            "early_fuse shape mismatch: {:?} vs {:?}",
            gm.shape, pet.shape
        )));
    }
    let data: Vec<f32> = gm.data.iter().zip(&pet.data).map(|(&a, &b)| a * b).collect();
    Ok(Volume { shape: gm.shape, spacing: gm.spacing, data })
}

/// Exchange masks per channel: branch takes the other branch's channel where
/// its own BN scaling factor magnitude falls below the threshold.
pub fn exchange_masks(gamma_a: &[f32], gamma_b: &[f32], tau: f32) -> Result<(Vec<bool>, Vec<bool>)> {
    if gamma_a.len() != gamma_b.len() {
        return Err(Error::shape("exchange channel counts differ".to_string()));
    }
    let a_takes_b = gamma_a.iter().map(|g| g.abs() < tau).collect();
    let b_takes_a = gamma_b.iter().map(|g| g.abs() < tau).collect();
    Ok((a_takes_b, b_takes_a))
}

/// Pure-tensor channel exchange between two post-BN feature maps. The
/// exchange is bidirectional and simultaneous: when both gammas are
/// sub-threshold the channels swap.
pub fn channel_exchange(
    feat_a: &Tensor<f32>,
    feat_b: &Tensor<f32>,
    gamma_a: &[f32],
    gamma_b: &[f32],
    tau: f32,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if feat_a.shape() != feat_b.shape() {
        return Err(Error::shape("channel_exchange feature shapes differ".to_string()));
    }
    let shape = feat_a.shape().to_vec();
    if shape.len() < 2 || shape[1] != gamma_a.len() {
        return Err(Error::shape("channel_exchange gamma length must match channel dim".to_string()));
    }
    let (a_takes_b, b_takes_a) = exchange_masks(gamma_a, gamma_b, tau)?;
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let mut out_a = feat_a.clone();
    let mut out_b = feat_b.clone();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            if a_takes_b[ch] {
                out_a.data_mut()[base..base + spatial].copy_from_slice(&feat_b.data()[base..base + spatial]);
            }
            if b_takes_a[ch] {
                out_b.data_mut()[base..base + spatial].copy_from_slice(&feat_a.data()[base..base + spatial]);
            }
        }
    }
    Ok((out_a, out_b))
}

enum ModelKind {
    Single(Backbone<f32>),
    Late {
        pet: Backbone<f32>,
        mri: Backbone<f32>,
        mlp: Vec<LinearLayer>,
    },
    Middle {
        pet: Backbone<f32>,
        mri: Backbone<f32>,
        exchange: ExchangeConfig,
    },
}

/// One output of a model forward pass on a tape.
pub struct ModelOutput {
    /// Log-probabilities [N, classes].
    pub logp: Var,
    /// Σ|gamma| over exchange-point BNs (middle fusion only).
    pub l1: Option<Var>,
}

/// A complete forward pass including the input leaves (kept for attribution).
pub struct ForwardPass {
    pub tape: Tape<f32>,
    pub pet: Var,
    pub mri: Var,
    pub output: ModelOutput,
}

pub struct MultiModalModel {
    pub config: FusionModelConfig,
    pub store: ParamStore<f32>,
    kind: ModelKind,
}

/// Build a model for a strategy. `exchange` must be given exactly for the
/// middle strategy.
pub fn build_model(
    strategy: FusionStrategy,
    backbone_cfg: &BackboneConfig,
    exchange: Option<ExchangeConfig>,
    seed: u64,
) -> Result<MultiModalModel> {
    if strategy != FusionStrategy::Middle && exchange.is_some() {
        return Err(Error::config(format!(
            "exchange config only applies to middle fusion, not {:?}",
            strategy
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let kind = match strategy {
        FusionStrategy::SinglePet | FusionStrategy::SingleMri | FusionStrategy::Early => {
            ModelKind::Single(Backbone::build(&mut store, "", backbone_cfg, &mut rng)?)
        }
        FusionStrategy::Late => {
            let pet = Backbone::build(&mut store, "pet.", backbone_cfg, &mut rng)?;
            let mri = Backbone::build(&mut store, "mri.", backbone_cfg, &mut rng)?;
            let c4 = backbone_cfg.block_channels[3];
            let mlp = vec![
                LinearLayer::build(&mut store, "mlp.0", 2 * c4, 128, &mut rng),
                LinearLayer::build(&mut store, "mlp.1", 128, 64, &mut rng),
                LinearLayer::build(&mut store, "mlp.2", 64, backbone_cfg.num_classes, &mut rng),
            ];
            ModelKind::Late { pet, mri, mlp }
        }
        FusionStrategy::Middle => {
            let exchange = exchange.unwrap_or_default();
            exchange.validate()?;
            let pet = Backbone::build(&mut store, "pet.", backbone_cfg, &mut rng)?;
            let mri = pet.clone_with_own_bn(&mut store, "mri.");
            ModelKind::Middle { pet, mri, exchange }
        }
    };
    let config = FusionModelConfig {
        strategy,
        backbone: backbone_cfg.clone(),
        exchange: match &kind {
            ModelKind::Middle { exchange, .. } => Some(exchange.clone()),
            _ => None,
        },
    };
    Ok(MultiModalModel { config, store, kind })
}

pub fn build_model_from_config(cfg: &FusionModelConfig, seed: u64) -> Result<MultiModalModel> {
    build_model(cfg.strategy, &cfg.backbone, cfg.exchange.clone(), seed)
}

impl MultiModalModel {
    pub fn strategy(&self) -> FusionStrategy {
        self.config.strategy
    }

    pub fn num_classes(&self) -> usize {
        self.config.backbone.num_classes
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Gamma parameters of all exchange-point BNs across both branches.
    pub fn exchange_gammas(&self) -> Vec<ParamId> {
        match &self.kind {
            ModelKind::Middle { pet, mri, exchange } => {
                let mut ids = Vec::new();
                for &b in &exchange.exchange_blocks {
                    ids.push(pet.blocks[b].bn2.gamma);
                    ids.push(mri.blocks[b].bn2.gamma);
                }
                ids
            }
            _ => Vec::new(),
        }
    }

    pub fn branches(&self) -> Vec<&Backbone<f32>> {
        match &self.kind {
            ModelKind::Single(b) => vec![b],
            ModelKind::Late { pet, mri, .. } | ModelKind::Middle { pet, mri, .. } => vec![pet, mri],
        }
    }

    pub fn branches_mut(&mut self) -> Vec<&mut Backbone<f32>> {
        match &mut self.kind {
            ModelKind::Single(b) => vec![b],
            ModelKind::Late { pet, mri, .. } | ModelKind::Middle { pet, mri, .. } => vec![pet, mri],
        }
    }

    pub fn mlp_layers(&self) -> Option<&[LinearLayer]> {
        match &self.kind {
            ModelKind::Late { mlp, .. } => Some(mlp),
            _ => None,
        }
    }

    /// Forward on an existing tape with both modality inputs as leaves.
    /// Single-modality models simply never touch the opposite input.
    pub fn forward<R: Rng>(
        &mut self,
        tape: &mut Tape<f32>,
        pet: Var,
        mri: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        let store = &self.store;
        match &mut self.kind {
            ModelKind::Single(bb) => {
                let input = match self.config.strategy {
                    FusionStrategy::SinglePet => pet,
                    FusionStrategy::SingleMri => mri,
                    FusionStrategy::Early => tape.mul(mri, pet)?,
                    _ => unreachable!(),
                };
                let logp = bb.forward(tape, store, input, training, rng)?;
                Ok(ModelOutput { logp, l1: None })
            }
            ModelKind::Late { pet: bp, mri: bm, mlp } => {
                let ep = bp.features(tape, store, pet, training, rng)?;
                let em = bm.features(tape, store, mri, training, rng)?;
                if tape.shape(ep)[0] != tape.shape(em)[0] {
                    return Err(Error::shape("late fusion batch sizes differ between modalities".to_string()));
                }
                let mut h = tape.concat_cols(ep, em)?;
                for (i, layer) in mlp.iter().enumerate() {
                    h = layer.forward(tape, store, h)?;
                    if i + 1 < mlp.len() {
                        h = tape.relu(h);
                    }
                }
                let logp = tape.log_softmax(h)?;
                Ok(ModelOutput { logp, l1: None })
            }
            ModelKind::Middle { pet: bp, mri: bm, exchange } => {
                let dropout = bp.cfg.dropout;
                let mut ya = bp.stem_forward(tape, store, pet, training, rng)?;
                let mut yb = bm.stem_forward(tape, store, mri, training, rng)?;
                for b in 0..bp.blocks.len() {
                    let (mut main_a, sc_a) =
                        block_pre_merge(tape, store, &mut bp.blocks[b], ya, training, rng, dropout)?;
                    let (mut main_b, sc_b) =
                        block_pre_merge(tape, store, &mut bm.blocks[b], yb, training, rng, dropout)?;
                    if exchange.exchange_blocks.contains(&b) {
                        let tau = exchange.bn_threshold as f32;
                        let ga = store.value(bp.blocks[b].bn2.gamma).data();
                        let gb = store.value(bm.blocks[b].bn2.gamma).data();
                        let (a_takes_b, b_takes_a) = exchange_masks(ga, gb, tau)?;
                        let ex_a = tape.select_channels(main_a, main_b, &a_takes_b)?;
                        let ex_b = tape.select_channels(main_b, main_a, &b_takes_a)?;
                        main_a = ex_a;
                        main_b = ex_b;
                    }
                    ya = block_merge(tape, main_a, sc_a)?;
                    yb = block_merge(tape, main_b, sc_b)?;
                }
                let ea = tape.global_avg_pool(ya)?;
                let eb = tape.global_avg_pool(yb)?;
                let la = bp.head(tape, store, ea)?;
                let lb = bm.head(tape, store, eb)?;
                // geometric-mean fusion of the branch predictions,
                // renormalized so the output is a valid log-probability
                let sum = tape.add(la, lb)?;
                let avg = tape.scale(sum, 0.5);
                let logp = tape.log_softmax(avg)?;
                let gammas: Vec<Var> = exchange
                    .exchange_blocks
                    .iter()
                    .flat_map(|&b| [bp.blocks[b].bn2.gamma, bm.blocks[b].bn2.gamma])
                    .map(|id| store.leaf(tape, id))
                    .collect();
                let l1 = tape.abs_sum_many(&gammas);
                Ok(ModelOutput { logp, l1: Some(l1) })
            }
        }
    }

    /// Convenience full pass: fresh tape, both inputs as leaves.
    pub fn run<R: Rng>(
        &mut self,
        pet: Tensor<f32>,
        mri: Tensor<f32>,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardPass> {
        let mut tape = Tape::new();
        let pet_var = tape.leaf(pet);
        let mri_var = tape.leaf(mri);
        let output = self.forward(&mut tape, pet_var, mri_var, training, rng)?;
        Ok(ForwardPass { tape, pet: pet_var, mri: mri_var, output })
    }
}
