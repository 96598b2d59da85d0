//! The shared 3D ResNet: one stem convolution, four residual blocks (the last
//! three downsampling by stride 2, with strided 3^3 shortcut convolutions),
//! global average pooling, and a two-layer head emitting log-probabilities.
//!
//! Conv-layer accounting: 1 stem + 4×2 in-block + 3 shortcut = 12, all with
//! 3^3 kernels and padding 1.

use crate::error::{Error, Result};
use crate::nn::{BatchNormState, ConvLayer, LinearLayer, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{conv_out_dim, Scalar};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const BLOCK_COUNT: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub block_channels: [usize; BLOCK_COUNT],
    pub num_classes: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            block_channels: [16, 32, 64, 128],
            num_classes: 2,
            dropout: 0.2,
            head_hidden: 64,
            bn_momentum: 0.05,
            bn_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    /// Small configuration for CPU-scale experiments.
    pub fn desk_scale() -> Self {
        BackboneConfig { block_channels: [4, 8, 16, 32], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be positive".to_string()));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("block channels must be positive".to_string()));
        }
        if self.block_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("block channels must be nondecreasing".to_string()));
        }
        if self.num_classes != 2 && self.num_classes != 3 {
            return Err(Error::config(format!("num_classes must be 2 or 3, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0,1)".to_string()));
        }
        if self.head_hidden == 0 {
            return Err(Error::config("head_hidden must be positive".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock<T: Scalar> {
    pub conv1: ConvLayer,
    pub bn1: BatchNormState<T>,
    pub conv2: ConvLayer,
    pub bn2: BatchNormState<T>,
    pub shortcut: Option<(ConvLayer, BatchNormState<T>)>,
}

#[derive(Debug, Clone)]
pub struct Backbone<T: Scalar> {
    pub cfg: BackboneConfig,
    pub stem: ConvLayer,
    pub stem_bn: BatchNormState<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl<T: Scalar> Backbone<T> {
    pub fn build<R: Rng>(store: &mut ParamStore<T>, prefix: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self>
    where
        StandardNormal: Distribution<T>,
    {
        cfg.validate()?;
        let mom = T::from_f64(cfg.bn_momentum);
        let eps = T::from_f64(cfg.bn_eps);
        let c = cfg.block_channels;
        let stem = ConvLayer::build(store, &format!("{prefix}stem"), cfg.in_channels, c[0], 1, rng);
        let stem_bn = BatchNormState::build(store, &format!("{prefix}stem_bn"), c[0], mom, eps);
        let mut blocks = Vec::with_capacity(BLOCK_COUNT);
        let mut in_c = c[0];
        for (b, &out_c) in c.iter().enumerate() {
            let stride = if b == 0 { 1 } else { 2 };
            let name = format!("{prefix}block{b}");
            let conv1 = ConvLayer::build(store, &format!("{name}.conv1"), in_c, out_c, stride, rng);
            let bn1 = BatchNormState::build(store, &format!("{name}.bn1"), out_c, mom, eps);
            let conv2 = ConvLayer::build(store, &format!("{name}.conv2"), out_c, out_c, 1, rng);
            let bn2 = BatchNormState::build(store, &format!("{name}.bn2"), out_c, mom, eps);
            let shortcut = if b == 0 {
                None
            } else {
                let sc = ConvLayer::build(store, &format!("{name}.shortcut"), in_c, out_c, stride, rng);
                let sbn = BatchNormState::build(store, &format!("{name}.shortcut_bn"), out_c, mom, eps);
                Some((sc, sbn))
            };
            blocks.push(ResBlock { conv1, bn1, conv2, bn2, shortcut });
            in_c = out_c;
        }
        let fc1 = LinearLayer::build(store, &format!("{prefix}fc1"), c[3], cfg.head_hidden, rng);
        let fc2 = LinearLayer::build(store, &format!("{prefix}fc2"), cfg.head_hidden, cfg.num_classes, rng);
        Ok(Backbone { cfg: cfg.clone(), stem, stem_bn, blocks, fc1, fc2 })
    }

    /// A branch sharing every conv and linear weight with `self` but carrying
    /// its own batch-normalization state (middle fusion).
    pub fn clone_with_own_bn(&self, store: &mut ParamStore<T>, prefix: &str) -> Self {
        let mom = T::from_f64(self.cfg.bn_momentum);
        let eps = T::from_f64(self.cfg.bn_eps);
        let stem_bn = BatchNormState::build(store, &format!("{prefix}stem_bn"), self.stem.out_channels, mom, eps);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let name = format!("{prefix}block{b}");
                ResBlock {
                    conv1: blk.conv1.clone(),
                    bn1: BatchNormState::build(store, &format!("{name}.bn1"), blk.conv1.out_channels, mom, eps),
                    conv2: blk.conv2.clone(),
                    bn2: BatchNormState::build(store, &format!("{name}.bn2"), blk.conv2.out_channels, mom, eps),
                    shortcut: blk.shortcut.as_ref().map(|(sc, _)| {
                        (
                            sc.clone(),
                            BatchNormState::build(store, &format!("{name}.shortcut_bn"), sc.out_channels, mom, eps),
                        )
                    }),
                }
            })
            .collect();
        Backbone {
            cfg: self.cfg.clone(),
            stem: self.stem.clone(),
            stem_bn,
            blocks,
            fc1: self.fc1.clone(),
            fc2: self.fc2.clone(),
        }
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        let mut v = vec![&self.stem];
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
            if let Some((sc, _)) = &b.shortcut {
                v.push(sc);
            }
        }
        v
    }

    pub fn conv_layer_count(&self) -> usize {
        self.conv_layers().len()
    }

    /// Per-block output spatial sizes for a given input extent (the stem and
    /// block 1 preserve size; blocks 2-4 halve it).
    pub fn spatial_plan(&self, input: [usize; 3]) -> Vec<[usize; 3]> {
        let mut sizes = Vec::with_capacity(BLOCK_COUNT);
        let mut cur = input;
        for (b, _) in self.blocks.iter().enumerate() {
            let stride = if b == 0 { 1 } else { 2 };
            cur = [
                conv_out_dim(cur[0], stride),
                conv_out_dim(cur[1], stride),
                conv_out_dim(cur[2], stride),
            ];
            sizes.push(cur);
        }
        sizes
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 5 || shape[1] != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "expected input [N,{},D,H,W], got {:?}",
                self.cfg.in_channels, shape
            )));
        }
        if shape[2..].iter().any(|&d| d < 8) {
            return Err(Error::shape(format!(
                "spatial dims must be >= 8 to survive three downsamplings, got {:?}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    pub fn stem_forward<R: Rng>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
        _rng: &mut R,
    ) -> Result<Var> {
        let y = self.stem.forward(tape, store, x)?;
        let y = self.stem_bn.forward(tape, store, y, training)?;
        Ok(tape.relu(y))
    }

    /// Everything up to and including the post-GAP embedding [N, C4].
    pub fn features<R: Rng>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let dropout = self.cfg.dropout;
        let mut y = self.stem_forward(tape, store, x, training, rng)?;
        for b in 0..self.blocks.len() {
            let (main, shortcut) = block_pre_merge(tape, store, &mut self.blocks[b], y, training, rng, dropout)?;
            y = block_merge(tape, main, shortcut)?;
        }
        tape.global_avg_pool(y)
    }

    /// Head on top of an embedding: fc → ReLU → fc → log-softmax.
    pub fn head(&self, tape: &mut Tape<T>, store: &ParamStore<T>, emb: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, emb)?;
        let h = tape.relu(h);
        let logits = self.fc2.forward(tape, store, h)?;
        tape.log_softmax(logits)
    }

    /// Full forward pass; returns per-class log-probabilities [N, classes].
    pub fn forward<R: Rng>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let emb = self.features(tape, store, x, training, rng)?;
        self.head(tape, store, emb)
    }

    /// Walk every named tensor that is not a `ParamStore` parameter (the BN
    /// running statistics), in a stable order.
    pub fn bn_states_mut(&mut self) -> Vec<&mut BatchNormState<T>> {
        let mut v: Vec<&mut BatchNormState<T>> = vec![&mut self.stem_bn];
        for b in &mut self.blocks {
            v.push(&mut b.bn1);
            v.push(&mut b.bn2);
            if let Some((_, sbn)) = &mut b.shortcut {
                v.push(sbn);
            }
        }
        v
    }

    pub fn bn_states(&self) -> Vec<&BatchNormState<T>> {
        let mut v: Vec<&BatchNormState<T>> = vec![&self.stem_bn];
        for b in &self.blocks {
            v.push(&b.bn1);
            v.push(&b.bn2);
            if let Some((_, sbn)) = &b.shortcut {
                v.push(sbn);
            }
        }
        v
    }
}

/// Residual block up to (and including) the second BN, plus the shortcut
/// path. Middle fusion exchanges channels between the two returned `main`
/// values of its branches before merging.
pub fn block_pre_merge<T: Scalar, R: Rng>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    block: &mut ResBlock<T>,
    x: Var,
    training: bool,
    rng: &mut R,
    dropout: f64,
) -> Result<(Var, Var)> {
    let y = block.conv1.forward(tape, store, x)?;
    let y = block.bn1.forward(tape, store, y, training)?;
    let y = tape.relu(y);
    let y = if training && dropout > 0.0 {
        tape.dropout(y, dropout, rng)?
    } else {
        y
    };
    let y = block.conv2.forward(tape, store, y)?;
    let main = block.bn2.forward(tape, store, y, training)?;
    let shortcut = match &mut block.shortcut {
        Some((sc, sbn)) => {
            let s = sc.forward(tape, store, x)?;
            sbn.forward(tape, store, s, training)?
        }
        None => x,
    };
    Ok((main, shortcut))
}

/// Shortcut add followed by the post-merge ReLU.
pub fn block_merge<T: Scalar>(tape: &mut Tape<T>, main: Var, shortcut: Var) -> Result<Var> {
    let sum = tape.add(main, shortcut)?;
    Ok(tape.relu(sum))
}
