//! Model checkpoints: a single binary archive holding the model config as
//! JSON plus every named tensor (trainable parameters and batch-norm running
//! statistics) in little-endian f32. Round trips are byte-exact.

use crate::error::{Error, Result};
use crate::fusion::{build_model_from_config, FusionModelConfig, MultiModalModel};
use crate::tensor::Tensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MMFCKPT1";

/// Every named tensor in a model: trainable parameters under their store
/// names, plus per-BN `<bn>.running_mean` / `<bn>.running_var`.
pub fn named_tensors(model: &MultiModalModel) -> BTreeMap<String, Tensor<f32>> {
    let mut out = BTreeMap::new();
    for id in model.store.ids() {
        out.insert(model.store.name(id).to_string(), model.store.value(id).clone());
    }
    for branch in model.branches() {
        for bn in branch.bn_states() {
            let gamma_name = model.store.name(bn.gamma);
            let base = gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name);
            let c = bn.channels();
            out.insert(
                format!("{base}.running_mean"),
                Tensor::from_vec(&[c], bn.running_mean.clone()).unwrap(),
            );
            out.insert(
                format!("{base}.running_var"),
                Tensor::from_vec(&[c], bn.running_var.clone()).unwrap(),
            );
        }
    }
    out
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor<f32>) -> Result<()> {
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &x in t.data() {
        w.write_f32::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, Tensor<f32>)> {
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| Error::format("non-utf8 tensor name".to_string()))?;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    if rank > 8 {
        return Err(Error::format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data)?;
    Ok((name, Tensor::from_vec(&shape, data)?))
}

pub fn save_checkpoint(path: &Path, model: &MultiModalModel) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    let tensors = named_tensors(model);
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in &tensors {
        write_tensor(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

/// In-memory snapshot of a model's weights (used for best-epoch tracking).
pub struct Snapshot {
    pub config: FusionModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl Snapshot {
    pub fn of(model: &MultiModalModel) -> Snapshot {
        Snapshot { config: model.config.clone(), tensors: named_tensors(model) }
    }

    /// Write the tensors back into a model built from the same config.
    pub fn restore(&self, model: &mut MultiModalModel) -> Result<()> {
        if model.config != self.config {
            return Err(Error::config("snapshot config does not match model".to_string()));
        }
        apply_tensors(model, &self.tensors)
    }
}

fn apply_tensors(model: &mut MultiModalModel, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
    for id in model.store.ids().collect::<Vec<_>>() {
        let name = model.store.name(id).to_string();
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::format(format!("checkpoint missing tensor '{name}'")))?;
        if t.shape() != model.store.value(id).shape() {
            return Err(Error::shape(format!(
                "checkpoint tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                model.store.value(id).shape()
            )));
        }
        *model.store.value_mut(id) = t.clone();
    }
    // running statistics: resolve names through the store before the mutable
    // branch walk to keep the borrow checker satisfied
    let mut bases: Vec<String> = Vec::new();
    for branch in model.branches() {
        for bn in branch.bn_states() {
            let gamma_name = model.store.name(bn.gamma);
            bases.push(gamma_name.strip_suffix(".gamma").unwrap_or(gamma_name).to_string());
        }
    }
    let mut i = 0;
    for branch in model.branches_mut() {
        for bn in branch.bn_states_mut() {
            let base = &bases[i];
            i += 1;
            for (suffix, dst) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let name = format!("{base}.{suffix}");
                let t = tensors
                    .get(&name)
                    .ok_or_else(|| Error::format(format!("checkpoint missing tensor '{name}'")))?;
                if t.numel() != dst.len() {
                    return Err(Error::shape(format!("checkpoint tensor '{name}' has wrong length")));
                }
                dst.copy_from_slice(t.data());
            }
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MultiModalModel> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!("{}: not a checkpoint file", path.display())));
    }
    let cfg_len = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config: FusionModelConfig = serde_json::from_slice(&cfg_bytes)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        tensors.insert(name, t);
    }
    let mut model = build_model_from_config(&config, 0)?;
    apply_tensors(&mut model, &tensors)?;
    Ok(model)
}
