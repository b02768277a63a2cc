//! Checkpoint archive: versioned header, JSON metadata, then raw f64
//! parameter and optimizer-moment data. Round-trips are bit-identical.

use crate::error::{DbafError, Result};
use crate::model::{DbafModel, ModelConfig};
use crate::nn::{Adam, ParamRole};
use crate::training::{TrainConfig, TrainerState};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8] = b"dbaf-ckpt-v1\n";

/// Everything needed to continue training or run inference.
pub struct Checkpoint {
    pub model: DbafModel,
    pub train_config: TrainConfig,
    pub state: TrainerState,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    role: ParamRole,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moment_ids: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    state: TrainerState,
    params: Vec<ParamMeta>,
    gen_opt: OptMeta,
    disc_opt: OptMeta,
}

fn opt_meta(opt: &Adam) -> OptMeta {
    OptMeta {
        lr: opt.lr,
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        t: opt.t,
        moment_ids: opt.state().0.keys().copied().collect(),
    }
}

fn write_array(w: &mut impl Write, arr: &ndarray::ArrayD<f64>) -> Result<()> {
    for v in arr.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, shape: &[usize]) -> Result<ndarray::ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    ndarray::ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| DbafError::Checkpoint(e.to_string()))
}

pub fn save(ckpt: &Checkpoint, mut w: impl Write) -> Result<()> {
    let header = Header {
        model_config: ckpt.model.config.clone(),
        train_config: ckpt.train_config.clone(),
        state: ckpt.state.clone(),
        params: ckpt
            .model
            .store
            .iter()
            .map(|(_, e)| ParamMeta {
                name: e.name.clone(),
                role: e.role,
                shape: e.value.shape().to_vec(),
            })
            .collect(),
        gen_opt: opt_meta(&ckpt.gen_opt),
        disc_opt: opt_meta(&ckpt.disc_opt),
    };
    let header_json = serde_json::to_vec(&header)?;
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, e) in ckpt.model.store.iter() {
        write_array(&mut w, &e.value)?;
    }
    for (opt, meta) in [(&ckpt.gen_opt, &header.gen_opt), (&ckpt.disc_opt, &header.disc_opt)] {
        let (m, v) = opt.state();
        for id in &meta.moment_ids {
            write_array(&mut w, &m[id])?;
            write_array(&mut w, &v[id])?;
        }
    }
    Ok(())
}

pub fn load(mut r: impl Read) -> Result<Checkpoint> {
    let mut magic = vec![0u8; CKPT_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(DbafError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(CKPT_MAGIC)
        )));
    }
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let header_len = u32::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut model = DbafModel::build(header.model_config.clone())?;
    if model.store.len() != header.params.len() {
        return Err(DbafError::Checkpoint(format!(
            "parameter count mismatch: archive has {}, model expects {}",
            header.params.len(),
            model.store.len()
        )));
    }
    let metas: Vec<(crate::nn::ParamId, ParamMeta)> = model
        .store
        .iter()
        .map(|(id, _)| id)
        .zip(header.params.into_iter())
        .collect::<Vec<_>>();
    for (id, meta) in &metas {
        let entry = model.store.entry(*id);
        if entry.name != meta.name || entry.value.shape() != meta.shape.as_slice() {
            return Err(DbafError::Checkpoint(format!(
                "parameter mismatch at {:?}: archive {} {:?}, model {} {:?}",
                id,
                meta.name,
                meta.shape,
                entry.name,
                entry.value.shape()
            )));
        }
    }
    for (id, meta) in &metas {
        let value = read_array(&mut r, &meta.shape)?;
        model.store.set(*id, value);
    }

    let mut restore_opt = |meta: &OptMeta| -> Result<Adam> {
        let mut opt = Adam::new(meta.lr);
        opt.beta1 = meta.beta1;
        opt.beta2 = meta.beta2;
        opt.eps = meta.eps;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for id in &meta.moment_ids {
            if *id >= model.store.len() {
                return Err(DbafError::Checkpoint("optimizer moment id out of range".into()));
            }
            let shape: Vec<usize> =
                model.store.value(crate::nn::ParamId(*id)).shape().to_vec();
            m.insert(*id, read_array(&mut r, &shape)?);
            v.insert(*id, read_array(&mut r, &shape)?);
        }
        opt.restore_state(meta.t, m, v);
        Ok(opt)
    };
    let gen_opt = restore_opt(&header.gen_opt)?;
    let disc_opt = restore_opt(&header.disc_opt)?;

    Ok(Checkpoint {
        model,
        train_config: header.train_config,
        state: header.state,
        gen_opt,
        disc_opt,
    })
}

pub fn save_to_path(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    save(ckpt, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_from_path(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    load(bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{RngPos, TrainConfig};

    #[test]
    fn checkpoint_round_trips_bit_identically() {
        let cfg = TrainConfig::small_test_config();
        let model = DbafModel::build(cfg.model_config()).unwrap();
        let ckpt = Checkpoint {
            model,
            train_config: cfg,
            state: TrainerState {
                step: 7,
                stage: 1,
                data_rng_pos: RngPos { hi: 0, lo: 99 },
                key_rng_pos: RngPos { hi: 0, lo: 3 },
            },
            gen_opt: Adam::new(1e-3),
            disc_opt: Adam::new(1e-3),
        };
        let mut buf = Vec::new();
        save(&ckpt, &mut buf).unwrap();
        let loaded = load(buf.as_slice()).unwrap();
        // identical bytes when saved again
        let mut buf2 = Vec::new();
        save(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2, "checkpoint save/load/save must be byte-stable");
        // parameter values identical bitwise
        for ((_, a), (_, b)) in ckpt.model.store.iter().zip(loaded.model.store.iter()) {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.iter().zip(b.value.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(loaded.state.step, 7);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let bytes = b"dbaf-ckpt-v0\nxxxx".to_vec();
        assert!(matches!(load(bytes.as_slice()), Err(DbafError::Checkpoint(_))));
    }
}
