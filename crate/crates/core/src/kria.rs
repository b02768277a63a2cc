//! Key-authorized reversible identity anonymization.
//!
//! A key is a set of Gaussian blocks shaped like the identity codes,
//! regenerated deterministically from a 64-bit seed (or a hashed
//! passphrase). The keyed transform concatenates each key row with the
//! matching identity row and runs a seven-layer equal-linear block; the
//! same mapping serves anonymization and recovery.

use crate::autodiff::Var;
use crate::error::{DbafError, Result};
use crate::model::DbafModel;
use crate::nn::{EqualLinear, Graph, ParamRole, ParamStore};
use crate::types::{DisentangledCodes, ImageTensor, LatentPyramid, LEVEL_ROWS};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};

pub const KEY_FORMAT: &str = "dbaf-key-v1";
pub const KRIA_LAYERS: usize = 7;

/// How a key is derived.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeySource {
    Seed(u64),
    Passphrase(String),
}

/// Key blocks shaped like the identity codes (4 x d, 4 x d, 6 x d).
#[derive(Debug, Clone, PartialEq)]
pub struct AnonKey {
    pub seed: u64,
    pub passphrase_sha256: Option<String>,
    pub d: usize,
    pub blocks: [Array2<f64>; 3],
}

impl AnonKey {
    /// First 8 hex characters of the SHA-256 of the seed bytes.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.seed.to_le_bytes());
        hex_prefix(&digest, 8)
    }

    /// Largest absolute entry-wise difference between two keys.
    pub fn linf_distance(&self, other: &AnonKey) -> f64 {
        self.blocks
            .iter()
            .zip(other.blocks.iter())
            .flat_map(|(a, b)| a.iter().zip(b.iter()))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::new();
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

/// Derives a key: blocks are i.i.d. standard normal from a ChaCha stream
/// keyed by the seed; passphrases are hashed to a 64-bit seed first.
pub fn generate_key(source: &KeySource, d: usize) -> Result<AnonKey> {
    if d == 0 {
        return Err(DbafError::validation("key width d must be positive"));
    }
    let (seed, passphrase_sha256) = match source {
        KeySource::Seed(s) => (*s, None),
        KeySource::Passphrase(p) => {
            if p.is_empty() {
                return Err(DbafError::validation("passphrase must not be empty"));
            }
            let digest = Sha256::digest(p.as_bytes());
            let mut eight = [0u8; 8];
            eight.copy_from_slice(&digest[..8]);
            (u64::from_le_bytes(eight), Some(format!("{digest:x}")))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = LEVEL_ROWS.map(|rows| {
        Array2::from_shape_fn((rows, d), |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
    });
    Ok(AnonKey { seed, passphrase_sha256, d, blocks })
}

// ---- key file (dbaf-key-v1) ----

#[derive(Serialize, Deserialize)]
struct KeyFileV1 {
    format: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    passphrase_sha256: Option<String>,
    d: usize,
    block_shapes: [[usize; 2]; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    raw: Option<[Vec<Vec<f64>>; 3]>,
}

/// Writes a key file; raw matrices are only included when `export_raw` is set.
pub fn write_key_file(key: &AnonKey, mut w: impl Write, export_raw: bool) -> Result<()> {
    let file = KeyFileV1 {
        format: KEY_FORMAT.to_string(),
        seed: key.seed,
        passphrase_sha256: key.passphrase_sha256.clone(),
        d: key.d,
        block_shapes: [[4, key.d], [4, key.d], [6, key.d]],
        raw: export_raw.then(|| {
            [0, 1, 2].map(|i| key.blocks[i].rows().into_iter().map(|r| r.to_vec()).collect())
        }),
    };
    let text = serde_json::to_string_pretty(&file)?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Loads a key file, regenerating blocks from the seed unless raw matrices
/// were exported.
pub fn read_key_file(mut r: impl Read) -> Result<AnonKey> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let file: KeyFileV1 = serde_json::from_str(&text)?;
    if file.format != KEY_FORMAT {
        return Err(DbafError::validation(format!(
            "unsupported key format {:?}, expected {KEY_FORMAT:?}",
            file.format
        )));
    }
    let mut key = generate_key(&KeySource::Seed(file.seed), file.d)?;
    key.passphrase_sha256 = file.passphrase_sha256;
    if let Some(raw) = file.raw {
        for (i, rows) in raw.iter().enumerate() {
            let (want_r, want_c) = (file.block_shapes[i][0], file.block_shapes[i][1]);
            if rows.len() != want_r || rows.iter().any(|r| r.len() != want_c) {
                return Err(DbafError::validation("raw key block shape mismatch"));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            key.blocks[i] = Array2::from_shape_vec((want_r, want_c), flat)
                .map_err(|e| DbafError::validation(e.to_string()))?;
        }
    }
    Ok(key)
}

// ---- the keyed transform network ----

/// Seven equal-linear layers, input width 2d, hidden/output width d, leaky
/// rectification between layers.
#[derive(Debug, Clone)]
pub struct KriaParams {
    pub layers: Vec<EqualLinear>,
    pub d: usize,
}

impl KriaParams {
    pub fn new(store: &mut ParamStore, name: &str, role: ParamRole, d: usize, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::with_capacity(KRIA_LAYERS);
        for i in 0..KRIA_LAYERS {
            let n_in = if i == 0 { 2 * d } else { d };
            layers.push(EqualLinear::new(store, &format!("{name}.l{i}"), role, n_in, d, rng));
        }
        Self { layers, d }
    }
}

/// phi([P, I]) for one level: key rows concatenated with identity rows.
pub fn keyed_transform_level_t(
    g: &mut Graph,
    params: &KriaParams,
    key_block: &Array2<f64>,
    identity: Var,
) -> Var {
    let key = g.tape.leaf2(key_block.clone());
    let mut h = g.tape.concat(1, &[key, identity]);
    for (i, layer) in params.layers.iter().enumerate() {
        h = layer.forward(g, h);
        if i + 1 < params.layers.len() {
            h = g.tape.leaky_relu(h, 0.2);
        }
    }
    h
}

fn check_key_shapes(identity: &LatentPyramid, key: &AnonKey) -> Result<()> {
    if identity.d() != key.d {
        return Err(DbafError::shape(format!(
            "identity width {} does not match key width {}",
            identity.d(),
            key.d
        )));
    }
    Ok(())
}

/// Applies the keyed transform to every level of an identity pyramid.
pub fn keyed_transform(
    identity: &LatentPyramid,
    key: &AnonKey,
    params: &KriaParams,
    store: &ParamStore,
) -> Result<LatentPyramid> {
    check_key_shapes(identity, key)?;
    if identity.d() != params.d {
        return Err(DbafError::shape("identity width does not match network width"));
    }
    let mut out = Vec::with_capacity(3);
    for (level, block) in identity.levels().iter().zip(key.blocks.iter()) {
        let mut g = Graph::new(store);
        let iv = g.tape.leaf2((*level).clone());
        let t = keyed_transform_level_t(&mut g, params, block, iv);
        out.push(
            g.tape
                .value(t)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("rank-2")
                .to_owned(),
        );
    }
    LatentPyramid::new(out[0].clone(), out[1].clone(), out[2].clone())
}

/// The five reconstructed code sets of the anonymization stage.
#[derive(Debug, Clone, PartialEq)]
pub struct FiveWayCodes {
    pub ano1: LatentPyramid,
    pub ano2: LatentPyramid,
    pub rec: LatentPyramid,
    pub err1: LatentPyramid,
    pub err2: LatentPyramid,
}

impl FiveWayCodes {
    pub fn all(&self) -> [&LatentPyramid; 5] {
        [&self.ano1, &self.ano2, &self.rec, &self.err1, &self.err2]
    }
}

fn add_pyramids(a: &LatentPyramid, b: &LatentPyramid) -> Result<LatentPyramid> {
    LatentPyramid::new(&a.coarse + &b.coarse, &a.medium + &b.medium, &a.fine + &b.fine)
}

/// Builds the five-way code sets from original and anonymized-image codes.
/// The four key seeds must be pairwise distinct.
#[allow(clippy::too_many_arguments)]
pub fn build_five_way(
    ori_codes: &DisentangledCodes,
    ano_codes: &DisentangledCodes,
    cor1: &AnonKey,
    cor2: &AnonKey,
    err1: &AnonKey,
    err2: &AnonKey,
    params: &KriaParams,
    store: &ParamStore,
) -> Result<FiveWayCodes> {
    let seeds = [cor1.seed, cor2.seed, err1.seed, err2.seed];
    for i in 0..4 {
        for j in i + 1..4 {
            if seeds[i] == seeds[j] {
                return Err(DbafError::validation(format!(
                    "key seeds must be pairwise distinct (seed {} duplicated)",
                    seeds[i]
                )));
            }
        }
    }
    let t_ano1 = keyed_transform(&ori_codes.identity, cor1, params, store)?;
    let t_ano2 = keyed_transform(&ori_codes.identity, cor2, params, store)?;
    let t_rec = keyed_transform(&ano_codes.identity, cor1, params, store)?;
    let t_err1 = keyed_transform(&ano_codes.identity, err1, params, store)?;
    let t_err2 = keyed_transform(&ano_codes.identity, err2, params, store)?;
    Ok(FiveWayCodes {
        ano1: add_pyramids(&ori_codes.attribute, &t_ano1)?,
        ano2: add_pyramids(&ori_codes.attribute, &t_ano2)?,
        rec: add_pyramids(&ano_codes.attribute, &t_rec)?,
        err1: add_pyramids(&ano_codes.attribute, &t_err1)?,
        err2: add_pyramids(&ano_codes.attribute, &t_err2)?,
    })
}

// ---- the full keyed mapping over a model ----

/// Anonymizes an image under a key: encode, disentangle, rewrite the
/// identity codes with the keyed transform, add the attribute codes back,
/// reweight the features, decode.
pub fn anonymize(model: &DbafModel, image: &ImageTensor, key: &AnonKey) -> Result<ImageTensor> {
    model.apply_keyed_mapping(image, key)
}

/// Recovery applies the identical mapping with the same key; supplying the
/// anonymization key restores the original identity, any other key yields a
/// different one.
pub fn recover(model: &DbafModel, image: &ImageTensor, key: &AnonKey) -> Result<ImageTensor> {
    model.apply_keyed_mapping(image, key)
}
