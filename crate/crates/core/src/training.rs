//! Two-stage trainer: stage 1 learns disentanglement on image pairs, stage 2
//! adds the keyed transform and trains on the five-way outputs. Also provides
//! the single-stage / no-CID / no-MAAR ablation modes.
//!
//! Discriminator and generator updates strictly alternate within a step;
//! gradients are filtered by parameter role before every update, so no
//! parameter is updated from both objectives.

use crate::autodiff::{Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{DbafError, Result};
use crate::kria::{generate_key, AnonKey, KeySource};
use crate::losses::{
    contrastive_t, discriminator_grads, euclid_diff_t, latent_reg_rows_t, relu_t, stage1_total,
    stage2_total, Critic, LossReport, LossWeights, Stage1Terms, Stage2Terms,
};
use crate::model::{AblationMode, DbafModel, ModelConfig};
use crate::nn::{Adam, Graph, ParamId};
use crate::types::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

// ---- configuration ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: u64,
    /// Stage-1 probability of sampling the same image for both pair slots.
    pub same_prob: f64,
    pub ablation: AblationMode,
    pub data_seed: u64,
    pub key_seed: u64,
    pub freeze_backbone: bool,
    pub log_every: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            batch_size: 2,
            learning_rate: 1e-4,
            steps: 300,
            same_prob: 0.5,
            ablation: AblationMode::Full,
            data_seed: 7,
            key_seed: 11,
            freeze_backbone: false,
            log_every: 10,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.same_prob) {
            return Err(DbafError::validation("same_prob must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(DbafError::validation("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DbafError::validation("learning_rate must be positive"));
        }
        self.weights.validate()?;
        self.model.validate()?;
        Ok(())
    }

    /// Model configuration with the ablation mode applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut mc = self.model.clone();
        mc.ablation = self.ablation;
        mc
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| DbafError::validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DbafError::validation(e.to_string()))
    }

    pub fn from_toml_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    #[cfg(test)]
    pub fn small_test_config() -> Self {
        let mut cfg = Self::default();
        cfg.model = crate::model::ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                image_size: 32,
                d: 8,
                feature_resolutions: [4, 8, 16],
                feature_channels: [16, 8, 4],
                param_seed: 5,
            },
            attention_heads: 2,
            identity_seed: 201,
            perceptual_seed: 202,
            parsing_seed: 203,
            ablation: crate::model::AblationMode::Full,
        };
        cfg.batch_size = 1;
        cfg.steps = 2;
        cfg.learning_rate = 1e-3;
        cfg
    }
}

// ---- dataset ----

/// An in-memory image set; the index is the identity label.
#[derive(Clone)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
}

impl Dataset {
    pub fn from_images(images: Vec<ImageTensor>) -> Result<Self> {
        if images.is_empty() {
            return Err(DbafError::validation("dataset must not be empty"));
        }
        let size = images[0].size();
        if images.iter().any(|i| i.size() != size) {
            return Err(DbafError::validation("all dataset images must share a size"));
        }
        Ok(Self { images })
    }

    pub fn synthetic(count: usize, size: usize, seed: u64) -> Result<Self> {
        Self::from_images(crate::synthetic::synthetic_faces(count, size, seed))
    }

    /// Loads every .png in a directory, sorted by file name.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(DbafError::validation("directory contains no .png images"));
        }
        let images = paths
            .iter()
            .map(crate::imageio::load_png)
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(images)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Draws an (attribute, identity) pair of indices; with probability
/// `same_prob` both point at the same image.
pub fn sample_pair_indices(len: usize, same_prob: f64, rng: &mut ChaCha8Rng) -> (usize, usize, bool) {
    let i = rng.gen_range(0..len);
    if len == 1 || rng.gen_bool(same_prob) {
        (i, i, true)
    } else {
        let mut j = rng.gen_range(0..len);
        while j == i {
            j = rng.gen_range(0..len);
        }
        (i, j, false)
    }
}

/// Pair of images plus the same-identity flag.
pub fn sample_pair<'a>(
    dataset: &'a Dataset,
    same_prob: f64,
    rng: &mut ChaCha8Rng,
) -> (&'a ImageTensor, &'a ImageTensor, bool) {
    let (i, j, same) = sample_pair_indices(dataset.len(), same_prob, rng);
    (&dataset.images[i], &dataset.images[j], same)
}

// ---- trainer state ----

/// u128 word position of a ChaCha stream, split for serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPos {
    pub hi: u64,
    pub lo: u64,
}

impl RngPos {
    pub fn from_u128(v: u128) -> Self {
        Self { hi: (v >> 64) as u64, lo: v as u64 }
    }
    pub fn to_u128(self) -> u128 {
        ((self.hi as u128) << 64) | self.lo as u128
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: u64,
    pub stage: u8,
    pub data_rng_pos: RngPos,
    pub key_rng_pos: RngPos,
}

/// One emitted log record per step.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub report: LossReport,
    pub d_loss: f64,
    pub r1: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("step record serializes")
    }
}

pub struct Trainer {
    pub model: DbafModel,
    pub cfg: TrainConfig,
    stage: u8,
    step: u64,
    gen_opt: Adam,
    disc_opt: Adam,
    data_rng: ChaCha8Rng,
    key_rng: ChaCha8Rng,
    gen_ids: HashSet<usize>,
    disc_ids: HashSet<usize>,
}

impl Trainer {
    pub fn new(model: DbafModel, cfg: TrainConfig, stage: u8) -> Self {
        let gen_ids = model
            .generator_param_ids(cfg.freeze_backbone)
            .iter()
            .map(|p| p.index())
            .collect();
        let disc_ids = model.discriminator.param_ids().iter().map(|p| p.index()).collect();
        let lr = cfg.learning_rate;
        let data_rng = ChaCha8Rng::seed_from_u64(cfg.data_seed.wrapping_add(stage as u64));
        let key_rng = ChaCha8Rng::seed_from_u64(cfg.key_seed.wrapping_add(stage as u64));
        Self {
            model,
            cfg,
            stage,
            step: 0,
            gen_opt: Adam::new(lr),
            disc_opt: Adam::new(lr),
            data_rng,
            key_rng,
            gen_ids,
            disc_ids,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let mut t = Self::new(ckpt.model.clone(), ckpt.train_config.clone(), ckpt.state.stage);
        t.step = ckpt.state.step;
        t.gen_opt = ckpt.gen_opt.clone();
        t.disc_opt = ckpt.disc_opt.clone();
        t.data_rng.set_word_pos(ckpt.state.data_rng_pos.to_u128());
        t.key_rng.set_word_pos(ckpt.state.key_rng_pos.to_u128());
        t
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        let state = TrainerState {
            step: self.step,
            stage: self.stage,
            data_rng_pos: RngPos::from_u128(self.data_rng.get_word_pos()),
            key_rng_pos: RngPos::from_u128(self.key_rng.get_word_pos()),
        };
        Checkpoint {
            model: self.model,
            train_config: self.cfg,
            state,
            gen_opt: self.gen_opt,
            disc_opt: self.disc_opt,
        }
    }

    fn filter_grads(
        &self,
        grads: BTreeMap<ParamId, Tensor>,
        allowed: &HashSet<usize>,
    ) -> BTreeMap<ParamId, Tensor> {
        grads.into_iter().filter(|(id, _)| allowed.contains(&id.index())).collect()
    }

    fn accumulate(acc: &mut BTreeMap<ParamId, Tensor>, grads: BTreeMap<ParamId, Tensor>) {
        for (id, g) in grads {
            acc.entry(id).and_modify(|a| *a += &g).or_insert(g);
        }
    }

    fn scale_grads(acc: &mut BTreeMap<ParamId, Tensor>, factor: f64) {
        for g in acc.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    fn check_finite(&self, label: &str, report: &LossReport) -> Result<()> {
        if report.total.is_finite() && report.terms.iter().all(|(_, v)| v.is_finite()) {
            return Ok(());
        }
        Err(DbafError::numeric(format!(
            "non-finite loss at step {} ({label}); terms: {:?}",
            self.step + 1,
            report.terms
        )))
    }

    /// Distinct key seeds for the four-key policy of one image.
    fn sample_key_seeds(&mut self) -> [u64; 4] {
        let mut seeds = [0u64; 4];
        let mut taken: HashSet<u64> = HashSet::new();
        for s in seeds.iter_mut() {
            let mut v = self.key_rng.gen::<u64>();
            while taken.contains(&v) {
                v = self.key_rng.gen::<u64>();
            }
            taken.insert(v);
            *s = v;
        }
        seeds
    }

    // ---- per-image forward graphs ----

    /// Stage-1 mixing graph: returns term nodes for one pair.
    fn mix_terms_t(
        &self,
        g: &mut Graph,
        x_attr: &ImageTensor,
        x_id: &ImageTensor,
        same: bool,
    ) -> (Stage1TermVars, Var) {
        mix_terms_graph(&self.model, &self.cfg.weights, g, x_attr, x_id, same)
    }

    /// Stage-2 five-way graph for one image; returns term nodes and outputs.
    fn five_way_terms_t(
        &self,
        g: &mut Graph,
        x_ori: &ImageTensor,
        keys: &[AnonKey; 4],
    ) -> (Stage2TermVars, [Var; 5]) {
        five_way_terms_graph(&self.model, g, x_ori, keys)
    }

    /// No-gradient forward of the stage-1 mix output.
    fn mix_value(&self, x_attr: &ImageTensor, x_id: &ImageTensor) -> Result<ImageTensor> {
        mix_value_of(&self.model, &self.cfg.weights, x_attr, x_id)
    }

    /// No-gradient forward of the five stage-2 outputs.
    fn five_way_values(&self, x_ori: &ImageTensor, keys: &[AnonKey; 4]) -> Result<Vec<ImageTensor>> {
        five_way_values_of(&self.model, x_ori, keys)
    }

    // ---- steps ----

    pub fn step_stage1(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let batch: Vec<(usize, usize, bool)> = (0..self.cfg.batch_size)
            .map(|_| sample_pair_indices(dataset.len(), self.cfg.same_prob, &mut self.data_rng))
            .collect();
        let gamma = self.cfg.weights.r1_gamma;
        let inv_b = 1.0 / self.cfg.batch_size as f64;
        let model = &self.model;
        let weights = &self.cfg.weights;

        // discriminator phase; batch members are independent, reduced in
        // batch order so the result does not depend on scheduling
        let d_results: Vec<Result<(f64, f64, BTreeMap<ParamId, Tensor>)>> = batch
            .par_iter()
            .map(|&(ia, ib, _)| {
                let mix = mix_value_of(model, weights, &dataset.images[ia], &dataset.images[ib])?;
                discriminator_grads(
                    &model.discriminator,
                    &model.store,
                    &dataset.images[ia],
                    &[mix],
                    gamma,
                )
            })
            .collect();
        let mut d_grads = BTreeMap::new();
        let mut d_loss = 0.0;
        let mut r1 = 0.0;
        for res in d_results {
            let (dl, r1v, grads) = res?;
            d_loss += dl * inv_b;
            r1 += r1v * inv_b;
            Self::accumulate(&mut d_grads, self.filter_grads(grads, &self.disc_ids));
        }
        Self::scale_grads(&mut d_grads, inv_b);
        self.disc_opt.step(&mut self.model.store, &d_grads);

        // generator phase
        let model = &self.model;
        let g_results: Vec<Result<(BTreeMap<ParamId, Tensor>, Stage1Terms)>> = batch
            .par_iter()
            .map(|&(ia, ib, same)| {
                let mut g = Graph::new(&model.store);
                let (tv, _) =
                    mix_terms_graph(model, weights, &mut g, &dataset.images[ia], &dataset.images[ib], same);
                let total = tv.weighted_total(&mut g, weights);
                let grads = g.tape.backward(total);
                let mut terms = Stage1Terms::default();
                tv.add_values(&g, &mut terms, 1.0);
                Ok((g.param_grads(&grads), terms))
            })
            .collect();
        let mut g_grads = BTreeMap::new();
        let mut terms = Stage1Terms::default();
        for res in g_results {
            let (grads, t) = res?;
            Self::accumulate(&mut g_grads, self.filter_grads(grads, &self.gen_ids));
            terms.add_scaled(&t, inv_b);
        }
        Self::scale_grads(&mut g_grads, inv_b);
        self.gen_opt.step(&mut self.model.store, &g_grads);

        self.step += 1;
        let report = stage1_total(&terms, &self.cfg.weights);
        self.check_finite("stage 1", &report)?;
        Ok(StepRecord { step: self.step, stage: 1, report, d_loss, r1 })
    }

    pub fn step_stage2(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let batch: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.data_rng.gen_range(0..dataset.len()))
            .collect();
        let keys: Vec<[AnonKey; 4]> = batch
            .iter()
            .map(|_| {
                let seeds = self.sample_key_seeds();
                Ok(seeds
                    .iter()
                    .map(|&s| generate_key(&KeySource::Seed(s), self.model.d()))
                    .collect::<Result<Vec<_>>>()?
                    .try_into()
                    .map_err(|_| DbafError::state("key policy produced wrong count"))?)
            })
            .collect::<Result<Vec<_>>>()?;
        let gamma = self.cfg.weights.r1_gamma;
        let inv_b = 1.0 / self.cfg.batch_size as f64;
        let model = &self.model;

        // discriminator phase
        let d_results: Vec<Result<(f64, f64, BTreeMap<ParamId, Tensor>)>> = batch
            .par_iter()
            .zip(keys.par_iter())
            .map(|(&idx, key4)| {
                let fakes = five_way_values_of(model, &dataset.images[idx], key4)?;
                discriminator_grads(
                    &model.discriminator,
                    &model.store,
                    &dataset.images[idx],
                    &fakes,
                    gamma,
                )
            })
            .collect();
        let mut d_grads = BTreeMap::new();
        let mut d_loss = 0.0;
        let mut r1 = 0.0;
        for res in d_results {
            let (dl, r1v, grads) = res?;
            d_loss += dl * inv_b;
            r1 += r1v * inv_b;
            Self::accumulate(&mut d_grads, self.filter_grads(grads, &self.disc_ids));
        }
        Self::scale_grads(&mut d_grads, inv_b);
        self.disc_opt.step(&mut self.model.store, &d_grads);

        // generator phase
        let model = &self.model;
        let g_results: Vec<Result<(BTreeMap<ParamId, Tensor>, Stage2Terms)>> = batch
            .par_iter()
            .zip(keys.par_iter())
            .map(|(&idx, key4)| {
                let mut g = Graph::new(&model.store);
                let (tv, _) = five_way_terms_graph(model, &mut g, &dataset.images[idx], key4);
                let total = tv.weighted_total(&mut g, &self.cfg.weights);
                let grads = g.tape.backward(total);
                let mut terms = Stage2Terms::default();
                tv.add_values(&g, &mut terms, 1.0);
                Ok((g.param_grads(&grads), terms))
            })
            .collect();
        let mut g_grads = BTreeMap::new();
        let mut terms = Stage2Terms::default();
        for res in g_results {
            let (grads, t) = res?;
            Self::accumulate(&mut g_grads, self.filter_grads(grads, &self.gen_ids));
            terms.add_scaled(&t, inv_b);
        }
        Self::scale_grads(&mut g_grads, inv_b);
        self.gen_opt.step(&mut self.model.store, &g_grads);

        self.step += 1;
        let report = stage2_total(&terms, &self.cfg.weights);
        self.check_finite("stage 2", &report)?;
        Ok(StepRecord { step: self.step, stage: 2, report, d_loss, r1 })
    }

    /// Joint step for the single-stage ablation: both objectives in one
    /// update pass per role.
    pub fn step_joint(&mut self, dataset: &Dataset) -> Result<StepRecord> {
        let (ia, ib, same) = sample_pair_indices(dataset.len(), self.cfg.same_prob, &mut self.data_rng);
        let idx = self.data_rng.gen_range(0..dataset.len());
        let seeds = self.sample_key_seeds();
        let key4: [AnonKey; 4] = seeds
            .iter()
            .map(|&s| generate_key(&KeySource::Seed(s), self.model.d()))
            .collect::<Result<Vec<_>>>()?
            .try_into()
            .map_err(|_| DbafError::state("key policy produced wrong count"))?;
        let gamma = self.cfg.weights.r1_gamma;

        // discriminator phase over both branch outputs
        let mix = self.mix_value(&dataset.images[ia], &dataset.images[ib])?;
        let five = self.five_way_values(&dataset.images[idx], &key4)?;
        let mut d_grads = BTreeMap::new();
        let (dl1, r1a, grads1) = discriminator_grads(
            &self.model.discriminator,
            &self.model.store,
            &dataset.images[ia],
            &[mix],
            gamma,
        )?;
        Self::accumulate(&mut d_grads, self.filter_grads(grads1, &self.disc_ids));
        let (dl2, r1b, grads2) = discriminator_grads(
            &self.model.discriminator,
            &self.model.store,
            &dataset.images[idx],
            &five,
            gamma,
        )?;
        Self::accumulate(&mut d_grads, self.filter_grads(grads2, &self.disc_ids));
        self.disc_opt.step(&mut self.model.store, &d_grads);

        // generator phase: L_s1 + L_s2
        let mut g_grads = BTreeMap::new();
        let mut t1 = Stage1Terms::default();
        let mut t2 = Stage2Terms::default();
        {
            let mut g = Graph::new(&self.model.store);
            let (tv, _) = self.mix_terms_t(&mut g, &dataset.images[ia], &dataset.images[ib], same);
            let total = tv.weighted_total(&mut g, &self.cfg.weights);
            let grads = g.tape.backward(total);
            Self::accumulate(&mut g_grads, self.filter_grads(g.param_grads(&grads), &self.gen_ids));
            tv.add_values(&g, &mut t1, 1.0);
        }
        {
            let mut g = Graph::new(&self.model.store);
            let (tv, _) = self.five_way_terms_t(&mut g, &dataset.images[idx], &key4);
            let total = tv.weighted_total(&mut g, &self.cfg.weights);
            let grads = g.tape.backward(total);
            Self::accumulate(&mut g_grads, self.filter_grads(g.param_grads(&grads), &self.gen_ids));
            tv.add_values(&g, &mut t2, 1.0);
        }
        self.gen_opt.step(&mut self.model.store, &g_grads);

        self.step += 1;
        let r1_report = stage1_total(&t1, &self.cfg.weights);
        let r2_report = stage2_total(&t2, &self.cfg.weights);
        let mut terms: Vec<(String, f64)> = r1_report
            .terms
            .iter()
            .map(|(n, v)| (format!("s1.{n}"), *v))
            .collect();
        terms.extend(r2_report.terms.iter().map(|(n, v)| (format!("s2.{n}"), *v)));
        let report = LossReport { stage: 0, terms, total: r1_report.total + r2_report.total };
        self.check_finite("joint", &report)?;
        Ok(StepRecord { step: self.step, stage: 0, report, d_loss: dl1 + dl2, r1: r1a + r1b })
    }
}

/// Stage-1 mixing graph over one pair: encode both images, recombine the
/// identity codes of one with the attribute codes of the other, decode with
/// the attribute image's reweighted features, and build all term nodes.
fn mix_terms_graph(
    m: &DbafModel,
    w: &LossWeights,
    g: &mut Graph,
    x_attr: &ImageTensor,
    x_id: &ImageTensor,
    same: bool,
) -> (Stage1TermVars, Var) {
    let attr_leaf = g.tape.leaf(x_attr.pixels().clone().into_dyn());
    let id_leaf = g.tape.leaf(x_id.pixels().clone().into_dyn());
    let (levels_a, feats_a) = m.backbone.encode_t(g, attr_leaf);
    let (levels_i, _) = m.backbone.encode_t(g, id_leaf);
    let (attr_codes, _) = m.split_levels_t(g, levels_a);
    let (_, ident_codes) = m.split_levels_t(g, levels_i);
    let recombined = m.add_levels_t(g, ident_codes, attr_codes);
    let enhanced = m.enhance_t(g, feats_a);
    let mix = m.backbone.decode_t(g, recombined, enhanced);

    let e_mix = m.identity_extractor.embed_t(g, mix);
    let e_attr = m.identity_extractor.embed_t(g, attr_leaf);
    let cos = g.tape.cosine_similarity(e_mix, e_attr);
    let neg = g.tape.neg(cos);
    let d_c = g.tape.add_scalar(neg, 1.0);
    let contrastive = contrastive_t(&mut g.tape, d_c, same, w.tau_plus, w.tau_minus);

    let p_mix = m.perceptual_extractor.embed_t(g, mix);
    let p_attr = m.perceptual_extractor.embed_t(g, attr_leaf);
    let perceptual = euclid_diff_t(&mut g.tape, p_attr, p_mix);

    let reconstruction = g.tape.mean_abs_diff(attr_leaf, mix);

    let s_mix = m.parsing_extractor.embed_t(g, mix);
    let s_attr = m.parsing_extractor.embed_t(g, attr_leaf);
    let parsing = euclid_diff_t(&mut g.tape, s_attr, s_mix);

    let stacked = g.tape.concat(0, &recombined);
    let regularization = latent_reg_rows_t(&mut g.tape, stacked);

    let logit = m.discriminator.logit(g, mix);
    let neg_logit = g.tape.neg(logit);
    let adversarial = g.tape.softplus(neg_logit);

    (
        Stage1TermVars { contrastive, perceptual, reconstruction, parsing, regularization, adversarial },
        mix,
    )
}

/// Stage-2 five-way graph: two anonymizations of the original, then
/// recovery and two error recoveries from the re-encoded first anonymized
/// image, with every loss term of the stage.
fn five_way_terms_graph(
    m: &DbafModel,
    g: &mut Graph,
    x_ori: &ImageTensor,
    keys: &[AnonKey; 4],
) -> (Stage2TermVars, [Var; 5]) {
    let ori = g.tape.leaf(x_ori.pixels().clone().into_dyn());
    let (levels, feats) = m.backbone.encode_t(g, ori);
    let (attr, ident) = m.split_levels_t(g, levels);
    let keyed1 = m.keyed_t(g, &keys[0], ident);
    let keyed2 = m.keyed_t(g, &keys[1], ident);
    let ano1_codes = m.add_levels_t(g, attr, keyed1);
    let ano2_codes = m.add_levels_t(g, attr, keyed2);
    let enhanced_ori = m.enhance_t(g, feats);
    let x_ano1 = m.backbone.decode_t(g, ano1_codes, enhanced_ori);
    let x_ano2 = m.backbone.decode_t(g, ano2_codes, enhanced_ori);

    // re-encode the first anonymized image for recovery and error branches
    let (levels_a, feats_a) = m.backbone.encode_t(g, x_ano1);
    let (attr_a, ident_a) = m.split_levels_t(g, levels_a);
    let keyed_rec = m.keyed_t(g, &keys[0], ident_a);
    let keyed_err1 = m.keyed_t(g, &keys[2], ident_a);
    let keyed_err2 = m.keyed_t(g, &keys[3], ident_a);
    let rec_codes = m.add_levels_t(g, attr_a, keyed_rec);
    let err1_codes = m.add_levels_t(g, attr_a, keyed_err1);
    let err2_codes = m.add_levels_t(g, attr_a, keyed_err2);
    let enhanced_ano = m.enhance_t(g, feats_a);
    let x_rec = m.backbone.decode_t(g, rec_codes, enhanced_ano);
    let x_err1 = m.backbone.decode_t(g, err1_codes, enhanced_ano);
    let x_err2 = m.backbone.decode_t(g, err2_codes, enhanced_ano);

    let s1 = [x_ano1, x_ano2, x_err1, x_err2];
    let s2 = [x_ano1, x_ano2, x_rec, x_err1, x_err2];

    // identity losses over the frozen embedder
    let e_ori = m.identity_extractor.embed_t(g, ori);
    let e_s1: Vec<Var> = s1.iter().map(|&x| m.identity_extractor.embed_t(g, x)).collect();
    let e_rec = m.identity_extractor.embed_t(g, x_rec);
    let mut difference = g.tape.scalar(0.0);
    for &e in &e_s1 {
        let c = g.tape.cosine_similarity(e_ori, e);
        let h = relu_t(&mut g.tape, c);
        difference = g.tape.add(difference, h);
    }
    let cos_rec = g.tape.cosine_similarity(e_ori, e_rec);
    let neg = g.tape.neg(cos_rec);
    let recovery = g.tape.add_scalar(neg, 1.0);
    let mut diversity = g.tape.scalar(0.0);
    for i in 0..e_s1.len() {
        for j in i + 1..e_s1.len() {
            let c = g.tape.cosine_similarity(e_s1[i], e_s1[j]);
            let h = relu_t(&mut g.tape, c);
            diversity = g.tape.add(diversity, h);
        }
    }

    // image-level terms summed over the five outputs
    let p_ori = m.perceptual_extractor.embed_t(g, ori);
    let s_ori = m.parsing_extractor.embed_t(g, ori);
    let mut perceptual = g.tape.scalar(0.0);
    let mut reconstruction = g.tape.scalar(0.0);
    let mut parsing = g.tape.scalar(0.0);
    let mut adversarial = g.tape.scalar(0.0);
    for &x in &s2 {
        let p = m.perceptual_extractor.embed_t(g, x);
        let lp = euclid_diff_t(&mut g.tape, p_ori, p);
        perceptual = g.tape.add(perceptual, lp);
        let l1 = g.tape.mean_abs_diff(ori, x);
        reconstruction = g.tape.add(reconstruction, l1);
        let s = m.parsing_extractor.embed_t(g, x);
        let ls = euclid_diff_t(&mut g.tape, s_ori, s);
        parsing = g.tape.add(parsing, ls);
        let logit = m.discriminator.logit(g, x);
        let neg_logit = g.tape.neg(logit);
        let adv = g.tape.softplus(neg_logit);
        adversarial = g.tape.add(adversarial, adv);
    }

    // regularization over the five reconstructed code stacks
    let mut regularization = g.tape.scalar(0.0);
    for codes in [&ano1_codes, &ano2_codes, &rec_codes, &err1_codes, &err2_codes] {
        let stacked = g.tape.concat(0, codes);
        let r = latent_reg_rows_t(&mut g.tape, stacked);
        regularization = g.tape.add(regularization, r);
    }

    (
        Stage2TermVars {
            difference,
            recovery,
            diversity,
            perceptual,
            reconstruction,
            parsing,
            regularization,
            adversarial,
        },
        s2,
    )
}

fn mix_value_of(
    m: &DbafModel,
    w: &LossWeights,
    x_attr: &ImageTensor,
    x_id: &ImageTensor,
) -> Result<ImageTensor> {
    let mut g = Graph::new(&m.store);
    let (_, mix) = mix_terms_graph(m, w, &mut g, x_attr, x_id, true);
    ImageTensor::new(to3(g.tape.value(mix)))
}

fn five_way_values_of(
    m: &DbafModel,
    x_ori: &ImageTensor,
    keys: &[AnonKey; 4],
) -> Result<Vec<ImageTensor>> {
    let mut g = Graph::new(&m.store);
    let (_, s2) = five_way_terms_graph(m, &mut g, x_ori, keys);
    s2.iter().map(|&v| ImageTensor::new(to3(g.tape.value(v)))).collect()
}

struct Stage1TermVars {
    contrastive: Var,
    perceptual: Var,
    reconstruction: Var,
    parsing: Var,
    regularization: Var,
    adversarial: Var,
}

impl Stage1TermVars {
    fn weighted_total(&self, g: &mut Graph, w: &LossWeights) -> Var {
        let mut total = g.tape.scale(self.contrastive, w.stage1_contrastive);
        for (v, wt) in [
            (self.perceptual, w.stage1_perceptual),
            (self.reconstruction, w.stage1_reconstruction),
            (self.parsing, w.stage1_parsing),
            (self.regularization, w.stage1_regularization),
            (self.adversarial, 1.0),
        ] {
            let s = g.tape.scale(v, wt);
            total = g.tape.add(total, s);
        }
        total
    }

    fn add_values(&self, g: &Graph, terms: &mut Stage1Terms, factor: f64) {
        terms.contrastive += g.tape.scalar_value(self.contrastive) * factor;
        terms.perceptual += g.tape.scalar_value(self.perceptual) * factor;
        terms.reconstruction += g.tape.scalar_value(self.reconstruction) * factor;
        terms.parsing += g.tape.scalar_value(self.parsing) * factor;
        terms.regularization += g.tape.scalar_value(self.regularization) * factor;
        terms.adversarial += g.tape.scalar_value(self.adversarial) * factor;
    }
}

struct Stage2TermVars {
    difference: Var,
    recovery: Var,
    diversity: Var,
    perceptual: Var,
    reconstruction: Var,
    parsing: Var,
    regularization: Var,
    adversarial: Var,
}

impl Stage2TermVars {
    fn weighted_total(&self, g: &mut Graph, w: &LossWeights) -> Var {
        let id_sum = g.tape.add(self.difference, self.recovery);
        let id_sum = g.tape.add(id_sum, self.diversity);
        let mut total = g.tape.scale(id_sum, w.stage2_identity);
        for (v, wt) in [
            (self.perceptual, w.stage2_perceptual),
            (self.reconstruction, w.stage2_reconstruction),
            (self.parsing, w.stage2_parsing),
            (self.regularization, w.stage2_regularization),
            (self.adversarial, 1.0),
        ] {
            let s = g.tape.scale(v, wt);
            total = g.tape.add(total, s);
        }
        total
    }

    fn add_values(&self, g: &Graph, terms: &mut Stage2Terms, factor: f64) {
        terms.difference += g.tape.scalar_value(self.difference) * factor;
        terms.recovery += g.tape.scalar_value(self.recovery) * factor;
        terms.diversity += g.tape.scalar_value(self.diversity) * factor;
        terms.perceptual += g.tape.scalar_value(self.perceptual) * factor;
        terms.reconstruction += g.tape.scalar_value(self.reconstruction) * factor;
        terms.parsing += g.tape.scalar_value(self.parsing) * factor;
        terms.regularization += g.tape.scalar_value(self.regularization) * factor;
        terms.adversarial += g.tape.scalar_value(self.adversarial) * factor;
    }
}

fn to3(t: &Tensor) -> ndarray::Array3<f64> {
    t.view().into_dimensionality::<ndarray::Ix3>().expect("rank-3").to_owned()
}

// ---- top-level entry points ----

/// Trains the disentanglement stage from a fresh model.
pub fn train_stage1(dataset: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_stage1_with(dataset, cfg, &mut |_| {})
}

pub fn train_stage1_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    if cfg.stage != 1 {
        return Err(DbafError::validation("train_stage1 requires stage == 1"));
    }
    cfg.validate()?;
    let model = DbafModel::build(cfg.model_config())?;
    let mut trainer = Trainer::new(model, cfg.clone(), 1);
    for _ in 0..cfg.steps {
        let rec = trainer.step_stage1(dataset)?;
        on_step(&rec);
    }
    Ok(trainer.into_checkpoint())
}

/// Trains the anonymization stage on top of a stage-1 checkpoint; the
/// discriminator is re-initialized as a fresh adversary.
pub fn train_stage2(
    dataset: &Dataset,
    cfg: &TrainConfig,
    stage1: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    train_stage2_with(dataset, cfg, stage1, &mut |_| {})
}

pub fn train_stage2_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    stage1: Option<&Checkpoint>,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    if cfg.stage != 2 {
        return Err(DbafError::validation("train_stage2 requires stage == 2"));
    }
    cfg.validate()?;
    let mut model = match stage1 {
        Some(ckpt) => ckpt.model.clone(),
        None => {
            if cfg.ablation != AblationMode::SingleStage {
                return Err(DbafError::state(
                    "stage 2 requires a stage-1 checkpoint (except in the single_stage ablation)",
                ));
            }
            DbafModel::build(cfg.model_config())?
        }
    };
    let reseed = cfg.model.backbone.param_seed.wrapping_mul(0x9e37_79b9).wrapping_add(2);
    let disc = model.discriminator.clone();
    disc.reinit(&mut model.store, reseed);
    let mut trainer = Trainer::new(model, cfg.clone(), 2);
    for _ in 0..cfg.steps {
        let rec = trainer.step_stage2(dataset)?;
        on_step(&rec);
    }
    Ok(trainer.into_checkpoint())
}

/// Continues training from a checkpoint for `steps` more steps in the same
/// stage, with optimizer and sampling state restored.
pub fn resume(ckpt: &Checkpoint, dataset: &Dataset, steps: u64) -> Result<Checkpoint> {
    resume_with(ckpt, dataset, steps, &mut |_| {})
}

pub fn resume_with(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    steps: u64,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut trainer = Trainer::from_checkpoint(ckpt);
    for _ in 0..steps {
        let rec = match ckpt.state.stage {
            1 => trainer.step_stage1(dataset)?,
            2 => trainer.step_stage2(dataset)?,
            0 => trainer.step_joint(dataset)?,
            other => return Err(DbafError::state(format!("unknown stage {other}"))),
        };
        on_step(&rec);
    }
    Ok(trainer.into_checkpoint())
}

/// Runs one ablation configuration over a total step budget. Two-stage modes
/// split the budget between the stages; the single-stage mode trains both
/// objectives jointly for the whole budget.
pub fn run_ablation(
    mode: AblationMode,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Checkpoint> {
    run_ablation_with(mode, dataset, cfg, &mut |_| {})
}

pub fn run_ablation_with(
    mode: AblationMode,
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<Checkpoint> {
    let mut cfg = cfg.clone();
    cfg.ablation = mode;
    match mode {
        AblationMode::SingleStage => {
            cfg.validate()?;
            let model = DbafModel::build(cfg.model_config())?;
            let mut trainer = Trainer::new(model, cfg.clone(), 0);
            for _ in 0..cfg.steps {
                let rec = trainer.step_joint(dataset)?;
                on_step(&rec);
            }
            Ok(trainer.into_checkpoint())
        }
        AblationMode::Full | AblationMode::NoCid | AblationMode::NoMaar => {
            let total = cfg.steps;
            let s1_steps = total - total / 2;
            let mut cfg1 = cfg.clone();
            cfg1.stage = 1;
            cfg1.steps = s1_steps;
            let ckpt1 = train_stage1_with(dataset, &cfg1, on_step)?;
            let mut cfg2 = cfg.clone();
            cfg2.stage = 2;
            cfg2.steps = total - s1_steps;
            train_stage2_with(dataset, &cfg2, Some(&ckpt1), on_step)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> Dataset {
        Dataset::synthetic(4, 32, 77).unwrap()
    }

    #[test]
    fn sample_pair_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (i, j, same) = sample_pair_indices(8, 1.0, &mut rng);
            assert!(same);
            assert_eq!(i, j);
        }
        for _ in 0..50 {
            let (i, j, same) = sample_pair_indices(8, 0.0, &mut rng);
            assert!(!same);
            assert_ne!(i, j);
        }
    }

    #[test]
    fn sample_pair_rate_is_binomial() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 1000;
        let same_count = (0..n)
            .filter(|_| sample_pair_indices(16, 0.5, &mut rng).2)
            .count();
        let rate = same_count as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.05, "empirical same rate {rate}");
    }

    #[test]
    fn zero_steps_returns_initialized_checkpoint() {
        let mut cfg = TrainConfig::small_test_config();
        cfg.steps = 0;
        let ds = toy_dataset();
        let ckpt = train_stage1(&ds, &cfg).unwrap();
        assert_eq!(ckpt.state.step, 0);
        // parameters equal a freshly built model
        let fresh = DbafModel::build(cfg.model_config()).unwrap();
        for ((_, a), (_, b)) in ckpt.model.store.iter().zip(fresh.store.iter()) {
            assert_eq!(a.value, b.value, "{} changed", a.name);
        }
    }

    #[test]
    fn stage1_steps_run_and_are_deterministic() {
        let mut cfg = TrainConfig::small_test_config();
        cfg.steps = 2;
        let ds = toy_dataset();
        let mut trace_a = Vec::new();
        let _ = train_stage1_with(&ds, &cfg, &mut |r| trace_a.push(r.report.total)).unwrap();
        let mut trace_b = Vec::new();
        let _ = train_stage1_with(&ds, &cfg, &mut |r| trace_b.push(r.report.total)).unwrap();
        assert_eq!(trace_a.len(), 2);
        for (a, b) in trace_a.iter().zip(trace_b.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "loss traces must be bit-identical");
            assert!(a.is_finite());
        }
    }

    #[test]
    fn stage2_requires_stage1_checkpoint() {
        let mut cfg = TrainConfig::small_test_config();
        cfg.stage = 2;
        let ds = toy_dataset();
        assert!(matches!(
            train_stage2(&ds, &cfg, None),
            Err(DbafError::State(_))
        ));
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let ds = toy_dataset();
        let mut cfg = TrainConfig::small_test_config();
        cfg.steps = 3;
        // uninterrupted: 3 steps
        let mut full_trace = Vec::new();
        let _ = train_stage1_with(&ds, &cfg, &mut |r| full_trace.push(r.report.total)).unwrap();
        // interrupted: 2 steps, save/load round trip, 1 more step
        let mut cfg2 = cfg.clone();
        cfg2.steps = 2;
        let ckpt = train_stage1(&ds, &cfg2).unwrap();
        let mut buf = Vec::new();
        crate::checkpoint::save(&ckpt, &mut buf).unwrap();
        let loaded = crate::checkpoint::load(buf.as_slice()).unwrap();
        let mut tail = Vec::new();
        let _ = resume_with(&loaded, &ds, 1, &mut |r| tail.push(r.report.total)).unwrap();
        assert_eq!(tail.len(), 1);
        assert_eq!(
            full_trace[2].to_bits(),
            tail[0].to_bits(),
            "resumed step must reproduce the uninterrupted trace"
        );
    }

    #[test]
    fn discriminator_and_generator_updates_are_disjoint() {
        let ds = toy_dataset();
        let mut cfg = TrainConfig::small_test_config();
        cfg.steps = 1;
        let model = DbafModel::build(cfg.model_config()).unwrap();
        let disc_ids: std::collections::HashSet<usize> =
            model.discriminator.param_ids().iter().map(|p| p.index()).collect();
        let gen_ids: std::collections::HashSet<usize> = model
            .generator_param_ids(false)
            .iter()
            .map(|p| p.index())
            .collect();
        assert!(disc_ids.is_disjoint(&gen_ids));
        // frozen extractors belong to neither set
        for ex in [&model.identity_extractor, &model.perceptual_extractor, &model.parsing_extractor] {
            for id in ex.param_ids() {
                assert!(!disc_ids.contains(&id.index()));
                assert!(!gen_ids.contains(&id.index()));
            }
        }
        // frozen extractor parameters are untouched by a training step
        let before: Vec<Tensor> = model
            .identity_extractor
            .param_ids()
            .iter()
            .map(|id| model.store.value(*id).clone())
            .collect();
        let ckpt = train_stage1(&ds, &cfg).unwrap();
        for (id, b) in ckpt.model.identity_extractor.param_ids().iter().zip(before.iter()) {
            assert_eq!(ckpt.model.store.value(*id), b);
        }
    }

    #[test]
    fn freeze_backbone_keeps_backbone_parameters_fixed() {
        let ds = toy_dataset();
        let mut cfg = TrainConfig::small_test_config();
        cfg.steps = 1;
        cfg.freeze_backbone = true;
        let fresh = DbafModel::build(cfg.model_config()).unwrap();
        let before: Vec<Tensor> = fresh
            .backbone
            .param_ids()
            .iter()
            .map(|id| fresh.store.value(*id).clone())
            .collect();
        let ckpt = train_stage1(&ds, &cfg).unwrap();
        for (id, b) in ckpt.model.backbone.param_ids().iter().zip(before.iter()) {
            assert_eq!(ckpt.model.store.value(*id), b, "backbone changed while frozen");
        }
    }

    #[test]
    fn full_ablation_equals_stage_composition() {
        let ds = toy_dataset();
        let mut cfg = TrainConfig::small_test_config();
        cfg.steps = 2;
        let composed = {
            let mut c1 = cfg.clone();
            c1.stage = 1;
            c1.steps = 1;
            let ck1 = train_stage1(&ds, &c1).unwrap();
            let mut c2 = cfg.clone();
            c2.stage = 2;
            c2.steps = 1;
            train_stage2(&ds, &c2, Some(&ck1)).unwrap()
        };
        let via_ablation = run_ablation(AblationMode::Full, &ds, &cfg).unwrap();
        for ((_, a), (_, b)) in composed.model.store.iter().zip(via_ablation.model.store.iter()) {
            assert_eq!(a.value, b.value, "{} differs", a.name);
        }
    }

    #[test]
    fn stage2_smoke_step_runs() {
        let ds = toy_dataset();
        let mut cfg = TrainConfig::small_test_config();
        cfg.steps = 1;
        let ck1 = train_stage1(&ds, &cfg).unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.stage = 2;
        cfg2.steps = 1;
        let mut seen = Vec::new();
        let ck2 = train_stage2_with(&ds, &cfg2, Some(&ck1), &mut |r| {
            seen.push((r.report.total, r.d_loss))
        })
        .unwrap();
        assert_eq!(ck2.state.stage, 2);
        assert!(seen[0].0.is_finite() && seen[0].1.is_finite());
    }

    #[test]
    fn toml_config_round_trip() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = TrainConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        // partial configs inherit defaults
        let partial = TrainConfig::from_toml_str("steps = 5\nbatch_size = 1\n").unwrap();
        assert_eq!(partial.steps, 5);
        assert_eq!(partial.batch_size, 1);
        assert_eq!(partial.same_prob, 0.5);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.same_prob = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
    }
}
