//! Model assembly: backbone, disentangler, attribute retention, keyed
//! transform, frozen extractors and the discriminator, all over one
//! parameter store, plus the inference pipeline with pluggable backbones.

use crate::autodiff::{Tensor, Var};
use crate::backbone::{BackboneAdapter, BackboneConfig, ToyBackbone};
use crate::cid::{self, AttentionParams};
use crate::error::{DbafError, Result};
use crate::kria::{AnonKey, KriaParams};
use crate::losses::{BoundExtractor, Critic, ExtractorKind, ToyExtractor};
use crate::maar::{self, MaarParams};
use crate::nn::{init_scaled, Conv, Graph, Linear, Mlp, ParamId, ParamRole, ParamStore};
use crate::types::{DisentangledCodes, FeaturePyramid, ImageTensor, LatentPyramid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Structural/training ablation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    SingleStage,
    NoCid,
    NoMaar,
}

impl std::str::FromStr for AblationMode {
    type Err = DbafError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "single_stage" => Ok(Self::SingleStage),
            "no_cid" => Ok(Self::NoCid),
            "no_maar" => Ok(Self::NoMaar),
            other => Err(DbafError::validation(format!(
                "unknown ablation mode {other:?} (expected full, single_stage, no_cid, no_maar)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention_heads: usize,
    pub identity_seed: u64,
    pub perceptual_seed: u64,
    pub parsing_seed: u64,
    pub ablation: AblationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            attention_heads: 4,
            identity_seed: 101,
            perceptual_seed: 102,
            parsing_seed: 103,
            ablation: AblationMode::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.attention_heads == 0 {
            return Err(DbafError::config("attention_heads must be positive"));
        }
        Ok(())
    }
}

/// Identity/attribute splitter: shared attention, or a row-wise four-layer
/// perceptron in the no_cid ablation. Both keep the residual split, so the
/// exact-decomposition contract holds either way.
#[derive(Clone)]
pub enum Disentangler {
    Attention(AttentionParams),
    RowMlp(Mlp),
}

impl Disentangler {
    pub fn split_level_t(&self, g: &mut Graph, level: Var) -> (Var, Var) {
        match self {
            Disentangler::Attention(p) => cid::disentangle_level_t(g, p, level),
            Disentangler::RowMlp(mlp) => {
                let a = mlp.forward(g, level);
                let i = g.tape.sub(level, a);
                (a, i)
            }
        }
    }
}

/// Feature reweighting: the full attention module, or a plain channel
/// projection in the no_maar ablation.
#[derive(Clone)]
pub enum Retention {
    Maar(MaarParams),
    Projection { w: [ParamId; 3], d: usize, level_channels: [usize; 3] },
}

impl Retention {
    pub fn enhance_level_t(&self, g: &mut Graph, level: usize, m: Var) -> Var {
        match self {
            Retention::Maar(p) => maar::enhance_level_t(g, p, level, m),
            Retention::Projection { w, d, .. } => {
                let shape: Vec<usize> = g.tape.shape(m).to_vec();
                let (k, c) = (shape[0], shape[2]);
                let flat = g.tape.reshape(m, &[k * k, c]);
                let wv = g.p(w[level]);
                let proj = g.tape.matmul(flat, wv);
                g.tape.reshape(proj, &[k, k, *d])
            }
        }
    }
}

/// Convolutional discriminator producing a raw logit.
#[derive(Clone)]
pub struct ConvCritic {
    convs: Vec<Conv>,
    head: Linear,
    param_ids: Vec<ParamId>,
}

impl ConvCritic {
    pub fn new(store: &mut ParamStore, name: &str, image_size: usize, rng: &mut impl Rng) -> Self {
        let first = store.len();
        let role = ParamRole::Discriminator;
        let convs = vec![
            Conv::new(store, &format!("{name}.c0"), role, 3, 3, 16, 2, 1.0, rng),
            Conv::new(store, &format!("{name}.c1"), role, 3, 16, 32, 2, 1.0, rng),
            Conv::new(store, &format!("{name}.c2"), role, 3, 32, 64, 2, 1.0, rng),
            Conv::new(store, &format!("{name}.c3"), role, 3, 64, 64, 2, 1.0, rng),
        ];
        let k = image_size / 16;
        let head = Linear::new(store, &format!("{name}.head"), role, k * k * 64, 1, true, rng);
        let param_ids = (first..store.len()).map(crate::nn::ParamId).collect();
        Self { convs, head, param_ids }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Fresh adversary: re-samples every discriminator parameter.
    pub fn reinit(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &self.convs {
            let shape: Vec<usize> = store.value(conv.w).shape().to_vec();
            let fan_in = shape[0] * shape[1] * shape[2];
            store.set(conv.w, crate::nn::init_normal(&shape, 1.0 / (fan_in as f64).sqrt(), &mut rng));
            if let Some(b) = conv.b {
                let bshape: Vec<usize> = store.value(b).shape().to_vec();
                store.set(b, crate::nn::zeros(&bshape));
            }
        }
        let wshape: Vec<usize> = store.value(self.head.w).shape().to_vec();
        store.set(
            self.head.w,
            crate::nn::init_normal(&wshape, 1.0 / (wshape[0] as f64).sqrt(), &mut rng),
        );
        if let Some(b) = self.head.b {
            store.set(b, crate::nn::zeros(&[1]));
        }
    }
}

impl Critic for ConvCritic {
    fn logit(&self, g: &mut Graph, image: Var) -> Var {
        let mut h = image;
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = g.tape.leaky_relu(h, 0.2);
        }
        let shape: Vec<usize> = g.tape.shape(h).to_vec();
        let flat = g.tape.reshape(h, &[1, shape.iter().product()]);
        let out = self.head.forward(g, flat);
        g.tape.mean_all(out)
    }
}

/// The complete desk-scale model.
#[derive(Clone)]
pub struct DbafModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub disentangler: Disentangler,
    pub retention: Retention,
    pub kria: KriaParams,
    pub identity_extractor: ToyExtractor,
    pub perceptual_extractor: ToyExtractor,
    pub parsing_extractor: ToyExtractor,
    pub discriminator: ConvCritic,
}

impl DbafModel {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.backbone.param_seed);
        let backbone = ToyBackbone::new(&mut store, config.backbone.clone(), &mut rng)?;
        let d = config.backbone.d;
        let disentangler = match config.ablation {
            AblationMode::NoCid => Disentangler::RowMlp(Mlp::new(
                &mut store,
                "cid_mlp",
                ParamRole::Generator,
                &[d, d, d, d, d],
                &mut rng,
            )),
            _ => Disentangler::Attention(AttentionParams::new(
                &mut store,
                "cid",
                ParamRole::Generator,
                d,
                config.attention_heads,
                &mut rng,
            )),
        };
        let channels = config.backbone.feature_channels;
        let retention = match config.ablation {
            AblationMode::NoMaar => Retention::Projection {
                w: [0, 1, 2].map(|i| {
                    store.add(
                        format!("retention.w{i}"),
                        ParamRole::Generator,
                        init_scaled(&[channels[i], d], channels[i], &mut rng),
                    )
                }),
                d,
                level_channels: channels,
            },
            _ => Retention::Maar(MaarParams::new(
                &mut store,
                "maar",
                ParamRole::Generator,
                channels,
                d,
                &mut rng,
            )),
        };
        let kria = KriaParams::new(&mut store, "kria", ParamRole::Generator, d, &mut rng);
        let size = config.backbone.image_size;
        let identity_extractor =
            ToyExtractor::new(&mut store, "extract.identity", ExtractorKind::Identity, size, config.identity_seed);
        let perceptual_extractor =
            ToyExtractor::new(&mut store, "extract.perceptual", ExtractorKind::Perceptual, size, config.perceptual_seed);
        let parsing_extractor =
            ToyExtractor::new(&mut store, "extract.parsing", ExtractorKind::Parsing, size, config.parsing_seed);
        let discriminator = ConvCritic::new(&mut store, "disc", size, &mut rng);
        Ok(Self {
            config,
            store,
            backbone,
            disentangler,
            retention,
            kria,
            identity_extractor,
            perceptual_extractor,
            parsing_extractor,
            discriminator,
        })
    }

    pub fn d(&self) -> usize {
        self.config.backbone.d
    }

    pub fn image_size(&self) -> usize {
        self.config.backbone.image_size
    }

    /// Generator-side trainable parameters; the backbone can be frozen out.
    pub fn generator_param_ids(&self, freeze_backbone: bool) -> Vec<ParamId> {
        let backbone: std::collections::HashSet<usize> =
            self.backbone.param_ids().iter().map(|p| p.index()).collect();
        self.store
            .ids_with_role(ParamRole::Generator)
            .into_iter()
            .filter(|id| !(freeze_backbone && backbone.contains(&id.index())))
            .collect()
    }

    pub fn identity_embedder(&self) -> BoundExtractor<'_> {
        BoundExtractor { extractor: &self.identity_extractor, store: &self.store }
    }

    pub fn perceptual_embedder(&self) -> BoundExtractor<'_> {
        BoundExtractor { extractor: &self.perceptual_extractor, store: &self.store }
    }

    // ---- tape-level paths ----

    pub fn split_levels_t(&self, g: &mut Graph, levels: [Var; 3]) -> ([Var; 3], [Var; 3]) {
        let mut attr = Vec::with_capacity(3);
        let mut ident = Vec::with_capacity(3);
        for level in levels {
            let (a, i) = self.disentangler.split_level_t(g, level);
            attr.push(a);
            ident.push(i);
        }
        ([attr[0], attr[1], attr[2]], [ident[0], ident[1], ident[2]])
    }

    pub fn enhance_t(&self, g: &mut Graph, feats: [Var; 3]) -> [Var; 3] {
        [0, 1, 2].map(|i| self.retention.enhance_level_t(g, i, feats[i]))
    }

    pub fn keyed_t(&self, g: &mut Graph, key: &AnonKey, identity: [Var; 3]) -> [Var; 3] {
        [0, 1, 2].map(|i| {
            crate::kria::keyed_transform_level_t(g, &self.kria, &key.blocks[i], identity[i])
        })
    }

    pub fn add_levels_t(&self, g: &mut Graph, a: [Var; 3], b: [Var; 3]) -> [Var; 3] {
        [0, 1, 2].map(|i| g.tape.add(a[i], b[i]))
    }

    /// Full keyed mapping on the tape: image node to image node.
    pub fn keyed_mapping_t(&self, g: &mut Graph, image: Var, key: &AnonKey) -> Var {
        let (levels, feats) = self.backbone.encode_t(g, image);
        let (attr, ident) = self.split_levels_t(g, levels);
        let keyed = self.keyed_t(g, key, ident);
        let recombined = self.add_levels_t(g, attr, keyed);
        let enhanced = self.enhance_t(g, feats);
        self.backbone.decode_t(g, recombined, enhanced)
    }

    // ---- value-level surface ----

    pub fn encode_image(&self, image: &ImageTensor) -> Result<(LatentPyramid, FeaturePyramid)> {
        self.backbone.encode(&self.store, image)
    }

    /// Splits a latent pyramid into attribute and identity codes.
    pub fn split_codes(&self, codes: &LatentPyramid) -> Result<DisentangledCodes> {
        if codes.d() != self.d() {
            return Err(DbafError::shape("pyramid width does not match model d"));
        }
        let mut g = Graph::new(&self.store);
        let levels = [
            g.tape.leaf2(codes.coarse.clone()),
            g.tape.leaf2(codes.medium.clone()),
            g.tape.leaf2(codes.fine.clone()),
        ];
        let (a, i) = self.split_levels_t(&mut g, levels);
        let attribute = LatentPyramid::new(
            to2(g.tape.value(a[0])),
            to2(g.tape.value(a[1])),
            to2(g.tape.value(a[2])),
        )?;
        let identity = LatentPyramid::new(
            to2(g.tape.value(i[0])),
            to2(g.tape.value(i[1])),
            to2(g.tape.value(i[2])),
        )?;
        Ok(DisentangledCodes { attribute, identity })
    }

    /// Reweights raw backbone features to width-d enhanced maps.
    pub fn enhance_features(&self, features: &FeaturePyramid) -> Result<FeaturePyramid> {
        let expect = self.config.backbone.feature_channels;
        if features.channels() != expect {
            return Err(DbafError::shape(format!(
                "raw feature channels {:?} do not match configured {:?}",
                features.channels(),
                expect
            )));
        }
        let mut out = Vec::with_capacity(3);
        for (i, m) in features.maps().iter().enumerate() {
            let mut g = Graph::new(&self.store);
            let mv = g.tape.leaf(m.clone().into_dyn());
            let e = self.retention.enhance_level_t(&mut g, i, mv);
            out.push(to3(g.tape.value(e)));
        }
        FeaturePyramid::new(out)
    }

    /// Decodes a latent pyramid with either raw backbone features (the
    /// attribute-retention reweighting is applied first) or already enhanced
    /// width-d features.
    pub fn decode(&self, latents: &LatentPyramid, features: &FeaturePyramid) -> Result<ImageTensor> {
        let d = self.d();
        let enhanced = if features.channels() == [d, d, d] {
            features.clone()
        } else if features.channels() == self.config.backbone.feature_channels {
            self.enhance_features(features)?
        } else {
            return Err(DbafError::shape(format!(
                "feature channels {:?} match neither raw {:?} nor enhanced width {d}",
                features.channels(),
                self.config.backbone.feature_channels
            )));
        };
        self.backbone.decode_enhanced(&self.store, latents, &enhanced)
    }

    /// The keyed mapping G(image, key) used for both anonymization and
    /// recovery.
    pub fn apply_keyed_mapping(&self, image: &ImageTensor, key: &AnonKey) -> Result<ImageTensor> {
        if image.size() != self.image_size() {
            return Err(DbafError::config(format!(
                "image size {} does not match model image_size {}",
                image.size(),
                self.image_size()
            )));
        }
        if key.d != self.d() {
            return Err(DbafError::shape(format!(
                "key width {} does not match model d {}",
                key.d,
                self.d()
            )));
        }
        let mut g = Graph::new(&self.store);
        let iv = g.tape.leaf(image.pixels().clone().into_dyn());
        let out = self.keyed_mapping_t(&mut g, iv, key);
        ImageTensor::new(to3(g.tape.value(out)))
    }
}

/// Wraps the built-in backbone as a registrable adapter.
pub struct ToyBackboneAdapter {
    pub model: DbafModel,
}

impl BackboneAdapter for ToyBackboneAdapter {
    fn shape(&self) -> crate::backbone::BackboneShape {
        self.model.config.backbone.shape()
    }
    fn encode(&self, image: &ImageTensor) -> Result<(LatentPyramid, FeaturePyramid)> {
        self.model.encode_image(image)
    }
    fn decode(&self, latents: &LatentPyramid, enhanced: &FeaturePyramid) -> Result<ImageTensor> {
        self.model.backbone.decode_enhanced(&self.model.store, latents, enhanced)
    }
}

/// Opaque registration handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneHandle(u64);

/// Inference pipeline: the model plus an optionally registered external
/// backbone. Registered adapters provide encode/decode; disentangling,
/// keyed transforms and feature reweighting stay on the model parameters.
pub struct Pipeline {
    pub model: DbafModel,
    adapter: Option<Box<dyn BackboneAdapter>>,
    generation: u64,
}

impl Pipeline {
    pub fn new(model: DbafModel) -> Self {
        Self { model, adapter: None, generation: 0 }
    }

    /// Routes subsequent encode/decode calls through the adapter after
    /// validating its shape contract against the model configuration.
    pub fn register_backbone(&mut self, adapter: Box<dyn BackboneAdapter>) -> Result<BackboneHandle> {
        let shape = adapter.shape();
        let want = self.model.config.backbone.shape();
        if shape != want {
            return Err(DbafError::config(format!(
                "adapter shape {shape:?} does not match configured {want:?}"
            )));
        }
        self.adapter = Some(adapter);
        self.generation += 1;
        Ok(BackboneHandle(self.generation))
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    fn keyed_via_adapter(
        &self,
        adapter: &dyn BackboneAdapter,
        image: &ImageTensor,
        key: &AnonKey,
    ) -> Result<ImageTensor> {
        let (codes, features) = adapter.encode(image)?;
        let split = self.model.split_codes(&codes)?;
        let keyed = crate::kria::keyed_transform(&split.identity, key, &self.model.kria, &self.model.store)?;
        let recombined = LatentPyramid::new(
            &split.attribute.coarse + &keyed.coarse,
            &split.attribute.medium + &keyed.medium,
            &split.attribute.fine + &keyed.fine,
        )?;
        let enhanced = self.model.enhance_features(&features)?;
        adapter.decode(&recombined, &enhanced)
    }

    pub fn anonymize(&self, image: &ImageTensor, key: &AnonKey) -> Result<ImageTensor> {
        match &self.adapter {
            Some(a) => self.keyed_via_adapter(a.as_ref(), image, key),
            None => self.model.apply_keyed_mapping(image, key),
        }
    }

    /// Identical mapping with the same key; matching keys restore the
    /// original identity.
    pub fn recover(&self, image: &ImageTensor, key: &AnonKey) -> Result<ImageTensor> {
        self.anonymize(image, key)
    }
}

fn to2(t: &Tensor) -> ndarray::Array2<f64> {
    t.view().into_dimensionality::<ndarray::Ix2>().expect("rank-2").to_owned()
}

fn to3(t: &Tensor) -> ndarray::Array3<f64> {
    t.view().into_dimensionality::<ndarray::Ix3>().expect("rank-3").to_owned()
}
