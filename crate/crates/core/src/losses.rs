//! The loss suite of both stages, with pluggable feature extractors and the
//! adversarial pair with R1 regularization.
//!
//! Every term exists twice: a value-level function over images/embeddings
//! (the reporting and testing surface) and tape-level builders used by the
//! trainer. Desk-scale extractors are frozen, seeded convolutional networks;
//! real pretrained extractors plug in through the `Embedder` trait.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{DbafError, Result};
use crate::nn::{Conv, Graph, Linear, ParamId, ParamRole, ParamStore};
use crate::types::{ImageTensor, LatentPyramid};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

// ---- weights ----

/// Stage loss weights and shared hyperparameters. Stage weights follow the
/// published configuration; the contrastive margins and the R1 coefficient
/// are overridable defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub stage1_contrastive: f64,
    pub stage1_perceptual: f64,
    pub stage1_reconstruction: f64,
    pub stage1_parsing: f64,
    pub stage1_regularization: f64,
    pub stage2_identity: f64,
    pub stage2_perceptual: f64,
    pub stage2_reconstruction: f64,
    pub stage2_parsing: f64,
    pub stage2_regularization: f64,
    pub r1_gamma: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            stage1_contrastive: 1.0,
            stage1_perceptual: 1.0,
            stage1_reconstruction: 3.5,
            stage1_parsing: 0.1,
            stage1_regularization: 0.1,
            stage2_identity: 2.0,
            stage2_perceptual: 1.0,
            stage2_reconstruction: 0.05,
            stage2_parsing: 0.1,
            stage2_regularization: 0.1,
            r1_gamma: 10.0,
            tau_plus: 0.3,
            tau_minus: 1.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.stage1_contrastive,
            self.stage1_perceptual,
            self.stage1_reconstruction,
            self.stage1_parsing,
            self.stage1_regularization,
            self.stage2_identity,
            self.stage2_perceptual,
            self.stage2_reconstruction,
            self.stage2_parsing,
            self.stage2_regularization,
            self.r1_gamma,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(DbafError::validation("loss weights must be non-negative"));
        }
        if self.tau_plus >= self.tau_minus {
            return Err(DbafError::validation("tau_plus must be below tau_minus"));
        }
        Ok(())
    }
}

// ---- extractors ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtractorKind {
    Identity,
    Perceptual,
    Parsing,
}

/// Value-level embedding interface; adapters for real pretrained models
/// implement this.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>>;
}

/// Frozen, seeded convolutional feature extractor.
#[derive(Clone)]
pub struct ToyExtractor {
    pub kind: ExtractorKind,
    pub seed: u64,
    pub dim: usize,
    convs: Vec<Conv>,
    head: Option<Linear>,
    proj: Option<Conv>,
    param_ids: Vec<ParamId>,
}

impl ToyExtractor {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: ExtractorKind,
        image_size: usize,
        seed: u64,
    ) -> Self {
        let first = store.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let role = ParamRole::Frozen;
        let convs = vec![
            Conv::new(store, &format!("{name}.c0"), role, 3, 3, 8, 2, 1.0, &mut rng),
            Conv::new(store, &format!("{name}.c1"), role, 3, 8, 16, 2, 1.0, &mut rng),
            Conv::new(store, &format!("{name}.c2"), role, 3, 16, 16, 2, 1.0, &mut rng),
        ];
        let k = image_size / 8;
        let (head, proj, dim) = match kind {
            ExtractorKind::Parsing => {
                let proj = Conv::new(store, &format!("{name}.proj"), role, 1, 16, 4, 1, 1.0, &mut rng);
                (None, Some(proj), k * k * 4)
            }
            _ => {
                let head =
                    Linear::new(store, &format!("{name}.head"), role, k * k * 16, 32, false, &mut rng);
                (Some(head), None, 32)
            }
        };
        let param_ids = (first..store.len()).map(crate::nn::ParamId).collect();
        Self { kind, seed, dim, convs, head, proj, param_ids }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Embedding as a flat [dim] tape node; gradients flow to the image.
    pub fn embed_t(&self, g: &mut Graph, image: Var) -> Var {
        let mut h = image;
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = g.tape.leaky_relu(h, 0.2);
        }
        if let Some(proj) = &self.proj {
            h = proj.forward(g, h);
        }
        let shape: Vec<usize> = g.tape.shape(h).to_vec();
        let flat = g.tape.reshape(h, &[1, shape.iter().product()]);
        let out = match &self.head {
            Some(head) => head.forward(g, flat),
            None => flat,
        };
        let n = g.tape.shape(out)[1];
        g.tape.reshape(out, &[n])
    }

    pub fn embed_value(&self, store: &ParamStore, image: &ImageTensor) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let iv = g.tape.leaf(image.pixels().clone().into_dyn());
        let e = self.embed_t(&mut g, iv);
        Ok(g.tape.value(e).iter().copied().collect())
    }
}

/// A toy extractor paired with its parameter store.
pub struct BoundExtractor<'a> {
    pub extractor: &'a ToyExtractor,
    pub store: &'a ParamStore,
}

impl Embedder for BoundExtractor<'_> {
    fn dim(&self) -> usize {
        self.extractor.dim
    }
    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.extractor.embed_value(self.store, image)
    }
}

/// Embedder defined by a closure; test stubs use this.
pub struct FnEmbedder<F: Fn(&ImageTensor) -> Vec<f64>> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&ImageTensor) -> Vec<f64>> Embedder for FnEmbedder<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_image(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        Ok((self.f)(image))
    }
}

// ---- vector helpers ----

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// cos(a, b); zero-norm inputs are a numeric error.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(DbafError::numeric("zero-norm embedding in cosine"));
    }
    Ok(dot(a, b) / (na * nb))
}

// ---- value-level loss terms ----

/// 1 - cos of the two identity embeddings; lies in [0, 2].
pub fn cosine_identity_distance(
    x: &ImageTensor,
    y: &ImageTensor,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let a = embedder.embed_image(x)?;
    let b = embedder.embed_image(y)?;
    Ok(1.0 - cosine(&a, &b)?)
}

/// Hinge on the identity distance: same pairs pay above tau_plus, different
/// pairs pay below tau_minus.
pub fn contrastive_loss(d_c: f64, same_identity: bool, tau_plus: f64, tau_minus: f64) -> f64 {
    assert!(tau_plus < tau_minus, "tau_plus must be below tau_minus");
    if same_identity {
        (d_c - tau_plus).max(0.0)
    } else {
        (tau_minus - d_c).max(0.0)
    }
}

/// Euclidean distance of the two feature embeddings.
pub fn perceptual_loss(
    x: &ImageTensor,
    reference: &ImageTensor,
    embedder: &dyn Embedder,
) -> Result<f64> {
    let a = embedder.embed_image(reference)?;
    let b = embedder.embed_image(x)?;
    let diff: Vec<f64> = a.iter().zip(b.iter()).map(|(p, q)| p - q).collect();
    Ok(norm(&diff))
}

/// Mean absolute pixel difference.
pub fn l1_loss(x: &ImageTensor, reference: &ImageTensor) -> f64 {
    crate::types::l1_pixel_distance(x, reference)
}

/// Euclidean distance over parsing-feature outputs.
pub fn parsing_loss(
    x: &ImageTensor,
    reference: &ImageTensor,
    embedder: &dyn Embedder,
) -> Result<f64> {
    perceptual_loss(x, reference, embedder)
}

/// sum_{i=1..N-1} ||w_i - mean(w)|| over style rows.
pub fn latent_regularization_rows(rows: &Array2<f64>) -> f64 {
    let n = rows.nrows();
    if n < 2 {
        return 0.0;
    }
    let mean = crate::types::row_mean(rows);
    let mut acc = 0.0;
    for i in 0..n - 1 {
        let mut ss = 0.0;
        for j in 0..rows.ncols() {
            let d = rows[[i, j]] - mean[j];
            ss += d * d;
        }
        acc += ss.sqrt();
    }
    acc
}

/// Regularization over the 14 style rows of a pyramid.
pub fn latent_regularization(codes: &LatentPyramid) -> f64 {
    latent_regularization_rows(&codes.stacked())
}

/// sum over the set of max(0, cos(F(origin), F(x))).
pub fn identity_difference_loss(
    origin: &ImageTensor,
    set: &[ImageTensor],
    embedder: &dyn Embedder,
) -> Result<f64> {
    let e0 = embedder.embed_image(origin)?;
    let mut acc = 0.0;
    for x in set {
        let e = embedder.embed_image(x)?;
        acc += cosine(&e0, &e)?.max(0.0);
    }
    Ok(acc)
}

/// 1 - cos(F(origin), F(recovered)).
pub fn identity_recovery_loss(
    origin: &ImageTensor,
    recovered: &ImageTensor,
    embedder: &dyn Embedder,
) -> Result<f64> {
    cosine_identity_distance(origin, recovered, embedder)
}

/// sum over unordered pairs of max(0, cos(F(x), F(y))).
pub fn identity_diversity_loss(set: &[ImageTensor], embedder: &dyn Embedder) -> Result<f64> {
    let embs: Vec<Vec<f64>> = set
        .iter()
        .map(|x| embedder.embed_image(x))
        .collect::<Result<_>>()?;
    let mut acc = 0.0;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            acc += cosine(&embs[i], &embs[j])?.max(0.0);
        }
    }
    Ok(acc)
}

// ---- adversarial pair ----

/// Anything that scores an image with a raw logit on a graph.
pub trait Critic {
    fn logit(&self, g: &mut Graph, image: Var) -> Var;
}

/// D(x) = <a, x> as a raw logit; the R1 term is then (gamma/2)||a||^2.
pub struct LinearCritic {
    pub weights: Tensor,
}

impl Critic for LinearCritic {
    fn logit(&self, g: &mut Graph, image: Var) -> Var {
        let w = g.tape.leaf(self.weights.clone());
        let p = g.tape.mul(w, image);
        g.tape.sum_all(p)
    }
}

/// Constant-logit critic (logit 0 means D outputs 0.5).
pub struct ConstCritic {
    pub logit_value: f64,
}

impl Critic for ConstCritic {
    fn logit(&self, g: &mut Graph, image: Var) -> Var {
        let z = g.tape.scale(image, 0.0);
        let s = g.tape.sum_all(z);
        g.tape.add_scalar(s, self.logit_value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialReport {
    /// Discriminator objective including the R1 penalty.
    pub d_loss: f64,
    /// Non-saturating generator objective.
    pub g_loss: f64,
    /// (gamma/2) E||grad_x D(real)||^2, reported once per real image.
    pub r1_term: f64,
}

/// Gradient of the critic logit with respect to the input image.
pub fn critic_input_gradient(
    critic: &dyn Critic,
    store: &ParamStore,
    image: &ImageTensor,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.tape.leaf(image.pixels().clone().into_dyn());
    let l = critic.logit(&mut g, x);
    let grads = g.tape.backward(l);
    Ok(grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(ndarray::IxDyn(image.pixels().shape()))))
}

/// Non-saturating adversarial losses with R1 regularization on the real
/// sample. The discriminator loss sums the real and penalty terms once per
/// fake, matching the summed stage-2 objective; with one fake this is the
/// standard pair.
pub fn adversarial_losses(
    real: &ImageTensor,
    fakes: &[ImageTensor],
    critic: &dyn Critic,
    store: &ParamStore,
    gamma: f64,
) -> Result<AdversarialReport> {
    if fakes.is_empty() {
        return Err(DbafError::validation("at least one fake image required"));
    }
    let mut g = Graph::new(store);
    let xr = g.tape.leaf(real.pixels().clone().into_dyn());
    let l_real = critic.logit(&mut g, xr);
    let real_nll = softplus(-g.tape.scalar_value(l_real)); // -log D(real)
    let mut fake_nll_d = 0.0; // -log(1 - D(fake))
    let mut g_loss = 0.0; // -log D(fake)
    for f in fakes {
        let xf = g.tape.leaf(f.pixels().clone().into_dyn());
        let lf = critic.logit(&mut g, xf);
        let lv = g.tape.scalar_value(lf);
        fake_nll_d += softplus(lv);
        g_loss += softplus(-lv);
    }
    let grad = critic_input_gradient(critic, store, real)?;
    let r1_term = 0.5 * gamma * grad.iter().map(|v| v * v).sum::<f64>();
    let nf = fakes.len() as f64;
    Ok(AdversarialReport {
        d_loss: nf * (real_nll + r1_term) + fake_nll_d,
        g_loss,
        r1_term,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Discriminator loss value, R1 term, and parameter gradients for one real
/// image against a set of fakes.
///
/// The R1 parameter gradient is a Hessian-vector product evaluated as a
/// central difference of logit parameter gradients along the frozen input
/// gradient direction; only first-order backward passes are required.
pub fn discriminator_grads(
    critic: &dyn Critic,
    store: &ParamStore,
    real: &ImageTensor,
    fakes: &[ImageTensor],
    gamma: f64,
) -> Result<(f64, f64, BTreeMap<ParamId, Tensor>)> {
    let nf = fakes.len() as f64;
    // main terms: nf * softplus(-l_real) + sum softplus(l_fake)
    let mut g = Graph::new(store);
    let xr = g.tape.leaf(real.pixels().clone().into_dyn());
    let l_real = critic.logit(&mut g, xr);
    let sp_real = g.tape.neg(l_real);
    let sp_real = g.tape.softplus(sp_real);
    let mut loss = g.tape.scale(sp_real, nf);
    for f in fakes {
        let xf = g.tape.leaf(f.pixels().clone().into_dyn());
        let lf = critic.logit(&mut g, xf);
        let spf = g.tape.softplus(lf);
        loss = g.tape.add(loss, spf);
    }
    let loss_value = g.tape.scalar_value(loss);
    let grads = g.tape.backward(loss);
    let mut param_grads = g.param_grads(&grads);

    // R1 penalty value and its parameter gradient
    let gx = critic_input_gradient(critic, store, real)?;
    let gnorm = gx.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r1_term = 0.5 * gamma * gnorm * gnorm;
    if gnorm > 0.0 {
        let h = 1e-4;
        let unit = gx.mapv(|v| v / gnorm);
        let logit_param_grads = |px: Tensor| -> BTreeMap<ParamId, Tensor> {
            let mut gg = Graph::new(store);
            let xv = gg.tape.leaf(px);
            let l = critic.logit(&mut gg, xv);
            let gr = gg.tape.backward(l);
            gg.param_grads(&gr)
        };
        let base = real.pixels().clone().into_dyn();
        let plus = logit_param_grads(&base + &unit.mapv(|v| v * h));
        let minus = logit_param_grads(&base - &unit.mapv(|v| v * h));
        let scale = nf * gamma * gnorm / (2.0 * h);
        for (id, gp) in plus {
            let gm = minus.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(gp.raw_dim()));
            let contrib = (gp - gm).mapv(|v| v * scale);
            param_grads
                .entry(id)
                .and_modify(|acc| *acc += &contrib)
                .or_insert(contrib);
        }
    }
    Ok((loss_value + nf * r1_term, r1_term, param_grads))
}

// ---- tape-level builders used by the trainer ----

/// max(0, x) elementwise.
pub fn relu_t(tape: &mut Tape, x: Var) -> Var {
    tape.leaky_relu(x, 0.0)
}

/// Contrastive hinge on a scalar distance node.
pub fn contrastive_t(tape: &mut Tape, d_c: Var, same: bool, tau_plus: f64, tau_minus: f64) -> Var {
    if same {
        let shifted = tape.add_scalar(d_c, -tau_plus);
        relu_t(tape, shifted)
    } else {
        let neg = tape.neg(d_c);
        let shifted = tape.add_scalar(neg, tau_minus);
        relu_t(tape, shifted)
    }
}

/// Euclidean norm of the difference of two nodes.
pub fn euclid_diff_t(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    tape.l2_norm(d)
}

/// sum_{i=1..N-1} ||row_i - mean row|| on a stacked style matrix.
pub fn latent_reg_rows_t(tape: &mut Tape, stacked: Var) -> Var {
    let shape: Vec<usize> = tape.shape(stacked).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let mean = tape.reduce_mean(stacked, &[0]);
    let mean_b = tape.broadcast_to(mean, &[n, d]);
    let diff = tape.sub(stacked, mean_b);
    let mut acc = tape.scalar(0.0);
    for i in 0..n - 1 {
        let row = tape.narrow(diff, 0, i, 1);
        let nrm = tape.l2_norm(row);
        acc = tape.add(acc, nrm);
    }
    acc
}

// ---- stage totals ----

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage1Terms {
    pub contrastive: f64,
    pub perceptual: f64,
    pub reconstruction: f64,
    pub parsing: f64,
    pub regularization: f64,
    pub adversarial: f64,
}

impl Stage1Terms {
    pub fn add_scaled(&mut self, other: &Stage1Terms, factor: f64) {
        self.contrastive += other.contrastive * factor;
        self.perceptual += other.perceptual * factor;
        self.reconstruction += other.reconstruction * factor;
        self.parsing += other.parsing * factor;
        self.regularization += other.regularization * factor;
        self.adversarial += other.adversarial * factor;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stage2Terms {
    pub difference: f64,
    pub recovery: f64,
    pub diversity: f64,
    pub perceptual: f64,
    pub reconstruction: f64,
    pub parsing: f64,
    pub regularization: f64,
    pub adversarial: f64,
}

impl Stage2Terms {
    pub fn add_scaled(&mut self, other: &Stage2Terms, factor: f64) {
        self.difference += other.difference * factor;
        self.recovery += other.recovery * factor;
        self.diversity += other.diversity * factor;
        self.perceptual += other.perceptual * factor;
        self.reconstruction += other.reconstruction * factor;
        self.parsing += other.parsing * factor;
        self.regularization += other.regularization * factor;
        self.adversarial += other.adversarial * factor;
    }
}

/// Named scalar terms plus the weighted stage total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: u8,
    pub terms: Vec<(String, f64)>,
    pub total: f64,
}

impl LossReport {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Weighted stage-1 total: contrastive, perceptual, reconstruction, parsing
/// and regularization terms under their weights plus the adversarial term.
pub fn stage1_total(terms: &Stage1Terms, w: &LossWeights) -> LossReport {
    let total = w.stage1_contrastive * terms.contrastive
        + w.stage1_perceptual * terms.perceptual
        + w.stage1_reconstruction * terms.reconstruction
        + w.stage1_parsing * terms.parsing
        + w.stage1_regularization * terms.regularization
        + terms.adversarial;
    LossReport {
        stage: 1,
        terms: vec![
            ("contrastive".into(), terms.contrastive),
            ("perceptual".into(), terms.perceptual),
            ("reconstruction".into(), terms.reconstruction),
            ("parsing".into(), terms.parsing),
            ("regularization".into(), terms.regularization),
            ("adversarial".into(), terms.adversarial),
        ],
        total,
    }
}

/// Weighted stage-2 total; the identity term is the sum of difference,
/// recovery and diversity losses.
pub fn stage2_total(terms: &Stage2Terms, w: &LossWeights) -> LossReport {
    let identity = terms.difference + terms.recovery + terms.diversity;
    let total = w.stage2_identity * identity
        + w.stage2_perceptual * terms.perceptual
        + w.stage2_reconstruction * terms.reconstruction
        + w.stage2_parsing * terms.parsing
        + w.stage2_regularization * terms.regularization
        + terms.adversarial;
    LossReport {
        stage: 2,
        terms: vec![
            ("difference".into(), terms.difference),
            ("recovery".into(), terms.recovery),
            ("diversity".into(), terms.diversity),
            ("identity".into(), identity),
            ("perceptual".into(), terms.perceptual),
            ("reconstruction".into(), terms.reconstruction),
            ("parsing".into(), terms.parsing),
            ("regularization".into(), terms.regularization),
            ("adversarial".into(), terms.adversarial),
        ],
        total,
    }
}
