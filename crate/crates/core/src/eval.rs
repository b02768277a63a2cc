//! Evaluation suite: verification-style recognition rates, pixel and
//! perceptual quality metrics, Frechet distance between embedding sets,
//! identity-embedding export, and utility distances over detector outputs.

use crate::error::{DbafError, Result};
use crate::kria::AnonKey;
use crate::losses::Embedder;
use crate::model::Pipeline;
use crate::types::ImageTensor;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

pub const REPORT_FORMAT: &str = "dbaf-report-v1";
/// Reported PSNR when the mean squared error is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

// ---- recognition ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// Squared Euclidean distance between L2-normalized embeddings
    /// (FaceNet convention, threshold 1.1).
    Euclidean,
    /// Cosine distance 1 - cos (ArcFace-style convention, threshold 0.8).
    Cosine,
}

#[derive(Debug, Clone, Copy)]
pub struct RecognitionConfig {
    pub threshold: f64,
    pub metric: DistanceMetric,
}

impl RecognitionConfig {
    pub fn facenet() -> Self {
        Self { threshold: 1.1, metric: DistanceMetric::Euclidean }
    }
    pub fn arcface() -> Self {
        Self { threshold: 0.8, metric: DistanceMetric::Cosine }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) {
            return Err(DbafError::validation("recognition threshold must be positive"));
        }
        Ok(())
    }
}

fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(DbafError::numeric("zero-norm embedding"));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Distance between two embeddings under the configured metric.
pub fn embedding_distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64> {
    match metric {
        DistanceMetric::Euclidean => {
            let an = l2_normalize(a)?;
            let bn = l2_normalize(b)?;
            Ok(an.iter().zip(bn.iter()).map(|(x, y)| (x - y) * (x - y)).sum())
        }
        DistanceMetric::Cosine => Ok(1.0 - crate::losses::cosine(a, b)?),
    }
}

/// Fraction of pairs whose embedding distance stays below the threshold,
/// i.e. pairs that are still recognized as the same identity. Low for
/// successful anonymization, high for successful recovery.
pub fn recognition_rate(
    pairs: &[(ImageTensor, ImageTensor)],
    embedder: &dyn Embedder,
    config: &RecognitionConfig,
) -> Result<f64> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(DbafError::validation("recognition_rate needs at least one pair"));
    }
    let mut recognized = 0usize;
    for (original, generated) in pairs {
        let a = embedder.embed_image(original)?;
        let b = embedder.embed_image(generated)?;
        if embedding_distance(&a, &b, config.metric)? < config.threshold {
            recognized += 1;
        }
    }
    Ok(recognized as f64 / pairs.len() as f64)
}

// ---- pixel metrics ----

pub fn mse(x: &ImageTensor, reference: &ImageTensor) -> f64 {
    let diff = x.pixels() - reference.pixels();
    diff.mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// 10 log10(max_val^2 / mse), capped for identical images.
pub fn psnr(mse_value: f64, max_val: f64) -> f64 {
    if mse_value <= 0.0 {
        return PSNR_CAP_DB;
    }
    10.0 * ((max_val * max_val) / mse_value).log10()
}

pub fn psnr_of(x: &ImageTensor, reference: &ImageTensor, max_val: f64) -> f64 {
    psnr(mse(x, reference), max_val)
}

/// Euclidean distance between extractor embeddings; identical to the
/// perceptual loss term.
pub fn perceptual_distance(
    x: &ImageTensor,
    reference: &ImageTensor,
    embedder: &dyn Embedder,
) -> Result<f64> {
    crate::losses::perceptual_loss(x, reference, embedder)
}

// ---- Frechet distance ----

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvectors as columns).
pub fn symmetric_eigen(a: &Array2<f64>, tol: f64, max_sweeps: usize) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() < tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (vals, v)
}

/// Symmetric PSD square root via eigendecomposition with negative-eigenvalue
/// clamping.
fn sqrtm_psd(a: &Array2<f64>) -> Array2<f64> {
    let sym = (a + &a.t()) / 2.0;
    let (vals, vecs) = symmetric_eigen(&sym, 1e-8, 100);
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        let lam = vals[k].max(0.0).sqrt();
        if lam == 0.0 {
            continue;
        }
        let col = vecs.column(k);
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += lam * col[i] * col[j];
            }
        }
    }
    out
}

fn mean_and_cov(set: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = set.nrows() as f64;
    let mean = set.mean_axis(Axis(0)).expect("non-empty set");
    let mut centered = set.clone();
    for mut row in centered.rows_mut() {
        row -= &mean;
    }
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mean, cov)
}

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) between Gaussian
/// fits of two embedding sets (rows are samples).
pub fn fid(set_a: &Array2<f64>, set_b: &Array2<f64>) -> Result<f64> {
    if set_a.ncols() != set_b.ncols() {
        return Err(DbafError::shape("embedding widths differ"));
    }
    let m = set_a.ncols();
    if set_a.nrows() <= m || set_b.nrows() <= m {
        return Err(DbafError::validation(format!(
            "need more than {m} samples per set to estimate covariance"
        )));
    }
    let (mu_a, cov_a) = mean_and_cov(set_a);
    let (mu_b, cov_b) = mean_and_cov(set_b);
    if cov_a.iter().chain(cov_b.iter()).any(|v| !v.is_finite()) {
        return Err(DbafError::numeric("non-finite covariance"));
    }
    // Tr sqrt(S_a S_b) via the symmetrized product sqrt(S_a) S_b sqrt(S_a)
    let ra = sqrtm_psd(&cov_a);
    let prod = ra.dot(&cov_b).dot(&ra);
    let sym = (&prod + &prod.t()) / 2.0;
    let (vals, _) = symmetric_eigen(&sym, 1e-8, 100);
    let trace_sqrt: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let trace_a: f64 = (0..m).map(|i| cov_a[[i, i]]).sum();
    let trace_b: f64 = (0..m).map(|i| cov_b[[i, i]]).sum();
    Ok((mean_term + trace_a + trace_b - 2.0 * trace_sqrt).max(0.0))
}

// ---- identity-embedding export ----

/// Anonymizes each image under each key, embeds the result, and writes a
/// CSV table: source id, key seed, then the embedding entries.
pub fn export_identity_embeddings(
    images: &[(String, ImageTensor)],
    keys: &[AnonKey],
    pipeline: &Pipeline,
    embedder: &dyn Embedder,
    mut out: impl Write,
) -> Result<usize> {
    if images.is_empty() || keys.is_empty() {
        return Err(DbafError::validation("need at least one image and one key"));
    }
    let dim = embedder.dim();
    write!(out, "source,key_seed")?;
    for i in 0..dim {
        write!(out, ",e{i}")?;
    }
    writeln!(out)?;
    let mut rows = 0usize;
    for (source, image) in images {
        for key in keys {
            let anonymized = pipeline.anonymize(image, key)?;
            let emb = embedder.embed_image(&anonymized)?;
            write!(out, "{source},{}", key.seed)?;
            for v in &emb {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
            rows += 1;
        }
    }
    Ok(rows)
}

// ---- utility distances over detector outputs ----

/// Output of an external face detector for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub detected: bool,
    pub bbox: Option<[f64; 4]>,
    /// 68 landmark points in pixels; present only when detected.
    pub landmarks: Option<Vec<[f64; 2]>>,
}

impl DetectorOutput {
    pub fn missed() -> Self {
        Self { detected: false, bbox: None, landmarks: None }
    }

    pub fn found(bbox: [f64; 4], landmarks: Vec<[f64; 2]>) -> Result<Self> {
        if landmarks.len() != 68 {
            return Err(DbafError::validation(format!(
                "expected 68 landmarks, got {}",
                landmarks.len()
            )));
        }
        Ok(Self { detected: true, bbox: Some(bbox), landmarks: Some(landmarks) })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.detected && (self.bbox.is_some() || self.landmarks.is_some()) {
            return Err(DbafError::validation(
                "landmarks/bbox present only if detected",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UtilityDistances {
    /// Fraction of generated images the detector still finds.
    pub detection_rate: f64,
    /// Mean per-coordinate absolute bounding-box difference, detected pairs only.
    pub bbox_distance: f64,
    /// Mean Euclidean distance over the 68 landmarks, detected pairs only.
    pub landmark_distance: f64,
}

/// Compares detector outputs on original vs generated images (aligned lists).
pub fn utility_distances(
    outputs_original: &[DetectorOutput],
    outputs_generated: &[DetectorOutput],
) -> Result<UtilityDistances> {
    if outputs_original.len() != outputs_generated.len() {
        return Err(DbafError::validation("detector output lists must be aligned"));
    }
    if outputs_original.is_empty() {
        return Err(DbafError::validation("need at least one detector output"));
    }
    for o in outputs_original.iter().chain(outputs_generated.iter()) {
        o.validate()?;
    }
    let detection_rate = outputs_generated.iter().filter(|o| o.detected).count() as f64
        / outputs_generated.len() as f64;
    let mut bbox_acc = 0.0;
    let mut bbox_n = 0usize;
    let mut lm_acc = 0.0;
    let mut lm_n = 0usize;
    for (a, b) in outputs_original.iter().zip(outputs_generated.iter()) {
        if !(a.detected && b.detected) {
            continue;
        }
        if let (Some(ba), Some(bb)) = (&a.bbox, &b.bbox) {
            bbox_acc += ba.iter().zip(bb.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0;
            bbox_n += 1;
        }
        if let (Some(la), Some(lb)) = (&a.landmarks, &b.landmarks) {
            let d: f64 = la
                .iter()
                .zip(lb.iter())
                .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                .sum::<f64>()
                / la.len() as f64;
            lm_acc += d;
            lm_n += 1;
        }
    }
    Ok(UtilityDistances {
        detection_rate,
        bbox_distance: if bbox_n > 0 { bbox_acc / bbox_n as f64 } else { 0.0 },
        landmark_distance: if lm_n > 0 { lm_acc / lm_n as f64 } else { 0.0 },
    })
}

// ---- report ----

/// Structured evaluation report (dbaf-report-v1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub image_count: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(image_count: usize) -> Self {
        Self { format: REPORT_FORMAT.to_string(), image_count, metrics: BTreeMap::new() }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: EvalReport = serde_json::from_str(text)?;
        if report.format != REPORT_FORMAT {
            return Err(DbafError::validation(format!(
                "unsupported report format {:?}",
                report.format
            )));
        }
        Ok(report)
    }
}
