//! Desk-scale evaluation metrics.
//!
//! | metric              | stands in for | computed from                                   |
//! |---------------------|---------------|-------------------------------------------------|
//! | `pose_pck`          | pose AP       | extracted joints within a pixel radius          |
//! | `frechet_proxy`     | FID           | Gaussians over frozen patch features            |
//! | `label_consistency` | CLIP score    | own prompt is the best-matching retrieval       |

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::classifier::PromptComponents;
use crate::codebook::FeatureExtractor;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::synthdata::{extract_keypoints, Keypoint, PoseClass};

use super::io::fixed;
use super::kb::KnowledgeBase;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub pose_pck: f64,
    pub frechet_proxy: f64,
    pub label_consistency: f64,
}

impl MetricReport {
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Input("no reports to average".into()));
        }
        let n = reports.len() as f64;
        Ok(MetricReport {
            pose_pck: reports.iter().map(|r| r.pose_pck).sum::<f64>() / n,
            frechet_proxy: reports.iter().map(|r| r.frechet_proxy).sum::<f64>() / n,
            label_consistency: reports.iter().map(|r| r.label_consistency).sum::<f64>() / n,
        })
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{}",
            fixed(self.pose_pck),
            fixed(self.frechet_proxy),
            fixed(self.label_consistency)
        )
    }
}

/// Fraction of joints extracted within `threshold_px` of the conditioning keypoints.
/// Joints the extractor cannot find count as misses.
pub fn eval_pose_pck(
    generated: &[Tensor],
    keypoints: &[Vec<Keypoint>],
    classes: &[PoseClass],
    threshold_px: f64,
) -> Result<f64> {
    if generated.len() != keypoints.len() || generated.len() != classes.len() {
        return Err(Error::Input(format!(
            "pck needs matching counts, got {} images, {} keypoint sets, {} classes",
            generated.len(),
            keypoints.len(),
            classes.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for ((img, truth), &class) in generated.iter().zip(keypoints).zip(classes) {
        let found = extract_keypoints(img, class);
        for (f, t) in found.iter().zip(truth) {
            total += 1;
            if f.is_some_and(|k| k.dist(t) <= threshold_px) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::Input("pck over an empty image set".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Mean and unbiased covariance of the patch features pooled over `images`.
pub fn feature_statistics(images: &[Tensor], fx: &FeatureExtractor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if images.len() < 2 {
        return Err(Error::Input(format!(
            "feature statistics need at least 2 images, got {}",
            images.len()
        )));
    }
    let dim = fx.dim();
    let mut rows = Vec::new();
    for img in images {
        let g = fx.extract(img)?;
        rows.extend((0..g.tokens()).map(|i| g.features.row(i).to_vec()));
    }
    let n = rows.len() as f64;
    let mut mu = DVector::zeros(dim);
    for r in &rows {
        for (m, v) in mu.iter_mut().zip(r) {
            *m += v;
        }
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for r in &rows {
        let c = DVector::from_iterator(dim, r.iter().zip(mu.iter()).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mu, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `tr((Σ₁Σ₂)^{1/2})` through the similar symmetric matrix `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> f64 {
    let r = sqrt_psd(s1);
    let m = &r * s2 * &r;
    let sym = (&m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum()
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, clamped at zero.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let mean_term = mu1.iter().zip(mu2.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    // Both orderings are averaged so the result does not depend on argument order.
    let cross = trace_sqrt_product(s1, s2) + trace_sqrt_product(s2, s1);
    (mean_term + (s1.trace() + s2.trace()) - cross).max(0.0)
}

pub fn eval_frechet_proxy(generated: &[Tensor], reference: &[Tensor], fx: &FeatureExtractor) -> Result<f64> {
    let (mu1, s1) = feature_statistics(generated, fx)?;
    let (mu2, s2) = feature_statistics(reference, fx)?;
    let d = frechet_distance(&mu1, &s1, &mu2, &s2);
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet proxy is not finite".into()));
    }
    Ok(d)
}

/// Agreement between two index vectors over the positions where at least one
/// of them is not the background index. Two blank grids agree fully.
pub fn foreground_agreement(a: &[usize], b: &[usize], background: usize) -> f64 {
    let mut considered = 0usize;
    let mut agree = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x == background && y == background {
            continue;
        }
        considered += 1;
        if x == y {
            agree += 1;
        }
    }
    if considered == 0 {
        1.0
    } else {
        agree as f64 / considered as f64
    }
}

/// Fraction of images whose own prompt is the strictly best match among
/// `candidates`, scoring each candidate by [`foreground_agreement`] between its
/// retrieved indices and the image's quantized indices.
pub fn eval_label_consistency(
    generated: &[Tensor],
    prompts: &[PromptComponents],
    candidates: &[PromptComponents],
    kb: &KnowledgeBase,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::Input("label consistency needs at least one prompt".into()));
    }
    if generated.len() != prompts.len() {
        return Err(Error::Input(format!(
            "{} images but {} prompts",
            generated.len(),
            prompts.len()
        )));
    }
    let bg = kb.background_index()?;
    let mut vocabulary: Vec<&PromptComponents> = candidates.iter().collect();
    for p in prompts {
        if !vocabulary.contains(&p) {
            vocabulary.push(p);
        }
    }
    let retrieved = vocabulary
        .iter()
        .map(|p| kb.prompt_indices(p))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0usize;
    for (img, prompt) in generated.iter().zip(prompts) {
        let got = kb.image_indices(img)?;
        let own = vocabulary.iter().position(|p| *p == prompt).expect("prompt added above");
        let scores: Vec<f64> = retrieved.iter().map(|r| foreground_agreement(&r.0, &got.0, bg)).collect();
        let best_other = scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != own)
            .map(|(_, &s)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        if scores[own] > best_other {
            hits += 1;
        }
    }
    Ok(hits as f64 / prompts.len() as f64)
}
