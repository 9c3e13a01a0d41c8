//! Fréchet distance between feature populations, the two-pairing evaluation
//! protocol, and plain-text/JSON report emitters.

use candle_core::DType;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::generator::StyleWeightVector;
use crate::image_pipeline::{ImageDataset, ImageTensor};
use crate::model::{StyleModel, StylizeParams};
use crate::nn;
use crate::surrogate::PerceptualFeatureNet;

/// Relative threshold below which negative eigenvalues count as rounding.
pub const EIGEN_CLAMP_TOLERANCE: f64 = 1e-10;

pub const PROTOCOL_TAG: &str = "surrogate-feature FID (seeded frozen conv features, not Inception; not comparable to published values)";

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Mean and (unbiased) covariance of a feature population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStatistics {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub covariance: Vec<f64>,
    pub sample_count: usize,
}

impl FeatureStatistics {
    pub fn new(mean: Vec<f64>, covariance: Vec<f64>, sample_count: usize) -> Result<Self> {
        let d = mean.len();
        if d == 0 || covariance.len() != d * d {
            return validation(format!("covariance of length {} does not match dimension {d}", covariance.len()));
        }
        if sample_count < 2 {
            return Err(Error::InsufficientSamples {
                needed: 2,
                got: sample_count,
            });
        }
        if mean.iter().chain(&covariance).any(|v| !v.is_finite()) {
            return validation("feature statistics contain non-finite values");
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[i * d + j] - covariance[j * d + i]).abs() > 1e-8 {
                    return validation(format!("covariance is not symmetric at ({i}, {j})"));
                }
            }
        }
        Ok(Self {
            mean,
            covariance,
            sample_count,
        })
    }

    /// Statistics of feature rows; at least two rows of equal length.
    pub fn from_features(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: n });
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return validation("feature rows differ in length");
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| {
                let mut acc = Compensated::default();
                rows.iter().for_each(|r| acc.add(r[j]));
                acc.value() / n as f64
            })
            .collect();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let mut acc = Compensated::default();
                rows.iter().for_each(|r| acc.add((r[i] - mean[i]) * (r[j] - mean[j])));
                let v = acc.value() / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Pooled deepest-scale features of each image, computed one image at a
/// time so results do not depend on batching.
pub fn image_features(net: &PerceptualFeatureNet, images: &[ImageTensor]) -> Result<Vec<Vec<f64>>> {
    images
        .iter()
        .map(|img| nn::to_f64_vec(&net.pooled(&img.to_tensor(DType::F64)?)?))
        .collect()
}

pub fn extract_statistics(net: &PerceptualFeatureNet, images: &ImageDataset) -> Result<FeatureStatistics> {
    statistics_of_images(net, images.items())
}

pub fn statistics_of_images(net: &PerceptualFeatureNet, images: &[ImageTensor]) -> Result<FeatureStatistics> {
    if images.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: images.len(),
        });
    }
    FeatureStatistics::from_features(&image_features(net, images)?)
}

fn psd_sqrt(m: &DMatrix<f64>, label: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let values = clamp_eigenvalues(&eig.eigenvalues, label, &[m])?;
    let d = DMatrix::from_diagonal(&values.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn clamp_eigenvalues(values: &DVector<f64>, label: &str, matrices: &[&DMatrix<f64>]) -> Result<DVector<f64>> {
    let scale = values.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
    let floor = -EIGEN_CLAMP_TOLERANCE * scale;
    if let Some(bad) = values.iter().find(|v| **v < floor || !v.is_finite()) {
        return Err(Error::Numerical {
            message: format!("{label} has eigenvalue {bad:e}; matrix is not positive semi-definite"),
            matrices: matrices.iter().map(|m| m.transpose().as_slice().to_vec()).collect(),
        });
    }
    Ok(values.map(|v| v.max(0.0)))
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// Each covariance root comes from its eigendecomposition. The trace of the
/// product root equals the nuclear norm of `S_a^(1/2) S_b^(1/2)`, whose
/// singular values are computed directly rather than as square roots of
/// eigenvalues of `S_a^(1/2) S_b S_a^(1/2)`; that keeps near-singular
/// covariances from amplifying rounding to sqrt(eps) and makes swapping the
/// arguments exact up to rounding.
pub fn fid(a: &FeatureStatistics, b: &FeatureStatistics) -> Result<f64> {
    if a.dim() != b.dim() {
        return validation(format!("feature dimensions differ: {} vs {}", a.dim(), b.dim()));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = psd_sqrt(&sa, "first covariance")?;
    let root_b = psd_sqrt(&sb, "second covariance")?;
    let singular = (&root_a * &root_b).singular_values();
    if singular.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            message: "covariance product has non-finite singular values".into(),
            matrices: vec![a.covariance.clone(), b.covariance.clone()],
        });
    }
    let trace_root: f64 = singular.iter().sum();
    Ok(mean_term + sa.trace() + sb.trace() - 2.0 * trace_root)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method_name: String,
    pub metric_name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub protocol: String,
    pub seed: u64,
    pub feature_net_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn new(rows: Vec<ReportRow>, metadata: ReportMetadata) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
            return validation(format!("{} / {} is not finite", r.method_name, r.metric_name));
        }
        Ok(Self { rows, metadata })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn value(&self, method: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method_name == method && r.metric_name == metric)
            .map(|r| r.value)
    }
}

pub const STYLE_VS_STYLIZED: &str = "FID(style refs, stylized)";
pub const TESTSET_VS_STYLIZED: &str = "FID(test set, stylized)";

/// FID rows for both pairings, given already stylized images.
pub fn fid_rows(
    net: &PerceptualFeatureNet,
    method: &str,
    style_refs: &[ImageTensor],
    test_set: &[ImageTensor],
    stylized: &[ImageTensor],
) -> Result<Vec<ReportRow>> {
    if style_refs.is_empty() || test_set.is_empty() || stylized.is_empty() {
        return validation("evaluation sets must not be empty");
    }
    let out = statistics_of_images(net, stylized)?;
    let row = |metric: &str, v: f64| ReportRow {
        method_name: method.to_string(),
        metric_name: metric.to_string(),
        value: v,
    };
    Ok(vec![
        row(STYLE_VS_STYLIZED, fid(&statistics_of_images(net, style_refs)?, &out)?),
        row(TESTSET_VS_STYLIZED, fid(&statistics_of_images(net, test_set)?, &out)?),
    ])
}

/// Stylizes every test image one-shot against the first style reference, then
/// reports FID of the result against the style references and against the
/// unstylized test set.
pub fn run_fid_protocol(
    model: &StyleModel,
    method: &str,
    style_refs: &ImageDataset,
    test_set: &ImageDataset,
) -> Result<EvalReport> {
    if style_refs.is_empty() || test_set.is_empty() {
        return validation("evaluation sets must not be empty");
    }
    let reference = &style_refs.items()[0];
    let params = StylizeParams::new(StyleWeightVector::ones(model.n_layers()));
    let stylized = test_set
        .items()
        .iter()
        .map(|img| model.stylize(img, Some(reference), &params))
        .collect::<Result<Vec<_>>>()?;
    let seed = model.config.frozen.perceptual;
    let net = PerceptualFeatureNet::new(seed, DType::F64)?;
    EvalReport::new(
        fid_rows(&net, method, style_refs.items(), test_set.items(), &stylized)?,
        ReportMetadata {
            protocol: PROTOCOL_TAG.to_string(),
            seed: model.config.seed,
            feature_net_seed: seed,
        },
    )
}

/// One rater-score row: facial preservation, image quality, style quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScores {
    pub method: String,
    pub fp: f64,
    pub iq: f64,
    pub sq: f64,
}

/// Adds the mean of the three scores and orders methods by it, best first.
pub fn preference_report(scores: &[PreferenceScores]) -> Result<EvalReport> {
    let mut with_avg = Vec::with_capacity(scores.len());
    for s in scores {
        for (name, v) in [("FP", s.fp), ("IQ", s.iq), ("SQ", s.sq)] {
            if !(0.0..=1.0).contains(&v) {
                return validation(format!("{} {name} score {v} outside [0, 1]", s.method));
            }
        }
        with_avg.push((s, (s.fp + s.iq + s.sq) / 3.0));
    }
    with_avg.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut rows = Vec::with_capacity(4 * scores.len());
    for (s, avg) in with_avg {
        for (metric, value) in [("FP", s.fp), ("IQ", s.iq), ("SQ", s.sq), ("Avg", avg)] {
            rows.push(ReportRow {
                method_name: s.method.clone(),
                metric_name: metric.to_string(),
                value,
            });
        }
    }
    EvalReport::new(
        rows,
        ReportMetadata {
            protocol: "rater preference scores".to_string(),
            seed: 0,
            feature_net_seed: 0,
        },
    )
}

fn methods_in_order(report: &EvalReport) -> Vec<&str> {
    let mut out: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !out.contains(&r.method_name.as_str()) {
            out.push(&r.method_name);
        }
    }
    out
}

/// Aligned table with one row per method and one column per metric, in first
/// appearance order. Values print with `decimals` places.
pub fn render_table(report: &EvalReport, decimals: usize) -> String {
    let methods = methods_in_order(report);
    let mut metrics: Vec<&str> = Vec::new();
    for r in &report.rows {
        if !metrics.contains(&r.metric_name.as_str()) {
            metrics.push(&r.metric_name);
        }
    }
    let cell = |m: &str, k: &str| {
        report
            .value(m, k)
            .map(|v| format!("{v:.decimals$}"))
            .unwrap_or_else(|| "-".to_string())
    };
    let name_w = methods.iter().map(|m| m.len()).chain(["Method".len()]).max().unwrap_or(6);
    let widths: Vec<usize> = metrics
        .iter()
        .map(|k| methods.iter().map(|m| cell(m, k).len()).chain([k.len()]).max().unwrap_or(1))
        .collect();
    let mut out = String::new();
    let mut line = format!("{:<name_w$}", "Method");
    for (k, w) in metrics.iter().zip(&widths) {
        line += &format!("  {k:>w$}");
    }
    out += line.trim_end();
    out.push('\n');
    let mut rule = "-".repeat(name_w);
    for w in &widths {
        rule += &format!("  {}", "-".repeat(*w));
    }
    out += &rule;
    out.push('\n');
    for m in &methods {
        let mut line = format!("{m:<name_w$}");
        for (k, w) in metrics.iter().zip(&widths) {
            line += &format!("  {:>w$}", cell(m, k));
        }
        out += line.trim_end();
        out.push('\n');
    }
    out
}

/// Two-column method/FID comparison table.
pub fn render_fid_comparison(rows: &[(String, f64)]) -> Result<String> {
    let report = EvalReport::new(
        rows.iter()
            .map(|(m, v)| ReportRow {
                method_name: m.clone(),
                metric_name: "FID".to_string(),
                value: *v,
            })
            .collect(),
        ReportMetadata {
            protocol: String::new(),
            seed: 0,
            feature_net_seed: 0,
        },
    )?;
    Ok(render_table(&report, 1))
}
