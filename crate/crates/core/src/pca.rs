//! Two-component PCA, the linear baseline.
//!
//! Axis 1 is read as the development volume of a region and axis 2 as the
//! imbalance across its businesses. These labels are documentation only;
//! PCA axes depend on the data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::FeatureMatrix;
use crate::linalg::symmetric_eigen;
use crate::Embedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// Two orthonormal rows of length d.
    pub components: Vec<Vec<f64>>,
    /// Top two covariance eigenvalues, descending, clamped at zero.
    pub eigenvalues: [f64; 2],
    pub explained_variance_ratio: [f64; 2],
    pub column_means: Vec<f64>,
    /// Trace of the covariance matrix.
    pub total_variance: f64,
}

/// Fit PCA with a 1/(n-1) covariance. Each component is signed so that its
/// largest-magnitude entry is positive.
pub fn pca_fit(fm: &FeatureMatrix) -> Result<PcaModel> {
    let (n, d) = (fm.n(), fm.d());
    if n < 2 {
        return Err(Error::TooFewPoints {
            required: 2,
            actual: n,
        });
    }
    if d < 2 {
        return Err(Error::InvalidConfig(format!(
            "PCA needs at least 2 features, got {d}"
        )));
    }
    if fm.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("feature matrix"));
    }

    let means: Vec<f64> = (0..d)
        .map(|j| fm.rows().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in fm.rows() {
        let c: Vec<f64> = row.iter().zip(&means).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += c[i] * c[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let eig = symmetric_eigen(&cov, d)?;
    let mut components = Vec::with_capacity(2);
    let mut eigenvalues = [0.0; 2];
    for k in 0..2 {
        let mut v = eig.vectors[k].clone();
        let lead = v
            .iter()
            .enumerate()
            .fold(0usize, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        eigenvalues[k] = eig.values[k].max(0.0);
    }
    let explained_variance_ratio = if total_variance > 0.0 {
        eigenvalues.map(|l| (l / total_variance).min(1.0))
    } else {
        [0.0; 2]
    };

    Ok(PcaModel {
        components,
        eigenvalues,
        explained_variance_ratio,
        column_means: means,
        total_variance,
    })
}

/// Project rows onto the two components.
pub fn pca_project(model: &PcaModel, fm: &FeatureMatrix) -> Result<Embedding> {
    if fm.d() != model.column_means.len() {
        return Err(Error::DimensionMismatch {
            expected: model.column_means.len(),
            actual: fm.d(),
        });
    }
    let coords = fm
        .rows()
        .map(|row| {
            let mut p = [0.0; 2];
            for (k, comp) in model.components.iter().enumerate() {
                p[k] = row
                    .iter()
                    .zip(&model.column_means)
                    .zip(comp)
                    .map(|((x, m), c)| (x - m) * c)
                    .sum();
            }
            p
        })
        .collect();
    Ok(Embedding {
        region_ids: fm.region_ids().to_vec(),
        coords,
    })
}

/// Regions by descending axis-1 score, ties broken by region id.
pub fn rank_regions(scores: &Embedding) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = scores
        .region_ids
        .iter()
        .cloned()
        .zip(scores.coords.iter().map(|c| c[0]))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}
