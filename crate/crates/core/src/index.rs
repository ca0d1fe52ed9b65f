//! Relative development coefficients and the region × feature matrix.
//!
//! Each sub-indicator is first taken relative to the national value for the
//! same business and month, then the three relative values are combined with
//! fixed weights into one business coefficient. The feature matrix has one
//! row per region (sorted by id) and one column per (business, month), laid
//! out business-major, month-minor.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{
    national_slice, validate_panel_where, AdminLevel, Business, Indicator, NationalBaseline,
    PanelDataset, PanelMode, RegionRecord, YearMonth,
};

/// Weights of penetration, amount per capita and count per capita.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            m1: 0.50,
            m2: 0.25,
            m3: 0.25,
        }
    }
}

impl Weights {
    pub fn new(m1: f64, m2: f64, m3: f64) -> Result<Self> {
        let w = Self { m1, m2, m3 };
        w.check()?;
        Ok(w)
    }

    pub fn check(&self) -> Result<()> {
        let all = [self.m1, self.m2, self.m3];
        if all.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::InvalidWeights(format!("{all:?} outside [0, 1]")));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidWeights(format!("{all:?} sum to {sum}, not 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.m1, self.m2, self.m3]
    }
}

/// Regional value relative to the national value.
pub fn relative_indicator(x_region: f64, x_national: f64) -> Result<f64> {
    if !(x_national > 0.0) {
        return Err(Error::NonPositiveBaseline(x_national));
    }
    Ok(x_region / x_national)
}

/// Weighted sum of the three relative sub-indicators.
pub fn business_coefficient(a: [f64; 3], w: &Weights) -> f64 {
    a.iter().zip(w.as_array()).map(|(a, m)| m * a).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Provinces,
    Cities,
    All,
}

impl Scope {
    pub fn contains(&self, r: &RegionRecord) -> bool {
        match self {
            Scope::Provinces => r.admin_level == AdminLevel::Province,
            Scope::Cities => r.admin_level == AdminLevel::City,
            Scope::All => r.admin_level != AdminLevel::National,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureLabel {
    pub business: Business,
    pub month: YearMonth,
}

impl std::fmt::Display for FeatureLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.business, self.month)
    }
}

impl std::str::FromStr for FeatureLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (b, m) = s
            .split_once('@')
            .ok_or_else(|| format!("feature label {s:?} is not business@YYYY-MM"))?;
        Ok(Self {
            business: b.parse()?,
            month: m.parse()?,
        })
    }
}

/// Column statistics kept by [`FeatureMatrix::standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub column_means: Vec<f64>,
    pub column_stds: Vec<f64>,
}

/// Dense row-major region × feature matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    region_ids: Vec<String>,
    feature_labels: Vec<FeatureLabel>,
    values: Vec<f64>,
    standardization: Option<Standardization>,
}

impl FeatureMatrix {
    /// Build from row-major values; all entries must be finite.
    pub fn new(
        region_ids: Vec<String>,
        feature_labels: Vec<FeatureLabel>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let expected = region_ids.len() * feature_labels.len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self {
            region_ids,
            feature_labels,
            values,
            standardization: None,
        })
    }

    /// Matrix with generic labels, for callers that only have numbers.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidDataset("ragged rows".into()));
        }
        let start = YearMonth::new(2000, 1).expect("valid month");
        let labels = (0..d)
            .map(|j| FeatureLabel {
                business: Business::ALL[j % 4],
                month: start.offset(j / 4),
            })
            .collect();
        let ids = (0..rows.len()).map(|i| format!("r{i:04}")).collect();
        Self::new(ids, labels, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.region_ids.len()
    }

    pub fn d(&self) -> usize {
        self.feature_labels.len()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn feature_labels(&self) -> &[FeatureLabel] {
        &self.feature_labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on 0
        self.values.chunks_exact(self.d().max(1)).take(self.n())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d() + j]
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.is_some()
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// Entry on the original (pre-standardization) scale.
    pub fn raw_value(&self, i: usize, j: usize) -> f64 {
        let v = self.get(i, j);
        match &self.standardization {
            Some(s) => v * s.column_stds[j] + s.column_means[j],
            None => v,
        }
    }

    /// Mean raw coefficient of a row over all features.
    pub fn raw_row_mean(&self, i: usize) -> f64 {
        if self.d() == 0 {
            return 0.0;
        }
        (0..self.d()).map(|j| self.raw_value(i, j)).sum::<f64>() / self.d() as f64
    }

    /// Per-column z-score with population standard deviation. Constant
    /// columns become zeros and record a standard deviation of 1.
    pub fn standardize(&self) -> Result<FeatureMatrix> {
        if self.is_standardized() {
            return Err(Error::AlreadyStandardized);
        }
        let (n, d) = (self.n(), self.d());
        let mut means = vec![0.0; d];
        let mut stds = vec![1.0; d];
        let mut values = self.values.clone();
        if n > 0 {
            for j in 0..d {
                let mean = (0..n).map(|i| self.get(i, j)).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|i| (self.get(i, j) - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                let std = var.sqrt();
                means[j] = mean;
                if std > 1e-12 * mean.abs().max(1.0) {
                    stds[j] = std;
                    for i in 0..n {
                        values[i * d + j] = (self.get(i, j) - mean) / std;
                    }
                } else {
                    for i in 0..n {
                        values[i * d + j] = 0.0;
                    }
                }
            }
        }
        Ok(FeatureMatrix {
            region_ids: self.region_ids.clone(),
            feature_labels: self.feature_labels.clone(),
            values,
            standardization: Some(Standardization {
                column_means: means,
                column_stds: stds,
            }),
        })
    }

    /// CSV with header `region_id,<business@YYYY-MM>...`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["region_id".to_string()];
        header.extend(self.feature_labels.iter().map(ToString::to_string));
        w.write_record(&header)?;
        for (id, row) in self.region_ids.iter().zip(self.rows()) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(ToString::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a matrix written by [`FeatureMatrix::write_csv`]. The result is
    /// always unstandardized.
    pub fn read_csv<R: Read>(source: R) -> Result<FeatureMatrix> {
        let mut r = csv::Reader::from_reader(source);
        let header = r.headers()?.clone();
        if header.get(0) != Some("region_id") {
            return Err(Error::Parse {
                line: 1,
                message: "first column must be region_id".into(),
            });
        }
        let labels = header
            .iter()
            .skip(1)
            .map(|h| h.parse::<FeatureLabel>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|message| Error::Parse { line: 1, message })?;
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            ids.push(rec[0].to_string());
            for field in rec.iter().skip(1) {
                values.push(field.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric value {field:?}"),
                })?);
            }
        }
        FeatureMatrix::new(ids, labels, values)
    }
}

/// Build the unstandardized feature matrix for the regions in `scope`.
pub fn build_feature_matrix(
    ds: &PanelDataset,
    scope: Scope,
    weights: &Weights,
    baseline: NationalBaseline,
) -> Result<FeatureMatrix> {
    weights.check()?;
    let report = validate_panel_where(ds, |r| scope.contains(r));
    if !report.is_complete {
        return Err(Error::IncompletePanel {
            missing: report.missing_cells.len(),
            duplicates: report.duplicate_cells.len(),
            first_missing: report.missing_cells.first().map(ToString::to_string),
        });
    }

    let mut regions: Vec<&RegionRecord> = ds.regions().iter().filter(|r| scope.contains(r)).collect();
    regions.sort_by(|a, b| a.region_id.cmp(&b.region_id));

    let t = ds.month_count();
    let labels: Vec<FeatureLabel> = Business::ALL
        .iter()
        .flat_map(|&business| {
            ds.months()
                .iter()
                .map(move |&month| FeatureLabel { business, month })
        })
        .collect();

    // national baselines, indexed [business][indicator][month]
    let national = match ds.mode() {
        PanelMode::RawIndicators => {
            let mut nat = vec![[0.0; 3]; 4 * t];
            for (bi, &b) in Business::ALL.iter().enumerate() {
                for (ii, &ind) in Indicator::ALL.iter().enumerate() {
                    for m in 0..t {
                        nat[bi * t + m][ii] = national_slice(ds, b, ind, m, baseline)?;
                    }
                }
            }
            Some(nat)
        }
        PanelMode::PrecomputedCoefficients => None,
    };

    let mut values = Vec::with_capacity(regions.len() * labels.len());
    for region in &regions {
        for (bi, &b) in Business::ALL.iter().enumerate() {
            for m in 0..t {
                let cell = match &national {
                    None => ds
                        .value(&region.region_id, b, None, m)
                        .expect("validated cell"),
                    Some(nat) => {
                        let mut a = [0.0; 3];
                        for (ii, &ind) in Indicator::ALL.iter().enumerate() {
                            let x = ds
                                .value(&region.region_id, b, Some(ind), m)
                                .expect("validated cell");
                            a[ii] = relative_indicator(x, nat[bi * t + m][ii])?;
                        }
                        business_coefficient(a, weights)
                    }
                };
                values.push(cell);
            }
        }
    }

    FeatureMatrix::new(
        regions.iter().map(|r| r.region_id.clone()).collect(),
        labels,
        values,
    )
}
