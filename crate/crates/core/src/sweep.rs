//! Perplexity × iteration-budget sweep with a coarse label for the shape of
//! each resulting map.
//!
//! The shape label is a proxy built from two numbers: the silhouette of a
//! k-means partition of the map, and the coefficient of variation of the
//! nearest-neighbour distances. High silhouette means "clustered"; otherwise
//! a very uneven nearest-neighbour spacing means "discrete" (isolated
//! scatter) and anything else is "uniform". The thresholds are tunable
//! constants of this crate, not measured quantities.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{kmeans_with, silhouette, KmeansConfig};
use crate::error::{Error, Result};
use crate::index::FeatureMatrix;
use crate::tsne::{run_tsne, TsneConfig};
use crate::Point2;

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "RISKMAP_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionForm {
    Uniform,
    Clustered,
    Discrete,
}

impl DistributionForm {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistributionForm::Uniform => "uniform",
            DistributionForm::Clustered => "clustered",
            DistributionForm::Discrete => "discrete",
        }
    }
}

impl std::fmt::Display for DistributionForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormThresholds {
    /// Silhouette at or above this is "clustered".
    pub clustered_silhouette: f64,
    /// Below the silhouette threshold, a nearest-neighbour CV at or above
    /// this is "discrete".
    pub discrete_nn_cv: f64,
}

impl Default for FormThresholds {
    fn default() -> Self {
        Self {
            clustered_silhouette: 0.4,
            discrete_nn_cv: 1.0,
        }
    }
}

pub fn classify_form(silhouette: f64, nn_cv: f64, t: &FormThresholds) -> DistributionForm {
    if silhouette >= t.clustered_silhouette {
        DistributionForm::Clustered
    } else if nn_cv >= t.discrete_nn_cv {
        DistributionForm::Discrete
    } else {
        DistributionForm::Uniform
    }
}

/// Coefficient of variation (population std / mean) of nearest-neighbour
/// distances; 0 when every point coincides with another.
pub fn nn_dist_cv(points: &[Point2]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let nn: Vec<f64> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let dx = points[i][0] - points[j][0];
                    let dy = points[i][1] - points[j][1];
                    (dx * dx + dy * dy).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mean = nn.iter().sum::<f64>() / n as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = nn.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
    var.sqrt() / mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionMetrics {
    pub silhouette: f64,
    pub nn_dist_cv: f64,
    pub form: DistributionForm,
}

/// Cluster `points` into `k` groups and label the map's shape.
pub fn classify_distribution(
    points: &[Point2],
    k: usize,
    thresholds: &FormThresholds,
    seed: u64,
) -> Result<DistributionMetrics> {
    if k < 2 || points.len() < 2 * k {
        return Err(Error::InvalidConfig(format!(
            "classification needs k >= 2 and n >= 2k (k {k}, n {})",
            points.len()
        )));
    }
    let clustering = kmeans_with(points, &KmeansConfig::new(k, seed))?;
    let sil = silhouette(points, &clustering.labels)?;
    let cv = nn_dist_cv(points);
    Ok(DistributionMetrics {
        silhouette: sil,
        nn_dist_cv: cv,
        form: classify_form(sil, cv, thresholds),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub perplexities: Vec<f64>,
    pub iter_budgets: Vec<usize>,
    pub k: usize,
    /// Number of seeds per cell; run `s` uses `base_seed + s`.
    pub seeds: usize,
    pub base_seed: u64,
    /// Template for every run; perplexity, budget and seed are overridden.
    pub tsne: TsneConfig,
    pub thresholds: FormThresholds,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            perplexities: vec![20.0, 10.0, 5.0],
            iter_budgets: vec![200, 500],
            k: 4,
            seeds: 5,
            base_seed: 0,
            tsne: TsneConfig::default(),
            thresholds: FormThresholds::default(),
        }
    }
}

/// One t-SNE + k-means run inside the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub perplexity: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub final_kl: f64,
    pub silhouette: f64,
    pub nn_dist_cv: f64,
    pub form: DistributionForm,
}

/// Seed-aggregated grid cell: medians of the per-seed metrics, with the
/// form recomputed from the medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub perplexity: f64,
    pub max_iters: usize,
    pub final_kl: f64,
    pub silhouette: f64,
    pub nn_dist_cv: f64,
    pub form: DistributionForm,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub runs: Vec<SweepRun>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Thread count from [`THREADS_ENV`], defaulting to all cores.
pub fn threads_from_env() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_cell(fm: &FeatureMatrix, cfg: &SweepConfig, perplexity: f64, iters: usize, seed: u64) -> Result<SweepRun> {
    let tsne_cfg = TsneConfig {
        perplexity,
        seed,
        ..cfg.tsne
    }
    .with_budget(iters);
    let run = run_tsne(fm, &tsne_cfg)?;
    let m = classify_distribution(&run.embedding.coords, cfg.k, &cfg.thresholds, seed.wrapping_add(1))?;
    Ok(SweepRun {
        perplexity,
        max_iters: iters,
        seed,
        final_kl: run.final_kl(),
        silhouette: m.silhouette,
        nn_dist_cv: m.nn_dist_cv,
        form: m.form,
    })
}

/// Run every (perplexity, budget, seed) combination. Output order follows
/// the grid, perplexity-major, regardless of completion order.
pub fn run_sweep(fm: &FeatureMatrix, cfg: &SweepConfig) -> Result<SweepResult> {
    let n = fm.n();
    if let Some(&p) = cfg.perplexities.iter().find(|&&p| p >= n as f64) {
        return Err(Error::PerplexityTooLarge { perplexity: p, n });
    }
    if cfg.seeds == 0 || cfg.perplexities.is_empty() || cfg.iter_budgets.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    if cfg.k < 2 || n < 2 * cfg.k {
        return Err(Error::InvalidConfig(format!(
            "sweep needs k >= 2 and n >= 2k (k {}, n {n})",
            cfg.k
        )));
    }

    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|s| cfg.base_seed.wrapping_add(s)).collect();
    let jobs: Vec<(f64, usize, u64)> = cfg
        .perplexities
        .iter()
        .flat_map(|&p| {
            cfg.iter_budgets
                .iter()
                .flat_map(|&it| seeds.iter().map(move |&s| (p, it, s)))
                .collect::<Vec<_>>()
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads_from_env())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| {
        jobs.par_iter()
            .map(|&(p, it, s)| run_cell(fm, cfg, p, it, s))
            .collect::<Result<_>>()
    })?;

    let cells = runs
        .chunks(seeds.len())
        .map(|group| {
            let pick = |f: fn(&SweepRun) -> f64| median(&group.iter().map(f).collect::<Vec<_>>());
            let sil = pick(|r| r.silhouette);
            let cv = pick(|r| r.nn_dist_cv);
            SweepCell {
                perplexity: group[0].perplexity,
                max_iters: group[0].max_iters,
                final_kl: pick(|r| r.final_kl),
                silhouette: sil,
                nn_dist_cv: cv,
                form: classify_form(sil, cv, &cfg.thresholds),
                seeds: group.iter().map(|r| r.seed).collect(),
            }
        })
        .collect();
    Ok(SweepResult { cells, runs })
}

/// `perplexity,iters,final_kl,silhouette,nn_cv,form`
pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["perplexity", "iters", "final_kl", "silhouette", "nn_cv", "form"])?;
    for c in cells {
        w.write_record([
            c.perplexity.to_string(),
            c.max_iters.to_string(),
            c.final_kl.to_string(),
            c.silhouette.to_string(),
            c.nn_dist_cv.to_string(),
            c.form.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text table, one column per cell.
pub fn render_table(cells: &[SweepCell]) -> String {
    let mut rows: Vec<(&str, Vec<String>)> = vec![
        ("perplexity", cells.iter().map(|c| format!("P={:.1}", c.perplexity)).collect()),
        ("iterations", cells.iter().map(|c| format!("L={}", c.max_iters)).collect()),
        ("form", cells.iter().map(|c| c.form.to_string()).collect()),
        ("silhouette", cells.iter().map(|c| format!("{:.3}", c.silhouette)).collect()),
        ("nn cv", cells.iter().map(|c| format!("{:.3}", c.nn_dist_cv)).collect()),
        ("final KL", cells.iter().map(|c| format!("{:.4}", c.final_kl)).collect()),
    ];
    let head = rows.iter().map(|(h, _)| h.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cells.len())
        .map(|j| rows.iter().map(|(_, r)| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (h, r) in rows.iter_mut() {
        let _ = write!(out, "{h:<head$}");
        for (v, w) in r.iter().zip(&widths) {
            let _ = write!(out, "  {v:>w$}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn tight_blobs_are_clustered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let pts: Vec<Point2> = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]]
            .iter()
            .flat_map(|c| (0..10).map(|_| [c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]).collect::<Vec<_>>())
            .collect();
        let m = classify_distribution(&pts, 4, &FormThresholds::default(), 0).unwrap();
        assert!(m.silhouette >= 0.9);
        assert_eq!(m.form, DistributionForm::Clustered);
    }

    #[test]
    fn regular_grid_is_uniform() {
        let pts: Vec<Point2> = (0..64).map(|i| [(i % 8) as f64, (i / 8) as f64]).collect();
        let m = classify_distribution(&pts, 4, &FormThresholds::default(), 0).unwrap();
        assert_eq!(m.nn_dist_cv, 0.0);
        assert!(m.silhouette < 0.4);
        assert_eq!(m.form, DistributionForm::Uniform);
    }

    #[test]
    fn identical_points_with_outliers_are_discrete() {
        let mut pts = vec![[0.0, 0.0]; 8];
        pts.push([100.0, 0.0]);
        pts.push([-80.0, 60.0]);
        let m = classify_distribution(&pts, 4, &FormThresholds::default(), 0).unwrap();
        assert!(m.nn_dist_cv >= 1.0, "{m:?}");
        assert_eq!(m.form, DistributionForm::Discrete);
    }

    #[test]
    fn classify_is_pure_in_metrics() {
        let t = FormThresholds::default();
        assert_eq!(classify_form(0.4, 3.0, &t), DistributionForm::Clustered);
        assert_eq!(classify_form(0.2, 1.0, &t), DistributionForm::Discrete);
        assert_eq!(classify_form(0.2, 0.3, &t), DistributionForm::Uniform);
    }

    #[test]
    fn classification_preconditions() {
        let pts = vec![[0.0, 0.0]; 7];
        assert!(classify_distribution(&pts, 4, &FormThresholds::default(), 0).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn nn_cv_of_pairs() {
        // nearest distances 1,1,3,3 -> mean 2, std 1
        let pts = [[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [13.0, 0.0]];
        assert!((nn_dist_cv(&pts) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn table_layout() {
        let cell = |p: f64, it: usize| SweepCell {
            perplexity: p,
            max_iters: it,
            final_kl: 0.5,
            silhouette: 0.75,
            nn_dist_cv: 0.4,
            form: DistributionForm::Clustered,
            seeds: vec![0],
        };
        let table = render_table(&[cell(20.0, 200), cell(5.0, 500)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].contains("P=20.0") && lines[0].contains("P=5.0"));
        assert!(lines[1].contains("L=500"));
        let mut csv = Vec::new();
        write_sweep_csv(&[cell(20.0, 200)], &mut csv).unwrap();
        assert_eq!(
            String::from_utf8(csv).unwrap(),
            "perplexity,iters,final_kl,silhouette,nn_cv,form\n20,200,0.5,0.75,0.4,clustered\n"
        );
    }
}
