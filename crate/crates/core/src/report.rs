//! End-to-end embedding pipeline and its output files.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{assign_tiers, kmeans_with, silhouette, Clustering, KmeansConfig, KmeansInit, TierAssignment, Tier};
use crate::error::{Error, Result};
use crate::index::{build_feature_matrix, Scope, Weights};
use crate::panel::{impute_mean, NationalBaseline, PanelDataset, PanelMode};
use crate::pca::{pca_fit, pca_project, PcaModel};
use crate::svg::{render_svg, SvgOptions};
use crate::tsne::{run_tsne, CostSample, TsneConfig};
use crate::Embedding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Tsne,
    Pca,
}

/// User-facing options; `None` fields take the scope defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedOptions {
    pub method: Method,
    pub scope: Scope,
    pub perplexity: Option<f64>,
    pub exaggeration: f64,
    pub learning_rate: f64,
    pub iters: Option<usize>,
    pub k: Option<usize>,
    pub seed: u64,
    pub standardize: bool,
    pub weights: Weights,
    pub national: NationalBaseline,
    pub impute: bool,
    pub init: KmeansInit,
    pub restarts: usize,
    pub labels: bool,
}

impl Default for EmbedOptions {
    fn default() -> Self {
        Self {
            method: Method::Tsne,
            scope: Scope::Provinces,
            perplexity: None,
            exaggeration: 12.0,
            learning_rate: 200.0,
            iters: None,
            k: None,
            seed: 0,
            standardize: true,
            weights: Weights::default(),
            national: NationalBaseline::Explicit,
            impute: false,
            init: KmeansInit::KmeansPlusPlus,
            restarts: 10,
            labels: false,
        }
    }
}

/// Scope defaults as (perplexity, iterations, k).
pub fn scope_defaults(scope: Scope) -> (f64, usize, usize) {
    match scope {
        Scope::Provinces => (5.0, 1000, 4),
        Scope::Cities | Scope::All => (30.0, 5000, 7),
    }
}

impl EmbedOptions {
    pub fn tsne_config(&self) -> TsneConfig {
        let (p, it, _) = scope_defaults(self.scope);
        TsneConfig {
            perplexity: self.perplexity.unwrap_or(p),
            exaggeration_factor: self.exaggeration,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..TsneConfig::default()
        }
        .with_budget(self.iters.unwrap_or(it))
    }

    pub fn kmeans_config(&self) -> KmeansConfig {
        KmeansConfig {
            restarts: self.restarts,
            init: self.init,
            ..KmeansConfig::new(self.k.unwrap_or(scope_defaults(self.scope).2), self.seed.wrapping_add(1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSummary {
    pub mode: PanelMode,
    pub scope: Scope,
    pub regions: usize,
    pub months: usize,
    pub features: usize,
    pub imputed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub region_id: String,
    pub x: f64,
    pub y: f64,
    pub cluster: usize,
    pub tier: Tier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub final_kl: Option<f64>,
    pub kl_at_release: Option<f64>,
    pub silhouette: Option<f64>,
    pub explained_variance_ratio: Option<[f64; 2]>,
    pub unconverged_rows: Vec<String>,
}

/// Everything needed to reproduce and inspect a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub version: String,
    pub seed: u64,
    pub method: Method,
    pub standardized: bool,
    pub weights: Weights,
    pub national: NationalBaseline,
    pub input: InputSummary,
    pub tsne: Option<TsneConfig>,
    pub kmeans: KmeansConfig,
    pub pca: Option<PcaModel>,
    pub metrics: RunMetrics,
    pub clustering: Clustering,
    pub tiers: TierAssignment,
    pub embedding: Vec<EmbeddingRow>,
    pub cost_trace: Vec<CostSample>,
}

impl PipelineReport {
    pub fn to_embedding(&self) -> Embedding {
        Embedding {
            region_ids: self.embedding.iter().map(|r| r.region_id.clone()).collect(),
            coords: self.embedding.iter().map(|r| [r.x, r.y]).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn run_pipeline(ds: &PanelDataset, opts: &EmbedOptions) -> Result<PipelineReport> {
    let imputed;
    let ds = if opts.impute {
        imputed = impute_mean(ds)?;
        &imputed
    } else {
        ds
    };
    let raw = build_feature_matrix(ds, opts.scope, &opts.weights, opts.national)?;
    let fm = if opts.standardize { raw.standardize()? } else { raw };
    let n = fm.n();
    let km_cfg = opts.kmeans_config();
    if km_cfg.k == 0 || km_cfg.k > n {
        return Err(Error::InvalidK { k: km_cfg.k, n });
    }

    let (embedding, tsne, pca, cost_trace, final_kl, kl_at_release, unconverged) = match opts.method {
        Method::Tsne => {
            let cfg = opts.tsne_config();
            cfg.validate(n)?;
            let run = run_tsne(&fm, &cfg)?;
            let unconverged = run
                .unconverged_rows
                .iter()
                .map(|&i| fm.region_ids()[i].clone())
                .collect();
            let fk = run.final_kl();
            (run.embedding, Some(cfg), None, run.cost_trace, Some(fk), Some(run.kl_at_release), unconverged)
        }
        Method::Pca => {
            let model = pca_fit(&fm)?;
            let emb = pca_project(&model, &fm)?;
            (emb, None, Some(model), Vec::new(), None, None, Vec::new())
        }
    };

    let clustering = kmeans_with(&embedding.coords, &km_cfg)?;
    let tiers = assign_tiers(&clustering, &fm)?;
    let sil = if clustering.k >= 2 && n > clustering.k {
        Some(silhouette(&embedding.coords, &clustering.labels)?)
    } else {
        None
    };
    let rows = embedding
        .region_ids
        .iter()
        .zip(&embedding.coords)
        .zip(&clustering.labels)
        .map(|((id, p), &c)| EmbeddingRow {
            region_id: id.clone(),
            x: p[0],
            y: p[1],
            cluster: c,
            tier: tiers.tier_of_cluster[c],
        })
        .collect();
    let explained = pca.as_ref().map(|m: &PcaModel| m.explained_variance_ratio);

    Ok(PipelineReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: opts.seed,
        method: opts.method,
        standardized: opts.standardize,
        weights: opts.weights,
        national: opts.national,
        input: InputSummary {
            mode: ds.mode(),
            scope: opts.scope,
            regions: n,
            months: ds.month_count(),
            features: fm.d(),
            imputed: opts.impute,
        },
        tsne,
        kmeans: km_cfg,
        pca,
        metrics: RunMetrics {
            final_kl,
            kl_at_release,
            silhouette: sil,
            explained_variance_ratio: explained,
            unconverged_rows: unconverged,
        },
        clustering,
        tiers,
        embedding: rows,
        cost_trace,
    })
}

/// `region_id,x,y,cluster,tier`
pub fn write_embedding_csv<W: Write>(rows: &[EmbeddingRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["region_id", "x", "y", "cluster", "tier"])?;
    for r in rows {
        w.write_record([
            r.region_id.clone(),
            r.x.to_string(),
            r.y.to_string(),
            r.cluster.to_string(),
            r.tier.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `iter,kl`
pub fn write_cost_trace_csv<W: Write>(trace: &[CostSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "kl"])?;
    for c in trace {
        w.write_record([c.iter.to_string(), c.kl.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Write `embedding.csv`, `report.json`, `scatter.svg` and, for t-SNE,
/// `cost_trace.csv` into `dir`. Returns the written paths.
pub fn write_outputs(report: &PipelineReport, dir: &Path, labels: bool) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join("embedding.csv");
    write_embedding_csv(&report.embedding, std::fs::File::create(&path)?)?;
    written.push(path);

    let path = dir.join("report.json");
    std::fs::write(&path, report.to_json()? + "\n")?;
    written.push(path);

    let path = dir.join("scatter.svg");
    let opts = SvgOptions { show_labels: labels, ..SvgOptions::default() };
    std::fs::write(&path, render_svg(&report.to_embedding(), &report.clustering.labels, &opts)?)?;
    written.push(path);

    if report.method == Method::Tsne {
        let path = dir.join("cost_trace.csv");
        write_cost_trace_csv(&report.cost_trace, std::fs::File::create(&path)?)?;
        written.push(path);
    }
    Ok(written)
}
