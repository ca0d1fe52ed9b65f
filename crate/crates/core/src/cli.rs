//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage or input error,
//! 3 optimization divergence.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::cluster::KmeansInit;
use crate::error::{Error, Result};
use crate::index::{build_feature_matrix, Scope, Weights};
use crate::panel::{parse_panel, validate_panel, validate_panel_where, NationalBaseline, PanelDataset, PanelMode};
use crate::report::{run_pipeline, write_outputs, EmbedOptions, Method};
use crate::sweep::{render_table, run_sweep, write_sweep_csv, FormThresholds, SweepConfig};
use crate::synth::{synth_full_panel, synth_panel, SynthConfig};
use crate::tsne::TsneConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

/// The synthetic panel of `--seed s` uses generator seed `s + 2`; t-SNE
/// uses `s` and k-means `s + 1`.
pub const SYNTH_SEED_OFFSET: u64 = 2;

#[derive(Debug, Parser)]
#[command(name = "riskmap", version, about = "Regional development maps from business panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct InputArgs {
    /// Panel CSV file.
    pub input: PathBuf,
    /// `raw` indicators or `precomputed` coefficients.
    #[arg(long, default_value = "precomputed", value_parser = parse_mode)]
    pub mode: PanelMode,
}

fn parse_mode(s: &str) -> std::result::Result<PanelMode, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    Provinces,
    Cities,
    Full,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a panel for missing or duplicate cells.
    Validate {
        #[command(flatten)]
        input: InputArgs,
        /// Only check regions in this scope.
        #[arg(long, value_enum)]
        scope: Option<Scope>,
    },
    /// Embed, cluster and tier the regions of a panel.
    Embed {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, default_value = "tsne")]
        method: Method,
        #[arg(long, value_enum, default_value = "provinces")]
        scope: Scope,
        #[arg(long)]
        perplexity: Option<f64>,
        #[arg(long, default_value_t = 12.0)]
        exaggeration: f64,
        #[arg(long, default_value_t = 200.0)]
        lr: f64,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_standardize: bool,
        /// Business weights m1,m2,m3 (raw mode).
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "explicit")]
        national: NationalBaseline,
        /// Fill missing cells with the region's mean over months.
        #[arg(long)]
        impute: bool,
        #[arg(long, value_enum, default_value = "kmeans++")]
        init: KmeansInit,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        /// Draw region ids next to points.
        #[arg(long)]
        labels: bool,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run a perplexity × iteration grid and label each map's shape.
    Sweep {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, default_value = "provinces")]
        scope: Scope,
        #[arg(long, value_delimiter = ',', default_value = "20,10,5")]
        perplexities: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "200,500")]
        iters: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_standardize: bool,
        #[arg(long, value_enum, default_value = "explicit")]
        national: NationalBaseline,
        /// Also write sweep.csv and sweep.json here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a synthetic precomputed panel with planted tiers.
    Synth {
        #[arg(long, value_enum, default_value = "provinces")]
        layout: Layout,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        months: Option<usize>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the feature matrix of a panel as CSV.
    Features {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long, value_enum, default_value = "provinces")]
        scope: Scope,
        #[arg(long)]
        no_standardize: bool,
        #[arg(long, value_enum, default_value = "explicit")]
        national: NationalBaseline,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::IncompletePanel { .. } | Error::NationalCellMissing(_) | Error::NonPositiveBaseline(_) => {
            EXIT_INVALID
        }
        Error::Divergence { .. } => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

fn load(input: &InputArgs) -> Result<PanelDataset> {
    let file = std::fs::File::open(&input.input)?;
    parse_panel(std::io::BufReader::new(file), input.mode)
}

fn weights_from(v: Option<Vec<f64>>) -> Result<Weights> {
    match v {
        None => Ok(Weights::default()),
        Some(w) => match w[..] {
            [a, b, c] => Weights::new(a, b, c),
            _ => Err(Error::InvalidWeights(format!("expected 3 weights, got {}", w.len()))),
        },
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return EXIT_OK;
        }
    };
    match execute(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Validate { input, scope } => {
            let ds = load(&input)?;
            let report = match scope {
                Some(s) => validate_panel_where(&ds, |r| s.contains(r)),
                None => validate_panel(&ds),
            };
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            if report.is_complete {
                Ok(EXIT_OK)
            } else {
                writeln!(
                    err,
                    "panel incomplete: {} missing, {} duplicate",
                    report.missing_cells.len(),
                    report.duplicate_cells.len()
                )?;
                Ok(EXIT_INVALID)
            }
        }
        Command::Embed {
            input,
            method,
            scope,
            perplexity,
            exaggeration,
            lr,
            iters,
            k,
            seed,
            no_standardize,
            weights,
            national,
            impute,
            init,
            restarts,
            labels,
            out_dir,
        } => {
            let ds = load(&input)?;
            let opts = EmbedOptions {
                method,
                scope,
                perplexity,
                exaggeration,
                learning_rate: lr,
                iters,
                k,
                seed,
                standardize: !no_standardize,
                weights: weights_from(weights)?,
                national,
                impute,
                init,
                restarts,
                labels,
            };
            let report = run_pipeline(&ds, &opts)?;
            let m = &report.metrics;
            let mut summary = format!(
                "{} regions, {} clusters",
                report.input.regions, report.clustering.k
            );
            if let Some(kl) = m.final_kl {
                summary += &format!(", final KL {kl:.4}");
            }
            if let Some(evr) = m.explained_variance_ratio {
                summary += &format!(", explained variance {:.3} / {:.3}", evr[0], evr[1]);
            }
            if let Some(sil) = m.silhouette {
                summary += &format!(", silhouette {sil:.3}");
            }
            writeln!(out, "{summary}")?;
            for p in write_outputs(&report, &out_dir, labels)? {
                writeln!(out, "{}", p.display())?;
            }
            if !report.metrics.unconverged_rows.is_empty() {
                writeln!(
                    err,
                    "warning: perplexity target not reached for {} region(s)",
                    report.metrics.unconverged_rows.len()
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::Sweep {
            input,
            scope,
            perplexities,
            iters,
            seeds,
            k,
            seed,
            no_standardize,
            national,
            out_dir,
        } => {
            let ds = load(&input)?;
            let raw = build_feature_matrix(&ds, scope, &Weights::default(), national)?;
            let fm = if no_standardize { raw } else { raw.standardize()? };
            let cfg = SweepConfig {
                perplexities,
                iter_budgets: iters,
                k,
                seeds,
                base_seed: seed,
                tsne: TsneConfig::default(),
                thresholds: FormThresholds::default(),
            };
            let result = run_sweep(&fm, &cfg)?;
            write!(out, "{}", render_table(&result.cells))?;
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir)?;
                write_sweep_csv(&result.cells, std::fs::File::create(dir.join("sweep.csv"))?)?;
                std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&result)? + "\n")?;
            }
            Ok(EXIT_OK)
        }
        Command::Synth {
            layout,
            seed,
            noise,
            months,
            out: path,
        } => {
            let tweak = |mut c: SynthConfig| {
                if let Some(v) = noise {
                    c.noise_std = v;
                }
                if let Some(m) = months {
                    c.months = m;
                }
                c
            };
            let seed = seed.wrapping_add(SYNTH_SEED_OFFSET);
            let ds = match layout {
                Layout::Provinces => synth_panel(&tweak(SynthConfig::provinces(seed)))?,
                Layout::Cities => synth_panel(&tweak(SynthConfig::cities(seed)))?,
                Layout::Full if noise.is_none() && months.is_none() => synth_full_panel(seed)?,
                Layout::Full => synth_panel(&tweak(SynthConfig::provinces(seed)))?
                    .merge(&synth_panel(&tweak(SynthConfig::cities(seed.wrapping_add(1))))?)?,
            };
            match path {
                Some(p) => ds.write_csv(std::fs::File::create(p)?)?,
                None => ds.write_csv(&mut *out)?,
            }
            Ok(EXIT_OK)
        }
        Command::Features {
            input,
            scope,
            no_standardize,
            national,
            out: path,
        } => {
            let ds = load(&input)?;
            let raw = build_feature_matrix(&ds, scope, &Weights::default(), national)?;
            let fm = if no_standardize { raw } else { raw.standardize()? };
            match path {
                Some(p) => fm.write_csv(std::fs::File::create(p)?)?,
                None => fm.write_csv(&mut *out)?,
            }
            Ok(EXIT_OK)
        }
    }
}
