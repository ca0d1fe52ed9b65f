//! Synthetic precomputed panels with planted development tiers.
//!
//! Each region belongs to a tier with a planted mean coefficient. A cell is
//!
//! ```text
//! B[h, i, t] = tier_mean * business_factor[h, i] * drift[t] * noise[h, i, t]
//! ```
//!
//! where `drift` rises linearly from 1.0 to 1.2 across the months, `noise` is
//! log-normal with log-scale `noise_std`, and the business factors of a
//! region are log-normal with log-scale `imbalance_std` of its tier,
//! recentred so their geometric mean is 1. The recentring keeps a region's
//! overall level at its tier mean while its business mix varies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{
    AdminLevel, Business, Observation, PanelDataset, PanelMode, RegionRecord, YearMonth,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Strictly descending planted means.
    pub tier_means: Vec<f64>,
    pub tier_sizes: Vec<usize>,
    pub months: usize,
    pub start: YearMonth,
    /// Log-scale of the per-cell multiplicative noise.
    pub noise_std: f64,
    /// Log-scale of the business factors, one per tier. `None` plants no
    /// imbalance in the top and bottom tiers and 0.4 in the middle ones.
    pub imbalance_std: Option<Vec<f64>>,
    pub admin_level: AdminLevel,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// 31 provinces in tiers of 4, 7, 9 and 11.
    fn default() -> Self {
        Self {
            tier_means: vec![8.0, 3.0, 1.5, 0.6],
            tier_sizes: vec![4, 7, 9, 11],
            months: 24,
            start: YearMonth { year: 2014, month: 1 },
            noise_std: 0.15,
            imbalance_std: None,
            admin_level: AdminLevel::Province,
            id_prefix: "P".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// 335 cities in 7 groups.
    pub fn cities(seed: u64) -> Self {
        Self {
            tier_means: vec![9.0, 5.0, 3.0, 1.8, 1.1, 0.65, 0.4],
            tier_sizes: vec![5, 15, 30, 50, 70, 80, 85],
            admin_level: AdminLevel::City,
            id_prefix: "C".into(),
            seed,
            ..Self::default()
        }
    }

    pub fn provinces(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn region_count(&self) -> usize {
        self.tier_sizes.iter().sum()
    }

    pub fn resolved_imbalance(&self) -> Vec<f64> {
        match &self.imbalance_std {
            Some(v) => v.clone(),
            None => {
                let k = self.tier_means.len();
                (0..k)
                    .map(|t| if t == 0 || t + 1 == k { 0.0 } else { 0.4 })
                    .collect()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.tier_means.is_empty() || self.tier_means.len() != self.tier_sizes.len() {
            return bad("tier_means and tier_sizes must be nonempty and equally long".into());
        }
        if self.tier_means.windows(2).any(|w| w[0] <= w[1]) {
            return bad("tier_means must be strictly descending".into());
        }
        if self.tier_means.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
            return bad("tier_means must be positive".into());
        }
        if self.months == 0 {
            return bad("months must be positive".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be nonnegative".into());
        }
        let imb = self.resolved_imbalance();
        if imb.len() != self.tier_means.len() || imb.iter().any(|s| !(*s >= 0.0)) {
            return bad("imbalance_std needs one nonnegative entry per tier".into());
        }
        Ok(())
    }

    /// Ground-truth tier index (0 = top) for each generated region, in the
    /// order regions are emitted.
    pub fn truth(&self) -> Vec<usize> {
        self.tier_sizes
            .iter()
            .enumerate()
            .flat_map(|(t, &s)| std::iter::repeat_n(t, s))
            .collect()
    }

    fn region_id(&self, index: usize) -> String {
        format!("{}{:03}", self.id_prefix, index)
    }
}

/// Generate a complete precomputed-mode panel. Region ids are
/// `<prefix><index>` with zero-padded indices, so sorted id order equals
/// generation order and [`SynthConfig::truth`] lines up with feature rows.
pub fn synth_panel(cfg: &SynthConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
    let imbalance = cfg.resolved_imbalance();
    let t = cfg.months;
    let drift = |m: usize| {
        if t > 1 {
            1.0 + 0.2 * m as f64 / (t - 1) as f64
        } else {
            1.0
        }
    };

    let mut regions = Vec::with_capacity(cfg.region_count());
    let mut observations = Vec::with_capacity(cfg.region_count() * 4 * t);
    let mut index = 0;
    for (tier, (&mean, &size)) in cfg.tier_means.iter().zip(&cfg.tier_sizes).enumerate() {
        for _ in 0..size {
            let id = cfg.region_id(index);
            index += 1;
            regions.push(RegionRecord {
                region_id: id.clone(),
                region_name: format!("Synthetic {} tier {}", id, tier + 1),
                admin_level: cfg.admin_level,
            });
            let logs: Vec<f64> = (0..4)
                .map(|_| imbalance[tier] * std_normal.sample(&mut rng))
                .collect();
            let centre = logs.iter().sum::<f64>() / 4.0;
            for (b, &business) in Business::ALL.iter().enumerate() {
                let factor = (logs[b] - centre).exp();
                for m in 0..t {
                    let noise = (cfg.noise_std * std_normal.sample(&mut rng)).exp();
                    observations.push(Observation {
                        region_id: id.clone(),
                        business,
                        indicator: None,
                        month: m,
                        value: mean * factor * drift(m) * noise,
                    });
                }
            }
        }
    }

    let months = (0..t).map(|m| cfg.start.offset(m)).collect();
    PanelDataset::new(PanelMode::PrecomputedCoefficients, regions, months, observations)
}

/// The full-size layout: 31 provinces plus 335 cities.
pub fn synth_full_panel(seed: u64) -> Result<PanelDataset> {
    let provinces = synth_panel(&SynthConfig::provinces(seed))?;
    let cities = synth_panel(&SynthConfig::cities(seed.wrapping_add(1)))?;
    provinces.merge(&cities)
}
