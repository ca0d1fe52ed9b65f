//! k-means on 2-D embeddings, clustering quality metrics and tier ranking.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::FeatureMatrix;
use crate::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KmeansInit {
    #[default]
    #[value(name = "kmeans++")]
    #[serde(rename = "kmeans++")]
    KmeansPlusPlus,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when the relative inertia decrease falls below this.
    pub tol: f64,
    pub init: KmeansInit,
    pub seed: u64,
}

impl KmeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
            init: KmeansInit::KmeansPlusPlus,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub labels: Vec<usize>,
    pub centers: Vec<Point2>,
    pub inertia: f64,
    pub n_iter: usize,
    pub seed: u64,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

#[inline]
fn sq_dist(a: &Point2, b: &Point2) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// k-means with [`KmeansConfig::new`] defaults: k-means++ seeding, at most
/// 300 Lloyd iterations, best of `restarts` by inertia.
pub fn kmeans_fit(points: &[Point2], k: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    kmeans_with(
        points,
        &KmeansConfig {
            restarts,
            ..KmeansConfig::new(k, seed)
        },
    )
}

pub fn kmeans_with(points: &[Point2], cfg: &KmeansConfig) -> Result<Clustering> {
    let n = points.len();
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::InvalidK { k: cfg.k, n });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustering input"));
    }
    let mut best: Option<Clustering> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(restart as u64);
        let run = lloyd(points, cfg, &mut rng);
        // strict: ties keep the earlier restart
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn init_centers(points: &[Point2], k: usize, init: KmeansInit, rng: &mut ChaCha8Rng) -> Vec<Point2> {
    let n = points.len();
    match init {
        KmeansInit::Random => sample(rng, n, k).iter().map(|i| points[i]).collect(),
        KmeansInit::KmeansPlusPlus => {
            let mut chosen = vec![rng.random_range(0..n)];
            let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
            while chosen.len() < k {
                let total: f64 = d2.iter().sum();
                let next = if total > 0.0 {
                    let mut target = rng.random::<f64>() * total;
                    let mut pick = None;
                    for (i, &w) in d2.iter().enumerate() {
                        if w > 0.0 {
                            pick = Some(i);
                            if target < w {
                                break;
                            }
                            target -= w;
                        }
                    }
                    pick.expect("positive mass")
                } else {
                    // all remaining points coincide with a center
                    let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                    free[rng.random_range(0..free.len())]
                };
                chosen.push(next);
                for (d, p) in d2.iter_mut().zip(points) {
                    *d = d.min(sq_dist(p, &points[next]));
                }
            }
            chosen.iter().map(|&i| points[i]).collect()
        }
    }
}

fn assign(points: &[Point2], centers: &[Point2], labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (p, l) in points.iter().zip(labels.iter_mut()) {
        let (best, d) = centers
            .iter()
            .enumerate()
            .map(|(c, ctr)| (c, sq_dist(p, ctr)))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        *l = best;
        inertia += d;
    }
    inertia
}

/// Give every empty cluster the point farthest from its own center, taken
/// from a cluster with at least two members. Returns the new inertia.
fn repair_empty(points: &[Point2], labels: &mut [usize], centers: &mut [Point2]) -> f64 {
    let k = centers.len();
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            break;
        };
        let far = (0..points.len())
            .filter(|&i| sizes[labels[i]] > 1)
            .map(|i| (i, sq_dist(&points[i], &centers[labels[i]])))
            .fold((usize::MAX, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        labels[far] = empty;
        centers[empty] = points[far];
    }
    points
        .iter()
        .zip(labels.iter())
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum()
}

fn means(points: &[Point2], labels: &[usize], k: usize) -> Vec<Point2> {
    let mut sums = vec![[0.0; 2]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        counts[l] += 1;
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64])
        .collect()
}

fn lloyd(points: &[Point2], cfg: &KmeansConfig, rng: &mut ChaCha8Rng) -> Clustering {
    let k = cfg.k;
    let mut centers = init_centers(points, k, cfg.init, rng);
    let mut labels = vec![0usize; points.len()];
    let mut prev = f64::INFINITY;
    let mut trace = Vec::new();
    let mut n_iter = 0;
    for iter in 1..=cfg.max_iter.max(1) {
        assign(points, &centers, &mut labels);
        let inertia = repair_empty(points, &mut labels, &mut centers);
        debug_assert!(
            inertia <= prev + 1e-9 * prev.abs().max(1.0),
            "Lloyd inertia increased: {prev} -> {inertia}"
        );
        trace.push(inertia);
        n_iter = iter;
        if prev.is_finite() && prev - inertia <= cfg.tol * prev {
            break;
        }
        prev = inertia;
        centers = means(points, &labels, k);
    }
    centers = means(points, &labels, k);
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centers[l]))
        .sum();
    Clustering {
        k,
        labels,
        centers,
        inertia,
        n_iter,
        seed: cfg.seed,
        inertia_trace: trace,
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette coefficient. Points in singleton clusters contribute 0.
pub fn silhouette<P: AsRef<[f64]>>(points: &[P], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch(points.len(), labels.len()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::TooFewClusters(members.len()));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = &members[&labels[i]];
        if own.len() == 1 {
            continue;
        }
        let mean_to = |idx: &[usize]| {
            idx.iter()
                .filter(|&&j| j != i)
                .map(|&j| euclid(points[i].as_ref(), points[j].as_ref()))
                .sum::<f64>()
        };
        let a = mean_to(own) / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, idx)| mean_to(idx) / idx.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

fn comb2(x: usize) -> f64 {
    (x as f64) * (x as f64 - 1.0) / 2.0
}

/// Adjusted Rand index. Returns 1.0 when the chance correction degenerates
/// (both labelings single-cluster or both all-singletons).
pub fn adjusted_rand(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    // Sum in sorted order so the result does not depend on hash order.
    let sorted_sum = |m: Vec<usize>| {
        let mut v = m;
        v.sort_unstable();
        v.into_iter().map(comb2).sum::<f64>()
    };
    let index = sorted_sum(table.into_values().collect());
    let sa = sorted_sum(rows.into_values().collect());
    let sb = sorted_sum(cols.into_values().collect());
    let total = comb2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Development tier, 1 = strongest. Displays as a roman numeral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tier(pub usize);

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const TABLE: [(usize, &str); 13] = [
            (1000, "M"),
            (900, "CM"),
            (500, "D"),
            (400, "CD"),
            (100, "C"),
            (90, "XC"),
            (50, "L"),
            (40, "XL"),
            (10, "X"),
            (9, "IX"),
            (5, "V"),
            (4, "IV"),
            (1, "I"),
        ];
        let mut rest = self.0;
        for (v, s) in TABLE {
            while rest >= v {
                f.write_str(s)?;
                rest -= v;
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let digit = |c| match c {
            'I' => Some(1),
            'V' => Some(5),
            'X' => Some(10),
            'L' => Some(50),
            'C' => Some(100),
            'D' => Some(500),
            'M' => Some(1000),
            _ => None,
        };
        let vals: Vec<usize> = s
            .chars()
            .map(|c| digit(c).ok_or_else(|| format!("bad roman numeral {s:?}")))
            .collect::<std::result::Result<_, _>>()?;
        let mut total = 0;
        for (i, &v) in vals.iter().enumerate() {
            if vals.get(i + 1).is_some_and(|&next| next > v) {
                total -= v as isize;
            } else {
                total += v as isize;
            }
        }
        if total <= 0 {
            return Err(format!("bad roman numeral {s:?}"));
        }
        Ok(Tier(total as usize))
    }
}

impl Serialize for Tier {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Tier {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAssignment {
    /// Indexed by cluster id.
    pub tier_of_cluster: Vec<Tier>,
    /// Mean raw business coefficient of each cluster, indexed by cluster id.
    pub cluster_means: Vec<f64>,
    pub region_tiers: BTreeMap<String, Tier>,
    /// Set when two clusters had equal means and cluster id decided.
    pub tie_broken: bool,
}

/// Rank clusters by their mean raw coefficient: tier I is the highest.
pub fn assign_tiers(clustering: &Clustering, fm: &FeatureMatrix) -> Result<TierAssignment> {
    if clustering.labels.len() != fm.n() {
        return Err(Error::DimensionMismatch {
            expected: fm.n(),
            actual: clustering.labels.len(),
        });
    }
    let k = clustering.k;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in clustering.labels.iter().enumerate() {
        sums[l] += fm.raw_row_mean(i);
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidDataset(format!("cluster {c} has no members")));
    }
    let cluster_means: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| cluster_means[b].total_cmp(&cluster_means[a]).then(a.cmp(&b)));
    let tie_broken = order
        .windows(2)
        .any(|w| cluster_means[w[0]] == cluster_means[w[1]]);
    if tie_broken {
        log::warn!("clusters with equal mean coefficient; tiers ordered by cluster id");
    }

    let mut tier_of_cluster = vec![Tier(0); k];
    for (rank, &c) in order.iter().enumerate() {
        tier_of_cluster[c] = Tier(rank + 1);
    }
    let region_tiers = fm
        .region_ids()
        .iter()
        .zip(&clustering.labels)
        .map(|(id, &l)| (id.clone(), tier_of_cluster[l]))
        .collect();
    Ok(TierAssignment {
        tier_of_cluster,
        cluster_means,
        region_tiers,
        tie_broken,
    })
}
