//! Panel ingestion and validation.
//!
//! A panel is a set of `(region, business, indicator, month, value)`
//! observations read from CSV with the header
//! `region_id,region_name,admin_level,business,indicator,month,value`.
//! Months are calendar tags `YYYY-MM`, mapped to dense 0-based indices in
//! chronological order. In precomputed mode the indicator column is ignored
//! (it may be `-`) and each value is already a business coefficient.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 7] = [
    "region_id",
    "region_name",
    "admin_level",
    "business",
    "indicator",
    "month",
    "value",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdminLevel {
    Province,
    City,
    National,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Business {
    Payment,
    Fund,
    Credit,
    Insurance,
}

impl Business {
    pub const ALL: [Business; 4] = [
        Business::Payment,
        Business::Fund,
        Business::Credit,
        Business::Insurance,
    ];
}

/// The three sub-indicators combined into a business coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Penetration,
    AmountPerCapita,
    CountPerCapita,
}

impl Indicator {
    pub const ALL: [Indicator; 3] = [
        Indicator::Penetration,
        Indicator::AmountPerCapita,
        Indicator::CountPerCapita,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelMode {
    RawIndicators,
    PrecomputedCoefficients,
}

macro_rules! token_enum {
    ($ty:ty, $what:literal, $($variant:path => $tok:literal),+ $(,)?) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($variant => $tok),+
                }
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($tok => Ok($variant),)+
                    other => Err(format!("unknown {} {:?}", $what, other)),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

token_enum!(AdminLevel, "admin level",
    AdminLevel::Province => "province",
    AdminLevel::City => "city",
    AdminLevel::National => "national",
);
token_enum!(Business, "business",
    Business::Payment => "payment",
    Business::Fund => "fund",
    Business::Credit => "credit",
    Business::Insurance => "insurance",
);
token_enum!(Indicator, "indicator",
    Indicator::Penetration => "penetration",
    Indicator::AmountPerCapita => "amount_per_capita",
    Indicator::CountPerCapita => "count_per_capita",
);
token_enum!(PanelMode, "mode",
    PanelMode::RawIndicators => "raw",
    PanelMode::PrecomputedCoefficients => "precomputed",
);

/// Calendar month tag, `YYYY-MM`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct YearMonth {
    pub year: i32,
    pub month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u8) -> Option<Self> {
        (1..=12).contains(&month).then_some(Self { year, month })
    }

    fn ordinal(self) -> i64 {
        self.year as i64 * 12 + (self.month as i64 - 1)
    }

    /// The month `n` months after this one.
    pub fn offset(self, n: usize) -> Self {
        let ord = self.ordinal() + n as i64;
        Self {
            year: ord.div_euclid(12) as i32,
            month: (ord.rem_euclid(12) + 1) as u8,
        }
    }
}

impl FromStr for YearMonth {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let bad = || format!("month {s:?} is not YYYY-MM");
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        if y.len() != 4 || m.len() != 2 {
            return Err(bad());
        }
        let year: i32 = y.parse().map_err(|_| bad())?;
        let month: u8 = m.parse().map_err(|_| bad())?;
        YearMonth::new(year, month).ok_or_else(bad)
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub region_id: String,
    pub region_name: String,
    pub admin_level: AdminLevel,
}

/// One panel cell. `indicator` is `None` in precomputed mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub region_id: String,
    pub business: Business,
    pub indicator: Option<Indicator>,
    pub month: usize,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CellKey {
    region: usize,
    business: Business,
    indicator: Option<Indicator>,
    month: usize,
}

/// An immutable, internally consistent panel.
///
/// Construction checks region uniqueness, at most one national record, a
/// dense month calendar, value ranges and key uniqueness. Completeness of the
/// grid is checked separately by [`validate_panel`].
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    mode: PanelMode,
    regions: Vec<RegionRecord>,
    months: Vec<YearMonth>,
    observations: Vec<Observation>,
    region_index: HashMap<String, usize>,
    cells: HashMap<CellKey, usize>,
}

impl PanelDataset {
    pub fn new(
        mode: PanelMode,
        regions: Vec<RegionRecord>,
        months: Vec<YearMonth>,
        observations: Vec<Observation>,
    ) -> Result<Self> {
        let mut region_index = HashMap::with_capacity(regions.len());
        for (i, r) in regions.iter().enumerate() {
            if region_index.insert(r.region_id.clone(), i).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "region id {:?} appears twice",
                    r.region_id
                )));
            }
        }
        let nationals = regions
            .iter()
            .filter(|r| r.admin_level == AdminLevel::National)
            .count();
        if nationals > 1 {
            return Err(Error::InvalidDataset(format!(
                "{nationals} national records; at most one allowed"
            )));
        }
        for pair in months.windows(2) {
            if pair[1] != pair[0].offset(1) {
                return Err(Error::InvalidDataset(format!(
                    "months must be consecutive, found {} followed by {}",
                    pair[0], pair[1]
                )));
            }
        }

        let mut cells = HashMap::with_capacity(observations.len());
        for (i, obs) in observations.iter().enumerate() {
            let region = *region_index.get(&obs.region_id).ok_or_else(|| {
                Error::InvalidDataset(format!("unknown region {:?}", obs.region_id))
            })?;
            if obs.month >= months.len() {
                return Err(Error::InvalidDataset(format!(
                    "month index {} out of range (T = {})",
                    obs.month,
                    months.len()
                )));
            }
            if !obs.value.is_finite() || obs.value < 0.0 {
                return Err(Error::InvalidDataset(format!(
                    "value {} must be finite and nonnegative",
                    obs.value
                )));
            }
            match (mode, obs.indicator) {
                (PanelMode::RawIndicators, None) => {
                    return Err(Error::InvalidDataset(
                        "raw mode observations need an indicator".into(),
                    ))
                }
                (PanelMode::PrecomputedCoefficients, Some(_)) => {
                    return Err(Error::InvalidDataset(
                        "precomputed mode observations carry no indicator".into(),
                    ))
                }
                _ => {}
            }
            let key = CellKey {
                region,
                business: obs.business,
                indicator: obs.indicator,
                month: obs.month,
            };
            if cells.insert(key, i).is_some() {
                return Err(Error::InvalidDataset(format!(
                    "duplicate cell {}",
                    describe_cell(&obs.region_id, obs.business, obs.indicator, months[obs.month])
                )));
            }
        }

        Ok(Self {
            mode,
            regions,
            months,
            observations,
            region_index,
            cells,
        })
    }

    pub fn mode(&self) -> PanelMode {
        self.mode
    }

    pub fn regions(&self) -> &[RegionRecord] {
        &self.regions
    }

    pub fn months(&self) -> &[YearMonth] {
        &self.months
    }

    pub fn month_count(&self) -> usize {
        self.months.len()
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn region(&self, region_id: &str) -> Option<&RegionRecord> {
        self.region_index.get(region_id).map(|&i| &self.regions[i])
    }

    pub fn national(&self) -> Option<&RegionRecord> {
        self.regions
            .iter()
            .find(|r| r.admin_level == AdminLevel::National)
    }

    /// Value of a single cell, if present.
    pub fn value(
        &self,
        region_id: &str,
        business: Business,
        indicator: Option<Indicator>,
        month: usize,
    ) -> Option<f64> {
        let region = *self.region_index.get(region_id)?;
        let key = CellKey {
            region,
            business,
            indicator,
            month,
        };
        self.cells.get(&key).map(|&i| self.observations[i].value)
    }

    /// Indicator slots that make up the grid for this mode.
    pub fn indicator_slots(&self) -> Vec<Option<Indicator>> {
        match self.mode {
            PanelMode::RawIndicators => Indicator::ALL.iter().copied().map(Some).collect(),
            PanelMode::PrecomputedCoefficients => vec![None],
        }
    }

    /// Concatenate two panels that share mode and calendar.
    pub fn merge(&self, other: &PanelDataset) -> Result<PanelDataset> {
        if self.mode != other.mode {
            return Err(Error::InvalidDataset("cannot merge panels of different modes".into()));
        }
        if self.months != other.months {
            return Err(Error::InvalidDataset("cannot merge panels with different calendars".into()));
        }
        let mut regions = self.regions.clone();
        regions.extend(other.regions.iter().cloned());
        let mut observations = self.observations.clone();
        observations.extend(other.observations.iter().cloned());
        PanelDataset::new(self.mode, regions, self.months.clone(), observations)
    }

    /// Write the panel in the ingestion CSV schema, rows in observation order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for obs in &self.observations {
            let region = &self.regions[self.region_index[&obs.region_id]];
            w.write_record([
                region.region_id.as_str(),
                region.region_name.as_str(),
                region.admin_level.as_str(),
                obs.business.as_str(),
                obs.indicator.map_or("-", |i| i.as_str()),
                &self.months[obs.month].to_string(),
                &obs.value.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits utf-8"))
    }
}

fn describe_cell(
    region_id: &str,
    business: Business,
    indicator: Option<Indicator>,
    month: YearMonth,
) -> String {
    format!(
        "{region_id}/{business}/{}/{month}",
        indicator.map_or("-", |i| i.as_str())
    )
}

/// Parse a panel from CSV. Errors carry the 1-based line number.
pub fn parse_panel<R: Read>(source: R, mode: PanelMode) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let header = reader.headers()?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {:?}", CSV_HEADER.join(",")),
        });
    }

    struct Row {
        region_id: String,
        business: Business,
        indicator: Option<Indicator>,
        month: YearMonth,
        value: f64,
    }

    let mut regions: Vec<RegionRecord> = Vec::new();
    let mut region_lines: HashMap<String, (usize, u64)> = HashMap::new();
    let mut seen: HashMap<(String, Business, Option<Indicator>, YearMonth), u64> = HashMap::new();
    let mut rows = Vec::new();

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |message: String| Error::Parse { line, message };
        if record.len() != CSV_HEADER.len() {
            return Err(err(format!(
                "expected {} fields, found {}",
                CSV_HEADER.len(),
                record.len()
            )));
        }
        let region_id = record[0].to_string();
        if region_id.is_empty() {
            return Err(err("empty region_id".into()));
        }
        let region_name = record[1].to_string();
        let admin_level: AdminLevel = record[2].parse().map_err(err)?;
        let business: Business = record[3].parse().map_err(err)?;
        let indicator = match (mode, &record[4]) {
            (PanelMode::PrecomputedCoefficients, "-") => None,
            (PanelMode::PrecomputedCoefficients, tok) => {
                tok.parse::<Indicator>().map_err(err)?;
                None
            }
            (PanelMode::RawIndicators, tok) => Some(tok.parse::<Indicator>().map_err(err)?),
        };
        let month: YearMonth = record[5].parse().map_err(err)?;
        let value: f64 = record[6]
            .parse()
            .map_err(|_| err(format!("non-numeric value {:?}", &record[6])))?;
        if !value.is_finite() || value < 0.0 {
            return Err(err(format!("value {value} must be finite and nonnegative")));
        }

        match region_lines.get(&region_id) {
            Some(&(idx, first)) => {
                let known = &regions[idx];
                if known.region_name != region_name || known.admin_level != admin_level {
                    return Err(err(format!(
                        "region {region_id:?} redefined (first defined on line {first})"
                    )));
                }
            }
            None => {
                region_lines.insert(region_id.clone(), (regions.len(), line));
                regions.push(RegionRecord {
                    region_id: region_id.clone(),
                    region_name,
                    admin_level,
                });
            }
        }

        let key = (region_id.clone(), business, indicator, month);
        if let Some(&first_line) = seen.get(&key) {
            return Err(Error::DuplicateKey {
                key: describe_cell(&region_id, business, indicator, month),
                first_line,
                second_line: line,
            });
        }
        seen.insert(key, line);
        rows.push(Row {
            region_id,
            business,
            indicator,
            month,
            value,
        });
    }

    let months: Vec<YearMonth> = rows
        .iter()
        .map(|r| r.month)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let month_index: HashMap<YearMonth, usize> =
        months.iter().enumerate().map(|(i, m)| (*m, i)).collect();
    let observations = rows
        .into_iter()
        .map(|r| Observation {
            region_id: r.region_id,
            business: r.business,
            indicator: r.indicator,
            month: month_index[&r.month],
            value: r.value,
        })
        .collect();

    PanelDataset::new(mode, regions, months, observations)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRef {
    pub region_id: String,
    pub business: Business,
    pub indicator: Option<Indicator>,
    pub month: YearMonth,
}

impl fmt::Display for CellRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&describe_cell(
            &self.region_id,
            self.business,
            self.indicator,
            self.month,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub observation_count: usize,
    pub expected_count: usize,
    pub missing_cells: Vec<CellRef>,
    pub duplicate_cells: Vec<CellRef>,
    pub is_complete: bool,
}

/// Check the full region × business × indicator × month grid.
pub fn validate_panel(ds: &PanelDataset) -> ValidationReport {
    validate_panel_where(ds, |_| true)
}

/// Like [`validate_panel`], restricted to regions accepted by `keep`.
pub fn validate_panel_where<F>(ds: &PanelDataset, keep: F) -> ValidationReport
where
    F: Fn(&RegionRecord) -> bool,
{
    let slots = ds.indicator_slots();
    let mut missing = Vec::new();
    let mut expected = 0usize;
    for region in ds.regions.iter().filter(|r| keep(r)) {
        for &business in &Business::ALL {
            for &indicator in &slots {
                for (m, &month) in ds.months.iter().enumerate() {
                    expected += 1;
                    if ds.value(&region.region_id, business, indicator, m).is_none() {
                        missing.push(CellRef {
                            region_id: region.region_id.clone(),
                            business,
                            indicator,
                            month,
                        });
                    }
                }
            }
        }
    }

    let mut counts: HashMap<(&str, Business, Option<Indicator>, usize), usize> = HashMap::new();
    let mut duplicates = Vec::new();
    let mut observation_count = 0;
    for obs in &ds.observations {
        if !ds.region(&obs.region_id).is_some_and(&keep) {
            continue;
        }
        observation_count += 1;
        let c = counts
            .entry((&obs.region_id, obs.business, obs.indicator, obs.month))
            .or_default();
        *c += 1;
        if *c == 2 {
            duplicates.push(CellRef {
                region_id: obs.region_id.clone(),
                business: obs.business,
                indicator: obs.indicator,
                month: ds.months[obs.month],
            });
        }
    }

    let is_complete = observation_count > 0 && missing.is_empty() && duplicates.is_empty();
    ValidationReport {
        observation_count,
        expected_count: expected,
        missing_cells: missing,
        duplicate_cells: duplicates,
        is_complete,
    }
}

/// How the national baseline of a raw-mode panel is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum NationalBaseline {
    /// Require an explicit `national` record.
    #[default]
    Explicit,
    /// Use the national record when present, else the unweighted mean over
    /// all non-national regions.
    Aggregate,
}

/// National value of one raw-mode cell.
pub fn national_slice(
    ds: &PanelDataset,
    business: Business,
    indicator: Indicator,
    month: usize,
    baseline: NationalBaseline,
) -> Result<f64> {
    if ds.mode != PanelMode::RawIndicators {
        return Err(Error::InvalidDataset(
            "national baseline requires raw_indicators mode".into(),
        ));
    }
    let month_tag = ds.months.get(month).copied().ok_or_else(|| {
        Error::InvalidDataset(format!("month index {month} out of range"))
    })?;
    let describe = |region: &str| describe_cell(region, business, Some(indicator), month_tag);

    if let Some(nat) = ds.national() {
        return ds
            .value(&nat.region_id, business, Some(indicator), month)
            .ok_or_else(|| Error::NationalCellMissing(describe(&nat.region_id)));
    }
    match baseline {
        NationalBaseline::Explicit => Err(Error::NationalCellMissing(format!(
            "{} (no national record)",
            describe("national")
        ))),
        NationalBaseline::Aggregate => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for r in &ds.regions {
                let v = ds
                    .value(&r.region_id, business, Some(indicator), month)
                    .ok_or_else(|| Error::NationalCellMissing(format!(
                        "cannot aggregate, {} absent",
                        describe(&r.region_id)
                    )))?;
                sum += v;
                count += 1;
            }
            if count == 0 {
                return Err(Error::NationalCellMissing(describe("national")));
            }
            Ok(sum / count as f64)
        }
    }
}

/// Fill every missing grid cell with the mean of the same region's other
/// months for that (business, indicator) series.
pub fn impute_mean(ds: &PanelDataset) -> Result<PanelDataset> {
    let slots = ds.indicator_slots();
    let mut observations = ds.observations.clone();
    for region in &ds.regions {
        for &business in &Business::ALL {
            for &indicator in &slots {
                let present: Vec<f64> = (0..ds.month_count())
                    .filter_map(|m| ds.value(&region.region_id, business, indicator, m))
                    .collect();
                if present.len() == ds.month_count() {
                    continue;
                }
                if present.is_empty() {
                    return Err(Error::IncompletePanel {
                        missing: ds.month_count(),
                        duplicates: 0,
                        first_missing: Some(format!(
                            "{}/{business}/{} has no observed month to impute from",
                            region.region_id,
                            indicator.map_or("-", |i| i.as_str())
                        )),
                    });
                }
                let mean = present.iter().sum::<f64>() / present.len() as f64;
                for m in 0..ds.month_count() {
                    if ds.value(&region.region_id, business, indicator, m).is_none() {
                        observations.push(Observation {
                            region_id: region.region_id.clone(),
                            business,
                            indicator,
                            month: m,
                            value: mean,
                        });
                    }
                }
            }
        }
    }
    PanelDataset::new(ds.mode, ds.regions.clone(), ds.months.clone(), observations)
}
