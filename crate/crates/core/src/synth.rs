//! Synthetic LTV streams with per-category tail regimes and location drift.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::DataBatch;
use crate::distributions::{rng_from_seed, sample_student_t, RngState, StudentTParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailKind {
    Gaussian,
    StudentT,
    Cauchy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    pub weight: f64,
    pub tail: TailKind,
    /// Degrees of freedom; required for `student_t` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    pub location: f64,
    pub scale: f64,
}

impl CategorySpec {
    fn new(name: &str, weight: f64, tail: TailKind, df: Option<f64>, location: f64, scale: f64) -> Self {
        CategorySpec {
            name: name.into(),
            weight,
            tail,
            df,
            location,
            scale,
        }
    }

    pub fn nu(&self) -> f64 {
        match self.tail {
            TailKind::Gaussian => f64::INFINITY,
            TailKind::Cauchy => 1.0,
            TailKind::StudentT => self.df.unwrap_or(f64::NAN),
        }
    }

    pub fn params(&self, location_multiplier: f64) -> StudentTParams {
        StudentTParams::new(self.location * location_multiplier, self.scale, self.nu())
    }
}

/// From `row_index` on, the location of every category is multiplied by
/// `multiplier` (on top of earlier events).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftEvent {
    pub row_index: u64,
    pub multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_rows: u64,
    pub seed: u64,
    pub categories: Vec<CategorySpec>,
    #[serde(default)]
    pub drift_events: Vec<DriftEvent>,
}

impl SynthSpec {
    /// Five categories with similar locations and tails ranging from
    /// Cauchy to Gaussian, 18000 rows.
    pub fn demo() -> Self {
        use TailKind::*;
        SynthSpec {
            n_rows: 18_000,
            seed: 42,
            categories: vec![
                CategorySpec::new("gaussian", 0.30, Gaussian, None, 1500.0, 500.0),
                CategorySpec::new("t30", 0.20, StudentT, Some(30.0), 1500.0, 500.0),
                CategorySpec::new("t5", 0.20, StudentT, Some(5.0), 1500.0, 450.0),
                CategorySpec::new("t2", 0.15, StudentT, Some(2.0), 1500.0, 400.0),
                CategorySpec::new("cauchy", 0.15, Cauchy, None, 1500.0, 300.0),
            ],
            drift_events: Vec::new(),
        }
    }

    /// Twelve 3000-row batches of thin and moderate tails with a x20
    /// location shift at the start of batch six.
    pub fn drift_demo() -> Self {
        use TailKind::*;
        SynthSpec {
            n_rows: 36_000,
            seed: 7,
            categories: vec![
                CategorySpec::new("gaussian", 0.4, Gaussian, None, 1500.0, 500.0),
                CategorySpec::new("t30", 0.3, StudentT, Some(30.0), 1500.0, 500.0),
                CategorySpec::new("t5", 0.3, StudentT, Some(5.0), 1500.0, 450.0),
            ],
            drift_events: vec![DriftEvent {
                row_index: 15_000,
                multiplier: 20.0,
            }],
        }
    }

    /// Two categories where the fat one makes roughly the top fifth of
    /// customers account for four fifths of revenue.
    pub fn pareto_demo() -> Self {
        use TailKind::*;
        SynthSpec {
            n_rows: 100_000,
            seed: 3,
            categories: vec![
                CategorySpec::new("thin", 0.3, Gaussian, None, 100.0, 30.0),
                CategorySpec::new("fat", 0.7, Cauchy, None, 100.0, 100.0),
            ],
            drift_events: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::toml(text, e))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynthSpec::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synthetic spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::invalid("categories", "at least one category is required"));
        }
        let total: f64 = self.categories.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("weight", format!("category weights sum to {total}, not 1")));
        }
        for (i, c) in self.categories.iter().enumerate() {
            let at = |f: &str| format!("categories[{i}].{f}");
            if c.name.is_empty() {
                return Err(Error::invalid(at("name"), "must not be empty"));
            }
            if !(c.weight >= 0.0) {
                return Err(Error::invalid(at("weight"), "must be nonnegative"));
            }
            if !(c.location > 0.0 && c.location.is_finite()) {
                return Err(Error::invalid(at("location"), "must be positive"));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(Error::invalid(at("scale"), "must be positive"));
            }
            match (c.tail, c.df) {
                (TailKind::StudentT, Some(df)) if df > 0.0 => {}
                (TailKind::StudentT, _) => {
                    return Err(Error::invalid(at("df"), "student_t needs a positive df"));
                }
                (_, Some(_)) => return Err(Error::invalid(at("df"), "only student_t takes df")),
                _ => {}
            }
        }
        for (i, d) in self.drift_events.iter().enumerate() {
            if !(d.multiplier > 0.0 && d.multiplier.is_finite()) {
                return Err(Error::invalid(format!("drift_events[{i}].multiplier"), "must be positive"));
            }
        }
        Ok(())
    }

    /// Location multiplier in force at `row`.
    pub fn multiplier_at(&self, row: u64) -> f64 {
        self.drift_events
            .iter()
            .filter(|d| d.row_index <= row)
            .map(|d| d.multiplier)
            .product()
    }
}

/// Lazy row iterator: `(category index, target)`.
pub struct SynthRows<'a> {
    spec: &'a SynthSpec,
    cumulative: Vec<f64>,
    rng: RngState,
    row: u64,
}

impl Iterator for SynthRows<'_> {
    type Item = (usize, f64);

    fn next(&mut self) -> Option<(usize, f64)> {
        if self.row >= self.spec.n_rows {
            return None;
        }
        let u: f64 = self.rng.random();
        let k = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1);
        let p = self.spec.categories[k].params(self.spec.multiplier_at(self.row));
        let y = sample_student_t(p, &mut self.rng).max(0.0);
        self.row += 1;
        Some((k, y))
    }
}

pub fn rows(spec: &SynthSpec) -> SynthRows<'_> {
    let mut acc = 0.0;
    let cumulative = spec
        .categories
        .iter()
        .map(|c| {
            acc += c.weight;
            acc
        })
        .collect();
    SynthRows {
        spec,
        cumulative,
        rng: rng_from_seed(spec.seed),
        row: 0,
    }
}

/// The stream chunked exactly as the CSV reader would chunk the written file.
pub fn batches(spec: &SynthSpec, batch_size: usize) -> impl Iterator<Item = Result<DataBatch>> + '_ {
    let mut it = rows(spec).peekable();
    let size = batch_size.max(1);
    let mut index = 0;
    std::iter::from_fn(move || {
        it.peek()?;
        index += 1;
        let mut b = DataBatch {
            index,
            ..DataBatch::default()
        };
        for (k, y) in it.by_ref().take(size) {
            b.categories.push(spec.categories[k].name.clone());
            b.targets.push(y);
        }
        Some(Ok(b))
    })
}

/// Writes the stream as `category,target` CSV. Returns the row count.
pub fn generate<W: Write>(spec: &SynthSpec, out: W) -> Result<u64> {
    spec.validate()?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["category", "target"])?;
    let mut n = 0;
    for (k, y) in rows(spec) {
        w.write_record([spec.categories[k].name.as_str(), &y.to_string()])?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io("<synthetic output>", e))?;
    Ok(n)
}
