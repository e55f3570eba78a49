//! Reproduction profiles: named recipes that generate a cohort, split it at one
//! or more bias degrees, train a sweep of models and tabulate the results.
//! Every table is a synthetic analog, not a reproduction of real-data numbers.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sweep::{self, aggregate_csv, aggregate_records, AggregateRow, SweepAxis, SweepTable, SweepValue};
use crate::synthetic::{generate_cohort, split_biased, GeneratorSpec, SyntheticError};
use crate::trainer::{TrainConfig, TrainError};

pub const LABEL: &str = "synthetic analog";

const BUILTIN: [(&str, &str); 5] = [
    ("table1-analog", include_str!("../../../profiles/table1-analog.toml")),
    ("fig2a-analog", include_str!("../../../profiles/fig2a-analog.toml")),
    ("fig2b-analog", include_str!("../../../profiles/fig2b-analog.toml")),
    ("fig2c-analog", include_str!("../../../profiles/fig2c-analog.toml")),
    ("fig2d-analog", include_str!("../../../profiles/fig2d-analog.toml")),
];

#[derive(Debug, Error)]
pub enum ReproError {
    #[error(
        "unknown profile `{0}` (available: table1-analog, fig2a-analog, fig2b-analog, fig2c-analog, fig2d-analog)"
    )]
    Unknown(String),
    #[error("invalid profile: {0}")]
    Recipe(String),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub description: String,
    pub seeds: Vec<u64>,
    pub degrees: Vec<u8>,
    /// Without an axis the recipe trains `train.model` as is.
    #[serde(default)]
    pub axis: Option<SweepAxis>,
    #[serde(default)]
    pub values: Vec<String>,
    pub cohort: GeneratorSpec,
    pub train: TrainConfig,
}

impl Recipe {
    pub fn from_toml_str(text: &str) -> Result<Self, ReproError> {
        let r: Self = toml::from_str(text).map_err(|e| ReproError::Recipe(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn builtin(name: &str) -> Result<Self, ReproError> {
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ReproError::Unknown(name.to_owned()))?;
        Self::from_toml_str(text)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn validate(&self) -> Result<(), ReproError> {
        let bad = |m: String| Err(ReproError::Recipe(m));
        if self.seeds.is_empty() || self.degrees.is_empty() {
            return bad("recipe needs at least one seed and one degree".into());
        }
        if let Some(d) = self.degrees.iter().find(|d| !(1..=4).contains(*d)) {
            return bad(format!("degree {d} is outside 1..=4"));
        }
        if self.axis.is_some() == self.values.is_empty() {
            return bad("`axis` and `values` must be given together".into());
        }
        self.cohort.validate()?;
        self.train.validate()?;
        self.sweep_values()?;
        Ok(())
    }

    /// Axis and values to sweep; a recipe without an axis sweeps its own fusion rule.
    pub fn sweep_values(&self) -> Result<(SweepAxis, Vec<SweepValue>), ReproError> {
        match self.axis {
            None => Ok((SweepAxis::Fusion, vec![SweepValue::Fusion(self.train.model.fusion)])),
            Some(axis) => {
                let values = self
                    .values
                    .iter()
                    .map(|v| SweepValue::parse(axis, v))
                    .collect::<Result<_, _>>()
                    .map_err(ReproError::Recipe)?;
                Ok((axis, values))
            }
        }
    }
}

/// Shrinks a recipe for quick runs.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub n: Option<usize>,
    pub seeds: Option<Vec<u64>>,
}

impl Overrides {
    pub fn apply(&self, recipe: &mut Recipe) {
        if let Some(e) = self.epochs {
            recipe.train.epochs = e;
        }
        if let Some(n) = self.n {
            recipe.cohort.n = n;
        }
        if let Some(s) = &self.seeds {
            recipe.seeds = s.clone();
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DegreeResult {
    pub degree: u8,
    pub n_train: usize,
    pub n_test: usize,
    pub table: SweepTable,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportBundle {
    pub label: &'static str,
    pub recipe: Recipe,
    pub results: Vec<DegreeResult>,
}

impl ReportBundle {
    /// `(file name, CSV contents)` for every table of the bundle.
    pub fn tables(&self) -> Vec<(String, String)> {
        degree_tables(&self.results)
    }

    pub fn aggregate(&self, degree: u8) -> Option<Vec<AggregateRow>> {
        self.results
            .iter()
            .find(|r| r.degree == degree)
            .map(|r| r.table.aggregate())
    }

    /// Writes every table plus `bundle.json`; returns the written paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, ReproError> {
        let io_err = |path: &Path| {
            let path = path.to_owned();
            move |source| ReproError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut written = Vec::new();
        for (name, body) in self.tables() {
            let path = dir.join(name);
            fs::write(&path, body).map_err(io_err(&path))?;
            written.push(path);
        }
        let path = dir.join("bundle.json");
        let meta = serde_json::json!({
            "label": self.label,
            "profile": self.recipe.name,
            "description": self.recipe.description,
            "recipe": self.recipe,
            "tables": written.iter().map(|p| p.file_name().unwrap().to_string_lossy()).collect::<Vec<_>>(),
        });
        fs::write(&path, crate::jsonfmt::to_pretty_string(&meta)).map_err(io_err(&path))?;
        written.push(path);
        Ok(written)
    }
}

/// Per-degree run and summary tables plus a combined `summary.csv` keyed by degree.
pub fn degree_tables(results: &[DegreeResult]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let axis = results.first().map_or(SweepAxis::Fusion, |r| r.table.axis);
    let mut summary = csv::Writer::from_writer(Vec::new());
    for (i, r) in results.iter().enumerate() {
        out.push((format!("degree{}_runs.csv", r.degree), r.table.rows_csv()));
        let agg = r.table.aggregate();
        out.push((
            format!("degree{}_summary.csv", r.degree),
            aggregate_csv(&axis.to_string(), &agg),
        ));
        let (header, records) = aggregate_records(&axis.to_string(), &agg);
        if i == 0 {
            let mut h = vec!["degree".to_owned()];
            h.extend(header);
            summary.write_record(&h).expect("in-memory csv");
        }
        for rec in records {
            let mut line = vec![r.degree.to_string()];
            line.extend(rec);
            summary.write_record(&line).expect("in-memory csv");
        }
    }
    let summary = String::from_utf8(summary.into_inner().expect("in-memory csv")).expect("utf-8");
    out.push(("summary.csv".into(), summary));
    out
}

pub fn run_profile(name: &str, overrides: &Overrides) -> Result<ReportBundle, ReproError> {
    let mut recipe = Recipe::builtin(name)?;
    overrides.apply(&mut recipe);
    run_recipe(recipe)
}

pub fn run_recipe(recipe: Recipe) -> Result<ReportBundle, ReproError> {
    recipe.validate()?;
    let cohort = generate_cohort(&recipe.cohort)?;
    let (axis, values) = recipe.sweep_values()?;
    let mut results = Vec::with_capacity(recipe.degrees.len());
    for &degree in &recipe.degrees {
        let (train_set, test_set) = split_biased(&cohort, degree, recipe.cohort.seed)?;
        let table = sweep::sweep(&train_set, &test_set, &recipe.train, axis, &values, &recipe.seeds, true)?;
        results.push(DegreeResult {
            degree,
            n_train: train_set.len(),
            n_test: test_set.len(),
            table,
        });
    }
    Ok(ReportBundle {
        label: LABEL,
        recipe,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_recipes_parse_and_fix_their_seeds() {
        for name in Recipe::builtin_names() {
            let r = Recipe::builtin(name).unwrap();
            assert_eq!(r.name, name);
            assert!(!r.seeds.is_empty());
            assert_eq!(r.train.epochs, 1000);
        }
        assert!(matches!(Recipe::builtin("fig9"), Err(ReproError::Unknown(_))));
    }

    #[test]
    fn recipe_validation() {
        let mut r = Recipe::builtin("fig2b-analog").unwrap();
        r.values.clear();
        assert!(r.validate().is_err());
        let mut r = Recipe::builtin("fig2b-analog").unwrap();
        r.degrees = vec![5];
        assert!(r.validate().is_err());
        let mut r = Recipe::builtin("fig2c-analog").unwrap();
        r.values = vec!["ten".into()];
        assert!(r.validate().is_err());
    }
}
