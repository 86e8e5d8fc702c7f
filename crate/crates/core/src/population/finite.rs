use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CovariateSpace, Unit};
use crate::error::{Error, Result};

/// Column mapping for a population CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSchema {
    /// Coded columns whose cross-product defines the strata.
    pub covariates: Vec<String>,
    /// Numeric predictor features `W`.
    #[serde(default)]
    pub features: Vec<String>,
    pub outcome: String,
    /// Optional column of pre-computed predictions.
    #[serde(default)]
    pub prediction: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationUnit {
    pub stratum: usize,
    pub features: Vec<f64>,
    pub outcome: f64,
    pub prediction: Option<f64>,
}

/// A finite population replayed by bootstrap within strata.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    units: Vec<PopulationUnit>,
    strata: Vec<Vec<usize>>,
    labels: Vec<String>,
    q: Vec<f64>,
    schema: PopulationSchema,
    header: csv::StringRecord,
    raw: Vec<csv::StringRecord>,
}

pub fn load_population(path: impl AsRef<Path>, schema: &PopulationSchema) -> Result<FinitePopulation> {
    let file = std::fs::File::open(path.as_ref())?;
    FinitePopulation::from_reader(file, schema)
}

fn column(header: &csv::StringRecord, name: &str) -> Option<usize> {
    header.iter().position(|h| h == name)
}

impl FinitePopulation {
    pub fn from_reader<R: Read>(reader: R, schema: &PopulationSchema) -> Result<Self> {
        if schema.covariates.is_empty() {
            return Err(Error::Parse("schema names no covariate columns".into()));
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers()?.clone();

        let mut missing = Vec::new();
        let mut find = |name: &str| {
            let idx = column(&header, name);
            if idx.is_none() {
                missing.push(name.to_string());
            }
            idx
        };
        let cov_idx: Vec<Option<usize>> = schema.covariates.iter().map(|c| find(c)).collect();
        let feat_idx: Vec<Option<usize>> = schema.features.iter().map(|c| find(c)).collect();
        let out_idx = find(&schema.outcome);
        let pred_idx = schema.prediction.as_deref().map(&mut find);
        if !missing.is_empty() {
            return Err(Error::Parse(format!("missing columns: {}", missing.join(", "))));
        }
        let cov_idx: Vec<usize> = cov_idx.into_iter().flatten().collect();
        let feat_idx: Vec<usize> = feat_idx.into_iter().flatten().collect();
        let out_idx = out_idx.expect("checked above");
        let pred_idx = pred_idx.flatten();

        let mut raw = Vec::new();
        let mut keys: Vec<Vec<String>> = Vec::new();
        let mut parsed = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            // header is line 1
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse(format!("row {line}: {e}")))?;
            let cell = |idx: usize| rec.get(idx).unwrap_or("").trim();
            let number = |idx: usize, what: &str| -> Result<f64> {
                let s = cell(idx);
                if s.is_empty() {
                    return Err(Error::Parse(format!("row {line}: missing {what} `{}`", &header[idx])));
                }
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("row {line}: non-numeric {what} `{}` = {s:?}", &header[idx])))
            };
            let outcome = number(out_idx, "outcome")?;
            let features = feat_idx
                .iter()
                .map(|&j| number(j, "feature"))
                .collect::<Result<Vec<_>>>()?;
            let prediction = pred_idx.map(|j| number(j, "prediction")).transpose()?;
            let key: Vec<String> = cov_idx.iter().map(|&j| cell(j).to_string()).collect();
            if let Some(pos) = key.iter().position(|v| v.is_empty()) {
                return Err(Error::Parse(format!(
                    "row {line}: missing covariate `{}`",
                    schema.covariates[pos]
                )));
            }
            keys.push(key);
            parsed.push((features, outcome, prediction));
            raw.push(rec);
        }
        if raw.is_empty() {
            return Err(Error::Parse("population file has no data rows".into()));
        }

        // strata = cross-product of observed levels, in sorted order
        let levels: Vec<Vec<String>> = (0..cov_idx.len())
            .map(|c| {
                keys.iter()
                    .map(|k| k[c].clone())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
            .collect();
        let n_strata: usize = levels.iter().map(Vec::len).product();
        let stratum_of = |key: &[String]| -> usize {
            key.iter().zip(&levels).fold(0, |acc, (v, lv)| {
                acc * lv.len() + lv.binary_search(v).expect("level observed")
            })
        };
        let mut labels = vec![String::new(); n_strata];
        for (s, label) in labels.iter_mut().enumerate() {
            let mut rem = s;
            let mut parts = vec![""; levels.len()];
            for c in (0..levels.len()).rev() {
                parts[c] = &levels[c][rem % levels[c].len()];
                rem /= levels[c].len();
            }
            *label = parts.join("|");
        }

        let mut strata = vec![Vec::new(); n_strata];
        let units: Vec<PopulationUnit> = keys
            .iter()
            .zip(parsed)
            .enumerate()
            .map(|(i, (key, (features, outcome, prediction)))| {
                let stratum = stratum_of(key);
                strata[stratum].push(i);
                PopulationUnit {
                    stratum,
                    features,
                    outcome,
                    prediction,
                }
            })
            .collect();
        let empty: Vec<&str> = strata
            .iter()
            .zip(&labels)
            .filter(|(s, _)| s.is_empty())
            .map(|(_, l)| l.as_str())
            .collect();
        if !empty.is_empty() {
            return Err(Error::EmptyStratum(empty.join(", ")));
        }
        let total = units.len() as f64;
        let q = strata.iter().map(|s| s.len() as f64 / total).collect();

        Ok(FinitePopulation {
            units,
            strata,
            labels,
            q,
            schema: schema.clone(),
            header,
            raw,
        })
    }

    pub fn units(&self) -> &[PopulationUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn schema(&self) -> &PopulationSchema {
        &self.schema
    }

    pub fn stratum_labels(&self) -> &[String] {
        &self.labels
    }

    pub fn stratum_units(&self, stratum: usize) -> Option<&[usize]> {
        self.strata.get(stratum).map(Vec::as_slice)
    }

    /// Empirical stratum frequencies.
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn has_predictions(&self) -> bool {
        self.units.iter().all(|u| u.prediction.is_some())
    }

    /// The discrete covariate space over strata, with `q` = empirical frequencies.
    pub fn space(&self) -> Result<CovariateSpace> {
        CovariateSpace::strata(self.labels.clone(), self.q.clone())
    }

    /// Exact population mean of the outcome, `Σ_s q_s · mean_s`.
    pub fn mean_outcome(&self) -> f64 {
        self.strata
            .iter()
            .zip(&self.q)
            .map(|(idx, q)| {
                q * idx.iter().map(|&i| self.units[i].outcome).sum::<f64>() / idx.len() as f64
            })
            .sum()
    }

    /// Uniform draw with replacement from one stratum.
    pub fn bootstrap_draw<R: Rng + ?Sized>(&self, stratum: usize, rng: &mut R) -> Result<&PopulationUnit> {
        let members = self.strata.get(stratum).ok_or(Error::UnknownStratum(stratum))?;
        if members.is_empty() {
            return Err(Error::EmptyStratum(self.labels[stratum].clone()));
        }
        let i = members[rng.random_range(0..members.len())];
        Ok(&self.units[i])
    }

    pub(crate) fn draw_unit<R: Rng + ?Sized>(&self, point: usize, rng: &mut R) -> Result<Unit> {
        let u = self.bootstrap_draw(point, rng)?;
        Ok(Unit {
            point,
            x: point as f64,
            features: u.features.clone(),
            y: u.outcome,
            stored_prediction: u.prediction,
        })
    }

    /// Writes the rows exactly as loaded.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(&self.header)?;
        for rec in &self.raw {
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}
