//! Sampled-unit records and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::CovariateSpace;

pub const TRACE_HEADER: [&str; 8] = ["t", "x", "f", "delta", "y", "p_snapshot", "pi_snapshot", "q_at_x"];

/// One sampled unit: covariate, prediction, whether the outcome was bought,
/// the outcome if so, and the design values in force when it was drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    /// 1-based step index.
    pub t: u64,
    pub point: usize,
    pub x: f64,
    pub f: f64,
    pub delta: bool,
    pub y: Option<f64>,
    pub p: f64,
    pub pi: f64,
    pub q: f64,
}

impl ExperimentRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.delta != self.y.is_some() {
            return Err(if self.delta {
                "delta = 1 but y is missing".into()
            } else {
                "delta = 0 but y is present".into()
            });
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(format!("p_snapshot {} is not positive", self.p));
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(format!("pi_snapshot {} outside (0, 1]", self.pi));
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(format!("q_at_x {} is not positive", self.q));
        }
        if !self.x.is_finite() || !self.f.is_finite() || self.y.is_some_and(|y| !y.is_finite()) {
            return Err("non-finite value".into());
        }
        Ok(())
    }

    pub fn delta_f64(&self) -> f64 {
        if self.delta {
            1.0
        } else {
            0.0
        }
    }
}

/// When nuisance fits are refreshed during an adaptive run.
///
/// A refresh at time `s` fits on the first `s` records and governs records
/// `s+1, s+2, ...` until the next refresh. Refreshes happen at
/// `warmup, 2·warmup, 4·warmup, ...` while below `batch`, then at every
/// multiple of `batch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefreshSchedule {
    pub warmup: usize,
    pub batch: usize,
}

impl Default for RefreshSchedule {
    fn default() -> Self {
        RefreshSchedule {
            warmup: 50,
            batch: 1000,
        }
    }
}

impl RefreshSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }

    pub fn is_refresh(&self, s: usize) -> bool {
        if s == 0 {
            return false;
        }
        if s.is_multiple_of(self.batch) {
            return true;
        }
        if self.warmup == 0 || s >= self.batch || !s.is_multiple_of(self.warmup) {
            return false;
        }
        (s / self.warmup).is_power_of_two()
    }

    /// Refresh times `s` with `0 < s < n`, ascending.
    pub fn refresh_times(&self, n: usize) -> Vec<usize> {
        let mut out = Vec::new();
        if self.warmup > 0 {
            let mut s = self.warmup;
            while s < self.batch && s < n {
                out.push(s);
                s *= 2;
            }
        }
        let mut s = self.batch;
        while s < n {
            out.push(s);
            s += self.batch;
        }
        out
    }
}

/// Time-ordered records of one data-collection run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<ExperimentRecord>,
}

impl Trace {
    pub fn new(records: Vec<ExperimentRecord>) -> Result<Self> {
        let trace = Trace { records };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        let mut last = 0u64;
        for (index, r) in self.records.iter().enumerate() {
            if r.t <= last {
                return Err(Error::TraceSchema {
                    index,
                    message: format!("step {} does not increase on {last}", r.t),
                });
            }
            last = r.t;
            r.validate().map_err(|message| Error::TraceSchema { index, message })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.records.iter().filter(|r| r.delta).count()
    }

    /// Whether every record carries the same `(p, π)` at its point.
    pub fn is_fixed_design(&self, n_points: usize) -> bool {
        let mut seen: Vec<Option<(f64, f64)>> = vec![None; n_points];
        for r in &self.records {
            match seen.get_mut(r.point) {
                Some(slot @ None) => *slot = Some((r.p, r.pi)),
                Some(Some(v)) if *v == (r.p, r.pi) => {}
                _ => return false,
            }
        }
        true
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        w.write_record(TRACE_HEADER)?;
        for r in &self.records {
            w.write_record(&[
                r.t.to_string(),
                r.x.to_string(),
                r.f.to_string(),
                u8::from(r.delta).to_string(),
                r.y.map(|y| y.to_string()).unwrap_or_default(),
                r.p.to_string(),
                r.pi.to_string(),
                r.q.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a trace, mapping each `x` to its point in `space`. Violations
    /// are reported with the 0-based record index.
    pub fn read_csv<R: Read>(reader: R, space: &CovariateSpace) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers()?.clone();
        let mut cols = [0usize; 8];
        for (slot, name) in cols.iter_mut().zip(TRACE_HEADER) {
            *slot = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("trace is missing column `{name}`")))?;
        }
        let mut records = Vec::new();
        for (index, row) in rdr.records().enumerate() {
            let row = row?;
            let schema = |message: String| Error::TraceSchema { index, message };
            let cell = |c: usize| row.get(cols[c]).unwrap_or("");
            let num = |c: usize| -> Result<f64> {
                let s = cell(c);
                if s.is_empty() {
                    return Err(if c == 5 || c == 6 {
                        Error::TraceIncomplete(format!("record {index} has no `{}`", TRACE_HEADER[c]))
                    } else {
                        schema(format!("`{}` is empty", TRACE_HEADER[c]))
                    });
                }
                s.parse::<f64>()
                    .map_err(|_| schema(format!("`{}` = {s:?} is not a number", TRACE_HEADER[c])))
            };
            let t = cell(0)
                .parse::<u64>()
                .map_err(|_| schema(format!("`t` = {:?} is not a step index", cell(0))))?;
            let x = num(1)?;
            let point = space
                .locate(x)
                .ok_or_else(|| schema(format!("x = {x} is outside the covariate space")))?;
            let delta = match cell(3) {
                "1" => true,
                "0" => false,
                other => return Err(schema(format!("`delta` = {other:?} is not 0 or 1"))),
            };
            let y = if cell(4).is_empty() { None } else { Some(num(4)?) };
            let record = ExperimentRecord {
                t,
                point,
                x,
                f: num(2)?,
                delta,
                y,
                p: num(5)?,
                pi: num(6)?,
                q: num(7)?,
            };
            records.push(record);
        }
        Trace::new(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::make_grid_space;

    fn rec(t: u64, x: f64, delta: bool) -> ExperimentRecord {
        ExperimentRecord {
            t,
            point: if x < 0.0 { 0 } else { 1 },
            x,
            f: 0.25,
            delta,
            y: delta.then_some(1.5),
            p: 0.5,
            pi: 0.5,
            q: 0.5,
        }
    }

    #[test]
    fn schedule_doubles_then_batches() {
        let s = RefreshSchedule { warmup: 50, batch: 1000 };
        assert_eq!(s.refresh_times(2500), vec![50, 100, 200, 400, 800, 1000, 2000]);
        for t in 1..5000 {
            assert_eq!(s.is_refresh(t), s.refresh_times(5001).contains(&t), "{t}");
        }
        let plain = RefreshSchedule { warmup: 0, batch: 100 };
        assert_eq!(plain.refresh_times(301), vec![100, 200, 300]);
    }

    #[test]
    fn csv_round_trip() {
        let space = make_grid_space(-1.0, 1.0, 2).unwrap();
        let trace = Trace::new(vec![rec(1, -0.3, true), rec(2, 0.7, false)]).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x,f,delta,y,p_snapshot,pi_snapshot,q_at_x\n1,-0.3,0.25,1,1.5,"));
        assert!(text.contains("\n2,0.7,0.25,0,,0.5,0.5,0.5\n"));
        let back = Trace::read_csv(&buf[..], &space).unwrap();
        assert_eq!(back, trace);
    }

    #[test]
    fn schema_errors_name_the_record() {
        let space = make_grid_space(-1.0, 1.0, 2).unwrap();
        let text = "t,x,f,delta,y,p_snapshot,pi_snapshot,q_at_x\n1,0.1,0,1,2,0.5,1,0.5\n2,0.1,0,0,3,0.5,1,0.5\n";
        match Trace::read_csv(text.as_bytes(), &space) {
            Err(Error::TraceSchema { index: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        let missing = "t,x,f,delta,y,p_snapshot,pi_snapshot,q_at_x\n1,0.1,0,1,2,,1,0.5\n";
        assert!(matches!(Trace::read_csv(missing.as_bytes(), &space), Err(Error::TraceIncomplete(_))));
        let order = "t,x,f,delta,y,p_snapshot,pi_snapshot,q_at_x\n2,0.1,0,1,2,0.5,1,0.5\n2,0.1,0,1,2,0.5,1,0.5\n";
        assert!(matches!(Trace::read_csv(order.as_bytes(), &space), Err(Error::TraceSchema { index: 1, .. })));
    }

    #[test]
    fn fixed_design_detection() {
        let mut trace = Trace::new(vec![rec(1, -0.3, true), rec(2, 0.7, false), rec(3, -0.5, true)]).unwrap();
        assert!(trace.is_fixed_design(2));
        trace.records[2].pi = 0.25;
        assert!(!trace.is_fixed_design(2));
    }
}
