//! File formats: per-run CSV, aggregate JSON and the JSONL trajectory and
//! frame files.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use tpmb_core::filter::TrajectoryEstimate;
use tpmb_core::metrics::TrajectoryRecord;
use tpmb_core::models::{Measurement, ObjectState};

use crate::run::{RunReport, StepScore};
use crate::scenario::GroundTruth;
use crate::HarnessError;

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    metric: f64,
    loc: f64,
    miss: f64,
    #[serde(rename = "false")]
    false_: f64,
    switch: f64,
}

/// Columns `step,metric,loc,miss,false,switch`.
pub fn write_series_csv<W: Write>(out: W, series: &[StepScore]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for s in series {
        w.serialize(CsvRow {
            step: s.step,
            metric: s.total,
            loc: s.localization,
            miss: s.miss,
            false_: s.false_,
            switch: s.switch,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv<R: std::io::Read>(input: R) -> Result<Vec<StepScore>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            Ok(StepScore {
                step: row.step,
                total: row.metric,
                localization: row.loc,
                miss: row.miss,
                false_: row.false_,
                switch: row.switch,
            })
        })
        .collect()
}

pub fn write_report_csv<W: Write>(out: W, report: &RunReport) -> Result<(), HarnessError> {
    write_series_csv(out, &report.series)
}

/// One trajectory per line. `step` is the filter step that reported the
/// estimate and is absent for ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub id: String,
    pub start: usize,
    pub states: Vec<ObjectState>,
}

impl TrajectoryLine {
    pub fn estimate(step: Option<usize>, e: &TrajectoryEstimate) -> Self {
        Self { step, id: e.id.to_string(), start: e.start, states: e.states.clone() }
    }

    pub fn record(&self) -> TrajectoryRecord {
        TrajectoryRecord { start: self.start, states: self.states.clone() }
    }
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>, HarnessError> {
    let mut items = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(
            serde_json::from_str(&line).map_err(|e| HarnessError::Input(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(items)
}

pub fn truth_lines(truth: &GroundTruth) -> Vec<TrajectoryLine> {
    truth
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| TrajectoryLine { step: None, id: i.to_string(), start: t.start, states: t.states.clone() })
        .collect()
}

pub fn truth_from_lines(lines: &[TrajectoryLine], horizon: Option<usize>) -> Result<GroundTruth, HarnessError> {
    if let Some(l) = lines.iter().find(|l| l.states.is_empty()) {
        return Err(HarnessError::Input(format!("truth trajectory {} has no states", l.id)));
    }
    let trajectories: Vec<TrajectoryRecord> = lines.iter().map(TrajectoryLine::record).collect();
    let last = trajectories.iter().map(|t| t.start + t.states.len() - 1).max().unwrap_or(0);
    Ok(GroundTruth { trajectories, horizon: horizon.unwrap_or(last) })
}

/// Estimate sets grouped by step, in increasing step order. Lines without a
/// step are assigned to `default_step`.
pub fn group_by_step(lines: &[TrajectoryLine], default_step: usize) -> Vec<(usize, Vec<TrajectoryRecord>)> {
    let mut groups: std::collections::BTreeMap<usize, Vec<TrajectoryRecord>> = Default::default();
    for l in lines {
        groups.entry(l.step.unwrap_or(default_step)).or_default().push(l.record());
    }
    groups.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameLine {
    pub step: usize,
    pub z: Vec<[f64; 2]>,
}

pub fn frame_lines(frames: &[Vec<Measurement>]) -> Vec<FrameLine> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| FrameLine { step: i + 1, z: f.iter().map(|z| [z.x, z.y]).collect() })
        .collect()
}

/// Frames must cover steps `1..=K` in order.
pub fn frames_from_lines(lines: &[FrameLine]) -> Result<Vec<Vec<Measurement>>, HarnessError> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if l.step != i + 1 {
                return Err(HarnessError::Input(format!("frame {} has step {}, expected {}", i + 1, l.step, i + 1)));
            }
            Ok(l.z.iter().map(|p| Measurement::new(p[0], p[1])).collect())
        })
        .collect()
}
