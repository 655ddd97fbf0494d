use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// NDMS results at one horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizonResult {
    pub frames: usize,
    /// Per-frame score averaged over samples.
    pub curve: Vec<f64>,
    /// Mean over samples of each sample's mean score.
    pub mean: f64,
    /// Standard deviation of the per-sample means.
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub fid: f64,
    pub diversity: f64,
    pub diversity_pairs: usize,
    pub mmodality: f64,
    pub r_precision: [f64; 3],
}

/// Evaluation output: config echo, horizon curves and scalar metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config: BTreeMap<String, String>,
    pub horizons: Vec<HorizonResult>,
    pub flatness: f64,
    pub metrics: Option<MetricSummary>,
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl EvalReport {
    /// Checks that every scalar is finite.
    pub fn validate(&self) -> Result<()> {
        let mut scalars = vec![self.flatness];
        for h in &self.horizons {
            scalars.extend([h.mean, h.std]);
            scalars.extend(&h.curve);
        }
        if let Some(m) = &self.metrics {
            scalars.extend([m.fid, m.diversity, m.mmodality]);
            scalars.extend(m.r_precision);
        }
        if scalars.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("eval report"))
        }
    }

    /// `key = value` lines; curves are comma-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            writeln!(out, "config.{k} = {v}").unwrap();
        }
        for h in &self.horizons {
            let key = format!("ndms.{}", h.frames);
            writeln!(out, "{key}.mean = {}", h.mean).unwrap();
            writeln!(out, "{key}.std = {}", h.std).unwrap();
            writeln!(out, "{key}.curve = {}", join(&h.curve)).unwrap();
        }
        writeln!(out, "ndms.flatness = {}", self.flatness).unwrap();
        if let Some(m) = &self.metrics {
            writeln!(out, "fid = {}", m.fid).unwrap();
            writeln!(out, "diversity = {}", m.diversity).unwrap();
            writeln!(out, "diversity.pairs = {}", m.diversity_pairs).unwrap();
            writeln!(out, "mmodality = {}", m.mmodality).unwrap();
            for (k, v) in m.r_precision.iter().enumerate() {
                writeln!(out, "r_precision.top{} = {v}", k + 1).unwrap();
            }
        }
        out
    }

    /// `horizon,frame,ndms` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,frame,ndms\n");
        for h in &self.horizons {
            for (i, v) in h.curve.iter().enumerate() {
                writeln!(out, "{},{},{}", h.frames, i, v).unwrap();
            }
        }
        out
    }

    /// Inverse of [`EvalReport::to_text`] for the scalar entries.
    pub fn parse_scalars(text: &str) -> BTreeMap<String, String> {
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}
