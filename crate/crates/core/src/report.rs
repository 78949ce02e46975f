//! Analysis reports and their canonical serializations.
//!
//! JSON output uses a fixed key order (struct field order), two-space
//! indentation, every float written with 17 significant digits in
//! scientific notation, and a trailing newline, so identical inputs give
//! byte-identical files. CSV tables use the same float format.

use std::io;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::policy::PruningPlan;
use crate::score::AvssEntry;
use crate::stats::{LayerStats, StatsConfig};
use crate::trace::ActivationPoint;

/// Formats a float with 17 significant digits, e.g. `2.5000000000000000e-1`.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

struct CanonicalFormatter {
    pretty: PrettyFormatter<'static>,
}

impl Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            writer.write_all(format_float(value).as_bytes())
        } else {
            writer.write_all(b"null")
        }
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_array(writer)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_object(writer)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, writer: &mut W, first: bool) -> io::Result<()> {
        self.pretty.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, writer: &mut W) -> io::Result<()> {
        self.pretty.end_object_value(writer)
    }
}

/// Canonical JSON text of `value`, newline-terminated.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let formatter = CanonicalFormatter {
        pretty: PrettyFormatter::with_indent(b"  "),
    };
    let mut ser = serde_json::Serializer::with_formatter(&mut out, formatter);
    value.serialize(&mut ser).map_err(|e| Error::Format(e.to_string()))?;
    out.push(b'\n');
    String::from_utf8(out).map_err(|e| Error::Format(e.to_string()))
}

pub fn from_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, to_canonical_json(value)?).map_err(|e| Error::file(path, e))
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    from_json(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Analysis settings echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub epsilon: f64,
    pub sparsity_floor: f64,
    pub policy: String,
    /// `rho` or `mass`, depending on the policy.
    pub parameter_name: String,
    pub parameter: f64,
}

impl ReportConfig {
    pub fn stats_config(&self) -> Result<StatsConfig> {
        StatsConfig::new(self.epsilon, self.sparsity_floor)
    }
}

/// One row of the per-layer table: all statistics and the score entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_index: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_dev: f64,
    pub norm_variance: f64,
    pub sparsity: f64,
    pub norm_sparsity: f64,
    pub sparsity_deviation: f64,
    pub avss: f64,
    pub norm_avss: f64,
    pub cumulative_avss: f64,
    pub rank: usize,
}

impl LayerRecord {
    pub fn new(stats: &LayerStats, entry: &AvssEntry) -> Self {
        debug_assert_eq!(stats.layer_index, entry.layer_index);
        LayerRecord {
            layer_index: stats.layer_index,
            mean: stats.mean,
            variance: stats.variance,
            std_dev: stats.std_dev,
            norm_variance: stats.norm_variance,
            sparsity: stats.sparsity,
            norm_sparsity: stats.norm_sparsity,
            sparsity_deviation: stats.sparsity_deviation,
            avss: entry.avss,
            norm_avss: entry.norm_avss,
            cumulative_avss: entry.cumulative_avss,
            rank: entry.rank,
        }
    }

    pub fn entry(&self) -> AvssEntry {
        AvssEntry {
            layer_index: self.layer_index,
            avss: self.avss,
            norm_avss: self.norm_avss,
            cumulative_avss: self.cumulative_avss,
            rank: self.rank,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub tool_version: String,
    pub model_id: String,
    pub activation_point: ActivationPoint,
    pub layer_count: usize,
    pub config: ReportConfig,
    pub layers: Vec<LayerRecord>,
    pub plan: PruningPlan,
}

impl AnalysisReport {
    pub fn entries(&self) -> Vec<AvssEntry> {
        self.layers.iter().map(LayerRecord::entry).collect()
    }

    /// Structural checks on a report read back from disk.
    pub fn check(&self) -> Result<()> {
        if self.layers.len() != self.layer_count || self.layers.is_empty() {
            return Err(Error::Format(format!(
                "report lists {} layers but declares {}",
                self.layers.len(),
                self.layer_count
            )));
        }
        if let Some((i, r)) = self.layers.iter().enumerate().find(|(i, r)| r.layer_index != *i) {
            return Err(Error::Format(format!("report row {i} holds layer {}", r.layer_index)));
        }
        self.plan.check(self.layer_count)
    }
}

pub const LAYER_CSV_HEADER: [&str; 12] = [
    "layer_index",
    "mean",
    "variance",
    "std_dev",
    "norm_variance",
    "sparsity",
    "norm_sparsity",
    "sparsity_deviation",
    "avss",
    "norm_avss",
    "cumulative_avss",
    "rank",
];

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Serializes rows of pre-formatted fields under `header`.
pub fn csv_table<S: AsRef<str>>(header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref())).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// The per-layer table of a report as CSV.
pub fn layers_to_csv(layers: &[LayerRecord]) -> Result<String> {
    csv_table(
        &LAYER_CSV_HEADER,
        layers.iter().map(|r| {
            let mut row = vec![r.layer_index.to_string()];
            row.extend(
                [
                    r.mean,
                    r.variance,
                    r.std_dev,
                    r.norm_variance,
                    r.sparsity,
                    r.norm_sparsity,
                    r.sparsity_deviation,
                    r.avss,
                    r.norm_avss,
                    r.cumulative_avss,
                ]
                .map(format_float),
            );
            row.push(r.rank.to_string());
            row
        }),
    )
}

pub fn layers_from_csv(text: &str) -> Result<Vec<LayerRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(csv_error)?;
    if header.iter().ne(LAYER_CSV_HEADER) {
        return Err(Error::Format(format!("unexpected csv header {header:?}")));
    }
    reader
        .deserialize()
        .map(|row| row.map_err(csv_error))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::make_pruning_plan;

    fn record(i: usize, x: f64) -> LayerRecord {
        LayerRecord {
            layer_index: i,
            mean: -x,
            variance: x * x,
            std_dev: x,
            norm_variance: 0.5,
            sparsity: 0.1 + 0.2,
            norm_sparsity: 1.0 / 3.0,
            sparsity_deviation: 1e-300,
            avss: 1e6,
            norm_avss: 0.5,
            cumulative_avss: (i + 1) as f64 * 0.5,
            rank: 1 - i,
        }
    }

    fn report() -> AnalysisReport {
        let layers = vec![record(0, 0.7), record(1, 3.0e-8)];
        let entries: Vec<AvssEntry> = layers.iter().map(LayerRecord::entry).collect();
        AnalysisReport {
            tool_version: "0.1.0".into(),
            model_id: "fixture".into(),
            activation_point: ActivationPoint::BlockOutput,
            layer_count: 2,
            config: ReportConfig {
                epsilon: 0.01,
                sparsity_floor: 1e-6,
                policy: "lowest-fraction".into(),
                parameter_name: "rho".into(),
                parameter: 0.5,
            },
            layers,
            plan: make_pruning_plan(&entries, 0.5).unwrap(),
        }
    }

    #[test]
    fn floats_have_seventeen_significant_digits() {
        assert_eq!(format_float(0.25), "2.5000000000000000e-1");
        assert_eq!(format_float(1.0), "1.0000000000000000e0");
        assert_eq!(format_float(-1e6), "-1.0000000000000000e6");
        let third = format_float(1.0 / 3.0);
        assert_eq!(third.split('e').next().unwrap().replace(['.', '-'], "").len(), 17);
    }

    #[test]
    fn json_is_canonical_and_round_trips() {
        let r = report();
        let text = to_canonical_json(&r).unwrap();
        assert!(text.ends_with("}\n"));
        assert_eq!(text, to_canonical_json(&r.clone()).unwrap());
        assert!(text.contains("\"epsilon\": 1.0000000000000000e-2"));
        let keys: Vec<usize> = ["tool_version", "model_id", "activation_point", "layer_count", "config", "layers", "plan"]
            .iter()
            .map(|k| text.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let back: AnalysisReport = from_json(&text).unwrap();
        assert_eq!(back, r);
        back.check().unwrap();
    }

    #[test]
    fn csv_round_trips_exactly() {
        let r = report();
        let text = layers_to_csv(&r.layers).unwrap();
        assert!(text.starts_with("layer_index,mean,variance,"));
        assert_eq!(text.lines().count(), 3);
        let back = layers_from_csv(&text).unwrap();
        assert_eq!(back, r.layers);
        for (a, b) in back.iter().zip(&r.layers) {
            assert_eq!(a.sparsity.to_bits(), b.sparsity.to_bits());
        }
    }

    #[test]
    fn wrong_csv_header_is_rejected() {
        assert!(layers_from_csv("a,b\n1,2\n").is_err());
    }

    #[test]
    fn inconsistent_report_fails_check() {
        let mut r = report();
        r.layer_count = 3;
        assert!(r.check().is_err());
        let mut r = report();
        r.layers.swap(0, 1);
        assert!(r.check().is_err());
    }
}
