//! Result tables: subset enumeration, metric rows, CSV/JSON emission, and
//! aggregation.
//!
//! Metric values are quantized to four decimal places when a row is
//! constructed, which makes emission and parsing lossless in both formats.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PtaError, Result};

/// Every non-empty subset of the modalities, smallest first, lexicographic
/// within a size. Names inside a subset are sorted.
pub fn enumerate_subsets(modalities: &[String]) -> Vec<Vec<String>> {
    let mut sorted: Vec<String> = modalities.to_vec();
    sorted.sort();
    let m = sorted.len();
    let mut out: Vec<Vec<String>> = Vec::with_capacity((1usize << m) - 1);
    for bits in 1u32..(1u32 << m) {
        let subset: Vec<String> = (0..m)
            .filter(|i| bits & (1 << i) != 0)
            .map(|i| sorted[i].clone())
            .collect();
        out.push(subset);
    }
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out
}

/// Rounds to four decimal places.
pub fn quantize4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// One evaluation result: a variant evaluated on one modality subset under
/// one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub variant: String,
    pub seed: u64,
    pub subset: Vec<String>,
    pub metric_name: String,
    pub metric_value: f64,
    pub runtime_s: f64,
}

impl MetricsRow {
    pub fn new(
        variant: impl Into<String>,
        seed: u64,
        subset: Vec<String>,
        metric_name: impl Into<String>,
        metric_value: f64,
        runtime_s: f64,
    ) -> Self {
        MetricsRow {
            variant: variant.into(),
            seed,
            subset,
            metric_name: metric_name.into(),
            metric_value: quantize4(metric_value),
            runtime_s: quantize4(runtime_s),
        }
    }

    pub fn subset_key(&self) -> String {
        self.subset.join("+")
    }
}

/// Whether larger metric values are better for this metric.
pub fn higher_is_better(metric_name: &str) -> bool {
    metric_name == "accuracy"
}

const CSV_HEADER: &str = "variant,seed,subset,metric_name,metric_value,runtime_s";

/// Renders rows as CSV text. Emission is deterministic: parsing the output
/// and emitting again reproduces it byte for byte.
pub fn to_csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4}\n",
            r.variant,
            r.seed,
            r.subset_key(),
            r.metric_name,
            r.metric_value,
            r.runtime_s
        ));
    }
    out
}

/// Parses CSV text produced by [`to_csv_string`].
pub fn from_csv_string(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(PtaError::CorruptArtifact(format!(
                "bad metrics header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(PtaError::CorruptArtifact(format!(
                "metrics line {} has {} fields",
                ln + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| PtaError::CorruptArtifact(format!("bad number '{s}': {e}")))
        };
        rows.push(MetricsRow {
            variant: fields[0].to_string(),
            seed: fields[1]
                .parse::<u64>()
                .map_err(|e| PtaError::CorruptArtifact(format!("bad seed '{}': {e}", fields[1])))?,
            subset: fields[2].split('+').map(|s| s.to_string()).collect(),
            metric_name: fields[3].to_string(),
            metric_value: parse_f(fields[4])?,
            runtime_s: parse_f(fields[5])?,
        });
    }
    Ok(rows)
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, to_csv_string(rows))?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    from_csv_string(&std::fs::read_to_string(path)?)
}

pub fn write_metrics_json(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_metrics_json(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `table.csv`, its field-for-field JSON mirror `table.json`, the
/// seed-aggregated `summary.csv`, and the per-variant `best_counts.json`.
pub fn emit_report(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_metrics_csv(&dir.join("table.csv"), rows)?;
    write_metrics_json(&dir.join("table.json"), rows)?;
    let summaries = summarize(rows);
    write_summary_csv(&dir.join("summary.csv"), &summaries)?;
    let counts = best_counts(rows);
    std::fs::write(dir.join("best_counts.json"), serde_json::to_string_pretty(&counts)?)?;
    Ok(())
}

/// Linear-interpolation quantile of already-sorted values.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    assert!((0.0..=1.0).contains(&p));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("non-comparable metric value"));
    quantile_sorted(&s, 0.5)
}

/// Interquartile range with linear-interpolation quantiles.
pub fn iqr(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).expect("non-comparable metric value"));
    quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
}

/// Seed-aggregated view of one (variant, subset) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub subset: Vec<String>,
    pub metric_name: String,
    pub n_seeds: usize,
    pub median: f64,
    pub iqr: f64,
}

/// Groups rows by (variant, subset) and aggregates over seeds.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, Vec<String>, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variant.clone(), r.subset.clone(), r.metric_name.clone()))
            .or_default()
            .push(r.metric_value);
    }
    groups
        .into_iter()
        .map(|((variant, subset, metric_name), values)| SummaryRow {
            variant,
            subset,
            metric_name,
            n_seeds: values.len(),
            median: quantize4(median(&values)),
            iqr: quantize4(iqr(&values)),
        })
        .collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from("variant,subset,metric_name,n_seeds,median,iqr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4}\n",
            r.variant,
            r.subset.join("+"),
            r.metric_name,
            r.n_seeds,
            r.median,
            r.iqr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// For every subset, the variant whose seed-median metric is best (smallest
/// for errors, largest for accuracy); ties go to the lexicographically first
/// variant name. Returns per-variant win counts including zero entries.
pub fn best_counts(rows: &[MetricsRow]) -> BTreeMap<String, usize> {
    let summaries = summarize(rows);
    let mut variants: Vec<String> = summaries.iter().map(|s| s.variant.clone()).collect();
    variants.sort();
    variants.dedup();
    let mut by_subset: BTreeMap<Vec<String>, Vec<&SummaryRow>> = BTreeMap::new();
    for s in &summaries {
        by_subset.entry(s.subset.clone()).or_default().push(s);
    }
    let mut counts: BTreeMap<String, usize> =
        variants.iter().map(|v| (v.clone(), 0)).collect();
    for (_, cell) in by_subset {
        let mut best: Option<&SummaryRow> = None;
        for s in cell {
            best = Some(match best {
                None => s,
                Some(b) => {
                    let better = if higher_is_better(&s.metric_name) {
                        s.median > b.median
                    } else {
                        s.median < b.median
                    };
                    if better || (s.median == b.median && s.variant < b.variant) {
                        s
                    } else {
                        b
                    }
                }
            });
        }
        if let Some(b) = best {
            *counts.get_mut(&b.variant).expect("variant indexed above") += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn subset_counts_match_powerset_size() {
        assert_eq!(enumerate_subsets(&names(&["d"])).len(), 1);
        assert_eq!(enumerate_subsets(&names(&["a", "b", "c"])).len(), 7);
        assert_eq!(enumerate_subsets(&names(&["a", "b", "c", "d"])).len(), 15);
    }

    #[test]
    fn subsets_are_ordered_by_size_then_lexicographically() {
        let got = enumerate_subsets(&names(&["wifi", "depth", "lidar"]));
        let want = vec![
            names(&["depth"]),
            names(&["lidar"]),
            names(&["wifi"]),
            names(&["depth", "lidar"]),
            names(&["depth", "wifi"]),
            names(&["lidar", "wifi"]),
            names(&["depth", "lidar", "wifi"]),
        ];
        assert_eq!(got, want);
    }

    #[test]
    fn quantization_rounds_to_four_places() {
        assert_eq!(quantize4(0.123449), 0.1234);
        assert_eq!(quantize4(0.123450001), 0.1235);
        assert_eq!(quantize4(2.0), 2.0);
    }

    fn sample_rows() -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for variant in ["full", "no_diff", "no_meta"] {
            for seed in 0..3u64 {
                for subset in enumerate_subsets(&names(&["depth", "lidar", "wifi"])) {
                    let bump = subset.len() as f64 * 0.01 + seed as f64 * 0.001;
                    let v = match variant {
                        "full" => 0.30 - bump,
                        "no_diff" => 0.40 - bump,
                        _ => 0.50 - bump,
                    };
                    rows.push(MetricsRow::new(
                        variant,
                        seed,
                        subset,
                        "mean_euclidean_error",
                        v,
                        1.5,
                    ));
                }
            }
        }
        rows
    }

    #[test]
    fn csv_round_trip_is_byte_identical() {
        let rows = sample_rows();
        let text = to_csv_string(&rows);
        let parsed = from_csv_string(&text).unwrap();
        assert_eq!(parsed, rows);
        assert_eq!(to_csv_string(&parsed), text);
    }

    #[test]
    fn json_mirror_round_trips_field_for_field() {
        let rows = sample_rows();
        let text = serde_json::to_string(&rows).unwrap();
        let parsed: Vec<MetricsRow> = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, rows);
        assert_eq!(serde_json::to_string(&parsed).unwrap(), text);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = sample_rows();
        emit_report(dir.path(), &rows).unwrap();
        assert_eq!(read_metrics_csv(&dir.path().join("table.csv")).unwrap(), rows);
        assert_eq!(read_metrics_json(&dir.path().join("table.json")).unwrap(), rows);
        assert!(dir.path().join("summary.csv").exists());
    }

    #[test]
    fn corrupt_csv_is_rejected() {
        assert!(from_csv_string("nonsense\n").is_err());
        let text = format!("{CSV_HEADER}\nfull,notanumber,depth,accuracy,0.5,1.0\n");
        assert!(from_csv_string(&text).is_err());
    }

    #[test]
    fn median_and_iqr_reference_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0]), 1.5);
        assert_eq!(iqr(&[5.0]), 0.0);
    }

    #[test]
    fn best_counts_pick_smallest_error_per_subset() {
        let rows = sample_rows();
        let counts = best_counts(&rows);
        assert_eq!(counts["full"], 7);
        assert_eq!(counts["no_diff"], 0);
        assert_eq!(counts["no_meta"], 0);
    }

    #[test]
    fn best_counts_break_ties_lexicographically_and_respect_direction() {
        let subset = names(&["a"]);
        let rows = vec![
            MetricsRow::new("zeta", 0, subset.clone(), "accuracy", 0.9, 1.0),
            MetricsRow::new("alpha", 0, subset.clone(), "accuracy", 0.9, 1.0),
            MetricsRow::new("mid", 0, subset.clone(), "accuracy", 0.95, 1.0),
        ];
        let counts = best_counts(&rows);
        assert_eq!(counts["mid"], 1);
        let rows = vec![
            MetricsRow::new("zeta", 0, subset.clone(), "accuracy", 0.9, 1.0),
            MetricsRow::new("alpha", 0, subset, "accuracy", 0.9, 1.0),
        ];
        let counts = best_counts(&rows);
        assert_eq!(counts["alpha"], 1);
        assert_eq!(counts["zeta"], 0);
    }
}
