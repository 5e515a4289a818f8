//! Figure rendering: grouped bars over the ablation grid and fusion-weight
//! trajectories, written as SVG so output is plain text and reproducible.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use plotters::style::FontTransform;

use crate::error::{PtaError, Result};
use crate::eval_report::{read_metrics_csv, read_metrics_json, summarize, MetricsRow};

fn render_err<E: std::fmt::Display>(e: E) -> PtaError {
    PtaError::Render(e.to_string())
}

const SERIES_COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

/// One grouped bar chart per metric found in `rows`: one bar group per
/// modality subset, one bar per variant, bar height the cross-seed median.
/// Returns file paths in metric-name order.
pub fn render_metric_bars(rows: &[MetricsRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(PtaError::invalid("no metric rows to plot"));
    }
    std::fs::create_dir_all(out_dir)?;
    let summaries = summarize(rows);
    let metrics: BTreeSet<&str> = summaries.iter().map(|s| s.metric_name.as_str()).collect();
    let mut files = Vec::new();
    for metric in metrics {
        let slice: Vec<_> = summaries.iter().filter(|s| s.metric_name == metric).collect();
        let variants: Vec<&str> = slice
            .iter()
            .map(|s| s.variant.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut subsets: Vec<Vec<String>> = slice
            .iter()
            .map(|s| s.subset.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        subsets.sort_by_key(|s| (s.len(), s.join("+")));

        let path = out_dir.join(format!("bars_{metric}.svg"));
        draw_bar_chart(metric, &slice, &variants, &subsets, &path)?;
        files.push(path);
    }
    Ok(files)
}

fn draw_bar_chart(
    metric: &str,
    slice: &[&crate::eval_report::SummaryRow],
    variants: &[&str],
    subsets: &[Vec<String>],
    path: &Path,
) -> Result<()> {
    let y_max = slice
        .iter()
        .map(|s| s.median)
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.2;
    let root = SVGBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{metric} by modality subset"), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(24)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..subsets.len() as f64, 0.0..y_max)
        .map_err(render_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(0)
        .y_desc(metric)
        .label_style(("sans-serif", 13))
        .draw()
        .map_err(render_err)?;

    let bar_width = 0.8 / variants.len() as f64;
    for (j, variant) in variants.iter().enumerate() {
        let color = SERIES_COLORS[j % SERIES_COLORS.len()];
        let bars: Vec<Rectangle<(f64, f64)>> = subsets
            .iter()
            .enumerate()
            .filter_map(|(i, subset)| {
                slice
                    .iter()
                    .find(|s| s.variant == *variant && &s.subset == subset)
                    .map(|s| {
                        let x0 = i as f64 + 0.1 + j as f64 * bar_width;
                        Rectangle::new([(x0, 0.0), (x0 + bar_width, s.median)], color.filled())
                    })
            })
            .collect();
        chart
            .draw_series(bars)
            .map_err(render_err)?
            .label(*variant)
            .legend(move |(x, y)| Rectangle::new([(x, y - 5), (x + 12, y + 5)], color.filled()));
    }
    let label_font = ("sans-serif", 13)
        .into_font()
        .transform(FontTransform::Rotate90)
        .color(&BLACK);
    chart
        .draw_series(subsets.iter().enumerate().map(|(i, subset)| {
            Text::new(subset.join("+"), (i as f64 + 0.45, y_max * 0.98), label_font.clone())
        }))
        .map_err(render_err)?;
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(render_err)?;
    root.present().map_err(render_err)?;
    Ok(())
}

/// Extracts the step column and the normalized-weight columns (`w_*`) from a
/// weight-trajectory CSV.
pub fn parse_weight_csv(text: &str) -> Result<(Vec<u64>, Vec<(String, Vec<f64>)>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| PtaError::CorruptArtifact("weight log is empty".to_string()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"step") {
        return Err(PtaError::CorruptArtifact(
            "weight log must start with a 'step' column".to_string(),
        ));
    }
    let picked: Vec<(usize, String)> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with("w_"))
        .map(|(i, c)| (i, c.to_string()))
        .collect();
    if picked.is_empty() {
        return Err(PtaError::CorruptArtifact("weight log has no w_* columns".to_string()));
    }
    let mut steps = Vec::new();
    let mut series: Vec<(String, Vec<f64>)> =
        picked.iter().map(|(_, n)| (n.clone(), Vec::new())).collect();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(PtaError::CorruptArtifact(format!(
                "weight log row has {} fields, header has {}",
                fields.len(),
                cols.len()
            )));
        }
        steps.push(
            fields[0]
                .parse()
                .map_err(|e| PtaError::CorruptArtifact(format!("bad step value: {e}")))?,
        );
        for (k, (i, _)) in picked.iter().enumerate() {
            series[k].1.push(
                fields[*i]
                    .parse()
                    .map_err(|e| PtaError::CorruptArtifact(format!("bad weight value: {e}")))?,
            );
        }
    }
    if steps.is_empty() {
        return Err(PtaError::CorruptArtifact("weight log has no data rows".to_string()));
    }
    Ok((steps, series))
}

/// Line chart of fusion weights over training steps.
pub fn render_weight_lines(
    steps: &[u64],
    series: &[(String, Vec<f64>)],
    path: &Path,
) -> Result<()> {
    if steps.is_empty() || series.is_empty() {
        return Err(PtaError::invalid("nothing to plot"));
    }
    let x_max = *steps.last().expect("non-empty") as f64;
    let root = SVGBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(render_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("fusion weights over training", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0.0..x_max.max(1.0), 0.0..1.0)
        .map_err(render_err)?;
    chart
        .configure_mesh()
        .x_desc("inner step")
        .y_desc("weight")
        .label_style(("sans-serif", 13))
        .draw()
        .map_err(render_err)?;
    for (j, (name, values)) in series.iter().enumerate() {
        let color = SERIES_COLORS[j % SERIES_COLORS.len()];
        chart
            .draw_series(LineSeries::new(
                steps.iter().zip(values).map(|(s, v)| (*s as f64, *v)),
                color.stroke_width(2),
            ))
            .map_err(render_err)?
            .label(name.clone())
            .legend(move |(x, y)| {
                PathElement::new(vec![(x, y), (x + 14, y)], color.stroke_width(2))
            });
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.85))
        .draw()
        .map_err(render_err)?;
    root.present().map_err(render_err)?;
    Ok(())
}

/// What a plotting pass produced.
#[derive(Debug, Default)]
pub struct PlotSummary {
    pub bar_files: Vec<PathBuf>,
    pub trajectory_files: Vec<PathBuf>,
    /// Runs skipped with the reason, e.g. no weight log was written.
    pub skipped: Vec<String>,
}

/// Renders every figure implied by a report table and, optionally, the weight
/// trajectories of all runs under `runs_dir`. Runs without a usable weight
/// log are recorded in `skipped` rather than failing the pass.
pub fn plot_report(
    table_path: &Path,
    runs_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<PlotSummary> {
    std::fs::create_dir_all(out_dir)?;
    let rows = if table_path.extension().and_then(|e| e.to_str()) == Some("json") {
        read_metrics_json(table_path)?
    } else {
        read_metrics_csv(table_path)?
    };
    let mut summary = PlotSummary {
        bar_files: render_metric_bars(&rows, out_dir)?,
        ..PlotSummary::default()
    };
    if let Some(runs) = runs_dir {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(runs)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for run in entries {
            let name = run
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("run")
                .to_string();
            let log = run.join("weights.csv");
            if !log.exists() {
                summary.skipped.push(format!("{name}: no weights.csv"));
                continue;
            }
            let text = std::fs::read_to_string(&log)?;
            match parse_weight_csv(&text) {
                Ok((steps, series)) => {
                    let path = out_dir.join(format!("weights_{name}.svg"));
                    render_weight_lines(&steps, &series, &path)?;
                    summary.trajectory_files.push(path);
                }
                Err(e) => summary.skipped.push(format!("{name}: {e}")),
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval_report::write_metrics_csv;
    use crate::trainer::{write_weight_log_csv, WeightRow};

    fn sample_rows() -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for (v, base) in [("full", 0.2), ("no_diff", 0.3), ("no_meta", 0.5)] {
            for seed in 0..2u64 {
                for (subset, bump) in [
                    (vec!["cam".to_string()], 0.1),
                    (vec!["mic".to_string()], 0.2),
                    (vec!["cam".to_string(), "mic".to_string()], 0.0),
                ] {
                    rows.push(MetricsRow::new(
                        v,
                        seed,
                        subset,
                        "mean_euclidean_error",
                        base + bump + seed as f64 * 0.01,
                        0.5,
                    ));
                }
            }
        }
        rows
    }

    #[test]
    fn bar_chart_renders_deterministic_svg() {
        let dir = tempfile::tempdir().unwrap();
        let rows = sample_rows();
        let a = render_metric_bars(&rows, &dir.path().join("a")).unwrap();
        let b = render_metric_bars(&rows, &dir.path().join("b")).unwrap();
        assert_eq!(a.len(), 1);
        let bytes_a = std::fs::read(&a[0]).unwrap();
        let bytes_b = std::fs::read(&b[0]).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let text = String::from_utf8(bytes_a).unwrap();
        assert!(text.contains("<svg"));
        assert!(text.trim_end().ends_with("</svg>"));
        assert!(text.contains("cam+mic"));
    }

    #[test]
    fn empty_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(render_metric_bars(&[], dir.path()).is_err());
    }

    #[test]
    fn weight_csv_written_by_the_trainer_parses_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.csv");
        let rows = vec![
            WeightRow { step: 50, logits: vec![0.1, -0.1], weights: vec![0.55, 0.45], l_outer: 1.5 },
            WeightRow { step: 100, logits: vec![0.3, -0.3], weights: vec![0.64, 0.36], l_outer: 1.2 },
        ];
        let names = vec!["cam".to_string(), "mic".to_string()];
        write_weight_log_csv(&path, &rows, &names).unwrap();
        let (steps, series) = parse_weight_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(steps, vec![50, 100]);
        assert_eq!(series.len(), 2);
        assert_eq!(series[0].0, "w_1");
        assert_eq!(series[0].1, vec![0.55, 0.64]);
        assert_eq!(series[1].1, vec![0.45, 0.36]);
    }

    #[test]
    fn report_pass_skips_runs_without_weight_logs() {
        let dir = tempfile::tempdir().unwrap();
        let table = dir.path().join("table.csv");
        write_metrics_csv(&table, &sample_rows()).unwrap();

        let runs = dir.path().join("runs");
        let with_log = runs.join("full_s0");
        let without_log = runs.join("no_meta_s0");
        std::fs::create_dir_all(&with_log).unwrap();
        std::fs::create_dir_all(&without_log).unwrap();
        let rows = vec![WeightRow {
            step: 50,
            logits: vec![0.2, -0.2],
            weights: vec![0.6, 0.4],
            l_outer: 1.0,
        }];
        let names = vec!["cam".to_string(), "mic".to_string()];
        write_weight_log_csv(&with_log.join("weights.csv"), &rows, &names).unwrap();

        let out = dir.path().join("figs");
        let summary = plot_report(&table, Some(&runs), &out).unwrap();
        assert_eq!(summary.bar_files.len(), 1);
        assert_eq!(summary.trajectory_files.len(), 1);
        assert_eq!(summary.skipped, vec!["no_meta_s0: no weights.csv".to_string()]);
        assert!(out.join("weights_full_s0.svg").exists());
    }
}
