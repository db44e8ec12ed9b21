//! Report rendering: a markdown table of per-configuration aggregates and
//! dependency-free SVG overlays of original vs reconstructed leads.

use anyhow::{bail, Result};
use ecgrecon::{EcgRecord, LeadId};
use std::collections::BTreeMap;

const NUMERIC_COLUMNS: [&str; 9] = [
    "pcc",
    "rmse",
    "mae_mean",
    "mae_max",
    "dtw",
    "delta_qt_s",
    "delta_qrs_s",
    "r_detect_pct",
    "sqi_avg_qrs",
];

/// Aggregates a metric CSV (one row per record x config x lead) into one
/// markdown table per configuration, leads as rows, mean +/- std per metric.
pub fn metrics_markdown(csv: &str) -> Result<String> {
    let mut lines = csv.lines();
    let header = lines.next().unwrap_or_default();
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() != 2 + NUMERIC_COLUMNS.len() || columns[0] != "config" || columns[1] != "lead"
    {
        bail!("unrecognized metric CSV header: {header:?}");
    }
    // (config, lead) -> per-metric values
    let mut groups: BTreeMap<(String, usize), Vec<Vec<f64>>> = BTreeMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            bail!("bad metric CSV row: {line:?}");
        }
        let lead_ord = LeadId::from_name(cells[1])?.ordinal();
        let entry = groups
            .entry((cells[0].to_string(), lead_ord))
            .or_insert_with(|| vec![Vec::new(); NUMERIC_COLUMNS.len()]);
        for (slot, cell) in entry.iter_mut().zip(&cells[2..]) {
            if let Ok(v) = cell.parse::<f64>() {
                if v.is_finite() {
                    slot.push(v);
                }
            }
        }
    }
    let configs: Vec<String> = {
        let mut seen = Vec::new();
        for (config, _) in groups.keys() {
            if !seen.contains(config) {
                seen.push(config.clone());
            }
        }
        seen
    };
    let mut out = String::from("# Reconstruction metrics\n");
    for config in configs {
        out.push_str(&format!("\n## {config}\n\n"));
        out.push_str("| Lead | PCC | RMSE | MAE | MAE(max) | DTW | dQT (s) | dQRS (s) | %-R | SQI |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for lead in LeadId::ALL {
            let Some(values) = groups.get(&(config.clone(), lead.ordinal())) else {
                continue;
            };
            let cells: Vec<String> = values.iter().map(|v| mean_std(v)).collect();
            out.push_str(&format!("| {} | {} |\n", lead.name(), cells.join(" | ")));
        }
    }
    Ok(out)
}

fn mean_std(values: &[f64]) -> String {
    if values.is_empty() {
        return "-".to_string();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    format!("{:.3}±{:.3}", mean, var.sqrt())
}

/// One SVG with 12 stacked panels: original lead in black, reconstruction
/// in red. Deterministic output for golden-file diffing.
pub fn overlay_svg(original: &EcgRecord, reconstructed: &EcgRecord) -> Result<String> {
    if original.len() != reconstructed.len() {
        bail!(
            "record lengths differ: {} vs {}",
            original.len(),
            reconstructed.len()
        );
    }
    let width = 900.0f64;
    let row_h = 90.0f64;
    let margin = 30.0f64;
    let height = row_h * 12.0 + 2.0 * margin;
    let n = original.len();
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    ));
    for lead in LeadId::ALL {
        let row = lead.ordinal() as f64;
        let y0 = margin + row * row_h + row_h / 2.0;
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{:.1}\" font-size=\"12\" font-family=\"monospace\">{}</text>\n",
            y0 + 4.0,
            lead.name()
        ));
        for (samples, color) in [
            (original.lead(lead), "black"),
            (reconstructed.lead(lead), "red"),
        ] {
            let points: Vec<String> = samples
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let x = margin + (width - 2.0 * margin) * i as f64 / (n - 1).max(1) as f64;
                    let y = y0 - (v as f64) * (row_h * 0.45);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"0.8\" points=\"{}\"/>\n",
                points.join(" ")
            ));
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
