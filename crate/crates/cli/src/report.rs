//! Figure emission: renders the pipeline's CSV outputs as static SVG plots.
//!
//! Every figure `figures/NAME.svg` is drawn from an in-memory series table
//! that is also written verbatim to `figures/NAME.csv`, so each figure has
//! a sibling CSV with exactly the plotted data.

use std::path::{Path, PathBuf};

use plotters::prelude::*;

use xfrn_core::error::{Error, Result};

use crate::pipeline::Ctx;

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

enum FigureKind {
    Lines,
    Points,
    Bars,
}

struct Figure {
    name: String,
    title: String,
    x_label: String,
    y_label: String,
    kind: FigureKind,
    series: Vec<Series>,
}

impl Figure {
    fn data_csv(&self) -> String {
        let mut s = String::from("series,x,y\n");
        for series in &self.series {
            for (x, y) in &series.points {
                s.push_str(&format!("{},{x},{y}\n", series.label));
            }
        }
        s
    }
}

fn render(figure: &Figure, dir: &Path) -> Result<PathBuf> {
    let svg_path = dir.join(format!("{}.svg", figure.name));
    let csv_path = dir.join(format!("{}.csv", figure.name));
    std::fs::write(&csv_path, figure.data_csv()).map_err(|e| Error::Io {
        path: csv_path.display().to_string(),
        source: e,
    })?;

    let points: Vec<(f64, f64)> = figure
        .series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .collect();
    if points.is_empty() {
        return Err(Error::EmptyInput(format!(
            "figure '{}' has no data",
            figure.name
        )));
    }
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &points {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let y_pad = (y_max - y_min) * 0.05;

    let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
        let root = SVGBackend::new(&svg_path, (800, 500)).into_drawing_area();
        root.fill(&WHITE)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&figure.title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(55)
            .build_cartesian_2d(x_min..x_max, (y_min - y_pad)..(y_max + y_pad))?;
        chart
            .configure_mesh()
            .x_desc(&figure.x_label)
            .y_desc(&figure.y_label)
            .draw()?;
        for (i, series) in figure.series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            match figure.kind {
                FigureKind::Lines => {
                    chart
                        .draw_series(LineSeries::new(series.points.iter().copied(), &color))?
                        .label(series.label.clone())
                        .legend(move |(x, y)| {
                            PathElement::new(vec![(x, y), (x + 14, y)], color.stroke_width(2))
                        });
                }
                FigureKind::Points => {
                    chart
                        .draw_series(
                            series
                                .points
                                .iter()
                                .map(|&(x, y)| Circle::new((x, y), 3, color.filled())),
                        )?
                        .label(series.label.clone())
                        .legend(move |(x, y)| Circle::new((x + 7, y), 3, color.filled()));
                }
                FigureKind::Bars => {
                    let width = 0.8 / figure.series.len() as f64;
                    let offset = i as f64 * width - 0.4;
                    chart
                        .draw_series(series.points.iter().map(|&(x, y)| {
                            Rectangle::new(
                                [(x + offset, 0.0), (x + offset + width, y)],
                                color.filled(),
                            )
                        }))?
                        .label(series.label.clone())
                        .legend(move |(x, y)| {
                            Rectangle::new([(x, y - 4), (x + 10, y + 4)], color.filled())
                        });
                }
            }
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()?;
        root.present()?;
        Ok(())
    };
    draw().map_err(|e| Error::Config(format!("figure '{}': {e}", figure.name)))?;
    Ok(svg_path)
}

/// Parsed row of a curve CSV (layer,value,metric,language_pair,k,threshold,condition).
struct CurveRow {
    layer: f64,
    value: Option<f64>,
    metric: String,
    pair: String,
    threshold: String,
    condition: String,
}

fn read_curve_csv(path: &Path) -> Result<Vec<CurveRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("layer,") || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() < 7 {
            continue;
        }
        rows.push(CurveRow {
            layer: cols[0].parse().unwrap_or(f64::NAN),
            value: cols[1].parse().ok(),
            metric: cols[2].to_string(),
            pair: cols[3].to_string(),
            threshold: cols[5].to_string(),
            condition: cols[6].to_string(),
        });
    }
    Ok(rows)
}

fn series_by<F: Fn(&CurveRow) -> Option<String>>(rows: &[CurveRow], key: F) -> Vec<Series> {
    let mut map: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
        std::collections::BTreeMap::new();
    for row in rows {
        let Some(label) = key(row) else { continue };
        if let Some(v) = row.value {
            map.entry(label).or_default().push((row.layer, v));
        }
    }
    map.into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            Series { label, points }
        })
        .collect()
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("figure")
        .to_string()
}

fn list_csvs(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("");
            if name.starts_with(prefix) && name.ends_with(".csv") {
                out.push(path);
            }
        }
    }
    out.sort();
    out
}

pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let fig_dir = ctx.out.join("figures");
    std::fs::create_dir_all(&fig_dir).map_err(|e| Error::Io {
        path: fig_dir.display().to_string(),
        source: e,
    })?;
    let stats_dir = ctx.out.join("stats");
    let mut figures = Vec::new();

    // per-pair similarity gaps and intervention before/after curves
    for path in list_csvs(&stats_dir, "similarity_") {
        let rows = read_curve_csv(&path)?;
        figures.push(Figure {
            name: stem_of(&path),
            title: format!("Similarity across layers ({})", rows.first().map(|r| r.pair.clone()).unwrap_or_default()),
            x_label: "layer".into(),
            y_label: "mean cosine".into(),
            kind: FigureKind::Lines,
            series: series_by(&rows, |r| Some(r.metric.clone())),
        });
    }
    for path in list_csvs(&ctx.out.join("intervene"), "") {
        let name = stem_of(&path);
        if !(name.ends_with("_before") || name.ends_with("_after")) && !name.starts_with("cross_")
        {
            continue;
        }
        let rows = read_curve_csv(&path)?;
        let hs_rows: Vec<&CurveRow> = rows
            .iter()
            .filter(|r| r.metric.starts_with("hs_") || r.metric == "centroid_cos")
            .collect();
        if hs_rows.is_empty() {
            continue;
        }
        let owned: Vec<CurveRow> = rows
            .into_iter()
            .filter(|r| r.metric.starts_with("hs_") || r.metric == "centroid_cos")
            .collect();
        figures.push(Figure {
            name: name.clone(),
            title: name.replace('_', " "),
            x_label: "layer".into(),
            y_label: "cosine".into(),
            kind: FigureKind::Lines,
            series: series_by(&owned, |r| {
                Some(format!("{} ({})", r.metric, r.condition))
            }),
        });
    }

    // mutual k-NN, centroid distance, separability: one figure each with a
    // line per language pair
    for (prefix, title, y_label) in [
        ("mutual_knn_", "Mutual k-NN alignment", "alignment"),
        ("centroid_cos_", "Centroid cosine between languages", "cosine"),
        ("separability_", "Parallel vs non-parallel separability", "accuracy"),
    ] {
        let mut all_rows = Vec::new();
        for path in list_csvs(&stats_dir, prefix) {
            all_rows.extend(read_curve_csv(&path)?);
        }
        if all_rows.is_empty() {
            continue;
        }
        figures.push(Figure {
            name: prefix.trim_end_matches('_').to_string(),
            title: title.into(),
            x_label: "layer".into(),
            y_label: y_label.into(),
            kind: FigureKind::Lines,
            series: series_by(&all_rows, |r| Some(r.pair.clone())),
        });
    }

    // CEVR dimensionality: line per (language, threshold)
    let cevr = stats_dir.join("cevr.csv");
    if cevr.exists() {
        let rows = read_curve_csv(&cevr)?;
        figures.push(Figure {
            name: "cevr".into(),
            title: "Latent-space dimensionality (CEVR)".into(),
            x_label: "layer".into(),
            y_label: "components".into(),
            kind: FigureKind::Lines,
            series: series_by(&rows, |r| {
                Some(format!("{}@{}", r.condition, r.threshold))
            }),
        });
    }

    let trajectory = stats_dir.join("trajectory_en.csv");
    if trajectory.exists() {
        let rows = read_curve_csv(&trajectory)?;
        figures.push(Figure {
            name: "trajectory_en".into(),
            title: "Centroid trajectory linearity (en)".into(),
            x_label: "layer".into(),
            y_label: "cos(step, path)".into(),
            kind: FigureKind::Lines,
            series: series_by(&rows, |r| Some(r.condition.clone())),
        });
    }

    // neuron distributions over layers, from detection CSVs
    for path in list_csvs(&ctx.out.join("detect"), "") {
        let name = stem_of(&path);
        if name.ends_with(".mask") {
            continue;
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut counts: std::collections::BTreeMap<usize, usize> =
            std::collections::BTreeMap::new();
        for line in text.lines() {
            if line.starts_with('#') || line.starts_with("layer,") {
                continue;
            }
            if let Some(layer) = line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
                *counts.entry(layer).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            continue;
        }
        figures.push(Figure {
            name: format!("neurons_{name}"),
            title: format!("Detected neurons per layer ({})", name.replace('_', " ")),
            x_label: "layer".into(),
            y_label: "neurons".into(),
            kind: FigureKind::Bars,
            series: vec![Series {
                label: name.clone(),
                points: counts
                    .into_iter()
                    .map(|(l, c)| (l as f64, c as f64))
                    .collect(),
            }],
        });
    }

    // language-specific neuron histograms
    for path in list_csvs(&stats_dir, "lang_specific_") {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut by_threshold: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
            std::collections::BTreeMap::new();
        for line in text.lines() {
            if line.starts_with('#') || line.starts_with("layer,") || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() == 3 {
                if let (Ok(layer), Ok(count)) = (cols[0].parse::<f64>(), cols[2].parse::<f64>()) {
                    by_threshold
                        .entry(format!("eta>={}", cols[1]))
                        .or_default()
                        .push((layer, count));
                }
            }
        }
        if by_threshold.is_empty() {
            continue;
        }
        figures.push(Figure {
            name: stem_of(&path),
            title: format!("Language-specific neurons ({})", stem_of(&path)),
            x_label: "layer".into(),
            y_label: "neurons".into(),
            kind: FigureKind::Bars,
            series: by_threshold
                .into_iter()
                .map(|(label, points)| Series { label, points })
                .collect(),
        });
    }

    // QA scatter: unmasked score vs. score under intervention
    for path in list_csvs(&ctx.out.join("evaluate"), "scatter_") {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut by_condition: std::collections::BTreeMap<String, Vec<(f64, f64)>> =
            std::collections::BTreeMap::new();
        for line in text.lines() {
            if line.starts_with('#') || line.starts_with("question_id,") || line.trim().is_empty()
            {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() == 5 {
                if let (Ok(x), Ok(y)) = (cols[3].parse::<f64>(), cols[4].parse::<f64>()) {
                    by_condition.entry(cols[2].to_string()).or_default().push((x, y));
                }
            }
        }
        if by_condition.is_empty() {
            continue;
        }
        figures.push(Figure {
            name: format!("qa_{}", stem_of(&path)),
            title: format!("QA F1 under intervention ({})", stem_of(&path)),
            x_label: "F1 without intervention".into(),
            y_label: "F1 with intervention".into(),
            kind: FigureKind::Points,
            series: by_condition
                .into_iter()
                .map(|(label, points)| Series { label, points })
                .collect(),
        });
    }

    let mut written = 0usize;
    for figure in &figures {
        if figure.series.iter().all(|s| s.points.is_empty()) {
            continue;
        }
        render(figure, &fig_dir)?;
        written += 1;
    }
    println!("wrote {written} figure(s) under {}", fig_dir.display());
    Ok(())
}
