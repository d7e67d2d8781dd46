use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Result};
use plotters::prelude::*;

use cwm_core::evaluation::{ResultRow, TracePoint};
use cwm_core::training::Condition;

struct Bar {
    label: String,
    mean: f64,
    err: f64,
}

fn label(condition: Condition, communication: &str) -> String {
    match (condition, communication) {
        (Condition::Ec, "off") => "EC w/o com".into(),
        (Condition::Nc, _) => "NC".into(),
        (c, _) => c.as_str().to_uppercase(),
    }
}

fn condition_order(label: &str) -> usize {
    ["BASELINE", "BC", "EC", "EC w/o com", "NC"]
        .iter()
        .position(|l| *l == label)
        .unwrap_or(usize::MAX)
}

/// Averages rows over seeds, grouped by `(bins, label)`.
fn aggregate(rows: &[ResultRow], value: fn(&ResultRow) -> (f64, f64)) -> BTreeMap<String, Vec<Bar>> {
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        let (m, s) = value(r);
        if m.is_finite() {
            groups
                .entry(r.bins.clone())
                .or_default()
                .entry(label(r.condition, &r.communication))
                .or_default()
                .push((m, s));
        }
    }
    groups
        .into_iter()
        .map(|(bins, by_label)| {
            let mut bars: Vec<Bar> = by_label
                .into_iter()
                .map(|(label, v)| {
                    let n = v.len() as f64;
                    Bar {
                        label,
                        mean: v.iter().map(|x| x.0).sum::<f64>() / n,
                        err: v.iter().map(|x| x.1).sum::<f64>() / n,
                    }
                })
                .collect();
            bars.sort_by_key(|b| condition_order(&b.label));
            (bins, bars)
        })
        .collect()
}

fn bar_chart(path: &Path, title: &str, y_desc: &str, bars: &[Bar], y_range: (f64, f64)) -> Result<()> {
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
    let n = bars.len();
    let labels: Vec<String> = bars.iter().map(|b| b.label.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, y_range.0..y_range.1)
        .map_err(|e| anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n.max(1))
        .x_label_formatter(&|x| {
            let i = x.round();
            if (x - i).abs() < 1e-6 && i >= 0.0 && (i as usize) < labels.len() {
                labels[i as usize].clone()
            } else {
                String::new()
            }
        })
        .y_desc(y_desc)
        .draw()
        .map_err(|e| anyhow!("{e}"))?;
    let palette = [&BLUE, &RED, &GREEN, &MAGENTA, &CYAN, &BLACK];
    for (i, b) in bars.iter().enumerate() {
        let x = i as f64;
        let color = palette[i % palette.len()];
        chart
            .draw_series(std::iter::once(Rectangle::new(
                [(x - 0.3, y_range.0.max(0.0).min(b.mean)), (x + 0.3, b.mean)],
                color.mix(0.6).filled(),
            )))
            .map_err(|e| anyhow!("{e}"))?;
        let (lo, hi) = (b.mean - b.err, b.mean + b.err);
        chart
            .draw_series([
                PathElement::new(vec![(x, lo), (x, hi)], BLACK.stroke_width(2)),
                PathElement::new(vec![(x - 0.1, lo), (x + 0.1, lo)], BLACK.stroke_width(2)),
                PathElement::new(vec![(x - 0.1, hi), (x + 0.1, hi)], BLACK.stroke_width(2)),
            ])
            .map_err(|e| anyhow!("{e}"))?;
    }
    root.present().map_err(|e| anyhow!("{e}"))?;
    Ok(())
}

/// Coordination and similarity bar charts, one pair per resolution.
pub fn results_figures(rows: &[ResultRow], out: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (bins, bars) in aggregate(rows, |r| (r.mean, r.std)) {
        let path = out.join(format!("coordination_bins-{bins}.svg"));
        bar_chart(
            &path,
            &format!("Coordination, bins = {bins}"),
            "max cross-correlation",
            &bars,
            (-0.2, 1.0),
        )?;
        written.push(path);
    }
    let rsa_rows: Vec<ResultRow> = rows
        .iter()
        .filter(|r| r.condition != Condition::Baseline && !(r.condition == Condition::Ec && r.communication == "off"))
        .cloned()
        .collect();
    for (bins, bars) in aggregate(&rsa_rows, |r| (r.rsa_mean, 0.0)) {
        let path = out.join(format!("rsa_bins-{bins}.svg"));
        bar_chart(
            &path,
            &format!("Message/position similarity, bins = {bins}"),
            "Spearman rho",
            &bars,
            (-0.2, 1.0),
        )?;
        written.push(path);
    }
    Ok(written)
}

fn hue(frac: f64) -> RGBColor {
    let c = HSLColor(frac * 0.8, 0.8, 0.45).to_rgba();
    RGBColor(c.0, c.1, c.2)
}

/// Side-by-side scatter of one episode's positions and message means,
/// colored by time so corresponding points share a color.
pub fn trace_figures(points: &[TracePoint], out: &Path) -> Result<Vec<PathBuf>> {
    let mut sources: Vec<&str> = Vec::new();
    for p in points {
        if !sources.contains(&p.source.as_str()) {
            sources.push(&p.source);
        }
    }
    let mut written = Vec::new();
    for source in sources {
        let ep: Vec<&TracePoint> = points
            .iter()
            .filter(|p| p.source == source && p.episode == 0 && p.message.len() >= 2)
            .collect();
        if ep.is_empty() {
            continue;
        }
        let path = out.join(format!("messages_{source}.svg"));
        let root = SVGBackend::new(&path, (960, 460)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        let panels = root.split_evenly((1, 2));
        let n = ep.len().max(2) as f64 - 1.0;
        let bounds = |f: &dyn Fn(&TracePoint) -> f64| {
            let (lo, hi) = ep
                .iter()
                .map(|p| f(p))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let pad = ((hi - lo) * 0.05).max(1e-3);
            (lo - pad)..(hi + pad)
        };
        let series: [(&str, Box<dyn Fn(&TracePoint) -> (f64, f64)>); 2] = [
            ("position", Box::new(|p: &TracePoint| (p.position[0], p.position[1]))),
            ("message mean", Box::new(|p: &TracePoint| (p.message[0], p.message[1]))),
        ];
        for (panel, (name, f)) in panels.iter().zip(series.iter()) {
            let xr = bounds(&|p| f(p).0);
            let yr = bounds(&|p| f(p).1);
            let mut chart = ChartBuilder::on(panel)
                .caption(format!("{source}: {name}"), ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(32)
                .y_label_area_size(48)
                .build_cartesian_2d(xr, yr)
                .map_err(|e| anyhow!("{e}"))?;
            chart.configure_mesh().draw().map_err(|e| anyhow!("{e}"))?;
            chart
                .draw_series(ep.iter().map(|p| {
                    let c = hue(p.step as f64 / n);
                    Circle::new(f(p), 3, c.filled())
                }))
                .map_err(|e| anyhow!("{e}"))?;
        }
        root.present().map_err(|e| anyhow!("{e}"))?;
        written.push(path.clone());
    }
    Ok(written)
}
