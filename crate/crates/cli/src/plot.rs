//! Static SVG charts from result tables and PNG montages of generated images.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use dim_core::datasets::{denormalize, LabelVector};
use dim_core::distill::GeneratorCheckpoint;
use dim_core::models::NoiseBatch;
use dim_core::nn::Mode;

use crate::config::config_error;
use crate::results::mean_std;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    LambdaCurve,
    BatchCurve,
    InpcScaling,
    TrainingGrid,
}

impl PlotKind {
    /// (x column, y columns, log-scaled x)
    fn columns(&self) -> (&'static str, &'static [&'static str], bool) {
        match self {
            PlotKind::LambdaCurve => ("lambda", &["accuracy"], true),
            PlotKind::BatchCurve => ("batch_size", &["accuracy"], true),
            PlotKind::InpcScaling => ("inpc", &["accuracy"], true),
            PlotKind::TrainingGrid => ("epoch", &["l_g", "l_d", "l_m"], false),
        }
    }

    fn title(&self) -> &'static str {
        match self {
            PlotKind::LambdaCurve => "Accuracy vs. matching weight",
            PlotKind::BatchCurve => "Accuracy vs. batch size",
            PlotKind::InpcScaling => "Accuracy vs. images per class",
            PlotKind::TrainingGrid => "Training losses per epoch",
        }
    }
}

pub type Table = Vec<BTreeMap<String, String>>;

/// Reads a CSV file with a header row or a JSON-lines file of flat objects.
pub fn read_table(path: &Path) -> Result<Table> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)
                .map_err(|e| config_error(format!("{}:{}: {e}", path.display(), i + 1)))?;
            rows.push(
                obj.into_iter()
                    .map(|(k, v)| {
                        let s = match v {
                            serde_json::Value::String(s) => s,
                            serde_json::Value::Null => String::new(),
                            other => other.to_string(),
                        };
                        (k, s)
                    })
                    .collect(),
            );
        }
        Ok(rows)
    } else {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header = r.headers()?.clone();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            rows.push(header.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
        }
        Ok(rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    /// (x, mean y, std y) sorted by x.
    pub points: Vec<(f64, f64, f64)>,
}

/// Extracts one aggregated series per y column; rows whose cells do not parse are skipped.
pub fn series(table: &Table, kind: PlotKind) -> Result<Vec<Series>> {
    if table.is_empty() {
        bail!(config_error("the results table is empty"));
    }
    let (x, ys, _) = kind.columns();
    let missing: Vec<&str> = std::iter::once(x)
        .chain(ys.iter().copied())
        .filter(|c| !table[0].contains_key(*c))
        .collect();
    if !missing.is_empty() {
        bail!(config_error(format!("table lacks column(s) required by this plot: {}", missing.join(", "))));
    }
    let mut out = Vec::new();
    for y in ys {
        let mut by_x: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
        for row in table {
            let (Some(xv), Some(yv)) = (
                row.get(x).and_then(|v| v.parse::<f64>().ok()),
                row.get(*y).and_then(|v| v.parse::<f64>().ok()),
            ) else {
                continue;
            };
            by_x.entry(xv.to_bits()).or_insert((xv, Vec::new())).1.push(yv);
        }
        let mut points: Vec<(f64, f64, f64)> = by_x
            .into_values()
            .map(|(xv, vals)| {
                let (m, s) = mean_std(&vals);
                (xv, m, s)
            })
            .collect();
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.is_empty() {
            bail!(config_error(format!("no numeric ({x}, {y}) pairs in the table")));
        }
        out.push(Series {
            name: y.to_string(),
            points,
        });
    }
    Ok(out)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 60.0;
const COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Renders `series` as a deterministic SVG line chart with ±std error bars.
pub fn render_svg(kind: PlotKind, series: &[Series]) -> String {
    let (xcol, _, log_x) = kind.columns();
    let tx = |x: f64| if log_x && x > 0.0 { x.log10() } else { x };
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2])));
    let px = |x: f64| M + (tx(x) - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#, W / 2.0, kind.title());
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - M,
        r = W - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{xcol}{}</text>"#,
        W / 2.0,
        H - 16.0,
        if log_x { " (log scale)" } else { "" }
    );
    for (i, y) in [y0, (y0 + y1) / 2.0, y1].iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11" data-tick="{i}">{y:.3}</text>"#,
            M - 6.0,
            py(*y) + 4.0
        );
    }
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in &xs {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{x}</text>"#,
            px(*x),
            H - M + 16.0
        );
    }
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| format!("{}{:.1} {:.1}", if i == 0 { "M" } else { "L" }, px(p.0), py(p.1)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
        for p in &ser.points {
            let (cx, cy) = (px(p.0), py(p.1));
            if p.2 > 0.0 {
                let _ = writeln!(
                    s,
                    r#"<path d="M{cx:.1} {:.1} V{:.1}" stroke="{color}"/>"#,
                    py(p.1 - p.2),
                    py(p.1 + p.2)
                );
            }
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{cy:.1}" r="3.5" fill="{color}"/>"#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{color}">{}</text>"#,
            W - M + 4.0,
            M + 16.0 * k as f64,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads `input`, validates it for `kind` and writes the SVG; nothing is written on error.
pub fn plot(input: &Path, kind: PlotKind, output: &Path) -> Result<()> {
    let table = read_table(input)?;
    let ser = series(&table, kind)?;
    std::fs::write(output, render_svg(kind, &ser)).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

/// A `classes × per_class` grid of generated images, one row per class, as a PNG.
pub fn montage(ckpt: &GeneratorCheckpoint, per_class: usize, seed: u64, output: &Path) -> Result<()> {
    let gen = ckpt.generator()?;
    let cfg = gen.config();
    let (c, shape) = (cfg.num_classes, cfg.image_shape);
    let labels = LabelVector::balanced(per_class, c)?;
    let noise = NoiseBatch::from_seed(labels.len(), cfg.noise_dim, seed, gen.dtype())?;
    let batch = gen.generate_with(&noise, &labels, Mode::EVAL)?;
    let values: Vec<f32> = batch.images.flatten_all()?.to_vec1()?;
    let unit = denormalize(&values, &ckpt.config.dataset)?;
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let pad = 1;
    let (gw, gh) = (per_class * (w + pad) + pad, c * (h + pad) + pad);
    let mut img = image::RgbImage::from_pixel(gw as u32, gh as u32, image::Rgb([255, 255, 255]));
    let plane = h * w;
    for (n, &label) in labels.as_slice().iter().enumerate() {
        let col = n % per_class;
        let (ox, oy) = (pad + col * (w + pad), pad + label * (h + pad));
        for y in 0..h {
            for x in 0..w {
                let px = |k: usize| (unit[n * ch * plane + k * plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                let rgb = if ch == 3 { [px(0), px(1), px(2)] } else { [px(0); 3] };
                img.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(rgb));
            }
        }
    }
    img.save(output).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: &[(&str, &str)]) -> Table {
        rows.iter()
            .map(|(l, a)| BTreeMap::from([("lambda".to_string(), l.to_string()), ("accuracy".to_string(), a.to_string())]))
            .collect()
    }

    #[test]
    fn empty_and_missing_columns_are_errors() {
        assert!(series(&Vec::new(), PlotKind::LambdaCurve).is_err());
        let e = series(&table(&[("0.1", "0.5")]), PlotKind::BatchCurve).unwrap_err();
        assert!(e.to_string().contains("batch_size"), "{e}");
    }

    #[test]
    fn single_point_and_aggregation() {
        let s = series(&table(&[("0.1", "0.5")]), PlotKind::LambdaCurve).unwrap();
        assert_eq!(s[0].points, vec![(0.1, 0.5, 0.0)]);
        let svg = render_svg(PlotKind::LambdaCurve, &s);
        assert!(svg.contains("<circle"));
        let s = series(&table(&[("1", "0.4"), ("0.1", "0.5"), ("1", "0.6")]), PlotKind::LambdaCurve).unwrap();
        assert_eq!(s[0].points.len(), 2);
        assert!((s[0].points[1].1 - 0.5).abs() < 1e-12);
        assert_eq!(render_svg(PlotKind::LambdaCurve, &s), render_svg(PlotKind::LambdaCurve, &s));
    }
}
