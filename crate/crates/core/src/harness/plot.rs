//! SVG learning curves.
//!
//! CSVs sitting in `.../<run>/seed_<s>/metrics.csv` are grouped by `<run>`;
//! each group is drawn as its mean curve over seeds with a min/max band.
//! Other paths form a group of their own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const X_COLUMN: &str = "step";
const Y_COLUMN: &str = "capture_rate";
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub seeds: usize,
}

fn read_series(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{name}` in `{}", path.display())))
    };
    let (xi, yi) = (col(X_COLUMN)?, col(Y_COLUMN)?);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize, name: &str| -> Result<f64> {
            rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| {
                Error::Contract(format!("non-numeric `{name}` in {}", path.display()))
            })
        };
        xs.push(num(xi, X_COLUMN)?);
        ys.push(num(yi, Y_COLUMN)?);
    }
    if xs.is_empty() {
        return Err(Error::Contract(format!("{} has no data rows", path.display())));
    }
    Ok((xs, ys))
}

fn group_label(path: &Path) -> String {
    let parent = path.parent();
    let name = |p: Option<&Path>| {
        p.and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
    };
    match name(parent) {
        Some(dir) if dir.starts_with("seed_") => {
            name(parent.and_then(Path::parent)).unwrap_or(dir)
        }
        Some(dir) => dir,
        None => path.display().to_string(),
    }
}

/// Reads and aggregates the curves; every file must have rows and the
/// `step` and `capture_rate` columns.
pub fn load_curves(paths: &[PathBuf]) -> Result<Vec<Curve>> {
    if paths.is_empty() {
        return Err(Error::Parameter("no CSV files given".into()));
    }
    let mut groups: BTreeMap<String, Vec<(Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for p in paths {
        groups.entry(group_label(p)).or_default().push(read_series(p)?);
    }
    Ok(groups
        .into_iter()
        .map(|(label, runs)| {
            let len = runs.iter().map(|r| r.0.len()).min().unwrap_or(0);
            let n = runs.len() as f64;
            let at = |i: usize, f: fn(&(Vec<f64>, Vec<f64>), usize) -> f64| -> Vec<f64> {
                runs.iter().map(|r| f(r, i)).collect()
            };
            let mut c = Curve {
                label,
                x: Vec::with_capacity(len),
                mean: Vec::with_capacity(len),
                min: Vec::with_capacity(len),
                max: Vec::with_capacity(len),
                seeds: runs.len(),
            };
            for i in 0..len {
                let xs = at(i, |r, i| r.0[i]);
                let ys = at(i, |r, i| r.1[i]);
                c.x.push(xs.iter().sum::<f64>() / n);
                c.mean.push(ys.iter().sum::<f64>() / n);
                c.min.push(ys.iter().copied().fold(f64::INFINITY, f64::min));
                c.max.push(ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            c
        })
        .collect())
}

fn ticks(max: f64) -> Vec<f64> {
    (0..=4).map(|i| max * i as f64 / 4.0).collect()
}

fn fmt_tick(v: f64) -> String {
    if v >= 1000.0 {
        format!("{:.0}k", v / 1000.0)
    } else if v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// SVG 1.1 document for `curves`.
pub fn render_svg(curves: &[Curve]) -> String {
    let x_max = curves
        .iter()
        .flat_map(|c| c.x.iter().copied())
        .fold(1.0, f64::max);
    let y_max = curves
        .iter()
        .flat_map(|c| c.max.iter().copied())
        .fold(1.0, f64::max);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + x / x_max * pw;
    let sy = |y: f64| MARGIN_T + (1.0 - y / y_max) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>"#
    );
    let (x0, y0) = (sx(0.0), sy(0.0));
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{x0:.1}" y1="{y0:.1}" x2="{:.1}" y2="{y0:.1}"/><line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{:.1}"/></g>"#,
        sx(x_max),
        sy(y_max)
    );
    for t in ticks(x_max) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(t),
            y0 + 16.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y_max) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            sy(t) + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{X_COLUMN}</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{Y_COLUMN}</text>"#,
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if c.seeds > 1 {
            let upper = c.x.iter().zip(&c.max).map(|(x, y)| (sx(*x), sy(*y)));
            let lower = c.x.iter().zip(&c.min).rev().map(|(x, y)| (sx(*x), sy(*y)));
            let pts: Vec<String> = upper
                .chain(lower)
                .map(|(x, y)| format!("{x:.1},{y:.1}"))
                .collect();
            let _ = writeln!(
                s,
                r#"<polygon class="band" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = c
            .x
            .iter()
            .zip(&c.mean)
            .map(|(x, y)| format!("{:.1},{:.1}", sx(*x), sy(*y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{} (n={})</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&c.label),
            c.seeds
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders `csvs` into `out`. Nothing is written unless every input is valid.
pub fn emit_plots(csvs: &[PathBuf], out: &Path) -> Result<()> {
    let curves = load_curves(csvs)?;
    fs::write(out, render_svg(&curves))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_strip_seed_directories() {
        assert_eq!(group_label(Path::new("a/gacg/seed_3/metrics.csv")), "gacg");
        assert_eq!(group_label(Path::new("runs/base/metrics.csv")), "base");
    }

    #[test]
    fn band_spans_seed_extremes() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (s, y) in [(0, 0.2), (1, 0.6)] {
            let d = dir.path().join("v").join(format!("seed_{s}"));
            fs::create_dir_all(&d).unwrap();
            let p = d.join("metrics.csv");
            fs::write(&p, format!("step,capture_rate\n500,{y}\n1000,{y}\n")).unwrap();
            paths.push(p);
        }
        let c = load_curves(&paths).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].seeds, 2);
        assert!((c[0].mean[1] - 0.4).abs() < 1e-12);
        assert_eq!((c[0].min[0], c[0].max[0]), (0.2, 0.6));
    }
}
