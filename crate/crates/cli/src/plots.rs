//! Plain SVG renderings of the CSV reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::analyze::{DELTA_C_CSV, DELTA_C_HEADER, HEATMAP_CSV, HEATMAP_HEADER, ANGLE_SUMMARY_CSV, SUMMARY_HEADER};
use crate::error::{PipelineError, Result};
use crate::manifest::level_rank;
use crate::tables::{parse_f, read_csv};

#[derive(Debug, Default)]
pub struct PlotOutcome {
    pub written: Vec<PathBuf>,
    pub errors: Vec<PipelineError>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxRow {
    pub label: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub outliers: Vec<f64>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 50.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn axes(svg: &mut String, lo: f64, hi: f64, ylabel: &str) {
    let _ = writeln!(
        svg,
        "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{hi:.2}</text>\n\
         <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{lo:.2}</text>\n\
         <text x=\"12\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 12 {:.1})\" text-anchor=\"middle\">{}</text>",
        H - M,
        H - M,
        W - M,
        H - M,
        M - 4.0,
        M + 4.0,
        M - 4.0,
        H - M,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

pub fn boxplot_svg(title: &str, rows: &[BoxRow]) -> String {
    let (lo, hi) = range(rows.iter().flat_map(|r| [r.whisker_low, r.whisker_high].into_iter().chain(r.outliers.iter().copied())));
    let y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let mut svg = svg_open(title);
    axes(&mut svg, lo, hi, "angle (deg)");
    let slot = (W - 2.0 * M) / rows.len().max(1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let cx = M + slot * (i as f64 + 0.5);
        let bw = slot * 0.3;
        let _ = writeln!(
            svg,
            "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n\
             <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#9ecae1\" stroke=\"black\"/>\n\
             <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>\n\
             <text x=\"{cx:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            y(r.whisker_low),
            y(r.whisker_high),
            cx - bw,
            y(r.q3),
            2.0 * bw,
            (y(r.q1) - y(r.q3)).max(0.5),
            cx - bw,
            y(r.median),
            cx + bw,
            y(r.median),
            H - M + 14.0,
            escape(&r.label)
        );
        for &o in &r.outliers {
            let _ = writeln!(svg, "<circle cx=\"{cx:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"none\" stroke=\"black\"/>", y(o));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// `cells` maps (row, col) to a value; both axes are 1-based.
pub fn heatmap_svg(title: &str, cells: &BTreeMap<(usize, usize), f64>) -> String {
    let rows = cells.keys().map(|k| k.0).max().unwrap_or(1);
    let cols = cells.keys().map(|k| k.1).max().unwrap_or(1);
    let (lo, hi) = range(cells.values().copied());
    let mut svg = svg_open(title);
    let cw = (W - 2.0 * M) / cols as f64;
    let ch = (H - 2.0 * M) / rows as f64;
    for (&(r, c), &v) in cells {
        let t = (v - lo) / (hi - lo);
        let shade = (255.0 - t * 200.0).round() as u8;
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{cw:.1}\" height=\"{ch:.1}\" fill=\"rgb({shade},{shade},255)\" stroke=\"white\"><title>layer {r} head {c}: {v:.3}</title></rect>",
            M + (c - 1) as f64 * cw,
            M + (r - 1) as f64 * ch,
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">head</text>\n\
         <text x=\"14\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 14 {:.1})\" text-anchor=\"middle\">layer</text>",
        W / 2.0,
        H - M + 20.0,
        H / 2.0,
        H / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn line_svg(title: &str, points: &[(String, f64)]) -> String {
    let (lo, hi) = range(points.iter().map(|p| p.1).chain([0.0]));
    let y = |v: f64| H - M - (v - lo) / (hi - lo) * (H - 2.0 * M);
    let step = (W - 2.0 * M) / points.len().max(1) as f64;
    let x = |i: usize| M + step * (i as f64 + 0.5);
    let mut svg = svg_open(title);
    axes(&mut svg, lo, hi, "delta C");
    let path: Vec<String> = points.iter().enumerate().map(|(i, p)| format!("{:.1},{:.1}", x(i), y(p.1))).collect();
    let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"#3182bd\" stroke-width=\"2\"/>", path.join(" "));
    for (i, (label, v)) in points.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#3182bd\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            x(i),
            y(*v),
            x(i),
            H - M + 14.0,
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn read_box_rows(path: &Path) -> Result<Vec<BoxRow>> {
    read_csv(path, &SUMMARY_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let row = i + 2;
            let f = |j: usize| parse_f(path, row, &r[j]);
            let outliers = r[7]
                .split(';')
                .filter(|s| !s.is_empty())
                .map(|s| parse_f(path, row, s))
                .collect::<Result<Vec<_>>>()?;
            Ok(BoxRow {
                label: format!("L{}", r[0]),
                median: f(2)?,
                q1: f(3)?,
                q3: f(4)?,
                whisker_low: f(5)?,
                whisker_high: f(6)?,
                outliers,
            })
        })
        .collect()
}

pub fn read_heatmaps(path: &Path) -> Result<BTreeMap<String, BTreeMap<(usize, usize), f64>>> {
    let mut out: BTreeMap<String, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    for (i, r) in read_csv(path, &HEATMAP_HEADER)?.into_iter().enumerate() {
        let row = i + 2;
        let idx = |s: &str| {
            s.parse::<usize>().map_err(|_| PipelineError::Csv {
                path: path.to_path_buf(),
                detail: format!("row {row}: `{s}` is not a positive integer"),
            })
        };
        let cell = (idx(&r[1])?, idx(&r[2])?);
        if cell.0 == 0 || cell.1 == 0 {
            return Err(PipelineError::Csv { path: path.to_path_buf(), detail: format!("row {row}: layer and head are 1-based") });
        }
        out.entry(r[0].clone()).or_default().insert(cell, parse_f(path, row, &r[4])?);
    }
    Ok(out)
}

pub fn read_delta_c(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut pts = read_csv(path, &DELTA_C_HEADER)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| Ok((r[0].clone(), parse_f(path, i + 2, &r[1])?)))
        .collect::<Result<Vec<_>>>()?;
    pts.sort_by_key(|p| level_rank(&p.0));
    Ok(pts)
}

fn save(path: PathBuf, svg: String, outcome: &mut PlotOutcome) {
    match fs::write(&path, svg) {
        Ok(()) => outcome.written.push(path),
        Err(e) => outcome.errors.push(PipelineError::io(path, e)),
    }
}

/// Renders whatever reports exist in `dir` into `dir/plots`. Failures are
/// collected, never raised.
pub fn render_plots(dir: &Path) -> PlotOutcome {
    let mut outcome = PlotOutcome::default();
    let plot_dir = dir.join("plots");
    if let Err(e) = fs::create_dir_all(&plot_dir) {
        outcome.errors.push(PipelineError::io(&plot_dir, e));
        return outcome;
    }

    let summary = dir.join(ANGLE_SUMMARY_CSV);
    if summary.exists() {
        match read_box_rows(&summary) {
            Ok(rows) => save(plot_dir.join("subspace_angles.svg"), boxplot_svg("Smallest principal angle per layer", &rows), &mut outcome),
            Err(e) => outcome.errors.push(e),
        }
    }
    let heat = dir.join(HEATMAP_CSV);
    if heat.exists() {
        match read_heatmaps(&heat) {
            Ok(maps) => {
                for (level, cells) in maps {
                    let name = format!("retention_{}.svg", level.replace(|c: char| !c.is_ascii_alphanumeric() && c != '-', "_"));
                    save(plot_dir.join(name), heatmap_svg(&format!("C_pert at {level}"), &cells), &mut outcome);
                }
            }
            Err(e) => outcome.errors.push(e),
        }
    }
    let delta = dir.join(DELTA_C_CSV);
    if delta.exists() {
        match read_delta_c(&delta) {
            Ok(pts) => save(plot_dir.join("delta_c.svg"), line_svg("Mean feature drop per level", &pts), &mut outcome),
            Err(e) => outcome.errors.push(e),
        }
    }
    outcome
}
