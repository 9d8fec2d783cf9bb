//! PNG figures from report directories. Plotting only reads CSVs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};
use serde::Deserialize;

use asc_core::{AscError, Result};

use crate::evaluate::{files_matching, read_reports, stem_between};

const FONT_PATHS: [&str; 3] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

/// Registers a system font once. `ASC_FONT` overrides the search path.
fn ensure_font() -> Result<()> {
    static DONE: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    DONE.get_or_init(|| {
        let candidates: Vec<PathBuf> = std::env::var_os("ASC_FONT")
            .map(PathBuf::from)
            .into_iter()
            .chain(FONT_PATHS.iter().map(PathBuf::from))
            .collect();
        let bytes = candidates
            .iter()
            .find_map(|p| std::fs::read(p).ok())
            .ok_or_else(|| "no usable TrueType font found; set ASC_FONT".to_string())?;
        register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice()))
            .map_err(|_| "font could not be parsed".to_string())
    })
    .clone()
    .map_err(AscError::Data)
}

fn draw_err<E: std::fmt::Display>(e: E) -> AscError {
    AscError::Data(format!("plot: {e}"))
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn rd_plot(path: &Path, title: &str, curves: &[(String, Vec<(f64, f64)>)]) -> Result<()> {
    let root = BitMapBackend::new(path, (800, 600)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let (x0, x1) = bounds(curves.iter().flat_map(|c| c.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(curves.iter().flat_map(|c| c.1.iter().map(|p| p.1)));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(draw_err)?;
    chart
        .configure_mesh()
        .x_desc("CBR (R + M)")
        .y_desc("PSNR (dB)")
        .draw()
        .map_err(draw_err)?;
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = pts.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(draw_err)?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|p| Circle::new(*p, 4, color.filled())))
            .map_err(draw_err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(draw_err)?;
    root.present().map_err(draw_err)
}

#[derive(Debug, Deserialize)]
struct TrajRow {
    step: f64,
    #[serde(rename = "R")]
    r: f64,
    #[serde(rename = "M")]
    m: f64,
    #[serde(rename = "D")]
    d: f64,
}

fn trajectory_plot(path: &Path, title: &str, rows: &[TrajRow]) -> Result<()> {
    let root = BitMapBackend::new(path, (800, 900)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let root = root.titled(title, ("sans-serif", 22)).map_err(draw_err)?;
    let panels = root.split_evenly((3, 1));
    let series: [(&str, fn(&TrajRow) -> f64); 3] = [("R", |r| r.r), ("M", |r| r.m), ("D", |r| r.d)];
    let (s0, s1) = bounds(rows.iter().map(|r| r.step));
    for (i, (panel, (name, get))) in panels.iter().zip(series).enumerate() {
        let (y0, y1) = bounds(rows.iter().map(get));
        let mut chart = ChartBuilder::on(panel)
            .margin(10)
            .x_label_area_size(30)
            .y_label_area_size(70)
            .build_cartesian_2d(s0..s1, y0..y1)
            .map_err(draw_err)?;
        chart
            .configure_mesh()
            .x_desc(if i == 2 { "step" } else { "" })
            .y_desc(name)
            .draw()
            .map_err(draw_err)?;
        chart
            .draw_series(LineSeries::new(
                rows.iter().map(|r| (r.step, get(r))).filter(|p| p.1.is_finite()),
                Palette99::pick(i).stroke_width(2),
            ))
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)
}

/// Draws one RD figure per (scope, SNR) and one trajectory figure per
/// adaptation log into `<dir>/plots`. An empty directory is a warning.
pub fn plot_reports(dir: &Path) -> Result<Vec<PathBuf>> {
    let reports = read_reports(dir)?;
    let logs = files_matching(dir, "adapt_", ".csv")?;
    if reports.is_empty() && logs.is_empty() {
        log::warn!("no reports in {}; nothing to plot", dir.display());
        return Ok(Vec::new());
    }
    ensure_font()?;
    let out = dir.join("plots");
    std::fs::create_dir_all(&out)?;
    let mut written = Vec::new();

    let mut groups: BTreeMap<(String, u64), Vec<(String, Vec<(f64, f64)>)>> = BTreeMap::new();
    for (scheme, recs) in &reports {
        let mut per: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
        for r in recs {
            per.entry((r.scope.clone(), r.snr_db.to_bits()))
                .or_default()
                .push((r.cbr_total, r.psnr));
        }
        for (k, mut pts) in per {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            groups.entry(k).or_default().push((scheme.clone(), pts));
        }
    }
    for ((scope, snr_bits), curves) in &groups {
        let snr = f64::from_bits(*snr_bits);
        let path = out.join(format!("rd_{scope}_{snr}dB.png"));
        rd_plot(&path, &format!("{scope} at {snr} dB"), curves)?;
        written.push(path);
    }
    for log_path in &logs {
        let mut r = csv::Reader::from_path(log_path).map_err(draw_err)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<TrajRow>, _>>()
            .map_err(draw_err)?;
        let stem = stem_between(log_path, "adapt_", ".csv");
        let path = out.join(format!("trajectory_{stem}.png"));
        trajectory_plot(&path, &stem, &rows)?;
        written.push(path);
    }
    Ok(written)
}
