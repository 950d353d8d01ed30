//! PNG line charts rebuilt from the emitted CSV files.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;
use plotters::style::{register_font, FontStyle};

use crate::artifacts::SummaryRow;

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/Library/Fonts/Arial Unicode.ttf",
];

/// Registers a sans-serif font once; `SUSTER_FONT` overrides the search.
fn ensure_font() -> Result<()> {
    static LOADED: OnceLock<Result<(), String>> = OnceLock::new();
    LOADED
        .get_or_init(|| {
            let candidates: Vec<PathBuf> = std::env::var_os("SUSTER_FONT")
                .map(PathBuf::from)
                .into_iter()
                .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
                .collect();
            for path in &candidates {
                if let Ok(bytes) = std::fs::read(path) {
                    let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                    return register_font("sans-serif", FontStyle::Normal, bytes)
                        .map_err(|_| format!("{} is not a usable font", path.display()));
                }
            }
            Err("no TrueType font found; set SUSTER_FONT to a .ttf file".to_string())
        })
        .clone()
        .map_err(|e| anyhow!(e))
}

/// One polyline per series.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Groups summary rows into MAE series keyed by model.
pub fn series_by_model(summary: &[SummaryRow], x: impl Fn(&SummaryRow) -> Option<f64>) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for row in summary {
        let Some(xv) = x(row) else { continue };
        match out.iter_mut().find(|s| s.name == row.model) {
            Some(s) => s.points.push((xv, row.mae_mean)),
            None => out.push(Series {
                name: row.model.clone(),
                points: vec![(xv, row.mae_mean)],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

/// Position of a dropout rate on the chart: the number of nines,
/// `-log10(1 - p)`, so 0.9, 0.99 and 0.999 are evenly spaced.
pub fn dropout_axis(p: f64) -> Option<f64> {
    (p < 1.0).then(|| -(1.0 - p).log10())
}

fn dropout_label(x: f64) -> String {
    let p = 1.0 - 10f64.powf(-x);
    let s = format!("{p:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub log_dropout_axis: bool,
}

pub fn line_chart(path: &Path, chart: &Chart, series: &[Series]) -> Result<()> {
    ensure_font()?;
    let points = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        bail!("nothing to plot for {}", path.display());
    }
    let pad_x = ((x1 - x0) * 0.05).max(0.05);
    let pad_y = ((y1 - y0) * 0.1).max(0.05);
    let (x0, x1, y0, y1) = (x0 - pad_x, x1 + pad_x, (y0 - pad_y).max(0.0), y1 + pad_y);

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp.png");
    let tmp = PathBuf::from(tmp);
    {
        let root = BitMapBackend::new(&tmp, (900, 600)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| anyhow!("{e}"))?;
        let mut ctx = ChartBuilder::on(&root)
            .caption(chart.title, ("sans-serif", 26))
            .margin(16)
            .x_label_area_size(48)
            .y_label_area_size(64)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| anyhow!("{e}"))?;
        let log_axis = chart.log_dropout_axis;
        let fmt_x = move |x: &f64| if log_axis { dropout_label(*x) } else { format!("{x:.2}") };
        ctx.configure_mesh()
            .x_desc(chart.x_label)
            .y_desc(chart.y_label)
            .x_label_formatter(&fmt_x)
            .label_style(("sans-serif", 16))
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        for (i, s) in series.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            ctx.draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| anyhow!("{e}"))?
                .label(s.name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            ctx.draw_series(s.points.iter().map(|&p| Circle::new(p, 4, color.filled())))
                .map_err(|e| anyhow!("{e}"))?;
        }
        ctx.configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .label_font(("sans-serif", 16))
            .draw()
            .map_err(|e| anyhow!("{e}"))?;
        root.present().map_err(|e| anyhow!("{e}"))?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
