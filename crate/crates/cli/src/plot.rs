//! Static accuracy-versus-weight plot.
//!
//! The bitmap backend is built without font support, so the image carries the
//! series, error bars, a frame and a light grid (one vertical line per grid value) only; values and labels live in `sweep.csv`.

use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use souf::experiment::SweepRow;

pub fn sweep_png(rows: &[SweepRow], path: &Path) -> Result<()> {
    let pts: Vec<(f64, f64, f64)> = rows.iter().filter(|r| r.mean.is_finite()).map(|r| (r.value, r.mean, r.std)).collect();
    let (x_lo, x_hi) = bounds(pts.iter().map(|p| p.0), 0.05);
    let (y_lo, y_hi) = bounds(pts.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]), 0.1);

    let root = BitMapBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow!("plot: {e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(30)
        .build_cartesian_2d(x_lo..x_hi, y_lo..y_hi)
        .map_err(|e| anyhow!("plot: {e}"))?;
    let grid = RGBColor(220, 220, 220);
    chart
        .draw_series((0..=4).map(|k| {
            let y = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
            PathElement::new(vec![(x_lo, y), (x_hi, y)], grid.stroke_width(1))
        }))
        .map_err(|e| anyhow!("plot: {e}"))?;
    chart
        .draw_series(pts.iter().map(|&(x, _, _)| PathElement::new(vec![(x, y_lo), (x, y_hi)], grid.stroke_width(1))))
        .map_err(|e| anyhow!("plot: {e}"))?;
    chart
        .draw_series(std::iter::once(Rectangle::new([(x_lo, y_lo), (x_hi, y_hi)], BLACK.stroke_width(1))))
        .map_err(|e| anyhow!("plot: {e}"))?;
    chart
        .draw_series(pts.iter().map(|&(x, m, s)| PathElement::new(vec![(x, m - s), (x, m + s)], BLACK.stroke_width(1))))
        .map_err(|e| anyhow!("plot: {e}"))?;
    chart
        .draw_series(LineSeries::new(pts.iter().map(|&(x, m, _)| (x, m)), BLUE.stroke_width(2)))
        .map_err(|e| anyhow!("plot: {e}"))?;
    chart
        .draw_series(pts.iter().map(|&(x, m, _)| Circle::new((x, m), 5, BLUE.filled())))
        .map_err(|e| anyhow!("plot: {e}"))?;
    root.present().map_err(|e| anyhow!("plot: {e}"))?;
    Ok(())
}

fn bounds(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-3);
    (lo - pad * span, hi + pad * span)
}
