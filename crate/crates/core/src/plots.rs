//! Chart emission for sweep results: one line chart per metric (TA, RA,
//! ASR) versus the sweep axis, rendered as PNG with a sidecar JSON
//! holding the exact plotted points.

use crate::config::parse_rational;
use crate::error::{Error, Result};
use crate::pipeline::{read_aggregate, AggregateRow};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN_LEFT: u32 = 56;
const MARGIN_RIGHT: u32 = 16;
const MARGIN_TOP: u32 = 16;
const MARGIN_BOTTOM: u32 = 36;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const SERIES: Rgb<u8> = Rgb([31, 119, 180]);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartPoint {
    pub value: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartSeries {
    pub metric: String,
    pub points: Vec<ChartPoint>,
}

/// Renders charts for every metric in the sweep's aggregate table.
/// Returns the written image paths.
pub fn emit_plots(sweep_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_aggregate(sweep_dir)?;
    if rows.is_empty() {
        return Err(Error::Input("aggregate table has no rows to plot".into()));
    }
    let plots_dir = sweep_dir.join("plots");
    fs::create_dir_all(&plots_dir).map_err(|e| Error::io(plots_dir.display().to_string(), e))?;
    let mut written = Vec::new();
    for (metric, pick) in [
        ("ta", (|r: &AggregateRow| r.ta) as fn(&AggregateRow) -> f64),
        ("ra", |r| r.ra),
        ("asr", |r| r.asr),
    ] {
        let points: Vec<ChartPoint> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| ChartPoint {
                value: r.value.clone(),
                x: parse_rational(&r.value).unwrap_or(i as f64),
                y: pick(r),
            })
            .collect();
        let series = ChartSeries {
            metric: metric.to_string(),
            points,
        };
        let png = plots_dir.join(format!("{metric}.png"));
        render_line_chart(&series, &png)?;
        let sidecar = plots_dir.join(format!("{metric}.json"));
        fs::write(
            &sidecar,
            serde_json::to_string_pretty(&series)
                .map_err(|e| Error::io(sidecar.display().to_string(), e))?,
        )
        .map_err(|e| Error::io(sidecar.display().to_string(), e))?;
        written.push(png);
    }
    Ok(written)
}

pub fn read_series(sweep_dir: &Path, metric: &str) -> Result<ChartSeries> {
    let path = sweep_dir.join("plots").join(format!("{metric}.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Input(format!("invalid chart sidecar: {e}")))
}

fn render_line_chart(series: &ChartSeries, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, BG);
    let (x0, x1) = bounds(series.points.iter().map(|p| p.x));
    let (mut y0, mut y1) = bounds(series.points.iter().map(|p| p.y));
    if (y1 - y0).abs() < 1e-12 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let map_x = |x: f64| {
        let frac = if (x1 - x0).abs() < 1e-12 {
            0.5
        } else {
            (x - x0) / (x1 - x0)
        };
        MARGIN_LEFT as f64 + frac * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) as f64
    };
    let map_y = |y: f64| {
        let frac = (y - y0) / (y1 - y0);
        (HEIGHT - MARGIN_BOTTOM) as f64 - frac * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) as f64
    };

    // Grid and y tick labels.
    for t in 0..=4 {
        let yv = y0 + (y1 - y0) * t as f64 / 4.0;
        let py = map_y(yv).round() as i64;
        hline(&mut img, MARGIN_LEFT, WIDTH - MARGIN_RIGHT, py, GRID);
        draw_number(&mut img, 2, py - 3, yv, AXIS);
    }
    // X tick labels at each point.
    for p in &series.points {
        let px = map_x(p.x).round() as i64;
        vline(
            &mut img,
            MARGIN_TOP,
            HEIGHT - MARGIN_BOTTOM,
            px,
            GRID,
        );
        draw_number(
            &mut img,
            px - 12,
            (HEIGHT - MARGIN_BOTTOM + 6) as i64,
            p.x,
            AXIS,
        );
    }
    // Axes.
    vline(&mut img, MARGIN_TOP, HEIGHT - MARGIN_BOTTOM, MARGIN_LEFT as i64, AXIS);
    hline(
        &mut img,
        MARGIN_LEFT,
        WIDTH - MARGIN_RIGHT,
        (HEIGHT - MARGIN_BOTTOM) as i64,
        AXIS,
    );

    // Series polyline and markers.
    let pts: Vec<(f64, f64)> = series.points.iter().map(|p| (map_x(p.x), map_y(p.y))).collect();
    for w in pts.windows(2) {
        line(&mut img, w[0], w[1], SERIES);
    }
    for &(px, py) in &pts {
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                put(&mut img, px as i64 + dx, py as i64 + dy, SERIES);
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn hline(img: &mut RgbImage, x0: u32, x1: u32, y: i64, c: Rgb<u8>) {
    for x in x0..x1 {
        put(img, x as i64, y, c);
    }
}

fn vline(img: &mut RgbImage, y0: u32, y1: u32, x: i64, c: Rgb<u8>) {
    for y in y0..y1 {
        put(img, x, y as i64, c);
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(
            img,
            (a.0 + t * (b.0 - a.0)).round() as i64,
            (a.1 + t * (b.1 - a.1)).round() as i64,
            c,
        );
    }
}

// 5x7 glyphs for numeric labels, one row per byte (low 5 bits).
fn glyph(ch: char) -> Option<[u8; 7]> {
    Some(match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, c: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (ry, row) in rows.iter().enumerate() {
                for bit in 0..5 {
                    if row & (1 << (4 - bit)) != 0 {
                        put(img, cx + bit as i64, y + ry as i64, c);
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_number(img: &mut RgbImage, x: i64, y: i64, v: f64, c: Rgb<u8>) {
    let text = if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.001 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    };
    draw_text(img, x, y, &text, c);
}
