//! Mean ± one-standard-deviation curves across runs, drawn by a tiny
//! rasterizer with an 8×8 bitmap font.

use std::path::Path;

use font8x8::UnicodeFonts;
use sear_core::agents::MetricsRecord;
use sear_core::pnm::Image;

use crate::CliError;

/// One run's `(step, value)` pairs, sorted by step with unique steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub steps: Vec<f64>,
    pub values: Vec<f64>,
}

impl Series {
    /// Sorts by step and averages values that share a step.
    pub fn new(mut points: Vec<(f64, f64)>) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut steps, mut values, mut counts) = (Vec::<f64>::new(), Vec::<f64>::new(), Vec::<f64>::new());
        for (s, v) in points {
            if steps.last() == Some(&s) {
                *values.last_mut().unwrap() += v;
                *counts.last_mut().unwrap() += 1.0;
            } else {
                steps.push(s);
                values.push(v);
                counts.push(1.0);
            }
        }
        for (v, c) in values.iter_mut().zip(counts) {
            *v /= c;
        }
        Self { steps, values }
    }

    /// Linear interpolation, holding the end values outside the range.
    pub fn at(&self, x: f64) -> f64 {
        let i = self.steps.partition_point(|&s| s < x);
        if i == 0 {
            return self.values[0];
        }
        if i == self.steps.len() {
            return self.values[i - 1];
        }
        let (x0, x1) = (self.steps[i - 1], self.steps[i]);
        let (y0, y1) = (self.values[i - 1], self.values[i]);
        if x1 == x0 {
            return y1;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// Pulls `scalar` out of the records of kind `kind` (any kind if `None`).
pub fn extract(records: &[MetricsRecord], scalar: &str, kind: Option<&str>) -> Result<Series, CliError> {
    let mut points = Vec::new();
    for r in records {
        if kind.is_some_and(|k| k != r.kind) {
            continue;
        }
        let value = serde_json::to_value(r).map_err(|e| CliError::Numeric(e.to_string()))?;
        let field = value
            .get(scalar)
            .ok_or_else(|| CliError::Config(format!("metrics records have no field `{scalar}`")))?;
        if let Some(v) = field.as_f64() {
            points.push((r.step as f64, v));
        }
    }
    if points.is_empty() {
        return Err(CliError::Config(format!("no `{scalar}` values found")));
    }
    Ok(Series::new(points))
}

/// Mean and `mean ± std` of several series on the union of their steps.
#[derive(Clone, Debug, PartialEq)]
pub struct Band {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

pub fn aggregate(series: &[Series]) -> Band {
    assert!(!series.is_empty(), "need at least one series");
    let mut grid: Vec<f64> = series.iter().flat_map(|s| s.steps.iter().copied()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let n = series.len() as f64;
    let (mut mean, mut lo, mut hi) = (Vec::new(), Vec::new(), Vec::new());
    for &x in &grid {
        let ys: Vec<f64> = series.iter().map(|s| s.at(x)).collect();
        let m = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n).sqrt();
        mean.push(m);
        lo.push(m - sd);
        hi.push(m + sd);
    }
    Band { grid, mean, lo, hi }
}

/// RGB raster with the origin at the top left.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, bg: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: bg.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.pixels[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Bresenham line, both ends included.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        for (k, ch) in s.chars().enumerate() {
            let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else {
                continue;
            };
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits >> col & 1 == 1 {
                        self.set(x + 8 * k as i64 + col, y + row as i64, c);
                    }
                }
            }
        }
    }

    pub fn into_image(self) -> Image {
        Image::rgb(self.width, self.height, self.pixels)
    }
}

/// Short tick label: up to 3 significant decimals, scientific beyond 1e5.
pub fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

pub const BAND: [u8; 3] = [190, 210, 240];
pub const LINE: [u8; 3] = [20, 60, 170];
const AXIS: [u8; 3] = [0, 0, 0];
const LEFT: usize = 72;
const RIGHT: usize = 16;
const TOP: usize = 28;
const BOTTOM: usize = 36;

/// Draws `band` with a title line.
pub fn render(band: &Band, title: &str, width: usize, height: usize) -> Canvas {
    let mut c = Canvas::new(width, height, [255; 3]);
    let (x0, x1) = (LEFT as f64, (width - RIGHT) as f64);
    let (y0, y1) = ((height - BOTTOM) as f64, TOP as f64);
    let xmin = band.grid[0];
    let xmax = *band.grid.last().unwrap();
    let mut ymin = band.lo.iter().copied().fold(f64::INFINITY, f64::min);
    let mut ymax = band.hi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if ymax - ymin < 1e-12 {
        (ymin, ymax) = (ymin - 0.5, ymax + 0.5);
    }
    let xspan = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| (x0 + (x - xmin) / xspan * (x1 - x0)).round() as i64;
    let py = |y: f64| (y0 + (y - ymin) / (ymax - ymin) * (y1 - y0)).round() as i64;

    let lo = Series {
        steps: band.grid.clone(),
        values: band.lo.clone(),
    };
    let hi = Series {
        steps: band.grid.clone(),
        values: band.hi.clone(),
    };
    for x in px(xmin)..=px(xmax) {
        let data_x = xmin + (x as f64 - x0) / (x1 - x0) * xspan;
        let (a, b) = (py(hi.at(data_x)), py(lo.at(data_x)));
        if b > a {
            for y in a..=b {
                c.set(x, y, BAND);
            }
        }
    }
    let pts: Vec<(i64, i64)> = band
        .grid
        .iter()
        .zip(&band.mean)
        .map(|(&x, &y)| (px(x), py(y)))
        .collect();
    if pts.len() == 1 {
        c.line((pts[0].0 - 2, pts[0].1), (pts[0].0 + 2, pts[0].1), LINE);
    }
    for w in pts.windows(2) {
        c.line(w[0], w[1], LINE);
    }

    c.line((x0 as i64, y0 as i64), (x1 as i64, y0 as i64), AXIS);
    c.line((x0 as i64, y0 as i64), (x0 as i64, y1 as i64), AXIS);
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let xv = xmin + t * xspan;
        let yv = ymin + t * (ymax - ymin);
        let (tx, ty) = (px(xv), py(yv));
        c.line((tx, y0 as i64), (tx, y0 as i64 + 4), AXIS);
        c.line((x0 as i64 - 4, ty), (x0 as i64, ty), AXIS);
        let xl = tick_label(xv);
        c.text(tx - 4 * xl.len() as i64, y0 as i64 + 8, &xl, AXIS);
        let yl = tick_label(yv);
        c.text(x0 as i64 - 8 - 8 * yl.len() as i64, ty - 4, &yl, AXIS);
    }
    c.text(LEFT as i64, 8, title, AXIS);
    c
}

/// Writes PNG when the extension says so, binary PPM otherwise.
pub fn save(image: &Image, path: &Path) -> Result<(), CliError> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        let color = if image.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer(path, &image.pixels, image.width as u32, image.height as u32, color)
            .map_err(|e| CliError::Io(std::io::Error::other(e)))
    } else {
        Ok(image.save(path)?)
    }
}
