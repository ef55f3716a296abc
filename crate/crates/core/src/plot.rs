//! Minimal raster line plots: axes with ticks, polylines, dashed vertical
//! markers. No text rendering; legends belong in the accompanying CSV.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

pub const BLUE: [u8; 3] = [31, 119, 180];
pub const ORANGE: [u8; 3] = [255, 127, 14];
pub const GREEN: [u8; 3] = [44, 160, 44];
pub const BLACK: [u8; 3] = [0, 0, 0];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub color: [u8; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Plot {
    pub width: u32,
    pub height: u32,
    pub series: Vec<Series>,
    /// Dashed vertical markers at these x positions.
    pub markers: Vec<(f64, [u8; 3])>,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
}

const MARGIN: i64 = 40;

impl Plot {
    pub fn new(width: u32, height: u32) -> Self {
        Plot {
            width,
            height,
            series: Vec::new(),
            markers: Vec::new(),
            x_range: None,
            y_range: None,
        }
    }

    pub fn line(mut self, x: &[f64], y: &[f64], color: [u8; 3]) -> Self {
        self.series.push(Series {
            x: x.to_vec(),
            y: y.to_vec(),
            color,
        });
        self
    }

    pub fn marker(mut self, x: f64, color: [u8; 3]) -> Self {
        self.markers.push((x, color));
        self
    }

    fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            return (lo - 0.5, hi + 0.5);
        }
        (lo, hi)
    }

    pub fn render(&self) -> Result<RgbImage> {
        if (self.width as i64) < 2 * MARGIN + 10 || (self.height as i64) < 2 * MARGIN + 10 {
            return Err(Error::InvalidArgument(format!(
                "plot size {}x{} too small",
                self.width, self.height
            )));
        }
        for s in &self.series {
            if s.x.len() != s.y.len() {
                return Err(Error::ShapeMismatch(format!("series with {} x and {} y", s.x.len(), s.y.len())));
            }
        }
        let xr = self.x_range.unwrap_or_else(|| {
            Self::range(
                self.series
                    .iter()
                    .flat_map(|s| s.x.iter().copied())
                    .chain(self.markers.iter().map(|m| m.0)),
            )
        });
        let yr = self
            .y_range
            .unwrap_or_else(|| Self::range(self.series.iter().flat_map(|s| s.y.iter().copied())));
        let (w, h) = (self.width as i64, self.height as i64);
        let (x0, x1, y0, y1) = (MARGIN, w - MARGIN / 2, h - MARGIN, MARGIN / 2);
        let px = |x: f64| x0 + ((x - xr.0) / (xr.1 - xr.0) * (x1 - x0) as f64).round() as i64;
        let py = |y: f64| y0 - ((y - yr.0) / (yr.1 - yr.0) * (y0 - y1) as f64).round() as i64;

        let mut img = RgbImage::from_pixel(self.width, self.height, Rgb([255, 255, 255]));
        let grey = [200, 200, 200];
        for k in 0..=4 {
            let gx = x0 + (x1 - x0) * k / 4;
            let gy = y0 - (y0 - y1) * k / 4;
            draw_line(&mut img, gx, y0, gx, y0 + 5, BLACK);
            draw_line(&mut img, x0 - 5, gy, x0, gy, BLACK);
            if k > 0 {
                draw_line(&mut img, x0 + 1, gy, x1, gy, grey);
            }
        }
        draw_line(&mut img, x0, y0, x1, y0, BLACK);
        draw_line(&mut img, x0, y0, x0, y1, BLACK);
        for (x, color) in &self.markers {
            let gx = px(*x);
            let mut y = y1;
            while y < y0 {
                draw_line(&mut img, gx, y, gx, (y + 6).min(y0), *color);
                y += 12;
            }
        }
        for s in &self.series {
            for seg in s.x.windows(2).zip(s.y.windows(2)) {
                let (xs, ys) = seg;
                if xs.iter().chain(ys).all(|v| v.is_finite()) {
                    let (ax, ay, bx, by) = (px(xs[0]), py(ys[0]), px(xs[1]), py(ys[1]));
                    draw_line(&mut img, ax, ay, bx, by, s.color);
                    draw_line(&mut img, ax, ay - 1, bx, by - 1, s.color);
                }
            }
            for (x, y) in s.x.iter().zip(&s.y) {
                if x.is_finite() && y.is_finite() {
                    let (cx, cy) = (px(*x), py(*y));
                    for d in -2..=2 {
                        draw_line(&mut img, cx - 2, cy + d, cx + 2, cy + d, s.color);
                    }
                }
            }
        }
        Ok(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let img = self.render()?;
        Error::ensure_parent(path)?;
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

/// Bresenham segment, clipped per pixel.
fn draw_line(img: &mut RgbImage, mut x0: i64, mut y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, c);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_and_marker() {
        let img = Plot::new(200, 150)
            .line(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.5], BLUE)
            .marker(1.5, BLACK)
            .render()
            .unwrap();
        let count = |c: [u8; 3]| img.pixels().filter(|p| p.0 == c).count();
        assert!(count(BLUE) > 50);
        assert!(count(BLACK) > 100);
        assert!(Plot::new(20, 20).render().is_err());
        let bad = Plot::new(200, 150).line(&[0.0], &[0.0, 1.0], BLUE);
        assert!(bad.render().is_err());
    }
}
