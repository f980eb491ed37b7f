//! PNG figures: histogram overlays of real and translated intensities, and
//! side-by-side segmentation panels.

use crate::error::{PcnError, Result};
use crate::eval::HistogramComparison;
use crate::phantom::Histogram;
use crate::types::{LabelMask, Volume, HU_MAX, HU_MIN};

type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const AXIS: Rgb = [40, 40, 40];
const REAL: Rgb = [31, 119, 180];
const GENERATED: Rgb = [255, 127, 14];
/// Label colors; class 0 is black.
const PALETTE: [Rgb; 6] = [
    [0, 0, 0],
    [230, 200, 60],
    [220, 50, 50],
    [60, 110, 230],
    [90, 200, 90],
    [200, 90, 200],
];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self {
            width,
            height,
            px: vec![fill; width * height],
        }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.px[y as usize * self.width + x as usize] = c;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.px[y * self.width + x]
    }

    /// Bresenham line, both ends included.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x: usize, y: usize, w: usize, h: usize, c: Rgb) {
        for yy in y..(y + h).min(self.height) {
            for xx in x..(x + w).min(self.width) {
                self.px[yy * self.width + xx] = c;
            }
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(png_err)?;
            let flat: Vec<u8> = self.px.iter().flatten().copied().collect();
            w.write_image_data(&flat).map_err(png_err)?;
        }
        Ok(out)
    }
}

fn png_err(e: png::EncodingError) -> PcnError {
    PcnError::Io(std::io::Error::other(e.to_string()))
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 260;
const MARGIN: usize = 24;

fn draw_hist(c: &mut Canvas, h: &Histogram, top: f64, color: Rgb) {
    let (x0, x1) = (MARGIN as f64, (PLOT_W - MARGIN) as f64);
    let (y0, y1) = ((PLOT_H - MARGIN) as f64, MARGIN as f64);
    let n = h.bins() as f64;
    let to_y = |f: f64| (y0 + (y1 - y0) * f / top).round() as i64;
    let mut prev: Option<(i64, i64)> = None;
    for (i, &f) in h.freq.iter().enumerate() {
        let xa = (x0 + (x1 - x0) * i as f64 / n).round() as i64;
        let xb = (x0 + (x1 - x0) * (i + 1) as f64 / n).round() as i64;
        let y = to_y(f);
        if let Some(p) = prev {
            c.line(p, (xa, y), color);
        }
        c.line((xa, y), (xb, y), color);
        prev = Some((xb, y));
    }
    // Dashed marker at the peak.
    let px = (x0 + (x1 - x0) * (h.mode_bin() as f64 + 0.5) / n).round() as i64;
    for y in (y1 as i64..y0 as i64).step_by(6) {
        c.line((px, y), (px, y + 2), color);
    }
}

/// Real (blue) and generated (orange) normalized histograms on shared axes.
pub fn histogram_overlay(cmp: &HistogramComparison) -> Result<Vec<u8>> {
    if cmp.real.bins() != cmp.generated.bins() || cmp.real.bins() == 0 {
        return Err(PcnError::ShapeMismatch("histograms need the same nonzero bin count".into()));
    }
    let mut c = Canvas::new(PLOT_W, PLOT_H, WHITE);
    let (l, r, t, b) = (MARGIN as i64, (PLOT_W - MARGIN) as i64, MARGIN as i64, (PLOT_H - MARGIN) as i64);
    c.line((l, b), (r, b), AXIS);
    c.line((l, b), (l, t), AXIS);
    // Ticks every 50 HU across the window.
    let span = HU_MAX - HU_MIN;
    let mut hu = HU_MIN;
    while hu <= HU_MAX + 1e-9 {
        let x = (l as f64 + (r - l) as f64 * (hu - HU_MIN) / span).round() as i64;
        c.line((x, b), (x, b + 4), AXIS);
        hu += 50.0;
    }
    let top = cmp
        .real
        .freq
        .iter()
        .chain(&cmp.generated.freq)
        .fold(0.0f64, |a, &v| a.max(v))
        .max(1e-12)
        * 1.05;
    draw_hist(&mut c, &cmp.real, top, REAL);
    draw_hist(&mut c, &cmp.generated, top, GENERATED);
    c.to_png()
}

/// One row of tiles: the input in the HU window, then each label map.
pub fn segmentation_panel(input: &Volume, labels: &[&LabelMask], scale: usize) -> Result<Vec<u8>> {
    let (h, w) = input.shape();
    if labels.iter().any(|m| m.shape() != (h, w)) {
        return Err(PcnError::ShapeMismatch("panel masks must match the input grid".into()));
    }
    let s = scale.max(1);
    let gap = 4;
    let tiles = 1 + labels.len();
    let mut c = Canvas::new(tiles * w * s + (tiles - 1) * gap, h * s, WHITE);
    for y in 0..h {
        for x in 0..w {
            let g = ((input.at(y, x) - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0);
            let v = (g * 255.0).round() as u8;
            c.fill_rect(x * s, y * s, s, s, [v, v, v]);
            for (t, m) in labels.iter().enumerate() {
                let k = m.data[y * w + x] as usize;
                let ox = (t + 1) * (w * s + gap);
                c.fill_rect(ox + x * s, y * s, s, s, PALETTE[k % PALETTE.len()]);
            }
        }
    }
    c.to_png()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{LabelPhase, PhaseTag};

    fn hist(freq: Vec<f64>) -> Histogram {
        let n = freq.len();
        Histogram {
            edges: (0..=n).map(|i| HU_MIN + (HU_MAX - HU_MIN) * i as f64 / n as f64).collect(),
            freq,
        }
    }

    #[test]
    fn overlay_is_a_deterministic_png() {
        let cmp = HistogramComparison {
            real: hist(vec![0.1, 0.6, 0.3, 0.0]),
            generated: hist(vec![0.0, 0.3, 0.6, 0.1]),
            peak_distance: 100.0,
            l1: 0.8,
        };
        let a = histogram_overlay(&cmp).unwrap();
        assert_eq!(&a[1..4], b"PNG");
        assert_eq!(a, histogram_overlay(&cmp).unwrap());
        let bad = HistogramComparison {
            generated: hist(vec![1.0]),
            ..cmp
        };
        assert!(histogram_overlay(&bad).is_err());
    }

    #[test]
    fn panel_checks_shapes() {
        let v = Volume::new(8, 8, vec![0.0; 64], PhaseTag::Venous, "c").unwrap();
        let m = LabelMask::new(8, 8, vec![1; 64], 4, LabelPhase::Venous).unwrap();
        let png = segmentation_panel(&v, &[&m, &m], 3).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        let small = LabelMask::new(8, 9, vec![1; 72], 4, LabelPhase::Venous).unwrap();
        assert!(segmentation_panel(&v, &[&small], 3).is_err());
    }

    #[test]
    fn line_endpoints() {
        let mut c = Canvas::new(10, 10, WHITE);
        c.line((1, 1), (8, 5), AXIS);
        assert_eq!(c.get(1, 1), AXIS);
        assert_eq!(c.get(8, 5), AXIS);
        c.line((-5, -5), (20, 20), AXIS);
        assert_eq!(c.get(9, 9), AXIS);
    }
}
