//! Static loss-curve images: segmentation loss on the top panel and the MI
//! estimate on the bottom panel, with the warm-up boundary marked.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::trainer::{Phase, TrainHistory};

const WIDTH: u32 = 800;
const PANEL: u32 = 220;
const MARGIN: u32 = 20;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([90, 90, 90]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const SEG: Rgb<u8> = Rgb([31, 119, 180]);
const MI: Rgb<u8> = Rgb([214, 39, 40]);
const BOUNDARY: Rgb<u8> = Rgb([150, 150, 150]);

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
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

struct Panel {
    top: u32,
}

impl Panel {
    fn frame(&self, img: &mut RgbImage) {
        let (l, r) = (MARGIN as i64, (WIDTH - MARGIN) as i64);
        let (t, b) = (self.top as i64, (self.top + PANEL) as i64);
        for k in 1..4 {
            let y = t + (b - t) * k / 4;
            line(img, (l, y), (r, y), GRID);
        }
        line(img, (l, t), (l, b), AXIS);
        line(img, (l, b), (r, b), AXIS);
    }

    fn curve(&self, img: &mut RgbImage, points: &[(usize, f64)], max_iter: usize, color: Rgb<u8>) {
        let finite: Vec<f64> = points.iter().map(|p| p.1).filter(|v| v.is_finite()).collect();
        let (Some(lo), Some(hi)) = (
            finite.iter().copied().reduce(f64::min),
            finite.iter().copied().reduce(f64::max),
        ) else {
            return;
        };
        let span = if hi > lo { hi - lo } else { 1.0 };
        let plot_w = (WIDTH - 2 * MARGIN) as f64;
        let to_px = |(it, v): (usize, f64)| {
            let x = MARGIN as f64 + plot_w * it as f64 / max_iter.max(1) as f64;
            let y = self.top as f64 + PANEL as f64 * (1.0 - (v - lo) / span);
            (x.round() as i64, y.round() as i64)
        };
        let mut prev: Option<(i64, i64)> = None;
        for &p in points.iter().filter(|p| p.1.is_finite()) {
            let q = to_px(p);
            if let Some(a) = prev {
                line(img, a, q, color);
            }
            prev = Some(q);
        }
    }
}

/// Smooths a series with a trailing moving average.
fn smooth(points: &[(usize, f64)], window: usize) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(points.len());
    let mut sum = 0.0;
    for (i, &(it, v)) in points.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= points[i - window].1;
        }
        out.push((it, sum / (i + 1).min(window) as f64));
    }
    out
}

pub fn render_loss_curve(history: &TrainHistory) -> RgbImage {
    let height = 2 * PANEL + 3 * MARGIN;
    let mut img = RgbImage::from_pixel(WIDTH, height, WHITE);
    let seg_panel = Panel { top: MARGIN };
    let mi_panel = Panel { top: 2 * MARGIN + PANEL };
    seg_panel.frame(&mut img);
    mi_panel.frame(&mut img);
    let max_iter = history.iters.last().map_or(1, |r| r.iter);
    let window = (history.len() / 100).max(1);
    let seg: Vec<(usize, f64)> = history.iters.iter().map(|r| (r.iter, r.seg_loss)).collect();
    let mi: Vec<(usize, f64)> = history.iters.iter().filter_map(|r| r.mi_estimate.map(|m| (r.iter, m))).collect();
    seg_panel.curve(&mut img, &smooth(&seg, window), max_iter, SEG);
    mi_panel.curve(&mut img, &smooth(&mi, window), max_iter, MI);
    if let Some(first_joint) = history.iters.iter().find(|r| r.phase == Phase::Joint) {
        let x = MARGIN as i64 + ((WIDTH - 2 * MARGIN) as f64 * first_joint.iter as f64 / max_iter as f64) as i64;
        line(&mut img, (x, MARGIN as i64), (x, (height - MARGIN) as i64), BOUNDARY);
    }
    img
}

pub fn write_loss_curve(history: &TrainHistory, path: &Path) -> Result<()> {
    render_loss_curve(history).save(path).map_err(|e| Error::write(path, e))
}
