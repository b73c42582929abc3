//! Minimal CMC curve rendering: axes, gridlines, and the polyline on a
//! fixed-size PNG canvas. No plotting library, no text.

use arn::Result;
use image::{Rgb, RgbImage};
use std::path::Path;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 48;

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as u32).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Render the CMC curve (rank-k accuracy, k starting at 1) to a PNG.
pub fn render_cmc(curve: &[f64], path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let grid = Rgb([220, 220, 220]);
    let axis = Rgb([0, 0, 0]);
    let line = Rgb([30, 90, 200]);

    let x_of = |rank: f64| {
        MARGIN as f64 + rank / curve.len().max(1) as f64 * (WIDTH - 2 * MARGIN) as f64
    };
    let y_of = |acc: f64| (HEIGHT - MARGIN) as f64 - acc * (HEIGHT - 2 * MARGIN) as f64;

    // Horizontal gridlines every 0.1.
    for i in 0..=10 {
        let y = y_of(i as f64 / 10.0);
        draw_line(&mut img, MARGIN as f64, y, (WIDTH - MARGIN) as f64, y, grid);
    }
    // Axes.
    draw_line(
        &mut img,
        MARGIN as f64,
        MARGIN as f64,
        MARGIN as f64,
        (HEIGHT - MARGIN) as f64,
        axis,
    );
    draw_line(
        &mut img,
        MARGIN as f64,
        (HEIGHT - MARGIN) as f64,
        (WIDTH - MARGIN) as f64,
        (HEIGHT - MARGIN) as f64,
        axis,
    );
    // Curve.
    for pair in curve.windows(2).enumerate() {
        let (i, w) = pair;
        draw_line(
            &mut img,
            x_of((i + 1) as f64),
            y_of(w[0]),
            x_of((i + 2) as f64),
            y_of(w[1]),
            line,
        );
    }
    img.save(path)
        .map_err(|e| arn::ArnError::Data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}
