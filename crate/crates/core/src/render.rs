//! Small deterministic raster helpers shared by overlays and curve plots.

use image::{Rgb, RgbImage};

pub fn blend(px: &mut Rgb<u8>, color: [u8; 3], alpha: f64) {
    for k in 0..3 {
        let old = px.0[k] as f64;
        px.0[k] = ((1.0 - alpha) * old + alpha * color[k] as f64).round() as u8;
    }
}

/// Thick line: walk the segment at sub-pixel steps, paint a 2x2 neighborhood
/// once per pixel. Coordinates are (row, col).
pub fn draw_line(
    canvas: &mut RgbImage,
    (r0, c0): (f64, f64),
    (r1, c1): (f64, f64),
    color: [u8; 3],
    alpha: f64,
) {
    let (h, w) = (canvas.height() as i64, canvas.width() as i64);
    let len = ((r1 - r0).powi(2) + (c1 - c0).powi(2)).sqrt().max(1.0);
    let steps = (len * 2.0).ceil() as usize;
    let mut painted = std::collections::HashSet::new();
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let r = r0 + t * (r1 - r0);
        let c = c0 + t * (c1 - c0);
        for dr in 0..2i64 {
            for dc in 0..2i64 {
                let rr = r.floor() as i64 + dr;
                let cc = c.floor() as i64 + dc;
                if rr >= 0 && rr < h && cc >= 0 && cc < w && painted.insert((rr, cc)) {
                    blend(canvas.get_pixel_mut(cc as u32, rr as u32), color, alpha);
                }
            }
        }
    }
}

pub fn draw_disc(canvas: &mut RgbImage, (r, c): (f64, f64), radius: f64, color: [u8; 3]) {
    let (h, w) = (canvas.height() as i64, canvas.width() as i64);
    let rad = radius.ceil() as i64;
    for dr in -rad..=rad {
        for dc in -rad..=rad {
            let rr = r.round() as i64 + dr;
            let cc = c.round() as i64 + dc;
            if rr >= 0 && rr < h && cc >= 0 && cc < w {
                let dist = ((dr * dr + dc * dc) as f64).sqrt();
                if dist <= radius {
                    *canvas.get_pixel_mut(cc as u32, rr as u32) = Rgb(color);
                }
            }
        }
    }
}

/// Plot one or more `(x, y)` polylines with `x, y` in `[0, 1]` onto a white
/// canvas with axis lines and 0.25-step grid ticks.
pub fn line_plot(
    curves: &[(&[(f64, f64)], [u8; 3])],
    width: u32,
    height: u32,
) -> RgbImage {
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin = 24.0;
    let (w, h) = (width as f64, height as f64);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let col = margin + x.clamp(0.0, 1.0) * (w - 2.0 * margin);
        let row = (h - margin) - y.clamp(0.0, 1.0) * (h - 2.0 * margin);
        (row, col)
    };
    let grid = [80u8, 80, 80];
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        draw_line(&mut canvas, to_px(t, 0.0), to_px(t, 0.01), grid, 1.0);
        draw_line(&mut canvas, to_px(0.0, t), to_px(0.01, t), grid, 1.0);
    }
    draw_line(&mut canvas, to_px(0.0, 0.0), to_px(1.0, 0.0), grid, 1.0);
    draw_line(&mut canvas, to_px(0.0, 0.0), to_px(0.0, 1.0), grid, 1.0);
    for (points, color) in curves {
        for pair in points.windows(2) {
            draw_line(&mut canvas, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), *color, 1.0);
        }
    }
    canvas
}
