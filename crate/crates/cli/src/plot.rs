//! Precision-recall curve rendering to PNG with a built-in 5x7 bitmap font.

use std::path::Path;

use lenspatch::error::{Error, Result};
use lenspatch::evaluation::PrPoint;

pub struct Curve<'a> {
    pub label: String,
    pub color: [u8; 3],
    pub points: &'a [PrPoint],
}

/// Palette for the standard conditions.
pub fn condition_color(name: &str) -> [u8; 3] {
    match name {
        "CLEAN" => [40, 120, 40],
        "PATCH" => [200, 30, 30],
        "RANDOM" => [230, 140, 20],
        "RED" => [140, 20, 140],
        "CYAN" => [20, 150, 190],
        _ => [60, 60, 60],
    }
}

const W: u32 = 640;
const H: u32 = 480;
const ML: i64 = 70; // left margin
const MR: i64 = 24;
const MT: i64 = 40;
const MB: i64 = 56;

pub fn plot_pr_curves(path: &Path, title: &str, curves: &[Curve]) -> Result<()> {
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));

    let x_of = |recall: f64| ML + (recall.clamp(0.0, 1.0) * (W as i64 - ML - MR) as f64) as i64;
    let y_of =
        |precision: f64| H as i64 - MB - (precision.clamp(0.0, 1.0) * (H as i64 - MT - MB) as f64) as i64;

    // Grid and tick labels at 0.2 steps.
    for k in 0..=5 {
        let v = k as f64 * 0.2;
        let grid = [210, 210, 210];
        draw_line(&mut img, x_of(v), y_of(0.0), x_of(v), y_of(1.0), grid);
        draw_line(&mut img, x_of(0.0), y_of(v), x_of(1.0), y_of(v), grid);
        let label = format!("{v:.1}");
        draw_text(&mut img, &label, x_of(v) - 10, H as i64 - MB + 8, 2, [0, 0, 0]);
        draw_text(&mut img, &label, ML - 36, y_of(v) - 6, 2, [0, 0, 0]);
    }
    // Axes.
    draw_line(&mut img, x_of(0.0), y_of(0.0), x_of(1.0), y_of(0.0), [0, 0, 0]);
    draw_line(&mut img, x_of(0.0), y_of(0.0), x_of(0.0), y_of(1.0), [0, 0, 0]);
    draw_text(&mut img, "RECALL", (W as i64) / 2 - 36, H as i64 - 24, 2, [0, 0, 0]);
    draw_text_vertical(&mut img, "PRECISION", 10, (H as i64) / 2 - 54, 2, [0, 0, 0]);
    draw_text(&mut img, title, ML, 12, 2, [0, 0, 0]);

    // Curves: start each at (0, first precision) for a connected line.
    for curve in curves {
        if curve.points.is_empty() {
            continue;
        }
        let mut prev = (x_of(0.0), y_of(curve.points[0].precision));
        for p in curve.points {
            let next = (x_of(p.recall), y_of(p.precision));
            draw_thick_line(&mut img, prev.0, prev.1, next.0, next.1, curve.color);
            prev = next;
        }
    }

    // Legend, top-right.
    let mut ly = MT + 6;
    for curve in curves {
        let lx = W as i64 - MR - 150;
        draw_thick_line(&mut img, lx, ly + 5, lx + 24, ly + 5, curve.color);
        draw_text(&mut img, &curve.label, lx + 30, ly, 2, [0, 0, 0]);
        ly += 18;
    }

    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn put(img: &mut image::RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

fn draw_line(img: &mut image::RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 as f64 + (x1 - x0) as f64 * t;
        let y = y0 as f64 + (y1 - y0) as f64 * t;
        put(img, x.round() as i64, y.round() as i64, color);
    }
}

fn draw_thick_line(img: &mut image::RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    draw_line(img, x0, y0, x1, y1, color);
    draw_line(img, x0 + 1, y0, x1 + 1, y1, color);
    draw_line(img, x0, y0 + 1, x1, y1 + 1, color);
}

/// 5x7 glyphs, one byte per row, low 5 bits used (MSB of the 5 on the left).
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        _ => [0x00; 7],
    }
}

fn draw_text(img: &mut image::RgbImage, text: &str, x: i64, y: i64, scale: i64, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..5 {
                if row & (1 << (4 - rx)) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(
                                img,
                                cx + rx as i64 * scale + sx,
                                y + ry as i64 * scale + sy,
                                color,
                            );
                        }
                    }
                }
            }
        }
        cx += 6 * scale;
    }
}

fn draw_text_vertical(
    img: &mut image::RgbImage,
    text: &str,
    x: i64,
    y: i64,
    scale: i64,
    color: [u8; 3],
) {
    let mut cy = y;
    for ch in text.chars() {
        draw_text(img, &ch.to_string(), x, cy, scale, color);
        cy += 8 * scale;
    }
}
