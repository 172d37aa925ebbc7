//! Scene and patch raster types with 8-bit PNG import/export.
//!
//! Pixels are addressed as (i, j) = (column, row) with the origin at the
//! top-left corner. Channel data is stored as planar f64 in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};

/// RGB scene image, channels planar: data[c * w * h + j * w + i].
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl SceneImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::zeros(width, height);
        for c in 0..3 {
            let plane = &mut img.data[c * width * height..(c + 1) * width * height];
            plane.fill(rgb[c]);
        }
        img
    }

    pub fn from_planar(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} channel values", 3 * width * height),
                actual: format!("{}", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn idx(&self, c: usize, i: usize, j: usize) -> usize {
        c * self.width * self.height + j * self.width + i
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let idx = self.idx(c, i, j);
        self.data[idx] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &SceneImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for j in 0..self.height {
            for i in 0..self.width {
                let px = [
                    quantize(self.get(0, i, j)),
                    quantize(self.get(1, i, j)),
                    quantize(self.get(2, i, j)),
                ];
                buf.put_pixel(i as u32, j as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = SceneImage::zeros(w, h);
        for j in 0..h {
            for i in 0..w {
                let px = img.get_pixel(i as u32, j as u32);
                for c in 0..3 {
                    out.set(c, i, j, px.0[c] as f64 / 255.0);
                }
            }
        }
        Ok(out)
    }
}

/// Rendered patch: RGB color planes plus an opacity plane.
///
/// `alpha` is bounded by the manual opacity ceiling of the patch that
/// produced it; `color` channels lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchImage {
    pub width: usize,
    pub height: usize,
    /// Planar RGB, same layout as [`SceneImage`].
    pub color: Vec<f64>,
    /// Row-major opacity plane, length width * height.
    pub alpha: Vec<f64>,
}

impl PatchImage {
    pub fn transparent(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            color: vec![0.0; 3 * width * height],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn uniform(width: usize, height: usize, rgb: [f64; 3], alpha: f64) -> Self {
        let mut p = Self::transparent(width, height);
        for c in 0..3 {
            p.color[c * width * height..(c + 1) * width * height].fill(rgb[c]);
        }
        p.alpha.fill(alpha);
        p
    }

    #[inline]
    pub fn color_at(&self, c: usize, i: usize, j: usize) -> f64 {
        self.color[c * self.width * self.height + j * self.width + i]
    }

    #[inline]
    pub fn alpha_at(&self, i: usize, j: usize) -> f64 {
        self.alpha[j * self.width + i]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbaImage::new(self.width as u32, self.height as u32);
        for j in 0..self.height {
            for i in 0..self.width {
                let px = [
                    quantize(self.color_at(0, i, j)),
                    quantize(self.color_at(1, i, j)),
                    quantize(self.color_at(2, i, j)),
                    quantize(self.alpha_at(i, j)),
                ];
                buf.put_pixel(i as u32, j as u32, image::Rgba(px));
            }
        }
        buf.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .to_rgba8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = PatchImage::transparent(w, h);
        for j in 0..h {
            for i in 0..w {
                let px = img.get_pixel(i as u32, j as u32).0;
                for c in 0..3 {
                    out.color[c * w * h + j * w + i] = px[c] as f64 / 255.0;
                }
                out.alpha[j * w + i] = px[3] as f64 / 255.0;
            }
        }
        Ok(out)
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patch.png");
        let mut p = PatchImage::transparent(9, 5);
        for (k, a) in p.alpha.iter_mut().enumerate() {
            *a = (k as f64 / 44.0) * 0.4;
        }
        for (k, c) in p.color.iter_mut().enumerate() {
            *c = (k % 7) as f64 / 6.0;
        }
        p.save_png(&path).unwrap();
        let q = PatchImage::load_png(&path).unwrap();
        assert_eq!((q.width, q.height), (9, 5));
        let half_step = 0.5 / 255.0 + 1e-12;
        for (a, b) in p.alpha.iter().zip(q.alpha.iter()) {
            assert!((a - b).abs() <= half_step, "alpha {a} vs {b}");
        }
        for (a, b) in p.color.iter().zip(q.color.iter()) {
            assert!((a - b).abs() <= half_step, "color {a} vs {b}");
        }
    }

    #[test]
    fn scene_accessors_follow_column_row_convention() {
        let mut s = SceneImage::zeros(4, 3);
        s.set(1, 3, 2, 0.5); // green channel, last column, last row
        assert_eq!(s.get(1, 3, 2), 0.5);
        assert_eq!(s.data()[4 * 3 + 2 * 4 + 3], 0.5);
    }
}
