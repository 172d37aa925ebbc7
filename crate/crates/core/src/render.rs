//! Differentiable rendering of patch parameters into a full-frame RGBA
//! patch, and alpha compositing of that patch over scene images.
//!
//! Every operation here is a pure function of its inputs, and each forward
//! pass has a matching hand-derived backward pass. Rendering depends only on
//! the parameters and the target dimensions, so the same patch layer is
//! bit-identical across scenes of equal size.

use crate::error::{Error, Result};
use crate::image_io::{PatchImage, SceneImage};
use crate::patch::{ManualParams, PatchParams, ShapeParams};

/// Per-shape gradient of a scalar loss with respect to the free parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ShapeGrad {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub shear_x: f64,
    pub shear_y: f64,
    pub color: [f64; 3],
}

impl ShapeGrad {
    pub fn to_flat(&self) -> [f64; 8] {
        [
            self.center_x,
            self.center_y,
            self.radius,
            self.shear_x,
            self.shear_y,
            self.color[0],
            self.color[1],
            self.color[2],
        ]
    }
}

/// Geometry of one shape resolved against a concrete raster size.
#[derive(Debug, Clone, Copy)]
struct ShapeGeometry {
    cx_px: f64,
    cy_px: f64,
    r_norm: f64,
    sh_x: f64,
    sh_y: f64,
    /// det of the shear matrix [[1, sh_x], [sh_y, 1]]; in [0, 2] for
    /// shears in [-1, 1], guarded away from zero.
    det: f64,
    half_w: f64,
    half_h: f64,
}

const DET_GUARD: f64 = 1e-12;

fn resolve_geometry(
    shape: &ShapeParams,
    manual: &ManualParams,
    width: usize,
    height: usize,
) -> Result<ShapeGeometry> {
    let fw = (width / 2) as f64;
    let fh = (height / 2) as f64;
    let fmin = (width.min(height) / 2) as f64;
    let r_norm = shape.radius * fmin;
    if r_norm <= 0.0 {
        return Err(Error::DegeneratePatchDims { width, height });
    }
    let det = (1.0 - shape.shear_x * shape.shear_y).max(DET_GUARD);

    // Support bound: alpha clamps to zero at d >= (1/s)^(1/beta), i.e. at
    // pull-back radius R = r_norm * sqrt((1/s)^(1/beta)). In image space the
    // support is the ellipse {c + M p' : |p'| <= R}, whose bounding half
    // extents are R * ||row_i(M)||.
    let (half_w, half_h) = if manual.s > 0.0 {
        let r_support = r_norm * (1.0 / manual.s).powf(1.0 / manual.beta).sqrt();
        (
            r_support * (1.0 + shape.shear_x * shape.shear_x).sqrt(),
            r_support * (1.0 + shape.shear_y * shape.shear_y).sqrt(),
        )
    } else {
        // s = 0 gives constant opacity alpha_max over the whole frame.
        (f64::INFINITY, f64::INFINITY)
    };

    Ok(ShapeGeometry {
        cx_px: (1.0 - shape.center_x) * fw,
        cy_px: (1.0 - shape.center_y) * fh,
        r_norm,
        sh_x: shape.shear_x,
        sh_y: shape.shear_y,
        det,
        half_w,
        half_h,
    })
}

impl ShapeGeometry {
    /// Pixel range [x0, x1) x [y0, y1) covering the shape's support.
    fn support_box(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = (self.cx_px - self.half_w).floor().max(0.0) as usize;
        let y0 = (self.cy_px - self.half_h).floor().max(0.0) as usize;
        let x1 = ((self.cx_px + self.half_w).ceil() + 1.0).min(width as f64) as usize;
        let y1 = ((self.cy_px + self.half_h).ceil() + 1.0).min(height as f64) as usize;
        (x0, x1.max(x0), y0, y1.max(y0))
    }

    /// Squared normalized distance of pixel (i, j) from the shape center,
    /// evaluated on coordinates pulled back through the inverse shear.
    #[inline]
    fn distance(&self, i: f64, j: f64) -> (f64, f64, f64, f64, f64) {
        let u = i - self.cx_px;
        let v = j - self.cy_px;
        let up = (u - self.sh_x * v) / self.det;
        let vp = (v - self.sh_y * u) / self.det;
        let d = (up * up + vp * vp) / (self.r_norm * self.r_norm);
        (d, u, v, up, vp)
    }
}

/// Opacity at squared normalized distance `d`: `alpha_max * (1 - s * d^beta)`
/// clamped below at zero.
#[inline]
pub fn alpha_at_distance(d: f64, manual: &ManualParams) -> f64 {
    (manual.alpha_max * (1.0 - manual.s * d.powf(manual.beta))).max(0.0)
}

/// Render one shape's per-pixel opacity field at the given dimensions.
///
/// Returns a row-major plane of length `width * height`. Errors when the
/// raster is too small for a nonzero normalized radius.
pub fn shape_alpha_map(
    shape: &ShapeParams,
    manual: &ManualParams,
    width: usize,
    height: usize,
) -> Result<Vec<f64>> {
    let geom = resolve_geometry(shape, manual, width, height)?;
    let mut plane = vec![0.0; width * height];
    let (x0, x1, y0, y1) = geom.support_box(width, height);
    for j in y0..y1 {
        for i in x0..x1 {
            let (d, ..) = geom.distance(i as f64, j as f64);
            plane[j * width + i] = alpha_at_distance(d, manual);
        }
    }
    Ok(plane)
}

/// Saved forward state for the layered render of one parameter set.
pub struct RenderCache {
    width: usize,
    height: usize,
    geoms: Vec<ShapeGeometry>,
    /// Per-shape opacity layers, full frame.
    layers: Vec<Vec<f64>>,
    /// Accumulated alpha after each shape; index 0 is the empty canvas.
    prefix_alpha: Vec<Vec<f64>>,
    /// Accumulated premultiplied color after each shape, planar RGB.
    prefix_premul: Vec<Vec<f64>>,
}

/// Composite all shapes in list order onto a transparent canvas.
///
/// Overlaps accumulate with the alpha-over operator; the final opacity is
/// clamped to the manual ceiling `alpha_max`.
pub fn composite_shapes(params: &PatchParams, width: usize, height: usize) -> Result<PatchImage> {
    composite_shapes_cached(params, width, height).map(|(p, _)| p)
}

pub fn composite_shapes_cached(
    params: &PatchParams,
    width: usize,
    height: usize,
) -> Result<(PatchImage, RenderCache)> {
    params.validate()?;
    let npx = width * height;
    let n = params.shapes.len();
    let mut cache = RenderCache {
        width,
        height,
        geoms: Vec::with_capacity(n),
        layers: Vec::with_capacity(n),
        prefix_alpha: Vec::with_capacity(n + 1),
        prefix_premul: Vec::with_capacity(n + 1),
    };
    cache.prefix_alpha.push(vec![0.0; npx]);
    cache.prefix_premul.push(vec![0.0; 3 * npx]);

    for shape in &params.shapes {
        let geom = resolve_geometry(shape, &params.manual, width, height)?;
        let mut layer = vec![0.0; npx];
        let (x0, x1, y0, y1) = geom.support_box(width, height);
        for j in y0..y1 {
            for i in x0..x1 {
                let (d, ..) = geom.distance(i as f64, j as f64);
                layer[j * width + i] = alpha_at_distance(d, &params.manual);
            }
        }

        let prev_a = cache.prefix_alpha.last().unwrap();
        let prev_p = cache.prefix_premul.last().unwrap();
        let mut next_a = prev_a.clone();
        let mut next_p = prev_p.clone();
        for j in y0..y1 {
            for i in x0..x1 {
                let px = j * width + i;
                let a = layer[px];
                if a == 0.0 {
                    continue;
                }
                next_a[px] = a + prev_a[px] * (1.0 - a);
                for c in 0..3 {
                    next_p[c * npx + px] =
                        shape.color[c] * a + prev_p[c * npx + px] * (1.0 - a);
                }
            }
        }
        cache.geoms.push(geom);
        cache.layers.push(layer);
        cache.prefix_alpha.push(next_a);
        cache.prefix_premul.push(next_p);
    }

    let final_a = cache.prefix_alpha.last().unwrap();
    let final_p = cache.prefix_premul.last().unwrap();
    let mut patch = PatchImage::transparent(width, height);
    for px in 0..npx {
        let a = final_a[px];
        patch.alpha[px] = a.min(params.manual.alpha_max);
        if a > 0.0 {
            for c in 0..3 {
                patch.color[c * npx + px] = final_p[c * npx + px] / a;
            }
        }
    }
    Ok((patch, cache))
}

/// Alpha-blend the patch over the scene:
/// `perturbed = original * (1 - alpha) + color * alpha` per channel.
pub fn alpha_blend(scene: &SceneImage, patch: &PatchImage) -> Result<SceneImage> {
    if scene.width != patch.width || scene.height != patch.height {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", scene.width, scene.height),
            actual: format!("{}x{}", patch.width, patch.height),
        });
    }
    let npx = scene.width * scene.height;
    let mut out = scene.clone();
    let data = out.data_mut();
    for px in 0..npx {
        let a = patch.alpha[px];
        for c in 0..3 {
            let idx = c * npx + px;
            data[idx] = data[idx] * (1.0 - a) + patch.color[idx] * a;
        }
    }
    Ok(out)
}

/// Render the patch at scene resolution and blend it over the scene.
pub fn render_and_apply(params: &PatchParams, scene: &SceneImage) -> Result<SceneImage> {
    let patch = composite_shapes(params, scene.width, scene.height)?;
    alpha_blend(scene, &patch)
}

pub fn render_and_apply_cached(
    params: &PatchParams,
    scene: &SceneImage,
) -> Result<(SceneImage, RenderCache)> {
    let (patch, cache) = composite_shapes_cached(params, scene.width, scene.height)?;
    let out = alpha_blend(scene, &patch)?;
    Ok((out, cache))
}

/// Backward pass of [`render_and_apply`]: pull a gradient with respect to
/// the blended output (planar RGB, same layout as the scene) back to the
/// free parameters of every shape.
pub fn render_backward(
    params: &PatchParams,
    scene: &SceneImage,
    cache: &RenderCache,
    d_out: &[f64],
) -> Vec<ShapeGrad> {
    let (width, height) = (cache.width, cache.height);
    let npx = width * height;
    debug_assert_eq!(d_out.len(), 3 * npx);
    let n = params.shapes.len();
    let alpha_max = params.manual.alpha_max;

    // Blend + unpremultiply backward, split by whether the final clamp to
    // alpha_max is active. In the unclamped regime the output is
    // scene * (1 - A) + P, which avoids the P/A division entirely.
    let final_a = &cache.prefix_alpha[n];
    let final_p = &cache.prefix_premul[n];
    let mut d_alpha = vec![0.0; npx];
    let mut d_premul = vec![0.0; 3 * npx];
    for px in 0..npx {
        let a = final_a[px];
        if a <= alpha_max {
            let mut da = 0.0;
            for c in 0..3 {
                let g = d_out[c * npx + px];
                d_premul[c * npx + px] = g;
                da -= g * scene.data()[c * npx + px];
            }
            d_alpha[px] = da;
        } else {
            let scale = alpha_max / a;
            let mut da = 0.0;
            for c in 0..3 {
                let g = d_out[c * npx + px];
                d_premul[c * npx + px] = g * scale;
                da -= g * final_p[c * npx + px] * (scale / a);
            }
            d_alpha[px] = da;
        }
    }

    // Walk the over-compositing recurrence backwards, peeling one shape at
    // a time and handing each shape's layer-alpha gradient to the geometry
    // chain rule.
    let mut grads = vec![ShapeGrad::default(); n];
    for k in (0..n).rev() {
        let shape = &params.shapes[k];
        let geom = &cache.geoms[k];
        let layer = &cache.layers[k];
        let prev_a = &cache.prefix_alpha[k];
        let prev_p = &cache.prefix_premul[k];
        let g = &mut grads[k];
        let (x0, x1, y0, y1) = geom.support_box(width, height);
        let fw = (width / 2) as f64;
        let fh = (height / 2) as f64;
        let fmin = (width.min(height) / 2) as f64;
        let beta = params.manual.beta;
        let neg_as = -alpha_max * params.manual.s;

        for j in y0..y1 {
            for i in x0..x1 {
                let px = j * width + i;
                let a = layer[px];
                if a == 0.0 {
                    continue;
                }
                // d(loss)/d(a_k) through A_k = a + A_{k-1}(1-a) and
                // P_k = color*a + P_{k-1}(1-a).
                let mut d_a = d_alpha[px] * (1.0 - prev_a[px]);
                for c in 0..3 {
                    let dp = d_premul[c * npx + px];
                    d_a += dp * (shape.color[c] - prev_p[c * npx + px]);
                    g.color[c] += dp * a;
                    d_premul[c * npx + px] = dp * (1.0 - a);
                }
                d_alpha[px] *= 1.0 - a;

                // Geometry chain rule, recomputing the distance quantities.
                let (d, u, v, up, vp) = geom.distance(i as f64, j as f64);
                let g_t = d_a * neg_as;
                let g_d = if d > 0.0 {
                    g_t * beta * d.powf(beta - 1.0)
                } else if beta == 1.0 {
                    g_t
                } else {
                    0.0
                };
                let rn2 = geom.r_norm * geom.r_norm;
                let g_up = g_d * 2.0 * up / rn2;
                let g_vp = g_d * 2.0 * vp / rn2;
                let g_u = (g_up - g_vp * geom.sh_y) / geom.det;
                let g_v = (g_vp - g_up * geom.sh_x) / geom.det;
                g.center_x += g_u * fw;
                g.center_y += g_v * fh;
                g.radius += g_d * (-2.0 * d / geom.r_norm) * fmin;
                g.shear_x += (g_up * (geom.sh_y * up - v) + g_vp * geom.sh_y * vp) / geom.det;
                g.shear_y += (g_up * geom.sh_x * up + g_vp * (geom.sh_x * vp - u)) / geom.det;
            }
        }
    }
    grads
}
