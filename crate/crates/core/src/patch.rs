//! Patch parameterization: the fixed attack hyperparameters, the free
//! per-shape parameters the optimizer tunes, validation, random
//! initialization, and feasibility projection.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Free parameters of a single translucent shape.
///
/// `center_x`/`center_y` are expressed relative to the image center in
/// [-1, 1]; (0, 0) places the shape at the image center. `radius` is a
/// fraction of the patch size bounded by the manual radius interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub shear_x: f64,
    pub shear_y: f64,
    pub color: [f64; 3],
}

/// Number of scalar free parameters per shape.
pub const PARAMS_PER_SHAPE: usize = 8;

impl ShapeParams {
    /// Flatten into [center_x, center_y, radius, shear_x, shear_y, r, g, b].
    pub fn to_flat(&self) -> [f64; PARAMS_PER_SHAPE] {
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

    pub fn from_flat(v: &[f64]) -> Self {
        Self {
            center_x: v[0],
            center_y: v[1],
            radius: v[2],
            shear_x: v[3],
            shear_y: v[4],
            color: [v[5], v[6], v[7]],
        }
    }
}

/// Manually chosen attack hyperparameters, frozen during optimization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManualParams {
    /// Opacity ceiling of the patch.
    pub alpha_max: f64,
    /// Opacity drop fraction; the minimum opacity inside a shape is
    /// `alpha_max * (1 - s)`.
    pub s: f64,
    /// Exponential drop-off of opacity with distance.
    pub beta: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Number of shapes; zero means an empty (identity) patch.
    pub n_shapes: usize,
}

impl ManualParams {
    /// Derived minimum opacity inside a shape: `alpha_max * (1 - s)`.
    pub fn alpha_min(&self) -> f64 {
        self.alpha_max * (1.0 - self.s)
    }
}

impl Default for ManualParams {
    fn default() -> Self {
        Self {
            alpha_max: 0.4,
            s: 0.9,
            beta: 2.5,
            r_min: 0.03,
            r_max: 0.25,
            n_shapes: 8,
        }
    }
}

/// Check every manual-parameter bound, reporting the first violation by
/// field name. Returns the input unchanged when all bounds hold.
pub fn validate_manual(params: ManualParams) -> Result<ManualParams> {
    fn bound(field: &'static str, ok: bool, message: String) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParam { field, message })
        }
    }
    bound(
        "alpha_max",
        (0.0..=1.0).contains(&params.alpha_max),
        format!("must be in [0, 1], got {}", params.alpha_max),
    )?;
    bound(
        "s",
        (0.0..=1.0).contains(&params.s),
        format!("must be in [0, 1], got {}", params.s),
    )?;
    bound(
        "beta",
        params.beta > 0.0 && params.beta.is_finite(),
        format!("must be > 0, got {}", params.beta),
    )?;
    bound(
        "r_min",
        params.r_min > 0.0 && params.r_min < 1.0,
        format!("must be in (0, 1), got {}", params.r_min),
    )?;
    bound(
        "r_max",
        params.r_max > params.r_min && params.r_max <= 1.0,
        format!(
            "must be in (r_min, 1], got {} with r_min {}",
            params.r_max, params.r_min
        ),
    )?;
    Ok(params)
}

/// Full patch parameterization: ordered shapes (the compositing order) plus
/// the manual block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchParams {
    pub manual: ManualParams,
    pub shapes: Vec<ShapeParams>,
}

impl PatchParams {
    pub fn empty(manual: ManualParams) -> Self {
        Self {
            manual: ManualParams {
                n_shapes: 0,
                ..manual
            },
            shapes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_manual(self.manual)?;
        if self.shapes.len() != self.manual.n_shapes {
            return Err(Error::InvalidParam {
                field: "shapes",
                message: format!(
                    "expected {} shapes, got {}",
                    self.manual.n_shapes,
                    self.shapes.len()
                ),
            });
        }
        Ok(())
    }

    /// Flatten all free parameters in shape order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.shapes.len() * PARAMS_PER_SHAPE);
        for s in &self.shapes {
            out.extend_from_slice(&s.to_flat());
        }
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.shapes.len() * PARAMS_PER_SHAPE);
        for (k, s) in self.shapes.iter_mut().enumerate() {
            *s = ShapeParams::from_flat(&flat[k * PARAMS_PER_SHAPE..(k + 1) * PARAMS_PER_SHAPE]);
        }
    }

    /// Serialize to the canonical saved-patch text document.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            manual: &'a ManualParams,
            shapes: &'a [ShapeParams],
        }
        toml::to_string_pretty(&Doc {
            manual: &self.manual,
            shapes: &self.shapes,
        })
        .expect("patch params serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            manual: ManualParams,
            #[serde(default)]
            shapes: Vec<ShapeParams>,
        }
        let doc: Doc = toml::from_str(text).map_err(|e| Error::Invalid(e.to_string()))?;
        let params = PatchParams {
            manual: doc.manual,
            shapes: doc.shapes,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_toml(&text)
    }
}

/// Draw `n_shapes` shapes uniformly within their bounds. Deterministic for
/// a fixed seed.
pub fn init_free_params(manual: ManualParams, seed: u64) -> PatchParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = (0..manual.n_shapes)
        .map(|_| ShapeParams {
            center_x: rng.gen_range(-1.0..=1.0),
            center_y: rng.gen_range(-1.0..=1.0),
            radius: rng.gen_range(manual.r_min..=manual.r_max),
            shear_x: rng.gen_range(-1.0..=1.0),
            shear_y: rng.gen_range(-1.0..=1.0),
            color: [
                rng.gen_range(0.0..=1.0),
                rng.gen_range(0.0..=1.0),
                rng.gen_range(0.0..=1.0),
            ],
        })
        .collect();
    PatchParams { manual, shapes }
}

/// Clamp every free parameter to its closed interval. Idempotent; fields
/// already inside their bounds are returned unchanged.
pub fn project_free_params(mut params: PatchParams) -> PatchParams {
    let (r_min, r_max) = (params.manual.r_min, params.manual.r_max);
    for shape in &mut params.shapes {
        shape.center_x = shape.center_x.clamp(-1.0, 1.0);
        shape.center_y = shape.center_y.clamp(-1.0, 1.0);
        shape.radius = shape.radius.clamp(r_min, r_max);
        shape.shear_x = shape.shear_x.clamp(-1.0, 1.0);
        shape.shear_y = shape.shear_y.clamp(-1.0, 1.0);
        for c in &mut shape.color {
            *c = c.clamp(0.0, 1.0);
        }
    }
    params
}

/// True when every free parameter already lies inside its closed interval.
pub fn params_in_bounds(params: &PatchParams) -> bool {
    let (r_min, r_max) = (params.manual.r_min, params.manual.r_max);
    params.shapes.iter().all(|s| {
        (-1.0..=1.0).contains(&s.center_x)
            && (-1.0..=1.0).contains(&s.center_y)
            && (r_min..=r_max).contains(&s.radius)
            && (-1.0..=1.0).contains(&s.shear_x)
            && (-1.0..=1.0).contains(&s.shear_y)
            && s.color.iter().all(|c| c.is_finite() && (0.0..=1.0).contains(c))
    })
}
