//! Dataset ingestion, detector self-labeling, deterministic splitting, and
//! the synthetic scene generator used for desk-scale experiments.
//!
//! Manifest file contract: one record per line,
//! `image_path;class=x_min,y_min,x_max,y_max;class=...` with coordinates
//! normalized to [0, 1] and printed at 6 decimals, UTF-8, `#` comment lines
//! ignored. Image paths are resolved relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bbox::{iou, BBox};
use crate::detector::{decode, DetectorAdapter, GridDetector};
use crate::error::{Error, Result};
use crate::image_io::SceneImage;

/// One annotated object, box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

/// One scene with its ground truth and provenance tag.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub image: SceneImage,
    pub boxes: Vec<GtBox>,
    pub source: String,
    pub image_path: Option<PathBuf>,
}

/// In-memory dataset: decoded images plus pixel-space annotations.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub records: Vec<SceneRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    /// Total ground-truth boxes of one class.
    pub fn count_class(&self, class_id: usize) -> usize {
        self.records
            .iter()
            .map(|r| r.boxes.iter().filter(|b| b.class_id == class_id).count())
            .sum()
    }
}

/// Manifest record: image path plus normalized boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image_path: String,
    pub boxes: Vec<(usize, BBox)>,
}

/// Parsed manifest: records, the class dictionary they were validated
/// against, and the source tag of the file.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
    pub source: String,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

/// Parse and validate a manifest file. Malformed rows are rejected with
/// their line number; boxes must lie in [0,1]^4 with positive area and use
/// class names from the dictionary; referenced image files must exist.
pub fn load_manifest(path: &Path, class_names: &[String], source: &str) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split(';');
        let image_path = fields
            .next()
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: line_num,
                message: "missing image path".into(),
            })?
            .to_string();
        if !root.join(&image_path).exists() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_num,
                message: format!("missing image file `{image_path}`"),
            });
        }
        let mut boxes = Vec::new();
        for field in fields {
            if field.is_empty() {
                continue;
            }
            let (class, coords) = field.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: line_num,
                message: format!("expected `class=x_min,y_min,x_max,y_max`, got `{field}`"),
            })?;
            let class_id = class_names
                .iter()
                .position(|c| c == class)
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_num,
                    message: format!("unknown class name `{class}`"),
                })?;
            let vals: Vec<f64> = coords
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_num,
                    message: format!("bad coordinate in `{coords}`: {e}"),
                })?;
            if vals.len() != 4 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_num,
                    message: format!("expected 4 coordinates, got {}", vals.len()),
                });
            }
            let bbox = BBox::new(vals[0], vals[1], vals[2], vals[3]);
            let in_unit = vals.iter().all(|v| (0.0..=1.0).contains(v));
            if !in_unit || bbox.x_min >= bbox.x_max || bbox.y_min >= bbox.y_max {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_num,
                    message: format!(
                        "invalid box ({},{},{},{}): must lie in [0,1] with positive area",
                        vals[0], vals[1], vals[2], vals[3]
                    ),
                });
            }
            boxes.push((class_id, bbox));
        }
        records.push(ManifestRecord { image_path, boxes });
    }
    Ok(Manifest {
        class_names: class_names.to_vec(),
        records,
        source: source.to_string(),
        root,
    })
}

/// Render manifest records in the canonical line format.
pub fn manifest_to_string(class_names: &[String], records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&rec.image_path);
        for (class_id, b) in &rec.boxes {
            let _ = write!(
                out,
                ";{}={:.6},{:.6},{:.6},{:.6}",
                class_names[*class_id], b.x_min, b.y_min, b.x_max, b.y_max
            );
        }
        out.push('\n');
    }
    out
}

impl Manifest {
    /// Read every referenced image, converting normalized boxes to pixels.
    pub fn load_images(&self) -> Result<Dataset> {
        let records = self
            .records
            .iter()
            .map(|rec| {
                let path = self.root.join(&rec.image_path);
                let image = SceneImage::load_png(&path)?;
                let (w, h) = (image.width as f64, image.height as f64);
                let boxes = rec
                    .boxes
                    .iter()
                    .map(|(class_id, b)| GtBox {
                        class_id: *class_id,
                        bbox: BBox::new(b.x_min * w, b.y_min * h, b.x_max * w, b.y_max * h),
                    })
                    .collect();
                Ok(SceneRecord {
                    image,
                    boxes,
                    source: self.source.clone(),
                    image_path: Some(path),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            class_names: self.class_names.clone(),
            records,
        })
    }
}

/// Write a dataset to disk as PNG files plus a manifest named
/// `<source>.manifest`, returning the manifest path.
pub fn write_dataset(dataset: &Dataset, dir: &Path, source: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut records = Vec::with_capacity(dataset.records.len());
    for (k, rec) in dataset.records.iter().enumerate() {
        let name = format!("{source}_{k:05}.png");
        rec.image.save_png(&dir.join(&name))?;
        let (w, h) = (rec.image.width as f64, rec.image.height as f64);
        let boxes = rec
            .boxes
            .iter()
            .map(|b| {
                (
                    b.class_id,
                    BBox::new(
                        b.bbox.x_min / w,
                        b.bbox.y_min / h,
                        b.bbox.x_max / w,
                        b.bbox.y_max / h,
                    ),
                )
            })
            .collect();
        records.push(ManifestRecord {
            image_path: name,
            boxes,
        });
    }
    let manifest_path = dir.join(format!("{source}.manifest"));
    std::fs::write(
        &manifest_path,
        manifest_to_string(&dataset.class_names, &records),
    )
    .map_err(|e| Error::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    Ok(manifest_path)
}

/// Split policy: held-out test sources plus seeded train/val fractions over
/// the pooled remainder.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_sources: BTreeSet<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.train_frac && self.train_frac < 1.0) {
            return Err(Error::InvalidParam {
                field: "train_frac",
                message: format!("must be in (0, 1), got {}", self.train_frac),
            });
        }
        if !(0.0 < self.val_frac && self.val_frac < 1.0) {
            return Err(Error::InvalidParam {
                field: "val_frac",
                message: format!("must be in (0, 1), got {}", self.val_frac),
            });
        }
        if self.train_frac + self.val_frac > 1.0 + 1e-12 {
            return Err(Error::InvalidParam {
                field: "val_frac",
                message: "train_frac + val_frac must not exceed 1".into(),
            });
        }
        Ok(())
    }
}

/// Partition record indices: test takes every record whose source tag is
/// held out; the rest are shuffled by seed and cut at the train fraction,
/// with validation taking the remainder so the three parts cover the input.
pub fn split_indices(
    sources: &[&str],
    spec: &SplitSpec,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let mut test = Vec::new();
    let mut pool = Vec::new();
    for (i, src) in sources.iter().enumerate() {
        if spec.test_sources.contains(*src) {
            test.push(i);
        } else {
            pool.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    pool.shuffle(&mut rng);
    let n_train = (spec.train_frac * pool.len() as f64).round() as usize;
    let n_train = n_train.min(pool.len());
    let (train, val) = pool.split_at(n_train);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();

    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    if test.is_empty() && !spec.test_sources.is_empty() {
        return Err(Error::EmptySplit("test"));
    }
    Ok((train, val, test))
}

/// Split a dataset into (train, val, test) per the spec.
pub fn split_dataset(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let sources: Vec<&str> = dataset.records.iter().map(|r| r.source.as_str()).collect();
    let (train, val, test) = split_indices(&sources, spec)?;
    let take = |idx: &[usize]| Dataset {
        class_names: dataset.class_names.clone(),
        records: idx.iter().map(|&i| dataset.records[i].clone()).collect(),
    };
    Ok((take(&train), take(&val), take(&test)))
}

/// Annotate scenes with a detector's own decoded detections, merging them
/// with any pre-existing annotations. Pre-existing entries win conflicts at
/// IoU >= 0.5 between same-class boxes, which also makes the operation
/// idempotent.
pub fn self_label(dataset: &Dataset, detector: &GridDetector, conf_threshold: f64) -> Result<Dataset> {
    let mut out = dataset.clone();
    for rec in &mut out.records {
        let grid = detector.detect_raw(&rec.image)?;
        let dets = decode(&grid, conf_threshold, 0.5);
        for det in dets {
            let clipped = BBox::new(
                det.bbox.x_min.max(0.0),
                det.bbox.y_min.max(0.0),
                det.bbox.x_max.min(rec.image.width as f64),
                det.bbox.y_max.min(rec.image.height as f64),
            );
            if clipped.area() <= 0.0 {
                continue;
            }
            let conflict = rec
                .boxes
                .iter()
                .any(|b| b.class_id == det.class_id && iou(&b.bbox, &clipped) >= 0.5);
            if !conflict {
                rec.boxes.push(GtBox {
                    class_id: det.class_id,
                    bbox: clipped,
                });
            }
        }
    }
    Ok(out)
}

/// Class palette of the synthetic task. The first class (a red octagon,
/// styled after a stop sign) is the conventional attack target.
pub fn synthetic_class_names() -> Vec<String> {
    vec!["octagon".into(), "disc".into(), "triangle".into()]
}

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub scenes: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub source: String,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            width: 64,
            height: 64,
            seed: 0,
            source: "synth".into(),
            min_objects: 1,
            max_objects: 4,
        }
    }
}

#[derive(Clone, Copy)]
enum ObjectShape {
    Octagon,
    Disc,
    Triangle,
}

/// Generate textured-background scenes with 1-4 non-overlapping solid
/// geometric objects and exact bounding boxes. Deterministic per seed.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Dataset {
    let mut records = Vec::with_capacity(cfg.scenes);
    for scene_idx in 0..cfg.scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(scene_idx as u64));
        let mut image = textured_background(cfg.width, cfg.height, &mut rng);
        let n_objects = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut boxes: Vec<GtBox> = Vec::new();
        for _ in 0..n_objects {
            let class_id = rng.gen_range(0..3usize);
            let shape = match class_id {
                0 => ObjectShape::Octagon,
                1 => ObjectShape::Disc,
                _ => ObjectShape::Triangle,
            };
            let min_dim = cfg.width.min(cfg.height) as f64;
            let rho = rng.gen_range(0.10..0.19) * min_dim;
            let color = object_color(shape, &mut rng);
            // Rejection placement against existing boxes.
            for _try in 0..50 {
                let (hw, top, bottom) = shape_extents(shape, rho);
                let cx = rng.gen_range(hw..cfg.width as f64 - hw);
                let cy = rng.gen_range(top..cfg.height as f64 - bottom);
                let bbox = BBox::new(cx - hw, cy - top, cx + hw, cy + bottom);
                if boxes.iter().all(|b| iou(&b.bbox, &bbox) < 0.01) {
                    draw_object(&mut image, shape, cx, cy, rho, color);
                    boxes.push(GtBox { class_id, bbox });
                    break;
                }
            }
        }
        records.push(SceneRecord {
            image,
            boxes,
            source: cfg.source.clone(),
            image_path: None,
        });
    }
    Dataset {
        class_names: synthetic_class_names(),
        records,
    }
}

fn textured_background(width: usize, height: usize, rng: &mut ChaCha8Rng) -> SceneImage {
    const GRID: usize = 5;
    let mut nodes = [[[0.0f64; GRID]; GRID]; 3];
    let mut base = [0.0f64; 3];
    for c in 0..3 {
        base[c] = rng.gen_range(0.15..0.50);
        for row in nodes[c].iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen_range(-0.12..0.12);
            }
        }
    }
    let mut image = SceneImage::zeros(width, height);
    for j in 0..height {
        for i in 0..width {
            let gx = i as f64 / (width - 1).max(1) as f64 * (GRID - 1) as f64;
            let gy = j as f64 / (height - 1).max(1) as f64 * (GRID - 1) as f64;
            let x0 = (gx.floor() as usize).min(GRID - 2);
            let y0 = (gy.floor() as usize).min(GRID - 2);
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            for c in 0..3 {
                let n = &nodes[c];
                let v = n[y0][x0] * (1.0 - fx) * (1.0 - fy)
                    + n[y0][x0 + 1] * fx * (1.0 - fy)
                    + n[y0 + 1][x0] * (1.0 - fx) * fy
                    + n[y0 + 1][x0 + 1] * fx * fy;
                let noise: f64 = rng.gen_range(-0.02..0.02);
                image.set(c, i, j, (base[c] + v + noise).clamp(0.0, 1.0));
            }
        }
    }
    image
}

fn object_color(shape: ObjectShape, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match shape {
        ObjectShape::Octagon => [
            rng.gen_range(0.70..0.95),
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.05..0.25),
        ],
        ObjectShape::Disc => [
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.70..0.95),
        ],
        ObjectShape::Triangle => [
            rng.gen_range(0.05..0.25),
            rng.gen_range(0.70..0.95),
            rng.gen_range(0.05..0.25),
        ],
    }
}

/// (half width, extent above center, extent below center) in pixels.
fn shape_extents(shape: ObjectShape, rho: f64) -> (f64, f64, f64) {
    match shape {
        ObjectShape::Octagon => {
            let h = rho * (std::f64::consts::PI / 8.0).cos();
            (h, h, h)
        }
        ObjectShape::Disc => (rho, rho, rho),
        ObjectShape::Triangle => {
            let hw = rho * (std::f64::consts::PI / 6.0).cos();
            (hw, rho, rho * 0.5)
        }
    }
}

fn shape_vertices(shape: ObjectShape, cx: f64, cy: f64, rho: f64) -> Vec<(f64, f64)> {
    let angles: Vec<f64> = match shape {
        // Flat-top regular octagon.
        ObjectShape::Octagon => (0..8).map(|k| (22.5 + 45.0 * k as f64).to_radians()).collect(),
        ObjectShape::Disc => Vec::new(),
        // Upward-pointing triangle (y grows downward).
        ObjectShape::Triangle => vec![
            (-90.0f64).to_radians(),
            (30.0f64).to_radians(),
            (150.0f64).to_radians(),
        ],
    };
    angles
        .iter()
        .map(|a| (cx + rho * a.cos(), cy + rho * a.sin()))
        .collect()
}

fn point_in_convex_polygon(verts: &[(f64, f64)], x: f64, y: f64) -> bool {
    let n = verts.len();
    let mut sign = 0.0f64;
    for k in 0..n {
        let (x0, y0) = verts[k];
        let (x1, y1) = verts[(k + 1) % n];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        if cross.abs() < 1e-12 {
            continue;
        }
        if sign == 0.0 {
            sign = cross.signum();
        } else if cross.signum() != sign {
            return false;
        }
    }
    true
}

fn draw_object(
    image: &mut SceneImage,
    shape: ObjectShape,
    cx: f64,
    cy: f64,
    rho: f64,
    color: [f64; 3],
) {
    let verts = shape_vertices(shape, cx, cy, rho);
    let (hw, top, bottom) = shape_extents(shape, rho);
    let x0 = (cx - hw).floor().max(0.0) as usize;
    let x1 = ((cx + hw).ceil() as usize).min(image.width);
    let y0 = (cy - top).floor().max(0.0) as usize;
    let y1 = ((cy + bottom).ceil() as usize).min(image.height);
    for j in y0..y1 {
        for i in x0..x1 {
            let (px, py) = (i as f64 + 0.5, j as f64 + 0.5);
            let inside = match shape {
                ObjectShape::Disc => {
                    (px - cx) * (px - cx) + (py - cy) * (py - cy) <= rho * rho
                }
                _ => point_in_convex_polygon(&verts, px, py),
            };
            if inside {
                for c in 0..3 {
                    image.set(c, i, j, color[c]);
                }
            }
        }
    }
}
