//! The detector abstraction the attack differentiates through, plus a small
//! trainable single-scale grid detector for desk-scale experiments.
//!
//! Any detector exposing the grid-of-candidates view of [`detect_raw`] with
//! pixel-gradient support can be plugged in through [`DifferentiableDetector`];
//! detectors without gradients are usable for evaluation only.

pub mod nn;
mod train;

pub use train::{train_toy_detector, DetectorTrainConfig};

use std::path::Path;

use nn::{elu_backward, elu_map, sigmoid, Conv, FeatMap};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::image_io::SceneImage;

/// One candidate prediction: a box with objectness and per-class scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBox {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
}

impl CandidateBox {
    /// Detection confidence for one class: objectness * class score.
    #[inline]
    pub fn confidence(&self, class_id: usize) -> f64 {
        self.objectness * self.class_scores[class_id]
    }

    /// Best class by score, ties broken toward the lower index.
    pub fn best_class(&self) -> usize {
        let mut best = 0;
        for (c, &s) in self.class_scores.iter().enumerate() {
            if s > self.class_scores[best] {
                best = c;
            }
        }
        best
    }
}

/// Raw detector output: one candidate per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGrid {
    pub candidates: Vec<CandidateBox>,
    pub image_width: usize,
    pub image_height: usize,
    pub class_names: Vec<String>,
}

impl DetectionGrid {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Maximum candidate confidence product for one class.
    pub fn max_confidence(&self, class_id: usize) -> f64 {
        self.candidates
            .iter()
            .map(|c| c.confidence(class_id))
            .fold(0.0, f64::max)
    }
}

/// A decoded, thresholded, suppressed detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// Decode a grid into final detections: score by objectness times the best
/// class score, keep candidates strictly above the confidence threshold, and
/// apply per-class greedy non-maximum suppression. The result is sorted by
/// descending confidence with lexicographic box tie-breaking, so it does not
/// depend on candidate order.
pub fn decode(grid: &DetectionGrid, conf_threshold: f64, nms_iou: f64) -> Vec<Detection> {
    let mut dets: Vec<Detection> = grid
        .candidates
        .iter()
        .filter_map(|c| {
            let class_id = c.best_class();
            let confidence = c.confidence(class_id);
            (confidence > conf_threshold).then_some(Detection {
                bbox: c.bbox,
                class_id,
                confidence,
            })
        })
        .collect();
    dets.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.bbox.lex_cmp(&b.bbox))
            .then(a.class_id.cmp(&b.class_id))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for det in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && iou(&k.bbox, &det.bbox) >= nms_iou);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// Adapter contract for external detectors: a deterministic forward pass
/// producing the grid-of-candidates view.
pub trait DetectorAdapter {
    fn detect_raw(&self, image: &SceneImage) -> Result<DetectionGrid>;
    fn class_names(&self) -> &[String];
}

/// Extension of [`DetectorAdapter`] for white-box attacks: pull candidate
/// gradients back to image pixels.
pub trait DifferentiableDetector: DetectorAdapter {
    type Cache;
    fn forward_cached(&self, image: &SceneImage) -> Result<(DetectionGrid, Self::Cache)>;
    /// Returns the loss gradient with respect to the input image, planar RGB.
    fn backward_to_input(&self, cache: &Self::Cache, d_grid: &GridGrad) -> Vec<f64>;
}

/// Gradient of a scalar loss with respect to grid quantities, aligned with
/// `DetectionGrid::candidates`.
#[derive(Debug, Clone)]
pub struct GridGrad {
    pub d_objectness: Vec<f64>,
    /// Flat [candidate][class].
    pub d_class_scores: Vec<f64>,
    pub d_bbox: Vec<[f64; 4]>,
}

impl GridGrad {
    pub fn zeros(n_candidates: usize, n_classes: usize) -> Self {
        Self {
            d_objectness: vec![0.0; n_candidates],
            d_class_scores: vec![0.0; n_candidates * n_classes],
            d_bbox: vec![[0.0; 4]; n_candidates],
        }
    }
}

/// Architecture of the toy detector. Three stride-2 convolutions reduce the
/// input to the detection grid, one stride-1 convolution widens the
/// receptive field, and a 1x1 head emits box offsets, objectness, and class
/// logits per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorArch {
    pub input_width: usize,
    pub input_height: usize,
    pub channels: [usize; 4],
    pub anchor_w: f64,
    pub anchor_h: f64,
    pub class_names: Vec<String>,
}

impl DetectorArch {
    pub fn new(input_width: usize, input_height: usize, class_names: Vec<String>) -> Self {
        Self {
            input_width,
            input_height,
            channels: [12, 24, 32, 32],
            anchor_w: input_width as f64 / 4.0,
            anchor_h: input_height as f64 / 4.0,
            class_names,
        }
    }

    pub fn grid_w(&self) -> usize {
        self.input_width / 8
    }

    pub fn grid_h(&self) -> usize {
        self.input_height / 8
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        if self.input_width % 8 != 0 || self.input_height % 8 != 0 || self.input_width < 16 {
            return Err(Error::InvalidParam {
                field: "input dims",
                message: format!(
                    "detector input must be a multiple of 8 and at least 16, got {}x{}",
                    self.input_width, self.input_height
                ),
            });
        }
        if self.class_names.len() < 2 {
            return Err(Error::InvalidParam {
                field: "class_names",
                message: "detector needs at least 2 classes".into(),
            });
        }
        Ok(())
    }
}

/// Channel layout of the raw head output per cell.
const CH_TX: usize = 0;
const CH_TY: usize = 1;
const CH_TW: usize = 2;
const CH_TH: usize = 3;
const CH_OBJ: usize = 4;
const CH_CLS: usize = 5;

/// Box size logits are clamped to keep early training stable.
const T_SIZE_CLAMP: f64 = 4.0;

/// Single-scale grid detector with one candidate box per cell.
#[derive(Debug, Clone)]
pub struct GridDetector {
    pub arch: DetectorArch,
    convs: Vec<Conv>,
    head: Conv,
}

/// Saved activations from one forward pass.
pub struct ForwardCache {
    /// Input of each body convolution (post-activation of the previous one).
    inputs: Vec<FeatMap>,
    /// Pre-activation output of each body convolution.
    preacts: Vec<FeatMap>,
    /// Raw head output.
    raw: FeatMap,
}

impl GridDetector {
    pub fn new(arch: DetectorArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = arch.channels;
        let mut convs = vec![
            Conv::new(3, ch[0], 3, 2, 1),
            Conv::new(ch[0], ch[1], 3, 2, 1),
            Conv::new(ch[1], ch[2], 3, 2, 1),
            Conv::new(ch[2], ch[3], 3, 1, 1),
        ];
        for c in &mut convs {
            c.init_weights(&mut rng);
        }
        let mut head = Conv::new(ch[3], CH_CLS + arch.num_classes(), 1, 1, 0);
        head.init_weights(&mut rng);
        // Bias objectness and class logits low so the untrained detector
        // starts from "nothing detected".
        head.bias[CH_OBJ] = -2.0;
        for c in 0..arch.num_classes() {
            head.bias[CH_CLS + c] = -2.0;
        }
        Ok(Self { arch, convs, head })
    }

    fn check_dims(&self, image: &SceneImage) -> Result<()> {
        if image.width != self.arch.input_width || image.height != self.arch.input_height {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", self.arch.input_width, self.arch.input_height),
                actual: format!("{}x{}", image.width, image.height),
            });
        }
        Ok(())
    }

    fn image_to_feat(&self, image: &SceneImage) -> FeatMap {
        FeatMap {
            c: 3,
            h: image.height,
            w: image.width,
            data: image.data().to_vec(),
        }
    }

    fn forward_raw(&self, image: &SceneImage) -> Result<ForwardCache> {
        self.check_dims(image)?;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut preacts = Vec::with_capacity(self.convs.len());
        let mut x = self.image_to_feat(image);
        for conv in &self.convs {
            let pre = conv.forward(&x);
            let act = elu_map(&pre);
            inputs.push(x);
            preacts.push(pre);
            x = act;
        }
        let raw = self.head.forward(&x);
        inputs.push(x);
        Ok(ForwardCache {
            inputs,
            preacts,
            raw,
        })
    }

    fn decode_grid(&self, raw: &FeatMap) -> DetectionGrid {
        let (gw, gh) = (self.arch.grid_w(), self.arch.grid_h());
        let stride_x = self.arch.input_width as f64 / gw as f64;
        let stride_y = self.arch.input_height as f64 / gh as f64;
        let n_classes = self.arch.num_classes();
        let mut candidates = Vec::with_capacity(gw * gh);
        for gy in 0..gh {
            for gx in 0..gw {
                let cx = (gx as f64 + sigmoid(raw.get(CH_TX, gy, gx))) * stride_x;
                let cy = (gy as f64 + sigmoid(raw.get(CH_TY, gy, gx))) * stride_y;
                let w = self.arch.anchor_w
                    * raw.get(CH_TW, gy, gx).clamp(-T_SIZE_CLAMP, T_SIZE_CLAMP).exp();
                let h = self.arch.anchor_h
                    * raw.get(CH_TH, gy, gx).clamp(-T_SIZE_CLAMP, T_SIZE_CLAMP).exp();
                let objectness = sigmoid(raw.get(CH_OBJ, gy, gx));
                let class_scores = (0..n_classes)
                    .map(|c| sigmoid(raw.get(CH_CLS + c, gy, gx)))
                    .collect();
                candidates.push(CandidateBox {
                    bbox: BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0),
                    objectness,
                    class_scores,
                });
            }
        }
        DetectionGrid {
            candidates,
            image_width: self.arch.input_width,
            image_height: self.arch.input_height,
            class_names: self.arch.class_names.clone(),
        }
    }

    /// Map a gradient on decoded grid quantities back to the raw head output.
    fn grid_grad_to_raw(&self, raw: &FeatMap, d_grid: &GridGrad) -> FeatMap {
        let (gw, gh) = (self.arch.grid_w(), self.arch.grid_h());
        let stride_x = self.arch.input_width as f64 / gw as f64;
        let stride_y = self.arch.input_height as f64 / gh as f64;
        let n_classes = self.arch.num_classes();
        let mut d_raw = FeatMap::zeros(raw.c, raw.h, raw.w);
        for gy in 0..gh {
            for gx in 0..gw {
                let cand = gy * gw + gx;
                let db = d_grid.d_bbox[cand];
                let d_cx = db[0] + db[2];
                let d_cy = db[1] + db[3];
                let d_w = 0.5 * (db[2] - db[0]);
                let d_h = 0.5 * (db[3] - db[1]);

                let sx = sigmoid(raw.get(CH_TX, gy, gx));
                let sy = sigmoid(raw.get(CH_TY, gy, gx));
                d_raw.set(CH_TX, gy, gx, d_cx * stride_x * sx * (1.0 - sx));
                d_raw.set(CH_TY, gy, gx, d_cy * stride_y * sy * (1.0 - sy));

                let tw = raw.get(CH_TW, gy, gx);
                if tw.abs() < T_SIZE_CLAMP {
                    let w = self.arch.anchor_w * tw.exp();
                    d_raw.set(CH_TW, gy, gx, d_w * w);
                }
                let th = raw.get(CH_TH, gy, gx);
                if th.abs() < T_SIZE_CLAMP {
                    let h = self.arch.anchor_h * th.exp();
                    d_raw.set(CH_TH, gy, gx, d_h * h);
                }

                let obj = sigmoid(raw.get(CH_OBJ, gy, gx));
                d_raw.set(CH_OBJ, gy, gx, d_grid.d_objectness[cand] * obj * (1.0 - obj));
                for c in 0..n_classes {
                    let s = sigmoid(raw.get(CH_CLS + c, gy, gx));
                    d_raw.set(CH_CLS + c, gy, gx, d_grid.d_class_scores[cand * n_classes + c] * s * (1.0 - s));
                }
            }
        }
        d_raw
    }

    /// Backpropagate a raw-head gradient through the body. When gradient
    /// buffers are provided, weight/bias gradients are accumulated per layer
    /// (body layers first, head last, matching `flat_params` order).
    fn backward_raw(
        &self,
        cache: &ForwardCache,
        d_raw: &FeatMap,
        mut weight_grads: Option<&mut [Vec<f64>]>,
    ) -> FeatMap {
        let n = self.convs.len();
        let mut d = if let Some(grads) = weight_grads.as_deref_mut() {
            let (dw, db) = grads[n].split_at_mut(self.head.weight.len());
            self.head
                .backward(&cache.inputs[n], d_raw, Some(dw), Some(db))
        } else {
            self.head.backward(&cache.inputs[n], d_raw, None, None)
        };
        for k in (0..n).rev() {
            let d_pre = elu_backward(&cache.preacts[k], &d);
            d = if let Some(grads) = weight_grads.as_deref_mut() {
                let (dw, db) = grads[k].split_at_mut(self.convs[k].weight.len());
                self.convs[k].backward(&cache.inputs[k], &d_pre, Some(dw), Some(db))
            } else {
                self.convs[k].backward(&cache.inputs[k], &d_pre, None, None)
            };
        }
        d
    }

    /// Total number of trainable parameters.
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(Conv::param_count).sum::<usize>() + self.head.param_count()
    }

    fn layers(&self) -> Vec<&Conv> {
        self.convs.iter().chain(std::iter::once(&self.head)).collect()
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv> {
        self.convs
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .collect()
    }

    /// Flatten all parameters (per layer: weights then biases).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in self.layers() {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        for layer in self.layers_mut() {
            let wl = layer.weight.len();
            layer.weight.copy_from_slice(&flat[off..off + wl]);
            off += wl;
            let bl = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        debug_assert_eq!(off, flat.len());
    }

    /// Empty per-layer gradient buffers matching `flat_params` layout.
    pub(crate) fn grad_buffers(&self) -> Vec<Vec<f64>> {
        self.layers()
            .iter()
            .map(|l| vec![0.0; l.param_count()])
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.arch.input_width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.arch.input_height as u32).to_le_bytes());
        for ch in self.arch.channels {
            buf.extend_from_slice(&(ch as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.arch.anchor_w.to_le_bytes());
        buf.extend_from_slice(&self.arch.anchor_h.to_le_bytes());
        buf.extend_from_slice(&(self.arch.class_names.len() as u32).to_le_bytes());
        for name in &self.arch.class_names {
            let bytes = name.as_bytes();
            buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            buf.extend_from_slice(bytes);
        }
        let flat = self.flat_params();
        buf.extend_from_slice(&(flat.len() as u64).to_le_bytes());
        for v in flat {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut r = ByteReader::new(&buf);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let input_width = r.u32()? as usize;
        let input_height = r.u32()? as usize;
        let mut channels = [0usize; 4];
        for ch in &mut channels {
            *ch = r.u32()? as usize;
        }
        let anchor_w = r.f64()?;
        let anchor_h = r.f64()?;
        let n_classes = r.u32()? as usize;
        let mut class_names = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            let len = r.u32()? as usize;
            let bytes = r.take(len)?;
            class_names.push(
                String::from_utf8(bytes.to_vec())
                    .map_err(|_| Error::Checkpoint("class name is not utf-8".into()))?,
            );
        }
        let arch = DetectorArch {
            input_width,
            input_height,
            channels,
            anchor_w,
            anchor_h,
            class_names,
        };
        let mut detector = GridDetector::new(arch, 0)?;
        let n_params = r.u64()? as usize;
        if n_params != detector.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match architecture ({})",
                n_params,
                detector.param_count()
            )));
        }
        let mut flat = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            flat.push(r.f64()?);
        }
        detector.set_flat_params(&flat);
        Ok(detector)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"LPDT";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl DetectorAdapter for GridDetector {
    fn detect_raw(&self, image: &SceneImage) -> Result<DetectionGrid> {
        let cache = self.forward_raw(image)?;
        Ok(self.decode_grid(&cache.raw))
    }

    fn class_names(&self) -> &[String] {
        &self.arch.class_names
    }
}

impl DifferentiableDetector for GridDetector {
    type Cache = ForwardCache;

    fn forward_cached(&self, image: &SceneImage) -> Result<(DetectionGrid, ForwardCache)> {
        let cache = self.forward_raw(image)?;
        let grid = self.decode_grid(&cache.raw);
        Ok((grid, cache))
    }

    fn backward_to_input(&self, cache: &ForwardCache, d_grid: &GridGrad) -> Vec<f64> {
        let d_raw = self.grid_grad_to_raw(&cache.raw, d_grid);
        self.backward_raw(cache, &d_raw, None).data
    }
}
