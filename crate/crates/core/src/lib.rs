//! lenspatch — optimizing translucent lens-patch perturbations against
//! object detectors.
//!
//! The toolkit renders a small set of parametric translucent shapes into a
//! full-frame RGBA patch, composites it over scene images by alpha blending
//! (simulating a sticker on the camera lens), and tunes the shape parameters
//! by gradient descent so that a pluggable detector stops reporting one
//! target class while the remaining classes stay detectable.
//!
//! Pipeline stages:
//!
//! 1. **patch** — shape parameterization, validation, random init,
//!    feasibility projection.
//! 2. **render** — differentiable shape rasterization and alpha compositing.
//! 3. **detector** — the grid-detector abstraction, a small trainable
//!    detector for desk-scale experiments, decode + NMS.
//! 4. **losses** — the four attack loss components and their weighted sum.
//! 5. **optimizer** — the end-to-end optimization loop and the loss-weight
//!    grid search.
//! 6. **evaluation** — PR curves, average precision, fooling rates, baseline
//!    patches, parameter sweeps.
//! 7. **data** — manifest ingestion, detector self-labeling, deterministic
//!    splits, and the synthetic scene generator.

pub mod bbox;
pub mod data;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod image_io;
pub mod losses;
pub mod optimizer;
pub mod patch;
pub mod render;

pub use error::{Error, Result};
