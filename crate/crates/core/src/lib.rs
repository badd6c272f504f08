//! Multi-scale line detection for retinal vessel segmentation.
//!
//! Two engines compute the same combined response:
//!
//! * [`reference::msld_reference`] materializes every scale's response image
//!   in `f64` and is the numerical oracle.
//! * [`streaming::msld_streaming`] makes two raster passes through a
//!   `(W - 1) · Ncols + W` line buffer and keeps only `2 · n_scales + 2`
//!   statistics between them. It runs in `f64` or in binary fixed point.
//!
//! [`eval`] scores a response against ground truth inside the field of view,
//! and [`imageio`] reads and writes the netpbm files the command-line tool
//! works with.
//!
//! ```
//! use msld::{msld_reference, msld_streaming, Arithmetic, GrayImage, Mask, MsldParams};
//!
//! // a bright vertical line on a dark background
//! let img = GrayImage::from_fn(32, 32, |x, y| if x == 16 { 200 } else { (y % 7) as u8 });
//! let mask = Mask::full(32, 32);
//! let params = MsldParams::with_window(7)?;
//!
//! let (reference, _) = msld_reference(&img, &mask, &params)?;
//! let (streamed, _, footprint) = msld_streaming(&img, &mask, &params, Arithmetic::Float)?;
//!
//! assert!((reference.get(16, 10) - streamed.get(16, 10)).abs() < 1e-9);
//! assert!(reference.get(16, 10) > reference.get(8, 10));
//! assert_eq!(footprint.line_buffer_slots, 6 * 32 + 7);
//! # Ok::<(), msld::Error>(())
//! ```

pub mod cli;
pub mod detector;
mod error;
pub mod eval;
pub mod fixedpoint;
pub mod imageio;
pub mod reference;
pub mod streaming;

pub use detector::{LinePattern, MsldParams, RawResponse};
pub use error::{Error, Result};
pub use eval::{ConfusionCounts, MetricsReport};
pub use fixedpoint::FixedPoint;
pub use imageio::{GrayImage, Mask, PnmImage, RgbImage};
pub use reference::{msld_reference, MeanStd, ResponseMap, ScaleStats};
pub use streaming::{msld_streaming, Arithmetic, LineBuffer, MemoryFootprint};

// Compile and run the code listings in the guide.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/line-detector.md")]
    mod line_detector {}
    #[doc = include_str!("../../../book/src/multiscale.md")]
    mod multiscale {}
    #[doc = include_str!("../../../book/src/streaming.md")]
    mod streaming {}
    #[doc = include_str!("../../../book/src/fixed-point.md")]
    mod fixed_point {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
