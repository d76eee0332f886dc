//! Shared fixtures for the benchmarks.

use advmetric_core::synth::{natural_scene, SceneParams};
use advmetric_core::ImagePlane;

/// A seeded synthetic scene cropped to `side x side` (full 352x288 frame when `side` is `None`).
pub fn frame(seed: u64, side: Option<usize>) -> ImagePlane {
    let full = natural_scene(352, 288, seed, &SceneParams::default());
    match side {
        Some(s) => full.crop(0, 0, s, s).expect("crop fits the frame"),
        None => full,
    }
}

/// The frame with a small deterministic ripple added, as a distorted partner.
pub fn ripple(img: &ImagePlane) -> ImagePlane {
    let (w, h) = img.dims();
    ImagePlane::from_fn(w, h, |x, y| {
        img.get(x, y) + 2.0 * ((x as f64) * 0.3 + (y as f64) * 0.2).sin()
    })
}
