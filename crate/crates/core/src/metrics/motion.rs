use std::rc::Rc;

use crate::autodiff::{Graph, Kernel, Tensor};
use crate::error::Result;
use crate::ImagePlane;

/// Temporal feature of the reference: mean absolute difference between the
/// blurred current and previous frames (5-tap Gaussian, sigma = 1, valid mode).
/// Zero for a single image.
pub fn motion(prev_reference: Option<&ImagePlane>, reference: &ImagePlane) -> Result<f64> {
    let Some(prev) = prev_reference else {
        return Ok(0.0);
    };
    prev.check_same_dims(reference)?;
    let kernel = Rc::new(Kernel::gaussian(5, 1.0));
    let mut g = Graph::new();
    let a = g.constant(Tensor::from(prev));
    let b = g.constant(Tensor::from(reference));
    let a = g.correlate(a, kernel.clone())?;
    let b = g.correlate(b, kernel)?;
    let diff = g.sub(a, b)?;
    let abs = g.abs(diff);
    let m = g.mean(abs);
    Ok(g.item(m))
}
