use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::ImagePlane;

/// MSE floor inside the differentiable PSNR so that `ln` stays guarded.
pub const PSNR_MSE_FLOOR: f64 = 1e-20;

const PEAK_SQ: f64 = 255.0 * 255.0;

pub fn mse(reference: &ImagePlane, distorted: &ImagePlane) -> Result<f64> {
    reference.check_same_dims(distorted)?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(distorted.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.len() as f64)
}

/// `10 log10(255^2 / MSE)`; identical inputs give `+inf`.
pub fn psnr(reference: &ImagePlane, distorted: &ImagePlane) -> Result<f64> {
    let mse = mse(reference, distorted)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (PEAK_SQ / mse).log10())
}

pub fn mse_graph(g: &mut Graph, r: Var, d: Var) -> Result<Var> {
    let diff = g.sub(d, r)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Differentiable PSNR. The MSE is floored at [`PSNR_MSE_FLOOR`], so the
/// identity case is finite here (200 dB) rather than infinite.
pub fn psnr_graph(g: &mut Graph, r: Var, d: Var) -> Result<Var> {
    let mse = mse_graph(g, r, d)?;
    let mse = g.clamp(mse, PSNR_MSE_FLOOR, f64::INFINITY);
    let ln = g.ln(mse)?;
    let scaled = g.scale(ln, -10.0 / std::f64::consts::LN_10);
    Ok(g.offset(scaled, 10.0 * PEAK_SQ.log10()))
}
