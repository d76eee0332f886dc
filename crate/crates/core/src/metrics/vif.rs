//! Pixel-domain visual information fidelity at four dyadic scales.
//!
//! Scale `s` first applies `s` rounds of {Gaussian smoothing, 2x decimation}
//! to both images, then compares local Gaussian-weighted statistics with a
//! window of `2^(4-s) + 1` taps. All correlations are valid-mode.

use std::rc::Rc;

use crate::autodiff::{Graph, Kernel, Var};
use crate::error::{Error, Result};
use crate::ImagePlane;

pub const VIF_SCALES: usize = 4;

/// Numerical guards of the VIF model.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VifGuards {
    /// Variance floor.
    pub sigma_floor: f64,
    /// Additive neural noise variance, intensity^2 units.
    pub noise_var: f64,
}

impl Default for VifGuards {
    fn default() -> Self {
        Self {
            sigma_floor: 1e-10,
            noise_var: 2.0,
        }
    }
}

/// The Gaussian window used at `scale`: `N = 2^(4 - scale) + 1`, `sigma = N / 5`.
pub fn vif_window(scale: usize) -> Kernel {
    assert!(scale < VIF_SCALES, "VIF scale {scale} out of range");
    let n = (1usize << (4 - scale)) + 1;
    Kernel::gaussian(n, n as f64 / 5.0)
}

fn window_len(scale: usize) -> usize {
    (1usize << (4 - scale)) + 1
}

/// Side length of the valid region left at `scale` for an input side `len`,
/// or `None` if a stage runs out of pixels.
fn side_at_scale(mut len: usize, scale: usize) -> Option<usize> {
    for stage in 1..=scale {
        let n = window_len(stage);
        len = len.checked_sub(n - 1).filter(|&l| l > 0)?.div_ceil(2);
    }
    len.checked_sub(window_len(scale) - 1).filter(|&l| l > 0)
}

/// Smallest square side on which `scale` is defined.
pub fn vif_min_size(scale: usize) -> usize {
    (1..).find(|&n| side_at_scale(n, scale).is_some()).unwrap()
}

/// VIF at `scale` between `reference` and `distorted`.
pub fn vif_scale(reference: &ImagePlane, distorted: &ImagePlane, scale: usize, guards: &VifGuards) -> Result<f64> {
    super::forward(reference, distorted, |g, r, d| vif_scale_graph(g, r, d, scale, guards))
}

pub fn vif_scale_graph(g: &mut Graph, r: Var, d: Var, scale: usize, guards: &VifGuards) -> Result<Var> {
    if scale >= VIF_SCALES {
        return Err(Error::Config(format!("VIF scale {scale} out of range 0..{VIF_SCALES}")));
    }
    let shape = g.shape(r);
    if side_at_scale(shape.rows, scale).is_none() || side_at_scale(shape.cols, scale).is_none() {
        return Err(Error::TooSmall(format!(
            "{}x{} image for VIF scale {scale} (needs at least {})",
            shape.cols,
            shape.rows,
            vif_min_size(scale)
        )));
    }

    // The statistics are shift invariant; centering on the reference mean keeps
    // the E[x^2] - mu^2 cancellations small.
    let c = -g.value(r).data().iter().sum::<f64>() / g.value(r).data().len() as f64;
    let (mut x, mut y) = (g.offset(r, c), g.offset(d, c));
    for stage in 1..=scale {
        let k = Rc::new(vif_window(stage));
        let xs = g.correlate(x, k.clone())?;
        let ys = g.correlate(y, k)?;
        x = g.downsample2(xs);
        y = g.downsample2(ys);
    }

    let w = Rc::new(vif_window(scale));
    let mu1 = g.correlate(x, w.clone())?;
    let mu2 = g.correlate(y, w.clone())?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y)?;
    let exx = g.correlate(xx, w.clone())?;
    let eyy = g.correlate(yy, w.clone())?;
    let exy = g.correlate(xy, w)?;

    let mu1_sq = g.square(mu1);
    let mu2_sq = g.square(mu2);
    let mu12 = g.mul(mu1, mu2)?;
    let s1 = g.sub(exx, mu1_sq)?;
    let s1 = g.clamp(s1, 0.0, f64::INFINITY);
    let s2 = g.sub(eyy, mu2_sq)?;
    let s2 = g.clamp(s2, 0.0, f64::INFINITY);
    let s12 = g.sub(exy, mu12)?;

    let floor = guards.sigma_floor;
    let s1_guarded = g.offset(s1, floor);
    let gain = g.div(s12, s1_guarded)?;
    let gs12 = g.mul(gain, s12)?;
    let sv = g.sub(s2, gs12)?;

    // Guard cases, applied in order; later rules override earlier ones.
    let s1v = g.value(s1).data();
    let s2v = g.value(s2).data();
    let gv = g.value(gain).data();
    let n = s1v.len();
    let mut gain_zero = vec![false; n];
    let mut sv_is_s2 = vec![false; n];
    let mut sv_zero = vec![false; n];
    for i in 0..n {
        if s1v[i] < floor {
            gain_zero[i] = true;
            sv_is_s2[i] = true;
        }
        if s2v[i] < floor {
            gain_zero[i] = true;
            sv_is_s2[i] = false;
            sv_zero[i] = true;
        }
        if !gain_zero[i] && gv[i] < 0.0 {
            gain_zero[i] = true;
            sv_is_s2[i] = true;
        }
    }
    let zeros = g.constant(crate::autodiff::Tensor::zeros(g.shape(gain)));
    let gain = g.select(gain_zero.into(), zeros, gain)?;
    let sv = g.select(sv_is_s2.into(), s2, sv)?;
    let sv = g.select(sv_zero.into(), zeros, sv)?;
    let sv = g.clamp(sv, floor, f64::INFINITY);

    // numerator: ln(1 + gain^2 s1 / (sv + noise))
    let gain_sq = g.square(gain);
    let signal = g.mul(gain_sq, s1)?;
    let noise = g.offset(sv, guards.noise_var);
    let snr = g.div(signal, noise)?;
    let snr1 = g.offset(snr, 1.0);
    let num_terms = g.ln(snr1)?;
    let num = g.sum(num_terms);

    // denominator: ln(1 + s1 / noise)
    let ref_snr = g.scale(s1, 1.0 / guards.noise_var);
    let ref_snr1 = g.offset(ref_snr, 1.0);
    let den_terms = g.ln(ref_snr1)?;
    let den = g.sum(den_terms);

    if g.item(den) < floor {
        // flat reference at this scale
        return Ok(g.scalar_constant(1.0));
    }
    Ok(g.div(num, den)?)
}
