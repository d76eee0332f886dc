//! Simplified detail-loss metric on an orthonormal Haar pyramid.
//!
//! For every detail coefficient pair `(o, d)` the restored component is
//! `t = clamp(d / o, 0, 1) * o` (zero where `|o| < 1e-12`). Each subband is
//! pooled with a Minkowski p = 3 sum, and the score is the ratio of pooled
//! restored detail to pooled reference detail over all levels and bands.

use crate::autodiff::{Graph, HaarBand, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::ImagePlane;

pub const ADM_LEVELS: usize = 4;

const ZERO_COEF: f64 = 1e-12;
const MINKOWSKI_P: f64 = 3.0;
const BLOCK: usize = 1 << ADM_LEVELS;

pub fn adm(reference: &ImagePlane, distorted: &ImagePlane) -> Result<f64> {
    super::forward(reference, distorted, adm_graph)
}

fn minkowski(g: &mut Graph, v: Var) -> Result<Var> {
    let a = g.abs(v);
    let p = g.pow(a, MINKOWSKI_P)?;
    let s = g.sum(p);
    Ok(g.pow(s, 1.0 / MINKOWSKI_P)?)
}

pub fn adm_graph(g: &mut Graph, r: Var, d: Var) -> Result<Var> {
    let shape = g.shape(r);
    let rows = shape.rows - shape.rows % BLOCK;
    let cols = shape.cols - shape.cols % BLOCK;
    if rows == 0 || cols == 0 {
        return Err(Error::TooSmall(format!(
            "{}x{} image for ADM (needs at least {BLOCK}x{BLOCK})",
            shape.cols, shape.rows
        )));
    }
    let crop = Shape::new(rows, cols);
    let (top, left) = ((shape.rows - rows) / 2, (shape.cols - cols) / 2);
    let (mut lo_r, mut lo_d) = if crop == shape {
        (r, d)
    } else {
        (g.crop(r, top, left, crop)?, g.crop(d, top, left, crop)?)
    };

    let mut restored = Vec::with_capacity(ADM_LEVELS * 3);
    let mut original = Vec::with_capacity(ADM_LEVELS * 3);
    for _ in 0..ADM_LEVELS {
        for band in HaarBand::DETAIL {
            let o = g.haar(lo_r, band)?;
            let dd = g.haar(lo_d, band)?;
            let tiny = g.mask_where(o, |v| v.abs() < ZERO_COEF);
            let band_shape = g.shape(o);
            let ones = g.constant(Tensor::filled(band_shape, 1.0));
            let zeros = g.constant(Tensor::zeros(band_shape));
            let safe_o = g.select(tiny.clone(), ones, o)?;
            let ratio = g.div(dd, safe_o)?;
            let k = g.clamp(ratio, 0.0, 1.0);
            let t = g.mul(k, o)?;
            let t = g.select(tiny, zeros, t)?;
            restored.push(minkowski(g, t)?);
            original.push(minkowski(g, o)?);
        }
        lo_r = g.haar(lo_r, HaarBand::LL)?;
        lo_d = g.haar(lo_d, HaarBand::LL)?;
    }

    let num = sum_scalars(g, &restored)?;
    let den = sum_scalars(g, &original)?;
    if g.item(den) < ZERO_COEF {
        return Ok(g.scalar_constant(1.0));
    }
    Ok(g.div(num, den)?)
}

fn sum_scalars(g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> ImagePlane {
        ImagePlane::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            128.0 + 60.0 * (0.31 * x).sin() * (0.17 * y).cos() + 20.0 * (0.9 * x + 0.4 * y).sin()
        })
    }

    #[test]
    fn identity_is_exactly_one() {
        let r = textured(64, 48);
        assert_eq!(adm(&r, &r).unwrap(), 1.0);
    }

    #[test]
    fn flat_pair_is_one() {
        let a = ImagePlane::filled(32, 32, 10.0);
        let b = ImagePlane::filled(32, 32, 200.0);
        assert_eq!(adm(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn constant_distortion_is_near_zero() {
        let r = textured(64, 64);
        let d = ImagePlane::filled(64, 64, r.mean());
        assert!(adm(&r, &d).unwrap() < 1e-9);
    }

    #[test]
    fn crops_to_multiple_of_sixteen() {
        let r = textured(70, 50);
        let d = r.map(|v| v * 0.9 + 5.0).unwrap();
        let direct = adm(&r, &d).unwrap();
        let cropped = adm(&r.crop(3, 1, 64, 48).unwrap(), &d.crop(3, 1, 64, 48).unwrap()).unwrap();
        assert_eq!(direct, cropped);
        assert!(direct < 1.0);
    }

    #[test]
    fn too_small() {
        let r = ImagePlane::filled(15, 40, 1.0);
        assert!(matches!(adm(&r, &r), Err(Error::TooSmall(_))));
    }

    #[test]
    fn amplified_detail_saturates_at_one() {
        let r = textured(32, 32);
        let mean = r.mean();
        let d = r.map(|v| mean + 1.5 * (v - mean)).unwrap();
        assert!((adm(&r, &d).unwrap() - 1.0).abs() < 1e-12);
    }
}
