//! Statistics of perturbations: radially averaged power spectra, Laplacian
//! edge masks and perturbation-vs-brightness curves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::ImagePlane;

/// Row-major complex `side x side` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub side: usize,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    /// Entry at row `ky`, column `kx`.
    pub fn at(&self, kx: usize, ky: usize) -> Complex64 {
        self.data[ky * self.side + kx]
    }
}

fn fft_rows_cols(side: usize, data: &mut [Complex64], inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(side)
    } else {
        planner.plan_fft_forward(side)
    };
    fft.process(data);
    let mut col = vec![Complex64::default(); side];
    for x in 0..side {
        for y in 0..side {
            col[y] = data[y * side + x];
        }
        fft.process(&mut col);
        for y in 0..side {
            data[y * side + x] = col[y];
        }
    }
}

/// Unnormalized forward DFT of a square plane with power-of-two side.
pub fn fft2d(plane: &ImagePlane) -> Result<ComplexGrid> {
    let (w, h) = plane.dims();
    if w != h || !w.is_power_of_two() {
        return Err(Error::Config(format!(
            "fft2d needs a square power-of-two grid, got {w}x{h}"
        )));
    }
    let mut data: Vec<Complex64> = plane.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_rows_cols(w, &mut data, false);
    Ok(ComplexGrid { side: w, data })
}

/// Inverse of [`fft2d`], scaled by `1 / N^2`.
pub fn ifft2d(grid: &ComplexGrid) -> ComplexGrid {
    let n = grid.side;
    let mut data = grid.data.clone();
    fft_rows_cols(n, &mut data, true);
    let s = 1.0 / (n * n) as f64;
    data.iter_mut().for_each(|v| *v *= s);
    ComplexGrid { side: n, data }
}

/// `|F|^2 / N^2` of the mean-subtracted patch. Its mean over all bins equals
/// the patch variance.
pub fn patch_power(patch: &ImagePlane) -> Result<Vec<f64>> {
    let mean = patch.mean();
    let centered = patch.map(|v| v - mean)?;
    let n2 = patch.len() as f64;
    Ok(fft2d(&centered)?.data.iter().map(|c| c.norm_sqr() / n2).collect())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrumCurve {
    /// Cycles per pixel, `r / patch_size` for integer radii `r = 1..=patch_size/2`.
    pub freq: Vec<f64>,
    pub power: Vec<f64>,
    pub n_patches: usize,
    pub patch_size: usize,
}

impl SpectrumCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("freq,power\n");
        for (f, p) in self.freq.iter().zip(&self.power) {
            out.push_str(&format!("{f},{p}\n"));
        }
        out
    }
}

/// Largest power of two not exceeding `n`.
fn pow2_floor(n: usize) -> usize {
    1usize << (usize::BITS - 1 - n.leading_zeros())
}

/// Circularly averaged power spectrum over `n_patches` random square patches.
///
/// If the image is smaller than `patch`, the largest power-of-two patch that
/// fits is used instead; the curve records the size actually used.
pub fn power_spectrum_1d(img: &ImagePlane, n_patches: usize, patch: usize, seed: u64) -> Result<SpectrumCurve> {
    if !patch.is_power_of_two() || patch < 4 {
        return Err(Error::Config(format!(
            "patch size must be a power of two >= 4, got {patch}"
        )));
    }
    if n_patches == 0 {
        return Err(Error::Config("need at least one patch".into()));
    }
    let (w, h) = img.dims();
    let side = if w.min(h) < patch { pow2_floor(w.min(h)) } else { patch };
    if side < 4 {
        return Err(Error::TooSmall(format!("{w}x{h} image for a power spectrum")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origins: Vec<(usize, usize)> = (0..n_patches)
        .map(|_| (rng.gen_range(0..=w - side), rng.gen_range(0..=h - side)))
        .collect();
    let spectra = origins
        .par_iter()
        .map(|&(x, y)| patch_power(&img.crop(x, y, side, side)?))
        .collect::<Result<Vec<_>>>()?;
    let mut mean2d = vec![0.0; side * side];
    for s in &spectra {
        mean2d.iter_mut().zip(s).for_each(|(m, v)| *m += v);
    }
    mean2d.iter_mut().for_each(|m| *m /= n_patches as f64);

    let (freq, power) = radial_average(&mean2d, side);
    Ok(SpectrumCurve {
        freq,
        power,
        n_patches,
        patch_size: side,
    })
}

/// Averages a 2-D spectrum over annuli of integer-rounded radius `1..=N/2`.
fn radial_average(power2d: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let nb = n / 2;
    let mut sum = vec![0.0; nb + 1];
    let mut count = vec![0usize; nb + 1];
    let signed = |k: usize| if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    for ky in 0..n {
        for kx in 0..n {
            let r = signed(kx).hypot(signed(ky)).round() as usize;
            if (1..=nb).contains(&r) {
                sum[r] += power2d[ky * n + kx];
                count[r] += 1;
            }
        }
    }
    (1..=nb)
        .map(|r| (r as f64 / n as f64, sum[r] / count[r] as f64))
        .unzip()
}

/// Ordinary least squares `y = slope * x + intercept`; returns `(slope, intercept, r^2)`.
pub fn least_squares(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Numeric("least squares needs two points".into()));
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Numeric("least squares with constant abscissa".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok((slope, intercept, r2))
}

/// Log-log slope of the curve restricted to `band = (f_lo, f_hi)`.
pub fn spectral_slope(curve: &SpectrumCurve, band: (f64, f64)) -> Result<f64> {
    let pts: Vec<(f64, f64)> = curve
        .freq
        .iter()
        .zip(&curve.power)
        .filter(|(f, _)| **f >= band.0 && **f <= band.1)
        .map(|(f, p)| (*f, *p))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Numeric(format!(
            "only {} spectrum bins in band {band:?}",
            pts.len()
        )));
    }
    if pts.iter().any(|(_, p)| *p <= 0.0) {
        return Err(Error::Numeric("non-positive power inside the fit band".into()));
    }
    let logs: Vec<_> = pts.iter().map(|(f, p)| (f.ln(), p.ln())).collect();
    Ok(least_squares(&logs)?.0)
}

/// Valid-mode 4-neighbour Laplacian; output is `(w-2) x (h-2)`.
pub fn laplacian(img: &ImagePlane) -> Result<ImagePlane> {
    let (w, h) = img.dims();
    if w < 3 || h < 3 {
        return Err(Error::TooSmall(format!("{w}x{h} image for a 3x3 Laplacian")));
    }
    let d = img.data();
    Ok(ImagePlane::from_fn(w - 2, h - 2, |x, y| {
        let c = (y + 1) * w + x + 1;
        d[c - w] + d[c + w] + d[c - 1] + d[c + 1] - 4.0 * d[c]
    }))
}

/// Boolean plane aligned with the valid Laplacian region: entry `(x, y)`
/// describes image pixel `(x + 1, y + 1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl EdgeMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
}

/// Pixels whose Laplacian magnitude exceeds `k` image standard deviations.
pub fn edge_mask(img: &ImagePlane, k: f64) -> Result<EdgeMask> {
    let lap = laplacian(img)?;
    let thr = k * img.std_dev();
    Ok(EdgeMask {
        width: lap.width(),
        height: lap.height(),
        data: lap.data().iter().map(|v| v.abs() > thr).collect(),
    })
}

/// Perturbation statistics per rounded reference intensity.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BrightnessCurve {
    /// `0..=255`.
    pub intensity: Vec<u8>,
    /// `None` where the bin is empty.
    pub mean_delta: Vec<Option<f64>>,
    pub mean_abs_delta: Vec<Option<f64>>,
    pub std_delta: Vec<Option<f64>>,
    pub count: Vec<usize>,
}

impl BrightnessCurve {
    pub fn total(&self) -> usize {
        self.count.iter().sum()
    }

    /// Least-squares slope of mean `|delta|` against intensity over nonempty bins.
    pub fn mean_abs_slope(&self) -> Result<f64> {
        let pts: Vec<(f64, f64)> = self
            .intensity
            .iter()
            .zip(&self.mean_abs_delta)
            .filter_map(|(i, m)| m.map(|m| (*i as f64, m)))
            .collect();
        Ok(least_squares(&pts)?.0)
    }

    /// Empty bins are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("intensity,mean,meanabs,std,count\n");
        for i in 0..self.intensity.len() {
            if let (Some(m), Some(a), Some(s)) = (self.mean_delta[i], self.mean_abs_delta[i], self.std_delta[i]) {
                out.push_str(&format!("{},{m},{a},{s},{}\n", self.intensity[i], self.count[i]));
            }
        }
        out
    }
}

/// Groups `delta` by `round(R)`; with a mask only masked pixels contribute.
pub fn brightness_delta_curve(
    reference: &ImagePlane,
    delta: &ImagePlane,
    mask: Option<&EdgeMask>,
) -> Result<BrightnessCurve> {
    reference.check_same_dims(delta)?;
    let (w, h) = reference.dims();
    if let Some(m) = mask {
        if (m.width + 2, m.height + 2) != (w, h) {
            return Err(Error::DimensionMismatch(w, h, m.width + 2, m.height + 2));
        }
    }
    let mut sum = [0.0f64; 256];
    let mut sum_abs = [0.0f64; 256];
    let mut sum_sq = [0.0f64; 256];
    let mut count = [0usize; 256];
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                let inside = x >= 1 && y >= 1 && x <= m.width && y <= m.height;
                if !inside || !m.get(x - 1, y - 1) {
                    continue;
                }
            }
            let bin = reference.get(x, y).round().clamp(0.0, 255.0) as usize;
            let d = delta.get(x, y);
            sum[bin] += d;
            sum_abs[bin] += d.abs();
            sum_sq[bin] += d * d;
            count[bin] += 1;
        }
    }
    let per_bin = |f: &dyn Fn(usize, f64) -> f64| -> Vec<Option<f64>> {
        (0..256)
            .map(|i| (count[i] > 0).then(|| f(i, count[i] as f64)))
            .collect()
    };
    Ok(BrightnessCurve {
        intensity: (0..=255).collect(),
        mean_delta: per_bin(&|i, n| sum[i] / n),
        mean_abs_delta: per_bin(&|i, n| sum_abs[i] / n),
        std_delta: per_bin(&|i, n| (sum_sq[i] / n - (sum[i] / n).powi(2)).max(0.0).sqrt()),
        count: count.to_vec(),
    })
}
