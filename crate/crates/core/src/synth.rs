//! Procedural test scenes with natural-image statistics.
//!
//! A dead-leaves model: opaque disks with power-law distributed radii occlude
//! each other, which yields an approximately `1/f^2` power spectrum and sharp
//! object boundaries. Rendering happens in linear light (reflectance x smooth
//! illumination x faint surface texture), followed by a mild optical blur,
//! display gamma, additive sensor noise and 8-bit quantization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ImagePlane;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SceneParams {
    pub min_radius: f64,
    /// Relative to the shorter image side.
    pub max_radius_frac: f64,
    /// Exponent of the radius density `p(r) ~ r^-alpha`.
    pub radius_exponent: f64,
    pub min_reflectance: f64,
    pub max_reflectance: f64,
    pub texture_amplitude: f64,
    pub blur_sigma: f64,
    pub gamma: f64,
    /// Sensor noise standard deviation, 8-bit code values.
    pub noise_sigma: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_radius: 2.0,
            max_radius_frac: 0.35,
            radius_exponent: 3.0,
            min_reflectance: 0.03,
            max_reflectance: 0.9,
            texture_amplitude: 0.08,
            blur_sigma: 0.4,
            gamma: 2.2,
            noise_sigma: 1.5,
        }
    }
}

struct Leaf {
    reflectance: f64,
    kx: f64,
    ky: f64,
    phase: f64,
}

/// Renders a `width x height` scene; fully determined by `seed`.
pub fn natural_scene(width: usize, height: usize, seed: u64, params: &SceneParams) -> ImagePlane {
    assert!(width > 0 && height > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = width * height;

    // Front-to-back: a pixel keeps the first leaf that covers it.
    let mut owner: Vec<Option<u32>> = vec![None; n];
    let mut uncovered = n;
    let mut leaves: Vec<Leaf> = Vec::new();
    let rmin = params.min_radius;
    let rmax = (params.max_radius_frac * width.min(height) as f64).max(rmin + 1.0);
    let a = params.radius_exponent - 1.0;
    let (lo_r, hi_r) = (params.min_reflectance.ln(), params.max_reflectance.ln());
    let max_leaves = 200 * n / 16 + 1000;
    while uncovered > 0 && leaves.len() < max_leaves {
        // inverse CDF of r^-alpha on [rmin, rmax]
        let u: f64 = rng.gen();
        let radius = (rmin.powf(-a) - u * (rmin.powf(-a) - rmax.powf(-a))).powf(-1.0 / a);
        let cx = rng.gen_range(-radius..width as f64 + radius);
        let cy = rng.gen_range(-radius..height as f64 + radius);
        let freq = rng.gen_range(0.05..0.6);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        let r2 = radius * radius;
        let leaf = Leaf {
            reflectance: rng.gen_range(lo_r..hi_r).exp(),
            kx: freq * angle.cos(),
            ky: freq * angle.sin(),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
        };
        let id = leaves.len() as u32;
        let x0 = (cx - radius).floor().max(0.0) as usize;
        let x1 = ((cx + radius).ceil() as usize).min(width.saturating_sub(1));
        let y0 = (cy - radius).floor().max(0.0) as usize;
        let y1 = ((cy + radius).ceil() as usize).min(height.saturating_sub(1));
        if cx + radius >= 0.0 && cy + radius >= 0.0 && x0 <= x1 && y0 <= y1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let slot = &mut owner[y * width + x];
                    if slot.is_none() && dx * dx + dy * dy <= r2 {
                        *slot = Some(id);
                        uncovered -= 1;
                    }
                }
            }
        }
        leaves.push(leaf);
    }

    // smooth illumination: a random tilt plus one broad bump
    let tilt = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let bump = (
        rng.gen_range(0.0..width as f64),
        rng.gen_range(0.0..height as f64),
        rng.gen_range(0.3..0.8) * width.max(height) as f64,
    );
    let mut linear = vec![0.0; n];
    for y in 0..height {
        for x in 0..width {
            let (u, v) = (x as f64 / width as f64 - 0.5, y as f64 / height as f64 - 0.5);
            let (dx, dy) = (x as f64 - bump.0, y as f64 - bump.1);
            let illum = 0.75 + tilt.0 * u + tilt.1 * v + 0.25 * (-(dx * dx + dy * dy) / (2.0 * bump.2 * bump.2)).exp();
            let reflect = match owner[y * width + x] {
                Some(id) => {
                    let l = &leaves[id as usize];
                    let tex = 1.0 + params.texture_amplitude * (l.kx * x as f64 + l.ky * y as f64 + l.phase).sin();
                    l.reflectance * tex
                }
                None => params.min_reflectance,
            };
            linear[y * width + x] = (illum * reflect).clamp(0.0, 1.0);
        }
    }

    let linear = if params.blur_sigma > 0.0 {
        let radius = (3.0 * params.blur_sigma).ceil() as usize;
        let taps = crate::autodiff::graph::gaussian_taps(2 * radius + 1, params.blur_sigma);
        crate::image::separable_replicate(&linear, width, height, &taps)
    } else {
        linear
    };

    let noise = Normal::new(0.0, params.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let data = linear
        .into_iter()
        .map(|l| {
            let code = 255.0 * l.max(0.0).powf(1.0 / params.gamma);
            let noisy = if params.noise_sigma > 0.0 {
                code + noise.sample(&mut rng)
            } else {
                code
            };
            noisy.round().clamp(0.0, 255.0)
        })
        .collect();
    ImagePlane::new(width, height, data).expect("scene samples are finite")
}

/// Independent uniform noise on `[0, 255]`.
pub fn uniform_noise(width: usize, height: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..width * height).map(|_| rng.gen_range(0.0..=255.0)).collect();
    ImagePlane::new(width, height, data).expect("finite")
}
