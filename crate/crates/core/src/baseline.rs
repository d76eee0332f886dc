//! Classical enhancement filters used as a yardstick for adversarial gains.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::blur_replicate;
use crate::metrics::{extract_features, fused_score, psnr, FusionModel};
use crate::{Dataset, ImagePlane};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Unsharp,
    Clahe,
    Gamma,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Unsharp => "unsharp",
            Method::Clahe => "clahe",
            Method::Gamma => "gamma",
        }
    }

    /// Name of the single swept parameter.
    pub fn param_name(self) -> &'static str {
        match self {
            Method::Unsharp => "amount",
            Method::Clahe => "clip_limit",
            Method::Gamma => "gamma",
        }
    }

    pub fn apply(self, img: &ImagePlane, param: f64) -> Result<ImagePlane> {
        match self {
            Method::Unsharp => unsharp_mask(img, param),
            Method::Clahe => clahe(img, (8, 8), param),
            Method::Gamma => gamma_correct(img, param),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unsharp" => Ok(Method::Unsharp),
            "clahe" => Ok(Method::Clahe),
            "gamma" => Ok(Method::Gamma),
            _ => Err(Error::Config(format!("unknown baseline method {s:?}"))),
        }
    }
}

/// `img + amount * (img - blur5x5(img))`, Gaussian sigma 1 with replicated borders.
pub fn unsharp_mask(img: &ImagePlane, amount: f64) -> Result<ImagePlane> {
    let (w, h) = img.dims();
    if w < 5 || h < 5 {
        return Err(Error::TooSmall(format!("{w}x{h} image for a 5x5 unsharp mask")));
    }
    if !(amount.is_finite() && amount >= 0.0) {
        return Err(Error::Config(format!("unsharp amount must be >= 0, got {amount}")));
    }
    let blurred = blur_replicate(img, 5, 1.0);
    img.zip_map(&blurred, |v, b| v + amount * (v - b))
}

/// `255 * (img / 255)^gamma`; negative inputs are treated as 0.
pub fn gamma_correct(img: &ImagePlane, gamma: f64) -> Result<ImagePlane> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    img.map(|v| 255.0 * (v.max(0.0) / 255.0).powf(gamma))
}

/// Half-open pixel ranges of `n` tiles over `len` pixels.
fn tile_bounds(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n).map(|i| (i * len / n, (i + 1) * len / n)).collect()
}

/// Intensity mapping of one tile: clipped histogram, uniform redistribution
/// of the clipped excess, then `255 * cdf / total`.
fn tile_mapping(img: &ImagePlane, xs: (usize, usize), ys: (usize, usize), clip_limit: f64) -> [f64; 256] {
    let mut hist = [0.0f64; 256];
    for y in ys.0..ys.1 {
        for x in xs.0..xs.1 {
            hist[bin(img.get(x, y))] += 1.0;
        }
    }
    let total = ((xs.1 - xs.0) * (ys.1 - ys.0)) as f64;
    let limit = clip_limit * total / 256.0;
    let mut excess = 0.0;
    for c in hist.iter_mut() {
        if *c > limit {
            excess += *c - limit;
            *c = limit;
        }
    }
    let share = excess / 256.0;
    let mut map = [0.0; 256];
    let mut cdf = 0.0;
    for (m, c) in map.iter_mut().zip(hist) {
        cdf += c + share;
        *m = (255.0 * cdf / total).min(255.0);
    }
    map
}

fn bin(v: f64) -> usize {
    v.round().clamp(0.0, 255.0) as usize
}

/// Interpolation partners along one axis: `(lower tile, upper tile, weight of upper)`.
fn axis_weights(pos: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.iter().rposition(|&c| c <= p).unwrap();
    (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
}

/// Contrast-limited adaptive histogram equalization over a `tiles.0 x tiles.1`
/// grid, bilinearly blending the mappings of the four nearest tile centers.
pub fn clahe(img: &ImagePlane, tiles: (usize, usize), clip_limit: f64) -> Result<ImagePlane> {
    let (w, h) = img.dims();
    let (tx, ty) = tiles;
    if tx == 0 || ty == 0 || w < tx || h < ty {
        return Err(Error::TooSmall(format!("{w}x{h} image for a {tx}x{ty} tile grid")));
    }
    if clip_limit.is_nan() || clip_limit < 1.0 {
        return Err(Error::Config(format!("clip limit must be >= 1, got {clip_limit}")));
    }
    let xb = tile_bounds(w, tx);
    let yb = tile_bounds(h, ty);
    let maps: Vec<[f64; 256]> = yb
        .iter()
        .flat_map(|&ys| xb.iter().map(move |&xs| (xs, ys)))
        .map(|(xs, ys)| tile_mapping(img, xs, ys, clip_limit))
        .collect();
    let center = |b: &(usize, usize)| (b.0 + b.1 - 1) as f64 / 2.0;
    let xc: Vec<f64> = xb.iter().map(center).collect();
    let yc: Vec<f64> = yb.iter().map(center).collect();

    Ok(ImagePlane::from_fn(w, h, |x, y| {
        let v = bin(img.get(x, y));
        let (x0, x1, fx) = axis_weights(x, &xc);
        let (y0, y1, fy) = axis_weights(y, &yc);
        let m = |i: usize, j: usize| maps[j * tx + i][v];
        let top = (1.0 - fx) * m(x0, y0) + fx * m(x1, y0);
        let bottom = (1.0 - fx) * m(x0, y1) + fx * m(x1, y1);
        (1.0 - fy) * top + fy * bottom
    }))
}

/// One processed image.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaselineResult {
    pub method: Method,
    pub params: BTreeMap<String, f64>,
    pub psnr: f64,
    pub gain: f64,
}

/// Applies `method` to `reference` and scores the result against it.
pub fn evaluate_baseline(
    reference: &ImagePlane,
    method: Method,
    param: f64,
    model: &FusionModel,
) -> Result<BaselineResult> {
    let out = method.apply(reference, param)?;
    let before = fused_score(&extract_features(reference, reference)?, model);
    let after = fused_score(&extract_features(reference, &out)?, model);
    Ok(BaselineResult {
        method,
        params: BTreeMap::from([(method.param_name().to_string(), param)]),
        psnr: psnr(reference, &out)?,
        gain: after - before,
    })
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaselineRow {
    pub method: Method,
    pub param: f64,
    /// `+inf` when every image is left unchanged.
    pub mean_psnr: f64,
    pub mean_gain: f64,
    pub n_images: usize,
    /// Whether `mean_psnr` falls inside the requested window (always true without one).
    pub in_window: bool,
}

/// Mean PSNR and gain per grid value; rows outside `psnr_window` are flagged, not dropped.
pub fn baseline_sweep(
    data: &Dataset,
    model: &FusionModel,
    method: Method,
    grid: &[f64],
    psnr_window: Option<(f64, f64)>,
) -> Result<Vec<BaselineRow>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("baseline dataset".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|p| (0..data.len()).map(move |i| (p, i)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(p, i)| evaluate_baseline(&data.entries()[i].1, method, grid[p], model))
        .collect::<Result<Vec<_>>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(p, &param)| {
            let rows = &results[p * data.len()..(p + 1) * data.len()];
            let n = rows.len() as f64;
            let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
            BaselineRow {
                method,
                param,
                mean_psnr,
                mean_gain: rows.iter().map(|r| r.gain).sum::<f64>() / n,
                n_images: rows.len(),
                in_window: psnr_window.is_none_or(|(lo, hi)| mean_psnr >= lo && mean_psnr <= hi),
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[BaselineRow]) -> String {
    let mut out = String::from("method,param,mean_psnr,mean_gain,n_images\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method, r.param, r.mean_psnr, r.mean_gain, r.n_images
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_edge() -> ImagePlane {
        ImagePlane::from_fn(12, 12, |x, _| if x < 6 { 50.0 } else { 150.0 })
    }

    #[test]
    fn unsharp_basics() {
        let img = step_edge();
        assert_eq!(unsharp_mask(&img, 0.0).unwrap(), img);
        let flat = ImagePlane::filled(8, 8, 77.0);
        let out = unsharp_mask(&flat, 3.0).unwrap();
        assert!(out.data().iter().all(|v| (v - 77.0).abs() < 1e-12));
        let out = unsharp_mask(&img, 1.0).unwrap();
        assert!(out.data().iter().cloned().fold(f64::MIN, f64::max) > 150.0);
        assert!(out.data().iter().cloned().fold(f64::MAX, f64::min) < 50.0);
        assert!(unsharp_mask(&ImagePlane::filled(4, 9, 0.0), 1.0).is_err());
    }

    #[test]
    fn unsharp_linear_in_amount() {
        let img = crate::synth::natural_scene(20, 16, 3, &Default::default());
        let one = unsharp_mask(&img, 1.0).unwrap();
        let a = unsharp_mask(&img, 2.5).unwrap();
        for i in 0..img.len() {
            let lhs = a.data()[i] - img.data()[i];
            let rhs = 2.5 * (one.data()[i] - img.data()[i]);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn gamma_examples() {
        let img = ImagePlane::new(3, 1, vec![0.0, 127.5, 255.0]).unwrap();
        assert_eq!(gamma_correct(&img, 1.0).unwrap(), img);
        let g = gamma_correct(&img, 2.0).unwrap();
        assert_eq!(g.data(), &[0.0, 63.75, 255.0]);
        assert!(gamma_correct(&img, 0.0).is_err());
    }

    #[test]
    fn clahe_two_tile_oracle() {
        // 16x16, left half 40, right half 200, 2x1 tiles: each tile is flat so
        // with any clip the CDF jumps at its single level.
        let img = ImagePlane::from_fn(16, 16, |x, _| if x < 8 { 40.0 } else { 200.0 });
        let out = clahe(&img, (2, 1), 1e9).unwrap();
        // tile centers at x = 3.5 and 11.5
        assert_eq!(out.get(0, 0), 255.0);
        assert_eq!(out.get(15, 5), 255.0);
        // x = 7 (value 40): left map 255, right tile never saw 40 -> 0
        let fx = (7.0 - 3.5) / 8.0;
        assert!((out.get(7, 0) - (1.0 - fx) * 255.0).abs() < 1e-12);

        // clip limit 1: 64 pixels per bin share out all excess uniformly
        let out = clahe(&img, (2, 1), 1.0).unwrap();
        let limit = 128.0 / 256.0;
        let share = (128.0 - limit) / 256.0;
        let expect_left = 255.0 * (41.0 * share + limit) / 128.0;
        assert!((out.get(0, 3) - expect_left).abs() < 1e-9);
    }

    #[test]
    fn clahe_unclipped_single_tile_is_equalization() {
        let img = crate::synth::natural_scene(16, 16, 9, &Default::default());
        let out = clahe(&img, (1, 1), f64::INFINITY).unwrap();
        let mut counts = [0usize; 256];
        img.data().iter().for_each(|&v| counts[v as usize] += 1);
        for (v, o) in img.data().iter().zip(out.data()) {
            let cdf: usize = counts[..=*v as usize].iter().sum();
            assert!((o - 255.0 * cdf as f64 / 256.0).abs() < 1e-9);
        }
    }

    #[test]
    fn clahe_range_and_errors() {
        let img = crate::synth::natural_scene(64, 48, 2, &Default::default());
        let out = clahe(&img, (8, 8), 2.0).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=255.0).contains(v)));
        assert!(clahe(&img, (8, 8), 0.5).is_err());
        assert!(clahe(&ImagePlane::filled(4, 4, 1.0), (8, 8), 2.0).is_err());
    }

    #[test]
    fn tile_mapping_is_monotone() {
        let img = crate::synth::natural_scene(32, 32, 5, &Default::default());
        for clip in [1.0, 2.0, 4.0, f64::INFINITY] {
            let m = tile_mapping(&img, (0, 32), (0, 32), clip);
            assert!(m.windows(2).all(|p| p[0] <= p[1]));
        }
    }
}
