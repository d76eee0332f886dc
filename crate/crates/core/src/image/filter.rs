use crate::autodiff::graph::gaussian_taps;
use crate::ImagePlane;

/// Same-size separable Gaussian blur (`size` taps, normalized) with edge
/// replication at the borders.
pub fn blur_replicate(img: &ImagePlane, size: usize, sigma: f64) -> ImagePlane {
    let taps = gaussian_taps(size, sigma);
    let (w, h) = img.dims();
    let data = separable_replicate(img.data(), w, h, &taps);
    ImagePlane::new(w, h, data).expect("blur of finite samples is finite")
}

pub(crate) fn separable_replicate(src: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let radius = (taps.len() / 2) as isize;
    let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for x in 0..width {
            tmp[y * width + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * row[clampi(x as isize + k as isize - radius, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for (k, t) in taps.iter().enumerate() {
            let yy = clampi(y as isize + k as isize - radius, height);
            for x in 0..width {
                out[y * width + x] += t * tmp[yy * width + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_survive() {
        let out = blur_replicate(&ImagePlane::filled(6, 5, 42.0), 7, 1.5);
        assert!(out.data().iter().all(|v| (v - 42.0).abs() < 1e-12));
    }

    #[test]
    fn edge_replication() {
        // 1-D impulse at the left border: replicated taps fold back onto it
        let img = ImagePlane::from_fn(5, 1, |x, _| if x == 0 { 1.0 } else { 0.0 });
        let taps = gaussian_taps(3, 1.0);
        let out = blur_replicate(&img, 3, 1.0);
        assert!((out.get(0, 0) - (taps[0] + taps[1])).abs() < 1e-15);
        assert!((out.get(1, 0) - taps[0]).abs() < 1e-15);
        assert_eq!(out.get(3, 0), 0.0);
    }
}
