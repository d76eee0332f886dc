//! Metric values against independent loop-level reimplementations, identity
//! invariants and gradient checks on natural crops.

use advmetric_core::metrics::gradcheck::{gradcheck_size, natural_crop_pair, objective_gradcheck, GRADCHECK_STEP};
use advmetric_core::metrics::*;
use advmetric_core::synth::{natural_scene, uniform_noise, SceneParams};
use advmetric_core::ImagePlane;
use proptest::prelude::*;

// ---------------------------------------------------------------- oracles

struct Grid {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Grid {
    fn from(p: &ImagePlane) -> Self {
        Grid {
            w: p.width(),
            h: p.height(),
            v: p.data().to_vec(),
        }
    }
    fn at(&self, x: usize, y: usize) -> f64 {
        self.v[y * self.w + x]
    }
    fn zip(&self, o: &Grid, f: impl Fn(f64, f64) -> f64) -> Grid {
        Grid {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }
}

fn window(n: usize) -> Vec<Vec<f64>> {
    let sigma = n as f64 / 5.0;
    let c = (n as f64 - 1.0) / 2.0;
    let mut w = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    w.iter_mut().flatten().for_each(|v| *v /= total);
    w
}

fn filter_valid(g: &Grid, k: &[Vec<f64>]) -> Grid {
    let n = k.len();
    let (w, h) = (g.w - n + 1, g.h - n + 1);
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, row) in k.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    acc += kv * g.at(x + j, y + i);
                }
            }
            v.push(acc);
        }
    }
    Grid { w, h, v }
}

fn decimate(g: &Grid) -> Grid {
    let (w, h) = (g.w.div_ceil(2), g.h.div_ceil(2));
    let mut v = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            v.push(g.at(2 * x, 2 * y));
        }
    }
    Grid { w, h, v }
}

fn vif_oracle(r: &ImagePlane, d: &ImagePlane, scale: usize) -> f64 {
    let (floor, noise) = (1e-10, 2.0);
    let (mut x, mut y) = (Grid::from(r), Grid::from(d));
    for stage in 1..=scale {
        let k = window((1 << (4 - stage)) + 1);
        x = decimate(&filter_valid(&x, &k));
        y = decimate(&filter_valid(&y, &k));
    }
    let k = window((1 << (4 - scale)) + 1);
    let mu1 = filter_valid(&x, &k);
    let mu2 = filter_valid(&y, &k);
    let exx = filter_valid(&x.zip(&x, |a, b| a * b), &k);
    let eyy = filter_valid(&y.zip(&y, |a, b| a * b), &k);
    let exy = filter_valid(&x.zip(&y, |a, b| a * b), &k);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..mu1.v.len() {
        let s1 = (exx.v[i] - mu1.v[i] * mu1.v[i]).max(0.0);
        let s2 = (eyy.v[i] - mu2.v[i] * mu2.v[i]).max(0.0);
        let s12 = exy.v[i] - mu1.v[i] * mu2.v[i];
        let mut gain = s12 / (s1 + floor);
        let mut sv = s2 - gain * s12;
        if s1 < floor {
            gain = 0.0;
            sv = s2;
        }
        if s2 < floor {
            gain = 0.0;
            sv = 0.0;
        }
        if gain < 0.0 {
            gain = 0.0;
            sv = s2;
        }
        let sv = sv.max(floor);
        num += (1.0 + gain * gain * s1 / (sv + noise)).ln();
        den += (1.0 + s1 / noise).ln();
    }
    if den < floor {
        1.0
    } else {
        num / den
    }
}

fn haar_level(g: &Grid) -> (Grid, [Grid; 3]) {
    let (w, h) = (g.w / 2, g.h / 2);
    let mut out: [Vec<f64>; 4] = Default::default();
    for y in 0..h {
        for x in 0..w {
            let (a, b) = (g.at(2 * x, 2 * y), g.at(2 * x + 1, 2 * y));
            let (c, e) = (g.at(2 * x, 2 * y + 1), g.at(2 * x + 1, 2 * y + 1));
            out[0].push((a + b + c + e) / 2.0);
            out[1].push((a - b + c - e) / 2.0);
            out[2].push((a + b - c - e) / 2.0);
            out[3].push((a - b - c + e) / 2.0);
        }
    }
    let [ll, b1, b2, b3] = out;
    let mk = |v| Grid { w, h, v };
    (mk(ll), [mk(b1), mk(b2), mk(b3)])
}

fn adm_oracle(r: &ImagePlane, d: &ImagePlane) -> f64 {
    let (cw, ch) = (r.width() / 16 * 16, r.height() / 16 * 16);
    let (x0, y0) = ((r.width() - cw) / 2, (r.height() - ch) / 2);
    let mut o = Grid::from(&r.crop(x0, y0, cw, ch).unwrap());
    let mut dd = Grid::from(&d.crop(x0, y0, cw, ch).unwrap());
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..4 {
        let (ol, ob) = haar_level(&o);
        let (dl, db) = haar_level(&dd);
        for (bo, bd) in ob.iter().zip(&db) {
            let (mut st, mut so) = (0.0, 0.0);
            for (ov, dv) in bo.v.iter().zip(&bd.v) {
                let t = if ov.abs() < 1e-12 {
                    0.0
                } else {
                    (dv / ov).clamp(0.0, 1.0) * ov
                };
                st += t.abs().powi(3);
                so += ov.abs().powi(3);
            }
            num += st.cbrt();
            den += so.cbrt();
        }
        o = ol;
        dd = dl;
    }
    if den < 1e-12 {
        1.0
    } else {
        num / den
    }
}

fn box3(img: &ImagePlane) -> ImagePlane {
    let (w, h) = img.dims();
    ImagePlane::from_fn(w, h, |x, y| {
        let mut acc = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                acc += img.get(xx, yy);
            }
        }
        acc / 9.0
    })
}

fn crop(seed: u64, size: usize) -> ImagePlane {
    natural_scene(352, 288, seed, &SceneParams::default())
        .crop(100, 80, size, size)
        .unwrap()
}

// ---------------------------------------------------------------- VIF

#[test]
fn vif_matches_oracle_on_blur_and_sharpening() {
    for seed in 0..3 {
        let r = crop(seed, 64);
        let blurred = box3(&r);
        let sharpened = r.zip_map(&blurred, |v, b| v + 1.5 * (v - b)).unwrap();
        for s in 0..VIF_SCALES {
            let lib = vif_scale(&r, &blurred, s, &VifGuards::default()).unwrap();
            let oracle = vif_oracle(&r, &blurred, s);
            assert!(
                (lib - oracle).abs() < 1e-9 * oracle.abs().max(1.0),
                "blur s={s}: {lib} vs {oracle}"
            );
            assert!(lib > 0.0 && lib < 1.0, "blurred VIF{s} = {lib}");

            let lib = vif_scale(&r, &sharpened, s, &VifGuards::default()).unwrap();
            let oracle = vif_oracle(&r, &sharpened, s);
            assert!(
                (lib - oracle).abs() < 1e-9 * oracle.abs().max(1.0),
                "sharp s={s}: {lib} vs {oracle}"
            );
        }
        // contrast enhancement is not capped at 1
        let stretched = r.map(|v| 1.3 * (v - 128.0) + 128.0).unwrap();
        for s in 0..VIF_SCALES {
            let lib = vif_scale(&r, &stretched, s, &VifGuards::default()).unwrap();
            assert!((lib - vif_oracle(&r, &stretched, s)).abs() < 1e-9 * lib);
            assert!(lib > 1.0, "stretched VIF{s} = {lib}");
        }
    }
}

#[test]
fn vif_matches_oracle_on_unrelated_images() {
    let r = crop(3, 48);
    let d = uniform_noise(48, 48, 3);
    for s in 0..VIF_SCALES {
        let lib = vif_scale(&r, &d, s, &VifGuards::default()).unwrap();
        assert!((lib - vif_oracle(&r, &d, s)).abs() < 1e-9);
    }
}

// ---------------------------------------------------------------- ADM

#[test]
fn adm_matches_oracle() {
    for seed in 0..3 {
        let r = natural_scene(100, 70, seed, &SceneParams::default());
        for d in [
            box3(&r),
            uniform_noise(100, 70, seed),
            r.map(|v| 1.2 * v - 10.0).unwrap(),
        ] {
            let lib = adm(&r, &d).unwrap();
            let oracle = adm_oracle(&r, &d);
            assert!((lib - oracle).abs() < 1e-12, "{lib} vs {oracle}");
            assert!(lib <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn adm_of_constant_is_near_zero() {
    let r = crop(4, 64);
    let d = ImagePlane::filled(64, 64, 128.0);
    let v = adm(&r, &d).unwrap();
    assert_eq!(v, adm_oracle(&r, &d));
    assert!(v < 1e-9);
}

// ---------------------------------------------------------------- identity

#[test]
fn identity_invariants() {
    let model = FusionModel::default();
    for seed in 0..5 {
        let full = natural_scene(352, 288, seed, &SceneParams::default());
        for r in [crop(seed, 64), full.clone()] {
            let f = extract_features(&r, &r).unwrap();
            for (s, v) in f.vif.iter().enumerate() {
                assert!((v - 1.0).abs() < 1e-6, "VIF{s}(R,R) = {v}");
            }
            assert_eq!(f.adm, 1.0);
            assert_eq!(f.motion, 0.0);
        }
        // The variance floor in the gain leaves a bias of order floor/variance
        // per window; low-contrast crops can push it past 1e-9, full frames
        // stay well inside.
        let score = fused_score(&extract_features(&full, &full).unwrap(), &model);
        assert!((score - 97.4).abs() < 1e-9, "identity score {score}");
    }
}

#[test]
fn blurred_features_do_not_exceed_identity() {
    for seed in 0..3 {
        let r = crop(seed, 96);
        let id = extract_features(&r, &r).unwrap();
        let f = extract_features(&r, &box3(&r)).unwrap();
        for s in 0..4 {
            assert!(f.vif[s] <= id.vif[s], "VIF{s}: {} > {}", f.vif[s], id.vif[s]);
        }
        assert!(f.adm <= id.adm);
    }
}

#[test]
fn noise_features_are_finite() {
    let r = crop(7, 64);
    let f = extract_features(&r, &uniform_noise(64, 64, 1)).unwrap();
    assert!(f.as_array().iter().all(|v| v.is_finite()));
}

// ---------------------------------------------------------------- gradients

fn gradient_suite(objective: Objective) {
    let size = gradcheck_size(objective, 32);
    for seed in 0..5 {
        let (r, d) = natural_crop_pair(seed, size);
        let report = objective_gradcheck(objective, &r, &d, &FusionModel::default(), GRADCHECK_STEP).unwrap();
        // a guard-zeroed objective would pass trivially
        assert!(
            report.analytic.data().iter().any(|g| g.abs() > 1e-9),
            "{objective} pair {seed} is flat"
        );
        assert!(
            report.max_rel_error < 1e-4,
            "{objective} pair {seed} ({size}x{size}): {:e}",
            report.max_rel_error
        );
    }
}

#[test]
fn fused_gradient() {
    gradient_suite(Objective::Fused);
}

#[test]
fn vif0_gradient() {
    gradient_suite(Objective::Vif0);
}

#[test]
fn vif1_gradient() {
    gradient_suite(Objective::Vif1);
}

#[test]
fn vif2_gradient() {
    gradient_suite(Objective::Vif2);
}

#[test]
fn vif3_gradient() {
    gradient_suite(Objective::Vif3);
}

#[test]
fn adm_gradient() {
    gradient_suite(Objective::Adm);
}

#[test]
fn psnr_gradient() {
    gradient_suite(Objective::Psnr);
}

#[test]
fn fused_gradient_is_weighted_sum_of_feature_gradients() {
    let (r, d) = natural_crop_pair(11, 48);
    let model = FusionModel::default();
    let (_, fused) = score_gradient(&r, &d, &model).unwrap();
    let parts = [
        Objective::Vif0,
        Objective::Vif1,
        Objective::Vif2,
        Objective::Vif3,
        Objective::Adm,
    ];
    let mut expect = vec![0.0; r.len()];
    for (obj, w) in parts.iter().zip(model.weights) {
        let (_, g) = obj.value_and_gradient(&r, &d, &model).unwrap();
        expect.iter_mut().zip(g.data()).for_each(|(e, v)| *e += w * v);
    }
    for (a, b) in fused.data().iter().zip(&expect) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-6));
    }
}

#[test]
fn doubling_weights_doubles_gradient() {
    let (r, d) = natural_crop_pair(12, 48);
    let model = FusionModel::default();
    let doubled = FusionModel {
        weights: model.weights.map(|w| 2.0 * w),
        ..model.clone()
    };
    let (_, g1) = score_gradient(&r, &d, &model).unwrap();
    let (_, g2) = score_gradient(&r, &d, &doubled).unwrap();
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn identity_gradient_has_no_motion_term() {
    let r = crop(1, 48);
    let mut model = FusionModel::default();
    let (_, base) = score_gradient(&r, &r, &model).unwrap();
    model.weights[5] = 1e6;
    let (_, heavy) = score_gradient(&r, &r, &model).unwrap();
    assert_eq!(base, heavy);
}

#[test]
fn vif0_gradient_at_identity() {
    let r = crop(2, 32);
    let report = objective_gradcheck(Objective::Vif0, &r, &r, &FusionModel::default(), 1e-3).unwrap();
    assert!(report.max_rel_error < 1e-4, "{:e}", report.max_rel_error);
}

// ---------------------------------------------------------------- PSNR

#[test]
fn mse_matches_hand_sum() {
    let a = uniform_noise(4, 4, 1);
    let b = uniform_noise(4, 4, 2);
    let mut total = 0.0;
    for y in 0..4 {
        for x in 0..4 {
            total += (a.get(x, y) - b.get(x, y)).powi(2);
        }
    }
    assert!((mse(&a, &b).unwrap() - total / 16.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_depends_only_on_the_perturbation(
        seed_a in 0u64..1000, seed_b in 0u64..1000, seed_d in 0u64..1000, amp in 0.1f64..20.0,
    ) {
        let ra = uniform_noise(12, 9, seed_a);
        let rb = uniform_noise(12, 9, seed_b);
        let delta = uniform_noise(12, 9, seed_d).map(|v| amp * (v / 127.5 - 1.0)).unwrap();
        let pa = psnr(&ra, &ra.zip_map(&delta, |r, d| r + d).unwrap()).unwrap();
        let pb = psnr(&rb, &rb.zip_map(&delta, |r, d| r + d).unwrap()).unwrap();
        prop_assert!((pa - pb).abs() < 1e-9);
    }

    #[test]
    fn fusion_is_monotone_in_each_positive_feature(
        f in proptest::array::uniform6(0.0f64..2.0), i in 0usize..6, bump in 1e-6f64..1.0,
    ) {
        let model = FusionModel::default();
        let base = FeatureVector::from_array(f);
        let mut g = f;
        g[i] += bump;
        let raised = FeatureVector::from_array(g);
        prop_assert!(fused_score(&raised, &model) > fused_score(&base, &model));
        let expect = model.weights[i] * bump;
        prop_assert!((fused_score(&raised, &model) - fused_score(&base, &model) - expect).abs() < 1e-9);
    }
}
