//! Finite-difference verification of metric gradients on synthetic natural
//! crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{vif_min_size, FusionModel, Objective, ADM_LEVELS};
use crate::autodiff::{replay_diff_check, GradientReport, Tensor};
use crate::error::Result;
use crate::synth::{natural_scene, SceneParams};
use crate::ImagePlane;

/// Central-difference step used by the gradient suite. With the replayed
/// differences the error is pure truncation, so a small step costs nothing;
/// at 1e-3 a detail-loss clamp occasionally switches branch inside the
/// stencil and the quotient straddles a kink.
pub const GRADCHECK_STEP: f64 = 1e-4;

/// Smallest square side, at least `nominal`, on which `objective` is defined.
/// Sides are kept multiples of 16 so the detail-loss term sees whole blocks.
pub fn gradcheck_size(objective: Objective, nominal: usize) -> usize {
    let need = match objective {
        Objective::Psnr => 1,
        Objective::Vif0 => vif_min_size(0),
        Objective::Vif1 => vif_min_size(1),
        Objective::Vif2 => vif_min_size(2),
        Objective::Vif3 | Objective::Fused => vif_min_size(3),
        Objective::Adm => 1 << ADM_LEVELS,
    };
    nominal.max(need).next_multiple_of(1 << ADM_LEVELS)
}

/// A reference crop and an even blend of it with a crop from a second scene.
/// A purely unrelated crop drives the coarse VIF scales to their zero-gain
/// guard, where the check passes vacuously; the blend keeps every scale
/// informative. The distorted crop also carries a sub-quantum dither so that
/// no detail coefficient sits exactly on a clamp boundary, where the gradient
/// is only a subgradient.
pub fn natural_crop_pair(seed: u64, size: usize) -> (ImagePlane, ImagePlane) {
    let (w, h) = (352, 288);
    let params = SceneParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = natural_scene(w, h, rng.gen(), &params);
    let b = natural_scene(w, h, rng.gen(), &params);
    let mut origin = || (rng.gen_range(0..=w - size), rng.gen_range(0..=h - size));
    let (rx, ry) = origin();
    let (dx, dy) = origin();
    let r = a.crop(rx, ry, size, size).expect("crop inside the scene");
    let d = b.crop(dx, dy, size, size).expect("crop inside the scene");
    let d = ImagePlane::from_fn(size, size, |x, y| {
        0.5 * (r.get(x, y) + d.get(x, y)) + rng.gen_range(-0.5..0.5)
    });
    (r, d)
}

/// Analytic vs central-difference gradient of `objective` with respect to `distorted`.
pub fn objective_gradcheck(
    objective: Objective,
    reference: &ImagePlane,
    distorted: &ImagePlane,
    model: &FusionModel,
    h: f64,
) -> Result<GradientReport> {
    let r = Tensor::from(reference);
    replay_diff_check(
        |g, d| {
            let rv = g.constant(r.clone());
            objective.build(g, rv, d, model)
        },
        distorted,
        h,
    )
}
