//! Norm-bounded adversarial perturbations by projected gradient ascent on the
//! fused score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{extract_features, fused_score, psnr, score_gradient, FusionModel};
use crate::{Dataset, ImagePlane};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Linf,
    L2,
}

impl NormKind {
    pub fn norm(self, v: &[f64]) -> f64 {
        match self {
            NormKind::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            NormKind::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
        })
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "inf" => Ok(NormKind::Linf),
            "l2" => Ok(NormKind::L2),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        }
    }
}

/// `{ delta : ||delta|| <= epsilon }`
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormBall {
    pub kind: NormKind,
    pub epsilon: f64,
}

impl NormBall {
    pub fn new(kind: NormKind, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be finite and positive, got {epsilon}"
            )));
        }
        Ok(Self { kind, epsilon })
    }
}

/// How a gradient becomes an update before projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `delta += alpha * grad`
    Gradient,
    /// Steepest ascent for the ball's norm with a per-pixel step of `alpha`:
    /// `alpha * sign(grad)` for l-inf, `alpha * sqrt(d) * grad / ||grad||_2` for l2.
    Normalized,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackConfig {
    pub alpha: f64,
    pub steps: usize,
    /// Keep `R + delta` inside `[0, 255]`.
    pub box_constrain: bool,
    pub step_rule: StepRule,
    /// Start from a uniform draw inside the ball instead of zero.
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            steps: 100,
            box_constrain: true,
            step_rule: StepRule::Normalized,
            random_start: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackReport {
    pub score_before: f64,
    pub score_after: f64,
    pub gain: f64,
    pub psnr_after: f64,
    pub final_norm: f64,
    /// Score after each update, `steps` entries.
    pub score_trace: Vec<f64>,
}

/// L2 radius whose boundary sits exactly at `target_psnr` for an `m x n` image.
pub fn epsilon_for_psnr(target_psnr: f64, m: usize, n: usize) -> f64 {
    255.0 * ((m * n) as f64).sqrt() * 10f64.powf(-target_psnr / 20.0)
}

/// Euclidean projection onto the ball.
pub fn project(delta: &ImagePlane, ball: &NormBall) -> ImagePlane {
    let mut data = delta.data().to_vec();
    project_in_place(&mut data, ball);
    ImagePlane::new(delta.width(), delta.height(), data).expect("projection keeps values finite")
}

fn project_in_place(delta: &mut [f64], ball: &NormBall) {
    let eps = ball.epsilon;
    match ball.kind {
        NormKind::Linf => delta.iter_mut().for_each(|v| *v = v.clamp(-eps, eps)),
        NormKind::L2 => {
            let norm = NormKind::L2.norm(delta);
            if norm > eps {
                // rounding can leave the rescaled norm an ulp above eps, which
                // would break idempotence; shrink until it is feasible
                let orig = delta.to_vec();
                let mut s = eps / norm;
                loop {
                    delta.iter_mut().zip(&orig).for_each(|(v, o)| *v = o * s);
                    if NormKind::L2.norm(delta) <= eps {
                        break;
                    }
                    s *= 1.0 - f64::EPSILON;
                }
            }
        }
    }
}

/// `clamp(R + delta, 0, 255) - R`.
pub fn box_project(reference: &ImagePlane, delta: &ImagePlane) -> Result<ImagePlane> {
    reference.zip_map(delta, box_pixel)
}

/// Leaves in-range pixels bit-identical instead of round-tripping `r + d - r`.
fn box_pixel(r: f64, d: f64) -> f64 {
    let v = r + d;
    if v > 255.0 {
        255.0 - r
    } else if v < 0.0 {
        -r
    } else {
        d
    }
}

fn box_project_in_place(reference: &[f64], delta: &mut [f64]) {
    for (d, r) in delta.iter_mut().zip(reference) {
        *d = box_pixel(*r, *d);
    }
}

fn add(reference: &ImagePlane, delta: &[f64]) -> ImagePlane {
    let data = reference.data().iter().zip(delta).map(|(r, d)| r + d).collect();
    ImagePlane::new(reference.width(), reference.height(), data).expect("finite")
}

/// Projected gradient ascent of an arbitrary differentiable score of the
/// distorted image `R + delta`.
///
/// `score_and_grad` returns the score and its gradient with respect to the
/// distorted image. Returns the best iterate seen after any update.
pub fn pgd_maximize<F>(
    reference: &ImagePlane,
    ball: &NormBall,
    cfg: &AttackConfig,
    mut score_and_grad: F,
) -> Result<(ImagePlane, AttackReport)>
where
    F: FnMut(&ImagePlane) -> Result<(f64, ImagePlane)>,
{
    cfg.validate()?;
    let d = reference.len();
    let mut delta = vec![0.0; d];
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        delta
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0) * ball.epsilon);
        project_in_place(&mut delta, ball);
        if cfg.box_constrain {
            box_project_in_place(reference.data(), &mut delta);
        }
    }

    let (start_score, mut grad) = score_and_grad(&add(reference, &delta))?;
    let score_before = if cfg.random_start {
        score_and_grad(reference)?.0
    } else {
        start_score
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let g = grad.data();
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient at pixel {i}")));
        }
        match (cfg.step_rule, ball.kind) {
            (StepRule::Gradient, _) => {
                for (x, gi) in delta.iter_mut().zip(g) {
                    *x += cfg.alpha * gi;
                }
            }
            (StepRule::Normalized, NormKind::Linf) => {
                for (x, gi) in delta.iter_mut().zip(g) {
                    if *gi != 0.0 {
                        *x += cfg.alpha * gi.signum();
                    }
                }
            }
            (StepRule::Normalized, NormKind::L2) => {
                let norm = NormKind::L2.norm(g);
                if norm > 0.0 {
                    let s = cfg.alpha * (d as f64).sqrt() / norm;
                    for (x, gi) in delta.iter_mut().zip(g) {
                        *x += s * gi;
                    }
                }
            }
        }
        project_in_place(&mut delta, ball);
        if cfg.box_constrain {
            box_project_in_place(reference.data(), &mut delta);
        }
        let score;
        (score, grad) = score_and_grad(&add(reference, &delta))?;
        if !score.is_finite() {
            return Err(Error::Numeric(format!("non-finite score {score}")));
        }
        trace.push(score);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, delta.clone()));
        }
    }

    let (score_after, best_delta) = best.expect("at least one step");
    let delta = ImagePlane::new(reference.width(), reference.height(), best_delta)?;
    let perturbed = add(reference, delta.data());
    let report = AttackReport {
        score_before,
        score_after,
        gain: score_after - score_before,
        psnr_after: psnr(reference, &perturbed)?,
        final_norm: ball.kind.norm(delta.data()),
        score_trace: trace,
    };
    Ok((delta, report))
}

fn require_unclipped(model: &FusionModel) -> Result<()> {
    if model.clip_enabled {
        return Err(Error::Config(
            "attacks optimize the unclipped score; disable clipping in the fusion model".into(),
        ));
    }
    Ok(())
}

/// Maximizes the fused score of `(R, R + delta)` over the ball.
pub fn pgd_attack(
    reference: &ImagePlane,
    model: &FusionModel,
    ball: &NormBall,
    cfg: &AttackConfig,
) -> Result<(ImagePlane, AttackReport)> {
    require_unclipped(model)?;
    pgd_maximize(reference, ball, cfg, |d| score_gradient(reference, d, model))
}

/// l2 attack whose radius is chosen so that `PSNR(R, R + delta) >= target_psnr`.
pub fn psnr_bounded_attack(
    reference: &ImagePlane,
    model: &FusionModel,
    target_psnr: f64,
    cfg: &AttackConfig,
) -> Result<(ImagePlane, AttackReport)> {
    if !(target_psnr.is_finite() && target_psnr > 0.0) {
        return Err(Error::Config(format!(
            "target PSNR must be positive, got {target_psnr}"
        )));
    }
    let eps = epsilon_for_psnr(target_psnr, reference.width(), reference.height());
    pgd_attack(reference, model, &NormBall::new(NormKind::L2, eps)?, cfg)
}

/// Fused score of the identity pair, i.e. the baseline that gains are measured from.
pub fn identity_score(reference: &ImagePlane, model: &FusionModel) -> Result<f64> {
    Ok(fused_score(&extract_features(reference, reference)?, model))
}

/// One image's outcome at one radius.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepRecord {
    pub id: String,
    pub epsilon: f64,
    pub score_before: f64,
    pub score_after: f64,
    pub gain: f64,
    pub psnr_after: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GainRow {
    pub epsilon: f64,
    pub mean_gain: f64,
    pub n_images: usize,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GainTable {
    pub rows: Vec<GainRow>,
    /// Long form, sorted by (epsilon, id).
    pub records: Vec<SweepRecord>,
}

impl GainTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epsilon,mean_gain,n_images\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.epsilon, r.mean_gain, r.n_images));
        }
        out
    }

    pub fn records_csv(&self) -> String {
        let mut out = String::from("id,epsilon,score_before,score_after,gain,psnr_after\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.id, r.epsilon, r.score_before, r.score_after, r.gain, r.psnr_after
            ));
        }
        out
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.epsilon, r.mean_gain)).collect()
    }
}

/// Mean gain per radius over the dataset.
pub fn sweep_epsilon(
    data: &Dataset,
    model: &FusionModel,
    kind: NormKind,
    eps_list: &[f64],
    cfg: &AttackConfig,
) -> Result<GainTable> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("sweep dataset".into()));
    }
    if eps_list.is_empty() || eps_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "epsilon list must be nonempty and strictly increasing".into(),
        ));
    }
    let balls = eps_list
        .iter()
        .map(|&e| NormBall::new(kind, e))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..balls.len())
        .flat_map(|b| (0..data.len()).map(move |i| (b, i)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(b, i)| {
            let (id, img) = &data.entries()[i];
            let (_, rep) = pgd_attack(img, model, &balls[b], cfg)?;
            Ok(SweepRecord {
                id: id.clone(),
                epsilon: balls[b].epsilon,
                score_before: rep.score_before,
                score_after: rep.score_after,
                gain: rep.gain,
                psnr_after: rep.psnr_after,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(table_from_records(records))
}

pub(crate) fn table_from_records(mut records: Vec<SweepRecord>) -> GainTable {
    records.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon).then_with(|| a.id.cmp(&b.id)));
    let mut rows: Vec<GainRow> = Vec::new();
    for chunk in records.chunk_by(|a, b| a.epsilon == b.epsilon) {
        rows.push(GainRow {
            epsilon: chunk[0].epsilon,
            mean_gain: chunk.iter().map(|r| r.gain).sum::<f64>() / chunk.len() as f64,
            n_images: chunk.len(),
        });
    }
    GainTable { rows, records }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PowerLawFit {
    pub exponent: f64,
    pub amplitude: f64,
    pub r_squared: f64,
    /// Rows dropped for non-positive gain.
    pub excluded: usize,
}

/// Least-squares line through `(ln eps, ln gain)`; `gain ~ amplitude * eps^exponent`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(e, g)| *e > 0.0 && *g > 0.0)
        .map(|(e, g)| (e.ln(), g.ln()))
        .collect();
    if usable.len() < 3 {
        return Err(Error::Numeric(format!(
            "power-law fit needs 3 positive rows, have {}",
            usable.len()
        )));
    }
    let (slope, intercept, r2) = crate::analysis::least_squares(&usable)?;
    Ok(PowerLawFit {
        exponent: slope,
        amplitude: intercept.exp(),
        r_squared: r2,
        excluded: points.len() - usable.len(),
    })
}
