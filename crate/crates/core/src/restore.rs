//! Recovering a reference by maximizing a full-reference metric with Adam,
//! starting from noise or from a degraded copy.

use crate::error::{Error, Result};
use crate::image::blur_replicate;
use crate::metrics::{FusionModel, Objective};
use crate::ImagePlane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMode {
    /// Stop at the first iterate whose score reaches `threshold`.
    Threshold,
    /// Stop once the relative score change over `conv_window` steps drops below `conv_tol`.
    Convergence,
}

impl std::str::FromStr for StopMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "threshold" => Ok(StopMode::Threshold),
            "convergence" => Ok(StopMode::Convergence),
            _ => Err(Error::Config(format!("unknown stop mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RestoreConfig {
    pub target: Objective,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub stop_mode: StopMode,
    pub threshold: f64,
    pub conv_tol: f64,
    pub conv_window: usize,
    pub max_steps: usize,
    /// Seed for [`init_noise`] when the caller starts from noise.
    pub seed: u64,
}

impl RestoreConfig {
    /// Defaults for `target`, with its conventional threshold.
    pub fn new(target: Objective) -> Self {
        Self {
            target,
            lr: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            stop_mode: StopMode::Threshold,
            threshold: target.default_threshold(),
            conv_tol: 1e-4,
            conv_window: 50,
            max_steps: 5000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta1 < beta2 < 1, got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.eps_adam.is_nan() || self.eps_adam <= 0.0 {
            return Err(Error::Config("eps_adam must be positive".into()));
        }
        if self.max_steps == 0 || self.conv_window == 0 {
            return Err(Error::Config("max_steps and conv_window must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self::new(Objective::Fused)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RestoreTrace {
    /// Score of the iterate at each step; the last entry belongs to the returned image.
    pub points: Vec<TracePoint>,
    pub reached_threshold: bool,
    pub hit_max_steps: bool,
}

impl RestoreTrace {
    pub fn final_score(&self) -> Option<f64> {
        self.points.last().map(|p| p.score)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,score\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.step, p.score));
        }
        out
    }
}

/// I.i.d. uniform samples on `[0, 255]`.
pub fn init_noise(m: usize, n: usize, seed: u64) -> ImagePlane {
    crate::synth::uniform_noise(m, n, seed)
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update that *ascends* along `grad`.
pub fn adam_step(
    state: &mut AdamState,
    x: &mut [f64],
    grad: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if x.len() != grad.len() || state.m.len() != x.len() {
        return Err(Error::Config(format!(
            "Adam state of {} entries, iterate {}, gradient {}",
            state.m.len(),
            x.len(),
            grad.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..x.len() {
        let g = grad[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        x[i] += lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Runs Adam ascent on `cfg.target` starting from `init`.
///
/// The iterate is unconstrained; quantization happens only when it is saved.
pub fn restore(
    reference: &ImagePlane,
    init: &ImagePlane,
    cfg: &RestoreConfig,
    model: &FusionModel,
) -> Result<(ImagePlane, RestoreTrace)> {
    cfg.validate()?;
    reference.check_same_dims(init)?;
    let (w, h) = reference.dims();
    let mut x = init.data().to_vec();
    let mut state = AdamState::new(x.len());
    let mut trace = RestoreTrace::default();

    for step in 0..cfg.max_steps {
        let iterate = ImagePlane::new(w, h, x.clone())
            .map_err(|e| Error::Numeric(format!("iterate diverged at step {step}: {e}")))?;
        let (score, grad) = cfg.target.value_and_gradient(reference, &iterate, model)?;
        if !score.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite {} score at step {step}",
                cfg.target
            )));
        }
        trace.points.push(TracePoint { step, score });

        let stop = match cfg.stop_mode {
            StopMode::Threshold => score >= cfg.threshold,
            StopMode::Convergence => {
                step >= cfg.conv_window && {
                    let old = trace.points[step - cfg.conv_window].score;
                    (score - old).abs() / old.abs().max(1e-12) < cfg.conv_tol
                }
            }
        };
        trace.reached_threshold = score >= cfg.threshold;
        if stop || step + 1 == cfg.max_steps {
            trace.hit_max_steps = !stop;
            break;
        }
        adam_step(
            &mut state,
            &mut x,
            grad.data(),
            cfg.lr,
            cfg.beta1,
            cfg.beta2,
            cfg.eps_adam,
        )?;
    }
    Ok((ImagePlane::new(w, h, x)?, trace))
}

/// Deterministic stand-in for lossy compression: Gaussian blur followed by
/// uniform quantization.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompressionProxy {
    pub blur_sigma: f64,
    pub levels: u32,
}

impl Default for CompressionProxy {
    fn default() -> Self {
        Self {
            blur_sigma: 1.5,
            levels: 16,
        }
    }
}

impl CompressionProxy {
    pub fn apply(&self, img: &ImagePlane) -> Result<ImagePlane> {
        if self.blur_sigma.is_nan() || self.blur_sigma <= 0.0 || self.levels < 2 {
            return Err(Error::Config("proxy needs blur_sigma > 0 and at least 2 levels".into()));
        }
        let radius = (3.0 * self.blur_sigma).ceil() as usize;
        let step = 255.0 / (self.levels - 1) as f64;
        blur_replicate(img, 2 * radius + 1, self.blur_sigma).map(|v| ((v / step).round() * step).clamp(0.0, 255.0))
    }
}

/// [`restore`] initialized with `proxy.apply(reference)`.
pub fn restore_from_compressed(
    reference: &ImagePlane,
    proxy: &CompressionProxy,
    cfg: &RestoreConfig,
    model: &FusionModel,
) -> Result<(ImagePlane, RestoreTrace)> {
    restore(reference, &proxy.apply(reference)?, cfg, model)
}

/// Pearson correlation of the samples; 0 if either plane is constant.
pub fn pearson(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    a.check_same_dims(b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}
