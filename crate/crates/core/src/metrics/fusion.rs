use std::fmt::Write as _;

use super::{adm_graph, vif_scale_graph, VifGuards, VIF_SCALES};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ImagePlane;

/// Elementary features feeding the fused score.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FeatureVector {
    pub vif: [f64; VIF_SCALES],
    pub adm: f64,
    pub motion: f64,
}

impl FeatureVector {
    /// `[vif0, vif1, vif2, vif3, adm, motion]`
    pub fn as_array(&self) -> [f64; 6] {
        let [v0, v1, v2, v3] = self.vif;
        [v0, v1, v2, v3, self.adm, self.motion]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            vif: [a[0], a[1], a[2], a[3]],
            adm: a[4],
            motion: a[5],
        }
    }
}

/// Linear map from features to a 0–100-style score.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FusionModel {
    /// Order: vif0..vif3, adm, motion.
    pub weights: [f64; 6],
    pub intercept: f64,
    pub clip_enabled: bool,
}

const KEYS: [&str; 6] = ["w_vif0", "w_vif1", "w_vif2", "w_vif3", "w_adm", "w_motion"];

impl Default for FusionModel {
    /// VIF scales equally weighted, ADM weighted as all four together, so that
    /// an identical pair with zero motion scores 97.4.
    fn default() -> Self {
        Self {
            weights: [12.175, 12.175, 12.175, 12.175, 48.7, 10.0],
            intercept: 0.0,
            clip_enabled: false,
        }
    }
}

impl FusionModel {
    pub fn with_clip(mut self, clip: bool) -> Self {
        self.clip_enabled = clip;
        self
    }

    /// Parses the `key = value` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut weights = [None; 6];
        let mut intercept = None;
        let mut clip = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ModelFormat(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let number = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("{key}: not a finite number: {value:?}")))
            };
            let slot_taken = || err(format!("duplicate key {key}"));
            if let Some(i) = KEYS.iter().position(|k| *k == key) {
                if weights[i].replace(number()?).is_some() {
                    return Err(slot_taken());
                }
            } else if key == "intercept" {
                if intercept.replace(number()?).is_some() {
                    return Err(slot_taken());
                }
            } else if key == "clip" {
                let v = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(err(format!("clip must be true or false, got {value:?}"))),
                };
                if clip.replace(v).is_some() {
                    return Err(slot_taken());
                }
            } else {
                return Err(err(format!("unknown key {key:?}")));
            }
        }
        let missing = |k: &str| Error::ModelFormat(format!("missing key {k}"));
        let mut w = [0.0; 6];
        for (i, slot) in weights.iter().enumerate() {
            w[i] = slot.ok_or_else(|| missing(KEYS[i]))?;
        }
        Ok(Self {
            weights: w,
            intercept: intercept.ok_or_else(|| missing("intercept"))?,
            clip_enabled: clip.ok_or_else(|| missing("clip"))?,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# linear fusion model\n");
        for (k, w) in KEYS.iter().zip(self.weights) {
            let _ = writeln!(out, "{k} = {w:?}");
        }
        let _ = writeln!(out, "intercept = {:?}", self.intercept);
        let _ = writeln!(out, "clip = {}", self.clip_enabled);
        out
    }
}

/// `w . f + intercept`, clamped to `[0, 100]` when clipping is enabled.
pub fn fused_score(features: &FeatureVector, model: &FusionModel) -> f64 {
    let raw = model
        .weights
        .iter()
        .zip(features.as_array())
        .map(|(w, f)| w * f)
        .sum::<f64>()
        + model.intercept;
    if model.clip_enabled {
        raw.clamp(0.0, 100.0)
    } else {
        raw
    }
}

/// Graph nodes for `[vif0, vif1, vif2, vif3, adm]`.
pub fn features_graph(g: &mut Graph, r: Var, d: Var) -> Result<[Var; 5]> {
    let guards = VifGuards::default();
    Ok([
        vif_scale_graph(g, r, d, 0, &guards)?,
        vif_scale_graph(g, r, d, 1, &guards)?,
        vif_scale_graph(g, r, d, 2, &guards)?,
        vif_scale_graph(g, r, d, 3, &guards)?,
        adm_graph(g, r, d)?,
    ])
}

/// Unclipped fused score of a still image (motion term contributes `w * 0`).
pub fn fused_score_graph(g: &mut Graph, r: Var, d: Var, model: &FusionModel) -> Result<Var> {
    let features = features_graph(g, r, d)?;
    let mut acc = g.scale(features[0], model.weights[0]);
    for (i, &f) in features.iter().enumerate().skip(1) {
        let term = g.scale(f, model.weights[i]);
        acc = g.add(acc, term)?;
    }
    Ok(g.offset(acc, model.intercept))
}

pub fn extract_features(reference: &ImagePlane, distorted: &ImagePlane) -> Result<FeatureVector> {
    reference.check_same_dims(distorted)?;
    let mut g = Graph::new();
    let r = g.constant(reference.into());
    let d = g.constant(distorted.into());
    let f = features_graph(&mut g, r, d)?;
    Ok(FeatureVector {
        vif: [g.item(f[0]), g.item(f[1]), g.item(f[2]), g.item(f[3])],
        adm: g.item(f[4]),
        motion: 0.0,
    })
}

/// Unclipped fused score and its gradient with respect to `distorted`.
///
/// With clipping enabled the score must lie strictly inside `(0, 100)`, where
/// the clamp is the identity.
pub fn score_gradient(
    reference: &ImagePlane,
    distorted: &ImagePlane,
    model: &FusionModel,
) -> Result<(f64, ImagePlane)> {
    let (score, grad) = super::forward_backward(reference, distorted, |g, r, d| fused_score_graph(g, r, d, model))?;
    if model.clip_enabled && !(score > 0.0 && score < 100.0) {
        return Err(Error::Numeric(format!(
            "score {score} sits on the clipping boundary; disable clipping to differentiate"
        )));
    }
    Ok((score, grad))
}
