use super::{adm_graph, fused_score_graph, psnr_graph, vif_scale_graph, FusionModel, VifGuards};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ImagePlane;

/// A scalar full-reference metric that can be maximized over the distorted image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Psnr,
    Vif0,
    Vif1,
    Vif2,
    Vif3,
    Adm,
    Fused,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::Psnr,
        Objective::Vif0,
        Objective::Vif1,
        Objective::Vif2,
        Objective::Vif3,
        Objective::Adm,
        Objective::Fused,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Psnr => "psnr",
            Objective::Vif0 => "vif0",
            Objective::Vif1 => "vif1",
            Objective::Vif2 => "vif2",
            Objective::Vif3 => "vif3",
            Objective::Adm => "adm",
            Objective::Fused => "fused",
        }
    }

    /// Score that counts as "perfect reconstruction" for threshold stopping.
    pub fn default_threshold(self) -> f64 {
        match self {
            Objective::Fused => 100.0,
            Objective::Psnr => 60.0,
            _ => 1.0,
        }
    }

    pub fn build(self, g: &mut Graph, r: Var, d: Var, model: &FusionModel) -> Result<Var> {
        let guards = VifGuards::default();
        match self {
            Objective::Psnr => psnr_graph(g, r, d),
            Objective::Vif0 => vif_scale_graph(g, r, d, 0, &guards),
            Objective::Vif1 => vif_scale_graph(g, r, d, 1, &guards),
            Objective::Vif2 => vif_scale_graph(g, r, d, 2, &guards),
            Objective::Vif3 => vif_scale_graph(g, r, d, 3, &guards),
            Objective::Adm => adm_graph(g, r, d),
            Objective::Fused => fused_score_graph(g, r, d, model),
        }
    }

    pub fn evaluate(self, reference: &ImagePlane, distorted: &ImagePlane, model: &FusionModel) -> Result<f64> {
        super::forward(reference, distorted, |g, r, d| self.build(g, r, d, model))
    }

    pub fn value_and_gradient(
        self,
        reference: &ImagePlane,
        distorted: &ImagePlane,
        model: &FusionModel,
    ) -> Result<(f64, ImagePlane)> {
        super::forward_backward(reference, distorted, |g, r, d| self.build(g, r, d, model))
    }
}

impl std::fmt::Display for Objective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}
