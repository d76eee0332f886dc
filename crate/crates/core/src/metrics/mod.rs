//! Full-reference quality metrics, all built on the autodiff tape so that the
//! same code path yields values and gradients with respect to the distorted
//! image.
//!
//! Every `*_graph` builder takes the reference and distorted images as graph
//! nodes. The plain functions wrap them for forward-only use.

mod adm;
mod fusion;
pub mod gradcheck;
mod motion;
mod objective;
mod psnr;
mod vif;

pub use adm::{adm, adm_graph, ADM_LEVELS};
pub use fusion::{
    extract_features, features_graph, fused_score, fused_score_graph, score_gradient, FeatureVector, FusionModel,
};
pub use motion::motion;
pub use objective::Objective;
pub use psnr::{mse, mse_graph, psnr, psnr_graph, PSNR_MSE_FLOOR};
pub use vif::{vif_min_size, vif_scale, vif_scale_graph, vif_window, VifGuards, VIF_SCALES};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::ImagePlane;

/// Evaluates a graph builder on `(reference, distorted)` without tracking
/// gradients.
pub(crate) fn forward<F>(reference: &ImagePlane, distorted: &ImagePlane, build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, Var, Var) -> Result<Var>,
{
    reference.check_same_dims(distorted)?;
    let mut g = Graph::new();
    let r = g.constant(reference.into());
    let d = g.constant(distorted.into());
    let out = build(&mut g, r, d)?;
    Ok(g.item(out))
}

/// Value and gradient with respect to the distorted image.
pub(crate) fn forward_backward<F>(reference: &ImagePlane, distorted: &ImagePlane, build: F) -> Result<(f64, ImagePlane)>
where
    F: FnOnce(&mut Graph, Var, Var) -> Result<Var>,
{
    reference.check_same_dims(distorted)?;
    let mut g = Graph::new();
    let r = g.constant(reference.into());
    let d = g.input(distorted.into());
    let out = build(&mut g, r, d)?;
    let grad = g.backward(out, d)?;
    Ok((g.item(out), grad.into_plane()?))
}
