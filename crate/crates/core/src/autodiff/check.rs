use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::image::ImagePlane;

/// Analytic vs central-difference gradients of a scalar function.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    /// `max_i |analytic - numeric| / max(|numeric|, 1e-8)`
    pub max_rel_error: f64,
}

/// Compares the tape gradient of `f` at `x` with central differences of step `h`.
///
/// `f` builds its output on the supplied graph from the input node; it is
/// called once with a gradient-tracking input and `2 * len` more times for the
/// perturbed forward evaluations.
pub fn finite_diff_check<F>(f: F, x: &ImagePlane, h: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    check_with_steps(f, x, |_| h)
}

/// Like [`finite_diff_check`] with a per-coordinate step `rel * max(1, |x_i|)`.
pub fn finite_diff_check_relative<F>(f: F, x: &ImagePlane, rel: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(rel > 0.0, "finite difference step must be positive");
    check_with_steps(f, x, |v| rel * v.abs().max(1.0))
}

/// Like [`finite_diff_check`], but each central difference is obtained by
/// replaying the tape in difference form (see [`Graph::replay_difference`])
/// instead of subtracting two forward evaluations.
///
/// The naive quotient carries an absolute error of roughly `ulp(f) / h`, which
/// swamps coordinates whose true derivative is many orders below `f`. The
/// replay keeps that error relative to the difference itself, so only the
/// `O(h^2)` truncation term remains. The tape is built once at `x`; select
/// masks recorded there are held fixed for the perturbed points.
pub fn replay_diff_check<F>(f: F, x: &ImagePlane, h: f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let base = Tensor::from(x);
    let mut g = Graph::new();
    let input = g.input(base.clone());
    let out = f(&mut g, input)?;
    let analytic = g.backward(out, input)?;

    let mut numeric = vec![0.0; base.data().len()];
    let (mut lower, mut upper) = (base.clone(), base.clone());
    for (i, n) in numeric.iter_mut().enumerate() {
        let orig = base.data()[i];
        let (lo, hi) = (orig - h, orig + h);
        lower.data_mut()[i] = lo;
        upper.data_mut()[i] = hi;
        *n = g.replay_difference(out, input, &lower, &upper)? / (hi - lo);
        lower.data_mut()[i] = orig;
        upper.data_mut()[i] = orig;
    }
    let numeric = Tensor::new(base.shape(), numeric);
    let max_rel_error = relative_error(&analytic, &numeric);
    Ok(GradientReport {
        analytic,
        numeric,
        max_rel_error,
    })
}

fn check_with_steps<F>(f: F, x: &ImagePlane, step: impl Fn(f64) -> f64) -> Result<GradientReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let base = Tensor::from(x);

    let mut g = Graph::new();
    let input = g.input(base.clone());
    let out = f(&mut g, input)?;
    let analytic = g.backward(out, input)?;

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        Ok(g.item(out))
    };

    let mut numeric = vec![0.0; base.data().len()];
    let mut probe = base.clone();
    for (i, n) in numeric.iter_mut().enumerate() {
        let orig = base.data()[i];
        let h = step(orig);
        probe.data_mut()[i] = orig + h;
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        *n = (plus - minus) / (2.0 * h);
    }
    let numeric = Tensor::new(base.shape(), numeric);
    let max_rel_error = relative_error(&analytic, &numeric);
    Ok(GradientReport {
        analytic,
        numeric,
        max_rel_error,
    })
}

pub(crate) fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1e-8))
        .fold(0.0, f64::max)
}
