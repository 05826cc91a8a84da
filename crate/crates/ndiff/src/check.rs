use crate::error::{GradError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of `f` at `point` against central
/// differences and returns the worst per-component relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` receives a fresh graph and the differentiated leaf, and must return a
/// one-element node.
pub fn grad_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(GradError::Invalid {
            op: "grad-check",
            msg: format!("epsilon {epsilon} outside (0, 1e-2]"),
        });
    }
    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        let v = g.value(y).item();
        if !v.is_finite() {
            return Err(GradError::NonFinite { op: "grad-check" });
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    let analytic = g.backward(y)?.wrt(&g, x);

    let mut worst = 0.0f64;
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = eval(probe.clone())?;
        probe.data_mut()[i] = orig - epsilon;
        let down = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
