use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Outcome of comparing reverse-mode gradients with finite differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Leaf and flat element index where the worst error occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Step of the five-point stencil used for deep compositions.
pub const FIVE_POINT_STEP: f64 = 4e-3;

/// Finite-difference formula used as the numeric reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`, truncation error `O(h²)`.
    Central(f64),
    /// `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`, truncation error `O(h⁴)`.
    /// Allows a far larger step, which keeps rounding noise below the size of
    /// small gradient entries in deep networks.
    FivePoint(f64),
}

/// Checks the gradient of a scalar function of `leaves` with central differences and step [`FD_STEP`].
pub fn grad_check<F>(f: F, leaves: &[Tensor]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(f, leaves, Stencil::Central(FD_STEP))
}

/// Compares reverse-mode gradients with a finite-difference stencil elementwise.
///
/// The relative error of each element is `|g - fd| / max(|g|, |fd|, 1e-8)`
/// and the maximum over all elements of all leaves is reported.
pub fn grad_check_with<F>(f: F, leaves: &[Tensor], stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, leaves, None, stencil)
}

/// Gradient check of `Σ w ⊙ f(leaves)` for a tensor-valued `f` and fixed cotangent `w`.
///
/// The stencil differences are taken per output element before contracting
/// with `w`, so outputs a perturbation does not reach contribute exactly zero
/// instead of the rounding noise of a large sum.
pub fn grad_check_contracted<F>(
    f: F,
    leaves: &[Tensor],
    cotangent: &Tensor,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check(f, leaves, Some(cotangent), stencil)
}

fn check<F>(f: F, leaves: &[Tensor], cotangent: Option<&Tensor>, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|l| tape.leaf(l.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let out = match cotangent {
        Some(w) => {
            if tape.value(y).shape() != w.shape() {
                return Err(Error::shape(
                    "grad_check",
                    format!("output {:?} vs cotangent {:?}", tape.value(y).shape(), w.shape()),
                ));
            }
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv)?;
            tape.sum(p)?
        }
        None => y,
    };
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).cloned().expect("leaf gradient"))
        .collect();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("grad_check"));
    }

    let eval = |perturbed: &[Tensor]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|l| tape.constant(l.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data().to_vec())
    };
    let contract = |d: Vec<f64>| -> f64 {
        match cotangent {
            Some(w) => d.iter().zip(w.data()).map(|(a, b)| a * b).sum(),
            None => d[0],
        }
    };
    let diff = |p: Vec<f64>, m: Vec<f64>| -> Vec<f64> { p.iter().zip(&m).map(|(a, b)| a - b).collect() };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = work[li].data()[ei];
            let mut at = |offset: f64| -> Result<Vec<f64>> {
                work[li].data_mut()[ei] = orig + offset;
                eval(&work)
            };
            // Differences first, so an unused input gives exactly zero.
            let mut five_point = |h: f64| -> Result<Vec<f64>> {
                let near = diff(at(h)?, at(-h)?);
                let far = diff(at(2.0 * h)?, at(-2.0 * h)?);
                Ok(near.iter().zip(&far).map(|(n, f)| (8.0 * n - f) / (12.0 * h)).collect())
            };
            let numeric = contract(match stencil {
                Stencil::Central(h) => diff(at(h)?, at(-h)?).into_iter().map(|d| d / (2.0 * h)).collect(),
                Stencil::FivePoint(h) => five_point(h)?,
            });
            work[li].data_mut()[ei] = orig;
            let a = grad.data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (li, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
