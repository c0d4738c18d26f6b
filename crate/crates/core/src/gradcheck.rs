//! Central finite-difference gradient checking.

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Outcome of comparing an analytic gradient against finite differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8)`.
    pub rel_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err < tol
    }
}

/// Norm-wise relative error between two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Checks `d f(x) / dx` where `f` builds a scalar loss from a leaf holding `x`.
pub fn check<F>(x: &Tensor, h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, TensorError>,
{
    let tape = Tape::new();
    let xv = tape.param(x);
    let loss = f(&tape, xv)?;
    tape.backward(loss)?;
    let analytic = xv.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &Tensor| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let v = tape.constant(probe.clone());
        Ok(f(&tape, v)?.item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let rel_err = relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        rel_err,
    })
}
