//! Conjugate gradients on a matrix-free symmetric positive-definite operator.

use ndarray::Array1;

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Array1<f64>,
    pub iterations: usize,
    /// `‖A x − b‖ / ‖b‖` from the recurrence.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solves `A x = b` starting from `x = 0`.
pub fn conjugate_gradient<F>(apply: F, b: &Array1<f64>, rel_tol: f64, max_iters: usize) -> CgOutcome
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    let b_norm = b.dot(b).sqrt();
    let mut x = Array1::zeros(b.len());
    if b_norm == 0.0 {
        return CgOutcome {
            x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    let mut iterations = 0;
    while iterations < max_iters && rr.sqrt() > rel_tol * b_norm {
        let ap = apply(&p);
        let curvature = p.dot(&ap);
        if curvature <= 0.0 {
            break;
        }
        let alpha = rr / curvature;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rr_next = r.dot(&r);
        p = &r + &(rr_next / rr * &p);
        rr = rr_next;
        iterations += 1;
    }
    let relative_residual = rr.sqrt() / b_norm;
    CgOutcome {
        x,
        iterations,
        relative_residual,
        converged: relative_residual <= rel_tol,
    }
}

pub(crate) fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}
