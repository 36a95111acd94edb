use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

use super::tape::{Tape, Var};

/// Floor added to the denominator of relative errors.
pub const ABS_FLOOR: f64 = 1e-8;
/// Base step for gradient checks.
pub const EPS0_GRADIENT: f64 = 1e-5;
/// Base step for Jacobian columns.
pub const EPS0_JACOBIAN: f64 = 1e-4;

/// `eps0 · (1 + ‖x‖∞)`.
pub fn fd_step(eps0: f64, x: &Tensor) -> f64 {
    eps0 * (1.0 + x.max_abs())
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_rel_error: f64,
    pub step_size: f64,
}

/// Central-difference directional derivative along `v`, rescaled by `‖v‖`.
/// `eps` is used as given.
pub fn jvp_fd<F>(mut f: F, x: &Tensor, v: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        bail!(Domain, "finite-difference step must be positive, got {}", eps);
    }
    if x.shape() != v.shape() {
        bail!(Structural, "direction {:?} does not match point {:?}", v.shape(), x.shape());
    }
    let vn = v.norm();
    if vn == 0.0 {
        bail!(Domain, "direction vector is zero");
    }
    let step = v.scale(eps / vn);
    let plus = f(&x.add(&step)?)?;
    let minus = f(&x.sub(&step)?)?;
    Ok(plus.sub(&minus)?.scale(vn / (2.0 * eps)))
}

/// Compares the tape gradient of the scalar program `f` at `x` against
/// coordinate-wise central differences with step `fd_step(EPS0_GRADIENT, x)`.
pub fn check_gradient<F>(f: F, x: &Tensor) -> Result<GradientReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.input(t.clone());
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.len() != 1 {
            bail!(Structural, "check_gradient needs a scalar program, got {:?}", val.shape());
        }
        Ok(val.data()[0])
    };

    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        bail!(Structural, "check_gradient needs a scalar program");
    }
    let analytic = tape.backward(out, None)?.get_or_zeros(xv, x);

    let h = fd_step(EPS0_GRADIENT, x);
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let numeric = Tensor::new(x.shape().to_vec(), numeric)?;
    let max_rel_error = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + ABS_FLOOR))
        .fold(0.0, f64::max);
    Ok(GradientReport {
        analytic,
        numeric,
        max_rel_error,
        step_size: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn jvp_of_linear_map_is_matrix_vector_product() {
        let a = Tensor::from_fn(3, 4, |i, j| (i as f64 - j as f64) * 0.7 + 0.1);
        let x = Tensor::vector(vec![0.5, -1.0, 2.0, 0.25]);
        let v = Tensor::vector(vec![1.0, 2.0, -3.0, 0.5]);
        let f = |t: &Tensor| Ok(Tensor::vector(a.matvec(t.data())?));
        let got = jvp_fd(f, &x, &v, 1e-3).unwrap();
        let want = a.matvec(v.data()).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0));
        }
    }

    #[test]
    fn jvp_of_square_at_ones() {
        let f = |t: &Tensor| Ok(t.map(|v| v * v));
        let x = Tensor::vector(vec![1.0, 1.0]);
        let v = Tensor::vector(vec![1.0, 0.0]);
        let got = jvp_fd(f, &x, &v, 1e-4).unwrap();
        assert!((got.data()[0] - 2.0).abs() < 1e-9);
        assert_eq!(got.data()[1], 0.0);
    }

    #[test]
    fn jvp_rejects_zero_direction() {
        let f = |t: &Tensor| Ok(t.clone());
        let x = Tensor::vector(vec![1.0]);
        assert!(jvp_fd(f, &x, &Tensor::vector(vec![0.0]), 1e-4).is_err());
        assert!(jvp_fd(f, &x, &Tensor::vector(vec![1.0]), 0.0).is_err());
    }

    #[test]
    fn constant_program_reports_zero_error() {
        let x = Tensor::vector(vec![1.0, -2.0]);
        let r = check_gradient(|t, _| Ok(t.constant(Tensor::scalar(3.0))), &x).unwrap();
        assert!(r.analytic.data().iter().all(|v| *v == 0.0));
        assert!(r.numeric.data().iter().all(|v| *v == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn quadratic_form_is_checked_tightly() {
        let q = Tensor::from_fn(3, 3, |i, j| 1.0 + (i * 3 + j) as f64 * 0.3);
        let x = Tensor::row_vector(vec![0.4, -1.3, 0.9]);
        let r = check_gradient(
            |t, x| {
                let qc = t.constant(q.clone());
                let qx = t.matmul_t(x, qc)?;
                t.matmul_t(qx, x)
            },
            &x,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }
}
