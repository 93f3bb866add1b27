//! Central finite-difference oracle for autodiff gradients.

use std::fmt;

use super::{no_grad, Tensor};
use crate::error::{Error, Result};

/// Coordinates whose analytic and numeric gradients are both below this are
/// not scored (relative error is meaningless there).
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub checked: usize,
    pub skipped: usize,
    /// Coordinates whose stencil straddles a kink: the central difference
    /// fails at `h` but passes at a shorter step (`h/4`, `h/16` or `h/64`).
    pub kinks: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol && self.max_rel_err.is_finite()
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked {} coords (skipped {}, kinks {}), max rel err {:.3e} (tol {:.0e}), max abs err {:.3e}, worst {:?}",
            self.checked, self.skipped, self.kinks, self.max_rel_err, self.tol, self.max_abs_err, self.worst
        )
    }
}

fn rel_err(a: f64, n: f64) -> Option<f64> {
    let scale = a.abs().max(n.abs());
    (scale > GRAD_FLOOR).then(|| (a - n).abs() / scale)
}

/// Checks every coordinate of every input. `f` must be deterministic.
pub fn finite_diff_check<F>(inputs: &[Tensor<f64>], f: F, h: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    finite_diff_check_coords(inputs, &coords, f, h, tol)
}

/// Checks only the listed `(input, element)` coordinates.
pub fn finite_diff_check_coords<F>(
    inputs: &[Tensor<f64>],
    coords: &[(usize, usize)],
    f: F,
    h: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| t.detach().requires_grad(true))
        .collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(Error::Contract(
            "gradient check needs a scalar function".into(),
        ));
    }
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let mut perturbed: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
        let mut data = perturbed[which].to_vec();
        data[at] += delta;
        perturbed[which] = Tensor::from_vec(data, inputs[which].shape())?;
        Ok(no_grad(|| f(&perturbed))?.item())
    };

    let mut report = GradReport {
        checked: 0,
        skipped: 0,
        kinks: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
        tol,
    };
    for &(i, j) in coords {
        let numeric = (eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h);
        let a = analytic[i][j];
        let r = rel_err(a, numeric);
        if r.is_some_and(|r| !(r < tol)) {
            let mut converged = false;
            for k in [4.0, 16.0, 64.0] {
                let hk = h / k;
                let nk = (eval(i, j, hk)? - eval(i, j, -hk)?) / (2.0 * hk);
                if rel_err(a, nk).is_some_and(|r| r < tol) {
                    converged = true;
                    break;
                }
            }
            if converged {
                report.kinks += 1;
                continue;
            }
        }
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        match r {
            Some(r) => {
                report.checked += 1;
                if !(r <= report.max_rel_err) {
                    report.max_rel_err = r;
                    report.worst = Some((i, j));
                }
            }
            None => report.skipped += 1,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(&[20], 1.0, &mut rng);
        let r = finite_diff_check(&[x], |v| Ok(v[0].square().sum_all()), 1e-5, 1e-8).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn sigmoid_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[6, 3], 1.0, &mut rng);
        let r = finite_diff_check(
            &[a, b],
            |v| Ok(v[0].matmul(&v[1])?.sigmoid().sum_all()),
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn kinks_inside_the_stencil_are_set_aside() {
        let x = Tensor::<f64>::from_vec(vec![2e-6, -0.5, 2.0], &[3]).unwrap();
        let r = finite_diff_check(&[x], |v| Ok(v[0].abs().sum_all()), 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!((r.checked, r.kinks), (2, 1));
    }

    #[test]
    fn a_wrong_slope_at_a_kink_still_fails() {
        // |x| near 0 with a backward that claims 0.5 sign(x)
        let x = Tensor::<f64>::from_vec(vec![2e-6], &[1]).unwrap();
        let r = finite_diff_check(
            &[x],
            |v| {
                let t = &v[0];
                let src = t.clone();
                let y = Tensor::from_op(
                    "half_abs",
                    t.data().iter().map(|a| a.abs()).collect(),
                    vec![1],
                    vec![t.clone()],
                    move |g| {
                        vec![Some(
                            g.iter()
                                .zip(src.data())
                                .map(|(g, x)| g * 0.5 * x.signum())
                                .collect(),
                        )]
                    },
                );
                Ok(y.sum_all())
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!r.passed(), "{r}");
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // forward is x^2 but the registered backward claims 3x
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let r = finite_diff_check(
            &[x],
            |v| {
                let t = &v[0];
                let src = t.clone();
                let y = Tensor::from_op(
                    "bogus",
                    t.data().iter().map(|a| a * a).collect(),
                    vec![2],
                    vec![t.clone()],
                    move |g| {
                        vec![Some(
                            g.iter().zip(src.data()).map(|(g, x)| g * 3.0 * x).collect(),
                        )]
                    },
                );
                Ok(y.sum_all())
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(!r.passed());
    }
}
