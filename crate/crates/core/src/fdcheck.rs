//! Central finite-difference gradient checking for scalar losses over a
//! [`ParamSet`]. Meant for 64-bit mode; 32-bit roundoff swamps the estimate.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamSet;
use crate::tensor::{Mat, Scalar};

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare analytic gradients against central finite differences on up to
/// `per_tensor` randomly sampled coordinates of each named tensor.
///
/// `loss_fn` must be a pure function of the parameter set. Returns an error
/// string describing the first mismatch.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients<T: Scalar>(
    loss_fn: &mut dyn FnMut(&ParamSet<T>) -> T,
    params: &ParamSet<T>,
    analytic: &BTreeMap<String, Mat<T>>,
    names: &[&str],
    per_tensor: usize,
    seed: u64,
    rtol: f64,
    atol: f64,
) -> Result<FdReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    for &name in names {
        let base = params
            .get(name)
            .map_err(|_| format!("no tensor named {name}"))?;
        let grad = analytic
            .get(name)
            .ok_or_else(|| format!("no analytic gradient for {name}"))?;
        let total = base.len();
        let count = per_tensor.min(total);
        for _ in 0..count {
            let i = rng.random_range(0..base.rows());
            let j = rng.random_range(0..base.cols());
            let theta = base.get(i, j).as_f64();
            let h = 1e-5 * theta.abs().max(1.0);

            let mut eval = |v: f64| {
                let mut probe = params.clone();
                probe
                    .get_mut(name)
                    .expect("tensor exists")
                    .set(i, j, T::from_f64(v));
                loss_fn(&probe).as_f64()
            };
            let fd = (eval(theta + h) - eval(theta - h)) / (2.0 * h);
            let an = grad.get(i, j).as_f64();

            let err = (an - fd).abs();
            let tol = rtol * an.abs().max(fd.abs()) + atol;
            if err > tol {
                return Err(format!(
                    "{name}[{i},{j}]: analytic {an:.8e} vs finite-difference {fd:.8e} (err {err:.2e} > tol {tol:.2e})"
                ));
            }
            report.checked += 1;
            let denom = an.abs().max(fd.abs()).max(1e-12);
            report.max_rel_err = report.max_rel_err.max(err / denom);
        }
    }
    Ok(report)
}
