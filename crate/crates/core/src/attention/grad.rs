//! Central finite-difference gradient checks.

use ndarray::Array3;
use rand::Rng;

use crate::rng;
use crate::scalar::Real;

/// A bundle of parameter tensors viewed as flat slices, in a fixed order.
pub trait ParamSet<T> {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

/// Queries, keys and values of an [`attend`](super::attend) call as a parameter set.
#[derive(Clone, Debug)]
pub struct AttendInputs<T> {
    pub q: Array3<T>,
    pub k: Array3<T>,
    pub v: Array3<T>,
}

impl<T: Real> ParamSet<T> for AttendInputs<T> {
    fn slices(&self) -> Vec<&[T]> {
        [&self.q, &self.k, &self.v]
            .into_iter()
            .map(|a| a.as_slice().expect("standard layout"))
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        [&mut self.q, &mut self.k, &mut self.v]
            .into_iter()
            .map(|a| a.as_slice_mut().expect("standard layout"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so vanishing gradients are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compare `grads` against central differences of `loss` at `samples`
/// randomly chosen coordinates (all coordinates if `samples` covers them).
pub fn grad_check<T, P, F>(params: &P, grads: &P, loss: F, eps: f64, samples: usize, seed: u64) -> GradCheckReport
where
    T: Real,
    P: ParamSet<T> + Clone,
    F: Fn(&P) -> T,
{
    let sizes: Vec<usize> = params.slices().iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<usize> = if samples >= total {
        (0..total).collect()
    } else {
        let mut r = rng::seeded(seed);
        (0..samples).map(|_| r.gen_range(0..total)).collect()
    };
    let locate = |mut flat: usize| {
        for (t, n) in sizes.iter().enumerate() {
            if flat < *n {
                return (t, flat);
            }
            flat -= n;
        }
        unreachable!("coordinate within total")
    };
    let analytic_slices = grads.slices();
    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0 };
    for flat in coords {
        let (t, i) = locate(flat);
        let orig = work.slices()[t][i];
        work.slices_mut()[t][i] = orig + T::of(eps);
        let plus = loss(&work).f64();
        work.slices_mut()[t][i] = orig - T::of(eps);
        let minus = loss(&work).f64();
        work.slices_mut()[t][i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = analytic_slices[t][i].f64();
        let abs = (numeric - analytic).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    report
}
