//! Central finite-difference gradient checking (f64 only).

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step, in `[1e-7, 1e-3]`.
    pub h: f64,
    /// Coordinates checked per parameter tensor; larger tensors are subsampled.
    pub max_coords_per_param: usize,
    /// Seed of the deterministic subsample.
    pub seed: u64,
    /// Gradient magnitudes below this are compared absolutely instead of relatively.
    pub scale_floor: f64,
    /// Relative disagreement of the one-sided differences above which a coordinate
    /// is treated as sitting on a kink (ReLU zero, max-pool switch, hinge) and skipped.
    pub kink_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords_per_param: 16,
            seed: 0,
            scale_floor: 1e-6,
            kink_tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// Compares the tape gradient of `f` with central differences.
///
/// `f` receives a fresh tape and one leaf per parameter and must return a scalar.
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::Invalid(alloc::format!("step {} outside [1e-7, 1e-3]", opts.h)));
    }
    let analytic = {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        tape.gradient(out, &leaves)?
    };

    let mut eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        tape.value(out).item()
    };

    let base = eval(params)?;

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped_kinks: 0 };
    let h = opts.h;
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = if p.len() <= opts.max_coords_per_param {
            (0..p.len()).collect()
        } else {
            let mut s = Stream::new(opts.seed, pi as u64);
            let mut c = s.choose_distinct(p.len(), opts.max_coords_per_param);
            c.sort_unstable();
            c
        };
        for j in coords {
            let x0 = p.data()[j];
            work[pi].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[j] = x0;

            let central = (fp - fm) / (2.0 * h);
            let forward = (fp - base) / h;
            let backward = (base - fm) / h;
            let slope_scale = forward.abs().max(backward.abs()).max(opts.scale_floor);
            if (forward - backward).abs() > opts.kink_tol * slope_scale {
                report.skipped_kinks += 1;
                continue;
            }
            let a = analytic[pi].data()[j];
            let rel = (a - central).abs() / a.abs().max(central.abs()).max(opts.scale_floor);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn quadratic_bowl_is_exact() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn relu_kink_is_excluded() {
        let x = Tensor::new(&[3], vec![0.0, 1.5, -2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.skipped_kinks, 1);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // sum(x ⊙ x) scaled by a constant the tape does not know about
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let mut calls = 0;
        let r = grad_check(
            |t, v| {
                calls += 1;
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq);
                // first call is the analytic pass; perturbations see a different function
                Ok(if calls == 1 { s } else { t.scale(s, 1.01) })
            },
            &[x],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-3);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let opts = GradCheckOptions { h: 1e-2, ..GradCheckOptions::default() };
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[x], &opts).is_err());
    }
}
