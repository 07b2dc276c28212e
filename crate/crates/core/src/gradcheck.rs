//! Central-difference oracle for analytic gradients.
//!
//! For each checked element `i` the oracle evaluates
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` on a fresh tape and compares it to
//! the tape's gradient with the relative error
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-5, 1e-3]`.
    pub h: f64,
    /// Check at most this many elements, sampled uniformly without
    /// replacement across all inputs.
    pub max_elements: Option<usize>,
    pub seed: u64,
    /// Multiplies every analytic gradient; `1.0` except when planting faults.
    pub grad_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            max_elements: None,
            seed: 0,
            grad_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with respect to every (or a sampled subset of) input element.
pub fn check_gradients<F>(
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-5..=1e-3).contains(&opts.h) {
        return Err(Error::invalid(
            "finite_diff_check",
            format!("step {} outside [1e-5, 1e-3]", opts.h),
        ));
    }
    let first = evaluate(&f, inputs)?;
    let second = evaluate(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    tape.set_leaf_grad_scale(opts.grad_scale);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| tape.grad_tensor(*v)).collect();
    drop(tape);

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.len();
            Some(start)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    let flat: Vec<usize> = match opts.max_elements {
        Some(m) if m < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = sample(&mut rng, total, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..total).collect(),
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for gi in flat {
        let which = offsets.partition_point(|&o| o <= gi) - 1;
        let elem = gi - offsets[which];
        let orig = work[which].data()[elem];
        work[which].data_mut()[elem] = orig + opts.h;
        let plus = evaluate(&f, &work)?;
        work[which].data_mut()[elem] = orig - opts.h;
        let minus = evaluate(&f, &work)?;
        work[which].data_mut()[elem] = orig;
        let numeric = (plus - minus) / (2.0 * opts.h);
        let err = relative_error(analytic[which].data()[elem], numeric);
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((which, elem));
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Single-input form: maximum relative error over all elements of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        h,
        ..Default::default()
    };
    check_gradients(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        &opts,
    )
    .map(|r| r.max_rel_error)
}
