//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamSet, TapeParams};
use crate::tensor::{Tape, Var};

const DEFAULT_COORDS_PER_TENSOR: usize = 8;
const SAMPLING_SEED: u64 = 0xFD17;

/// Compares the tape's analytic gradient of `f` against central finite
/// differences, sampling up to eight coordinates per parameter tensor.
/// Returns the maximum relative error
/// `|analytic - central| / (|central| + 1e-12)` over the sample.
pub fn finite_difference_check<F>(f: F, params: &ParamSet, step: f64) -> Result<f64>
where
    F: for<'t, 'p, 'a> Fn(&'t Tape, &'a TapeParams<'t, 'p>) -> Result<Var<'t>>,
{
    finite_difference_check_sampled(f, params, step, DEFAULT_COORDS_PER_TENSOR, SAMPLING_SEED)
}

/// As [`finite_difference_check`], with explicit coordinate budget and
/// sampling seed. `per_tensor = usize::MAX` checks every coordinate.
pub fn finite_difference_check_sampled<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64>
where
    F: for<'t, 'p, 'a> Fn(&'t Tape, &'a TapeParams<'t, 'p>) -> Result<Var<'t>>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive and finite, got {step}"
        )));
    }

    // Analytic pass.
    let tape = Tape::new();
    let bound = TapeParams::new(&tape, params);
    let out = f(&tape, &bound)?;
    let value = out.scalar_value()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "finite-difference objective".into(),
        });
    }
    let grads = out.backward()?;
    let analytic = bound.collect_gradients(&grads);
    drop(grads);
    drop(bound);
    drop(tape);

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let bound = TapeParams::new(&tape, p);
        let v = f(&tape, &bound)?.scalar_value()?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "finite-difference objective".into(),
            });
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut working = params.clone();
    let mut max_rel: f64 = 0.0;

    let paths: Vec<String> = params.iter().map(|(p, _)| p.clone()).collect();
    for path in &paths {
        let numel = params.get(path)?.numel();
        let count = per_tensor.min(numel);
        let coords = sample(&mut rng, numel, count);
        for idx in coords {
            let original = working.get(path)?.data()[idx];

            working.get_mut(path)?.data_mut()[idx] = original + step;
            let f_plus = eval(&working)?;
            working.get_mut(path)?.data_mut()[idx] = original - step;
            let f_minus = eval(&working)?;
            working.get_mut(path)?.data_mut()[idx] = original;

            let central = (f_plus - f_minus) / (2.0 * step);
            let grad = analytic.get(path).map_or(0.0, |g| g.data()[idx]);
            let rel = (grad - central).abs() / (central.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
