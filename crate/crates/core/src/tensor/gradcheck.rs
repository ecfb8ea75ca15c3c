//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Param, Result, Tape, Tensor, TensorError, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates skipped because a step of `epsilon` crossed a ReLU or
    /// pooling boundary, where the function has no derivative to compare.
    pub kinks: usize,
}

impl GradCheckReport {
    fn merge(&mut self, param: usize, coord: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs());
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((param, coord));
        }
    }
}

/// Compares analytic gradients of a scalar function of `params` against
/// central differences with step `epsilon`.
///
/// Coordinates whose perturbed evaluations select a different activation
/// pattern than the unperturbed one are counted in `kinks` and not compared.
///
/// `f` receives the parameters as gradient leaves on a fresh tape. With
/// `samples = Some(k)` at most `k` coordinates per parameter are drawn
/// (seeded); `None` checks every coordinate.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    epsilon: f64,
    samples: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let bound: Vec<Param<f64>> = params.iter().cloned().map(Param::new).collect();
    grad_check_params(
        |tape| {
            let vars: Vec<_> = bound.iter().map(|p| tape.param(p)).collect();
            f(tape, &vars)
        },
        &bound,
        epsilon,
        samples,
        seed,
    )
}

/// Same as [`grad_check`] for parameters that `f` binds itself, e.g. the
/// parameters of a network.
pub fn grad_check_params<F, E>(
    f: F,
    params: &[Param<f64>],
    epsilon: f64,
    samples: Option<usize>,
    seed: u64,
) -> std::result::Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape<f64>) -> std::result::Result<Var<'t, f64>, E>,
    E: From<TensorError>,
{
    params.iter().for_each(Param::zero_grad);
    {
        let tape = Tape::new();
        let loss = f(&tape)?;
        tape.backward(loss)?;
    }
    let analytic: Vec<Tensor<f64>> = params.iter().map(|p| p.grad().clone()).collect();
    params.iter().for_each(Param::zero_grad);

    let eval = || -> std::result::Result<(f64, Vec<usize>), E> {
        let tape = Tape::new();
        let value = f(&tape)?.value().item();
        Ok((value, tape.activation_pattern()))
    };
    let (_, pattern) = eval()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    for (pi, param) in params.iter().enumerate() {
        let numel = param.numel();
        let coords: Vec<usize> = match samples {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        for coord in coords {
            let original = param.value().data()[coord];
            param.update(|v, _| v.data_mut()[coord] = original + epsilon);
            let (plus, p_plus) = eval()?;
            param.update(|v, _| v.data_mut()[coord] = original - epsilon);
            let (minus, p_minus) = eval()?;
            param.update(|v, _| v.data_mut()[coord] = original);
            if p_plus != pattern || p_minus != pattern {
                report.kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            report.merge(pi, coord, analytic[pi].data()[coord], numeric);
        }
    }
    Ok(report)
}
