//! Reference checks shared by the test suites. Compiled only for tests or
//! with the `testkit` feature.

pub mod cases;

use rand::seq::index::sample;

use crate::numerics::{ParamStore, Rng64, Tape, Tensor, Var};
use crate::Result;

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Denominator floor for relative error, so that coordinates whose
/// gradient is numerically zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords: usize,
}

impl GradReport {
    fn merge(&mut self, other: GradReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.coords += other.coords;
    }
}

/// Two central differences at steps a decade apart agree to this relative
/// accuracy on smooth functions; larger gaps mean a kink (e.g. a ReLU
/// crossing) lies inside the larger step.
pub const KINK_TOL: f64 = 1e-5;

/// Central difference of `f` around 0. Starting at [`FD_EPS`], the estimate
/// is kept once it matches the one at a tenth of the step; otherwise the
/// step shrinks, at most to `FD_EPS / 100`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut at = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let mut eps = FD_EPS;
    let mut coarse = at(eps)?;
    for _ in 0..3 {
        let fine = at(eps / 10.0)?;
        if (coarse - fine).abs() <= KINK_TOL * coarse.abs().max(fine.abs()).max(REL_FLOOR) {
            return Ok(coarse);
        }
        eps /= 10.0;
        coarse = fine;
    }
    Ok(coarse)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn pick_coords(n: usize, limit: Option<usize>, rng: &mut Rng64) -> Vec<usize> {
    match limit {
        Some(k) if k < n => {
            let mut v = sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Compares tape gradients of `f` with respect to each of `inputs` against
/// central finite differences. At most `max_coords` coordinates per input
/// are probed (all when `None`).
pub fn check_inputs<F>(
    inputs: &[Tensor],
    f: F,
    max_coords: Option<usize>,
    rng: &mut Rng64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport::default();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros_like(&inputs[i]);
        let analytic = grads.wrt(*var).unwrap_or(&zeros).clone();
        let mut values = inputs.to_vec();
        for j in pick_coords(inputs[i].len(), max_coords, rng) {
            let orig = values[i].data()[j];
            let numeric = central_difference(|h| {
                values[i].data_mut()[j] = orig + h;
                eval(&values)
            })?;
            values[i].data_mut()[j] = orig;
            report.merge(GradReport {
                max_rel_err: rel_err(analytic.data()[j], numeric),
                coords: 1,
            });
        }
    }
    Ok(report)
}

/// Same comparison for every parameter in `store`, with the loss built from
/// store parameters via [`Tape::param`].
pub fn check_params<F>(
    store: &ParamStore,
    f: F,
    max_coords: Option<usize>,
    rng: &mut Rng64,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out)?
        .accumulate_into(&tape, &mut analytic_store)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        tape.value(out).item()
    };

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut probe = store.clone();
    let mut report = GradReport::default();
    for name in &names {
        let n = store.get(name).unwrap().len();
        for j in pick_coords(n, max_coords, rng) {
            let orig = probe.get(name).unwrap().data()[j];
            let numeric = central_difference(|h| {
                probe.get_mut(name).unwrap().data_mut()[j] = orig + h;
                eval(&probe)
            })?;
            probe.get_mut(name).unwrap().data_mut()[j] = orig;
            let analytic = analytic_store.grad(name).unwrap().data()[j];
            report.merge(GradReport {
                max_rel_err: rel_err(analytic, numeric),
                coords: 1,
            });
        }
    }
    Ok(report)
}

/// Uniform random `rows x cols` tensor on `[-scale, scale]`.
pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut Rng64) -> Tensor {
    use rand::Rng;
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Average precision straight from the definition: for each positive,
/// count by hand how many items outrank it and how many of those are
/// positive. Quadratic.
pub fn brute_average_precision(scored: &[crate::eval::ScoredEdge]) -> f64 {
    let outranks = |j: usize, i: usize| {
        scored[j].score > scored[i].score || (scored[j].score == scored[i].score && j < i)
    };
    let mut total = 0.0;
    let mut positives = 0;
    for i in 0..scored.len() {
        if !scored[i].label {
            continue;
        }
        positives += 1;
        let above: Vec<usize> = (0..scored.len()).filter(|&j| j != i && outranks(j, i)).collect();
        let k = above.len() + 1;
        let hits = above.iter().filter(|&&j| scored[j].label).count() + 1;
        total += hits as f64 / k as f64;
    }
    total / positives as f64
}

/// Precision of one relation at `threshold` by direct filtering; `None`
/// without predicted positives.
pub fn brute_relation_precision(scored: &[crate::eval::ScoredEdge], relation: usize, threshold: f64) -> Option<f64> {
    let predicted: Vec<_> = scored
        .iter()
        .filter(|e| e.triple.relation == relation && e.score >= threshold)
        .collect();
    if predicted.is_empty() {
        return None;
    }
    Some(predicted.iter().filter(|e| e.label).count() as f64 / predicted.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_shrinks_past_a_nearby_kink() {
        let relu = |x: f64| Ok((x - 3e-6).max(0.0));
        assert_eq!(central_difference(relu).unwrap(), 0.0);
        let smooth = |x: f64| Ok((1.0 + x).exp());
        let d = central_difference(smooth).unwrap();
        assert!((d - 1f64.exp()).abs() < 1e-9);
    }
}
