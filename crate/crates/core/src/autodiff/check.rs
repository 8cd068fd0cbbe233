//! Gradient verification against central finite differences.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, TensorId};
use super::ParamSet;

/// Relative-error denominator floor. Keeps coordinates with near-zero
/// gradient from amplifying finite-difference noise into spurious failures.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compare the analytic gradients already stored in `params` against
/// central finite differences of `f`.
///
/// `f` must be a deterministic re-evaluation of the same scalar the caller
/// differentiated (dropout disabled or masks frozen). Checks up to
/// `samples_per_param` randomly chosen coordinates of every trainable
/// parameter and returns the maximum relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn finite_difference_check<F>(
    params: &mut ParamSet,
    mut f: F,
    step: f64,
    samples_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> f64
where
    F: FnMut(&ParamSet) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut max_err: f64 = 0.0;
    for pid in params.ids().collect::<Vec<_>>() {
        if !params.get(pid).trainable {
            continue;
        }
        let n = params.get(pid).value.numel();
        let mut coords: Vec<usize> = (0..n).collect();
        coords.shuffle(rng);
        coords.truncate(samples_per_param.min(n));
        for ci in coords {
            let analytic = params.get(pid).grad[ci];
            let orig = params.get(pid).value.data[ci];

            params.get_mut(pid).value.data[ci] = orig + step;
            let plus = f(params);
            params.get_mut(pid).value.data[ci] = orig - step;
            let minus = f(params);
            params.get_mut(pid).value.data[ci] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let err = (analytic - numeric).abs() / denom;
            max_err = max_err.max(err);
        }
    }
    max_err
}

/// Build the graph with `build`, run backward, then verify the parameter
/// gradients with [`finite_difference_check`]. Returns the max relative
/// error. `build` must be deterministic across calls.
pub fn grad_check<B>(
    params: &mut ParamSet,
    build: B,
    step: f64,
    samples_per_param: usize,
    rng: &mut ChaCha8Rng,
) -> f64
where
    B: Fn(&mut Tape, &ParamSet) -> TensorId,
{
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = build(&mut tape, params);
    tape.backward(loss, params);
    finite_difference_check(
        params,
        |ps| {
            let mut t = Tape::new();
            let l = build(&mut t, ps);
            t.scalar_value(l)
        },
        step,
        samples_per_param,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::SeedableRng;

    #[test]
    fn linear_function_checks_at_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::randn(vec![5], 1.0, &mut rng));
        let coeffs = Tensor::randn(vec![5], 1.0, &mut rng);
        let err = grad_check(
            &mut params,
            |tape, ps| {
                let wid = tape.param(ps, w);
                let c = tape.constant(coeffs.clone());
                let prod = tape.mul(wid, c);
                tape.sum_all(prod)
            },
            1e-4,
            5,
            &mut rng,
        );
        assert!(err < 1e-9, "linear FD error {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::randn(vec![4], 1.0, &mut rng));
        let err = grad_check(
            &mut params,
            |tape, ps| {
                let _unused = tape.param(ps, w);
                let c = tape.constant(Tensor::scalar(3.5));
                tape.sum_all(c)
            },
            1e-4,
            4,
            &mut rng,
        );
        assert_eq!(err, 0.0);
        assert!(params.get(w).grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_cross_entropy_composite_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::randn(vec![4, 3], 1.0, &mut rng));
        let x = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let target = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]);
        let err = grad_check(
            &mut params,
            |tape, ps| {
                let wid = tape.param(ps, w);
                let xid = tape.constant(x.clone());
                let logits = tape.matmul(xid, wid);
                let probs = tape.softmax(logits);
                let logp = tape.log(probs);
                let t = tape.constant(target.clone());
                let prod = tape.mul(t, logp);
                let s = tape.sum_all(prod);
                tape.scale(s, -1.0)
            },
            1e-4,
            12,
            &mut rng,
        );
        assert!(err < 1e-4, "softmax-CE FD error {err}");
    }
}
