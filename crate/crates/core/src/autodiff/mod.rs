//! Dense tensors, a reverse-mode tape, and the Adam optimizer.

mod optim;
mod tape;
mod tensor;

pub use optim::{clip_global_norm, global_grad_norm, Adam, AdamHyper};
#[doc(hidden)]
pub use tape::AdjointFault;
pub use tape::{canonical_sum, softmax_in_place, ParamId, ParamSet, Parameter, Tape, Var};
#[allow(unused_imports)]
pub(crate) use tape::{sigmoid, softplus};
pub use tensor::Tensor;

use crate::error::Result;

/// Denominator floor for [`relative_error`]; entries whose gradients are both below it are
/// compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// Central finite-difference gradient of `f` with respect to parameter `id`.
///
/// `f` is evaluated with each entry perturbed by ±`h` in turn; the parameter is restored
/// exactly afterwards.
pub fn finite_difference<F>(params: &mut ParamSet, id: ParamId, h: f64, mut f: F) -> Result<Tensor>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let (rows, cols) = params.value(id).shape();
    let mut out = Tensor::zeros(rows, cols);
    for k in 0..rows * cols {
        let orig = params.value(id).data()[k];
        params.get_mut(id).value.data_mut()[k] = orig + h;
        let plus = f(params)?;
        params.get_mut(id).value.data_mut()[k] = orig - h;
        let minus = f(params)?;
        params.get_mut(id).value.data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Largest entrywise `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        // Keep values away from 0 so relu kinks are never within h.
        Tensor::from_fn(r, c, |_, _| {
            let v: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
    }

    /// Build a loss from a tape program over the listed parameters, then compare analytic and
    /// central-difference gradients for each.
    fn check<F>(mut params: ParamSet, program: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let eval = |ps: &ParamSet| -> Result<(Tape, Var)> {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.ids().map(|id| tape.param(ps, id)).collect();
            let loss = program(&mut tape, &vars)?;
            Ok((tape, loss))
        };
        let (tape, loss) = eval(&params).unwrap();
        params.zero_grad();
        tape.backward(loss, &mut params).unwrap();
        let analytic: Vec<Tensor> = params.iter().map(|p| p.grad.clone()).collect();
        let mut worst = 0.0f64;
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let numeric = finite_difference(&mut params, id, H, |ps| {
                let (t, l) = eval(ps)?;
                t.value(l).item()
            })
            .unwrap();
            worst = worst.max(relative_error(&analytic[k], &numeric));
        }
        worst
    }

    fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
        // Non-uniform weights so that adjoints are not all equal.
        let (r, c) = tape.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0)));
        let prod = tape.sub(x, w)?;
        let sq = tape.square(prod);
        tape.sum_all(sq)
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let mut tape = Tape::new();
        let w = tape.param(&ps, id);
        let l = tape.sum_all(w).unwrap();
        tape.backward(l, &mut ps).unwrap();
        assert_eq!(ps.grad(id), &Tensor::ones(2, 2));
    }

    #[test]
    fn half_sum_of_squares_grad_is_identity() {
        let mut ps = ParamSet::new();
        let w0 = Tensor::from_rows(&[[1.5, -2.0, 0.25]]);
        let id = ps.add("w", w0.clone());
        let mut tape = Tape::new();
        let w = tape.param(&ps, id);
        let sq = tape.square(w);
        let s = tape.sum_all(sq).unwrap();
        let l = tape.mul_scalar(s, 0.5);
        tape.backward(l, &mut ps).unwrap();
        assert_eq!(ps.grad(id), &w0);
    }

    #[test]
    fn backward_accumulates_and_skips_unreachable() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::scalar(3.0));
        let b = ps.add("b", Tensor::scalar(5.0));
        let mut tape = Tape::new();
        let av = tape.param(&ps, a);
        let _bv = tape.param(&ps, b);
        let l = tape.square(av);
        tape.backward(l, &mut ps).unwrap();
        tape.backward(l, &mut ps).unwrap();
        assert_eq!(ps.grad(a).data(), &[12.0]);
        assert_eq!(ps.grad(b).data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::zeros(2, 2));
        let mut tape = Tape::new();
        let av = tape.param(&ps, a);
        assert!(tape.backward(av, &mut ps).is_err());
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(&[0.0, -3.0, 3.0]));
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(&tape.value(r).data()[1..], &[0.0, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", Tensor::row_vector(&[0.0, 1.0]));
        let mut tape = Tape::new();
        let av = tape.param(&ps, a);
        let r = tape.relu(av);
        let l = tape.sum_all(r).unwrap();
        tape.backward(l, &mut ps).unwrap();
        assert_eq!(ps.grad(a).data(), &[0.0, 1.0]);
    }

    #[test]
    fn mean_rows_of_identical_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]));
        let m = tape.mean_rows(x).unwrap();
        assert_eq!(tape.value(m), &Tensor::row_vector(&[1.0, 2.0]));
        let ones = tape.constant(Tensor::ones(2, 3));
        let s = tape.sum_all(ones).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
    }

    #[test]
    fn empty_reductions_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(0, 3));
        assert!(tape.mean_rows(x).is_err());
        assert!(tape.sum_all(x).is_err());
    }

    #[test]
    fn softmax_over_set_limits() {
        let mut tape = Tape::new();
        let s: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::scalar(0.7))).collect();
        let w = tape.softmax_over_set(&s).unwrap();
        for v in &w {
            assert!((tape.value(*v).item().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(Tensor::scalar(700.0));
        let small = tape.constant(Tensor::scalar(-700.0));
        let w = tape.softmax_over_set(&[big, small]).unwrap();
        assert_eq!(tape.value(w[0]).item().unwrap(), 1.0);
        assert!(tape.value(w[1]).item().unwrap() < 1e-300);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(4, 1));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)") && msg.contains("(4, 1)"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        ps.add("a", random(&mut rng, 3, 4));
        ps.add("b", random(&mut rng, 4, 2));
        let err = check(ps, |t, v| {
            let p = t.matmul(v[0], v[1])?;
            t.sum_all(p)
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn repeated_backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut ps = ParamSet::new();
        let a = ps.add("a", random(&mut rng, 5, 4));
        let b = ps.add("b", random(&mut rng, 4, 3));
        let run = |ps: &mut ParamSet| {
            ps.zero_grad();
            let mut t = Tape::new();
            let (x, y) = (t.param(ps, a), t.param(ps, b));
            let p = t.matmul(x, y).unwrap();
            let s = t.sigmoid(p);
            let l = t.sum_all(s).unwrap();
            t.backward(l, ps).unwrap();
            (ps.grad(a).clone(), ps.grad(b).clone())
        };
        let first = run(&mut ps);
        let second = run(&mut ps);
        assert_eq!(first, second);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(20))]

        #[test]
        fn elementwise_adjoints_match_fd(seed in 0u64..10_000, r in 1usize..5, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            ps.add("a", random(&mut rng, r, c));
            ps.add("b", random(&mut rng, r, c));
            ps.add("row", random(&mut rng, 1, c));
            ps.add("col", random(&mut rng, r, 1));
            ps.add("s", random(&mut rng, 1, 1));
            let err = check(ps, |t, v| {
                let x = t.add(v[0], v[1])?;
                let x = t.sub(x, v[1])?;
                let x = t.add_row(x, v[2])?;
                let x = t.mul_col(x, v[3])?;
                let y = t.relu(x);
                let z = t.sigmoid(v[1]);
                let z = t.mul_scalar(z, 1.7);
                let z = t.softplus(z);
                let x = t.add(y, z)?;
                let x = t.scale_by(x, v[4])?;
                weighted_sum(t, x, seed)
            });
            prop_assert!(err < TOL, "rel err {}", err);
        }

        #[test]
        fn reduction_adjoints_match_fd(seed in 0u64..10_000, r in 1usize..6, c in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            ps.add("a", random(&mut rng, r, c));
            let err = check(ps, |t, v| {
                let m = t.mean_rows(v[0])?;
                let rep = t.repeat_rows(m, 3)?;
                let sq = t.square(rep);
                let s1 = t.mean_all(sq)?;
                let col = t.column(v[0], c - 1)?;
                let s2 = weighted_sum(t, col, seed)?;
                let both = t.concat_cols(&[s1, s2])?;
                weighted_sum(t, both, seed + 1)
            });
            prop_assert!(err < TOL, "rel err {}", err);
        }

        #[test]
        fn matmul_adjoints_match_fd(seed in 0u64..10_000, m in 1usize..5, k in 1usize..5, n in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            ps.add("a", random(&mut rng, m, k));
            ps.add("b", random(&mut rng, k, n));
            let err = check(ps, |t, v| {
                let p = t.matmul(v[0], v[1])?;
                weighted_sum(t, p, seed)
            });
            prop_assert!(err < TOL, "rel err {}", err);
        }

        #[test]
        fn softmax_adjoints_match_fd(seed in 0u64..10_000, r in 1usize..4, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            ps.add("a", random(&mut rng, r, c));
            ps.add("s0", random(&mut rng, 1, 1));
            ps.add("s1", random(&mut rng, 1, 1));
            let targets: Vec<usize> = (0..r).map(|i| (i * 7 + seed as usize) % c).collect();
            let err = check(ps, |t, v| {
                let sm = t.softmax_rows(v[0])?;
                let a = weighted_sum(t, sm, seed)?;
                let ws = t.softmax_over_set(&[v[1], v[2]])?;
                let b = t.mul_scalar(ws[0], 3.0);
                let ce = t.softmax_cross_entropy(v[0], &targets)?;
                let x = t.add(a, b)?;
                t.add(x, ce)
            });
            prop_assert!(err < TOL, "rel err {}", err);
        }

        #[test]
        fn softmax_sums_to_one(scores in proptest::collection::vec(-700.0f64..700.0, 1..8)) {
            let mut xs = scores.clone();
            softmax_in_place(&mut xs);
            let total: f64 = xs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(xs.iter().all(|&w| w >= 0.0));
        }
    }
}
