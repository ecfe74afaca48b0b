mod common;
mod support;

use common::{layer_cases, model_gradcheck, primitive_cases, random_inputs};
use mumtaffect::data::ProcessedTrial;
use mumtaffect::tensor::gradcheck::{check_many, check_store, finite_diff_check, CheckError, CheckOptions};
use mumtaffect::tensor::{Graph, Tensor};

#[test]
fn every_primitive_matches_central_differences() {
    let opts = CheckOptions::default();
    for case in primitive_cases() {
        for seed in 0..5 {
            let inputs = random_inputs(&case, seed);
            let report = check_many(&case.f, &inputs, None, opts).unwrap();
            assert!(
                report.passed(),
                "{} seed {seed}: rel err {:.3e} at {:?} (analytic {}, numeric {})",
                case.name,
                report.max_rel_err,
                report.worst,
                report.analytic,
                report.numeric
            );
        }
    }
}

#[test]
fn every_layer_matches_central_differences() {
    for case in layer_cases() {
        let r = check_store(&case.store, &case.f, None, CheckOptions::default()).unwrap();
        assert!(r.checked > 0);
        assert!(r.passed(), "{}: {r:?}", case.name);
    }
}

#[test]
fn whole_model_matches_central_differences() {
    let data = support::trials(2, 2, 11);
    let refs: Vec<&ProcessedTrial> = data.iter().collect();
    let r = model_gradcheck(&support::tiny_config(), &refs, 50, 3).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn sum_of_squares_is_tight() {
    let x = Tensor::from_fn(&[7], |i| (i as f64 * 1.3).cos());
    let r = finite_diff_check(|_, x| x.mul(x)?.sum(), &x, CheckOptions::default()).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn linear_function_is_exact() {
    let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
    let r = finite_diff_check(|_, x| x.sum(), &x, CheckOptions::default()).unwrap();
    assert!(r.max_rel_err < 1e-9, "{r:?}");
}

#[test]
fn nondeterministic_function_is_rejected() {
    use std::sync::atomic::{AtomicU64, Ordering};
    let calls = AtomicU64::new(0);
    let x = Tensor::from_fn(&[3], |i| i as f64);
    let err = finite_diff_check(
        |g: &Graph<f64>, x| {
            let k = calls.fetch_add(1, Ordering::Relaxed) as f64;
            x.sum()?.add(g.scalar(k))
        },
        &x,
        CheckOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, CheckError::NonDeterministic { .. }));
}
