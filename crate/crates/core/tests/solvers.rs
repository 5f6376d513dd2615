use rflow::data::{sample_noise, GaussOracleField};
use rflow::field::{ConstantField, LinearField};
use rflow::solvers::{rk45_integrate, solve, straightness, SolverConfig, SolverError};
use rflow::tensor::Tensor;

fn exp_error(x1: &Tensor, cfg: &SolverConfig) -> (f64, Vec<usize>) {
    let r = solve(&LinearField { dim: x1.cols(), rate: 1.0 }, x1, None, cfg).unwrap();
    let err = r
        .endpoint
        .data()
        .iter()
        .zip(x1.data())
        .map(|(y, x)| (y - x * (-1.0_f64).exp()).abs())
        .fold(0.0, f64::max);
    (err, r.nfe)
}

#[test]
fn rk45_meets_exponential_reference() {
    let x1 = Tensor::matrix(4, 1, vec![-2.0, -0.5, 1.0, 3.0]).unwrap();
    let (err, _) = exp_error(&x1, &SolverConfig::rk45(1e-5, 1e-5));
    assert!(err < 1e-5, "endpoint error {err}");
}

#[test]
fn rk45_nfe_golden() {
    let x1 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    let cfg = SolverConfig::rk45(1e-5, 1e-5);
    let r = solve(&LinearField { dim: 1, rate: 1.0 }, &x1, None, &cfg).unwrap();
    assert_eq!(r.nfe[0], 1 + 6 * (r.accepted[0] + r.rejected[0]));
    assert_eq!((r.nfe[0], r.accepted[0], r.rejected[0]), GOLDEN_1E5);
    let (_, nfe) = exp_error(&x1, &SolverConfig::rk45(1e-8, 1e-8));
    assert_eq!(nfe[0], GOLDEN_1E8_NFE);
}

/// Frozen counts for `x1 = 1`; a change means the controller changed.
const GOLDEN_1E5: (usize, usize, usize) = (37, 6, 0);
const GOLDEN_1E8_NFE: usize = 79;

#[test]
fn tighter_tolerance_is_more_accurate() {
    let x1 = Tensor::matrix(3, 1, vec![-1.5, 0.7, 2.0]).unwrap();
    let (loose, nfe_loose) = exp_error(&x1, &SolverConfig::rk45(1e-4, 1e-4));
    let (tight, nfe_tight) = exp_error(&x1, &SolverConfig::rk45(1e-8, 1e-8));
    assert!(tight < loose, "{tight} vs {loose}");
    assert!(nfe_tight.iter().sum::<usize>() > nfe_loose.iter().sum::<usize>());
}

#[test]
fn euler_is_first_order() {
    let x1 = Tensor::matrix(1, 1, vec![1.0]).unwrap();
    let errs: Vec<f64> = [32, 64, 128, 256].iter().map(|&n| exp_error(&x1, &SolverConfig::euler(n)).0).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn euler_counts_one_evaluation_per_step() {
    let x1 = sample_noise(5, 2, 1);
    for n in [1, 4, 16] {
        let r = solve(&ConstantField { value: vec![1.0, -2.0] }, &x1, None, &SolverConfig::euler(n)).unwrap();
        assert!(r.nfe.iter().all(|&k| k == n));
        for i in 0..5 {
            assert!((r.endpoint.row(i)[0] - (x1.row(i)[0] - 1.0)).abs() < 1e-12);
            assert!((r.endpoint.row(i)[1] - (x1.row(i)[1] + 2.0)).abs() < 1e-12);
        }
    }
}

#[test]
fn oracle_field_transports_noise_to_data() {
    let n = 4000;
    let x1 = sample_noise(n, 1, 8);
    let field = GaussOracleField { mean: vec![2.0], sigma: 1.0 };
    let r = solve(&field, &x1, None, &SolverConfig::rk45(1e-6, 1e-6)).unwrap();
    let y = r.endpoint.data();
    let mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!((mean - 2.0).abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
    assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(), "var {var}");
    // σ0 = 1 keeps the marginal variance fixed, so the exact flow is a pure
    // translation: each endpoint is its own noise shifted by the mean.
    for (a, b) in y.iter().zip(x1.data()) {
        assert!((a - b - 2.0).abs() < 1e-4);
    }
}

#[test]
fn batched_solve_matches_single_rows_bitwise() {
    let x1 = sample_noise(6, 1, 3);
    let field = LinearField { dim: 1, rate: 1.3 };
    let cfg = SolverConfig::rk45(1e-6, 1e-6);
    let batch = rk45_integrate(&field, &x1, None, &cfg).unwrap();
    for i in 0..6 {
        let one = rk45_integrate(&field, &x1.select_rows(&[i]), None, &cfg).unwrap();
        assert_eq!(one.endpoint.data()[0].to_bits(), batch.endpoint.data()[i].to_bits());
        assert_eq!(one.nfe[0], batch.nfe[i]);
    }
}

#[test]
fn trajectories_run_from_noise_to_endpoint() {
    let x1 = sample_noise(3, 2, 4);
    let cfg = SolverConfig::rk45(1e-5, 1e-5).with_trajectory(true);
    let r = solve(&LinearField { dim: 2, rate: 0.5 }, &x1, None, &cfg).unwrap();
    let trajs = r.trajectories.unwrap();
    for (i, tr) in trajs.iter().enumerate() {
        assert_eq!(tr.first().unwrap().0, 1.0);
        assert_eq!(tr.last().unwrap().0, 0.0);
        assert_eq!(tr.first().unwrap().1, x1.row(i));
        assert_eq!(tr.last().unwrap().1, r.endpoint.row(i));
        assert!(tr.windows(2).all(|w| w[1].0 < w[0].0));
    }
}

#[test]
fn budget_exhaustion_is_reported() {
    let x1 = sample_noise(2, 1, 5);
    let mut cfg = SolverConfig::rk45(1e-10, 1e-10);
    cfg.max_nfe = 20;
    let err = solve(&LinearField { dim: 1, rate: 1.0 }, &x1, None, &cfg).unwrap_err();
    assert!(matches!(err, SolverError::BudgetExceeded { max_nfe: 20, .. }));
    let r = rk45_integrate(&LinearField { dim: 1, rate: 1.0 }, &x1, None, &cfg).unwrap();
    assert_eq!(r.failure_count(), 2);
    assert!(r.nfe.iter().all(|&k| k <= 20));
}

#[test]
fn straight_fields_have_zero_straightness() {
    let x1 = sample_noise(50, 2, 6);
    let s = straightness(&ConstantField { value: vec![0.3, -1.0] }, &x1, None, 16).unwrap();
    assert!(s < 1e-24);
    let curved = straightness(&LinearField { dim: 2, rate: 2.0 }, &x1, None, 16).unwrap();
    assert!(curved > 0.1);
    assert!(straightness(&LinearField { dim: 2, rate: 2.0 }, &x1, None, 4).is_err());
}
