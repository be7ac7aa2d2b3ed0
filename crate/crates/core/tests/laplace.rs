mod common;

use common::{gaussian, normalized_relu};
use ctk_core::laplace::{
    ensemble_predict, ll_posterior, posterior_connectivity, posterior_parameter, predictive, rto_sample, sample_moments,
    weight_space_variance, EnsembleMode, Flavor, PredictiveForm, PredictiveInputs,
};
use ctk_core::linalg;
use ctk_core::net::{forward, jacobian_params, JacobianMatrix, Space, StatsMode};
use ctk_core::transforms::{apply_transform, scale_invariant_mask, TransformSpec};
use nalgebra::DMatrix;
use statrs::distribution::{ContinuousCDF, Normal};

fn flat(m: &DMatrix<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn param_jac(values: DMatrix<f64>, k: usize) -> JacobianMatrix<f64> {
    let n = values.nrows() / k;
    JacobianMatrix::new(values, n, k, Space::Parameter).unwrap()
}

#[test]
fn pushforward_matches_scaled_damping_inverse() {
    let p = 40;
    let j = param_jac(gaussian(25, p, 1), 1);
    let theta: Vec<f64> = flat(&gaussian(p, 1, 2)).iter().map(|v| v + 0.1f64.copysign(*v)).collect();
    let (alpha, sigma) = (0.7, 0.4);
    let qc = posterior_connectivity(&j.to_connectivity(&theta).unwrap(), &flat(&gaussian(25, 1, 3)), alpha, sigma).unwrap();
    let qp = posterior_parameter(&qc, &theta).unwrap();
    let d2 = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(p, theta.iter().map(|t| 1.0 / (t * t * alpha * alpha))));
    let prec = d2 + j.values.transpose() * &j.values / (sigma * sigma);
    let oracle = prec.try_inverse().unwrap();
    let cov = qp.covariance_dense().unwrap();
    assert!(linalg::rel_frobenius(&cov, &oracle) <= 1e-8);
    for i in 0..p {
        assert!((qp.mean[i] - (theta[i] + theta[i] * qc.mean[i])).abs() < 1e-14);
    }
}

#[test]
fn unit_parameters_make_cl_and_ll_agree() {
    let p = 12;
    let j = param_jac(gaussian(8, p, 4), 2);
    let ones = vec![1.0; p];
    let qc = posterior_connectivity(&j.to_connectivity(&ones).unwrap(), &[0.0; 8], 1.2, 0.5).unwrap();
    let qp = posterior_parameter(&qc, &ones).unwrap();
    let ll = ll_posterior(&j, &ones, 1.2, 0.5).unwrap();
    assert_eq!(qp.covariance_dense().unwrap(), ll.covariance_dense().unwrap());
    assert!(qp.mean.iter().zip(&qc.mean).all(|(a, b)| *a == 1.0 + b));
}

#[test]
fn small_prior_dominates() {
    let j = param_jac(gaussian(10, 6, 5), 1);
    let alpha = 1e-5;
    let ll = ll_posterior(&j, &[0.3; 6], alpha, 1.0).unwrap();
    let prior = DMatrix::identity(6, 6) * (alpha * alpha);
    assert!(linalg::rel_frobenius(&ll.covariance_dense().unwrap(), &prior) <= 1e-8);
}

#[test]
fn posterior_shrinks_the_prior() {
    let j = param_jac(gaussian(10, 15, 6), 1).to_connectivity(&[2.0; 15]).unwrap();
    let alpha = 0.8;
    let q = posterior_connectivity(&j, &[0.0; 10], alpha, 0.3).unwrap();
    let e = linalg::sym_eigenvalues_desc(&q.covariance_dense().unwrap());
    assert!(e.iter().all(|v| *v <= alpha * alpha * (1.0 + 1e-12) && *v > 0.0));
}

#[test]
fn one_training_point_predictive() {
    // Θ over {x, x₁}: K_xx = 5, K_x1 = 2, K_11 = 4 from rows (1, 2) and (2, 0).
    let jt = param_jac(DMatrix::from_row_slice(1, 2, &[2.0, 0.0]), 1);
    let jx = param_jac(DMatrix::from_row_slice(1, 2, &[1.0, 2.0]), 1);
    let f = DMatrix::from_element(1, 1, 0.3);
    let inputs = PredictiveInputs {
        j_test: &jx,
        j_train: &jt,
        theta: &[1.0, 1.0],
        f_test: &f,
        mask: None,
    };
    let alpha = 1.5;
    let pred = predictive(Flavor::Ll, &inputs, alpha, 1.0, PredictiveForm::Limit).unwrap();
    let want = alpha * alpha * (5.0 - 4.0 / 4.0);
    assert!((pred.covariance[0][(0, 0)] - want).abs() < 1e-12);
    assert_eq!(pred.mean, f);
}

#[test]
fn training_points_have_vanishing_variance() {
    let (spec, p, norm) = normalized_relu(vec![2, 16, 1], 3);
    let x = gaussian(6, 2, 4);
    let j = jacobian_params(&spec, &p, &norm, &x).unwrap();
    let f = forward(&spec, &p, &norm, &x, StatsMode::Running).unwrap();
    let inputs = PredictiveInputs {
        j_test: &j,
        j_train: &j,
        theta: p.as_slice(),
        f_test: &f,
        mask: None,
    };
    let alpha = 1.0;
    let pred = predictive(Flavor::Cl, &inputs, alpha, 1e-6, PredictiveForm::Exact).unwrap();
    let kxx = ctk_core::kernels::empirical_ctk(&j, p.as_slice()).unwrap();
    for i in 0..6 {
        assert!(pred.covariance[i][(0, 0)] <= 1e-6 * alpha * alpha * kxx.values[(i, i)]);
    }
}

#[test]
fn kernel_predictive_equals_weight_space_predictive() {
    let (spec, p, norm) = normalized_relu(vec![3, 12, 2], 7);
    let xt = gaussian(10, 3, 8);
    let xs = gaussian(5, 3, 9);
    let jt = jacobian_params(&spec, &p, &norm, &xt).unwrap();
    let js = jacobian_params(&spec, &p, &norm, &xs).unwrap();
    let f = forward(&spec, &p, &norm, &xs, StatsMode::Running).unwrap();
    let (alpha, sigma) = (0.9, 0.2);
    let inputs = PredictiveInputs {
        j_test: &js,
        j_train: &jt,
        theta: p.as_slice(),
        f_test: &f,
        mask: None,
    };
    for flavor in [Flavor::Cl, Flavor::Ll] {
        let pred = predictive(flavor, &inputs, alpha, sigma, PredictiveForm::Exact).unwrap();
        let (jtrain, jtest) = match flavor {
            Flavor::Cl => (jt.to_connectivity(p.as_slice()).unwrap(), js.to_connectivity(p.as_slice()).unwrap()),
            Flavor::Ll => (jt.clone(), js.clone()),
        };
        let q = posterior_connectivity(&JacobianMatrix { space: Space::Connectivity, ..jtrain }, &[0.0; 20], alpha, sigma).unwrap();
        let cov = q.covariance_dense().unwrap();
        for i in 0..5 {
            let w = weight_space_variance(&jtest.values.rows(2 * i, 2).into_owned(), &cov);
            assert!(linalg::rel_frobenius(&pred.covariance[i], &w) <= 1e-8, "{flavor:?} point {i}");
        }
    }
}

#[test]
fn weight_decay_amplifies_ll_but_not_cl() {
    let (spec, p, norm) = normalized_relu(vec![2, 20, 1], 5);
    let xt = gaussian(8, 2, 1);
    let xs = gaussian(50, 2, 2);
    let mask = scale_invariant_mask(&spec);
    let gamma = 0.5;
    let (p2, n2) = apply_transform(&p, &norm, &spec, &TransformSpec::WeightDecayScale { gamma }).unwrap();
    let var = |pp: &ctk_core::net::ParamVector<f64>, nn: &ctk_core::net::NormState<f64>, flavor| {
        let jt = jacobian_params(&spec, pp, nn, &xt).unwrap();
        let js = jacobian_params(&spec, pp, nn, &xs).unwrap();
        let f = forward(&spec, pp, nn, &xs, StatsMode::Running).unwrap();
        let inputs = PredictiveInputs {
            j_test: &js,
            j_train: &jt,
            theta: pp.as_slice(),
            f_test: &f,
            mask: Some(mask.as_slice()),
        };
        predictive(flavor, &inputs, 1.0, 0.1, PredictiveForm::Limit).unwrap().variances()
    };
    let (ll0, ll1) = (var(&p, &norm, Flavor::Ll), var(&p2, &n2, Flavor::Ll));
    let (cl0, cl1) = (var(&p, &norm, Flavor::Cl), var(&p2, &n2, Flavor::Cl));
    for i in 0..50 {
        assert!((ll1[i] / ll0[i] - 4.0).abs() <= 4e-8, "LL ratio {}", ll1[i] / ll0[i]);
        assert!((cl1[i] / cl0[i] - 1.0).abs() <= 1e-8, "CL ratio {}", cl1[i] / cl0[i]);
    }
}

#[test]
fn rto_without_data_samples_the_prior() {
    let j = param_jac(DMatrix::zeros(3, 4), 1);
    let alpha = 2.0;
    let n = 4000;
    let s = rto_sample(&j, &[0.0; 3], alpha, 1.0, 3, n).unwrap();
    let (mean, _) = sample_moments(&s);
    assert!(mean.iter().all(|m| m.abs() <= 4.0 * alpha / (n as f64).sqrt()));
}

#[test]
fn rto_matches_closed_form_posterior() {
    for (rows, p) in [(5, 2), (2, 5)] {
        let j = param_jac(gaussian(rows, p, 10), 1).to_connectivity(&vec![1.5; p]).unwrap();
        let r = flat(&gaussian(rows, 1, 11));
        let (alpha, sigma) = (1.0, 0.5);
        let q = posterior_connectivity(&j, &r, alpha, sigma).unwrap();
        let cov = q.covariance_dense().unwrap();
        let n = 10_000;
        let s = rto_sample(&j, &r, alpha, sigma, 42, n).unwrap();
        let (mean, scov) = sample_moments(&s);
        for i in 0..p {
            let se = (cov[(i, i)] / n as f64).sqrt();
            assert!((mean[i] - q.mean[i]).abs() <= 3.0 * se, "mean {i}");
        }
        assert!(linalg::rel_frobenius(&scov, &cov) <= 0.05);

        // Kolmogorov-Smirnov on the first marginal at the 1% level.
        let normal = Normal::new(q.mean[0], cov[(0, 0)].sqrt()).unwrap();
        let mut xs: Vec<f64> = s.iter().map(|v| v[0]).collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(k, &x)| {
                let c = normal.cdf(x);
                (c - k as f64 / n as f64).abs().max(((k + 1) as f64 / n as f64 - c).abs())
            })
            .fold(0.0f64, f64::max);
        assert!(d <= 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }
}

#[test]
fn rto_is_schedule_independent() {
    let j = param_jac(gaussian(6, 4, 1), 2);
    let r = flat(&gaussian(6, 1, 2));
    let a = rto_sample(&j, &r, 1.0, 0.3, 9, 64).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let b = pool.install(|| rto_sample(&j, &r, 1.0, 0.3, 9, 64).unwrap());
    assert_eq!(a, b);
}

#[test]
fn ensembles() {
    let (spec, p, norm) = normalized_relu(vec![2, 8, 3], 1);
    let x = gaussian(5, 2, 3);
    let zero = vec![0.0; p.len()];
    for mode in [EnsembleMode::Linearized, EnsembleMode::FullForward] {
        let e = ensemble_predict(&[zero.clone(), zero.clone()], &spec, &p, &norm, &x, Space::Connectivity, mode, 0.1).unwrap();
        assert!(e.variance.iter().all(|v| *v == 0.0));
        for i in 0..5 {
            let s: f64 = e.probabilities.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let j = jacobian_params(&spec, &p, &norm, &x).unwrap().to_connectivity(p.as_slice()).unwrap();
    let samples = rto_sample(&j, &vec![0.0; 15], 1.0, 0.1, 4, 16).unwrap();
    let e = ensemble_predict(&samples, &spec, &p, &norm, &x, Space::Connectivity, EnsembleMode::Linearized, 0.0).unwrap();
    assert!(e.variance.iter().all(|v| *v > 0.0));
    assert!(ensemble_predict::<f64>(&[], &spec, &p, &norm, &x, Space::Connectivity, EnsembleMode::Linearized, 0.0).is_err());
}
