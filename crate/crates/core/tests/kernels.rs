use ctk_core::kernels::{
    connectivity_sharpness_exact, connectivity_sharpness_hutchinson, dense_spectrum, empirical_ctk, empirical_ntk,
    hutchinson_trace, lanczos_spectrum, masked_kernel, KernelKind, KernelOperator,
};
use ctk_core::net::{
    init_params, jacobian_params, Activation, Batch, InitScheme, JacobianMatrix, NetworkJacobian, NetworkSpec,
    NormState, ParamVector, Space, SplitTag,
};
use ctk_core::transforms::{apply_transform, random_transform, scale_invariant_mask, TransformSpec};
use ctk_core::{linalg, rng};
use nalgebra::DMatrix;

fn inputs(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    DMatrix::from_vec(n, d, rng::normal_vec(&mut r, n * d, 1.0))
}

fn normalized_relu(seed: u64) -> (NetworkSpec, ParamVector<f64>, NormState<f64>) {
    let spec = NetworkSpec::new(vec![5, 12, 10, 3], Activation::Relu, InitScheme::NtkStandardGaussian)
        .with_normalization([1, 2]);
    let p: ParamVector<f64> = init_params(&spec, seed).unwrap();
    let mut norm = NormState::identity(&spec);
    let mut r = rng::seeded(seed + 100);
    for st in norm.layers.values_mut() {
        let m = st.running_mean.len();
        st.running_mean = rng::normal_vec(&mut r, m, 0.3);
        st.running_var = (0..m).map(|i| 0.7 + 0.1 * i as f64).collect();
    }
    (spec, p, norm)
}

#[test]
fn ctk_is_invariant_under_catalog_transforms() {
    let (spec, p, norm) = normalized_relu(1);
    let x = inputs(16, 5, 2);
    let c0 = empirical_ctk(&jacobian_params(&spec, &p, &norm, &x).unwrap(), p.as_slice()).unwrap();
    let cs0 = connectivity_sharpness_exact(&c0);
    let theta0 = empirical_ntk(&jacobian_params(&spec, &p, &norm, &x).unwrap());
    let mut ntk_moved = false;
    for seed in 0..20 {
        let t = random_transform(&spec, seed).unwrap();
        let (p2, n2) = apply_transform(&p, &norm, &spec, &t).unwrap();
        let j2 = jacobian_params(&spec, &p2, &n2, &x).unwrap();
        let c = empirical_ctk(&j2, p2.as_slice()).unwrap();
        let rel = c.rel_frobenius_to(&c0);
        assert!(rel <= 1e-8, "{t:?}: {rel}");
        assert!(((connectivity_sharpness_exact(&c) - cs0) / cs0).abs() <= 1e-8);
        ntk_moved |= empirical_ntk(&j2).rel_frobenius_to(&theta0) > 1e-3;
    }
    assert!(ntk_moved, "the NTK should not be invariant");
}

#[test]
fn masked_ntk_scales_and_masked_ctk_does_not() {
    let (spec, p, norm) = normalized_relu(3);
    let x = inputs(10, 5, 4);
    let mask = scale_invariant_mask(&spec);
    let gamma = 0.5;
    let (p2, n2) = apply_transform(&p, &norm, &spec, &TransformSpec::WeightDecayScale { gamma }).unwrap();
    let j = jacobian_params(&spec, &p, &norm, &x).unwrap();
    let j2 = jacobian_params(&spec, &p2, &n2, &x).unwrap();
    let ntk = masked_kernel(&j, p.as_slice(), mask.as_slice(), KernelKind::Ntk).unwrap();
    let ntk2 = masked_kernel(&j2, p2.as_slice(), mask.as_slice(), KernelKind::Ntk).unwrap();
    let ctk = masked_kernel(&j, p.as_slice(), mask.as_slice(), KernelKind::Ctk).unwrap();
    let ctk2 = masked_kernel(&j2, p2.as_slice(), mask.as_slice(), KernelKind::Ctk).unwrap();
    for i in 0..ntk.dim() {
        for k in 0..ntk.dim() {
            let want = ntk.values[(i, k)] / (gamma * gamma);
            let got = ntk2.values[(i, k)];
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1e-12 * ntk.trace()), "({i},{k})");
            let c = ctk.values[(i, k)];
            assert!((ctk2.values[(i, k)] - c).abs() <= 1e-10 * c.abs().max(1e-12 * ctk.trace()));
        }
    }
}

#[test]
fn unit_parameters_make_kernels_equal_bitwise() {
    let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, InitScheme::NtkStandardGaussian);
    let p = ParamVector::<f64>::from_values(&spec, vec![1.0; spec.param_count()]).unwrap();
    let norm = NormState::identity(&spec);
    let j = jacobian_params(&spec, &p, &norm, &inputs(5, 3, 1)).unwrap();
    assert_eq!(empirical_ctk(&j, p.as_slice()).unwrap().values, empirical_ntk(&j).values);
}

#[test]
fn trace_equals_eigen_sum() {
    let (spec, p, norm) = normalized_relu(5);
    let j = jacobian_params(&spec, &p, &norm, &inputs(12, 5, 6)).unwrap();
    let c = empirical_ctk(&j, p.as_slice()).unwrap();
    c.check_psd().unwrap();
    assert!(c.max_asymmetry() <= 1e-10);
    let s = dense_spectrum(&c);
    let tr = connectivity_sharpness_exact(&c);
    assert!(((s.sum() - tr) / tr).abs() <= 1e-8);
    assert!(s.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn lanczos_top_ritz_values_match_dense() {
    let spec = NetworkSpec::new(vec![4, 40, 1], Activation::Relu, InitScheme::NtkStandardGaussian);
    let p: ParamVector<f64> = init_params(&spec, 8).unwrap();
    let norm = NormState::identity(&spec);
    let x = inputs(100, 4, 9);
    let c = empirical_ctk(&jacobian_params(&spec, &p, &norm, &x).unwrap(), p.as_slice()).unwrap();
    let dense = dense_spectrum(&c);
    let op = NetworkJacobian::new(&spec, &p, &norm, &x, Space::Connectivity).unwrap();
    let matrix_free = KernelOperator { jacobian: &op };
    for s in [
        lanczos_spectrum(&c, 100, 100, 1).unwrap(),
        lanczos_spectrum(&matrix_free, 100, 100, 1).unwrap(),
    ] {
        for i in 0..10 {
            let rel = ((s.eigenvalues[i] - dense.eigenvalues[i]) / dense.eigenvalues[i]).abs();
            assert!(rel <= 1e-6, "ritz {i}: {rel}");
        }
    }
}

#[test]
fn random_gram_top_values_with_dense_oracle() {
    let a = inputs(100, 100, 12);
    let g = &a * a.transpose();
    let dense = linalg::sym_eigenvalues_desc(&g);
    let s = lanczos_spectrum(&g, 100, 100, 2).unwrap();
    for i in 0..10 {
        assert!(((s.eigenvalues[i] - dense[i]) / dense[i]).abs() <= 1e-6);
    }
}

#[test]
fn hutchinson_matches_exact_trace() {
    let spec = NetworkSpec::new(vec![3, 10, 2], Activation::Tanh, InitScheme::NtkStandardGaussian);
    let p: ParamVector<f64> = init_params(&spec, 2).unwrap();
    let norm = NormState::identity(&spec);
    let x = inputs(30, 3, 3);
    let data = Batch::new(x.clone(), DMatrix::zeros(30, 2), SplitTag::Posterior).unwrap();
    let exact = connectivity_sharpness_exact(&empirical_ctk(&jacobian_params(&spec, &p, &norm, &x).unwrap(), p.as_slice()).unwrap());
    let est = connectivity_sharpness_hutchinson(&spec, &p, &norm, &data, 256, 8, 7).unwrap();
    assert!((est.value - exact).abs() <= 3.0 * est.standard_error, "{} vs {exact} ± {}", est.value, est.standard_error);
}

#[test]
fn standard_error_follows_inverse_sqrt_law() {
    let m = inputs(20, 15, 1);
    let j = JacobianMatrix::new(m, 10, 2, Space::Connectivity).unwrap();
    let mean_se = |probes: usize| {
        (0..10)
            .map(|rep| hutchinson_trace(&j, probes, 10, 1000 + rep).unwrap().standard_error)
            .sum::<f64>()
            / 10.0
    };
    let quad = mean_se(256) / mean_se(64);
    assert!((quad - 0.5).abs() <= 0.1, "4x probes ratio {quad}");
    let double = mean_se(128) / mean_se(64);
    assert!((double - 0.5f64.sqrt()).abs() <= 0.2 * 0.5f64.sqrt(), "2x probes ratio {double}");
}

#[test]
fn width_sweep_ratio_shrinks() {
    // Smaller than the acceptance sweep; checks the trend only.
    let mut last = f64::INFINITY;
    let mut violations = 0;
    for w in [32, 128, 512] {
        let spec = NetworkSpec::new(vec![16, w, 1], Activation::Relu, InitScheme::NtkStandardGaussian).with_bias_scale(0.1);
        let norm = NormState::identity(&spec);
        let mut acc = 0.0;
        for seed in 0..5 {
            let p: ParamVector<f64> = init_params(&spec, seed).unwrap();
            let x = inputs(8, 16, 50 + seed);
            let j = jacobian_params(&spec, &p, &norm, &x).unwrap();
            acc += empirical_ctk(&j, p.as_slice()).unwrap().rel_frobenius_to(&empirical_ntk(&j));
        }
        let ratio = acc / 5.0;
        if ratio > last {
            violations += 1;
        }
        last = ratio;
    }
    assert!(violations <= 1);
}
