use ctk_core::net::{init_params, Activation, InitScheme, NetworkSpec, NormState, ParamVector};
use ctk_core::rng;
use ctk_core::transforms::{
    apply_transform, gaussian_probes, random_transform, verify_function_preserving, TransformSpec,
};
use proptest::prelude::*;

fn normalized_relu() -> (NetworkSpec, ParamVector<f64>, NormState<f64>) {
    let spec = NetworkSpec::new(vec![4, 6, 5, 3], Activation::Relu, InitScheme::NtkStandardGaussian)
        .with_normalization([1, 2]);
    let mut p: ParamVector<f64> = init_params(&spec, 21).unwrap();
    for (j, v) in p.values.iter_mut().enumerate() {
        *v += 0.1 * (j as f64 * 0.7).sin();
    }
    let mut norm = NormState::identity(&spec);
    let mut r = rng::seeded(2);
    for st in norm.layers.values_mut() {
        let m = st.running_mean.len();
        st.running_mean = rng::normal_vec(&mut r, m, 0.5);
        st.running_var = (0..m).map(|i| 0.5 + 0.2 * i as f64).collect();
    }
    (spec, p, norm)
}

#[test]
fn relu_rescale_gamma_three() {
    let spec = NetworkSpec::new(vec![3, 8, 2], Activation::Relu, InitScheme::He);
    let p: ParamVector<f64> = init_params(&spec, 5).unwrap();
    let norm = NormState::identity(&spec);
    let x = gaussian_probes::<f64>(&spec, 100, 1);
    let t = TransformSpec::ActivationRescale { layer: 1, unit: 3, gamma: 3.0 };
    let r = verify_function_preserving(&spec, &p, &norm, &t, &x, 1e-9).unwrap();
    assert!(r.pass, "gap {}", r.max_abs_gap);
}

#[test]
fn rescale_on_normalized_unit_preserves_function() {
    let (spec, p, norm) = normalized_relu();
    let x = gaussian_probes::<f64>(&spec, 100, 3);
    for (layer, unit) in [(1, 0), (2, 4)] {
        let t = TransformSpec::ActivationRescale { layer, unit, gamma: 0.3 };
        let r = verify_function_preserving(&spec, &p, &norm, &t, &x, 1e-9).unwrap();
        assert!(r.pass, "gap {}", r.max_abs_gap);
    }
}

#[test]
fn catalog_preserves_function() {
    let (spec, p, norm) = normalized_relu();
    let x = gaussian_probes::<f64>(&spec, 100, 4);
    for seed in 0..40 {
        let t = random_transform(&spec, seed).unwrap();
        let r = verify_function_preserving(&spec, &p, &norm, &t, &x, 1e-9).unwrap();
        assert!(r.pass, "{t:?}: gap {}", r.max_abs_gap);
    }
}

#[test]
fn identity_gives_zero_gap() {
    let (spec, p, norm) = normalized_relu();
    let x = gaussian_probes::<f64>(&spec, 10, 4);
    let r = verify_function_preserving(&spec, &p, &norm, &TransformSpec::identity(), &x, 0.0).unwrap();
    assert_eq!(r.max_abs_gap, 0.0);
}

#[test]
fn no_transform_for_tanh_without_normalization() {
    let spec = NetworkSpec::new(vec![2, 3, 1], Activation::Tanh, InitScheme::He);
    assert!(random_transform(&spec, 0).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rescale_then_inverse_is_identity(layer in 1usize..3, unit in 0usize..5, log_g in -2.0f64..2.0) {
        let (spec, p, norm) = normalized_relu();
        let g = log_g.exp();
        let fwd = TransformSpec::ActivationRescale { layer, unit, gamma: g };
        let back = TransformSpec::ActivationRescale { layer, unit, gamma: 1.0 / g };
        let (p1, n1) = apply_transform(&p, &norm, &spec, &fwd).unwrap();
        let (p2, _) = apply_transform(&p1, &n1, &spec, &back).unwrap();
        for (a, b) in p2.values.iter().zip(&p.values) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn transforms_are_diagonal(seed in 0u64..10_000) {
        let (spec, p, norm) = normalized_relu();
        let t = random_transform(&spec, seed).unwrap();
        let (p1, _) = apply_transform(&p, &norm, &spec, &t).unwrap();
        // Apply the same transform to the all-ones vector: its image is the
        // per-coordinate factor, which must reproduce the first image.
        let ones = p.with_values(vec![1.0; p.len()]);
        let (f, _) = apply_transform(&ones, &norm, &spec, &t).unwrap();
        for j in 0..p.len() {
            prop_assert!(f.values[j] > 0.0);
            prop_assert!((p1.values[j] - f.values[j] * p.values[j]).abs() <= 1e-14 * (1.0 + p.values[j].abs()));
        }
    }

    #[test]
    fn random_transforms_pass_their_own_guard(seed in 0u64..10_000) {
        let (spec, _, _) = normalized_relu();
        let t = random_transform(&spec, seed).unwrap();
        prop_assert!(t.validate(&spec).is_ok());
    }
}
