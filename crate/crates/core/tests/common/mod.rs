#![allow(dead_code)]

use ctk_core::net::{init_params, Activation, Batch, InitScheme, NetworkSpec, NormState, ParamVector, SplitTag};
use ctk_core::rng;
use nalgebra::DMatrix;

pub fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    DMatrix::from_vec(n, d, rng::normal_vec(&mut r, n * d, 1.0))
}

/// ReLU MLP with every hidden layer normalized and non-trivial statistics.
pub fn normalized_relu(widths: Vec<usize>, seed: u64) -> (NetworkSpec, ParamVector<f64>, NormState<f64>) {
    let hidden: Vec<usize> = (1..widths.len() - 1).collect();
    let spec = NetworkSpec::new(widths, Activation::Relu, InitScheme::NtkStandardGaussian).with_normalization(hidden);
    let mut p: ParamVector<f64> = init_params(&spec, seed).unwrap();
    for (j, v) in p.values.iter_mut().enumerate() {
        *v += 0.05 * ((j as f64) * 0.37).sin();
    }
    let mut norm = NormState::identity(&spec);
    let mut r = rng::seeded(seed ^ 0xABCD);
    for st in norm.layers.values_mut() {
        let m = st.running_mean.len();
        st.running_mean = rng::normal_vec(&mut r, m, 0.3);
        st.running_var = rng::normal_vec::<f64, _>(&mut r, m, 0.4).iter().map(|v| 0.6 + v * v).collect();
    }
    (spec, p, norm)
}

/// Labels from a fixed random linear teacher.
pub fn teacher_batch(n: usize, d: usize, classes: usize, seed: u64, tag: SplitTag) -> Batch<f64> {
    let x = gaussian(n, d, seed);
    let w = gaussian(d, classes, 999);
    let scores = &x * w;
    let labels = ctk_core::net::argmax_rows(&scores);
    Batch::classification(x, &labels, classes, tag).unwrap()
}
