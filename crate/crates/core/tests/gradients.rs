mod common;

use common::{block_is_exercised, compare_gradients, numeric_gradient, small_world, smooth_instance, random_params};
use msrl_core::encoders::{EncoderParams, ExpressionEncoding, PairTape, RegionEncoding, LinearContext};
use msrl_core::objective::{msrl_objective, Variant};
use ndarray::Array1;

const STEP: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-9;

/// Rounding floor of a central difference of a value of size `scale`.
fn rounding_floor(scale: f64) -> f64 {
    8.0 * f64::EPSILON * scale.abs().max(1.0) / STEP
}

#[test]
fn objective_gradient_matches_central_differences() {
    let mut exercised = std::collections::BTreeMap::new();
    for seed in 20..26 {
        let inst = smooth_instance(seed);
        let value = msrl_objective(&inst.catalog, &inst.batch, &inst.params, &inst.priorities, &inst.state, Variant::Msrl).unwrap();
        assert!(value.active > 0 && value.active == inst.priorities.selected().count(), "seed {seed}: instance not smooth");
        let numeric = numeric_gradient(&inst.params, STEP, |p| {
            msrl_objective(&inst.catalog, &inst.batch, p, &inst.priorities, &inst.state, Variant::Msrl).unwrap().energy
        });
        if let Err(e) = compare_gradients(&value.grads, &numeric, RTOL, rounding_floor(value.energy)) {
            panic!("seed {seed}: {e}");
        }
        for (name, used) in block_is_exercised(&value.grads) {
            *exercised.entry(name).or_insert(false) |= used;
        }
    }
    let idle: Vec<_> = exercised.iter().filter(|(_, &u)| !u).map(|(n, _)| *n).collect();
    assert!(idle.is_empty(), "blocks without gradient: {idle:?}");
}

/// Projects the expression features on a fixed direction so every output
/// coordinate feeds the checked scalar.
fn weighted(v: &Array1<f64>) -> f64 {
    v.iter().enumerate().map(|(k, x)| x * (1.0 + 0.1 * k as f64)).sum()
}

#[test]
fn expression_encoder_gradient() {
    for seed in 0..5 {
        let catalog = small_world(seed, 6, 0.3, 4).catalog;
        let item = &catalog.groups()[0][1].expression;
        let params = random_params(&catalog, seed);
        let enc = ExpressionEncoding::new(item, &params).unwrap();
        let d_out = Array1::from_shape_fn(enc.features.len(), |k| 1.0 + 0.1 * k as f64);
        let mut grads = EncoderParams::zeros(params.dims());
        enc.backward(&LinearContext, &d_out, &params, &mut grads);
        let numeric = numeric_gradient(&params, STEP, |p| weighted(&ExpressionEncoding::new(item, p).unwrap().features));
        compare_gradients(&grads, &numeric, RTOL, ATOL).unwrap();
        assert!(grads.context_proj.iter().any(|&g| g != 0.0));
    }
}

#[test]
fn region_encoder_gradient_including_guide() {
    for seed in 0..5 {
        let catalog = small_world(seed, 6, 0.3, 4).catalog;
        let region = &catalog.groups()[1][0].region;
        let params = random_params(&catalog, seed + 100);
        let guide = Array1::from_shape_fn(6, |k| 0.3 - 0.1 * k as f64);
        let enc = RegionEncoding::new(region, &guide, &params).unwrap();
        let d_out = Array1::from_shape_fn(enc.features.len(), |k| 1.0 + 0.1 * k as f64);
        let mut grads = EncoderParams::zeros(params.dims());
        let d_guide = enc.backward(&d_out, &params, &mut grads);
        let numeric = numeric_gradient(&params, STEP, |p| weighted(&RegionEncoding::new(region, &guide, p).unwrap().features));
        compare_gradients(&grads, &numeric, RTOL, ATOL).unwrap();
        for k in 0..guide.len() {
            let mut g = guide.clone();
            g[k] += STEP;
            let plus = weighted(&RegionEncoding::new(region, &g, &params).unwrap().features);
            g[k] -= 2.0 * STEP;
            let minus = weighted(&RegionEncoding::new(region, &g, &params).unwrap().features);
            let n = (plus - minus) / (2.0 * STEP);
            assert!((d_guide[k] - n).abs() <= RTOL * n.abs().max(d_guide[k].abs()) + ATOL, "guide {k}: {} vs {n}", d_guide[k]);
        }
    }
}

#[test]
fn pair_score_gradient_end_to_end() {
    for seed in 0..5 {
        let catalog = small_world(seed, 6, 0.3, 4).catalog;
        let (r, e) = (&catalog.groups()[0][0].region, &catalog.groups()[0][2].expression);
        let params = random_params(&catalog, seed + 7);
        let enc = ExpressionEncoding::new(e, &params).unwrap();
        let (_, tape) = PairTape::forward(r, &enc, &params).unwrap();
        let mut grads = EncoderParams::zeros(params.dims());
        let ds = tape.backward(1.0, &params, &mut grads);
        enc.backward(&LinearContext, &ds, &params, &mut grads);
        let numeric = numeric_gradient(&params, STEP, |p| {
            let enc = ExpressionEncoding::new(e, p).unwrap();
            PairTape::forward(r, &enc, p).unwrap().0
        });
        compare_gradients(&grads, &numeric, RTOL, ATOL).unwrap();
    }
}
