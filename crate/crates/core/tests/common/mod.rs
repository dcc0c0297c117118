//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod suites;

use logad::numeric::{Graph, NdArray, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArray<f64> {
    NdArray::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NdArray<f64> {
    NdArray::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Magnitude floor of the relative-error denominator. Together with the
/// 1e-4 tolerance this accepts absolute errors below 1e-8, above the
/// roundoff of a central difference on exactly-zero gradients.
pub const GRAD_FLOOR: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Configurations closer than this to a kink are redrawn by the caller.
pub const KINK_MARGIN: f64 = 1e-3;

/// Kink distance of the graph `f` builds on `inputs`.
pub fn kink_distance(inputs: &[NdArray<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone(), false)).collect();
    f(&mut g, &vars);
    g.kink_distance()
}

/// Largest element-wise relative error between reverse-mode gradients of
/// `f` and central differences, over every input marked differentiable.
pub fn gradcheck(
    inputs: &[(NdArray<f64>, bool)],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |vals: &[NdArray<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .zip(inputs)
            .map(|(v, (_, d))| g.leaf(v.clone(), *d))
            .collect();
        let out = f(&mut g, &vars);
        (g, vars, out)
    };
    let base: Vec<NdArray<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (g, vars, out) = eval(&base);
    assert!(g.value(out).is_scalar(), "gradcheck target must be scalar");
    assert!(
        g.kink_distance() > KINK_MARGIN,
        "configuration lies within {KINK_MARGIN} of a ReLU/hinge kink; redraw it"
    );
    let grads = g.backward(out).expect("backward");

    let mut worst = 0.0f64;
    for (k, (value, diff)) in inputs.iter().enumerate() {
        if !*diff {
            continue;
        }
        let analytic = grads
            .get(vars[k])
            .map(|a| a.data().to_vec())
            .unwrap_or_else(|| vec![0.0; value.len()]);
        for i in 0..value.len() {
            let mut probe = base.clone();
            probe[k].data_mut()[i] += FD_STEP;
            let (gp, _, op) = eval(&probe);
            let plus = gp.value(op).data()[0];
            probe[k].data_mut()[i] -= 2.0 * FD_STEP;
            let (gm, _, om) = eval(&probe);
            let minus = gm.value(om).data()[0];
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

/// `sum(x * r)` for a fixed random `r`, turning any node into a scalar.
pub fn probe_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let r = normal(&mut rng(seed), &shape);
    let y = g.mul_const(x, &r).expect("probe shape");
    g.sum(y)
}
