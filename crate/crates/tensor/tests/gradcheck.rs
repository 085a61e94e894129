//! Every differentiable op against central finite differences, in both
//! precisions.

use put_tensor::gradcheck::{check, op_cases, GradCheckReport};
use put_tensor::{Real, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
const TOL_F32: f64 = 1e-2;
const TOL_F64: f64 = 1e-4;

fn random<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64c(rng.random_range(lo..hi)))
}

fn run_all<T: Real>(tol: f64, floor: f64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    op_cases::<T>(|shape: &[usize], lo, hi| random(&mut rng, shape, lo, hi))
        .into_iter()
        .map(|(name, inputs, f)| (name, check(&inputs, EPS, floor, |t, v| f(t, v)).unwrap()))
        .filter(|(_, r)| r.max_rel_error > tol || r.checked == 0)
        .collect()
}

#[test]
fn every_op_matches_finite_differences_f64() {
    let failures = run_all::<f64>(TOL_F64, 1e-3);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn every_op_matches_finite_differences_f32() {
    let failures = run_all::<f32>(TOL_F32, 1e-1);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn two_layer_mlp_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs: Vec<Tensor<f64>> = vec![
        random(&mut rng, &[4, 3], -1.0, 1.0),
        random(&mut rng, &[3, 8], -1.0, 1.0),
        random(&mut rng, &[8], -0.5, 0.5),
        random(&mut rng, &[8, 2], -1.0, 1.0),
        random(&mut rng, &[2], -0.5, 0.5),
    ];
    let f = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let h = t.linear(v[0], v[1], Some(v[2]))?;
        let h = t.gelu(h)?;
        let y = t.linear(h, v[3], Some(v[4]))?;
        let y = t.square(y)?;
        t.mean(y)
    };
    let r64 = check(&inputs, EPS, 1e-3, f).unwrap();
    assert!(r64.max_rel_error < TOL_F64, "{r64:?}");
    let inputs32: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    let f32f = |t: &mut Tape<f32>, v: &[Var]| -> Result<Var> {
        let h = t.linear(v[0], v[1], Some(v[2]))?;
        let h = t.gelu(h)?;
        let y = t.linear(h, v[3], Some(v[4]))?;
        let y = t.square(y)?;
        t.mean(y)
    };
    let r32 = check(&inputs32, EPS, 1e-1, f32f).unwrap();
    assert!(r32.max_rel_error < TOL_F32, "{r32:?}");
}
