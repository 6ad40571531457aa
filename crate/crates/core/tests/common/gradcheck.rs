//! Central finite-difference gradient checks for tape ops.

use cirrus::tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Builds the op under test from its input vars and returns its output.
pub type Build<'a, T> = dyn Fn(&mut Tape<T>, &[Var]) -> Var + 'a;

/// Reduces `out` to a scalar with a fixed random projection so every output
/// element contributes to the checked loss.
fn project<T: Real>(tape: &mut Tape<T>, out: Var, projection: &Tensor<T>) -> Var {
    let n = tape.value(out).numel();
    if n == 1 {
        return out;
    }
    let flat = tape.reshape(out, &[1, n]).unwrap();
    let w = tape.constant(projection.clone().reshape(&[n, 1]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]));
    tape.fully_connected(flat, w, b).unwrap()
}

fn loss_at<T: Real>(inputs: &[Tensor<T>], build: &Build<'_, T>, projection: &Tensor<T>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = project(&mut tape, out, projection);
    tape.value(loss).data()[0].to_f64().unwrap()
}

/// Largest relative error between backward gradients and central differences
/// over up to `samples_per_input` coordinates of each input. The relative
/// error is `|a - n| / max(|a|, |n|, floor)`; `floor` keeps near-zero
/// gradient entries from inflating the ratio.
pub fn max_relative_error<T: Real>(
    inputs: &[Tensor<T>],
    build: &Build<'_, T>,
    rng: &mut ChaCha8Rng,
    h: f64,
    floor: f64,
    samples_per_input: usize,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let n_out = tape.value(out).numel();
    let projection = Tensor::from_fn(&[n_out], |_| T::from_f64(rng.gen_range(-1.0..1.0)).unwrap());
    let loss = project(&mut tape, out, &projection);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).expect("gradient for every input");
        assert_eq!(analytic.shape(), input.shape());
        let n = input.numel();
        let picks: Vec<usize> = if n <= samples_per_input {
            (0..n).collect()
        } else {
            (0..samples_per_input).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let hv = T::from_f64(h).unwrap();
            plus[i].data_mut()[j] += hv;
            minus[i].data_mut()[j] -= hv;
            let numeric = (loss_at(&plus, build, &projection) - loss_at(&minus, build, &projection)) / (2.0 * h);
            let a = analytic.data()[j].to_f64().unwrap();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

pub fn random_tensor<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(lo..hi)).unwrap())
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn away_from_zero<T: Real>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let mag: f64 = rng.gen_range(0.05..2.0);
        T::from_f64(if rng.gen_bool(0.5) { mag } else { -mag }).unwrap()
    })
}
