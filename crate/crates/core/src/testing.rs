//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: impl Into<Vec<usize>>, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Largest `|analytic − central difference| / max(1, |analytic|)` over every
/// element of every input, with step `1e-5`.
pub fn grad_check(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor<f64>]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let out = build(&mut t, &vars);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let loss = build(&mut t, &vars);
    t.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = t.grad(*v).unwrap().data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] += h;
            let up = eval(&xs);
            xs[k].data_mut()[i] -= 2.0 * h;
            let down = eval(&xs);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    worst
}

/// Dot product of a tensor with fixed pseudo-random weights, making a scalar
/// loss whose gradient exercises every output element.
pub fn probe(t: &mut Tape<f64>, x: Var, seed: u64) -> Var {
    let shape = t.shape(x).to_vec();
    let mut r = rng(seed);
    let w = t.constant(Tensor::uniform(shape, -1.0, 1.0, &mut r));
    let p = t.mul(x, w).unwrap();
    t.sum(p)
}

/// [`grad_check`] over every trainable entry of a parameter store, with the
/// loss built inside a train-mode session.
pub fn store_grad_check(
    store: &crate::params::ParamStore<f64>,
    build: impl Fn(&mut crate::nn::Session<'_, f64>) -> Var,
) -> f64 {
    use crate::nn::{Mode, Session};
    let eval = |st: &crate::params::ParamStore<f64>| {
        let mut st = st.clone();
        let mut s = Session::new(&mut st, Mode::Train);
        let l = build(&mut s);
        s.value(l).item()
    };
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut s = Session::new(&mut analytic, Mode::Train);
        let l = build(&mut s);
        s.backward(l).unwrap();
    }
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, e) in analytic.entries().iter().enumerate() {
        if !e.kind.trainable() {
            continue;
        }
        for i in 0..e.value.len() {
            let mut st = store.clone();
            st.entries_mut()[k].value.data_mut()[i] += h;
            let up = eval(&st);
            st.entries_mut()[k].value.data_mut()[i] -= 2.0 * h;
            let down = eval(&st);
            let fd = (up - down) / (2.0 * h);
            let a = e.grad.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    worst
}
