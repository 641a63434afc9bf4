//! Random networks and weighted readouts for gradient checks.

use meadow::autodiff::{Tape, Unary, Var};
use meadow::nn::{DenseNet, Head, HeadActivation};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fd::{compare, max_relative_error};

pub fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(lo..hi))
}

/// Weighted sum so every output entry carries a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = tape.shape(x);
    let w = tape.constant(random(&mut rng, r, c, -1.0, 1.0));
    let p = tape.mul(x, w);
    tape.sum(p)
}

pub fn random_net(rng: &mut ChaCha8Rng) -> (DenseNet, usize, usize) {
    let d_row = rng.gen_range(1..4);
    let d_shared = rng.gen_range(0..4);
    let mut sizes = vec![d_row + d_shared];
    for _ in 0..rng.gen_range(1..3) {
        sizes.push(rng.gen_range(2..8));
    }
    let acts = [HeadActivation::Tanh, HeadActivation::Linear, HeadActivation::Softplus];
    let heads: Vec<Head> = (0..rng.gen_range(1..3))
        .map(|_| Head::new(rng.gen_range(1..3), acts[rng.gen_range(0..3)]))
        .collect();
    sizes.push(heads.iter().map(|h| h.width).sum());
    let net = DenseNet::xavier(&sizes, &heads, rng.gen()).unwrap();
    (net, d_row, d_shared)
}

/// Random network composed with normal-CDF and log terms; gradients wrt parameters and inputs.
pub fn random_network_case(seed: u64) -> f64 {
    max_relative_error(&random_network_pairs(seed))
}

/// `(analytic, numeric)` gradient pairs of one random case.
pub fn random_network_pairs(seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (net, d_row, d_shared) = random_net(&mut rng);
    let n = rng.gen_range(1..4);
    let mut inputs = vec![random(&mut rng, n, d_row, -1.0, 1.0)];
    if d_shared > 0 {
        inputs.push(random(&mut rng, 1, d_shared, -1.0, 1.0));
    }
    let n_inputs = inputs.len();
    let param_shapes: Vec<Array2<f64>> = net
        .weights()
        .iter()
        .zip(net.biases())
        .flat_map(|(w, b)| [w.clone(), b.clone()])
        .collect();
    inputs.extend(param_shapes);
    let build = |t: &mut Tape, v: &[Var]| {
        let layers = net.weights().len();
        let vars = meadow::nn::NetVars {
            weights: (0..layers).map(|l| v[n_inputs + 2 * l]).collect(),
            biases: (0..layers).map(|l| v[n_inputs + 2 * l + 1]).collect(),
        };
        let shared = (n_inputs > 1).then(|| v[1]);
        let heads = net.forward_tape(t, &vars, v[0], shared).unwrap();
        let mut total = t.scalar(0.0);
        for (h, &head) in heads.iter().enumerate() {
            let cdf = t.unary(head, Unary::NormalCdf);
            let s1 = weighted_sum(t, cdf, 100 + h as u64);
            let sq = t.square(head);
            let lg = t.offset(sq, 0.5);
            let lg = t.log(lg);
            let s2 = weighted_sum(t, lg, 200 + h as u64);
            let s3 = weighted_sum(t, head, 300 + h as u64);
            total = t.add(total, s1);
            total = t.add(total, s2);
            total = t.add(total, s3);
        }
        total
    };
    compare(&inputs, build)
}
