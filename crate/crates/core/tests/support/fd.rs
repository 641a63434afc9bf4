//! Central finite-difference gradient oracle for tape-built scalar functions.

use meadow::autodiff::{Tape, Var};
use ndarray::Array2;

pub const STEP: f64 = 1e-5;

/// Evaluates `build` on fresh tapes and compares the tape gradient of every input coordinate
/// with a central difference. Returns `(analytic, numeric)` pairs.
pub fn compare<F>(inputs: &[Array2<f64>], build: F) -> Vec<(f64, f64)>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out, None).expect("backward");
    let eval = |xs: &[Array2<f64>]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.constant(a.clone())).collect();
        let o = build(&mut t, &vs);
        t.scalar_value(o)
    };
    let mut pairs = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k], input.dim());
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let (r, c) = (idx / input.ncols(), idx % input.ncols());
            plus[k][[r, c]] += STEP;
            minus[k][[r, c]] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            pairs.push((analytic[[r, c]], numeric));
        }
    }
    pairs
}

/// Central differences at `STEP` carry roundoff near `1e-16 |f| / STEP`; gradients below this
/// scale are compared against it instead of their own magnitude.
pub const FLOOR: f64 = 1e-6;

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)` over all coordinates.
pub fn max_relative_error(pairs: &[(f64, f64)]) -> f64 {
    pairs
        .iter()
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR))
        .fold(0.0, f64::max)
}
