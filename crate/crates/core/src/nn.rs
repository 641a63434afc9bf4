//! Dense feed-forward networks, their optimizer, and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softplus, Gradients, Tape, Unary, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadActivation {
    Tanh,
    Linear,
    Softplus,
}

impl HeadActivation {
    fn tag(self) -> &'static str {
        match self {
            HeadActivation::Tanh => "tanh",
            HeadActivation::Linear => "linear",
            HeadActivation::Softplus => "softplus",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "tanh" => Ok(HeadActivation::Tanh),
            "linear" => Ok(HeadActivation::Linear),
            "softplus" => Ok(HeadActivation::Softplus),
            other => Err(Error::Checkpoint(format!("unknown activation {other:?}"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            HeadActivation::Tanh => x.tanh(),
            HeadActivation::Linear => x,
            HeadActivation::Softplus => softplus(x),
        }
    }
}

/// Output slice of the last layer with its activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head {
    pub width: usize,
    pub activation: HeadActivation,
}

impl Head {
    pub fn new(width: usize, activation: HeadActivation) -> Self {
        Self { width, activation }
    }
}

/// Multi-layer perceptron with leaky-ReLU hidden layers and activated output heads.
///
/// The input may be split into per-row features and features shared by every row (such as the
/// mean-field vector); the first layer treats their concatenation as one input.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    heads: Vec<Head>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array2<f64>>,
}

/// Tape handles for a network's parameters.
#[derive(Clone, Debug)]
pub struct NetVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl DenseNet {
    /// Zero-initialized network. `sizes` lists input, hidden and output widths; the output width
    /// must equal the sum of head widths.
    pub fn zeros(sizes: &[usize], heads: &[Head]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let out: usize = heads.iter().map(|h| h.width).sum();
        if out != *sizes.last().unwrap() {
            return Err(Error::ShapeMismatch { expected: *sizes.last().unwrap(), got: out });
        }
        let weights = sizes.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect();
        let biases = sizes.windows(2).map(|w| Array2::zeros((1, w[1]))).collect();
        Ok(Self { sizes: sizes.to_vec(), heads: heads.to_vec(), weights, biases })
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(sizes: &[usize], heads: &[Head], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(sizes, heads)?;
        net.init_xavier(seed);
        Ok(net)
    }

    pub fn init_xavier(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut self.weights {
            let (fan_in, fan_out) = w.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn heads(&self) -> &[Head] {
        &self.heads
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Array2<f64>] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameters in checkpoint order: per layer, weights row-major, then biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch { expected: self.param_count(), got: flat.len() });
        }
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for v in w.iter_mut().chain(b.iter_mut()) {
                *v = flat[pos];
                pos += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, rows: &Array2<f64>, shared: Option<&Array2<f64>>) -> Result<()> {
        let shared_width = shared.map_or(0, |s| s.ncols());
        if let Some(s) = shared {
            if s.nrows() != 1 {
                return Err(Error::ShapeMismatch { expected: 1, got: s.nrows() });
            }
        }
        let width = rows.ncols() + shared_width;
        if width != self.input_width() {
            return Err(Error::ShapeMismatch { expected: self.input_width(), got: width });
        }
        if rows.iter().chain(shared.into_iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    /// Evaluates the network on `rows` (`n x d_row`) with optional shared features
    /// (`1 x d_shared`). Returns one `n x width` matrix per head.
    pub fn forward(
        &self,
        rows: &Array2<f64>,
        shared: Option<&Array2<f64>>,
    ) -> Result<Vec<Array2<f64>>> {
        self.check_input(rows, shared)?;
        let d_row = rows.ncols();
        let w0 = &self.weights[0];
        let mut h = rows.dot(&w0.slice(s![..d_row, ..])) + &self.biases[0];
        if let Some(sh) = shared {
            h += &sh.dot(&w0.slice(s![d_row.., ..]));
        }
        for (w, b) in self.weights.iter().zip(&self.biases).skip(1) {
            h.mapv_inplace(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
            h = h.dot(w) + b;
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut col = 0;
        for head in &self.heads {
            let act = head.activation;
            outs.push(h.slice(s![.., col..col + head.width]).mapv(|v| act.apply(v)));
            col += head.width;
        }
        Ok(outs)
    }

    /// Places the parameters on the tape, differentiable or constant.
    pub fn record(&self, tape: &mut Tape, differentiable: bool) -> NetVars {
        let mut put = |a: &Array2<f64>| {
            if differentiable {
                tape.param(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let weights = self.weights.iter().map(&mut put).collect();
        let biases = self.biases.iter().map(&mut put).collect();
        NetVars { weights, biases }
    }

    /// Recorded forward pass; same semantics as [`forward`](Self::forward).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        rows: Var,
        shared: Option<Var>,
    ) -> Result<Vec<Var>> {
        let (n, d_row) = tape.shape(rows);
        let d_shared = shared.map_or(0, |s| tape.shape(s).1);
        if d_row + d_shared != self.input_width() {
            return Err(Error::ShapeMismatch { expected: self.input_width(), got: d_row + d_shared });
        }
        let w0 = vars.weights[0];
        let mut h = if d_shared > 0 {
            let w_row = tape.slice_rows(w0, 0, d_row);
            let w_shared = tape.slice_rows(w0, d_row, d_row + d_shared);
            let hr = tape.matmul(rows, w_row);
            let hs = tape.matmul(shared.expect("shared input"), w_shared);
            let hs = tape.add(hs, vars.biases[0]);
            tape.add_row(hr, hs)
        } else {
            let hr = tape.matmul(rows, w0);
            tape.add_row(hr, vars.biases[0])
        };
        for (w, b) in vars.weights.iter().zip(&vars.biases).skip(1) {
            let a = tape.unary(h, Unary::LeakyRelu);
            let z = tape.matmul(a, *w);
            h = tape.add_row(z, *b);
        }
        debug_assert_eq!(tape.shape(h).0, n);
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut col = 0;
        for head in &self.heads {
            let slice = if self.heads.len() == 1 {
                h
            } else {
                tape.slice_cols(h, col, col + head.width)
            };
            outs.push(match head.activation {
                HeadActivation::Linear => slice,
                HeadActivation::Tanh => tape.unary(slice, Unary::Tanh),
                HeadActivation::Softplus => tape.unary(slice, Unary::Softplus),
            });
            col += head.width;
        }
        Ok(outs)
    }

    /// Flattened gradient in [`params_flat`](Self::params_flat) order.
    pub fn grads_flat(&self, grads: &Gradients, vars: &NetVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.extend(grads.get_or_zeros(vars.weights[l], w.dim()).iter());
            out.extend(grads.get_or_zeros(vars.biases[l], b.dim()).iter());
        }
        out
    }

    fn arch_line(&self) -> String {
        let sizes: Vec<String> = self.sizes.iter().map(usize::to_string).collect();
        let mut tags = vec!["leaky-relu".to_string()];
        tags.extend(self.heads.iter().map(|h| format!("{}:{}", h.activation.tag(), h.width)));
        format!("arch: {} {}", sizes.join(","), tags.join(","))
    }

    /// Text checkpoint: architecture header, then one parameter per line.
    pub fn to_checkpoint(&self) -> String {
        let mut out = self.arch_line();
        out.push('\n');
        for p in self.params_flat() {
            writeln!(out, "{p:e}").expect("write to string");
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
        let body = header
            .strip_prefix("arch: ")
            .ok_or_else(|| Error::Checkpoint(format!("bad header {header:?}")))?;
        let (sizes, tags) = body
            .split_once(' ')
            .ok_or_else(|| Error::Checkpoint(format!("bad header {header:?}")))?;
        let sizes = sizes
            .split(',')
            .map(|s| s.parse::<usize>().map_err(|e| Error::Checkpoint(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut tags = tags.split(',');
        if tags.next() != Some("leaky-relu") {
            return Err(Error::Checkpoint("unsupported hidden activation".into()));
        }
        let heads = tags
            .map(|t| {
                let (act, width) =
                    t.split_once(':').ok_or_else(|| Error::Checkpoint(format!("bad head {t:?}")))?;
                let width = width.parse().map_err(|_| Error::Checkpoint(format!("bad head {t:?}")))?;
                Ok(Head::new(width, HeadActivation::from_tag(act)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&sizes, &heads)?;
        let params = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Checkpoint(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        net.set_params_flat(&params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; params],
            v: vec![0.0; params],
            t: 0,
        }
    }

    /// One descent step on `params` along `grads`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch { expected: self.m.len(), got: grads.len() });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            *p *= 1.0 - self.lr * self.weight_decay;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Rescales `grads` to L2 norm at most `max_norm`. Returns the norm before clipping and
/// whether clipping happened.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Stacks `1 x m` rows into an `n x m` matrix.
pub fn stack_rows(rows: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("rows share a width")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&[3, 4, 1], &[Head::new(1, HeadActivation::Linear)]).unwrap();
        let out = net.forward(&array![[1.0, -2.0, 3.0]], None).unwrap();
        assert_eq!(out[0][[0, 0]], 0.0);
    }

    #[test]
    fn identity_layer_tanh_head() {
        let mut net = DenseNet::zeros(&[1, 1], &[Head::new(1, HeadActivation::Tanh)]).unwrap();
        net.weights_mut()[0][[0, 0]] = 1.0;
        assert_eq!(net.forward(&array![[0.0]], None).unwrap()[0][[0, 0]], 0.0);
    }

    #[test]
    fn softplus_head_at_zero() {
        let net = DenseNet::zeros(&[2, 1], &[Head::new(1, HeadActivation::Softplus)]).unwrap();
        let v = net.forward(&array![[0.0, 0.0]], None).unwrap()[0][[0, 0]];
        assert!((v - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_wrong_width_and_nan() {
        let net = DenseNet::zeros(&[2, 1], &[Head::new(1, HeadActivation::Linear)]).unwrap();
        assert!(matches!(net.forward(&array![[0.0]], None), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            net.forward(&array![[f64::NAN, 0.0]], None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn xavier_is_deterministic_and_bounded() {
        let heads = [Head::new(2, HeadActivation::Linear)];
        let a = DenseNet::xavier(&[5, 7, 2], &heads, 11).unwrap();
        let b = DenseNet::xavier(&[5, 7, 2], &heads, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.biases().iter().all(|b| b.iter().all(|v| *v == 0.0)));
        for w in a.weights() {
            let bound = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn adamw_examples() {
        let mut p = vec![1.0, -2.0];
        let mut opt = AdamW::new(2, 0.1, 0.0);
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut opt = AdamW::new(2, 0.1, 0.5);
        opt.step(&mut p, &[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15 && (p[1] + 1.9).abs() < 1e-15);
        let mut q = vec![0.0];
        let mut opt = AdamW::new(1, 0.01, 0.0);
        opt.step(&mut q, &[3.0]).unwrap();
        assert!((q[0] + 0.01).abs() < 1e-9);
        assert!(opt.step(&mut q, &[f64::NAN]).is_err());
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![0.3, 0.4];
        assert_eq!(clip_global_norm(&mut g, 1.0), (0.5, false));
        assert_eq!(g, vec![0.3, 0.4]);
        let mut g = vec![3.0, 4.0];
        clip_global_norm(&mut g, 1.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let heads = [Head::new(1, HeadActivation::Tanh), Head::new(2, HeadActivation::Softplus)];
        let net = DenseNet::xavier(&[4, 6, 3], &heads, 5).unwrap();
        let text = net.to_checkpoint();
        assert!(text.starts_with("arch: 4,6,3 leaky-relu,tanh:1,softplus:2\n"));
        assert_eq!(DenseNet::from_checkpoint(&text).unwrap(), net);
    }

    #[test]
    fn split_input_equals_concatenated_input() {
        let heads = [Head::new(2, HeadActivation::Linear)];
        let net = DenseNet::xavier(&[5, 8, 2], &heads, 2).unwrap();
        let rows = array![[0.1, 0.2], [0.3, -0.4], [0.5, 0.9]];
        let shared = array![[0.7, -0.1, 0.2]];
        let full = array![
            [0.1, 0.2, 0.7, -0.1, 0.2],
            [0.3, -0.4, 0.7, -0.1, 0.2],
            [0.5, 0.9, 0.7, -0.1, 0.2]
        ];
        let a = net.forward(&rows, Some(&shared)).unwrap();
        let b = net.forward(&full, None).unwrap();
        assert!((&a[0] - &b[0]).iter().all(|d| d.abs() < 1e-14));

        let mut tape = Tape::new();
        let vars = net.record(&mut tape, false);
        let r = tape.constant(rows);
        let sh = tape.constant(shared);
        let out = net.forward_tape(&mut tape, &vars, r, Some(sh)).unwrap();
        assert!((tape.value(out[0]) - &a[0]).iter().all(|d| d.abs() < 1e-14));
    }
}
