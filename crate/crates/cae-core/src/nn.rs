//! Minimal feed-forward machinery: dense layers, leaky-relu, MSE and
//! cross-entropy losses with analytic gradients, Adam, and a central
//! finite-difference gradient checker.

use crate::error::{CaeError, Result};
use crate::numcore::{sample_uniform, Matrix, Rng};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    LeakyRelu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
        }
    }
}

/// Fully connected layer; weights are in_dim x out_dim, applied as x.W + b.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Decoder architecture: hidden layer widths (empty = linear decoder) and the
/// output width.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderSpec {
    pub hidden_sizes: Vec<usize>,
    pub output_dim: usize,
}

impl DecoderSpec {
    pub fn linear(output_dim: usize) -> DecoderSpec {
        DecoderSpec {
            hidden_sizes: Vec::new(),
            output_dim,
        }
    }

    pub fn with_hidden(hidden_sizes: Vec<usize>, output_dim: usize) -> DecoderSpec {
        DecoderSpec {
            hidden_sizes,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_dim == 0 || self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(CaeError::Parameter(
                "decoder layer sizes must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Glorot-uniform initialized layer stack for a decoder spec: hidden layers
/// use leaky-relu, the output layer is identity.
pub fn init_layers(spec: &DecoderSpec, input_dim: usize, rng: &mut Rng) -> Result<Vec<DenseLayer>> {
    spec.validate()?;
    if input_dim == 0 {
        return Err(CaeError::Parameter(
            "decoder input width must be at least 1".into(),
        ));
    }
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&spec.hidden_sizes);
    dims.push(spec.output_dim);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = Matrix::from_fn(fan_in, fan_out, |_, _| {
            (2.0 * sample_uniform(rng) - 1.0) * lim
        });
        let activation = if l + 1 == dims.len() - 1 {
            Activation::Identity
        } else {
            Activation::LeakyRelu
        };
        layers.push(DenseLayer {
            weights,
            bias: vec![0.0; fan_out],
            activation,
        });
    }
    Ok(layers)
}

/// Per-layer inputs and pre-activations retained for backprop.
pub struct ForwardCache {
    pub inputs: Vec<Matrix>,
    pub preacts: Vec<Matrix>,
}

fn layer_forward(layer: &DenseLayer, input: &Matrix) -> Result<(Matrix, Matrix)> {
    if input.cols() != layer.in_dim() {
        return Err(CaeError::Shape(format!(
            "layer expects {} inputs, got {}",
            layer.in_dim(),
            input.cols()
        )));
    }
    let mut pre = input.matmul(&layer.weights)?;
    for i in 0..pre.rows() {
        let row = pre.row_mut(i);
        for (v, b) in row.iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    let out = pre.map(|x| layer.activation.apply(x));
    Ok((out, pre))
}

/// Row-wise application of the layer stack.
pub fn decoder_forward(layers: &[DenseLayer], input: &Matrix) -> Result<Matrix> {
    let mut x = input.clone();
    for layer in layers {
        x = layer_forward(layer, &x)?.0;
    }
    Ok(x)
}

pub fn decoder_forward_cached(
    layers: &[DenseLayer],
    input: &Matrix,
) -> Result<(Matrix, ForwardCache)> {
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(layers.len()),
        preacts: Vec::with_capacity(layers.len()),
    };
    let mut x = input.clone();
    for layer in layers {
        let (out, pre) = layer_forward(layer, &x)?;
        cache.inputs.push(x);
        cache.preacts.push(pre);
        x = out;
    }
    Ok((x, cache))
}

/// Parameter gradients for one layer.
pub struct LayerGrads {
    pub dw: Matrix,
    pub db: Vec<f64>,
}

/// Backprop through the stack. Returns per-layer gradients (in layer order)
/// and the gradient w.r.t. the stack's input.
pub fn decoder_backward(
    layers: &[DenseLayer],
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<(Vec<LayerGrads>, Matrix)> {
    let mut d_out = upstream.clone();
    let mut grads: Vec<LayerGrads> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate().rev() {
        let pre = &cache.preacts[l];
        if d_out.rows() != pre.rows() || d_out.cols() != pre.cols() {
            return Err(CaeError::Shape(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                d_out.rows(),
                d_out.cols(),
                pre.rows(),
                pre.cols()
            )));
        }
        let mut d_pre = d_out;
        for i in 0..d_pre.rows() {
            let pr = pre.row(i);
            for (g, &p) in d_pre.row_mut(i).iter_mut().zip(pr) {
                *g *= layer.activation.derivative(p);
            }
        }
        let dw = cache.inputs[l].transpose().matmul(&d_pre)?;
        let mut db = vec![0.0; layer.out_dim()];
        for i in 0..d_pre.rows() {
            for (b, &g) in db.iter_mut().zip(d_pre.row(i)) {
                *b += g;
            }
        }
        d_out = d_pre.matmul(&layer.weights.transpose())?;
        grads.push(LayerGrads { dw, db });
    }
    grads.reverse();
    Ok((grads, d_out))
}

/// Mean squared error over all entries: loss = sum((p-t)^2)/(n*d), gradient
/// w.r.t. predicted = 2(p-t)/(n*d).
pub fn mse_loss(predicted: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if predicted.rows() != target.rows() || predicted.cols() != target.cols() {
        return Err(CaeError::Shape(format!(
            "mse shapes differ: {}x{} vs {}x{}",
            predicted.rows(),
            predicted.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let nd = (predicted.rows() * predicted.cols()) as f64;
    let mut grad = Matrix::zeros(predicted.rows(), predicted.cols());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad
        .data_mut()
        .iter_mut()
        .zip(predicted.data())
        .zip(target.data())
    {
        let diff = p - t;
        loss += diff * diff;
        *g = 2.0 * diff / nd;
    }
    Ok((loss / nd, grad))
}

/// Mean cross-entropy of softmax(logits) against integer labels; gradient
/// w.r.t. logits = (softmax - one_hot)/n.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(CaeError::Shape(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = logits.rows();
    let c = logits.cols();
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for i in 0..n {
        let label = labels[i];
        if label >= c {
            return Err(CaeError::Data(format!(
                "label {} out of range for {} classes (row {})",
                label, c, i
            )));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &l in row {
            z += (l - m).exp();
        }
        let log_z = z.ln() + m;
        loss += log_z - row[label];
        let g = grad.row_mut(i);
        for (j, &l) in row.iter().enumerate() {
            let p = (l - log_z).exp();
            g[j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if logits.rows() == 0 {
        return 0.0;
    }
    let mut correct = 0usize;
    for i in 0..logits.rows() {
        if argmax(logits.row(i)) == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / logits.rows() as f64
}

/// Index of the largest value; ties break to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Adam optimizer state over a fixed list of parameter blocks.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(block_sizes: &[usize], learning_rate: f64) -> AdamState {
        AdamState {
            step: 0,
            first_moment: block_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            second_moment: block_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction across all parameter blocks.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(CaeError::Shape(format!(
                "adam has {} blocks, got {} params / {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (bi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != self.first_moment[bi].len() || g.len() != p.len() {
                return Err(CaeError::Shape(format!(
                    "adam block {} expects {} values, got {} params / {} grads",
                    bi,
                    self.first_moment[bi].len(),
                    p.len(),
                    g.len()
                )));
            }
            let m = &mut self.first_moment[bi];
            let v = &mut self.second_moment[bi];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Max over parameters of |analytic - central difference| / max(1, |analytic|).
/// The closure must return the loss and the full analytic gradient for the
/// given parameter vector, and must be deterministic (freeze any noise).
pub fn grad_check(f: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>), params: &[f64], h: f64) -> f64 {
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    let mut p = params.to_vec();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let (lp, _) = f(&p);
        p[i] = orig - h;
        let (lm, _) = f(&p);
        p[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        if err > worst {
            worst = err;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| 2.0 * sample_uniform(rng) - 1.0)
    }

    #[test]
    fn identity_network_passes_input_through() {
        let layer = DenseLayer {
            weights: Matrix::identity(3),
            bias: vec![0.0; 3],
            activation: Activation::Identity,
        };
        let mut rng = Rng::new(1);
        let x = rand_matrix(4, 3, &mut rng);
        let y = decoder_forward(&[layer], &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn constant_network_outputs_bias() {
        let hidden = DenseLayer {
            weights: Matrix::zeros(3, 5),
            bias: vec![0.0; 5],
            activation: Activation::LeakyRelu,
        };
        let out = DenseLayer {
            weights: Matrix::zeros(5, 2),
            bias: vec![7.0, -3.0],
            activation: Activation::Identity,
        };
        let mut rng = Rng::new(2);
        let x = rand_matrix(6, 3, &mut rng);
        let y = decoder_forward(&[hidden, out], &x).unwrap();
        for i in 0..6 {
            assert_eq!(y.row(i), &[7.0, -3.0]);
        }
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = Rng::new(3);
        let spec = DecoderSpec::with_hidden(vec![5, 4], 3);
        let layers = init_layers(&spec, 6, &mut rng).unwrap();
        let x = rand_matrix(7, 6, &mut rng);
        let y = decoder_forward(&layers, &x).unwrap();

        // independent re-implementation with plain loops
        for i in 0..x.rows() {
            let mut cur: Vec<f64> = x.row(i).to_vec();
            for layer in &layers {
                let mut next = vec![0.0; layer.out_dim()];
                for (j, nv) in next.iter_mut().enumerate() {
                    let mut s = layer.bias[j];
                    for (k, &xv) in cur.iter().enumerate() {
                        s += xv * layer.weights.get(k, j);
                    }
                    *nv = match layer.activation {
                        Activation::Identity => s,
                        Activation::LeakyRelu => {
                            if s > 0.0 {
                                s
                            } else {
                                0.2 * s
                            }
                        }
                    };
                }
                cur = next;
            }
            for (a, b) in y.row(i).iter().zip(&cur) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batch_forward_equals_stacked_rows() {
        let mut rng = Rng::new(4);
        let spec = DecoderSpec::with_hidden(vec![4], 3);
        let layers = init_layers(&spec, 5, &mut rng).unwrap();
        let x = rand_matrix(6, 5, &mut rng);
        let whole = decoder_forward(&layers, &x).unwrap();
        for i in 0..6 {
            let single = decoder_forward(&layers, &x.gather_rows(&[i]).unwrap()).unwrap();
            for (a, b) in whole.row(i).iter().zip(single.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_trivials() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (loss, grad) = mse_loss(&a, &a).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        let b = a.map(|x| x - 1.0);
        let (loss, grad) = mse_loss(&a, &b).unwrap();
        assert!((loss - 1.0).abs() < 1e-15);
        assert!(grad.data().iter().all(|&g| (g - 0.5).abs() < 1e-15));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let target = rand_matrix(3, 4, &mut rng);
        let p0 = rand_matrix(3, 4, &mut rng);
        let err = grad_check(
            &mut |p: &[f64]| {
                let pred = Matrix::from_vec(3, 4, p.to_vec()).unwrap();
                let (l, g) = mse_loss(&pred, &target).unwrap();
                (l, g.data().to_vec())
            },
            p0.data(),
            1e-5,
        );
        assert!(err < 1e-6, "max rel err {}", err);
    }

    #[test]
    fn cross_entropy_trivials() {
        let logits = Matrix::zeros(2, 5);
        let (loss, _) = cross_entropy_loss(&logits, &[0, 3]).unwrap();
        assert!((loss - (5.0f64).ln()).abs() < 1e-12);

        let mut sat = Matrix::zeros(1, 4);
        sat.set(0, 2, 50.0);
        let (loss, _) = cross_entropy_loss(&sat, &[2]).unwrap();
        assert!(loss < 1e-6);

        assert!(cross_entropy_loss(&logits, &[0, 5]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(6);
        let p0 = rand_matrix(4, 3, &mut rng);
        let labels = [2usize, 0, 1, 1];
        let err = grad_check(
            &mut |p: &[f64]| {
                let logits = Matrix::from_vec(4, 3, p.to_vec()).unwrap();
                let (l, g) = cross_entropy_loss(&logits, &labels).unwrap();
                (l, g.data().to_vec())
            },
            p0.data(),
            1e-5,
        );
        assert!(err < 1e-6, "max rel err {}", err);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut rng = Rng::new(7);
        let spec = DecoderSpec::with_hidden(vec![4], 3);
        let layers = init_layers(&spec, 5, &mut rng).unwrap();
        let x = rand_matrix(6, 5, &mut rng);
        let target = rand_matrix(6, 3, &mut rng);

        let flat0 = flatten(&layers);
        let err = grad_check(
            &mut |p: &[f64]| {
                let ls = unflatten(&layers, p);
                let (out, cache) = decoder_forward_cached(&ls, &x).unwrap();
                let (loss, dout) = mse_loss(&out, &target).unwrap();
                let (grads, _) = decoder_backward(&ls, &cache, &dout).unwrap();
                let mut flat = Vec::new();
                for g in &grads {
                    flat.extend_from_slice(g.dw.data());
                    flat.extend_from_slice(&g.db);
                }
                (loss, flat)
            },
            &flat0,
            1e-5,
        );
        assert!(err < 1e-5, "max rel err {}", err);
    }

    fn flatten(layers: &[DenseLayer]) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in layers {
            flat.extend_from_slice(l.weights.data());
            flat.extend_from_slice(&l.bias);
        }
        flat
    }

    fn unflatten(template: &[DenseLayer], flat: &[f64]) -> Vec<DenseLayer> {
        let mut out = Vec::with_capacity(template.len());
        let mut at = 0;
        for l in template {
            let wn = l.weights.rows() * l.weights.cols();
            let weights = Matrix::from_vec(
                l.weights.rows(),
                l.weights.cols(),
                flat[at..at + wn].to_vec(),
            )
            .unwrap();
            at += wn;
            let bias = flat[at..at + l.bias.len()].to_vec();
            at += l.bias.len();
            out.push(DenseLayer {
                weights,
                bias,
                activation: l.activation,
            });
        }
        out
    }

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let mut adam = AdamState::new(&[3], 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_first_step_moves_by_lr_sign() {
        let mut adam = AdamState::new(&[2], 1e-3);
        let mut p = vec![1.0, 1.0];
        adam.step(&mut [&mut p], &[&[0.4, -7.0]]).unwrap();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-7);
        assert!((p[1] - (1.0 + 1e-3)).abs() < 1e-7);
    }

    #[test]
    fn adam_matches_hand_unrolled_recurrence() {
        let grads = [0.3, -1.1, 0.7];
        let mut adam = AdamState::new(&[1], 0.01);
        let mut p = vec![0.5];
        for g in grads {
            adam.step(&mut [&mut p], &[&[g]]).unwrap();
        }

        // independent unroll
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let (mut m, mut v, mut q) = (0.0f64, 0.0f64, 0.5f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            q -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - q).abs() < 1e-12);
    }

    #[test]
    fn grad_check_on_quadratic() {
        let err = grad_check(
            &mut |p: &[f64]| {
                let loss = 0.5 * p.iter().map(|x| x * x).sum::<f64>();
                (loss, p.to_vec())
            },
            &[0.3, -1.2, 2.0],
            1e-5,
        );
        assert!(err < 1e-9, "err {}", err);
    }

    #[test]
    fn hidden_size_zero_rejected() {
        assert!(DecoderSpec::with_hidden(vec![0], 3).validate().is_err());
        assert!(DecoderSpec::linear(3).validate().is_ok());
    }
}
