//! Dense feed-forward networks with hand-derived backpropagation.
//!
//! Forward passes that need gradients go through [`Mlp::trace`], which keeps
//! every layer input and pre-activation in a [`Trace`]. The trace is owned by
//! the caller, so the same network can be applied several times within one
//! loss and each application backpropagated independently.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Negative-side slope of [`Activation::LeakyRelu`].
pub const LEAKY_RELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_RELU_SLOPE * x
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`, given the already computed output `y`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
            Activation::Sigmoid => 3,
            Activation::Tanh => 4,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::LeakyRelu,
            3 => Activation::Sigmoid,
            4 => Activation::Tanh,
            _ => return None,
        })
    }
}

/// One affine layer `y = act(x·Wᵀ + b)` with `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weight: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::shape(
                "DenseLayer::new",
                format!("bias of length {} for {} outputs", bias.len(), weight.rows()),
            ));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        DenseLayer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite glorot bound");
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| dist.sample(rng));
        DenseLayer {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Matrix {
        &mut self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        let mut pre = x.matmul_t(&self.weight)?;
        let out = self.out_dim();
        for row in pre.as_mut_slice().chunks_mut(out.max(1)) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(pre)
    }
}

/// Record of one forward pass: the input of every layer, every pre-activation,
/// and the final output.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    output: Matrix,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn into_output(self) -> Matrix {
        self.output
    }

    pub fn batch(&self) -> usize {
        self.output.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients for every layer of an [`Mlp`], in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        self.add_scaled(other, 1.0)
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, c: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "MlpGrads::add_scaled",
                format!("{} vs {} layers", self.layers.len(), other.layers.len()),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.weight.shape() != b.weight.shape() {
                return Err(Error::shape(
                    "MlpGrads::add_scaled",
                    format!("{:?} vs {:?}", a.weight.shape(), b.weight.shape()),
                ));
            }
            for (x, y) in a.weight.as_mut_slice().iter_mut().zip(b.weight.as_slice()) {
                *x += c * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += c * y;
            }
        }
        Ok(())
    }

    /// Gradient slices in the same order as [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&x| x == 0.0))
    }
}

/// Feed-forward stack of dense layers whose widths chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("Mlp::new", "network needs at least one layer"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::shape(
                    "Mlp::new",
                    format!(
                        "layer {k} emits {} values but layer {} takes {}",
                        pair[0].out_dim(),
                        k + 1,
                        pair[1].in_dim()
                    ),
                ));
            }
        }
        Ok(Mlp { layers })
    }

    /// Glorot-initialized network over `widths = [in, hidden..., out]`.
    pub fn glorot<R: Rng + ?Sized>(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(widths, hidden, output, |i, o, a| DenseLayer::glorot(i, o, a, rng))
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        Self::build(widths, hidden, output, DenseLayer::zeros)
    }

    fn build(
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        mut make: impl FnMut(usize, usize, Activation) -> DenseLayer,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::shape(
                "Mlp::build",
                format!("invalid layer widths {widths:?}"),
            ));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n { output } else { hidden };
                make(widths[k], widths[k + 1], act)
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[in, hidden..., out]`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    fn check_input(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                op,
                format!("input has {} columns, network expects {}", x.cols(), self.in_dim()),
            ));
        }
        Ok(())
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x, "Mlp::forward")?;
        let mut h = x.clone();
        for layer in &self.layers {
            let act = layer.activation;
            h = layer.pre_activation(&h)?.map(|v| act.apply(v));
        }
        Ok(h)
    }

    /// Forward pass that keeps what [`Mlp::backward`] needs.
    pub fn trace(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x, "Mlp::trace")?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let p = layer.pre_activation(&h)?;
            let act = layer.activation;
            let next = p.map(|v| act.apply(v));
            inputs.push(h);
            pre.push(p);
            h = next;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Chain rule through a recorded pass: returns parameter gradients and
    /// the gradient with respect to the network input.
    pub fn backward(&self, trace: &Trace, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        if trace.pre.len() != self.layers.len() {
            return Err(Error::State(format!(
                "trace has {} layers, network has {}",
                trace.pre.len(),
                self.layers.len()
            )));
        }
        if upstream.shape() != trace.output.shape() {
            return Err(Error::shape(
                "Mlp::backward",
                format!(
                    "upstream {:?} vs output {:?}",
                    upstream.shape(),
                    trace.output.shape()
                ),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre[k];
            let post: &Matrix = if k + 1 == self.layers.len() {
                &trace.output
            } else {
                &trace.inputs[k + 1]
            };
            let act = layer.activation;
            if act != Activation::Identity {
                for ((d, &x), &y) in delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(pre.as_slice())
                    .zip(post.as_slice())
                {
                    *d *= act.derivative(x, y);
                }
            }
            let weight = delta.t_matmul(&trace.inputs[k])?;
            let bias = delta.column_sums();
            let next = delta.matmul(&layer.weight)?;
            grads.push(LayerGrads { weight, bias });
            delta = next;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Mutable parameter slices: weight then bias for each layer in order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(
                "Mlp::set_params_flat",
                format!("{} values for {} parameters", flat.len(), self.param_count()),
            ));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Stateful forward/backward pairing for callers that prefer the classic
/// "forward caches, backward consumes" protocol.
#[derive(Debug)]
pub struct MlpSession<'a> {
    net: &'a Mlp,
    last: Option<Trace>,
}

impl<'a> MlpSession<'a> {
    pub fn new(net: &'a Mlp) -> Self {
        MlpSession { net, last: None }
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        let trace = self.net.trace(x)?;
        let out = trace.output.clone();
        self.last = Some(trace);
        Ok(out)
    }

    pub fn backward(&self, upstream: &Matrix) -> Result<(MlpGrads, Matrix)> {
        let trace = self
            .last
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        self.net.backward(trace, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GRAD_CHECK_STEP, GRAD_CHECK_TOLERANCE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(weight: &[&[f64]], bias: &[f64], act: Activation) -> Mlp {
        Mlp::new(vec![DenseLayer::new(
            Matrix::from_rows(weight).unwrap(),
            bias.to_vec(),
            act,
        )
        .unwrap()])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = single(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Identity);
        let x = Matrix::from_rows(&[[3.0, -1.0]]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn affine_layer_by_hand() {
        let net = single(&[&[1.0, 2.0], &[0.0, 1.0]], &[1.0, 0.0], Activation::Identity);
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(
            net.forward(&x).unwrap(),
            Matrix::from_rows(&[[4.0, 1.0]]).unwrap()
        );
    }

    #[test]
    fn relu_clamps_negatives() {
        let net = single(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.0, 0.0], Activation::Relu);
        let x = Matrix::from_rows(&[[-5.0, 2.0]]).unwrap();
        assert_eq!(
            net.forward(&x).unwrap(),
            Matrix::from_rows(&[[0.0, 2.0]]).unwrap()
        );
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = single(&[&[1.0, 0.0]], &[0.0], Activation::Identity);
        let x = Matrix::zeros(1, 3);
        assert!(matches!(net.forward(&x), Err(Error::Shape { .. })));
        assert!(matches!(net.trace(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let a = DenseLayer::zeros(2, 3, Activation::Relu);
        let b = DenseLayer::zeros(4, 1, Activation::Identity);
        assert!(Mlp::new(vec![a, b]).is_err());
    }

    #[test]
    fn scalar_linear_derivative() {
        // y = w·x with x = 3 and loss = y gives dL/dw = 3.
        let net = single(&[&[2.0]], &[0.0], Activation::Identity);
        let x = Matrix::from_rows(&[[3.0]]).unwrap();
        let mut session = MlpSession::new(&net);
        session.forward(&x).unwrap();
        let (g, dx) = session.backward(&Matrix::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.layers[0].weight.get(0, 0), 3.0);
        assert_eq!(g.layers[0].bias[0], 1.0);
        assert_eq!(dx.get(0, 0), 2.0);
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let net = single(&[&[2.0]], &[0.0], Activation::Identity);
        let session = MlpSession::new(&net);
        assert!(matches!(
            session.backward(&Matrix::filled(1, 1, 1.0)),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn dead_relu_blocks_gradient() {
        let net = single(&[&[1.0]], &[-10.0], Activation::Relu);
        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let trace = net.trace(&x).unwrap();
        let (g, dx) = net.backward(&trace, &Matrix::filled(1, 1, 1.0)).unwrap();
        assert!(g.is_zero());
        assert_eq!(dx.get(0, 0), 0.0);
    }

    #[test]
    fn two_identity_layers_compose_to_weight_product() {
        let w1 = Matrix::from_rows(&[[1.0, 2.0, 0.5], [-1.0, 0.0, 3.0]]).unwrap();
        let w2 = Matrix::from_rows(&[[2.0, 1.0], [0.0, -1.0], [1.0, 1.0]]).unwrap();
        let b1 = vec![0.5, -0.25];
        let b2 = vec![1.0, 0.0, -2.0];
        let net = Mlp::new(vec![
            DenseLayer::new(w1.clone(), b1.clone(), Activation::Identity).unwrap(),
            DenseLayer::new(w2.clone(), b2.clone(), Activation::Identity).unwrap(),
        ])
        .unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.25], [0.0, 1.0, 1.0]]).unwrap();
        let got = net.forward(&x).unwrap();

        // y = x (W2 W1)ᵀ + (W2 b1 + b2)
        let combined = w2.matmul(&w1).unwrap();
        let b1m = Matrix::from_vec(2, 1, b1).unwrap();
        let bias = w2.matmul(&b1m).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let expect = crate::tensor::dot(x.row(r), combined.row(c)) + bias.get(c, 0) + b2[c];
                assert!((got.get(r, c) - expect).abs() < 1e-12);
            }
        }
    }

    fn check_net(widths: &[usize], hidden: Activation, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::glorot(widths, hidden, Activation::Identity, &mut rng).unwrap();
        let x = Matrix::from_fn(4, widths[0], |_, _| rng.random_range(-1.0..1.0));
        let target = Matrix::from_fn(4, *widths.last().unwrap(), |_, _| rng.random_range(-1.0..1.0));
        let params = net.params_flat();
        let report = grad_check(
            |p: &[f64]| {
                let mut n = net.clone();
                n.set_params_flat(p)?;
                let t = n.trace(&x)?;
                let diff = t.output().sub(&target)?;
                let loss = 0.5 * diff.sum_squares();
                let (g, _) = n.backward(&t, &diff)?;
                Ok((loss, g.flat()))
            },
            &params,
            GRAD_CHECK_STEP,
        )
        .unwrap();
        report.max_rel_error
    }

    #[test]
    fn backward_matches_finite_differences_for_every_activation() {
        for (seed, act) in [
            Activation::Relu,
            Activation::LeakyRelu,
            Activation::Sigmoid,
            Activation::Tanh,
            Activation::Identity,
        ]
        .into_iter()
        .enumerate()
        {
            let err = check_net(&[3, 5, 4, 2], act, seed as u64);
            assert!(err < GRAD_CHECK_TOLERANCE, "{act:?}: {err}");
        }
    }

    proptest! {
        #[test]
        fn forward_is_deterministic(seed in 0u64..1000, batch in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::glorot(&[4, 7, 3], Activation::Relu, Activation::Identity, &mut rng).unwrap();
            let x = Matrix::from_fn(batch, 4, |_, _| rng.random_range(-2.0..2.0));
            let a = net.forward(&x).unwrap();
            let b = net.forward(&x).unwrap();
            prop_assert_eq!(a.as_slice(), b.as_slice());
            let traced = net.trace(&x).unwrap();
            prop_assert_eq!(traced.output().as_slice(), a.as_slice());
        }

        #[test]
        fn analytic_gradients_match_finite_differences(seed in 0u64..10_000) {
            let err = check_net(&[3, 6, 2], Activation::Tanh, seed);
            prop_assert!(err < GRAD_CHECK_TOLERANCE);
        }
    }
}
