//! Multi-layer perceptron with PReLU hidden activations and a linear output.
//!
//! Forward passes return a [`Tape`] holding each layer's input and
//! pre-activation. Tapes are single-use: [`MlpParams::backward`] consumes the
//! tape, and any mutation of the parameters after the forward pass makes the
//! tape stale. Stale tapes are rejected with [`Error::StaleTape`].

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::matrix::{gemm, DenseMatrix};
use super::params::ParamSet;
use crate::error::{Error, Result};

/// Initial PReLU slope for every channel.
pub const PRELU_INIT: f64 = 0.25;

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// One affine layer, `z = x Wᵀ + b`, optionally followed by PReLU.
///
/// `weight` has shape `(out, in)`. The same struct is used for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub prelu: Option<Vec<f64>>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zeros_like(&self) -> Layer {
        Layer {
            weight: DenseMatrix::zeros(self.out_dim(), self.in_dim()),
            bias: vec![0.0; self.bias.len()],
            prelu: self.prelu.as_ref().map(|s| vec![0.0; s.len()]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    layers: Vec<Layer>,
    version: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activation record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    version: u64,
    inputs: Vec<DenseMatrix>,
    pre: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, PReLU slopes at [`PRELU_INIT`].
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Layer {
                    weight: DenseMatrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                    prelu: (k + 2 < sizes.len()).then(|| vec![PRELU_INIT; fan_out]),
                }
            })
            .collect();
        Ok(Self {
            layers,
            version: next_version(),
        })
    }

    /// All weights and biases zero; PReLU slopes at [`PRELU_INIT`].
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| Layer {
                weight: DenseMatrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                prelu: (k + 2 < sizes.len()).then(|| vec![PRELU_INIT; w[1]]),
            })
            .collect();
        Ok(Self {
            layers,
            version: next_version(),
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(format!("layer {k}: bias length")));
            }
            let last = k + 1 == layers.len();
            match (&layer.prelu, last) {
                (Some(s), false) if s.len() == layer.out_dim() => {}
                (None, true) => {}
                _ => {
                    return Err(Error::shape(format!(
                        "layer {k}: hidden layers need one PReLU slope per channel, the output layer none"
                    )))
                }
            }
            if let Some(next) = layers.get(k + 1) {
                if next.in_dim() != layer.out_dim() {
                    return Err(Error::shape(format!(
                        "layer {k} outputs {} but layer {} expects {}",
                        layer.out_dim(),
                        k + 1,
                        next.in_dim()
                    )));
                }
            }
        }
        Ok(Self {
            layers,
            version: next_version(),
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to one layer. Invalidates outstanding tapes.
    pub fn layer_mut(&mut self, k: usize) -> &mut Layer {
        self.version = next_version();
        &mut self.layers[k]
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim()];
        sizes.extend(self.layers.iter().map(Layer::out_dim));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Zeroes the output layer's weights and bias, making the network
    /// output identically zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.len() - 1;
        let layer = self.layer_mut(last);
        layer.weight.fill(0.0);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = affine(layer, &x);
            if let Some(slope) = &layer.prelu {
                prelu_inplace(&mut z, slope);
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &DenseMatrix) -> Result<(DenseMatrix, Tape)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let z = affine(layer, &x);
            let mut a = z.clone();
            if let Some(slope) = &layer.prelu {
                prelu_inplace(&mut a, slope);
            }
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        Ok((
            x,
            Tape {
                version: self.version,
                inputs,
                pre,
            },
        ))
    }

    /// Exact gradients for one forward pass. Returns the parameter gradients
    /// and the gradient with respect to the forward input.
    pub fn backward(&self, tape: Tape, upstream: &DenseMatrix) -> Result<(GradientBuffer, DenseMatrix)> {
        let mut grads = GradientBuffer::zeros_like(self);
        let dx = self.backward_into(tape, upstream, &mut grads)?;
        Ok((grads, dx))
    }

    /// Like [`backward`](Self::backward) but adds into an existing buffer.
    pub fn backward_into(
        &self,
        tape: Tape,
        upstream: &DenseMatrix,
        grads: &mut GradientBuffer,
    ) -> Result<DenseMatrix> {
        if tape.version != self.version {
            return Err(Error::StaleTape {
                recorded: tape.version,
                current: self.version,
            });
        }
        if !grads.layers.iter().zip(&self.layers).all(|(g, p)| {
            g.weight.shape() == p.weight.shape() && g.prelu.is_some() == p.prelu.is_some()
        }) || grads.layers.len() != self.layers.len()
        {
            return Err(Error::shape("gradient buffer does not match parameters"));
        }
        let batch = tape.inputs[0].rows();
        if upstream.shape() != (batch, self.output_dim()) {
            return Err(Error::shape(format!(
                "upstream gradient is {:?}, forward output was {:?}",
                upstream.shape(),
                (batch, self.output_dim())
            )));
        }

        let mut delta = upstream.clone();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let g = &mut grads.layers[k];
            let z = &tape.pre[k];
            if let (Some(slope), Some(gslope)) = (&layer.prelu, g.prelu.as_mut()) {
                let cols = z.cols();
                let zs = z.as_slice();
                for (i, d) in delta.as_mut_slice().iter_mut().enumerate() {
                    let c = i % cols;
                    let zi = zs[i];
                    if zi > 0.0 {
                        continue;
                    }
                    gslope[c] += *d * zi;
                    *d *= slope[c];
                }
            }
            gemm(1.0, &delta, true, &tape.inputs[k], false, 1.0, &mut g.weight);
            for r in 0..delta.rows() {
                for (b, d) in g.bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            let mut dx = DenseMatrix::zeros(delta.rows(), layer.in_dim());
            gemm(1.0, &delta, false, &layer.weight, false, 0.0, &mut dx);
            delta = dx;
        }
        Ok(delta)
    }

    fn check_input(&self, input: &DenseMatrix) -> Result<()> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "MLP expects {} input features, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        Ok(())
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::config("an MLP needs at least an input and an output size"));
    }
    if sizes.contains(&0) {
        return Err(Error::config("layer sizes must be positive"));
    }
    Ok(())
}

fn affine(layer: &Layer, x: &DenseMatrix) -> DenseMatrix {
    let mut z = DenseMatrix::zeros(x.rows(), layer.out_dim());
    for r in 0..z.rows() {
        z.row_mut(r).copy_from_slice(&layer.bias);
    }
    gemm(1.0, x, false, &layer.weight, true, 1.0, &mut z);
    z
}

fn prelu_inplace(z: &mut DenseMatrix, slope: &[f64]) {
    let cols = z.cols();
    for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
        if *v <= 0.0 {
            *v *= slope[i % cols];
        }
    }
}

impl GradientBuffer {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn zero(&mut self) {
        for seg in self.segments_mut() {
            seg.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn layer_segments(layers: &[Layer]) -> Vec<&[f64]> {
    let mut out = Vec::with_capacity(layers.len() * 3);
    for l in layers {
        out.push(l.weight.as_slice());
        out.push(l.bias.as_slice());
        if let Some(s) = &l.prelu {
            out.push(s.as_slice());
        }
    }
    out
}

fn layer_segments_mut(layers: &mut [Layer]) -> Vec<&mut [f64]> {
    let mut out = Vec::with_capacity(layers.len() * 3);
    for l in layers {
        out.push(l.weight.as_mut_slice());
        out.push(l.bias.as_mut_slice());
        if let Some(s) = &mut l.prelu {
            out.push(s.as_mut_slice());
        }
    }
    out
}

impl ParamSet for MlpParams {
    fn segments(&self) -> Vec<&[f64]> {
        layer_segments(&self.layers)
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        self.version = next_version();
        layer_segments_mut(&mut self.layers)
    }
}

impl ParamSet for GradientBuffer {
    fn segments(&self) -> Vec<&[f64]> {
        layer_segments(&self.layers)
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        layer_segments_mut(&mut self.layers)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones(rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, vec![1.0; rows * cols]).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mlp = MlpParams::zeros(&[3, 4, 2]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let y = mlp.infer(&x).unwrap();
        assert!(y.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mlp = MlpParams::from_layers(vec![Layer {
            weight: DenseMatrix::identity(3),
            bias: vec![0.0; 3],
            prelu: None,
        }])
        .unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.5, -1.5, 2.0]]).unwrap();
        assert_eq!(mlp.infer(&x).unwrap(), x);
    }

    /// Scalar-by-scalar reimplementation of a PReLU MLP forward pass.
    fn scalar_forward(mlp: &MlpParams, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for layer in mlp.layers() {
            let mut next = Vec::new();
            for o in 0..layer.out_dim() {
                let mut z = layer.bias[o];
                for i in 0..layer.in_dim() {
                    z += layer.weight.get(o, i) * cur[i];
                }
                if let Some(s) = &layer.prelu {
                    if z <= 0.0 {
                        z *= s[o];
                    }
                }
                next.push(z);
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn two_layer_forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = MlpParams::new(&[4, 3, 2], &mut rng).unwrap();
        let y = mlp.infer(&ones(1, 4)).unwrap();
        let want = scalar_forward(&mlp, &[1.0; 4]);
        for (a, b) in y.as_slice().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = MlpParams::new(&[5, 7, 3], &mut rng).unwrap();
        let x = DenseMatrix::from_vec(2, 5, (0..10).map(|i| i as f64 - 4.5).collect()).unwrap();
        let a = mlp.infer(&x).unwrap();
        let (b, _) = mlp.forward(&x).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn input_width_mismatch_is_shape_error() {
        let mlp = MlpParams::zeros(&[3, 2]).unwrap();
        assert!(matches!(mlp.infer(&ones(1, 4)), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mlp = MlpParams::zeros(&[3, 2]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let g = DenseMatrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let (_, tape) = mlp.forward(&x).unwrap();
        let (grads, _) = mlp.backward(tape, &g).unwrap();
        let dw = &grads.layers()[0].weight;
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(dw.get(o, i), g.get(0, o) * x.get(0, i));
            }
        }
        assert_eq!(grads.layers()[0].bias, vec![0.5, -1.0]);
    }

    #[test]
    fn prelu_slope_gradient_equals_negative_preactivation() {
        // One hidden unit with z = -2 feeding an identity output.
        let mlp = MlpParams::from_layers(vec![
            Layer {
                weight: DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
                bias: vec![-3.0],
                prelu: Some(vec![0.25]),
            },
            Layer {
                weight: DenseMatrix::from_rows(&[vec![1.0]]).unwrap(),
                bias: vec![0.0],
                prelu: None,
            },
        ])
        .unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        let (y, tape) = mlp.forward(&x).unwrap();
        assert_eq!(y.get(0, 0), -0.5);
        let (grads, dx) = mlp.backward(tape, &ones(1, 1)).unwrap();
        assert_eq!(grads.layers()[0].prelu.as_ref().unwrap()[0], -2.0);
        assert_eq!(dx.get(0, 0), 0.25);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = MlpParams::new(&[2, 2], &mut rng).unwrap();
        let (_, tape) = mlp.forward(&ones(1, 2)).unwrap();
        mlp.layer_mut(0).bias[0] += 1.0;
        assert!(matches!(
            mlp.backward(tape, &ones(1, 2)),
            Err(Error::StaleTape { .. })
        ));
    }

    #[test]
    fn upstream_shape_is_checked() {
        let mlp = MlpParams::zeros(&[2, 3]).unwrap();
        let (_, tape) = mlp.forward(&ones(2, 2)).unwrap();
        assert!(matches!(mlp.backward(tape, &ones(1, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn three_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mlp = MlpParams::new(&[5, 6, 4, 3], &mut rng).unwrap();
        let x = DenseMatrix::from_vec(
            3,
            5,
            (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.3).collect(),
        )
        .unwrap();
        // loss = Σ c ⊙ y with fixed random c
        let c: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).cos()).collect();
        let loss = |p: &MlpParams| -> f64 {
            let y = p.infer(&x).unwrap();
            y.as_slice().iter().zip(&c).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = mlp.forward(&x).unwrap();
        let up = DenseMatrix::from_vec(3, 3, c.clone()).unwrap();
        let (grads, dx) = mlp.backward(tape, &up).unwrap();
        let report = grad_check(loss, &mlp, &grads, 1e-4);
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        // input gradient, checked directly
        let h = 1e-4;
        for i in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let f = |m: &DenseMatrix| -> f64 {
                mlp.infer(m).unwrap().as_slice().iter().zip(&c).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx.as_slice()[i]).abs() < 1e-7);
        }
    }
}
