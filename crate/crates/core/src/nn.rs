//! A small dense network engine with exact reverse-mode gradients.
//!
//! Networks are stacks of affine layers, each followed by an optional ReLU, with
//! an optional row-wise l2-normalization head. The same engine hosts the feature
//! extractor and the critic. Gradients are written out by hand and checked
//! against central finite differences by [`grad_check`].

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{wire, Error, Result};
use crate::matrix::{axpy, dot, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::None),
            1 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::None => "none",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "linear" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::invalid(format!("unknown activation {other:?}"))),
        }
    }
}

/// Layer sizes `input -> ... -> output`, one activation per affine layer, and
/// whether output rows are l2-normalized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseNetSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
    final_l2_normalize: bool,
}

impl DenseNetSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>, final_l2_normalize: bool) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("a network needs an input size and at least one layer"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be at least 1"));
        }
        if activations.len() != layer_sizes.len() - 1 {
            return Err(Error::LengthMismatch { expected: layer_sizes.len() - 1, actual: activations.len() });
        }
        Ok(Self { layer_sizes, activations, final_l2_normalize })
    }

    /// Uniform hidden activation with a separate output activation.
    pub fn mlp(layer_sizes: Vec<usize>, hidden: Activation, output: Activation, final_l2_normalize: bool) -> Result<Self> {
        let n = layer_sizes.len().saturating_sub(1);
        let activations = (0..n).map(|l| if l + 1 == n { output } else { hidden }).collect();
        Self::new(layer_sizes, activations, final_l2_normalize)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn final_l2_normalize(&self) -> bool {
        self.final_l2_normalize
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layer_sizes[self.layer_sizes.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn with_l2_normalize(&self, enabled: bool) -> Self {
        Self { final_l2_normalize: enabled, ..self.clone() }
    }

    /// Appends a linear layer of `width` outputs, dropping any l2 head.
    pub fn with_linear_head(&self, width: usize) -> Result<Self> {
        let mut sizes = self.layer_sizes.clone();
        sizes.push(width);
        let mut acts = self.activations.clone();
        acts.push(Activation::None);
        Self::new(sizes, acts, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `out x in`, row-major.
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weights: Matrix::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }

    fn tensors(&self) -> [&[f64]; 2] {
        [self.weights.as_slice(), &self.bias]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weights.as_mut_slice(), &mut self.bias]
    }
}

/// Weights and biases of every layer, plus the seed they were drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<DenseLayer>,
    pub seed: u64,
}

impl ModelParams {
    pub fn zeros_like(spec: &DenseNetSpec) -> Self {
        let layers = spec.layer_sizes.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect();
        Self { layers, seed: 0 }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameter tensors in checkpoint order: per layer, weights then bias.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| l.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut())
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().flatten().all(|x| x.is_finite())
    }

    fn check_shapes(&self, spec: &DenseNetSpec) -> Result<()> {
        if self.layers.len() != spec.num_layers() {
            return Err(Error::shape(format!("{} layers in params, {} in spec", self.layers.len(), spec.num_layers())));
        }
        for (l, (layer, w)) in self.layers.iter().zip(spec.layer_sizes.windows(2)).enumerate() {
            if layer.weights.rows() != w[1] || layer.weights.cols() != w[0] || layer.bias.len() != w[1] {
                return Err(Error::shape(format!(
                    "layer {l} has weights {}x{} and bias {}, expected {}x{} and {}",
                    layer.weights.rows(),
                    layer.weights.cols(),
                    layer.bias.len(),
                    w[1],
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(())
    }
}

/// Draws weights from `U(-a, a)` with `a = sqrt(3 / fan_in)` (standard deviation
/// `1 / sqrt(fan_in)`); biases start at zero.
pub fn init_params(spec: &DenseNetSpec, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros_like(spec);
    params.seed = seed;
    for layer in &mut params.layers {
        let bound = (3.0 / layer.weights.cols() as f64).sqrt();
        for w in layer.weights.as_mut_slice() {
            *w = rng.random_range(-bound..bound);
        }
    }
    params
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    input: Matrix,
    pre: Vec<Matrix>,
    post: Vec<Matrix>,
    /// Row norms before the l2 head, when present.
    norms: Option<Vec<f64>>,
    output: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.post
    }
}

pub fn forward(params: &ModelParams, spec: &DenseNetSpec, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
    params.check_shapes(spec)?;
    if batch.cols() != spec.input_dim() {
        return Err(Error::shape(format!("batch has {} columns, network expects {}", batch.cols(), spec.input_dim())));
    }
    let n = batch.rows();
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut post: Vec<Matrix> = Vec::with_capacity(spec.num_layers());
    for (l, (layer, act)) in params.layers.iter().zip(&spec.activations).enumerate() {
        let input = if l == 0 { batch } else { &post[l - 1] };
        let outputs = layer.weights.rows();
        let mut z = Matrix::zeros(n, outputs);
        for i in 0..n {
            let x = input.row(i);
            for (o, zo) in z.row_mut(i).iter_mut().enumerate() {
                *zo = layer.bias[o] + dot(layer.weights.row(o), x);
            }
        }
        if !z.all_finite() {
            return Err(Error::NonFinite(format!("forward pass, layer {l}")));
        }
        let a = match act {
            Activation::None => z.clone(),
            Activation::Relu => {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
                a
            }
        };
        pre.push(z);
        post.push(a);
    }
    let last = post.last().expect("at least one layer");
    let (output, norms) = if spec.final_l2_normalize {
        let mut out = last.clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = out.row_mut(i);
            let norm = dot(row, row).sqrt();
            if norm <= crate::codespace::ZERO_NORM_TOLERANCE {
                return Err(Error::ZeroVector { norm });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        (out, Some(norms))
    } else {
        (last.clone(), None)
    };
    let trace = ForwardTrace { input: batch.clone(), pre, post, norms, output: output.clone() };
    Ok((output, trace))
}

/// Gradients of a scalar loss with respect to every parameter and to the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: ModelParams,
    pub inputs: Matrix,
}

pub fn backward(params: &ModelParams, spec: &DenseNetSpec, trace: &ForwardTrace, grad_outputs: &Matrix) -> Result<Gradients> {
    params.check_shapes(spec)?;
    let n = trace.batch_size();
    if grad_outputs.rows() != n || grad_outputs.cols() != spec.output_dim() {
        return Err(Error::shape(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            grad_outputs.rows(),
            grad_outputs.cols(),
            n,
            spec.output_dim()
        )));
    }
    if trace.pre.len() != spec.num_layers() || trace.input.cols() != spec.input_dim() {
        return Err(Error::shape("forward trace does not match the network"));
    }

    // Through the l2 head: dx = (g - y (y.g)) / ||x||, y = x / ||x||.
    let mut g = grad_outputs.clone();
    if let Some(norms) = &trace.norms {
        for (i, norm) in norms.iter().enumerate().take(n) {
            let y = trace.output.row(i);
            let proj = dot(y, g.row(i));
            let inv = 1.0 / norm;
            for (gj, yj) in g.row_mut(i).iter_mut().zip(y) {
                *gj = (*gj - yj * proj) * inv;
            }
        }
    }

    let mut grads = ModelParams::zeros_like(spec);
    grads.seed = params.seed;
    for l in (0..spec.num_layers()).rev() {
        if spec.activations[l] == Activation::Relu {
            let z = &trace.pre[l];
            for (gv, zv) in g.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if *zv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        let layer = &params.layers[l];
        let gl = &mut grads.layers[l];
        let mut g_in = Matrix::zeros(n, layer.weights.cols());
        for i in 0..n {
            let x = input.row(i);
            for (o, &go) in g.row(i).iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                gl.bias[o] += go;
                axpy(gl.weights.row_mut(o), go, x);
                axpy(g_in.row_mut(i), go, layer.weights.row(o));
            }
        }
        g = g_in;
    }
    Ok(Gradients { params: grads, inputs: g })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Algorithm {
    #[default]
    Sgd,
    RmsProp,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Sgd => "sgd",
            Algorithm::RmsProp => "rmsprop",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Algorithm::Sgd),
            "rmsprop" => Ok(Algorithm::RmsProp),
            other => Err(Error::invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// `decay` is the RMSprop squared-gradient smoothing factor; `momentum` applies to SGD only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self { algorithm: Algorithm::Sgd, learning_rate, decay: 0.0, momentum: 0.0, eps: 0.0 }
    }

    pub fn rmsprop(learning_rate: f64, decay: f64) -> Self {
        Self { algorithm: Algorithm::RmsProp, learning_rate, decay, momentum: 0.0, eps: 1e-8 }
    }
}

/// Optimizer with per-parameter state (RMSprop accumulators or SGD velocity).
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    state: Option<Vec<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, state: None }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// Applies one descent step. Non-finite gradients abort without touching `params`.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        if params.layers.len() != grads.layers.len()
            || params.tensors().zip(grads.tensors()).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::shape("gradient shapes do not match parameters"));
        }
        if !grads.all_finite() {
            return Err(Error::Diverged("non-finite gradient".into()));
        }
        let state = self
            .state
            .get_or_insert_with(|| params.tensors().map(|t| vec![0.0; t.len()]).collect());
        let OptimizerConfig { algorithm, learning_rate: lr, decay, momentum, eps } = self.config;
        for ((p, g), s) in params.tensors_mut().zip(grads.tensors()).zip(state.iter_mut()) {
            match algorithm {
                Algorithm::Sgd if momentum == 0.0 => {
                    for (w, &gw) in p.iter_mut().zip(g) {
                        *w -= lr * gw;
                    }
                }
                Algorithm::Sgd => {
                    for ((w, &gw), v) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *v = momentum * *v + gw;
                        *w -= lr * *v;
                    }
                }
                Algorithm::RmsProp => {
                    for ((w, &gw), v) in p.iter_mut().zip(g).zip(s.iter_mut()) {
                        *v = decay * *v + (1.0 - decay) * gw * gw;
                        *w -= lr * gw / (v.sqrt() + eps);
                    }
                }
            }
        }
        if !params.all_finite() {
            return Err(Error::Diverged("non-finite parameter after update".into()));
        }
        Ok(())
    }
}

/// Clamps every weight and bias into `[-c, c]`.
pub fn clip_weights(params: &mut ModelParams, c: f64) {
    assert!(c > 0.0, "clip constant must be positive");
    for t in params.tensors_mut() {
        for w in t {
            *w = w.clamp(-c, c);
        }
    }
}

/// Gradients with magnitude below this are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Maximum relative error between analytic gradients (parameters and inputs) and
/// central finite differences with step `fd_step`.
///
/// `loss_fn` maps network outputs to a scalar loss and its gradient with respect
/// to those outputs.
pub fn grad_check<F>(spec: &DenseNetSpec, params: &ModelParams, loss_fn: F, batch: &Matrix, fd_step: f64) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    let (out, trace) = forward(params, spec, batch)?;
    let (_, g) = loss_fn(&out)?;
    let analytic = backward(params, spec, &trace, &g)?;
    compare_gradients(spec, params, loss_fn, batch, fd_step, &analytic)
}

/// The comparison half of [`grad_check`], against caller-supplied gradients.
pub fn compare_gradients<F>(
    spec: &DenseNetSpec,
    params: &ModelParams,
    loss_fn: F,
    batch: &Matrix,
    fd_step: f64,
    analytic: &Gradients,
) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<(f64, Matrix)>,
{
    if fd_step.is_nan() || fd_step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let loss_at = |p: &ModelParams, x: &Matrix| -> Result<f64> { Ok(loss_fn(&forward(p, spec, x)?.0)?.0) };

    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for (l, layer) in params.layers.iter().enumerate() {
        for t in 0..2 {
            let len = layer.tensors()[t].len();
            for k in 0..len {
                let orig = layer.tensors()[t][k];
                probe.layers[l].tensors_mut()[t][k] = orig + fd_step;
                let plus = loss_at(&probe, batch)?;
                probe.layers[l].tensors_mut()[t][k] = orig - fd_step;
                let minus = loss_at(&probe, batch)?;
                probe.layers[l].tensors_mut()[t][k] = orig;
                let numeric = (plus - minus) / (2.0 * fd_step);
                worst = worst.max(relative_error(analytic.params.layers[l].tensors()[t][k], numeric));
            }
        }
    }
    let mut x = batch.clone();
    for k in 0..x.as_slice().len() {
        let orig = x.as_slice()[k];
        x.as_mut_slice()[k] = orig + fd_step;
        let plus = loss_at(params, &x)?;
        x.as_mut_slice()[k] = orig - fd_step;
        let minus = loss_at(params, &x)?;
        x.as_mut_slice()[k] = orig;
        let numeric = (plus - minus) / (2.0 * fd_step);
        worst = worst.max(relative_error(analytic.inputs.as_slice()[k], numeric));
    }
    Ok(worst)
}

/// A network specification together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: DenseNetSpec,
    pub params: ModelParams,
}

impl Network {
    pub fn new(spec: DenseNetSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        forward(&self.params, &self.spec, batch)
    }

    /// Forward pass without keeping the trace.
    pub fn infer(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.0)
    }

    pub fn backward(&self, trace: &ForwardTrace, grad_outputs: &Matrix) -> Result<Gradients> {
        backward(&self.params, &self.spec, trace, grad_outputs)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"ABCM";
const MODEL_VERSION: u32 = 1;

/// Writes a network in the `ABCM` layout:
///
/// ```text
/// "ABCM" | u32 version | u32 L | L x u32 layer sizes | (L-1) x u8 activation (0 none, 1 relu)
///        | u8 l2 head | u64 init seed | per layer: out*in f64 weights (row-major), out f64 bias
/// ```
///
/// All integers and floats little-endian.
pub fn write_model<W: Write>(w: &mut W, net: &Network) -> Result<()> {
    net.params.check_shapes(&net.spec)?;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(net.spec.layer_sizes.len() as u32).to_le_bytes())?;
    for &s in &net.spec.layer_sizes {
        let s = u32::try_from(s).map_err(|_| Error::invalid("layer size exceeds u32"))?;
        w.write_all(&s.to_le_bytes())?;
    }
    for a in &net.spec.activations {
        w.write_all(&[a.code()])?;
    }
    w.write_all(&[net.spec.final_l2_normalize as u8])?;
    w.write_all(&net.params.seed.to_le_bytes())?;
    for v in net.params.tensors().flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Network> {
    wire::magic(r, MODEL_MAGIC)?;
    wire::version(r, MODEL_VERSION)?;
    let count = wire::u32(r, "layer count")? as usize;
    if !(2..=1024).contains(&count) {
        return Err(Error::Format(format!("implausible layer count {count}")));
    }
    let sizes = (0..count)
        .map(|_| wire::u32(r, "layer sizes").map(|s| s as usize))
        .collect::<Result<Vec<_>>>()?;
    let activations = (0..count - 1)
        .map(|_| wire::u8(r, "activations").and_then(Activation::from_code))
        .collect::<Result<Vec<_>>>()?;
    let l2 = match wire::u8(r, "l2 flag")? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad l2 flag {other}"))),
    };
    let spec = DenseNetSpec::new(sizes, activations, l2).map_err(|e| Error::Format(e.to_string()))?;
    let seed = wire::u64(r, "seed")?;
    let mut params = ModelParams::zeros_like(&spec);
    params.seed = seed;
    for t in params.tensors_mut() {
        for v in t {
            *v = wire::f64(r, "parameters")?;
        }
    }
    if !params.all_finite() {
        return Err(Error::Format("non-finite parameter in checkpoint".into()));
    }
    wire::end(r)?;
    Ok(Network { spec, params })
}

pub fn save_model(path: impl AsRef<Path>, net: &Network) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, net)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Network> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn init_bounds_and_determinism() {
        let spec = DenseNetSpec::mlp(vec![2, 2], Activation::None, Activation::None, false).unwrap();
        let p = init_params(&spec, 5);
        assert!(p.layers[0].weights.as_slice().iter().all(|w| w.abs() <= 4.0 / 2f64.sqrt()));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
        assert_eq!(p, init_params(&spec, 5));
        assert_ne!(p, init_params(&spec, 6));

        let spec = DenseNetSpec::mlp(vec![8, 4, 1], Activation::Relu, Activation::None, false).unwrap();
        let p = init_params(&spec, 1);
        assert_eq!((p.layers[0].weights.rows(), p.layers[0].weights.cols()), (4, 8));
        assert_eq!((p.layers[1].weights.rows(), p.layers[1].weights.cols()), (1, 4));
    }

    #[test]
    fn invalid_specs() {
        assert!(DenseNetSpec::new(vec![3], vec![], false).is_err());
        assert!(DenseNetSpec::new(vec![3, 0], vec![Activation::None], false).is_err());
        assert!(DenseNetSpec::new(vec![3, 2], vec![], false).is_err());
    }

    fn identity_net(dim: usize, act: Activation, l2: bool) -> Network {
        let spec = DenseNetSpec::mlp(vec![dim, dim], act, act, l2).unwrap();
        let mut params = ModelParams::zeros_like(&spec);
        for i in 0..dim {
            params.layers[0].weights.set(i, i, 1.0);
        }
        Network { spec, params }
    }

    #[test]
    fn forward_examples() {
        let x = Matrix::from_rows(&[[0.3, -2.0, 5.0]]).unwrap();
        assert_eq!(identity_net(3, Activation::None, false).infer(&x).unwrap(), x);

        let x = Matrix::from_rows(&[[-1.0, 2.0]]).unwrap();
        assert_eq!(identity_net(2, Activation::Relu, false).infer(&x).unwrap().row(0), &[0.0, 2.0]);

        let x = Matrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(identity_net(2, Activation::None, true).infer(&x).unwrap().row(0), &[0.6, 0.8]);
    }

    #[test]
    fn forward_errors() {
        let net = identity_net(2, Activation::None, true);
        let wrong = Matrix::zeros(1, 3);
        assert!(matches!(net.infer(&wrong), Err(Error::ShapeMismatch(_))));
        let zero = Matrix::zeros(1, 2);
        assert!(matches!(net.infer(&zero), Err(Error::ZeroVector { .. })));
        let nan = Matrix::from_rows(&[[f64::NAN, 1.0]]).unwrap();
        assert!(matches!(net.infer(&nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let spec = DenseNetSpec::mlp(vec![3, 2], Activation::None, Activation::None, false).unwrap();
        let net = Network::new(spec, 3);
        let x = Matrix::from_rows(&[[1.0, 2.0, -1.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.5, -2.0]]).unwrap();
        let (_, trace) = net.forward(&x).unwrap();
        let grads = net.backward(&trace, &g).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grads.params.layers[0].weights.get(o, i), g.get(0, o) * x.get(0, i));
            }
            assert_eq!(grads.params.layers[0].bias[o], g.get(0, o));
        }
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let net = identity_net(2, Activation::Relu, false);
        let x = Matrix::from_rows(&[[-1.0, 2.0]]).unwrap();
        let (_, trace) = net.forward(&x).unwrap();
        let grads = net.backward(&trace, &Matrix::from_rows(&[[1.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(grads.inputs.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn l2_head_gradient_is_orthogonal_to_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = DenseNetSpec::mlp(vec![5, 6], Activation::None, Activation::None, true).unwrap();
        let net = Network::new(spec.clone(), 9);
        let x = random_matrix(4, 5, &mut rng);
        let (out, trace) = net.forward(&x).unwrap();
        for row in out.iter_rows() {
            assert!((dot(row, row).sqrt() - 1.0).abs() < 1e-9);
        }
        // The gradient reaching the pre-normalization features must be orthogonal to them.
        let identity_head = identity_net(6, Activation::None, true);
        let pre = net.spec.with_l2_normalize(false);
        let z = forward(&net.params, &pre, &x).unwrap().0;
        let (_, t2) = identity_head.forward(&z).unwrap();
        let g = random_matrix(4, 6, &mut rng);
        let gi = identity_head.backward(&t2, &g).unwrap().inputs;
        for i in 0..4 {
            assert!(dot(gi.row(i), z.row(i)).abs() < 1e-9);
        }
        let _ = trace;
    }

    fn squared_loss(target: Matrix) -> impl Fn(&Matrix) -> Result<(f64, Matrix)> {
        move |out: &Matrix| {
            let mut g = out.clone();
            g.add_scaled(&target, -1.0)?;
            let loss = 0.5 * g.as_slice().iter().map(|v| v * v).sum::<f64>();
            Ok((loss, g))
        }
    }

    #[test]
    fn grad_check_linear_regression() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = DenseNetSpec::mlp(vec![4, 3], Activation::None, Activation::None, false).unwrap();
        let params = init_params(&spec, 1);
        let x = random_matrix(6, 4, &mut rng);
        let err = grad_check(&spec, &params, squared_loss(random_matrix(6, 3, &mut rng)), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn grad_check_l2_head_and_fault_injection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let spec = DenseNetSpec::mlp(vec![5, 7, 4], Activation::Relu, Activation::None, true).unwrap();
        let params = init_params(&spec, 2);
        let x = random_matrix(5, 5, &mut rng);
        let target = random_matrix(5, 4, &mut rng);
        let err = grad_check(&spec, &params, squared_loss(target.clone()), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");

        let (out, trace) = forward(&params, &spec, &x).unwrap();
        let (_, g) = squared_loss(target.clone())(&out).unwrap();
        let mut corrupted = backward(&params, &spec, &trace, &g).unwrap();
        corrupted.params.layers[1].weights.as_mut_slice()[0] += 0.5;
        let err = compare_gradients(&spec, &params, squared_loss(target), &x, 1e-5, &corrupted).unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn sgd_step_and_fixed_point() {
        let spec = DenseNetSpec::mlp(vec![1, 1], Activation::None, Activation::None, false).unwrap();
        let mut params = ModelParams::zeros_like(&spec);
        params.layers[0].weights.set(0, 0, 1.0);
        let mut grads = ModelParams::zeros_like(&spec);
        grads.layers[0].weights.set(0, 0, 0.5);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut params, &grads).unwrap();
        assert!((params.layers[0].weights.get(0, 0) - 0.95).abs() < 1e-15);

        let before = params.clone();
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::rmsprop(0.01, 0.9)] {
            let mut p = before.clone();
            Optimizer::new(cfg).step(&mut p, &ModelParams::zeros_like(&spec)).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn rmsprop_first_step_matches_hand_computation() {
        let spec = DenseNetSpec::mlp(vec![1, 1], Activation::None, Activation::None, false).unwrap();
        for decay in [0.9, 0.99] {
            let mut params = ModelParams::zeros_like(&spec);
            let mut grads = ModelParams::zeros_like(&spec);
            grads.layers[0].weights.set(0, 0, 1.0);
            let mut opt = Optimizer::new(OptimizerConfig::rmsprop(0.01, decay));
            opt.step(&mut params, &grads).unwrap();
            // accumulator = (1 - decay) * 1^2; step = lr * 1 / (sqrt(accumulator) + eps)
            let expected = -0.01 / ((1.0f64 - decay).sqrt() + 1e-8);
            assert!((params.layers[0].weights.get(0, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let spec = DenseNetSpec::mlp(vec![1, 1], Activation::None, Activation::None, false).unwrap();
        let mut params = ModelParams::zeros_like(&spec);
        let mut grads = ModelParams::zeros_like(&spec);
        grads.layers[0].bias[0] = f64::INFINITY;
        let err = Optimizer::new(OptimizerConfig::sgd(0.1)).step(&mut params, &grads);
        assert!(matches!(err, Err(Error::Diverged(_))));
        assert_eq!(params, ModelParams::zeros_like(&spec));
    }

    #[test]
    fn clipping() {
        let spec = DenseNetSpec::mlp(vec![3, 2], Activation::None, Activation::None, false).unwrap();
        let mut params = ModelParams::zeros_like(&spec);
        params.layers[0].weights.set(0, 0, 0.5);
        params.layers[0].weights.set(0, 1, -0.003);
        params.layers[0].bias[1] = -7.0;
        clip_weights(&mut params, 0.01);
        assert_eq!(params.layers[0].weights.get(0, 0), 0.01);
        assert_eq!(params.layers[0].weights.get(0, 1), -0.003);
        assert_eq!(params.layers[0].bias[1], -0.01);
        let mut big = init_params(&spec, 3);
        clip_weights(&mut big, 0.05);
        assert!(big.max_abs() <= 0.05);
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let spec = DenseNetSpec::mlp(vec![4, 6, 3], Activation::Relu, Activation::None, true).unwrap();
        let net = Network::new(spec, 77);
        let mut buf = Vec::new();
        write_model(&mut buf, &net).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 4 + 3 * 4 + 2 + 1 + 8 + (4 * 6 + 6 + 6 * 3 + 3) * 8);
        assert_eq!(read_model(&mut buf.as_slice()).unwrap(), net);

        let mut bad = buf.clone();
        bad[3] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_model(&mut &buf[..buf.len() - 1]), Err(Error::Format(_))));
    }
}
