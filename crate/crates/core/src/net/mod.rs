//! Layers, backpropagation and minibatch SGD with momentum and weight
//! decay, run on either arithmetic engine.
//!
//! In fixed-point mode the stored and intermediate variables are quantized
//! as follows: weights, biases, their gradients and momentum velocities in
//! the layer's weight format; layer outputs and the errors flowing back
//! into them in the layer's output format.

mod arith;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::Dataset;
use crate::fxp::{FormatError, FxFormat};
use crate::fxtensor::{pool_output_size, ConvGeometry, TensorError};
use crate::rng::derive_seed;

pub use arith::{Arith, FixedArith, FloatArith, FloatTensor};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TensorRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyper(String),
    #[error("invalid network: {0}")]
    Spec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear { inputs: usize, outputs: usize },
    /// Convolution over `geo` producing `filters` maps.
    Conv { geo: ConvGeometry, filters: usize },
    MaxPool { window: usize, stride: usize },
    Relu,
    /// Softmax with cross-entropy loss; must be the last layer.
    SoftmaxXent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub weight_format: FxFormat,
    /// For ReLU and pooling this equals the incoming format: both are
    /// exact and never convert.
    pub output_format: FxFormat,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Linear { .. } | LayerKind::Conv { .. })
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Linear { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerKind::Conv { geo, filters } => Some(vec![filters, geo.channels, geo.kh, geo.kw]),
            _ => None,
        }
    }

    fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Linear { outputs, .. } => outputs,
            LayerKind::Conv { filters, .. } => filters,
            _ => 0,
        }
    }
}

/// Formats for one training phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Precision {
    /// Weights, biases, their updates and velocities.
    pub weights: FxFormat,
    /// Layer outputs, input images and back-propagated errors.
    pub outputs: FxFormat,
}

impl Precision {
    pub fn uniform(f: FxFormat) -> Self {
        Self { weights: f, outputs: f }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub name: String,
    /// `C x H x W` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Format the input images are rounded into.
    pub input_format: FxFormat,
}

impl NetSpec {
    /// Start a 10-class network on `C x H x W` inputs.
    pub fn builder(name: &str, input: [usize; 3], p: Precision) -> NetBuilder {
        NetBuilder {
            spec: NetSpec { name: name.into(), input, classes: 10, layers: vec![], input_format: p.outputs },
            p,
            shape: input.to_vec(),
            error: None,
        }
    }

    /// Per-example output shape of every layer, checking that they chain.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>, NetError> {
        let mut cur = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        let wl = self.input_format.wl();
        for (i, l) in self.layers.iter().enumerate() {
            if l.weight_format.wl() != wl || l.output_format.wl() != wl {
                return Err(NetError::Spec(format!("layer {i}: all formats must share word length {wl}")));
            }
            cur = match l.kind {
                LayerKind::Linear { inputs, outputs } => {
                    if cur.iter().product::<usize>() != inputs {
                        return Err(NetError::Spec(format!("layer {i}: {inputs} inputs, previous layer gives {cur:?}")));
                    }
                    vec![outputs]
                }
                LayerKind::Conv { geo, filters } => {
                    if cur != [geo.channels, geo.height, geo.width] {
                        return Err(NetError::Spec(format!("layer {i}: convolution expects {:?}, gets {cur:?}", [geo.channels, geo.height, geo.width])));
                    }
                    vec![filters, geo.out_h(), geo.out_w()]
                }
                LayerKind::MaxPool { window, stride } => {
                    if cur.len() != 3 {
                        return Err(NetError::Spec(format!("layer {i}: pooling needs a C x H x W input")));
                    }
                    let h = pool_output_size(cur[1], window, stride)?;
                    let w = pool_output_size(cur[2], window, stride)?;
                    vec![cur[0], h, w]
                }
                LayerKind::Relu => cur,
                LayerKind::SoftmaxXent => {
                    if i + 1 != self.layers.len() || cur != [self.classes] {
                        return Err(NetError::Spec("softmax must be last and see one value per class".into()));
                    }
                    cur
                }
            };
            out.push(cur.clone());
        }
        if !matches!(self.layers.last().map(|l| l.kind), Some(LayerKind::SoftmaxXent)) {
            return Err(NetError::Spec("network must end in a softmax layer".into()));
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weight_shape().map(|s| s.iter().product::<usize>() + l.bias_len()))
            .sum()
    }

    /// Format of the tensor entering layer `i`.
    pub fn input_format_of(&self, i: usize) -> FxFormat {
        if i == 0 {
            self.input_format
        } else {
            self.layers[i - 1].output_format
        }
    }

    /// Every format gains `extra` fractional bits.
    pub fn widened(&self, extra: u32) -> Result<Self, NetError> {
        let mut s = self.clone();
        s.input_format = s.input_format.widened(extra)?;
        for l in &mut s.layers {
            l.weight_format = l.weight_format.widened(extra)?;
            l.output_format = l.output_format.widened(extra)?;
        }
        Ok(s)
    }
}

/// Incremental construction of a [`NetSpec`]; every layer after the first
/// is sized from the one before it. Geometry errors surface from
/// [`NetBuilder::done`].
#[derive(Debug)]
pub struct NetBuilder {
    spec: NetSpec,
    p: Precision,
    shape: Vec<usize>,
    error: Option<NetError>,
}

impl NetBuilder {
    fn push(mut self, kind: LayerKind) -> Self {
        if self.error.is_some() {
            return self;
        }
        let carry = self.spec.layers.last().map_or(self.spec.input_format, |l| l.output_format);
        let output_format = match kind {
            LayerKind::Linear { .. } | LayerKind::Conv { .. } => self.p.outputs,
            _ => carry,
        };
        self.shape = match kind {
            LayerKind::Linear { outputs, .. } => vec![outputs],
            LayerKind::Conv { geo, filters } => vec![filters, geo.out_h(), geo.out_w()],
            LayerKind::MaxPool { window, stride } => {
                if self.shape.len() != 3 {
                    self.error = Some(NetError::Spec("pooling needs a C x H x W input".into()));
                    return self;
                }
                match (pool_output_size(self.shape[1], window, stride), pool_output_size(self.shape[2], window, stride)) {
                    (Ok(h), Ok(w)) => vec![self.shape[0], h, w],
                    (Err(e), _) | (_, Err(e)) => {
                        self.error = Some(e.into());
                        return self;
                    }
                }
            }
            _ => self.shape,
        };
        self.spec.layers.push(LayerSpec { kind, weight_format: self.p.weights, output_format });
        self
    }

    pub fn linear(self, outputs: usize) -> Self {
        let inputs = self.shape.iter().product();
        self.push(LayerKind::Linear { inputs, outputs })
    }

    /// Square `kernel`, stride 1.
    pub fn conv(mut self, filters: usize, kernel: usize, pad: usize) -> Self {
        if self.error.is_some() {
            return self;
        }
        if self.shape.len() != 3 {
            self.error = Some(NetError::Spec("convolution needs a C x H x W input".into()));
            return self;
        }
        let s = &self.shape;
        match ConvGeometry::new(s[0], s[1], s[2], kernel, kernel, 1, pad) {
            Ok(geo) => self.push(LayerKind::Conv { geo, filters }),
            Err(e) => {
                self.error = Some(e.into());
                self
            }
        }
    }

    pub fn relu(self) -> Self {
        self.push(LayerKind::Relu)
    }

    pub fn pool(self, window: usize, stride: usize) -> Self {
        self.push(LayerKind::MaxPool { window, stride })
    }

    /// Append the softmax output and check the whole chain.
    pub fn done(self) -> Result<NetSpec, NetError> {
        let s = self.push(LayerKind::SoftmaxXent);
        if let Some(e) = s.error {
            return Err(e);
        }
        s.spec.shapes()?;
        Ok(s.spec)
    }
}

/// 784 - hidden - hidden - 10 with ReLU hidden units. The full-size network
/// uses 1000 hidden units.
pub fn mnist_dnn(hidden: usize, p: Precision) -> NetSpec {
    NetSpec::builder("mnist-dnn", [1, 28, 28], p).linear(hidden).relu().linear(hidden).relu().linear(10).done().expect("fixed geometry")
}

/// Two 5x5 convolutions (`c1`, `c2` maps) with ReLU and 2x2 max pooling,
/// a ReLU layer of `fc` units, and the 10-way output. Full size: 8, 16, 128.
pub fn mnist_cnn(c1: usize, c2: usize, fc: usize, p: Precision) -> NetSpec {
    NetSpec::builder("mnist-cnn", [1, 28, 28], p)
        .conv(c1, 5, 0)
        .relu()
        .pool(2, 2)
        .conv(c2, 5, 0)
        .relu()
        .pool(2, 2)
        .linear(fc)
        .relu()
        .linear(10)
        .done()
        .expect("fixed geometry")
}

/// Three blocks of 5x5 convolution (`filters` maps, padding 2), ReLU and
/// 3x3 stride-2 max pooling, then the 10-way output. Full size: 64.
pub fn cifar_cnn(filters: usize, p: Precision) -> NetSpec {
    NetSpec::builder("cifar-cnn", [3, 32, 32], p)
        .conv(filters, 5, 2)
        .relu()
        .pool(3, 2)
        .conv(filters, 5, 2)
        .relu()
        .pool(3, 2)
        .conv(filters, 5, 2)
        .relu()
        .pool(3, 2)
        .linear(10)
        .done()
        .expect("fixed geometry")
}

/// Learning rate as a function of the (0-based) epoch.
#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// `initial * factor^epoch`.
    Exponential { initial: f64, factor: f64 },
    /// `initial * factor^(number of milestones <= epoch)`.
    Step { initial: f64, factor: f64, milestones: Vec<usize> },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant(v) => *v,
            LrSchedule::Exponential { initial, factor } => initial * factor.powi(epoch as i32),
            LrSchedule::Step { initial, factor, milestones } => {
                initial * factor.powi(milestones.iter().filter(|&&m| m <= epoch).count() as i32)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub batch: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Standard deviation of the initial weights.
    pub init_std: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.batch == 0 {
            return Err(NetError::Hyper("minibatch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NetError::Hyper(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.decay.is_nan() || self.decay < 0.0 {
            return Err(NetError::Hyper(format!("weight decay {} is negative", self.decay)));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(NetError::Hyper("initial weight deviation must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub w: T,
    pub b: T,
    pub vw: T,
    pub vb: T,
}

/// Parameters, velocities and the global step of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState<T> {
    /// One entry per layer; `None` for layers without parameters.
    pub params: Vec<Option<Params<T>>>,
    pub step: u64,
    pub seed: u64,
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// `acts[0]` is the input; `acts[i + 1]` the output of layer `i`. The
    /// last entry holds the logits.
    pub acts: Vec<T>,
    argmax: Vec<Vec<u32>>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// `(dW, dB)` per layer with parameters.
    pub params: Vec<Option<(T, T)>>,
    pub loss: f64,
    pub correct: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
    pub examples: usize,
    /// Weight elements whose update was exactly zero, and all weight elements.
    pub zero_updates: usize,
    pub weight_elements: usize,
}

const EVAL_STEP_BASE: u64 = 1 << 62;

/// A network spec together with an engine and its state.
#[derive(Debug, Clone)]
pub struct Network<A: Arith> {
    pub spec: NetSpec,
    pub arith: A,
    pub state: NetState<A::T>,
    eval_calls: u64,
}

fn ltag(i: usize, what: &str) -> String {
    format!("L{i}.{what}")
}

impl<A: Arith> Network<A> {
    /// Weights from `Normal(0, init_std)`, rounded into the weight format;
    /// zero biases and velocities.
    pub fn init(spec: NetSpec, mut arith: A, seed: u64, init_std: f64) -> Result<Self, NetError> {
        spec.shapes()?;
        let normal = Normal::new(0.0, init_std).map_err(|e| NetError::Hyper(e.to_string()))?;
        arith.set_step(0);
        let params = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.weight_shape().map(|shape| {
                    let n: usize = shape.iter().product();
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
                    let vals: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    let wf = l.weight_format;
                    Params {
                        w: arith.param(shape.clone(), &vals, wf, &ltag(i, "init")),
                        b: arith.zeros(vec![l.bias_len()], wf),
                        vw: arith.zeros(shape, wf),
                        vb: arith.zeros(vec![l.bias_len()], wf),
                    }
                })
            })
            .collect();
        Ok(Self { spec, arith, state: NetState { params, step: 0, seed }, eval_calls: 0 })
    }

    pub fn from_state(spec: NetSpec, arith: A, state: NetState<A::T>) -> Result<Self, NetError> {
        spec.shapes()?;
        if state.params.len() != spec.layers.len() {
            return Err(NetError::Spec("state does not match the layer list".into()));
        }
        Ok(Self { spec, arith, state, eval_calls: 0 })
    }

    /// Quantize images `idx` of `ds` into the input format.
    pub fn input(&self, ds: &Dataset, idx: &[usize]) -> A::T {
        self.arith.input(ds.pixels(), [ds.channels, ds.height, ds.width], idx, self.spec.input_format)
    }

    fn params(&self, i: usize) -> Result<&Params<A::T>, NetError> {
        self.state.params[i].as_ref().ok_or_else(|| NetError::Spec(format!("layer {i} has no parameters")))
    }

    /// Run every layer before the softmax. Tags are prefixed with `prefix`.
    pub fn forward(&self, x: A::T, prefix: &str) -> Result<Forward<A::T>, NetError> {
        let a = &self.arith;
        let n = a.shape(&x)[0];
        let mut acts = vec![x];
        let mut argmax = Vec::new();
        for (i, l) in self.spec.layers.iter().enumerate() {
            let x = acts.last().expect("input present");
            let tag = format!("{prefix}{}", ltag(i, "y"));
            let y = match l.kind {
                LayerKind::Linear { .. } => {
                    let p = self.params(i)?;
                    a.linear(x, &p.w, &p.b, l.output_format, &tag)?
                }
                LayerKind::Conv { geo, .. } => {
                    let p = self.params(i)?;
                    a.conv(x, &p.w, &p.b, &geo, l.output_format, &tag)?
                }
                LayerKind::MaxPool { window, stride } => {
                    let (y, arg) = a.maxpool(x, window, stride)?;
                    argmax.push(arg);
                    y
                }
                LayerKind::Relu => a.relu(x),
                LayerKind::SoftmaxXent => break,
            };
            debug_assert_eq!(a.shape(&y)[0], n);
            acts.push(y);
        }
        Ok(Forward { acts, argmax })
    }

    /// Back-propagate softmax cross-entropy through a recorded forward pass.
    pub fn backward(&self, fwd: &Forward<A::T>, labels: &[usize], decay: f64) -> Result<Gradients<A::T>, NetError> {
        let a = &self.arith;
        let layers = &self.spec.layers;
        let body = layers.len() - 1;
        let logits = &fwd.acts[body];
        let out_fmt = self.spec.input_format_of(body);
        let (mut d, loss, correct) = a.softmax_xent_grad(logits, labels, out_fmt, &ltag(body, "delta"))?;
        let first_param = layers.iter().position(|l| l.has_params()).unwrap_or(body);
        let mut grads: Vec<Option<(A::T, A::T)>> = vec![None; layers.len()];
        let mut pool_idx = fwd.argmax.len();
        for i in (0..body).rev() {
            let x = &fwd.acts[i];
            let y = &fwd.acts[i + 1];
            let in_fmt = self.spec.input_format_of(i);
            let need_input_grad = i > first_param;
            let tag = ltag(i, "dx");
            d = match layers[i].kind {
                LayerKind::Relu => a.relu_grad(&d, y)?,
                LayerKind::MaxPool { .. } => {
                    pool_idx -= 1;
                    a.maxpool_grad(&d, &fwd.argmax[pool_idx], a.shape(x))?
                }
                LayerKind::Linear { .. } => {
                    let p = self.params(i)?;
                    grads[i] = Some(a.linear_grad_params(&d, x, &p.w, decay, &ltag(i, "grad"))?);
                    if !need_input_grad {
                        break;
                    }
                    let dx = a.linear_grad_input(&d, &p.w, in_fmt, &tag)?;
                    a.reshape(dx, a.shape(x).to_vec())?
                }
                LayerKind::Conv { geo, .. } => {
                    let p = self.params(i)?;
                    grads[i] = Some(a.conv_grad_params(&d, x, &p.w, &geo, decay, &ltag(i, "grad"))?);
                    if !need_input_grad {
                        break;
                    }
                    a.conv_grad_input(&d, &p.w, &geo, in_fmt, &tag)?
                }
                LayerKind::SoftmaxXent => unreachable!("softmax is last"),
            };
        }
        Ok(Gradients { params: grads, loss, correct })
    }

    /// Apply one momentum SGD update and advance the step counter.
    pub fn sgd_step(&mut self, grads: &Gradients<A::T>, lr: f64, momentum: f64) -> Result<(usize, usize), NetError> {
        let (mut zeros, mut total) = (0, 0);
        for (i, (p, g)) in self.state.params.iter_mut().zip(&grads.params).enumerate() {
            match (p, g) {
                (Some(p), Some((dw, db))) => {
                    zeros += self.arith.momentum_step(&mut p.w, &mut p.vw, dw, lr, momentum, &ltag(i, "w"))?;
                    total += self.arith.shape(&p.w).iter().product::<usize>();
                    self.arith.momentum_step(&mut p.b, &mut p.vb, db, lr, momentum, &ltag(i, "b"))?;
                }
                (None, None) => {}
                _ => return Err(NetError::Shape(format!("gradient missing for layer {i}"))),
            }
        }
        self.state.step += 1;
        Ok((zeros, total))
    }

    /// Forward, backward and update on one minibatch.
    pub fn train_batch(&mut self, ds: &Dataset, idx: &[usize], hp: &Hyperparams, lr: f64) -> Result<StepStats, NetError> {
        self.arith.set_step(self.state.step);
        let x = self.input(ds, idx);
        let labels: Vec<usize> = idx.iter().map(|&i| ds.label(i)).collect();
        let fwd = self.forward(x, "")?;
        let g = self.backward(&fwd, &labels, hp.decay)?;
        if !g.loss.is_finite() {
            return Err(NetError::Divergence(format!("loss {} at step {}", g.loss, self.state.step)));
        }
        let (zero_updates, weight_elements) = self.sgd_step(&g, lr, hp.momentum)?;
        Ok(StepStats { loss: g.loss, correct: g.correct, examples: idx.len(), zero_updates, weight_elements })
    }

    /// Logits for a batch of images, using evaluation rounding keys.
    pub fn predict(&mut self, ds: &Dataset, idx: &[usize]) -> Result<Vec<usize>, NetError> {
        self.arith.set_step(EVAL_STEP_BASE + self.eval_calls);
        self.eval_calls += 1;
        let x = self.input(ds, idx);
        let fwd = self.forward(x, "eval.")?;
        let z = self.arith.values(fwd.acts.last().expect("logits"));
        let classes = self.spec.classes;
        Ok(z.chunks(classes).map(arith_argmax).collect())
    }

    /// Classification error in percent over the whole dataset.
    pub fn error_rate(&mut self, ds: &Dataset, batch: usize) -> Result<f64, NetError> {
        let mut wrong = 0usize;
        let all: Vec<usize> = (0..ds.len()).collect();
        for chunk in all.chunks(batch.max(1)) {
            let pred = self.predict(ds, chunk)?;
            wrong += pred.iter().zip(chunk).filter(|(&p, &i)| p != ds.label(i)).count();
        }
        Ok(100.0 * wrong as f64 / ds.len().max(1) as f64)
    }

    /// Mean softmax cross-entropy of a batch; no state changes except the
    /// evaluation key counter.
    pub fn loss(&mut self, x: A::T, labels: &[usize]) -> Result<f64, NetError> {
        self.arith.set_step(EVAL_STEP_BASE + self.eval_calls);
        self.eval_calls += 1;
        let fwd = self.forward(x, "eval.")?;
        let body = self.spec.layers.len() - 1;
        let (_, loss, _) = self.arith.softmax_xent_grad(&fwd.acts[body], labels, self.spec.input_format_of(body), "eval.loss")?;
        Ok(loss / labels.len() as f64)
    }

    /// Every format gains `extra` fractional bits; stored values are
    /// unchanged.
    pub fn widen_format(&mut self, extra: u32) -> Result<(), NetError> {
        if extra == 0 {
            return Err(NetError::Hyper("widening needs at least one bit".into()));
        }
        let spec = self.spec.widened(extra)?;
        let a = &self.arith;
        for p in self.state.params.iter_mut().flatten() {
            *p = Params { w: a.widen(&p.w, extra)?, b: a.widen(&p.b, extra)?, vw: a.widen(&p.vw, extra)?, vb: a.widen(&p.vb, extra)? };
        }
        self.spec = spec;
        Ok(())
    }

    /// Snapshot of every parameter and velocity.
    pub fn checkpoint(&self) -> Checkpoint {
        let a = &self.arith;
        let mut tensors = Vec::new();
        for (i, p) in self.state.params.iter().enumerate() {
            if let Some(p) = p {
                for (what, t) in [("w", &p.w), ("b", &p.b), ("vw", &p.vw), ("vb", &p.vb)] {
                    tensors.push((ltag(i, what), a.to_record(t)));
                }
            }
        }
        Checkpoint { seed: self.state.seed, step: self.state.step, tensors }
    }

    /// Rebuild a network from a snapshot taken with the same spec.
    pub fn restore(spec: NetSpec, arith: A, ck: &Checkpoint) -> Result<Self, NetError> {
        spec.shapes()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let Some(shape) = l.weight_shape() else {
                params.push(None);
                continue;
            };
            let load = |what: &str, want: &[usize]| -> Result<A::T, NetError> {
                let name = ltag(i, what);
                let r = ck.get(&name).ok_or_else(|| NetError::Checkpoint(format!("missing tensor {name}")))?;
                if r.shape() != want {
                    return Err(NetError::Checkpoint(format!("tensor {name} has shape {:?}, expected {want:?}", r.shape())));
                }
                if let TensorRecord::Fixed { format, .. } = r {
                    if *format != l.weight_format {
                        return Err(NetError::Checkpoint(format!("tensor {name} is {format}, expected {}", l.weight_format)));
                    }
                }
                arith.load_record(r.clone())
            };
            let bl = [l.bias_len()];
            params.push(Some(Params { w: load("w", &shape)?, b: load("b", &bl)?, vw: load("vw", &shape)?, vb: load("vb", &bl)? }));
        }
        let state = NetState { params, step: ck.step, seed: ck.seed };
        Self::from_state(spec, arith, state)
    }

    /// Every stored tensor lies within its format (trivially true for
    /// floats).
    pub fn audit_ranges(&self) -> bool {
        self.state.params.iter().flatten().all(|p| {
            [&p.w, &p.b, &p.vw, &p.vb].iter().all(|t| match self.arith.format_of(t) {
                Some(f) => self.arith.values(t).iter().all(|&v| v >= f.lower() && v <= f.upper()),
                None => true,
            })
        })
    }
}

fn arith_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
