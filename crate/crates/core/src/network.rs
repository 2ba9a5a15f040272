//! Sequential network graph with im2col + GEMM convolution, forward and
//! backward passes.
//!
//! Activations are kept channel-major (`[C, N, H, W]`) so a convolution is a
//! single GEMM: `W (n x k) * cols (k x N*P)` lands directly in the output
//! layout. The GEMM column order is channel-major, then kernel row, then
//! kernel column; the crossbar mapper and simulator share that ordering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{gemm, Op, Scalar};
use crate::tensor::{Activation, WeightTensor};

/// Per-sample tensor shape `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Fc,
    Relu,
    MaxPool,
    Flatten,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Layers that move values within a channel without mixing channels.
    pub fn preserves_channels(self) -> bool {
        matches!(self, LayerKind::Relu | LayerKind::MaxPool | LayerKind::Flatten)
    }
}

/// Serializable topology description of one layer (weights live elsewhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Fc {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool { size: usize, stride: usize },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `[out_channels, in_channels, kernel_h, kernel_w]`
    pub weight: WeightTensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape[1]
    }
    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape[2], self.weight.shape[3])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[out_features, in_features]`
    pub weight: WeightTensor<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Fc(Linear<T>),
    Relu,
    MaxPool(MaxPool2d),
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Fc(_) => LayerKind::Fc,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                in_channels: c.in_channels(),
                out_channels: c.out_channels(),
                kernel: c.kernel().0,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::Fc(l) => LayerSpec::Fc {
                in_features: l.weight.shape[1],
                out_features: l.weight.shape[0],
            },
            Layer::Relu => LayerSpec::Relu,
            Layer::MaxPool(p) => LayerSpec::MaxPool { size: p.size, stride: p.stride },
            Layer::Flatten => LayerSpec::Flatten,
        }
    }

    fn from_spec(spec: &LayerSpec, layer_id: usize) -> Self {
        match *spec {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => Layer::Conv(Conv2d {
                weight: WeightTensor::zeros(vec![out_channels, in_channels, kernel, kernel], layer_id),
                bias: vec![T::zero(); out_channels],
                stride,
                padding,
            }),
            LayerSpec::Fc { in_features, out_features } => Layer::Fc(Linear {
                weight: WeightTensor::zeros(vec![out_features, in_features], layer_id),
                bias: vec![T::zero(); out_features],
            }),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size, stride } => Layer::MaxPool(MaxPool2d { size, stride }),
            LayerSpec::Flatten => Layer::Flatten,
        }
    }
}

/// Gradients of the loss with respect to every weighted layer, indexed by
/// weighted-layer ordinal.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            weights: net.weighted().map(|(w, _)| vec![T::zero(); w.len()]).collect(),
            biases: net.weighted().map(|(_, b)| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.biases)
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

enum LayerCache<T> {
    Cols(Vec<T>),
    Argmax(Vec<u32>),
    Empty,
}

/// Result of a forward pass: every layer's output, and optionally the state
/// needed to run [`Network::backward`].
pub struct Forward<T> {
    pub activations: Vec<Activation<T>>,
    cache: Option<(Activation<T>, Vec<LayerCache<T>>)>,
}

impl<T: Scalar> Forward<T> {
    /// Final layer output, `classes x batch`.
    pub fn logits(&self) -> &Activation<T> {
        self.activations.last().expect("network has at least one layer")
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// A sequential DAG of layers. Each layer has exactly one predecessor and one
/// successor; layer 0 consumes the network input and the last layer emits logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input: Shape3,
    layers: Vec<Layer<T>>,
    shapes: Vec<Shape3>,
    weighted: Vec<usize>,
}

impl<T: Scalar> Network<T> {
    pub fn new(input: Shape3, layers: Vec<Layer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape { layer: 0, detail: "network has no layers".into() });
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut weighted = Vec::new();
        let mut cur = input;
        for (i, layer) in layers.iter().enumerate() {
            cur = output_shape(i, layer, cur)?;
            shapes.push(cur);
            if matches!(layer, Layer::Conv(_) | Layer::Fc(_)) {
                weighted.push(i);
            }
        }
        if weighted.is_empty() {
            return Err(Error::Shape { layer: 0, detail: "network has no weighted layer".into() });
        }
        let last = *shapes.last().unwrap();
        if last.height != 1 || last.width != 1 {
            return Err(Error::Shape {
                layer: layers.len() - 1,
                detail: format!("network output must be flat, got {last:?}"),
            });
        }
        Ok(Self { input, layers, shapes, weighted })
    }

    /// Builds a zero-initialized network from a topology description.
    pub fn from_specs(input: Shape3, specs: &[LayerSpec]) -> Result<Self> {
        let mut wid = 0;
        let layers = specs
            .iter()
            .map(|s| {
                let l = Layer::from_spec(s, wid);
                if matches!(s, LayerSpec::Conv { .. } | LayerSpec::Fc { .. }) {
                    wid += 1;
                }
                l
            })
            .collect();
        Self::new(input, layers)
    }

    /// LeNet-5 for 28x28 single-channel input.
    pub fn lenet5_specs() -> (Shape3, Vec<LayerSpec>) {
        use LayerSpec::*;
        let specs = vec![
            Conv { in_channels: 1, out_channels: 6, kernel: 5, stride: 1, padding: 2 },
            Relu,
            MaxPool { size: 2, stride: 2 },
            Conv { in_channels: 6, out_channels: 16, kernel: 5, stride: 1, padding: 0 },
            Relu,
            MaxPool { size: 2, stride: 2 },
            Flatten,
            Fc { in_features: 400, out_features: 120 },
            Relu,
            Fc { in_features: 120, out_features: 84 },
            Relu,
            Fc { in_features: 84, out_features: 10 },
        ];
        (Shape3::new(1, 28, 28), specs)
    }

    pub fn lenet5<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (input, specs) = Self::lenet5_specs();
        let mut net = Self::from_specs(input, &specs).expect("LeNet-5 topology is valid");
        net.init_kaiming(rng);
        net
    }

    /// Kaiming-uniform fan-in initialization of all weights; biases zeroed.
    pub fn init_kaiming<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (w, b) in self.weighted_mut() {
            let bound = (6.0 / w.cols() as f64).sqrt();
            for v in w.values.iter_mut() {
                *v = T::from_f64_lossy(rng.random_range(-bound..bound));
            }
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn input_shape(&self) -> Shape3 {
        self.input
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> Shape3 {
        self.shapes[i]
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> Shape3 {
        if i == 0 {
            self.input
        } else {
            self.shapes[i - 1]
        }
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().unwrap().channels
    }

    /// Layer indices of the conv/fc layers, in order.
    pub fn weighted_indices(&self) -> &[usize] {
        &self.weighted
    }

    pub fn num_weighted(&self) -> usize {
        self.weighted.len()
    }

    pub fn layer(&self, i: usize) -> &Layer<T> {
        &self.layers[i]
    }

    pub fn weighted(&self) -> impl Iterator<Item = (&WeightTensor<T>, &Vec<T>)> + '_ {
        self.weighted.iter().map(move |&i| match &self.layers[i] {
            Layer::Conv(c) => (&c.weight, &c.bias),
            Layer::Fc(l) => (&l.weight, &l.bias),
            _ => unreachable!(),
        })
    }

    pub fn weighted_mut(&mut self) -> impl Iterator<Item = (&mut WeightTensor<T>, &mut Vec<T>)> + '_ {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some((&mut c.weight, &mut c.bias)),
            Layer::Fc(f) => Some((&mut f.weight, &mut f.bias)),
            _ => None,
        })
    }

    /// Weights of the `l`-th weighted layer.
    pub fn weight(&self, l: usize) -> &WeightTensor<T> {
        self.weighted().nth(l).expect("weighted layer ordinal in range").0
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut WeightTensor<T> {
        self.weighted_mut().nth(l).expect("weighted layer ordinal in range").0
    }

    pub fn bias(&self, l: usize) -> &[T] {
        self.weighted().nth(l).expect("weighted layer ordinal in range").1
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut Vec<T> {
        self.weighted_mut().nth(l).expect("weighted layer ordinal in range").1
    }

    pub fn weight_count(&self) -> usize {
        self.weighted().map(|(w, _)| w.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weighted().all(|(w, b)| w.is_finite() && b.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv2d {
                    weight: c.weight.cast(),
                    bias: c.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    stride: c.stride,
                    padding: c.padding,
                }),
                Layer::Fc(f) => Layer::Fc(Linear {
                    weight: f.weight.cast(),
                    bias: f.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                }),
                Layer::Relu => Layer::Relu,
                Layer::MaxPool(p) => Layer::MaxPool(*p),
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        Network { input: self.input, layers, shapes: self.shapes.clone(), weighted: self.weighted.clone() }
    }

    /// Runs the network on `input`. With `keep_cache` the result can be fed to
    /// [`Network::backward`].
    pub fn forward(&self, input: &Activation<T>, keep_cache: bool) -> Result<Forward<T>> {
        let s = self.input;
        if input.channels != s.channels || input.height != s.height || input.width != s.width {
            return Err(Error::Shape {
                layer: 0,
                detail: format!(
                    "input is {}x{}x{}, network expects {}x{}x{}",
                    input.channels, input.height, input.width, s.channels, s.height, s.width
                ),
            });
        }
        let mut activations: Vec<Activation<T>> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x = if i == 0 { input } else { &activations[i - 1] };
            let (out, cache) = match layer {
                Layer::Conv(c) => {
                    let (out, cols) = conv_forward(c, x);
                    (out, if keep_cache { LayerCache::Cols(cols) } else { LayerCache::Empty })
                }
                Layer::Fc(f) => (fc_forward(f, x), LayerCache::Empty),
                Layer::Relu => {
                    let mut out = x.clone();
                    out.data.iter_mut().for_each(|v| {
                        if *v < T::zero() {
                            *v = T::zero()
                        }
                    });
                    (out, LayerCache::Empty)
                }
                Layer::MaxPool(p) => {
                    let (out, arg) = maxpool_forward(p, x);
                    (out, if keep_cache { LayerCache::Argmax(arg) } else { LayerCache::Empty })
                }
                Layer::Flatten => (flatten_forward(x), LayerCache::Empty),
            };
            if keep_cache {
                caches.push(cache);
            }
            activations.push(out);
        }
        let cache = keep_cache.then(|| (input.clone(), caches));
        Ok(Forward { activations, cache })
    }

    /// Applies layer `i` alone to `x` (no cache).
    pub fn forward_layer(&self, i: usize, x: &Activation<T>) -> Activation<T> {
        match &self.layers[i] {
            Layer::Conv(c) => conv_forward(c, x).0,
            Layer::Fc(f) => fc_forward(f, x),
            Layer::Relu => {
                let mut out = x.clone();
                out.data.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = T::zero()
                    }
                });
                out
            }
            Layer::MaxPool(p) => maxpool_forward(p, x).0,
            Layer::Flatten => flatten_forward(x),
        }
    }

    /// Logits only, for inference.
    pub fn logits(&self, input: &Activation<T>) -> Result<Activation<T>> {
        let mut f = self.forward(input, false)?;
        Ok(f.activations.pop().unwrap())
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the logits) through
    /// the cached forward pass.
    pub fn backward(&self, fwd: &Forward<T>, dlogits: &Activation<T>) -> Result<Gradients<T>> {
        let (input, caches) = fwd.cache.as_ref().ok_or(Error::MissingForwardCache)?;
        let logits = fwd.logits();
        if dlogits.data.len() != logits.data.len() {
            return Err(Error::Shape {
                layer: self.layers.len() - 1,
                detail: format!("dlogits has {} values, logits {}", dlogits.data.len(), logits.data.len()),
            });
        }
        let mut grads = Gradients::zeros_like(self);
        let mut g = dlogits.clone();
        let mut wl = self.weighted.len();
        for i in (0..self.layers.len()).rev() {
            let x = if i == 0 { input } else { &fwd.activations[i - 1] };
            let need_input_grad = i > 0;
            g = match (&self.layers[i], &caches[i]) {
                (Layer::Conv(c), LayerCache::Cols(cols)) => {
                    wl -= 1;
                    conv_backward(c, x, cols, &g, &mut grads.weights[wl], &mut grads.biases[wl], need_input_grad)
                }
                (Layer::Fc(f), _) => {
                    wl -= 1;
                    fc_backward(f, x, &g, &mut grads.weights[wl], &mut grads.biases[wl], need_input_grad)
                }
                (Layer::Relu, _) => {
                    let out = &fwd.activations[i];
                    for (gv, o) in g.data.iter_mut().zip(&out.data) {
                        if *o <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    g
                }
                (Layer::MaxPool(_), LayerCache::Argmax(arg)) => {
                    let mut gx = Activation::zeros(x.channels, x.batch, x.height, x.width);
                    for (gv, &a) in g.data.iter().zip(arg) {
                        gx.data[a as usize] += *gv;
                    }
                    gx
                }
                (Layer::Flatten, _) => flatten_backward(x, &g),
                _ => return Err(Error::MissingForwardCache),
            };
        }
        Ok(grads)
    }

    /// Predicted class per sample.
    pub fn predict(&self, input: &Activation<T>) -> Result<Vec<usize>> {
        Ok(argmax_columns(&self.logits(input)?))
    }
}

/// Index of the largest logit for every sample of a `classes x batch` matrix.
/// Ties resolve to the lowest class index.
pub fn argmax_columns<T: Scalar>(logits: &Activation<T>) -> Vec<usize> {
    let (classes, batch) = (logits.channels, logits.batch);
    (0..batch)
        .map(|b| {
            let mut best = 0;
            for c in 1..classes {
                if logits.data[c * batch + b] > logits.data[best * batch + b] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn output_shape<T: Scalar>(i: usize, layer: &Layer<T>, x: Shape3) -> Result<Shape3> {
    let err = |detail: String| Error::Shape { layer: i, detail };
    match layer {
        Layer::Conv(c) => {
            if c.weight.shape.len() != 4 || c.bias.len() != c.out_channels() {
                return Err(err(format!("malformed conv weights {:?}", c.weight.shape)));
            }
            if c.in_channels() != x.channels {
                return Err(err(format!("conv expects {} channels, got {}", c.in_channels(), x.channels)));
            }
            if c.stride == 0 {
                return Err(err("stride must be >= 1".into()));
            }
            let (kh, kw) = c.kernel();
            let (ph, pw) = (x.height + 2 * c.padding, x.width + 2 * c.padding);
            if ph < kh || pw < kw {
                return Err(err(format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
            }
            Ok(Shape3::new(c.out_channels(), (ph - kh) / c.stride + 1, (pw - kw) / c.stride + 1))
        }
        Layer::Fc(f) => {
            if f.weight.shape.len() != 2 || f.bias.len() != f.weight.shape[0] {
                return Err(err(format!("malformed fc weights {:?}", f.weight.shape)));
            }
            if x.height != 1 || x.width != 1 {
                return Err(err(format!("fc needs a flat input, got {x:?}")));
            }
            if f.weight.shape[1] != x.channels {
                return Err(err(format!("fc expects {} features, got {}", f.weight.shape[1], x.channels)));
            }
            Ok(Shape3::new(f.weight.shape[0], 1, 1))
        }
        Layer::Relu => Ok(x),
        Layer::MaxPool(p) => {
            if p.size == 0 || p.stride == 0 || x.height < p.size || x.width < p.size {
                return Err(err(format!("pool {p:?} does not fit {x:?}")));
            }
            Ok(Shape3::new(x.channels, (x.height - p.size) / p.stride + 1, (x.width - p.size) / p.stride + 1))
        }
        Layer::Flatten => Ok(Shape3::new(x.numel(), 1, 1)),
    }
}

struct ConvGeom {
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn of<T: Scalar>(c: &Conv2d<T>, x: &Activation<T>) -> Self {
        let (kh, kw) = c.kernel();
        Self {
            kh,
            kw,
            stride: c.stride,
            pad: c.padding,
            oh: (x.height + 2 * c.padding - kh) / c.stride + 1,
            ow: (x.width + 2 * c.padding - kw) / c.stride + 1,
        }
    }
}

/// Unfolds `x` into a `(C*kh*kw) x (N*OH*OW)` matrix.
pub(crate) fn im2col<T: Scalar>(
    x: &Activation<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let oh = (x.height + 2 * pad - kh) / stride + 1;
    let ow = (x.width + 2 * pad - kw) / stride + 1;
    let g = ConvGeom { kh, kw, stride, pad, oh, ow };
    (im2col_geom(x, &g), oh, ow)
}

fn im2col_geom<T: Scalar>(x: &Activation<T>, g: &ConvGeom) -> Vec<T> {
    let (h, w, n) = (x.height, x.width, x.batch);
    let p = g.oh * g.ow;
    let bp = n * p;
    let rows = x.channels * g.kh * g.kw;
    let mut cols = vec![T::zero(); rows * bp];
    for c in 0..x.channels {
        for r in 0..g.kh {
            for s in 0..g.kw {
                let row = (c * g.kh + r) * g.kw + s;
                let dst = &mut cols[row * bp..(row + 1) * bp];
                for b in 0..n {
                    let plane = &x.data[(c * n + b) * h * w..(c * n + b + 1) * h * w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + r) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut dst[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + s) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], x: &Activation<T>, g: &ConvGeom) -> Activation<T> {
    let (h, w, n) = (x.height, x.width, x.batch);
    let p = g.oh * g.ow;
    let bp = n * p;
    let mut out = Activation::zeros(x.channels, n, h, w);
    for c in 0..x.channels {
        for r in 0..g.kh {
            for s in 0..g.kw {
                let row = (c * g.kh + r) * g.kw + s;
                let src = &cols[row * bp..(row + 1) * bp];
                for b in 0..n {
                    let plane = &mut out.data[(c * n + b) * h * w..(c * n + b + 1) * h * w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + r) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + s) as isize - g.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[b * p + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_forward<T: Scalar>(c: &Conv2d<T>, x: &Activation<T>) -> (Activation<T>, Vec<T>) {
    let g = ConvGeom::of(c, x);
    let cols = im2col_geom(x, &g);
    let n = c.out_channels();
    let k = c.weight.cols();
    let bp = x.batch * g.oh * g.ow;
    let mut out = Activation::zeros(n, x.batch, g.oh, g.ow);
    for (f, row) in out.data.chunks_mut(bp).enumerate() {
        row.iter_mut().for_each(|v| *v = c.bias[f]);
    }
    gemm(n, k, bp, &c.weight.values, Op::N, &cols, Op::N, T::one(), &mut out.data);
    (out, cols)
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    c: &Conv2d<T>,
    x: &Activation<T>,
    cols: &[T],
    gout: &Activation<T>,
    dw: &mut [T],
    db: &mut [T],
    need_input_grad: bool,
) -> Activation<T> {
    let g = ConvGeom::of(c, x);
    let n = c.out_channels();
    let k = c.weight.cols();
    let bp = x.batch * g.oh * g.ow;
    gemm(n, bp, k, &gout.data, Op::N, cols, Op::T, T::zero(), dw);
    for (f, row) in gout.data.chunks(bp).enumerate() {
        db[f] = row.iter().copied().sum();
    }
    if !need_input_grad {
        return Activation::zeros(0, 0, 0, 0);
    }
    let mut dcols = vec![T::zero(); k * bp];
    gemm(k, n, bp, &c.weight.values, Op::T, &gout.data, Op::N, T::zero(), &mut dcols);
    col2im(&dcols, x, &g)
}

fn fc_forward<T: Scalar>(f: &Linear<T>, x: &Activation<T>) -> Activation<T> {
    let (out_f, in_f) = (f.weight.shape[0], f.weight.shape[1]);
    let n = x.batch;
    let mut out = Activation::zeros(out_f, n, 1, 1);
    for (o, row) in out.data.chunks_mut(n).enumerate() {
        row.iter_mut().for_each(|v| *v = f.bias[o]);
    }
    gemm(out_f, in_f, n, &f.weight.values, Op::N, &x.data, Op::N, T::one(), &mut out.data);
    out
}

fn fc_backward<T: Scalar>(
    f: &Linear<T>,
    x: &Activation<T>,
    gout: &Activation<T>,
    dw: &mut [T],
    db: &mut [T],
    need_input_grad: bool,
) -> Activation<T> {
    let (out_f, in_f) = (f.weight.shape[0], f.weight.shape[1]);
    let n = x.batch;
    gemm(out_f, n, in_f, &gout.data, Op::N, &x.data, Op::T, T::zero(), dw);
    for (o, row) in gout.data.chunks(n).enumerate() {
        db[o] = row.iter().copied().sum();
    }
    if !need_input_grad {
        return Activation::zeros(0, 0, 0, 0);
    }
    let mut gx = Activation::zeros(in_f, n, 1, 1);
    gemm(in_f, out_f, n, &f.weight.values, Op::T, &gout.data, Op::N, T::zero(), &mut gx.data);
    gx
}

fn maxpool_forward<T: Scalar>(p: &MaxPool2d, x: &Activation<T>) -> (Activation<T>, Vec<u32>) {
    let oh = (x.height - p.size) / p.stride + 1;
    let ow = (x.width - p.size) / p.stride + 1;
    let mut out = Activation::zeros(x.channels, x.batch, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    let (h, w) = (x.height, x.width);
    for plane in 0..x.channels * x.batch {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * p.stride * w + ox * p.stride;
                for dy in 0..p.size {
                    for dx in 0..p.size {
                        let idx = base + (oy * p.stride + dy) * w + ox * p.stride + dx;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

fn flatten_forward<T: Scalar>(x: &Activation<T>) -> Activation<T> {
    let plane = x.plane();
    let n = x.batch;
    let mut out = Activation::zeros(x.channels * plane, n, 1, 1);
    for c in 0..x.channels {
        for b in 0..n {
            let src = &x.data[(c * n + b) * plane..(c * n + b + 1) * plane];
            for (p, v) in src.iter().enumerate() {
                out.data[(c * plane + p) * n + b] = *v;
            }
        }
    }
    out
}

fn flatten_backward<T: Scalar>(x: &Activation<T>, g: &Activation<T>) -> Activation<T> {
    let plane = x.plane();
    let n = x.batch;
    let mut gx = Activation::zeros(x.channels, n, x.height, x.width);
    for c in 0..x.channels {
        for b in 0..n {
            for p in 0..plane {
                gx.data[(c * n + b) * plane + p] = g.data[(c * plane + p) * n + b];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::softmax_cross_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv_net(kernel: Vec<f64>, n: usize, m: usize, k: usize, pad: usize) -> Network<f64> {
        let layers = vec![
            Layer::Conv(Conv2d {
                weight: WeightTensor::new(vec![n, m, k, k], kernel, 0).unwrap(),
                bias: vec![0.0; n],
                stride: 1,
                padding: pad,
            }),
            Layer::Flatten,
        ];
        Network::new(Shape3::new(m, 2, 2), layers).unwrap()
    }

    #[test]
    fn identity_1x1_conv_returns_input() {
        let net = conv_net(vec![1.0], 1, 1, 1, 0);
        let x = Activation::from_nchw(1, 1, 2, 2, &[0.5, -1.0, 2.0, 3.5]);
        let out = net.logits(&x).unwrap();
        assert_eq!(out.data, vec![0.5, -1.0, 2.0, 3.5]);
    }

    #[test]
    fn hand_computed_2x2_conv() {
        // 2x2 input, 2x2 kernel, padding 1 -> 3x3 output.
        // input  [[1,2],[3,4]], kernel [[1,0],[-1,2]]
        // out(0,0) = k11*x00 = 2*1 = 2
        // out(0,1) = k10*x00 + k11*x01 = -1*1 + 2*2 = 3
        // out(1,1) = 1*1 + 0*2 + -1*3 + 2*4 = 6
        // out(2,2) = k00*x11 = 4
        let net = conv_net(vec![1.0, 0.0, -1.0, 2.0], 1, 1, 2, 1);
        let x = Activation::from_nchw(1, 1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = net.logits(&x).unwrap();
        assert_eq!(out.data.len(), 9);
        assert_eq!(out.data[0], 2.0);
        assert_eq!(out.data[1], 3.0);
        assert_eq!(out.data[4], 6.0);
        assert_eq!(out.data[8], 4.0);
    }

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net: Network<f32> = Network::lenet5(&mut rng);
        for (w, _) in net.weighted_mut() {
            w.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let x: Vec<f32> = (0..3 * 784).map(|i| (i % 17) as f32 / 17.0).collect();
        let logits = net.logits(&Activation::from_nchw(3, 1, 28, 28, &x)).unwrap();
        assert!(logits.data.iter().all(|&v| v == 0.0));
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 9]);
        assert!((loss - (10f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn input_shape_mismatch_names_layer_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: Network<f32> = Network::lenet5(&mut rng);
        let x = Activation::zeros(1, 2, 27, 28);
        match net.forward(&x, false) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 0),
            other => panic!("expected shape error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn fc_on_spatial_input_is_rejected_at_its_index() {
        let specs = [
            LayerSpec::Conv { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 0 },
            LayerSpec::Fc { in_features: 8, out_features: 2 },
        ];
        match Network::<f32>::from_specs(Shape3::new(1, 4, 4), &specs) {
            Err(Error::Shape { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn backward_without_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: Network<f32> = Network::lenet5(&mut rng);
        let x = Activation::zeros(1, 1, 28, 28);
        let fwd = net.forward(&x, false).unwrap();
        let d = fwd.logits().clone();
        assert!(matches!(net.backward(&fwd, &d), Err(Error::MissingForwardCache)));
    }

    #[test]
    fn forward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net: Network<f32> = Network::lenet5(&mut rng);
        let x: Vec<f32> = (0..2 * 784).map(|i| ((i * 31) % 101) as f32 / 101.0).collect();
        let x = Activation::from_nchw(2, 1, 28, 28, &x);
        let a = net.logits(&x).unwrap();
        let b = net.logits(&x).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn lenet_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: Network<f32> = Network::lenet5(&mut rng);
        assert_eq!(net.num_weighted(), 5);
        assert_eq!(net.weight_count(), 150 + 2400 + 48000 + 10080 + 840);
        assert_eq!(net.output_shape(5), Shape3::new(16, 5, 5));
        assert_eq!(net.classes(), 10);
    }
}
