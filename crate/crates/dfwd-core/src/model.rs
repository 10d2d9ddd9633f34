//! Network assembly: layer specifications, shape checking, and the
//! segmentation of a layer chain into trainable units.
//!
//! A *unit* is the smallest locally trained block: an optional batch-norm,
//! one dense or conv core, and any trailing activation / pooling / reshape
//! layers. Goodness for a unit is read at its core's pre-activation output
//! (after batch norm, before the nonlinearity). Local updates are framed in
//! terms of units; `Model` exposes forward/backward entry points at unit
//! granularity so training strategies can stream caches instead of holding
//! the whole network's activations at once.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::layers::{
    flatten_backward, flatten_forward, relu_backward, relu_forward, AvgPool, BatchNorm, Conv2d,
    Delta, Dense, Layer, LayerCache,
};
use crate::samples::{EmbedMode, LabelEmbedding};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;

/// Declarative layer description; the unit of architecture configs and
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { out_features: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    AvgPool { kernel: usize, stride: usize },
    Flatten,
}

impl LayerSpec {
    pub fn is_core(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    /// Canonical single-token rendering, parseable by `parse_arch`.
    pub fn render(&self) -> String {
        match self {
            LayerSpec::Dense { out_features } => format!("dense:{out_features}"),
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                format!("conv:{out_channels}:{kernel}:{stride}:{padding}")
            }
            LayerSpec::BatchNorm => "bn".into(),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::AvgPool { kernel, stride } => format!("pool:{kernel}:{stride}"),
            LayerSpec::Flatten => "flatten".into(),
        }
    }
}

/// Per-sample shape tracking through the chain (no batch dimension).
fn infer_shape(spec: &LayerSpec, shape: &[usize]) -> Result<Vec<usize>> {
    match spec {
        LayerSpec::Dense { out_features } => {
            if shape.len() != 1 {
                return Err(Error::config(format!(
                    "dense layer needs flat input, got shape {shape:?} (insert flatten)"
                )));
            }
            Ok(vec![*out_features])
        }
        LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
            let &[_, h, w] = shape else {
                return Err(Error::config(format!(
                    "conv layer needs [C, H, W] input, got shape {shape:?}"
                )));
            };
            let (oh, ow) = crate::layers::conv_out_hw(h, w, *kernel, *stride, *padding)?;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerSpec::BatchNorm | LayerSpec::Relu => Ok(shape.to_vec()),
        LayerSpec::AvgPool { kernel, stride } => {
            let &[c, h, w] = shape else {
                return Err(Error::config(format!(
                    "pool layer needs [C, H, W] input, got shape {shape:?}"
                )));
            };
            let p = AvgPool { k: *kernel, stride: *stride };
            let (oh, ow) = p.out_hw(h, w)?;
            Ok(vec![c, oh, ow])
        }
        LayerSpec::Flatten => Ok(vec![shape.iter().product()]),
    }
}

/// Per-sample shape at every layer boundary: `shapes[i]` feeds layer `i`,
/// and the last entry is the chain output. Pure shape arithmetic — nothing
/// is allocated, so sweeps over large architectures stay cheap.
pub fn chain_shapes(specs: &[LayerSpec], input_shape: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(specs.len() + 1);
    shapes.push(input_shape.to_vec());
    for spec in specs {
        let next = infer_shape(spec, shapes.last().expect("nonempty"))?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// One locally trained block: layers `[start, end)` with the goodness tap at
/// `core`'s output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Unit {
    pub start: usize,
    pub core: usize,
    pub end: usize,
}

/// Group a layer chain into units. Batch norm binds to the core that
/// follows it; activation/pool/reshape layers bind to the core before them
/// (or, at the very front, to the first core). A batch norm with no
/// following core is a configuration error.
pub fn segment_units(specs: &[LayerSpec]) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    let mut start = 0usize;
    let mut core: Option<usize> = None;
    for (i, spec) in specs.iter().enumerate() {
        match spec {
            LayerSpec::BatchNorm | LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                if let Some(c) = core {
                    units.push(Unit { start, core: c, end: i });
                    start = i;
                    core = None;
                }
                if spec.is_core() {
                    core = Some(i);
                }
            }
            LayerSpec::Relu | LayerSpec::AvgPool { .. } | LayerSpec::Flatten => {}
        }
    }
    match core {
        Some(c) => units.push(Unit { start, core: c, end: specs.len() }),
        None => {
            if specs[start..].iter().any(|s| matches!(s, LayerSpec::BatchNorm)) {
                return Err(Error::config(
                    "batch norm layer has no dense or conv layer after it",
                ));
            }
            match units.last_mut() {
                Some(last) => last.end = specs.len(),
                None => {
                    return Err(Error::config(
                        "architecture contains no dense or conv layer",
                    ))
                }
            }
        }
    }
    Ok(units)
}

/// A built network body: materialized layers plus their unit segmentation.
pub struct Model<T: Scalar> {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer<T>>,
    pub units: Vec<Unit>,
    /// Per-sample input shape, e.g. `[2, 28, 28]` for MNIST with a label
    /// channel.
    pub input_shape: Vec<usize>,
    /// Per-sample output shape of the final layer.
    pub output_shape: Vec<usize>,
}

impl<T: Scalar> Model<T> {
    /// Materialize a spec chain. Weights are initialized from `rng` in
    /// declaration order, so a fixed substream makes builds reproducible.
    pub fn build(specs: Vec<LayerSpec>, input_shape: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::config("architecture is empty"));
        }
        let units = segment_units(&specs)?;
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        for spec in &specs {
            let layer = match spec {
                LayerSpec::Dense { out_features } => {
                    Layer::Dense(Dense::new(shape[0], *out_features, rng))
                }
                LayerSpec::Conv2d { out_channels, kernel, stride, padding } => Layer::Conv2d(
                    Conv2d::new(shape[0], *out_channels, *kernel, *stride, *padding, rng),
                ),
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(shape[0])),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::AvgPool { kernel, stride } => {
                    Layer::AvgPool(AvgPool { k: *kernel, stride: *stride })
                }
                LayerSpec::Flatten => Layer::Flatten,
            };
            shape = infer_shape(spec, &shape)?;
            layers.push(layer);
        }
        Ok(Model {
            specs,
            layers,
            units,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    pub fn depth(&self) -> usize {
        self.units.len()
    }

    /// Per-sample shape entering layer `idx`.
    pub fn shape_into(&self, idx: usize) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for spec in &self.specs[..idx] {
            shape = infer_shape(spec, &shape)?;
        }
        Ok(shape)
    }

    /// Flattened per-sample width of a unit's *output* (after trailing
    /// layers) — the space a direct-feedback projection lands in.
    pub fn unit_output_width(&self, u: usize) -> Result<usize> {
        Ok(self.shape_into(self.units[u].end)?.iter().product())
    }

    /// Flattened per-sample width of a unit's goodness tap (core output).
    pub fn unit_goodness_width(&self, u: usize) -> Result<usize> {
        Ok(self.shape_into(self.units[u].core + 1)?.iter().product())
    }

    pub fn param_elems(&self) -> usize {
        self.layers.iter().flat_map(|l| l.params()).map(|p| p.value.len()).sum()
    }

    /// Inference-mode forward through the whole chain.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = forward_eval_layer(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Inference-mode forward that also returns each unit's per-row goodness
    /// (squared L2 norm of the core output).
    pub fn forward_eval_goodness(&self, x: &Tensor<T>) -> Result<(Vec<Vec<f64>>, Tensor<T>)> {
        let mut cur = x.clone();
        let mut per_unit = Vec::with_capacity(self.units.len());
        let mut unit_iter = self.units.iter().peekable();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = forward_eval_layer(layer, &cur)?;
            if let Some(u) = unit_iter.peek() {
                if i == u.core {
                    per_unit.push(row_sq_norms(&cur));
                    unit_iter.next();
                }
            }
        }
        Ok((per_unit, cur))
    }

    /// Training-mode forward through one unit. Returns the unit output, the
    /// goodness tap (core output), and the caches its backward needs.
    pub fn unit_forward_train(&mut self, u: usize, x: Arc<Tensor<T>>) -> Result<UnitForward<T>> {
        let unit = self.units[u];
        let mut caches = Vec::with_capacity(unit.end - unit.start);
        let mut cur = x;
        let mut tap = None;
        for i in unit.start..unit.end {
            match &mut self.layers[i] {
                Layer::Dense(d) => {
                    caches.push(LayerCache::CoreInput(cur.clone()));
                    cur = Arc::new(d.forward(&cur)?);
                    tap = Some(cur.clone());
                }
                Layer::Conv2d(c) => {
                    caches.push(LayerCache::CoreInput(cur.clone()));
                    cur = Arc::new(c.forward(&cur)?);
                    tap = Some(cur.clone());
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = bn.forward_train(&cur)?;
                    caches.push(LayerCache::Bn(cache));
                    cur = Arc::new(y);
                }
                Layer::Relu => {
                    caches.push(LayerCache::Relu(cur.clone()));
                    cur = Arc::new(relu_forward(&cur));
                }
                Layer::AvgPool(p) => {
                    caches.push(LayerCache::Shape(cur.shape().to_vec()));
                    cur = Arc::new(p.forward(&cur)?);
                }
                Layer::Flatten => {
                    caches.push(LayerCache::Shape(cur.shape().to_vec()));
                    cur = Arc::new(flatten_forward(&cur)?);
                }
            }
        }
        let v = tap.ok_or_else(|| Error::internal(format!("unit {u} has no core layer")))?;
        Ok(UnitForward { unit: u, out: cur, v, caches })
    }

    /// Backward through one unit starting from a gradient at the goodness
    /// tap (core output). Trailing layers after the core are skipped — their
    /// outputs do not influence this unit's own goodness. Returns the
    /// gradient at the unit's input.
    pub fn unit_backward_from_core(
        &mut self,
        fwd: &UnitForward<T>,
        dv: Delta<T>,
    ) -> Result<Delta<T>> {
        let unit = self.units[fwd.unit];
        self.backward_range(unit.start, unit.core + 1, fwd, dv)
    }

    /// Backward through one unit starting from a gradient at the unit's
    /// output (after trailing layers). Returns the gradient at the unit's
    /// input.
    pub fn unit_backward_from_output(
        &mut self,
        fwd: &UnitForward<T>,
        dout: Delta<T>,
    ) -> Result<Delta<T>> {
        let unit = self.units[fwd.unit];
        self.backward_range(unit.start, unit.end, fwd, dout)
    }

    fn backward_range(
        &mut self,
        lo: usize,
        hi: usize,
        fwd: &UnitForward<T>,
        mut delta: Delta<T>,
    ) -> Result<Delta<T>> {
        for i in (lo..hi).rev() {
            let cache = &fwd.caches[i - lo];
            delta = match (&mut self.layers[i], cache) {
                (Layer::Dense(d), LayerCache::CoreInput(x)) => d.backward(x, delta)?,
                (Layer::Conv2d(c), LayerCache::CoreInput(x)) => c.backward(x, delta)?,
                (Layer::BatchNorm(bn), LayerCache::Bn(cache)) => bn.backward(cache, delta)?,
                (Layer::Relu, LayerCache::Relu(x)) => relu_backward(x, delta),
                (Layer::AvgPool(p), LayerCache::Shape(shape)) => p.backward(shape, delta),
                (Layer::Flatten, LayerCache::Shape(shape)) => flatten_backward(shape, delta)?,
                (layer, _) => {
                    return Err(Error::internal(format!(
                        "cache kind mismatch at layer {} ({})",
                        i,
                        layer.kind_name()
                    )))
                }
            };
        }
        Ok(delta)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                p.zero_grad();
            }
        }
    }
}

fn forward_eval_layer<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match layer {
        Layer::Dense(d) => d.forward(x),
        Layer::Conv2d(c) => c.forward(x),
        Layer::BatchNorm(bn) => bn.forward_eval(x),
        Layer::Relu => Ok(relu_forward(x)),
        Layer::AvgPool(p) => p.forward(x),
        Layer::Flatten => flatten_forward(x),
    }
}

/// Per-row squared L2 norm, accumulated in f64.
pub fn row_sq_norms<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    let rows = t.dim0();
    let rl = t.row_len();
    (0..rows)
        .map(|r| t.data()[r * rl..(r + 1) * rl].iter().map(|v| v.to_f64() * v.to_f64()).sum())
        .collect()
}

/// Activations and caches from one unit's training forward.
pub struct UnitForward<T: Scalar> {
    pub unit: usize,
    /// Unit output (input to the next unit).
    pub out: Arc<Tensor<T>>,
    /// Goodness tap: core output, before trailing layers.
    pub v: Arc<Tensor<T>>,
    caches: Vec<LayerCache<T>>,
}

impl<T: Scalar> UnitForward<T> {
    /// Distinct cached elements (deduplicated by allocation, since e.g. the
    /// relu cache aliases the core output).
    pub fn cached_elems(&self) -> usize {
        let mut tensors: Vec<&Arc<Tensor<T>>> = vec![&self.v];
        let mut extra = 0usize;
        for c in &self.caches {
            match c {
                LayerCache::CoreInput(t) | LayerCache::Relu(t) => tensors.push(t),
                LayerCache::Bn(b) => {
                    tensors.push(&b.xhat);
                    extra += b.inv_std.len();
                }
                LayerCache::Shape(_) | LayerCache::None => {}
            }
        }
        let mut seen: Vec<*const T> = Vec::new();
        let mut total = extra;
        for t in tensors {
            let p = t.data().as_ptr();
            if !seen.contains(&p) {
                seen.push(p);
                total += t.len();
            }
        }
        total
    }
}

/// The full trainable artifact: network body plus the input-side label
/// embedding (distance-forward nets) or a classification head (the
/// end-to-end baseline).
pub struct Network<T: Scalar> {
    pub model: Model<T>,
    pub embedding: Option<LabelEmbedding<T>>,
    pub head: Option<Dense<T>>,
    pub num_classes: usize,
}

impl<T: Scalar> Network<T> {
    /// All trainable parameters in a fixed order: embedding table, body
    /// layers in declaration order (each layer's own parameter order), head.
    pub fn params_mut(&mut self) -> Vec<&mut crate::optim::Param<T>> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            if e.mode == EmbedMode::LearnableChannel {
                out.push(&mut e.table);
            }
        }
        for layer in &mut self.model.layers {
            out.extend(layer.params_mut());
        }
        if let Some(h) = &mut self.head {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn param_elems(&self) -> usize {
        let emb = match &self.embedding {
            Some(e) if e.mode == EmbedMode::LearnableChannel => e.table.value.len(),
            _ => 0,
        };
        let head = self.head.as_ref().map_or(0, |h| h.w.value.len() + h.b.value.len());
        emb + self.model.param_elems() + head
    }

    pub fn optimizer_state_elems(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.state_elems()).sum()
    }
}

/// Parse an architecture string.
///
/// Two macro forms plus a raw comma-separated token list:
/// - `mlp(1000,1000,1000)` — flatten, then per width: bn, dense, relu.
/// - `cnn(c3:24, p2, c3:48)` — `cK:N` is bn + KxK same-padded conv with N
///   output channels + relu; `pS` is SxS average pooling (stride S).
/// - raw tokens: `flatten`, `bn`, `relu`, `dense:N`, `conv:C:K:S:P`,
///   `pool:K:S`, e.g. `flatten,dense:100,relu,dense:100`.
pub fn parse_arch(s: &str) -> Result<Vec<LayerSpec>> {
    let s = s.trim();
    if let Some(inner) = s.strip_prefix("mlp(").and_then(|r| r.strip_suffix(')')) {
        let mut specs = vec![LayerSpec::Flatten];
        for tok in split_tokens(inner) {
            let w: usize = parse_num(&tok, "mlp width")?;
            specs.push(LayerSpec::BatchNorm);
            specs.push(LayerSpec::Dense { out_features: w });
            specs.push(LayerSpec::Relu);
        }
        if specs.len() == 1 {
            return Err(Error::config("mlp(...) needs at least one width"));
        }
        return Ok(specs);
    }
    if let Some(inner) = s.strip_prefix("cnn(").and_then(|r| r.strip_suffix(')')) {
        let mut specs = Vec::new();
        for tok in split_tokens(inner) {
            if let Some(rest) = tok.strip_prefix('c') {
                let (k, n) = rest.split_once(':').ok_or_else(|| {
                    Error::config(format!("bad conv token '{tok}' (expected cK:N)"))
                })?;
                let k: usize = parse_num(k, "conv kernel")?;
                let n: usize = parse_num(n, "conv channels")?;
                specs.push(LayerSpec::BatchNorm);
                specs.push(LayerSpec::Conv2d {
                    out_channels: n,
                    kernel: k,
                    stride: 1,
                    padding: k / 2,
                });
                specs.push(LayerSpec::Relu);
            } else if let Some(rest) = tok.strip_prefix('p') {
                let k: usize = parse_num(rest, "pool size")?;
                specs.push(LayerSpec::AvgPool { kernel: k, stride: k });
            } else {
                return Err(Error::config(format!("unknown cnn token '{tok}'")));
            }
        }
        if specs.is_empty() {
            return Err(Error::config("cnn(...) needs at least one layer"));
        }
        return Ok(specs);
    }
    let mut specs = Vec::new();
    for tok in split_tokens(s) {
        let mut parts = tok.split(':');
        let head = parts.next().unwrap_or("");
        let args: Vec<&str> = parts.collect();
        let spec = match (head, args.len()) {
            ("flatten", 0) => LayerSpec::Flatten,
            ("bn", 0) => LayerSpec::BatchNorm,
            ("relu", 0) => LayerSpec::Relu,
            ("dense", 1) => LayerSpec::Dense { out_features: parse_num(args[0], "dense width")? },
            ("conv", 4) => LayerSpec::Conv2d {
                out_channels: parse_num(args[0], "conv channels")?,
                kernel: parse_num(args[1], "conv kernel")?,
                stride: parse_num(args[2], "conv stride")?,
                padding: parse_num(args[3], "conv padding")?,
            },
            ("pool", 2) => LayerSpec::AvgPool {
                kernel: parse_num(args[0], "pool kernel")?,
                stride: parse_num(args[1], "pool stride")?,
            },
            _ => return Err(Error::config(format!("unknown layer token '{tok}'"))),
        };
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(Error::config("architecture string is empty"));
    }
    Ok(specs)
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
}

fn parse_num(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad {what} '{s}'")))
}

/// Depth-L chain of identical `dense:width, relu` units with no batch norm —
/// the uniform profile used for memory/time scaling studies, where every
/// unit caches exactly its input and its pre-activation.
pub fn uniform_mlp(depth: usize, width: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::with_capacity(2 * depth);
    for _ in 0..depth {
        specs.push(LayerSpec::Dense { out_features: width });
        specs.push(LayerSpec::Relu);
    }
    specs
}
