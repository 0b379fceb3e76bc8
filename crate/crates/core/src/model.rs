//! Three-layer ReLU perceptron with hand-written backpropagation.
//!
//! Parameters live in one flat `f64` vector so that masks, Fisher scores and
//! ciphertext slots can all address them by index. The [`LayerLayout`] maps
//! index ranges back to named tensors (`fc1.weight`, `fc1.bias`, ...), which
//! is the unit used for per-layer score normalization.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpan {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Contiguous, non-overlapping named ranges covering `0..total_params`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    layers: Vec<LayerSpan>,
    total_params: usize,
}

impl LayerLayout {
    /// Lays the given `(name, length)` pairs out back to back.
    pub fn new<S: Into<String>>(spans: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut offset = 0;
        let layers = spans
            .into_iter()
            .map(|(name, len)| {
                let span = LayerSpan {
                    name: name.into(),
                    offset,
                    len,
                };
                offset += len;
                span
            })
            .collect();
        LayerLayout {
            layers,
            total_params: offset,
        }
    }

    pub fn layers(&self) -> &[LayerSpan] {
        &self.layers
    }

    pub fn total_params(&self) -> usize {
        self.total_params
    }

    pub fn span(&self, name: &str) -> Option<&LayerSpan> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Index of the layer owning parameter `index`.
    pub fn layer_of(&self, index: usize) -> Option<usize> {
        if index >= self.total_params {
            return None;
        }
        let pos = self.layers.partition_point(|l| l.offset + l.len <= index);
        Some(pos)
    }
}

/// A flat parameter (or gradient, or update) vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredParameters {
    values: Vec<f64>,
    layout: Arc<LayerLayout>,
}

impl LayeredParameters {
    pub fn new(values: Vec<f64>, layout: Arc<LayerLayout>) -> Result<Self> {
        if values.len() != layout.total_params() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.total_params()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter {i} is {}", values[i])));
        }
        Ok(LayeredParameters { values, layout })
    }

    pub fn zeros(layout: Arc<LayerLayout>) -> Self {
        LayeredParameters {
            values: vec![0.0; layout.total_params()],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `self - other`, element-wise.
    pub fn sub(&self, other: &LayeredParameters) -> Result<LayeredParameters> {
        self.check_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a - b)
            .collect();
        Ok(LayeredParameters {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn check_same_shape(&self, other: &LayeredParameters) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Shape("parameter layouts differ".into()));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LayeredParameters) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dimensions of the `in -> h1 -> h2 -> classes` perceptron.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub const DEFAULT_HIDDEN1: usize = 256;
    pub const DEFAULT_HIDDEN2: usize = 128;

    pub fn new(input_dim: usize, hidden1: usize, hidden2: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || hidden1 == 0 || hidden2 == 0 {
            return Err(Error::Parameter("model dimensions must be at least 1".into()));
        }
        if num_classes < 2 {
            return Err(Error::Parameter(format!(
                "a classifier needs at least 2 classes, got {num_classes}"
            )));
        }
        Ok(ModelSpec {
            input_dim,
            hidden1,
            hidden2,
            num_classes,
        })
    }

    /// Default hidden widths 256 and 128.
    pub fn with_default_hidden(input_dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(input_dim, Self::DEFAULT_HIDDEN1, Self::DEFAULT_HIDDEN2, num_classes)
    }

    pub fn layout(&self) -> LayerLayout {
        LayerLayout::new([
            ("fc1.weight", self.hidden1 * self.input_dim),
            ("fc1.bias", self.hidden1),
            ("fc2.weight", self.hidden2 * self.hidden1),
            ("fc2.bias", self.hidden2),
            ("fc3.weight", self.num_classes * self.hidden2),
            ("fc3.bias", self.num_classes),
        ])
    }
}

/// Row-major sample matrix with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    inputs: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("input dimension must be at least 1".into()));
        }
        if inputs.len() != dim * labels.len() {
            return Err(Error::Shape(format!(
                "{} input values do not form {} rows of width {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(LabeledBatch { inputs, dim, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the given rows (in the given order) into a new batch.
    pub fn gather(&self, rows: &[usize]) -> LabeledBatch {
        let mut inputs = Vec::with_capacity(rows.len() * self.dim);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            inputs.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        LabeledBatch {
            inputs,
            dim: self.dim,
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `batch x num_classes`, row-major.
    pub logits: Vec<f64>,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 0.01,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

/// Per-sample activation buffers, reused across samples.
struct Scratch {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    logits: Vec<f64>,
    d_logits: Vec<f64>,
    d2: Vec<f64>,
    d1: Vec<f64>,
}

/// The classifier: evaluation of a fixed architecture over external parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: ModelSpec,
    layout: Arc<LayerLayout>,
    offsets: Offsets,
}

impl Mlp {
    pub fn new(spec: ModelSpec) -> Self {
        let layout = spec.layout();
        let at = |name: &str| layout.span(name).map(|s| s.offset).unwrap_or_default();
        let offsets = Offsets {
            w1: at("fc1.weight"),
            b1: at("fc1.bias"),
            w2: at("fc2.weight"),
            b2: at("fc2.bias"),
            w3: at("fc3.weight"),
            b3: at("fc3.bias"),
        };
        Mlp {
            spec,
            layout: Arc::new(layout),
            offsets,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total_params()
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for every weight and bias.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> LayeredParameters {
        let s = &self.spec;
        let mut values = Vec::with_capacity(self.num_params());
        for (len, fan_in) in [
            (s.hidden1 * s.input_dim, s.input_dim),
            (s.hidden1, s.input_dim),
            (s.hidden2 * s.hidden1, s.hidden1),
            (s.hidden2, s.hidden1),
            (s.num_classes * s.hidden2, s.hidden2),
            (s.num_classes, s.hidden2),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..len).map(|_| rng.random_range(-bound..=bound)));
        }
        LayeredParameters {
            values,
            layout: self.layout.clone(),
        }
    }

    pub fn zeros(&self) -> LayeredParameters {
        LayeredParameters::zeros(self.layout.clone())
    }

    pub fn parameters(&self, values: Vec<f64>) -> Result<LayeredParameters> {
        LayeredParameters::new(values, self.layout.clone())
    }

    fn check(&self, params: &LayeredParameters, batch: &LabeledBatch) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        if batch.dim() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "model expects inputs of width {}, batch has {}",
                self.spec.input_dim,
                batch.dim()
            )));
        }
        if let Some(&y) = batch.labels().iter().find(|&&y| y >= self.spec.num_classes) {
            return Err(Error::Shape(format!(
                "label {y} out of range for {} classes",
                self.spec.num_classes
            )));
        }
        Ok(())
    }

    fn scratch(&self) -> Scratch {
        let s = &self.spec;
        Scratch {
            z1: vec![0.0; s.hidden1],
            a1: vec![0.0; s.hidden1],
            z2: vec![0.0; s.hidden2],
            a2: vec![0.0; s.hidden2],
            logits: vec![0.0; s.num_classes],
            d_logits: vec![0.0; s.num_classes],
            d2: vec![0.0; s.hidden2],
            d1: vec![0.0; s.hidden1],
        }
    }

    fn dense(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
        let n_in = x.len();
        for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
            *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Fills the scratch activations for one sample; returns its cross-entropy.
    fn sample_forward(&self, p: &[f64], x: &[f64], y: usize, sc: &mut Scratch) -> f64 {
        let s = &self.spec;
        let o = &self.offsets;
        Self::dense(&p[o.w1..o.b1], &p[o.b1..o.b1 + s.hidden1], x, &mut sc.z1);
        for (a, z) in sc.a1.iter_mut().zip(&sc.z1) {
            *a = z.max(0.0);
        }
        Self::dense(&p[o.w2..o.b2], &p[o.b2..o.b2 + s.hidden2], &sc.a1, &mut sc.z2);
        for (a, z) in sc.a2.iter_mut().zip(&sc.z2) {
            *a = z.max(0.0);
        }
        Self::dense(&p[o.w3..o.b3], &p[o.b3..o.b3 + s.num_classes], &sc.a2, &mut sc.logits);
        let max = sc.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + sc.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - sc.logits[y]
    }

    /// Accumulates `scale * d(loss)/d(params)` for the sample held in `sc`.
    fn sample_backward(&self, p: &[f64], x: &[f64], y: usize, sc: &mut Scratch, grad: &mut [f64], scale: f64) {
        let s = &self.spec;
        let o = &self.offsets;
        let max = sc.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = sc.logits.iter().map(|l| (l - max).exp()).sum();
        for (c, d) in sc.d_logits.iter_mut().enumerate() {
            *d = (sc.logits[c] - max).exp() / denom - if c == y { 1.0 } else { 0.0 };
        }

        // fc3
        for c in 0..s.num_classes {
            let d = sc.d_logits[c] * scale;
            grad[o.b3 + c] += d;
            let row = &mut grad[o.w3 + c * s.hidden2..o.w3 + (c + 1) * s.hidden2];
            for (g, a) in row.iter_mut().zip(&sc.a2) {
                *g += d * a;
            }
        }
        for j in 0..s.hidden2 {
            let mut acc = 0.0;
            if sc.z2[j] > 0.0 {
                for c in 0..s.num_classes {
                    acc += p[o.w3 + c * s.hidden2 + j] * sc.d_logits[c];
                }
            }
            sc.d2[j] = acc;
        }

        // fc2
        for j in 0..s.hidden2 {
            let d = sc.d2[j] * scale;
            if d == 0.0 {
                continue;
            }
            grad[o.b2 + j] += d;
            let row = &mut grad[o.w2 + j * s.hidden1..o.w2 + (j + 1) * s.hidden1];
            for (g, a) in row.iter_mut().zip(&sc.a1) {
                *g += d * a;
            }
        }
        for i in 0..s.hidden1 {
            sc.d1[i] = 0.0;
        }
        for j in 0..s.hidden2 {
            let d = sc.d2[j];
            if d == 0.0 {
                continue;
            }
            let row = &p[o.w2 + j * s.hidden1..o.w2 + (j + 1) * s.hidden1];
            for (acc, w) in sc.d1.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
        for i in 0..s.hidden1 {
            if sc.z1[i] <= 0.0 {
                sc.d1[i] = 0.0;
            }
        }

        // fc1
        for i in 0..s.hidden1 {
            let d = sc.d1[i] * scale;
            if d == 0.0 {
                continue;
            }
            grad[o.b1 + i] += d;
            let row = &mut grad[o.w1 + i * s.input_dim..o.w1 + (i + 1) * s.input_dim];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += d * xv;
            }
        }
    }

    /// Logits and mean softmax cross-entropy over the batch.
    pub fn forward(&self, params: &LayeredParameters, batch: &LabeledBatch) -> Result<ForwardOutput> {
        self.check(params, batch)?;
        let p = params.values();
        let mut sc = self.scratch();
        let mut logits = Vec::with_capacity(batch.len() * self.spec.num_classes);
        let mut total = 0.0;
        for (i, &y) in batch.labels().iter().enumerate() {
            total += self.sample_forward(p, batch.row(i), y, &mut sc);
            logits.extend_from_slice(&sc.logits);
        }
        let mean_loss = if batch.is_empty() { 0.0 } else { total / batch.len() as f64 };
        Ok(ForwardOutput { logits, mean_loss })
    }

    /// Gradient of the mean loss.
    pub fn backward(&self, params: &LayeredParameters, batch: &LabeledBatch) -> Result<LayeredParameters> {
        Ok(self.loss_and_gradient(params, batch)?.1)
    }

    pub fn loss_and_gradient(
        &self,
        params: &LayeredParameters,
        batch: &LabeledBatch,
    ) -> Result<(f64, LayeredParameters)> {
        self.check(params, batch)?;
        let mut grad = vec![0.0; self.num_params()];
        if batch.is_empty() {
            return Ok((0.0, LayeredParameters::new(grad, self.layout.clone())?));
        }
        let p = params.values();
        let scale = 1.0 / batch.len() as f64;
        let mut sc = self.scratch();
        let mut total = 0.0;
        for (i, &y) in batch.labels().iter().enumerate() {
            let x = batch.row(i);
            total += self.sample_forward(p, x, y, &mut sc);
            self.sample_backward(p, x, y, &mut sc, &mut grad, scale);
        }
        Ok((total * scale, LayeredParameters { values: grad, layout: self.layout.clone() }))
    }

    /// Calls `visit(i, grad_i)` with the cross-entropy gradient of every
    /// sample. The buffer is reused between calls.
    pub fn for_each_sample_gradient(
        &self,
        params: &LayeredParameters,
        batch: &LabeledBatch,
        mut visit: impl FnMut(usize, &[f64]),
    ) -> Result<()> {
        self.check(params, batch)?;
        let p = params.values();
        let mut sc = self.scratch();
        let mut grad = vec![0.0; self.num_params()];
        for (i, &y) in batch.labels().iter().enumerate() {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let x = batch.row(i);
            self.sample_forward(p, x, y, &mut sc);
            self.sample_backward(p, x, y, &mut sc, &mut grad, 1.0);
            visit(i, &grad);
        }
        Ok(())
    }

    /// Mean softmax output over a set of inputs (labels are ignored).
    pub fn mean_softmax(&self, params: &LayeredParameters, batch: &LabeledBatch) -> Result<Vec<f64>> {
        let out = self.forward(params, batch)?;
        let c = self.spec.num_classes;
        let mut mean = vec![0.0; c];
        for row in out.logits.chunks_exact(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|l| (l - max).exp()).sum();
            for (m, l) in mean.iter_mut().zip(row) {
                *m += (l - max).exp() / denom;
            }
        }
        let n = batch.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Ok(mean)
    }

    /// Predicted class per sample; ties go to the lowest class index.
    pub fn predict(&self, params: &LayeredParameters, batch: &LabeledBatch) -> Result<Vec<usize>> {
        let out = self.forward(params, batch)?;
        Ok(out
            .logits
            .chunks_exact(self.spec.num_classes)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate().skip(1) {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Fraction of samples whose predicted class equals the label.
    pub fn evaluate(&self, params: &LayeredParameters, batch: &LabeledBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Protocol("cannot evaluate on an empty dataset".into()));
        }
        let pred = self.predict(params, batch)?;
        let hits = pred.iter().zip(batch.labels()).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Plain minibatch SGD. Returns the trained parameters and the update
    /// `trained - params`.
    pub fn local_train<R: Rng + ?Sized>(
        &self,
        params: &LayeredParameters,
        data: &LabeledBatch,
        cfg: &TrainConfig,
        rng: &mut R,
    ) -> Result<(LayeredParameters, LayeredParameters)> {
        if data.is_empty() {
            return Err(Error::Protocol("local training on an empty dataset".into()));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        self.check(params, data)?;
        let mut current = params.clone();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for rows in order.chunks(cfg.batch_size) {
                let batch = data.gather(rows);
                let grad = self.backward(&current, &batch)?;
                for (w, g) in current.values.iter_mut().zip(grad.values()) {
                    *w -= cfg.lr * g;
                }
            }
        }
        if let Some(i) = current.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("local training diverged at parameter {i}")));
        }
        let delta = current.sub(params)?;
        Ok((current, delta))
    }

    /// Number of SGD steps `local_train` takes on `n` samples.
    pub fn steps_per_round(n: usize, cfg: &TrainConfig) -> usize {
        cfg.epochs * n.div_ceil(cfg.batch_size.max(1))
    }
}
