//! Client-trainer contract and the reference MLP classifier.
//!
//! The MLP has `L` dense layers: `tanh` on hidden layers, a linear output
//! layer and a softmax over class scores. Each layer trains under a
//! [`LayerMode`]; gradients are never computed below the lowest trainable
//! layer.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::domain::Dataset;
use crate::error::{FesError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerMode {
    Frozen,
    BiasOnly,
    Full,
}

impl LayerMode {
    fn symbol(self) -> char {
        match self {
            LayerMode::Frozen => 'F',
            LayerMode::BiasOnly => 'B',
            LayerMode::Full => 'T',
        }
    }
}

/// Per-layer training mode, index 0 is the layer nearest the input.
/// Serialized as its code string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LayerPlan {
    pub modes: Vec<LayerMode>,
}

impl LayerPlan {
    pub fn uniform(num_layers: usize, mode: LayerMode) -> Self {
        Self {
            modes: vec![mode; num_layers],
        }
    }

    pub fn all_full(num_layers: usize) -> Self {
        Self::uniform(num_layers, LayerMode::Full)
    }

    /// `frozen` bottom layers, then `bias_only` layers, then Full to the top.
    pub fn terraced(num_layers: usize, frozen: usize, bias_only: usize) -> Self {
        assert!(
            frozen + bias_only <= num_layers,
            "terraced plan exceeds layer count"
        );
        let mut modes = vec![LayerMode::Frozen; frozen];
        modes.extend(std::iter::repeat_n(LayerMode::BiasOnly, bias_only));
        modes.extend(std::iter::repeat_n(
            LayerMode::Full,
            num_layers - frozen - bias_only,
        ));
        Self { modes }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn frozen_prefix(&self) -> usize {
        self.modes
            .iter()
            .take_while(|m| **m == LayerMode::Frozen)
            .count()
    }

    pub fn count(&self, mode: LayerMode) -> usize {
        self.modes.iter().filter(|m| **m == mode).count()
    }

    /// Modes never decrease Frozen -> BiasOnly -> Full going up.
    pub fn is_terraced(&self) -> bool {
        let rank = |m: &LayerMode| match m {
            LayerMode::Frozen => 0,
            LayerMode::BiasOnly => 1,
            LayerMode::Full => 2,
        };
        self.modes.windows(2).all(|w| rank(&w[0]) <= rank(&w[1]))
    }

    /// Compact form such as `FFFBBT`.
    pub fn code(&self) -> String {
        self.modes.iter().map(|m| m.symbol()).collect()
    }

    pub fn parse_code(code: &str) -> Result<Self> {
        code.chars()
            .map(|c| match c {
                'F' => Ok(LayerMode::Frozen),
                'B' => Ok(LayerMode::BiasOnly),
                'T' => Ok(LayerMode::Full),
                other => Err(FesError::InvalidConfig(format!(
                    "unknown layer mode '{other}' in plan {code}"
                ))),
            })
            .collect::<Result<Vec<_>>>()
            .map(|modes| Self { modes })
    }
}

impl TryFrom<String> for LayerPlan {
    type Error = FesError;

    fn try_from(code: String) -> Result<Self> {
        Self::parse_code(&code)
    }
}

impl From<LayerPlan> for String {
    fn from(plan: LayerPlan) -> Self {
        plan.code()
    }
}

impl fmt::Display for LayerPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub weights: usize,
    pub biases: usize,
}

pub fn parameter_count(shapes: &[LayerShape]) -> usize {
    shapes.iter().map(|s| s.weights + s.biases).sum()
}

pub fn trainable_parameter_count(shapes: &[LayerShape], plan: &LayerPlan) -> usize {
    shapes
        .iter()
        .zip(&plan.modes)
        .map(|(s, m)| match m {
            LayerMode::Frozen => 0,
            LayerMode::BiasOnly => s.biases,
            LayerMode::Full => s.weights + s.biases,
        })
        .sum()
}

/// Flat-parameter mask matching [`FedModel::flat_params`] ordering.
pub fn trainable_mask(shapes: &[LayerShape], plan: &LayerPlan) -> Vec<bool> {
    let mut mask = Vec::with_capacity(parameter_count(shapes));
    for (s, m) in shapes.iter().zip(&plan.modes) {
        mask.extend(std::iter::repeat_n(*m == LayerMode::Full, s.weights));
        mask.extend(std::iter::repeat_n(*m != LayerMode::Frozen, s.biases));
    }
    mask
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub lr_full: f64,
    pub lr_bias: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            local_epochs: 1,
            lr_full: 1e-2,
            lr_bias: 1e-1,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(FesError::InvalidConfig(
                "trainer.batch_size and local_epochs must be >= 1".into(),
            ));
        }
        if !(self.lr_full > 0.0 && self.lr_bias > 0.0) {
            return Err(FesError::InvalidConfig(
                "trainer learning rates must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One labeled training input.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub label: usize,
}

/// What the engine needs from a client model.
///
/// Flat parameters are laid out layer by layer, weights before biases.
pub trait FedModel: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn layer_shapes(&self) -> Vec<LayerShape>;
    fn predict_dist(&self, x: &[f64]) -> Vec<f64>;
    /// Returns the updated model and the number of examples it saw (the
    /// aggregation weight).
    fn local_train(
        &self,
        data: &[Example<'_>],
        plan: &LayerPlan,
        cfg: &TrainerConfig,
        rng: &mut Rng,
    ) -> Result<(Self, usize)>;
    fn flat_params(&self) -> Vec<f64>;
    fn with_flat_params(&self, params: &[f64]) -> Result<Self>;

    fn num_layers(&self) -> usize {
        self.layer_shapes().len()
    }

    fn confidence(&self, x: &[f64]) -> (usize, f64) {
        argmax(&self.predict_dist(x))
    }
}

/// Index and value of the largest entry; ties go to the lower index.
pub fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &p) in v.iter().enumerate() {
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn accuracy<M: FedModel>(model: &M, data: &Dataset) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .samples
        .iter()
        .filter(|s| s.label == Some(model.confidence(&s.embedding).0))
        .count();
    correct as f64 / data.len() as f64
}

// ---------------------------------------------------------------------------
// Reference MLP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `fan_out x fan_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn random(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = || rng.gen_range(-bound..bound);
        let w = (0..fan_in * fan_out).map(|_| draw()).collect();
        let b = (0..fan_out).map(|_| draw()).collect();
        Self {
            fan_in,
            fan_out,
            w,
            b,
        }
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.w
            .chunks_exact(self.fan_in)
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    /// Initialize the output layer from class centroids of a small public
    /// split (the informative-initialization stand-in for prompting).
    pub pretrained: bool,
    pub public_per_class: usize,
    /// Score gap between a class centroid and the others, in logits.
    pub init_sharpness: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            hidden: 32,
            pretrained: true,
            public_per_class: 4,
            init_sharpness: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Dense>,
}

/// Per-layer gradients; `None` where nothing is trained.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Option<Vec<f64>>,
    pub b: Option<Vec<f64>>,
}

impl MlpModel {
    /// `dims = [input, hidden..., classes]`; `dims.len() - 1` layers.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn from_config(
        input_dim: usize,
        num_classes: usize,
        cfg: &ModelConfig,
        rng: &mut Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(
            cfg.hidden,
            cfg.num_layers.saturating_sub(1),
        ));
        dims.push(num_classes);
        Self::new(&dims, rng)
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(&self.layer_shapes())
    }

    pub fn trainable_parameter_count(&self, plan: &LayerPlan) -> usize {
        trainable_parameter_count(&self.layer_shapes(), plan)
    }

    /// Activations of every layer: `acts[0]` is the input, `acts[L]` the
    /// output scores.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(&acts[l]);
            if l < last {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            acts.push(z);
        }
        acts
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.forward_all(x).pop().expect("at least one layer")
    }

    /// Output of the last hidden layer (the input if there is none).
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = self.forward_all(x);
        acts.truncate(self.layers.len());
        acts.pop().expect("input present")
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &[Example<'_>]) -> f64 {
        batch
            .iter()
            .map(|e| {
                let s = self.scores(e.x);
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - s[e.label]
            })
            .sum::<f64>()
            / batch.len() as f64
    }

    /// Gradient of [`MlpModel::loss`] for the parameters `plan` trains.
    pub fn gradients(&self, batch: &[Example<'_>], plan: &LayerPlan) -> Vec<LayerGrad> {
        let nl = self.layers.len();
        let lowest = plan
            .modes
            .iter()
            .position(|m| *m != LayerMode::Frozen)
            .unwrap_or(nl);
        let mut grads: Vec<LayerGrad> = self
            .layers
            .iter()
            .zip(&plan.modes)
            .map(|(layer, m)| LayerGrad {
                w: (*m == LayerMode::Full).then(|| vec![0.0; layer.w.len()]),
                b: (*m != LayerMode::Frozen).then(|| vec![0.0; layer.b.len()]),
            })
            .collect();
        if lowest == nl || batch.is_empty() {
            return grads;
        }
        let scale = 1.0 / batch.len() as f64;
        for e in batch {
            let acts = self.forward_all(e.x);
            let mut delta = softmax(&acts[nl]);
            delta[e.label] -= 1.0;
            for d in &mut delta {
                *d *= scale;
            }
            for l in (lowest..nl).rev() {
                let layer = &self.layers[l];
                let input = &acts[l];
                if let Some(gw) = grads[l].w.as_mut() {
                    for (row, d) in gw.chunks_exact_mut(layer.fan_in).zip(&delta) {
                        for (g, a) in row.iter_mut().zip(input) {
                            *g += d * a;
                        }
                    }
                }
                if let Some(gb) = grads[l].b.as_mut() {
                    for (g, d) in gb.iter_mut().zip(&delta) {
                        *g += d;
                    }
                }
                if l > lowest {
                    let mut prev = vec![0.0; layer.fan_in];
                    for (row, d) in layer.w.chunks_exact(layer.fan_in).zip(&delta) {
                        for (p, w) in prev.iter_mut().zip(row) {
                            *p += w * d;
                        }
                    }
                    for (p, a) in prev.iter_mut().zip(input) {
                        *p *= 1.0 - a * a;
                    }
                    delta = prev;
                }
            }
        }
        grads
    }

    fn apply(&mut self, grads: &[LayerGrad], plan: &LayerPlan, cfg: &TrainerConfig) {
        for ((layer, g), mode) in self.layers.iter_mut().zip(grads).zip(&plan.modes) {
            let bias_lr = match mode {
                LayerMode::Frozen => continue,
                LayerMode::BiasOnly => cfg.lr_bias,
                LayerMode::Full => cfg.lr_full,
            };
            if let Some(gw) = &g.w {
                for (w, d) in layer.w.iter_mut().zip(gw) {
                    *w -= cfg.lr_full * d;
                }
            }
            if let Some(gb) = &g.b {
                for (b, d) in layer.b.iter_mut().zip(gb) {
                    *b -= bias_lr * d;
                }
            }
        }
    }

    /// Informative initialization of the output layer.
    ///
    /// With class centroids `mu_c` of the last-hidden-layer features of
    /// `public`, class scores become `s * (mu_c . phi - |mu_c|^2 / 2)`, a
    /// nearest-centroid rule. `s` is chosen so the mean squared centroid gap
    /// maps to `sharpness` logits.
    pub fn centroid_init(&mut self, public: &Dataset, sharpness: f64) -> Result<()> {
        let classes = self.num_classes();
        let mut sums = vec![vec![0.0; self.layers.last().map_or(0, |l| l.fan_in)]; classes];
        let mut counts = vec![0usize; classes];
        for s in &public.samples {
            let label = s
                .label
                .ok_or_else(|| FesError::InvalidConfig("public split must be labeled".into()))?;
            for (acc, v) in sums[label].iter_mut().zip(self.features(&s.embedding)) {
                *acc += v;
            }
            counts[label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(FesError::InvalidConfig(format!(
                "public split has no sample of class {c}"
            )));
        }
        let centroids: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
            .collect();
        let mut gap = 0.0;
        let mut pairs = 0usize;
        for i in 0..classes {
            for j in (i + 1)..classes {
                gap += centroids[i]
                    .iter()
                    .zip(&centroids[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>();
                pairs += 1;
            }
        }
        let gap = if pairs > 0 { gap / pairs as f64 } else { 1.0 };
        let scale = if gap > 0.0 {
            2.0 * sharpness / gap
        } else {
            1.0
        };
        let out = self.layers.last_mut().expect("at least one layer");
        for (c, mu) in centroids.iter().enumerate() {
            let norm2: f64 = mu.iter().map(|v| v * v).sum();
            out.w[c * out.fan_in..(c + 1) * out.fan_in]
                .iter_mut()
                .zip(mu)
                .for_each(|(w, m)| *w = scale * m);
            out.b[c] = -0.5 * scale * norm2;
        }
        Ok(())
    }

    // -----------------------------------------------------------------------
    // Checkpoints
    // -----------------------------------------------------------------------

    const MAGIC: &'static [u8; 4] = b"FESM";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.fan_in as u32).to_le_bytes());
            out.extend_from_slice(&(l.fan_out as u32).to_le_bytes());
        }
        for l in &self.layers {
            for v in l.w.iter().chain(&l.b) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(FesError::Checkpoint("truncated checkpoint".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != Self::MAGIC {
            return Err(FesError::Checkpoint("bad magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
        let version = u32_at(take(4)?);
        if version != Self::VERSION as usize {
            return Err(FesError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let n = u32_at(take(4)?);
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            let fan_in = u32_at(take(4)?);
            let fan_out = u32_at(take(4)?);
            dims.push((fan_in, fan_out));
        }
        let mut layers = Vec::with_capacity(n);
        for (fan_in, fan_out) in dims {
            let mut read = |count: usize| -> Result<Vec<f64>> {
                (0..count)
                    .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                    .collect()
            };
            let w = read(fan_in * fan_out)?;
            let b = read(fan_out)?;
            layers.push(Dense {
                fan_in,
                fan_out,
                w,
                b,
            });
        }
        if !cur.is_empty() {
            return Err(FesError::Checkpoint("trailing bytes".into()));
        }
        if layers.is_empty() {
            return Err(FesError::Checkpoint("no layers".into()));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl FedModel for MlpModel {
    fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        self.layers
            .iter()
            .map(|l| LayerShape {
                weights: l.w.len(),
                biases: l.b.len(),
            })
            .collect()
    }

    fn predict_dist(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.scores(x))
    }

    fn local_train(
        &self,
        data: &[Example<'_>],
        plan: &LayerPlan,
        cfg: &TrainerConfig,
        rng: &mut Rng,
    ) -> Result<(Self, usize)> {
        if data.is_empty() {
            return Err(FesError::NoTrainingData);
        }
        if plan.len() != self.layers.len() {
            return Err(FesError::ShapeMismatch(format!(
                "plan has {} layers, model has {}",
                plan.len(),
                self.layers.len()
            )));
        }
        let mut model = self.clone();
        if plan.modes.iter().all(|m| *m == LayerMode::Frozen) {
            return Ok((model, data.len()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.local_epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| data[i]));
                let grads = model.gradients(&batch, plan);
                model.apply(&grads, plan, cfg);
            }
        }
        Ok((model, data.len()))
    }

    fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(&l.b))
            .copied()
            .collect()
    }

    fn with_flat_params(&self, params: &[f64]) -> Result<Self> {
        if params.len() != self.parameter_count() {
            return Err(FesError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        let mut model = self.clone();
        let mut it = params.iter().copied();
        for l in &mut model.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = it.next().expect("length checked");
            }
        }
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximized over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Analytic gradients against central differences over every parameter the
/// plan trains. Returns the max relative error.
pub fn grad_check(model: &MlpModel, batch: &[Example<'_>], plan: &LayerPlan) -> f64 {
    assert!(!batch.is_empty(), "grad_check needs a nonempty batch");
    let grads = model.gradients(batch, plan);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = model.clone();
    let central = |probe: &mut MlpModel, get: &dyn Fn(&mut MlpModel) -> &mut f64| {
        let orig = *get(probe);
        *get(probe) = orig + FD_STEP;
        let up = probe.loss(batch);
        *get(probe) = orig - FD_STEP;
        let down = probe.loss(batch);
        *get(probe) = orig;
        (up - down) / (2.0 * FD_STEP)
    };
    for (l, g) in grads.iter().enumerate() {
        if let Some(gw) = &g.w {
            for (i, a) in gw.iter().enumerate() {
                analytic.push(*a);
                numeric.push(central(&mut probe, &|m: &mut MlpModel| {
                    &mut m.layers[l].w[i]
                }));
            }
        }
        if let Some(gb) = &g.b {
            for (i, a) in gb.iter().enumerate() {
                analytic.push(*a);
                numeric.push(central(&mut probe, &|m: &mut MlpModel| {
                    &mut m.layers[l].b[i]
                }));
            }
        }
    }
    if analytic.is_empty() {
        return 0.0;
    }
    max_relative_error(&analytic, &numeric)
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Sample-count weighted parameter average.
///
/// Each parameter's weighted terms are summed in sorted order, so the result
/// does not depend on input order. A parameter that is bit-identical across
/// all inputs (e.g. a frozen one) is copied through unchanged.
pub fn fed_avg<M: FedModel>(updates: &[(M, usize)]) -> Result<M> {
    let (first, _) = updates
        .first()
        .ok_or_else(|| FesError::InvalidConfig("fed_avg needs at least one update".into()))?;
    let shapes = first.layer_shapes();
    for (m, count) in updates {
        if m.layer_shapes() != shapes {
            return Err(FesError::ShapeMismatch(
                "fed_avg inputs have different layer shapes".into(),
            ));
        }
        if *count == 0 {
            return Err(FesError::InvalidConfig(
                "fed_avg sample counts must be positive".into(),
            ));
        }
    }
    let params: Vec<Vec<f64>> = updates.iter().map(|(m, _)| m.flat_params()).collect();
    let total: f64 = updates.iter().map(|(_, c)| *c as f64).sum();
    let mut terms = vec![0.0; updates.len()];
    let averaged: Vec<f64> = (0..params[0].len())
        .map(|j| {
            let v0 = params[0][j];
            if params.iter().all(|p| p[j].to_bits() == v0.to_bits()) {
                return v0;
            }
            for (t, (p, (_, c))) in terms.iter_mut().zip(params.iter().zip(updates)) {
                *t = *c as f64 * p[j];
            }
            terms.sort_by(f64::total_cmp);
            terms.iter().sum::<f64>() / total
        })
        .collect();
    first.with_flat_params(&averaged)
}

/// Aggregate only what clients transmit: the trainable parameters under
/// `plan`, on top of the shared `base`.
pub fn fed_avg_trainable<M: FedModel>(
    base: &M,
    updates: &[(M, usize)],
    plan: &LayerPlan,
) -> Result<M> {
    let shapes = base.layer_shapes();
    let mask = trainable_mask(&shapes, plan);
    let averaged = fed_avg(updates)?.flat_params();
    let mut merged = base.flat_params();
    for ((dst, src), m) in merged.iter_mut().zip(averaged).zip(mask) {
        if m {
            *dst = src;
        }
    }
    base.with_flat_params(&merged)
}
