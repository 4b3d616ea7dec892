//! The four multiple-instance network architectures.
//!
//! All variants share a trunk of ReLU fully connected layers applied to every
//! instance of a bag independently, each followed by inverted dropout. They
//! differ in where pooling happens and how many sigmoid score heads they have:
//!
//! | variant     | pooling input                          | heads |
//! |-------------|----------------------------------------|-------|
//! | `MiNet`     | per-instance scores from the head       | 1     |
//! | `MINet`     | last trunk features                    | 1     |
//! | `MINetDs`   | features of every trunk level          | one per level |
//! | `MINetRc`   | every level, summed into a running bag vector | 1 |
//!
//! The bag score is the mean of the head scores, so for single-head variants
//! it is the head score itself.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{apply_mask, Activation, DenseLayer, Dropout};
use crate::numerics::{Matrix, Rng};
use crate::pooling::{pool_backward, pool_forward, PoolCache, PoolingMethod, PoolingSpec};
use crate::training::{bce_loss, clamp_score};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Instance-space network: score instances, pool the scores.
    #[serde(rename = "mi-Net")]
    MiNet,
    /// Embedded-space network: pool instance features, score the bag vector.
    #[serde(rename = "MI-Net")]
    MINet,
    /// MI-Net with a pooling branch and score head after every trunk layer.
    #[serde(rename = "MI-Net+DS")]
    MINetDs,
    /// MI-Net whose pooled bag vectors accumulate across levels.
    #[serde(rename = "MI-Net+RC")]
    MINetRc,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::MiNet, Variant::MINet, Variant::MINetDs, Variant::MINetRc];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MiNet => "mi-Net",
            Variant::MINet => "MI-Net",
            Variant::MINetDs => "MI-Net+DS",
            Variant::MINetRc => "MI-Net+RC",
        }
    }

    /// Short config token.
    pub fn token(self) -> &'static str {
        match self {
            Variant::MiNet => "instance",
            Variant::MINet => "embedded",
            Variant::MINetDs => "ds",
            Variant::MINetRc => "rc",
        }
    }

    pub fn default_widths(self) -> Vec<usize> {
        match self {
            Variant::MINetRc => vec![128, 128, 128, 1],
            _ => vec![256, 128, 64, 1],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.token().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant '{s}' (expected instance, embedded, ds or rc)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub variant: Variant,
    /// Output width of every fully connected layer, ending with the 1-unit score layer.
    pub widths: Vec<usize>,
    pub pooling: PoolingSpec,
    pub dropout_rate: f64,
    pub seed: u64,
    /// Per-head loss weights for deep supervision; empty means all 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ds_weights: Vec<f64>,
}

impl NetworkSpec {
    pub fn new(variant: Variant) -> Self {
        NetworkSpec {
            variant,
            widths: variant.default_widths(),
            pooling: PoolingSpec::max(),
            dropout_rate: 0.5,
            seed: 0,
            ds_weights: Vec::new(),
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.widths = widths;
        self
    }

    pub fn with_pooling(mut self, pooling: PoolingSpec) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Widths of the ReLU trunk (everything but the final score layer).
    pub fn hidden_widths(&self) -> &[usize] {
        &self.widths[..self.widths.len().saturating_sub(1)]
    }

    pub fn head_count(&self) -> usize {
        match self.variant {
            Variant::MINetDs => self.hidden_widths().len(),
            _ => 1,
        }
    }

    pub fn head_weights(&self) -> Vec<f64> {
        if self.ds_weights.is_empty() {
            vec![1.0; self.head_count()]
        } else {
            self.ds_weights.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config(format!(
                "widths {:?}: need at least one hidden layer and the score layer",
                self.widths
            )));
        }
        if *self.widths.last().unwrap() != 1 {
            return Err(Error::config(format!(
                "widths {:?}: the last layer must have exactly 1 unit",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::config(format!("widths {:?}: zero-width layer", self.widths)));
        }
        if self.variant == Variant::MINetRc {
            let hidden = self.hidden_widths();
            if hidden.iter().any(|&w| w != hidden[0]) {
                return Err(Error::config(format!(
                    "widths {:?}: residual connections need equal hidden widths",
                    self.widths
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        self.pooling.validate()?;
        if !self.ds_weights.is_empty() {
            if self.ds_weights.len() != self.head_count() {
                return Err(Error::config(format!(
                    "{} ds_weights given for {} heads",
                    self.ds_weights.len(),
                    self.head_count()
                )));
            }
            if self.ds_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::config("ds_weights must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Number of trainable parameters for a given input dimension.
    pub fn parameter_count(&self, input_dim: usize) -> usize {
        let hidden = self.hidden_widths();
        let mut fan_in = input_dim;
        let mut count = 0;
        for &w in hidden {
            count += fan_in * w + w;
            fan_in = w;
        }
        let heads: usize = match self.variant {
            Variant::MINetDs => hidden.iter().map(|w| w + 1).sum(),
            _ => fan_in + 1,
        };
        count + heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active.
    Train,
    /// Deterministic inference.
    Eval,
}

/// Test hook for the gradient-check negative control.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the LSE pooling gradient by 1.05.
    LseBackward,
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Tape {
    pub(crate) version: u64,
    pub(crate) input: Matrix,
    pub(crate) pre: Vec<Matrix>,
    pub(crate) masks: Vec<Option<Matrix>>,
    pub(crate) features: Vec<Matrix>,
    pub(crate) pools: Vec<PoolCache>,
    pub(crate) head_inputs: Vec<Matrix>,
    pub(crate) head_pre: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct BagForward {
    pub bag_score: f64,
    /// One score per head.
    pub level_scores: Vec<f64>,
    /// Per-instance probabilities (mi-Net only).
    pub instance_scores: Option<Vec<f64>>,
    pub(crate) tape: Option<Tape>,
}

impl BagForward {
    pub fn predicted_label(&self) -> u8 {
        u8::from(self.bag_score >= 0.5)
    }

    pub fn has_cache(&self) -> bool {
        self.tape.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    input_dim: usize,
    trunk: Vec<DenseLayer>,
    heads: Vec<DenseLayer>,
    dropouts: Vec<Dropout>,
    version: u64,
    fault: Option<Fault>,
}

impl Network {
    /// Glorot-uniform weights drawn from `spec.seed` (trunk first, then heads), zero biases.
    pub fn build(spec: &NetworkSpec, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("input dimension must be at least 1"));
        }
        spec.validate()?;
        let mut rng = Rng::new(spec.seed);
        let hidden = spec.hidden_widths();
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &w in hidden {
            trunk.push(DenseLayer::glorot(fan_in, w, Activation::Relu, &mut rng));
            fan_in = w;
        }
        let heads = match spec.variant {
            Variant::MINetDs => hidden
                .iter()
                .map(|&w| DenseLayer::glorot(w, 1, Activation::Sigmoid, &mut rng))
                .collect(),
            _ => vec![DenseLayer::glorot(fan_in, 1, Activation::Sigmoid, &mut rng)],
        };
        Self::from_layers(spec.clone(), input_dim, trunk, heads)
    }

    /// Assembles a network from explicit layers (used when loading saved models).
    pub fn from_layers(
        spec: NetworkSpec,
        input_dim: usize,
        trunk: Vec<DenseLayer>,
        heads: Vec<DenseLayer>,
    ) -> Result<Self> {
        spec.validate()?;
        let hidden = spec.hidden_widths();
        if trunk.len() != hidden.len() || heads.len() != spec.head_count() {
            return Err(Error::config(format!(
                "{} trunk layers and {} heads do not match a {} with widths {:?}",
                trunk.len(),
                heads.len(),
                spec.variant,
                spec.widths
            )));
        }
        let mut fan_in = input_dim;
        for (l, (layer, &w)) in trunk.iter().zip(hidden).enumerate() {
            if layer.in_dim() != fan_in || layer.out_dim() != w {
                return Err(Error::shape(format!(
                    "trunk layer {l} is {}->{}, expected {fan_in}->{w}",
                    layer.in_dim(),
                    layer.out_dim()
                )));
            }
            fan_in = w;
        }
        for (k, head) in heads.iter().enumerate() {
            let expect = match spec.variant {
                Variant::MINetDs => hidden[k],
                _ => fan_in,
            };
            if head.in_dim() != expect || head.out_dim() != 1 {
                return Err(Error::shape(format!(
                    "head {k} is {}->{}, expected {expect}->1",
                    head.in_dim(),
                    head.out_dim()
                )));
            }
        }
        let dropouts = hidden
            .iter()
            .map(|_| Dropout::new(spec.dropout_rate))
            .collect::<Result<_>>()?;
        Ok(Network {
            spec,
            input_dim,
            trunk,
            heads,
            dropouts,
            version: 0,
            fault: None,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn trunk(&self) -> &[DenseLayer] {
        &self.trunk
    }

    pub fn heads(&self) -> &[DenseLayer] {
        &self.heads
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|(_, l)| l.parameter_count()).sum()
    }

    /// All layers with stable names (`trunk.0`, ..., `head.0`, ...).
    pub fn layers(&self) -> impl Iterator<Item = (String, &DenseLayer)> + '_ {
        let trunk = self.trunk.iter().enumerate().map(|(i, l)| (format!("trunk.{i}"), l));
        let heads = self.heads.iter().enumerate().map(|(i, l)| (format!("head.{i}"), l));
        trunk.chain(heads)
    }

    /// Mutable access to every layer. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> impl Iterator<Item = (String, &mut DenseLayer)> + '_ {
        self.version += 1;
        let trunk = self
            .trunk
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("trunk.{i}"), l));
        let heads = self.heads.iter_mut().enumerate().map(|(i, l)| (format!("head.{i}"), l));
        trunk.chain(heads)
    }

    pub fn zero_grad(&mut self) {
        for l in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            l.zero_grad();
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Forward pass that keeps everything [`backward`](Self::backward) needs.
    /// `rng` draws the dropout masks in [`Mode::Train`].
    pub fn forward(&self, bag: &Matrix, mode: Mode, rng: &mut Rng) -> Result<BagForward> {
        self.run(bag, mode, Some(rng), true)
    }

    /// Inference-mode forward without a backward cache. Safe to call from many threads.
    pub fn predict(&self, bag: &Matrix) -> Result<BagForward> {
        self.run(bag, Mode::Eval, None, false)
    }

    pub fn forward_mi_net(&self, bag: &Matrix, mode: Mode, rng: &mut Rng) -> Result<BagForward> {
        self.expect_variant(Variant::MiNet)?;
        self.forward(bag, mode, rng)
    }

    pub fn forward_mi_net_embedded(&self, bag: &Matrix, mode: Mode, rng: &mut Rng) -> Result<BagForward> {
        self.expect_variant(Variant::MINet)?;
        self.forward(bag, mode, rng)
    }

    pub fn forward_ds(&self, bag: &Matrix, mode: Mode, rng: &mut Rng) -> Result<BagForward> {
        self.expect_variant(Variant::MINetDs)?;
        self.forward(bag, mode, rng)
    }

    pub fn forward_rc(&self, bag: &Matrix, mode: Mode, rng: &mut Rng) -> Result<BagForward> {
        self.expect_variant(Variant::MINetRc)?;
        self.forward(bag, mode, rng)
    }

    fn expect_variant(&self, v: Variant) -> Result<()> {
        if self.spec.variant != v {
            return Err(Error::config(format!(
                "{} forward called on a {} network",
                v, self.spec.variant
            )));
        }
        Ok(())
    }

    fn run(&self, bag: &Matrix, mode: Mode, mut rng: Option<&mut Rng>, record: bool) -> Result<BagForward> {
        if bag.rows() == 0 {
            return Err(Error::data("bag has zero instances"));
        }
        if bag.cols() != self.input_dim {
            return Err(Error::shape(format!(
                "bag instances have {} features, network expects {}",
                bag.cols(),
                self.input_dim
            )));
        }
        let depth = self.trunk.len();
        let mut pre_acts = Vec::with_capacity(depth);
        let mut masks = Vec::with_capacity(depth);
        let mut features: Vec<Matrix> = Vec::with_capacity(depth);
        for (l, (layer, dropout)) in self.trunk.iter().zip(&self.dropouts).enumerate() {
            let input = if l == 0 { bag } else { &features[l - 1] };
            let (pre, out) = layer.apply(input)?;
            let (feat, mask) = if mode == Mode::Train && dropout.rate() > 0.0 {
                let rng = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::State("training-mode forward needs an rng".into()))?;
                let mask = dropout.sample_mask(rng, out.rows(), out.cols());
                (apply_mask(&out, &mask), Some(mask))
            } else {
                (out, None)
            };
            pre_acts.push(pre);
            masks.push(mask);
            features.push(feat);
        }

        let pooling = &self.spec.pooling;
        let mut pools = Vec::new();
        let mut head_inputs = Vec::new();
        let mut head_pre = Vec::new();
        let mut level_scores = Vec::with_capacity(self.heads.len());
        let mut instance_scores = None;
        let last = &features[depth - 1];

        match self.spec.variant {
            Variant::MiNet => {
                let (pre, scores) = self.heads[0].apply(last)?;
                let (pooled, cache) = pool_forward(pooling, &scores)?;
                level_scores.push(pooled[0]);
                instance_scores = Some(scores.as_slice().to_vec());
                pools.push(cache);
                head_inputs.push(last.clone());
                head_pre.push(pre);
            }
            Variant::MINet => {
                let (pooled, cache) = pool_forward(pooling, last)?;
                let x = Matrix::row_vector(pooled.into_inner());
                let (pre, score) = self.heads[0].apply(&x)?;
                level_scores.push(score.get(0, 0));
                pools.push(cache);
                head_inputs.push(x);
                head_pre.push(pre);
            }
            Variant::MINetDs => {
                for (feat, head) in features.iter().zip(&self.heads) {
                    let (pooled, cache) = pool_forward(pooling, feat)?;
                    let x = Matrix::row_vector(pooled.into_inner());
                    let (pre, score) = head.apply(&x)?;
                    level_scores.push(score.get(0, 0));
                    pools.push(cache);
                    head_inputs.push(x);
                    head_pre.push(pre);
                }
            }
            Variant::MINetRc => {
                let mut bag_vec: Option<Vec<f64>> = None;
                for feat in &features {
                    let (pooled, cache) = pool_forward(pooling, feat)?;
                    match bag_vec.as_mut() {
                        None => bag_vec = Some(pooled.into_inner()),
                        Some(acc) => {
                            for (a, p) in acc.iter_mut().zip(pooled.as_slice()) {
                                *a += p;
                            }
                        }
                    }
                    pools.push(cache);
                }
                let x = Matrix::row_vector(bag_vec.expect("at least one trunk layer"));
                let (pre, score) = self.heads[0].apply(&x)?;
                level_scores.push(score.get(0, 0));
                head_inputs.push(x);
                head_pre.push(pre);
            }
        }

        let bag_score = if level_scores.len() == 1 {
            level_scores[0]
        } else {
            level_scores.iter().sum::<f64>() / level_scores.len() as f64
        };
        if !bag_score.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite bag score from {} forward",
                self.spec.variant
            )));
        }

        let tape = record.then(|| Tape {
            version: self.version,
            input: bag.clone(),
            pre: pre_acts,
            masks,
            features,
            pools,
            head_inputs,
            head_pre,
        });
        Ok(BagForward {
            bag_score,
            level_scores,
            instance_scores,
            tape,
        })
    }

    /// Training loss of a forward pass: cross-entropy on the bag score, or
    /// the weighted sum of per-head cross-entropies for deep supervision.
    pub fn loss(&self, fwd: &BagForward, label: u8) -> f64 {
        match self.spec.variant {
            Variant::MINetDs => self
                .spec
                .head_weights()
                .iter()
                .zip(&fwd.level_scores)
                .map(|(w, &s)| w * bce_loss(s, label))
                .sum(),
            _ => bce_loss(fwd.bag_score, label),
        }
    }

    /// Accumulates the gradient of [`loss`](Self::loss) into every layer.
    pub fn backward(&mut self, fwd: &BagForward, label: u8) -> Result<()> {
        if label > 1 {
            return Err(Error::data(format!("bag label must be 0 or 1, got {label}")));
        }
        let tape = fwd
            .tape
            .as_ref()
            .ok_or_else(|| Error::State("forward pass was run without a backward cache".into()))?;
        if tape.version != self.version {
            return Err(Error::State(
                "stale forward cache: parameters changed since the forward pass".into(),
            ));
        }
        let y = f64::from(label);
        let depth = self.trunk.len();
        let mut grad_feat: Vec<Option<Matrix>> = vec![None; depth];
        let pooling = self.spec.pooling;
        let fault = self.fault;

        match self.spec.variant {
            Variant::MiNet => {
                let s = clamp_score(fwd.bag_score);
                let d_score = (s - y) / (s * (1.0 - s));
                let g_scores = pooled_grad(&tape.pools[0], &pooling, &[d_score], fault)?;
                let g = self.heads[0].accumulate(&tape.head_inputs[0], &tape.head_pre[0], &g_scores, true)?;
                grad_feat[depth - 1] = g;
            }
            Variant::MINet => {
                let g_pre = Matrix::row_vector(vec![fwd.level_scores[0] - y]);
                let g_x = self.heads[0]
                    .accumulate_pre(&tape.head_inputs[0], &g_pre, true)?
                    .expect("input gradient requested");
                grad_feat[depth - 1] = Some(pooled_grad(&tape.pools[0], &pooling, g_x.row(0), fault)?);
            }
            Variant::MINetDs => {
                let weights = self.spec.head_weights();
                for k in 0..depth {
                    let g_pre = Matrix::row_vector(vec![weights[k] * (fwd.level_scores[k] - y)]);
                    let g_x = self.heads[k]
                        .accumulate_pre(&tape.head_inputs[k], &g_pre, true)?
                        .expect("input gradient requested");
                    grad_feat[k] = Some(pooled_grad(&tape.pools[k], &pooling, g_x.row(0), fault)?);
                }
            }
            Variant::MINetRc => {
                let g_pre = Matrix::row_vector(vec![fwd.level_scores[0] - y]);
                let g_x = self.heads[0]
                    .accumulate_pre(&tape.head_inputs[0], &g_pre, true)?
                    .expect("input gradient requested");
                // the final bag vector is the plain sum of every level's pooled vector
                for k in 0..depth {
                    grad_feat[k] = Some(pooled_grad(&tape.pools[k], &pooling, g_x.row(0), fault)?);
                }
            }
        }

        for l in (0..depth).rev() {
            let Some(mut g) = grad_feat[l].take() else {
                continue;
            };
            if let Some(mask) = &tape.masks[l] {
                g = apply_mask(&g, mask);
            }
            let input = if l == 0 { &tape.input } else { &tape.features[l - 1] };
            let g_in = self.trunk[l].accumulate(input, &tape.pre[l], &g, l > 0)?;
            if let Some(g_in) = g_in {
                grad_feat[l - 1] = Some(match grad_feat[l - 1].take() {
                    None => g_in,
                    Some(mut acc) => {
                        for (a, b) in acc.as_mut_slice().iter_mut().zip(g_in.as_slice()) {
                            *a += b;
                        }
                        acc
                    }
                });
            }
        }
        Ok(())
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub(crate) fn layers_mut_unversioned(&mut self) -> impl Iterator<Item = (usize, &mut DenseLayer)> + '_ {
        self.trunk.iter_mut().chain(self.heads.iter_mut()).enumerate()
    }

    pub(crate) fn layer_name(&self, index: usize) -> String {
        if index < self.trunk.len() {
            format!("trunk.{index}")
        } else {
            format!("head.{}", index - self.trunk.len())
        }
    }
}

fn pooled_grad(cache: &PoolCache, spec: &PoolingSpec, grad_out: &[f64], fault: Option<Fault>) -> Result<Matrix> {
    let mut g = pool_backward(cache, spec, grad_out)?;
    if fault == Some(Fault::LseBackward) && spec.method == PoolingMethod::Lse {
        g.as_mut_slice().iter_mut().for_each(|v| *v *= 1.05);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::sigmoid;
    use crate::pooling::PoolingMethod;

    fn random_bag(rng: &mut Rng, m: usize, d: usize) -> Matrix {
        Matrix::from_vec(m, d, (0..m * d).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn zeroed(spec: &NetworkSpec, d: usize) -> Network {
        let mut net = Network::build(spec, d).unwrap();
        for (_, l) in net.layers_mut() {
            l.weights_mut().fill(0.0);
        }
        net
    }

    fn specs_with_pooling(method: PoolingMethod) -> Vec<NetworkSpec> {
        let pooling = PoolingSpec::new(method, 2.0).unwrap();
        Variant::ALL
            .iter()
            .map(|&v| {
                let widths = if v == Variant::MINetRc {
                    vec![12, 12, 12, 1]
                } else {
                    vec![16, 12, 8, 1]
                };
                NetworkSpec::new(v)
                    .with_widths(widths)
                    .with_pooling(pooling)
                    .with_seed(5)
            })
            .collect()
    }

    #[test]
    fn parameter_count_closed_form() {
        let spec = NetworkSpec::new(Variant::MINet);
        let net = Network::build(&spec, 166).unwrap();
        let trunk: usize = net.trunk().iter().map(DenseLayer::parameter_count).sum();
        assert_eq!(trunk, 166 * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64);
        assert_eq!(trunk, 83_904);
        assert_eq!(net.heads()[0].parameter_count(), 65);
        assert_eq!(net.parameter_count(), spec.parameter_count(166));
        for v in Variant::ALL {
            let s = NetworkSpec::new(v);
            assert_eq!(Network::build(&s, 20).unwrap().parameter_count(), s.parameter_count(20));
        }
    }

    #[test]
    fn ds_has_one_head_per_level() {
        let net = Network::build(&NetworkSpec::new(Variant::MINetDs), 166).unwrap();
        let shapes: Vec<(usize, usize)> = net.heads().iter().map(|h| (h.in_dim(), h.out_dim())).collect();
        assert_eq!(shapes, vec![(256, 1), (128, 1), (64, 1)]);
        for v in [Variant::MiNet, Variant::MINet, Variant::MINetRc] {
            assert_eq!(Network::build(&NetworkSpec::new(v), 166).unwrap().heads().len(), 1);
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = NetworkSpec::new(Variant::MINetDs).with_seed(99);
        let a = Network::build(&spec, 30).unwrap();
        let b = Network::build(&spec, 30).unwrap();
        for ((_, la), (_, lb)) in a.layers().zip(b.layers()) {
            assert_eq!(la.weights(), lb.weights());
            assert_eq!(la.bias(), lb.bias());
            assert!(lb.bias().as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn build_rejects_bad_specs() {
        let bad_rc = NetworkSpec::new(Variant::MINetRc).with_widths(vec![128, 64, 128, 1]);
        assert!(matches!(Network::build(&bad_rc, 10), Err(Error::Config(_))));
        let bad_last = NetworkSpec::new(Variant::MINet).with_widths(vec![8, 2]);
        assert!(Network::build(&bad_last, 10).is_err());
        assert!(Network::build(&NetworkSpec::new(Variant::MINet), 0).is_err());
        assert!(Network::build(&NetworkSpec::new(Variant::MINet).with_dropout(1.0), 4).is_err());
    }

    #[test]
    fn zero_networks_score_one_half() {
        let mut rng = Rng::new(1);
        let bag = random_bag(&mut rng, 4, 6);
        for method in PoolingMethod::ALL {
            for spec in specs_with_pooling(method) {
                let net = zeroed(&spec, 6);
                let fwd = net.predict(&bag).unwrap();
                assert_eq!(fwd.bag_score, 0.5, "{} {method}", spec.variant);
                assert!(fwd.level_scores.iter().all(|&s| s == 0.5));
                assert_eq!(fwd.level_scores.len(), spec.head_count());
                if spec.variant == Variant::MiNet {
                    assert!(fwd.instance_scores.unwrap().iter().all(|&s| s == 0.5));
                } else {
                    assert!(fwd.instance_scores.is_none());
                }
            }
        }
    }

    #[test]
    fn mi_net_single_instance_and_max_consistency() {
        let mut rng = Rng::new(2);
        let spec = NetworkSpec::new(Variant::MiNet)
            .with_widths(vec![16, 8, 1])
            .with_seed(3);
        let net = Network::build(&spec, 5).unwrap();
        let one = random_bag(&mut rng, 1, 5);
        let fwd = net.predict(&one).unwrap();
        assert_eq!(fwd.bag_score, fwd.instance_scores.unwrap()[0]);

        let bag = random_bag(&mut rng, 7, 5);
        let fwd = net.predict(&bag).unwrap();
        let max = fwd.instance_scores.unwrap().into_iter().fold(f64::MIN, f64::max);
        assert_eq!(fwd.bag_score, max);
    }

    #[test]
    fn duplicated_instances_leave_mean_and_max_unchanged() {
        let mut rng = Rng::new(4);
        let bag = random_bag(&mut rng, 5, 6);
        let dup = bag.select_rows(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
        for pooling in [PoolingSpec::max(), PoolingSpec::mean()] {
            let spec = NetworkSpec::new(Variant::MINet)
                .with_widths(vec![16, 8, 4, 1])
                .with_pooling(pooling)
                .with_seed(8);
            let net = Network::build(&spec, 6).unwrap();
            let a = net.predict(&bag).unwrap().bag_score;
            let b = net.predict(&dup).unwrap().bag_score;
            assert!((a - b).abs() < 1e-15, "{:?}: {a} vs {b}", pooling.method);
        }
    }

    #[test]
    fn bag_score_is_permutation_invariant() {
        let mut rng = Rng::new(5);
        for method in PoolingMethod::ALL {
            for spec in specs_with_pooling(method) {
                let net = Network::build(&spec, 6).unwrap();
                let bag = random_bag(&mut rng, 9, 6);
                let mut perm: Vec<usize> = (0..9).collect();
                rng.shuffle(&mut perm);
                let a = net.predict(&bag).unwrap().bag_score;
                let b = net.predict(&bag.select_rows(&perm)).unwrap().bag_score;
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Independent recomputation: instance by instance with plain loops.
    fn reference_score(net: &Network, bag: &Matrix) -> f64 {
        let layer_out = |l: &DenseLayer, x: &[f64]| -> Vec<f64> {
            (0..l.out_dim())
                .map(|o| {
                    let mut z = l.bias()[o];
                    for (i, xi) in x.iter().enumerate() {
                        z += l.weights().get(o, i) * xi;
                    }
                    l.activation().apply(z)
                })
                .collect()
        };
        let pool = |rows: &[Vec<f64>]| -> Vec<f64> {
            let k = rows[0].len();
            let m = rows.len() as f64;
            (0..k)
                .map(|d| match net.spec().pooling.method {
                    PoolingMethod::Max => rows.iter().map(|r| r[d]).fold(f64::MIN, f64::max),
                    PoolingMethod::Mean => rows.iter().map(|r| r[d]).sum::<f64>() / m,
                    PoolingMethod::Lse => {
                        let r = net.spec().pooling.r;
                        (rows.iter().map(|x| (r * x[d]).exp()).sum::<f64>() / m).ln() / r
                    }
                })
                .collect()
        };
        let mut levels: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut cur: Vec<Vec<f64>> = bag.iter_rows().map(<[f64]>::to_vec).collect();
        for l in net.trunk() {
            cur = cur.iter().map(|x| layer_out(l, x)).collect();
            levels.push(cur.clone());
        }
        match net.variant() {
            Variant::MiNet => {
                let scores: Vec<Vec<f64>> = cur.iter().map(|x| layer_out(&net.heads()[0], x)).collect();
                pool(&scores)[0]
            }
            Variant::MINet => layer_out(&net.heads()[0], &pool(&cur))[0],
            Variant::MINetDs => {
                let s: Vec<f64> = levels
                    .iter()
                    .zip(net.heads())
                    .map(|(lv, h)| layer_out(h, &pool(lv))[0])
                    .collect();
                s.iter().sum::<f64>() / s.len() as f64
            }
            Variant::MINetRc => {
                let x1 = pool(&levels[0]);
                let x2: Vec<f64> = pool(&levels[1]).iter().zip(&x1).map(|(a, b)| a + b).collect();
                let x3: Vec<f64> = pool(&levels[2]).iter().zip(&x2).map(|(a, b)| a + b).collect();
                layer_out(&net.heads()[0], &x3)[0]
            }
        }
    }

    #[test]
    fn forward_matches_reference_recomputation() {
        let mut rng = Rng::new(6);
        for method in PoolingMethod::ALL {
            for spec in specs_with_pooling(method) {
                let net = Network::build(&spec, 7).unwrap();
                let bag = random_bag(&mut rng, 6, 7);
                let got = net.predict(&bag).unwrap().bag_score;
                let want = reference_score(&net, &bag);
                assert!((got - want).abs() < 1e-12, "{} {method}: {got} vs {want}", spec.variant);
            }
        }
    }

    #[test]
    fn ds_bag_score_is_mean_of_levels() {
        let mut rng = Rng::new(7);
        let net = Network::build(&NetworkSpec::new(Variant::MINetDs).with_widths(vec![8, 6, 4, 1]), 5).unwrap();
        let fwd = net.predict(&random_bag(&mut rng, 3, 5)).unwrap();
        let mean = fwd.level_scores.iter().sum::<f64>() / 3.0;
        assert_eq!(fwd.bag_score, mean);
    }

    #[test]
    fn rc_with_dead_upper_layers_keeps_first_bag_vector() {
        let mut rng = Rng::new(8);
        let spec = NetworkSpec::new(Variant::MINetRc)
            .with_widths(vec![6, 6, 6, 1])
            .with_seed(2);
        let mut net = Network::build(&spec, 4).unwrap();
        for (name, l) in net.layers_mut() {
            if name == "trunk.1" || name == "trunk.2" {
                l.weights_mut().fill(0.0);
                l.bias_mut().as_mut_slice().fill(0.0);
            }
        }
        let bag = random_bag(&mut rng, 5, 4);
        let fwd = net.forward(&bag, Mode::Eval, &mut rng).unwrap();
        let x3 = fwd.tape.as_ref().unwrap().head_inputs[0].clone();
        let (x1, _) = pool_forward(&spec.pooling, &fwd.tape.as_ref().unwrap().features[0]).unwrap();
        assert_eq!(x3.as_slice(), x1.as_slice());
    }

    #[test]
    fn head_bias_gradient_is_score_minus_label() {
        let mut rng = Rng::new(9);
        let bag = random_bag(&mut rng, 3, 4);
        for v in [Variant::MINet, Variant::MINetRc, Variant::MiNet] {
            let widths = if v == Variant::MINetRc {
                vec![4, 4, 1]
            } else {
                vec![6, 4, 1]
            };
            let mut net = zeroed(&NetworkSpec::new(v).with_widths(widths), 4);
            let fwd = net.forward(&bag, Mode::Eval, &mut rng).unwrap();
            assert_eq!(fwd.bag_score, 0.5);
            net.backward(&fwd, 1).unwrap();
            let g = net.heads()[0].grad_bias()[0];
            assert!((g - (-0.5)).abs() < 1e-12, "{v}: {g}");
        }
    }

    #[test]
    fn saturated_correct_prediction_has_vanishing_gradient() {
        let mut rng = Rng::new(10);
        let bag = random_bag(&mut rng, 3, 4);
        let mut net = Network::build(&NetworkSpec::new(Variant::MINet).with_widths(vec![6, 4, 1]), 4).unwrap();
        for (name, l) in net.layers_mut() {
            if name == "head.0" {
                l.bias_mut().as_mut_slice()[0] = 40.0;
            }
        }
        let fwd = net.forward(&bag, Mode::Eval, &mut rng).unwrap();
        assert!(fwd.bag_score > 1.0 - 1e-15);
        net.backward(&fwd, 1).unwrap();
        for (_, l) in net.layers() {
            assert!(l.grad_weights().as_slice().iter().all(|g| g.abs() < 1e-15));
        }
        assert!((sigmoid(40.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stale_or_missing_cache_is_rejected() {
        let mut rng = Rng::new(11);
        let bag = random_bag(&mut rng, 3, 4);
        let mut net = Network::build(&NetworkSpec::new(Variant::MINet).with_widths(vec![6, 1]), 4).unwrap();
        let fwd = net.predict(&bag).unwrap();
        assert!(matches!(net.backward(&fwd, 1), Err(Error::State(_))));
        let fwd = net.forward(&bag, Mode::Train, &mut rng).unwrap();
        for (_, l) in net.layers_mut() {
            l.bias_mut().as_mut_slice()[0] += 0.1;
        }
        assert!(matches!(net.backward(&fwd, 1), Err(Error::State(_))));
    }

    #[test]
    fn variant_specific_entry_points_check_variant() {
        let mut rng = Rng::new(12);
        let bag = random_bag(&mut rng, 2, 3);
        let net = Network::build(&NetworkSpec::new(Variant::MINet).with_widths(vec![4, 1]), 3).unwrap();
        assert!(net.forward_mi_net_embedded(&bag, Mode::Eval, &mut rng).is_ok());
        assert!(net.forward_ds(&bag, Mode::Eval, &mut rng).is_err());
        assert!(net.forward_rc(&bag, Mode::Eval, &mut rng).is_err());
        assert!(net.forward_mi_net(&bag, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_dropout_only_in_training() {
        let mut rng = Rng::new(13);
        let bag = random_bag(&mut rng, 6, 5);
        let net = Network::build(&NetworkSpec::new(Variant::MINetDs).with_widths(vec![32, 16, 1]), 5).unwrap();
        let a = net.predict(&bag).unwrap().bag_score;
        let b = net.predict(&bag).unwrap().bag_score;
        assert_eq!(a.to_bits(), b.to_bits());
        let t1 = net.forward(&bag, Mode::Train, &mut rng).unwrap().bag_score;
        let t2 = net.forward(&bag, Mode::Train, &mut rng).unwrap().bag_score;
        assert_ne!(t1, t2);
    }

    #[test]
    fn dimension_mismatch_and_empty_bag() {
        let net = Network::build(&NetworkSpec::new(Variant::MINet).with_widths(vec![4, 1]), 3).unwrap();
        assert!(matches!(net.predict(&Matrix::zeros(2, 4)), Err(Error::Shape(_))));
        assert!(net.predict(&Matrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("ds".parse::<Variant>().unwrap(), Variant::MINetDs);
        assert_eq!("mi-Net".parse::<Variant>().unwrap(), Variant::MiNet);
        assert_eq!("MI-Net".parse::<Variant>().unwrap(), Variant::MINet);
        assert_eq!("RC".parse::<Variant>().unwrap(), Variant::MINetRc);
        assert!("resnet".parse::<Variant>().is_err());
    }
}
