//! DenseNet-style backbone with optional class-wise attention after dense
//! blocks 2, 3 and 4, followed by global average pooling and a linear head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Var};
use crate::cwa::{CwaBlock, CwaConfig, CwaOutput, DEFAULT_K};
use crate::error::{shape_err, Error, Result};
use crate::layers::{BatchNorm, Bindings, Conv2d, Linear, Mode, ParamStore, StatsUpdate};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

/// Dense blocks after which attention may be attached.
pub const ATTENTION_SITES: [usize; 3] = [2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stem: StemSpec,
    /// Dense layers per block. Each dense layer holds two convolutions.
    pub block_layers: [usize; 4],
    pub growth_rate: usize,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
    /// Subset of [`ATTENTION_SITES`].
    pub attention_sites: Vec<usize>,
    pub num_classes: usize,
    pub k: usize,
    #[serde(default)]
    pub score_softmax: bool,
    #[serde(default)]
    pub residual_attention: bool,
}

impl BackboneSpec {
    /// CPU-sized network for 32×32 inputs with attention at all three sites.
    pub fn toy(num_classes: usize) -> Self {
        BackboneSpec {
            in_channels: 3,
            stem: StemSpec {
                channels: 16,
                kernel: 3,
                stride: 1,
            },
            block_layers: [2, 2, 2, 2],
            growth_rate: 12,
            bottleneck_factor: 4,
            attention_sites: ATTENTION_SITES.to_vec(),
            num_classes,
            k: DEFAULT_K,
            score_softmax: false,
            residual_attention: false,
        }
    }

    /// Smaller and faster than [`toy`](Self::toy): stride-2 stem, 8 channels,
    /// growth 8, k = 4. Used for the synthetic ablation.
    pub fn desk(num_classes: usize) -> Self {
        BackboneSpec {
            stem: StemSpec {
                channels: 8,
                kernel: 3,
                stride: 2,
            },
            growth_rate: 8,
            k: 4,
            ..Self::toy(num_classes)
        }
    }

    /// DenseNet-121 layout: 6/12/24/16 dense layers (12/24/48/32 convolutions),
    /// growth 32, 7×7 stride-2 stem with 64 channels.
    pub fn densenet121(num_classes: usize) -> Self {
        BackboneSpec {
            in_channels: 3,
            stem: StemSpec {
                channels: 64,
                kernel: 7,
                stride: 2,
            },
            block_layers: [6, 12, 24, 16],
            growth_rate: 32,
            bottleneck_factor: 4,
            attention_sites: ATTENTION_SITES.to_vec(),
            num_classes,
            k: DEFAULT_K,
            score_softmax: false,
            residual_attention: false,
        }
    }

    pub fn with_attention(mut self, sites: &[usize]) -> Self {
        self.attention_sites = sites.to_vec();
        self
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.in_channels == 0 || self.stem.channels == 0 || self.growth_rate == 0 || self.bottleneck_factor == 0 {
            return bad("channel counts must be positive");
        }
        if self.stem.stride == 0 || self.stem.kernel.is_multiple_of(2) {
            return bad("stem needs an odd kernel and a positive stride");
        }
        if self.block_layers.contains(&0) {
            return bad("every dense block needs at least one layer");
        }
        if self.num_classes < 2 {
            return bad("at least two classes are required");
        }
        if self.k == 0 {
            return bad("k must be ≥ 1");
        }
        let mut seen = Vec::new();
        for &s in &self.attention_sites {
            if !ATTENTION_SITES.contains(&s) {
                return Err(Error::Config(format!("attention site {s} is not one of {ATTENTION_SITES:?}")));
            }
            if seen.contains(&s) {
                return Err(Error::Config(format!("attention site {s} listed twice")));
            }
            seen.push(s);
        }
        Ok(())
    }

    pub fn has_attention(&self, block: usize) -> bool {
        self.attention_sites.contains(&block)
    }

    /// Spatial dims must divide by this.
    pub fn input_multiple(&self) -> usize {
        8 * self.stem.stride
    }
}

#[derive(Clone, Debug, PartialEq)]
struct DenseLayer {
    bn1: BatchNorm,
    conv1: Conv2d,
    bn2: BatchNorm,
    conv2: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
struct Transition {
    bn: BatchNorm,
    conv: Conv2d,
}

/// Backbone parameters and layer wiring.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: BackboneSpec,
    store: ParamStore<T>,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    /// Indexed by block (0-based); `Some` where attention is attached.
    attention: Vec<Option<CwaBlock>>,
    classifier: Linear,
    feature_channels: usize,
}

/// Everything recorded during one forward pass.
pub struct ForwardPass<T> {
    pub logits: Var,
    pub bindings: Bindings,
    /// Named intermediate feature maps, in evaluation order.
    pub activations: Vec<(String, Var)>,
    pub stats: Vec<StatsUpdate<T>>,
    /// `(block, output)` for every attention site.
    pub attention: Vec<(usize, CwaOutput<T>)>,
}

impl<T> ForwardPass<T> {
    pub fn activation(&self, name: &str) -> Option<Var> {
        self.activations.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Scalar learnables, total and per module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub baseline: usize,
    pub attention: usize,
    pub modules: Vec<(String, usize)>,
}

pub const DEFAULT_LAYER: &str = "features";

impl<T: Scalar> Model<T> {
    /// Deterministic construction: every module draws from its own stream
    /// derived from `(seed, module name)`, so toggling attention leaves the
    /// backbone initialization untouched.
    pub fn build(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let rng_for = |name: &str| seed::rng(seed, name, &[]);

        let sc = spec.stem.channels;
        let stem_conv = Conv2d::new(
            &mut store,
            "stem.conv",
            (spec.stem.kernel, spec.stem.kernel),
            spec.in_channels,
            sc,
            spec.stem.stride,
            Padding::Same,
            false,
            &mut rng_for("stem.conv"),
        )?;
        let stem_bn = BatchNorm::new(&mut store, "stem.bn", sc)?;

        let mut channels = sc;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut attention = Vec::new();
        let bottleneck = spec.bottleneck_factor * spec.growth_rate;
        for (b, &layers) in spec.block_layers.iter().enumerate() {
            let block_no = b + 1;
            let mut dense = Vec::with_capacity(layers);
            for l in 0..layers {
                let name = format!("block{block_no}.layer{l}");
                let bn1 = BatchNorm::new(&mut store, &format!("{name}.bn1"), channels)?;
                let conv1 = Conv2d::new(
                    &mut store,
                    &format!("{name}.conv1"),
                    (1, 1),
                    channels,
                    bottleneck,
                    1,
                    Padding::Same,
                    false,
                    &mut rng_for(&format!("{name}.conv1")),
                )?;
                let bn2 = BatchNorm::new(&mut store, &format!("{name}.bn2"), bottleneck)?;
                let conv2 = Conv2d::new(
                    &mut store,
                    &format!("{name}.conv2"),
                    (3, 3),
                    bottleneck,
                    spec.growth_rate,
                    1,
                    Padding::Same,
                    false,
                    &mut rng_for(&format!("{name}.conv2")),
                )?;
                dense.push(DenseLayer { bn1, conv1, bn2, conv2 });
                channels += spec.growth_rate;
            }
            blocks.push(dense);

            attention.push(if spec.has_attention(block_no) {
                let name = format!("cwa{block_no}");
                let mut cfg = CwaConfig::new(spec.num_classes, spec.k, channels);
                cfg.score_softmax = spec.score_softmax;
                cfg.residual = spec.residual_attention;
                Some(CwaBlock::new(&mut store, &name, cfg, &mut rng_for(&name))?)
            } else {
                None
            });

            if block_no < 4 {
                let name = format!("trans{block_no}");
                let out = (channels / 2).max(1);
                let bn = BatchNorm::new(&mut store, &format!("{name}.bn"), channels)?;
                let conv = Conv2d::new(
                    &mut store,
                    &format!("{name}.conv"),
                    (1, 1),
                    channels,
                    out,
                    1,
                    Padding::Same,
                    false,
                    &mut rng_for(&format!("{name}.conv")),
                )?;
                transitions.push(Transition { bn, conv });
                channels = out;
            }
        }
        let classifier = Linear::new(
            &mut store,
            "classifier",
            channels,
            spec.num_classes,
            &mut rng_for("classifier"),
        )?;
        Ok(Model {
            spec: spec.clone(),
            store,
            stem_conv,
            stem_bn,
            blocks,
            transitions,
            attention,
            classifier,
            feature_channels: channels,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Channels entering the global pooling head.
    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    pub fn attention_blocks(&self) -> impl Iterator<Item = (usize, &CwaBlock)> {
        self.attention
            .iter()
            .enumerate()
            .filter_map(|(b, a)| a.as_ref().map(|a| (b + 1, a)))
    }

    /// Names accepted by [`ForwardPass::activation`].
    pub fn activation_names(&self) -> Vec<String> {
        let mut names = vec!["stem".to_string()];
        for b in 1..=4 {
            names.push(format!("block{b}"));
            if self.spec.has_attention(b) {
                names.push(format!("attn{b}"));
            }
            if b < 4 {
                names.push(format!("trans{b}"));
            }
        }
        names.push(DEFAULT_LAYER.to_string());
        names
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardPass<T>> {
        let xs = tape.shape(x);
        let m = self.spec.input_multiple();
        if xs.c() != self.spec.in_channels {
            return Err(shape_err!("model expects {} input channels, got {xs}", self.spec.in_channels));
        }
        if !xs.h().is_multiple_of(m) || !xs.w().is_multiple_of(m) {
            return Err(shape_err!("input spatial dims of {xs} must be divisible by {m}"));
        }
        let p = self.store.bind(tape);
        let store = &self.store;
        let mut stats = Vec::new();
        let mut activations = Vec::new();
        let mut attention = Vec::new();
        let bn = |tape: &mut Tape<T>, layer: &BatchNorm, v: Var, stats: &mut Vec<StatsUpdate<T>>| -> Result<Var> {
            let (y, upd) = layer.forward(tape, &p, store, v, mode)?;
            stats.extend(upd);
            Ok(tape.relu(y))
        };

        let h = self.stem_conv.forward(tape, &p, x)?;
        let mut h = bn(tape, &self.stem_bn, h, &mut stats)?;
        activations.push(("stem".to_string(), h));

        for (b, layers) in self.blocks.iter().enumerate() {
            let block_no = b + 1;
            let mut features = vec![h];
            for layer in layers {
                let input = if features.len() == 1 {
                    features[0]
                } else {
                    tape.concat(&features)?
                };
                let y = bn(tape, &layer.bn1, input, &mut stats)?;
                let y = layer.conv1.forward(tape, &p, y)?;
                let y = bn(tape, &layer.bn2, y, &mut stats)?;
                let y = layer.conv2.forward(tape, &p, y)?;
                features.push(y);
            }
            h = tape.concat(&features)?;
            activations.push((format!("block{block_no}"), h));

            if let Some(block) = &self.attention[b] {
                let out = block.forward(tape, &p, store, h, mode)?;
                h = out.output;
                stats.extend(out.stats.clone());
                activations.push((format!("attn{block_no}"), h));
                attention.push((block_no, out));
            }

            if let Some(t) = self.transitions.get(b) {
                let y = bn(tape, &t.bn, h, &mut stats)?;
                let y = t.conv.forward(tape, &p, y)?;
                h = tape.avg_pool2x2(y)?;
                activations.push((format!("trans{block_no}"), h));
            }
        }
        activations.push((DEFAULT_LAYER.to_string(), h));
        let pooled = tape.global_avg_pool(h);
        let logits = self.classifier.forward(tape, &p, pooled)?;
        Ok(ForwardPass {
            logits,
            bindings: p,
            activations,
            stats,
            attention,
        })
    }

    /// Evaluation-mode logits `(n, 1, 1, L)`, computed in chunks of `batch`.
    pub fn predict(&self, images: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let n = images.shape().n();
        let batch = batch.max(1);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let chunk: Vec<Tensor<T>> = (start..end).map(|i| images.sample(i)).collect();
            let x = Tensor::stack(&chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let fp = self.forward(&mut tape, xv, Mode::Eval)?;
            parts.push(tape.value(fp.logits).clone());
            start = end;
        }
        Tensor::stack(&parts)
    }

    pub fn apply_stats(&mut self, updates: &[StatsUpdate<T>]) {
        for u in updates {
            self.store.apply_stats(u);
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let mut per: BTreeMap<String, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for e in self.store.entries() {
            if e.kind != crate::layers::ParamKind::Trainable {
                continue;
            }
            let module = e.name.split('.').next().unwrap_or(&e.name).to_string();
            if !per.contains_key(&module) {
                order.push(module.clone());
            }
            *per.entry(module).or_default() += e.tensor.len();
        }
        let modules: Vec<(String, usize)> = order.into_iter().map(|m| (m.clone(), per[&m])).collect();
        let attention: usize = modules
            .iter()
            .filter(|(m, _)| m.starts_with("cwa"))
            .map(|(_, n)| n)
            .sum();
        let total = self.store.trainable_count();
        ParamCount {
            total,
            baseline: total - attention,
            attention,
            modules,
        }
    }

    /// Same architecture in another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for e in self.store.entries() {
            store
                .add(e.name.clone(), e.tensor.cast(), e.kind)
                .expect("names are already unique");
        }
        Model {
            spec: self.spec.clone(),
            store,
            stem_conv: self.stem_conv.clone(),
            stem_bn: self.stem_bn.clone(),
            blocks: self.blocks.clone(),
            transitions: self.transitions.clone(),
            attention: self.attention.clone(),
            classifier: self.classifier.clone(),
            feature_channels: self.feature_channels,
        }
    }
}
