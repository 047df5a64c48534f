//! Differentiable layers backed by a named parameter store.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]; a forward pass first binds
//! the store onto a [`Tape`] (see [`ParamStore::bind`]) and then threads the
//! resulting [`Bindings`] through each layer.

use rand::Rng;

use crate::autodiff::{BatchStats, Padding, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Learned by the optimizer.
    Trainable,
    /// State carried alongside the weights (batch-norm running statistics).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(ParamEntry { name, tensor, kind });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Number of scalar learnables.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Record every trainable tensor as a gradient leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings {
            vars: self
                .entries
                .iter()
                .map(|e| match e.kind {
                    ParamKind::Trainable => Some(tape.param(e.tensor.clone())),
                    ParamKind::Buffer => None,
                })
                .collect(),
        }
    }

    /// Like [`bind`](Self::bind) but without gradients.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings {
            vars: self
                .entries
                .iter()
                .map(|e| match e.kind {
                    ParamKind::Trainable => Some(tape.constant(e.tensor.clone())),
                    ParamKind::Buffer => None,
                })
                .collect(),
        }
    }

    /// Fold batch statistics into running statistics.
    pub fn apply_stats(&mut self, update: &StatsUpdate<T>) {
        let m = update.momentum;
        let keep = |running: &mut Tensor<T>, batch: &[T]| {
            for (r, &b) in running.data_mut().iter_mut().zip(batch) {
                *r = m * *r + (T::one() - m) * b;
            }
        };
        keep(&mut self.entries[update.running_mean.0].tensor, &update.stats.mean);
        keep(&mut self.entries[update.running_var.0].tensor, &update.stats.var);
    }
}

/// Tape variables for the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Option<Var>>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound on the tape")
    }

    /// Route a trainable entry through another tape variable of the same shape.
    pub fn rebind(&mut self, id: ParamId, var: Var) {
        assert!(self.vars[id.0].is_some(), "buffers are not bound on the tape");
        self.vars[id.0] = Some(var);
    }

    /// `(param, var)` for every bound trainable tensor, in store order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }
}

fn he_uniform<T: Scalar, R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -limit, limit, rng)
}

/// Dense 2D convolution (cross-correlation).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0) {
            return Err(Error::Config(format!("{name}: same padding needs an odd kernel")));
        }
        let shape = Shape::new(kh, kw, in_channels, out_channels);
        let weight = store.add(
            format!("{name}.weight"),
            he_uniform(shape, kh * kw * in_channels, rng),
            ParamKind::Trainable,
        )?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                Tensor::zeros(Shape::vector(out_channels)),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        conv2d(tape, x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        let (kh, kw) = self.kernel;
        kh * kw * self.in_channels * self.out_channels + if self.bias.is_some() { self.out_channels } else { 0 }
    }
}

pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    padding: Padding,
) -> Result<Var> {
    tape.conv2d(x, kernel, bias, stride, padding)
}

/// 3×3 depthwise convolution followed by a biased 1×1 pointwise convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DwSepConv3x3 {
    /// `(3, 3, in_c, 1)`
    pub depthwise: ParamId,
    /// `(1, 1, in_c, out_c)`
    pub pointwise: ParamId,
    /// `(1, 1, 1, out_c)`
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DwSepConv3x3 {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let depthwise = store.add(
            format!("{name}.depthwise"),
            he_uniform(Shape::new(3, 3, in_channels, 1), 9, rng),
            ParamKind::Trainable,
        )?;
        let pointwise = store.add(
            format!("{name}.pointwise"),
            he_uniform(Shape::new(1, 1, in_channels, out_channels), in_channels, rng),
            ParamKind::Trainable,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::vector(out_channels)),
            ParamKind::Trainable,
        )?;
        Ok(DwSepConv3x3 {
            depthwise,
            pointwise,
            bias,
            in_channels,
            out_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        dw_sep_conv3x3(tape, x, p.var(self.depthwise), p.var(self.pointwise), p.var(self.bias))
    }

    /// `9·in + in·out + out`
    pub fn param_count(&self) -> usize {
        9 * self.in_channels + self.in_channels * self.out_channels + self.out_channels
    }
}

pub fn dw_sep_conv3x3<T: Scalar>(tape: &mut Tape<T>, x: Var, depthwise: Var, pointwise: Var, bias: Var) -> Result<Var> {
    let d = tape.depthwise3x3(x, depthwise)?;
    tape.conv2d(d, pointwise, Some(bias), 1, Padding::Same)
}

/// Batch normalization with Keras-style running averages
/// (`running = momentum·running + (1 − momentum)·batch`).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch statistics destined for one batch-norm layer's running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: T,
    pub stats: BatchStats<T>,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let v = Shape::vector(channels);
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(v), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(v), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(v), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(v), ParamKind::Buffer)?,
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Training mode normalizes with batch statistics and returns the
    /// running-average update; evaluation mode uses the stored running stats.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<StatsUpdate<T>>)> {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, None, c(self.eps))?;
                let stats = stats.expect("training batch norm yields statistics");
                Ok((
                    y,
                    Some(StatsUpdate {
                        running_mean: self.running_mean,
                        running_var: self.running_var,
                        momentum: c(self.momentum),
                        stats,
                    }),
                ))
            }
            Mode::Eval => {
                let mean = store.tensor(self.running_mean).data();
                let var = store.tensor(self.running_var).data();
                let (y, _) = tape.batch_norm(x, gamma, beta, Some((mean, var)), c(self.eps))?;
                Ok((y, None))
            }
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Affine classifier over globally pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `(1, 1, in, out)`
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let limit = (6.0 / (in_features + out_features) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(Shape::new(1, 1, in_features, out_features), -limit, limit, rng),
            ParamKind::Trainable,
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::zeros(Shape::vector(out_features)),
            ParamKind::Trainable,
        )?;
        Ok(Linear {
            weight,
            bias,
            in_features,
            out_features,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
        linear(tape, x, p.var(self.weight), p.var(self.bias))
    }

    pub fn param_count(&self) -> usize {
        self.in_features * self.out_features + self.out_features
    }
}

/// Logits `(n, 1, 1, L)` from pooled features `(n, 1, 1, C)`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x);
    if xs.h() != 1 || xs.w() != 1 {
        return Err(shape_err!("linear expects spatially pooled (n, 1, 1, c) input, got {xs}"));
    }
    tape.conv2d(x, weight, Some(bias), 1, Padding::Valid)
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    tape.relu(x)
}

pub fn avg_pool2x2<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.avg_pool2x2(x)
}
