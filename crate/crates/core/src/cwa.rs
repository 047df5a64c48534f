//! Class-wise attention block.
//!
//! Each of the `L` classes owns a contiguous group of `k` expanded feature
//! channels. The block
//!
//! 1. expands `F (n,h,w,C)` to `F̂ (n,h,w,kL)` with a 3×3 depthwise-separable
//!    convolution, batch norm and ReLU;
//! 2. scores each class as the mean over its group of the channel's spatial max;
//! 3. averages each group into a class-wise semantic map `F̃ (n,h,w,L)`;
//! 4. combines them into a single-channel attention map
//!    `CA = (1/L) Σ_i s_i · F̃_i`;
//! 5. gates the input, `F_CA = F ⊙ CA`, broadcasting `CA` over all `C` channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{BatchNorm, Bindings, DwSepConv3x3, Mode, ParamStore, StatsUpdate};
use crate::scalar::Scalar;

pub const DEFAULT_K: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CwaConfig {
    /// `L`
    pub num_classes: usize,
    /// Feature channels per class.
    pub k: usize,
    /// `C`
    pub in_channels: usize,
    /// Softmax-normalize the class scores before weighting. Off by default.
    #[serde(default)]
    pub score_softmax: bool,
    /// Output `F + F ⊙ CA` instead of `F ⊙ CA`. Off by default.
    #[serde(default)]
    pub residual: bool,
}

impl CwaConfig {
    pub fn new(num_classes: usize, k: usize, in_channels: usize) -> Self {
        CwaConfig {
            num_classes,
            k,
            in_channels,
            score_softmax: false,
            residual: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("class-wise attention needs L ≥ 2, got {}", self.num_classes)));
        }
        if self.k == 0 {
            return Err(Error::Config("class-wise attention needs k ≥ 1".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("class-wise attention needs at least one input channel".into()));
        }
        Ok(())
    }

    pub fn expanded_channels(&self) -> usize {
        self.k * self.num_classes
    }

    /// `9C + C·kL + kL + 2kL`: depthwise, pointwise, pointwise bias, batch-norm affine.
    pub fn param_count(&self) -> usize {
        let (c, kl) = (self.in_channels, self.expanded_channels());
        9 * c + c * kl + kl + 2 * kl
    }
}

/// Learnable state of one attention site.
#[derive(Clone, Debug, PartialEq)]
pub struct CwaBlock {
    pub config: CwaConfig,
    pub expand: DwSepConv3x3,
    pub bn: BatchNorm,
}

/// Block output plus the intermediate maps, for diagnostics and tests.
#[derive(Clone, Debug)]
pub struct CwaOutput<T> {
    /// `F_CA`, same shape as the input.
    pub output: Var,
    /// `F̂ (n,h,w,kL)`
    pub expanded: Var,
    /// `s (n,1,1,L)`
    pub scores: Var,
    /// `F̃ (n,h,w,L)`
    pub semantic: Var,
    /// `CA (n,h,w,1)`
    pub attention: Var,
    pub stats: Option<StatsUpdate<T>>,
}

impl CwaBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        config: CwaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let kl = config.expanded_channels();
        let expand = DwSepConv3x3::new(store, &format!("{name}.expand"), config.in_channels, kl, rng)?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), kl)?;
        Ok(CwaBlock { config, expand, bn })
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.bn.param_count()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bindings,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<CwaOutput<T>> {
        cwa_forward(tape, p, store, self, x, mode)
    }
}

/// `F̂ = ReLU(BN(DwSepConv3×3(F)))`.
pub fn expand_features<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    store: &ParamStore<T>,
    block: &CwaBlock,
    x: Var,
    mode: Mode,
) -> Result<(Var, Option<StatsUpdate<T>>)> {
    let c = tape.shape(x).c();
    if c != block.config.in_channels {
        return Err(shape_err!(
            "class-wise attention configured for {} channels, input has {c}",
            block.config.in_channels
        ));
    }
    let conv = block.expand.forward(tape, p, x)?;
    let (normed, stats) = block.bn.forward(tape, p, store, conv, mode)?;
    Ok((tape.relu(normed), stats))
}

fn check_grouping<T: Scalar>(tape: &Tape<T>, expanded: Var, cfg: &CwaConfig) -> Result<()> {
    let c = tape.shape(expanded).c();
    if c != cfg.expanded_channels() {
        return Err(shape_err!(
            "expected k·L = {}·{} = {} channels, got {c}",
            cfg.k,
            cfg.num_classes,
            cfg.expanded_channels()
        ));
    }
    Ok(())
}

/// `s_i = (1/k) Σ_j max_{h,w} F̂[.., i·k + j]`, shaped `(n, 1, 1, L)`.
pub fn class_scores<T: Scalar>(tape: &mut Tape<T>, expanded: Var, cfg: &CwaConfig) -> Result<Var> {
    check_grouping(tape, expanded, cfg)?;
    let peaks = tape.global_max_pool(expanded);
    tape.group_mean(peaks, cfg.k)
}

/// `F̃_i = (1/k) Σ_j F̂[.., i·k + j]`, shaped `(n, h, w, L)`.
pub fn class_semantic_map<T: Scalar>(tape: &mut Tape<T>, expanded: Var, cfg: &CwaConfig) -> Result<Var> {
    check_grouping(tape, expanded, cfg)?;
    tape.group_mean(expanded, cfg.k)
}

/// `CA = (1/L) Σ_i s_i · F̃_i`, shaped `(n, h, w, 1)`.
pub fn class_attention_map<T: Scalar>(tape: &mut Tape<T>, scores: Var, semantic: Var) -> Result<Var> {
    let (ss, fs) = (tape.shape(scores), tape.shape(semantic));
    if ss.h() != 1 || ss.w() != 1 || ss.c() != fs.c() || ss.n() != fs.n() {
        return Err(shape_err!("class scores {ss} do not pair with semantic map {fs}"));
    }
    let weighted = tape.mul(semantic, scores)?;
    tape.group_mean(weighted, fs.c())
}

/// `F_CA = F ⊙ CA` with `CA` broadcast over channels.
pub fn apply_attention<T: Scalar>(tape: &mut Tape<T>, features: Var, attention: Var) -> Result<Var> {
    let (fs, cs) = (tape.shape(features), tape.shape(attention));
    if cs.c() != 1 || (cs.n(), cs.h(), cs.w()) != (fs.n(), fs.h(), fs.w()) {
        return Err(shape_err!("attention map {cs} does not match features {fs}"));
    }
    tape.mul(features, attention)
}

pub fn cwa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    store: &ParamStore<T>,
    block: &CwaBlock,
    x: Var,
    mode: Mode,
) -> Result<CwaOutput<T>> {
    let cfg = &block.config;
    let (expanded, stats) = expand_features(tape, p, store, block, x, mode)?;
    let raw_scores = class_scores(tape, expanded, cfg)?;
    let scores = if cfg.score_softmax {
        tape.softmax(raw_scores)
    } else {
        raw_scores
    };
    let semantic = class_semantic_map(tape, expanded, cfg)?;
    let attention = class_attention_map(tape, scores, semantic)?;
    let gated = apply_attention(tape, x, attention)?;
    let output = if cfg.residual { tape.add(x, gated)? } else { gated };
    Ok(CwaOutput {
        output,
        expanded,
        scores,
        semantic,
        attention,
        stats,
    })
}
