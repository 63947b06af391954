//! Multi-scale convolutional blocks with wavelet pattern decoupling and
//! directional assembling.
//!
//! A block runs a 1×1 conv, splits the channels into `B` branches, feeds
//! branch `i` through its own kernel-`k` conv after adding branch `i − 1`'s
//! output, optionally decouples and re-assembles the branch features, then
//! fuses them with a 1×1 conv and a shortcut. Every variable of a window is
//! processed independently with shared weights.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::substrate::layers::Conv1d;
use crate::substrate::{ParamSet, Session, Tensor, Var};
use crate::wavelet::{self, FilterBank};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MscnnBlockConfig {
    pub channels: usize,
    pub branches: usize,
    pub kernel: usize,
    pub wavelet_levels: usize,
    pub assembling: bool,
}

impl Default for MscnnBlockConfig {
    fn default() -> Self {
        MscnnBlockConfig { channels: 16, branches: 4, kernel: 3, wavelet_levels: 3, assembling: true }
    }
}

impl MscnnBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.branches) {
            bail!(Config, "{} channels cannot be split into {} branches", self.channels, self.branches);
        }
        if self.kernel.is_multiple_of(2) {
            bail!(Config, "branch kernel must be odd, got {}", self.kernel);
        }
        if self.assembling && self.wavelet_levels == 0 {
            bail!(Config, "assembling needs at least one wavelet level");
        }
        Ok(())
    }

    pub fn branch_width(&self) -> usize {
        self.channels / self.branches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MscnnConfig {
    #[serde(flatten)]
    pub block: MscnnBlockConfig,
    pub depth: usize,
}

impl Default for MscnnConfig {
    fn default() -> Self {
        MscnnConfig { block: MscnnBlockConfig::default(), depth: 3 }
    }
}

/// Per-branch feature maps, each `[C/B × L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchFeatures {
    pub branches: Vec<Tensor>,
}

/// Decouple every branch and accumulate short-term parts forward
/// (local to global) and long-term parts backward (global to local).
pub fn assemble_patterns(bf: &BranchFeatures, levels: usize, bank: &FilterBank) -> Result<BranchFeatures> {
    let Some(first) = bf.branches.first() else {
        bail!(Config, "assemble_patterns needs at least one branch");
    };
    let shape = first.shape().to_vec();
    if shape.len() != 2 || bf.branches.iter().any(|b| b.shape() != shape.as_slice()) {
        bail!(Dimension, "branch features must share one [C/B × L] shape");
    }
    let (rows, len) = (shape[0], shape[1]);
    let mut short = Vec::with_capacity(bf.branches.len());
    let mut long = Vec::with_capacity(bf.branches.len());
    for b in &bf.branches {
        let mut s = Vec::with_capacity(rows * len);
        let mut l = Vec::with_capacity(rows * len);
        for r in 0..rows {
            let d = wavelet::decouple(b.row(r), levels, bank)?;
            s.extend(d.short);
            l.extend(d.long);
        }
        short.push(s);
        long.push(l);
    }
    for b in 1..short.len() {
        let (done, rest) = short.split_at_mut(b);
        for (x, p) in rest[0].iter_mut().zip(&done[b - 1]) {
            *x += p;
        }
    }
    for b in (0..long.len().saturating_sub(1)).rev() {
        let (head, tail) = long.split_at_mut(b + 1);
        for (x, n) in head[b].iter_mut().zip(&tail[0]) {
            *x += n;
        }
    }
    let branches = short
        .into_iter()
        .zip(long)
        .map(|(s, l)| Tensor::new(shape.clone(), s.iter().zip(&l).map(|(a, b)| a + b).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(BranchFeatures { branches })
}

/// Tape version of [`assemble_patterns`]; `long_op` is the `[L × L]`
/// long-term projection from [`wavelet::long_term_operator`].
pub fn assemble_on_tape(s: &mut Session, branches: &[Var], long_op: Var) -> Result<Vec<Var>> {
    let mut short = Vec::with_capacity(branches.len());
    let mut long = Vec::with_capacity(branches.len());
    for &b in branches {
        let l = s.tape.matmul(b, long_op)?;
        short.push(s.tape.sub(b, l)?);
        long.push(l);
    }
    for b in 1..short.len() {
        short[b] = s.tape.add(short[b], short[b - 1])?;
    }
    for b in (0..long.len().saturating_sub(1)).rev() {
        long[b] = s.tape.add(long[b], long[b + 1])?;
    }
    short.iter().zip(&long).map(|(&a, &b)| s.tape.add(a, b)).collect()
}

#[derive(Clone, Debug)]
pub struct MscnnBlock {
    pub cfg: MscnnBlockConfig,
    pub conv_in: Conv1d,
    pub branch_convs: Vec<Conv1d>,
    pub fuse: Conv1d,
    pub shortcut: bool,
}

/// Intermediate values of one block pass.
pub struct BlockTrace {
    /// `F̄_b` straight out of each branch conv.
    pub branches: Vec<Var>,
    /// Branch features after assembling (same as `branches` when disabled).
    pub assembled: Vec<Var>,
    pub out: Var,
}

impl MscnnBlock {
    pub fn new(prefix: &str, cfg: MscnnBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let w = cfg.branch_width();
        let branch_convs = (0..cfg.branches)
            .map(|b| Conv1d::same(format!("{prefix}.branch{b}"), w, w, cfg.kernel))
            .collect::<Result<Vec<_>>>()?;
        Ok(MscnnBlock {
            conv_in: Conv1d::same(format!("{prefix}.conv_in"), c, c, 1)?,
            fuse: Conv1d::same(format!("{prefix}.fuse"), c, c, 1)?,
            branch_convs,
            cfg,
            shortcut: true,
        })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv1d> {
        core::iter::once(&self.conv_in).chain(&self.branch_convs).chain(core::iter::once(&self.fuse))
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        for c in self.convs() {
            c.init(params, rng);
        }
    }

    /// `long_op` is required when assembling is enabled.
    pub fn forward(&self, s: &mut Session, x: Var, long_op: Option<Var>) -> Result<BlockTrace> {
        let shape = s.value(x).shape().to_vec();
        if shape.len() != 2 || shape[0] != self.cfg.channels {
            bail!(Dimension, "block expects [{} × L] input, got {:?}", self.cfg.channels, shape);
        }
        let w = self.cfg.branch_width();
        let h = self.conv_in.forward(s, x)?;
        let mut branches = Vec::with_capacity(self.cfg.branches);
        for (b, conv) in self.branch_convs.iter().enumerate() {
            let part = if self.cfg.branches == 1 { h } else { s.tape.slice_rows(h, b * w, (b + 1) * w)? };
            let input = match branches.last() {
                Some(&prev) => s.tape.add(part, prev)?,
                None => part,
            };
            branches.push(conv.forward(s, input)?);
        }
        let assembled = if self.cfg.assembling {
            let Some(op) = long_op else {
                bail!(Config, "assembling enabled but no decoupling operator supplied");
            };
            assemble_on_tape(s, &branches, op)?
        } else {
            branches.clone()
        };
        let cat = if assembled.len() == 1 { assembled[0] } else { s.tape.concat(&assembled, 0)? };
        let mut out = self.fuse.forward(s, cat)?;
        if self.shortcut {
            out = s.tape.add(out, x)?;
        }
        Ok(BlockTrace { branches, assembled, out })
    }
}

/// Support width of every branch's response to a unit impulse, measured on
/// a block with all-ones kernels, zero biases, no assembling and no shortcut.
pub fn receptive_field_probe(cfg: &MscnnBlockConfig) -> Result<Vec<usize>> {
    let mut cfg = cfg.clone();
    cfg.assembling = false;
    let mut block = MscnnBlock::new("probe", cfg.clone())?;
    block.shortcut = false;
    let mut params = ParamSet::new();
    for c in block.convs() {
        params.insert(c.weight_name(), Tensor::full([c.c_out, c.c_in, c.kernel], 1.0));
        params.insert(c.bias_name(), Tensor::zeros([c.c_out]));
    }
    let len = 4 * cfg.branches * cfg.kernel + 1;
    let centre = len / 2;
    let mut impulse = Tensor::zeros([cfg.channels, len]);
    for c in 0..cfg.channels {
        impulse.data_mut()[c * len + centre] = 1.0;
    }
    let mut s = Session::eval(&params);
    let x = s.constant(impulse);
    let trace = block.forward(&mut s, x, None)?;
    Ok(trace
        .branches
        .iter()
        .map(|&b| {
            let t = s.value(b);
            let active: Vec<usize> = (0..len).filter(|&i| (0..t.rows()).any(|r| t.row(r)[i] != 0.0)).collect();
            match (active.first(), active.last()) {
                (Some(a), Some(z)) => z - a + 1,
                _ => 0,
            }
        })
        .collect())
}

/// Input embedding plus a stack of blocks, shared across variables.
#[derive(Clone, Debug)]
pub struct MultiScaleExtractor {
    pub cfg: MscnnConfig,
    pub embed: Conv1d,
    pub blocks: Vec<MscnnBlock>,
    bank: FilterBank,
    operators: BTreeMap<usize, Tensor>,
}

impl MultiScaleExtractor {
    pub fn new(prefix: &str, cfg: MscnnConfig) -> Result<Self> {
        cfg.block.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| MscnnBlock::new(&format!("{prefix}.block{i}"), cfg.block.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MultiScaleExtractor {
            embed: Conv1d::same(format!("{prefix}.embed"), 1, cfg.block.channels, 1)?,
            blocks,
            cfg,
            bank: FilterBank::db4(),
            operators: BTreeMap::new(),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R) {
        self.embed.init(params, rng);
        for b in &self.blocks {
            b.init(params, rng);
        }
    }

    pub fn param_prefixes(&self) -> Vec<String> {
        let mut out = vec![self.embed.prefix.clone()];
        for b in &self.blocks {
            out.extend(b.convs().map(|c| c.prefix.clone()));
        }
        out
    }

    /// Precomputes the decoupling operator for windows of length `len`.
    pub fn prepare(&mut self, len: usize) -> Result<()> {
        if self.cfg.block.assembling && self.cfg.depth > 0 && !self.operators.contains_key(&len) {
            let levels = self.cfg.block.wavelet_levels;
            if len < (1 << levels) {
                bail!(Config, "input length {len} is too short for {levels} wavelet levels");
            }
            self.operators.insert(len, wavelet::long_term_operator(len, levels, &self.bank)?);
        }
        Ok(())
    }

    fn operator(&self, s: &mut Session, len: usize) -> Result<Option<Var>> {
        if !self.cfg.block.assembling || self.cfg.depth == 0 {
            return Ok(None);
        }
        let levels = self.cfg.block.wavelet_levels;
        if len < (1 << levels) {
            bail!(Config, "input length {len} is too short for {levels} wavelet levels");
        }
        let op = match self.operators.get(&len) {
            Some(t) => t.clone(),
            None => wavelet::long_term_operator(len, levels, &self.bank)?,
        };
        Ok(Some(s.constant(op)))
    }

    /// `window` is `[H × V]`; returns one `[C × H]` feature map per variable.
    pub fn extract(&self, s: &mut Session, window: &Tensor) -> Result<Vec<Var>> {
        if window.shape().len() != 2 {
            bail!(Dimension, "window must be [H × V], got {:?}", window.shape());
        }
        let (h, v) = (window.shape()[0], window.shape()[1]);
        let op = self.operator(s, h)?;
        let mut out = Vec::with_capacity(v);
        for var in 0..v {
            let series: Vec<f64> = (0..h).map(|t| window.data()[t * v + var]).collect();
            let x = s.constant(Tensor::new([1, h], series)?);
            let mut f = self.embed.forward(s, x)?;
            for b in &self.blocks {
                f = b.forward(s, f, op)?.out;
            }
            out.push(f);
        }
        Ok(out)
    }
}
