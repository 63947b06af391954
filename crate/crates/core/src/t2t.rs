//! Time-to-text semantic extractor: patching, random masking, a
//! transformer encoder-decoder that reconstructs masked patches, and
//! semantic labels read off a filtered word-embedding table.
//!
//! Variables are handled independently: each column of a `[H × V]`
//! window becomes its own sequence of `P` patch tokens.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::math;
use crate::substrate::layers::{sinusoidal_positions, Linear, TransformerLayer};
use crate::substrate::{ParamSet, Session, Tensor, Var};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// KL divergence between the two softmax label distributions.
    Distribution,
    /// Cross-entropy of the reconstruction's distribution at the original argmax word.
    ArgmaxIndex,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct T2tConfig {
    pub patches: usize,
    pub overlap: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub ff_hidden: usize,
    pub output: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub mask_ratio: f64,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub top_k: usize,
    pub seed_words: usize,
    pub label_mode: LabelMode,
}

impl Default for T2tConfig {
    fn default() -> Self {
        T2tConfig {
            patches: 4,
            overlap: 0,
            patch_size: 24,
            hidden: 96,
            ff_hidden: 384,
            output: 24,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 1,
            mask_ratio: 0.75,
            vocab_size: 1000,
            embed_dim: 96,
            top_k: 100,
            seed_words: 12,
            label_mode: LabelMode::Distribution,
        }
    }
}

impl T2tConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output != self.patch_size {
            bail!(Config, "T2T output size {} must equal patch size {}", self.output, self.patch_size);
        }
        if self.top_k == 0 || self.top_k > self.vocab_size {
            bail!(Config, "top_k {} must be in 1..={}", self.top_k, self.vocab_size);
        }
        if self.seed_words == 0 || self.seed_words > self.top_k {
            bail!(Config, "seed word count {} must be in 1..={}", self.seed_words, self.top_k);
        }
        mask_count(self.patches, self.mask_ratio)?;
        Ok(())
    }
}

/// A window cut into `P` equal-length patches, each `[L_p × V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    pub mask: Vec<bool>,
    pub overlap: usize,
    pub source_length: usize,
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn variables(&self) -> usize {
        self.patches.first().map_or(0, |p| p.shape()[1])
    }

    pub fn starts(&self) -> Vec<usize> {
        (0..self.len()).map(|i| i * self.stride).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Patches of variable `v` stacked as `[P × L_p]`.
    pub fn series(&self, v: usize) -> Tensor {
        let vars = self.variables();
        let data = self
            .patches
            .iter()
            .flat_map(|p| (0..self.patch_len).map(move |t| p.data()[t * vars + v]))
            .collect();
        Tensor::new([self.len(), self.patch_len], data).expect("patch series")
    }
}

/// Cuts `[H × V]` into `P` patches of length `(H + O) / P` placed at a
/// uniform stride, the first starting at 0 and the last ending at `H`.
pub fn patchify(x: &Tensor, patches: usize, overlap: usize) -> Result<PatchSet> {
    if x.shape().len() != 2 {
        bail!(Dimension, "patchify expects [H × V], got {:?}", x.shape());
    }
    let (h, v) = (x.shape()[0], x.shape()[1]);
    if patches == 0 {
        bail!(Config, "patch count must be positive");
    }
    if patches == 1 && overlap > 0 {
        bail!(Config, "a single patch cannot overlap");
    }
    if !(h + overlap).is_multiple_of(patches) {
        bail!(Patching, "(H + O) = {} is not divisible by P = {patches}", h + overlap);
    }
    let patch_len = (h + overlap) / patches;
    if patch_len == 0 || patch_len > h {
        bail!(Patching, "patch length {patch_len} does not fit a window of {h}");
    }
    let stride = if patches == 1 {
        0
    } else {
        if !(h - patch_len).is_multiple_of(patches - 1) {
            bail!(Patching, "patches of {patch_len} cannot be placed at a uniform stride over {h}");
        }
        (h - patch_len) / (patches - 1)
    };
    let out = (0..patches)
        .map(|i| {
            let start = i * stride;
            Tensor::new([patch_len, v], x.data()[start * v..(start + patch_len) * v].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet { patches: out, mask: vec![false; patches], overlap, source_length: h, patch_len, stride })
}

fn mask_count(patches: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        bail!(Config, "mask ratio {ratio} must lie strictly between 0 and 1");
    }
    let n = math::round(ratio * patches as f64) as usize;
    if n == 0 || n >= patches {
        bail!(Config, "masking {n} of {patches} patches leaves nothing to learn");
    }
    Ok(n)
}

/// Flags exactly `round(ratio · P)` patches, drawn without replacement.
pub fn mask_patches<R: Rng + ?Sized>(ps: &PatchSet, ratio: f64, rng: &mut R) -> Result<PatchSet> {
    let n = mask_count(ps.len(), ratio)?;
    let mut out = ps.clone();
    out.mask = vec![false; ps.len()];
    for i in rand::seq::index::sample(rng, ps.len(), n) {
        out.mask[i] = true;
    }
    Ok(out)
}

/// Seeded convenience wrapper around [`mask_patches`].
pub fn mask_patches_seeded(ps: &PatchSet, ratio: f64, seed: u64) -> Result<PatchSet> {
    mask_patches(ps, ratio, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Word embedding rows with their vocabulary strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub vectors: Tensor,
    pub words: Vec<String>,
}

const SEED_WORDS: [&str; 16] = [
    "trend", "rise", "fall", "increase", "decrease", "peak", "trough", "cycle", "season", "stable", "spike", "volatile",
    "steady", "drop", "growth", "decline",
];

impl EmbeddingTable {
    pub fn new(vectors: Tensor, words: Vec<String>) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.shape()[0] != words.len() {
            bail!(Dimension, "embedding table needs one word per row");
        }
        if !vectors.all_finite() {
            bail!(Numeric, "embedding table contains non-finite values");
        }
        Ok(EmbeddingTable { vectors, words })
    }

    pub fn rows(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    /// Seeded Gaussian table with rows of roughly unit norm. The first
    /// `seed_words` rows carry forecasting vocabulary and act as filter seeds.
    pub fn synthetic(rows: usize, dim: usize, seed_words: usize, seed: u64) -> Result<Self> {
        if seed_words > rows {
            bail!(Config, "{seed_words} seed words exceed {rows} rows");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = Tensor::randn([rows, dim], 1.0 / math::sqrt(dim as f64), &mut rng);
        let words = (0..rows)
            .map(|i| match SEED_WORDS.get(i) {
                Some(w) if i < seed_words => w.to_string(),
                _ => format!("tok{i:05}"),
            })
            .collect();
        EmbeddingTable::new(vectors, words)
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = math::sqrt(a.iter().map(|x| x * x).sum());
    let nb = math::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Keeps the `k` rows most cosine-similar to any seed row. Seeds are always
/// kept and come first in the order given; ties break toward the lower row index.
pub fn filter_vocabulary(table: &EmbeddingTable, seed_ids: &[usize], k: usize) -> Result<EmbeddingTable> {
    let w = table.rows();
    if k > w {
        bail!(Config, "cannot keep {k} of {w} embeddings");
    }
    if seed_ids.is_empty() || seed_ids.iter().any(|&i| i >= w) {
        bail!(Config, "seed ids must be non-empty valid rows");
    }
    if k < seed_ids.len() {
        bail!(Config, "k = {k} is smaller than the {} seed rows", seed_ids.len());
    }
    let mut keep: Vec<usize> = Vec::with_capacity(k);
    for &s in seed_ids {
        if !keep.contains(&s) {
            keep.push(s);
        }
    }
    let mut scored: Vec<(f64, usize)> = (0..w)
        .filter(|r| !keep.contains(r))
        .map(|r| {
            let score = keep
                .iter()
                .map(|&s| cosine(table.vectors.row(s), table.vectors.row(r)))
                .fold(f64::NEG_INFINITY, f64::max);
            (score, r)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keep.extend(scored.iter().take(k.saturating_sub(keep.len())).map(|s| s.1));
    let d = table.dim();
    let data = keep.iter().flat_map(|&r| table.vectors.row(r).to_vec()).collect();
    EmbeddingTable::new(Tensor::new([k, d], data)?, keep.iter().map(|&r| table.words[r].clone()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticLabel {
    pub index: usize,
    pub distribution: Vec<f64>,
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| math::exp(v - max)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `S = Proj(patch)·Eᵀ`; the label is `softmax(S)` and its argmax.
pub fn assign_semantic_label(
    patch: &[f64],
    table: &EmbeddingTable,
    proj: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<SemanticLabel> {
    let z = proj(patch);
    if z.len() != table.dim() {
        bail!(Dimension, "projection width {} does not match embedding dim {}", z.len(), table.dim());
    }
    if z.iter().any(|v| !v.is_finite()) {
        bail!(Numeric, "non-finite patch projection");
    }
    let scores: Vec<f64> = (0..table.rows())
        .map(|r| table.vectors.row(r).iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect();
    let distribution = softmax(&scores);
    Ok(SemanticLabel { index: argmax(&distribution), distribution })
}

/// `Σ p·ln(p / max(q, ε))`, skipping `p = 0` terms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (math::ln(pi) - math::ln(qi.max(PROB_FLOOR))))
        .sum()
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `(1/P)·Σ_i [ 1[masked]·‖X_i − X̂_i‖₂ + KL(l_i ‖ l̂_i) ]`
pub fn t2t_loss(
    ps: &PatchSet,
    recon: &[Tensor],
    labels_orig: &[SemanticLabel],
    labels_recon: &[SemanticLabel],
) -> Result<f64> {
    let p = ps.len();
    if recon.len() != p || labels_orig.len() != p || labels_recon.len() != p {
        bail!(Dimension, "loss inputs must all have {p} patches");
    }
    let mut total = 0.0;
    for i in 0..p {
        if recon[i].shape() != ps.patches[i].shape() {
            bail!(Dimension, "reconstruction {i} has shape {:?}", recon[i].shape());
        }
        if ps.mask[i] {
            total += l2_dist(ps.patches[i].data(), recon[i].data());
        }
        total += kl_divergence(&labels_orig[i].distribution, &labels_recon[i].distribution);
    }
    Ok(total / p as f64)
}

/// Mean squared error over the masked patches only.
pub fn masked_mse(ps: &PatchSet, recon: &[Tensor]) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (i, r) in recon.iter().enumerate() {
        if ps.mask[i] {
            for (a, b) in ps.patches[i].data().iter().zip(r.data()) {
                s += (a - b) * (a - b);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Encoder-decoder over patch tokens.
#[derive(Clone, Debug)]
pub struct T2tModel {
    pub cfg: T2tConfig,
    pub embed: Linear,
    pub encoder: Vec<TransformerLayer>,
    pub decoder: Vec<TransformerLayer>,
    pub output: Linear,
    pub label_proj: Linear,
    prefix: String,
}

pub struct T2tForward {
    /// Per variable, `[P × L_p]` reconstructions.
    pub recon: Vec<Var>,
    /// Per variable, `[P × hidden]` final encoder states.
    pub encoded: Vec<Var>,
}

impl T2tModel {
    pub fn new(prefix: &str, cfg: T2tConfig) -> Result<Self> {
        cfg.validate()?;
        let layer = |name: String| TransformerLayer::new(&name, cfg.hidden, cfg.heads, cfg.ff_hidden, false);
        let encoder =
            (0..cfg.encoder_layers).map(|i| layer(format!("{prefix}.enc{i}"))).collect::<Result<Vec<_>>>()?;
        let decoder =
            (0..cfg.decoder_layers).map(|i| layer(format!("{prefix}.dec{i}"))).collect::<Result<Vec<_>>>()?;
        Ok(T2tModel {
            embed: Linear::new(format!("{prefix}.embed"), cfg.patch_size, cfg.hidden),
            output: Linear::new(format!("{prefix}.output"), cfg.hidden, cfg.output),
            label_proj: Linear::new(format!("{prefix}.label_proj"), cfg.patch_size, cfg.embed_dim),
            encoder,
            decoder,
            prefix: prefix.into(),
            cfg,
        })
    }

    pub fn mask_token_name(&self) -> String {
        format!("{}.mask_token", self.prefix)
    }

    pub fn vocab_name(&self) -> String {
        format!("{}.vocab", self.prefix)
    }

    /// Builds the synthetic embedding table and filters it to `top_k` rows.
    pub fn build_vocabulary(&self, seed: u64) -> Result<EmbeddingTable> {
        let table = EmbeddingTable::synthetic(self.cfg.vocab_size, self.cfg.embed_dim, self.cfg.seed_words, seed)?;
        let seeds: Vec<usize> = (0..self.cfg.seed_words).collect();
        filter_vocabulary(&table, &seeds, self.cfg.top_k)
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet, rng: &mut R, vocab: &EmbeddingTable) -> Result<()> {
        if vocab.dim() != self.cfg.embed_dim {
            bail!(Config, "vocabulary dim {} does not match embed_dim {}", vocab.dim(), self.cfg.embed_dim);
        }
        self.embed.init(params, rng);
        params.insert(self.mask_token_name(), Tensor::randn([self.cfg.hidden], 0.02, rng));
        for l in self.encoder.iter().chain(&self.decoder) {
            l.init(params, rng);
        }
        self.output.init(params, rng);
        self.label_proj.init(params, rng);
        params.insert(self.vocab_name(), vocab.vectors.clone());
        self.apply_freeze(params)
    }

    /// The label projection and the vocabulary never train.
    pub fn apply_freeze(&self, params: &mut ParamSet) -> Result<()> {
        params.freeze(&self.label_proj.weight_name())?;
        params.freeze(&self.label_proj.bias_name())?;
        params.freeze(&self.vocab_name())
    }

    /// One variable: `patches` is `[P × L_p]`.
    pub fn forward_series(
        &self,
        s: &mut Session,
        patches: &Tensor,
        mask: &[bool],
        positions: &[usize],
    ) -> Result<(Var, Var)> {
        let p = patches.shape()[0];
        if patches.shape()[1] != self.cfg.patch_size {
            bail!(Config, "patch length {} differs from configured size {}", patches.shape()[1], self.cfg.patch_size);
        }
        if mask.len() != p || positions.len() != p {
            bail!(Dimension, "mask and positions must cover {p} patches");
        }
        let x = s.constant(patches.clone());
        let mut e = self.embed.forward(s, x)?;
        if mask.iter().any(|&m| m) {
            let tok = s.param(&self.mask_token_name())?;
            let tok = s.tape.reshape(tok, vec![1, self.cfg.hidden])?;
            let stacked = s.tape.concat(&[e, tok], 0)?;
            let hd = self.cfg.hidden;
            let index =
                (0..p).flat_map(|i| (0..hd).map(move |j| if mask[i] { p * hd + j } else { i * hd + j })).collect();
            e = s.tape.gather(stacked, index, vec![p, hd])?;
        }
        let pe = s.constant(sinusoidal_positions(positions, self.cfg.hidden));
        let mut h = s.tape.add(e, pe)?;
        for l in &self.encoder {
            h = l.forward(s, h)?;
        }
        let encoded = h;
        for l in &self.decoder {
            h = l.forward(s, h)?;
        }
        let recon = self.output.forward(s, h)?;
        Ok((recon, encoded))
    }

    pub fn forward(&self, s: &mut Session, ps: &PatchSet) -> Result<T2tForward> {
        let positions: Vec<usize> = (0..ps.len()).collect();
        let mut out = T2tForward { recon: Vec::new(), encoded: Vec::new() };
        for v in 0..ps.variables() {
            let (r, e) = self.forward_series(s, &ps.series(v), &ps.mask, &positions)?;
            out.recon.push(r);
            out.encoded.push(e);
        }
        Ok(out)
    }

    /// Reassembles per-variable reconstructions into `[L_p × V]` patches.
    pub fn recon_patches(&self, s: &Session, fwd: &T2tForward) -> Vec<Tensor> {
        let vars = fwd.recon.len();
        let Some(&first) = fwd.recon.first() else { return Vec::new() };
        let (p, lp) = (s.value(first).shape()[0], s.value(first).shape()[1]);
        (0..p)
            .map(|i| {
                let mut data = vec![0.0; lp * vars];
                for (v, &r) in fwd.recon.iter().enumerate() {
                    for t in 0..lp {
                        data[t * vars + v] = s.value(r).data()[i * lp + t];
                    }
                }
                Tensor::new([lp, vars], data).expect("patch")
            })
            .collect()
    }

    fn label_logits(&self, s: &mut Session, x: Var) -> Result<Var> {
        let z = self.label_proj.forward(s, x)?;
        let vocab = s.param(&self.vocab_name())?;
        s.tape.matmul_bt(z, vocab)
    }

    /// Label distributions computed outside the gradient path.
    pub fn labels(&self, params: &ParamSet, patches: &Tensor) -> Result<Vec<SemanticLabel>> {
        let mut s = Session::eval(params);
        let x = s.constant(patches.clone());
        let logits = self.label_logits(&mut s, x)?;
        let l = s.tape.softmax(logits)?;
        let t = s.value(l);
        Ok((0..t.rows())
            .map(|r| SemanticLabel { index: argmax(t.row(r)), distribution: t.row(r).to_vec() })
            .collect())
    }

    /// Reconstruction and label loss for one variable's `[P × L_p]` patches.
    pub fn loss_series(&self, s: &mut Session, target: &Tensor, recon: Var, mask: &[bool]) -> Result<Var> {
        let p = target.shape()[0];
        let original = self.labels(s.params(), target)?;
        let x = s.constant(target.clone());
        let diff = s.tape.sub(recon, x)?;
        let norms = s.tape.row_norms(diff);
        let rec = s.tape.mul_const(norms, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
        let rec = s.tape.sum(rec);

        let logits = self.label_logits(s, recon)?;
        let q = s.tape.softmax(logits)?;
        let q = s.tape.clamp_min(q, PROB_FLOOR);
        let log_q = s.tape.ln(q);
        let k = self.cfg.top_k;
        let (weights, constant) = match self.cfg.label_mode {
            LabelMode::Distribution => {
                let w: Vec<f64> = original.iter().flat_map(|l| l.distribution.iter().map(|p| -p)).collect();
                let c: f64 = original
                    .iter()
                    .flat_map(|l| l.distribution.iter())
                    .filter(|&&p| p > 0.0)
                    .map(|&p| p * math::ln(p))
                    .sum();
                (w, c)
            }
            LabelMode::ArgmaxIndex => {
                let mut w = vec![0.0; p * k];
                for (i, l) in original.iter().enumerate() {
                    w[i * k + l.index] = -1.0;
                }
                (w, 0.0)
            }
        };
        let cross = s.tape.mul_const(log_q, weights)?;
        let cross = s.tape.sum(cross);
        let total = s.tape.add(rec, cross)?;
        let c = s.constant(Tensor::scalar(constant));
        let total = s.tape.add(total, c)?;
        Ok(s.tape.scale(total, 1.0 / p as f64))
    }

    /// Mean of the per-variable losses.
    pub fn loss(&self, s: &mut Session, ps: &PatchSet, fwd: &T2tForward) -> Result<Var> {
        let mut parts = Vec::with_capacity(fwd.recon.len());
        for (v, &r) in fwd.recon.iter().enumerate() {
            parts.push(self.loss_series(s, &ps.series(v), r, &ps.mask)?);
        }
        let rows = parts.iter().map(|&p| s.tape.reshape(p, vec![1, 1])).collect::<Result<Vec<_>>>()?;
        let stacked = s.tape.concat(&rows, 0)?;
        Ok(s.tape.mean(stacked))
    }

    /// Unmasked encoder states mean-pooled to `channels` and spread back over
    /// the patch time spans: one `[C × H]` map per variable.
    pub fn features(&self, params: &ParamSet, window: &Tensor, channels: usize) -> Result<Vec<Tensor>> {
        if channels == 0 || channels > self.cfg.hidden {
            bail!(Config, "cannot pool {} hidden units into {channels} channels", self.cfg.hidden);
        }
        let ps = patchify(window, self.cfg.patches, self.cfg.overlap)?;
        let mut s = Session::eval(params);
        let fwd = self.forward(&mut s, &ps)?;
        let h = ps.source_length;
        let hd = self.cfg.hidden;
        let starts = ps.starts();
        let mut coverage = vec![0usize; h];
        for &st in &starts {
            for c in coverage.iter_mut().skip(st).take(ps.patch_len) {
                *c += 1;
            }
        }
        let mut out = Vec::with_capacity(fwd.encoded.len());
        for &e in &fwd.encoded {
            let enc = s.value(e);
            let mut f = vec![0.0; channels * h];
            for (p, &st) in starts.iter().enumerate() {
                let row = enc.row(p);
                for c in 0..channels {
                    let lo = c * hd / channels;
                    let hi = ((c + 1) * hd).div_ceil(channels);
                    let pooled = row[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                    for t in st..st + ps.patch_len {
                        f[c * h + t] += pooled / coverage[t] as f64;
                    }
                }
            }
            let t = Tensor::new([channels, h], f)?;
            if !t.all_finite() {
                return Err(Error::Numeric("non-finite semantic features".into()));
            }
            out.push(t);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ramp(h: usize, v: usize) -> Tensor {
        Tensor::new([h, v], (0..h * v).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn patch_layouts() {
        let ps = patchify(&ramp(96, 1), 4, 0).unwrap();
        assert_eq!((ps.patch_len, ps.stride), (24, 24));
        assert_eq!(ps.starts(), [0, 24, 48, 72]);
        let ps = patchify(&ramp(96, 2), 5, 24).unwrap();
        assert_eq!((ps.patch_len, ps.stride), (24, 18));
        assert_eq!(ps.patches[4].data()[(23) * 2], 95.0 * 2.0);
        assert!(matches!(patchify(&ramp(96, 1), 5, 7), Err(Error::Patching(_))));
        assert!(matches!(patchify(&ramp(96, 1), 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn mask_counts_and_determinism() {
        let ps = patchify(&ramp(96, 1), 8, 0).unwrap();
        assert_eq!(mask_patches_seeded(&ps, 0.75, 1).unwrap().masked_count(), 6);
        let ps4 = patchify(&ramp(96, 1), 4, 0).unwrap();
        assert_eq!(mask_patches_seeded(&ps4, 0.75, 1).unwrap().masked_count(), 3);
        assert_eq!(mask_patches_seeded(&ps, 0.75, 5).unwrap().mask, mask_patches_seeded(&ps, 0.75, 5).unwrap().mask);
        assert!(mask_patches_seeded(&ps4, 0.1, 1).is_err());
        assert!(mask_patches_seeded(&ps4, 1.0, 1).is_err());
    }

    #[test]
    fn filter_keeps_seed_first_and_breaks_ties_low() {
        let mut data = vec![0.0; 6 * 6];
        for i in 0..6 {
            data[i * 6 + i] = 1.0;
        }
        let table = EmbeddingTable::new(Tensor::new([6, 6], data).unwrap(), (0..6).map(|i| format!("w{i}")).collect())
            .unwrap();
        let f = filter_vocabulary(&table, &[3], 3).unwrap();
        assert_eq!(f.words, ["w3", "w0", "w1"]);
        assert!(filter_vocabulary(&table, &[3], 7).is_err());
        assert!(filter_vocabulary(&table, &[], 2).is_err());
    }

    #[test]
    fn labels_follow_projection() {
        let mut data = vec![0.0; 4 * 4];
        for i in 0..4 {
            data[i * 4 + i] = 1.0;
        }
        let table = EmbeddingTable::new(Tensor::new([4, 4], data).unwrap(), (0..4).map(|i| format!("w{i}")).collect())
            .unwrap();
        let l = assign_semantic_label(&[0.0; 3], &table, |_| vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l.index, 2);
        assert!(l.distribution[2] > l.distribution[0]);
        let u = assign_semantic_label(&[0.0; 3], &table, |_| vec![0.0; 4]).unwrap();
        assert_eq!(u.index, 0);
        assert!(u.distribution.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!((u.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(assign_semantic_label(&[0.0; 3], &table, |_| vec![f64::NAN; 4]).is_err());
        assert!(assign_semantic_label(&[0.0; 3], &table, |_| vec![0.0; 3]).is_err());
    }

    #[test]
    fn loss_hand_values() {
        let uniform = SemanticLabel { index: 0, distribution: vec![0.5, 0.5] };
        let mut ps = patchify(&Tensor::new([4, 1], vec![1.0, 0.0, 0.0, 0.0]).unwrap(), 1, 0).unwrap();
        ps.mask = vec![true];
        let zero = vec![Tensor::zeros([4, 1])];
        let l = t2t_loss(&ps, &zero, &[uniform.clone()], &[uniform.clone()]).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
        assert_eq!(t2t_loss(&ps, &ps.patches.clone(), &[uniform.clone()], &[uniform.clone()]).unwrap(), 0.0);
        ps.mask = vec![false];
        assert_eq!(t2t_loss(&ps, &zero, &[uniform.clone()], &[uniform]).unwrap(), 0.0);
    }

    #[test]
    fn kl_nonnegative_and_clamped() {
        assert_eq!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert!(kl_divergence(&[0.3, 0.7], &[0.6, 0.4]) > 0.0);
        let k = kl_divergence(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((k - (-math::ln(PROB_FLOOR))).abs() < 1e-9);
    }

    #[test]
    fn distinct_masks_appear() {
        let ps = patchify(&ramp(96, 1), 16, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let masks: BTreeSet<Vec<bool>> = (0..50).map(|_| mask_patches(&ps, 0.75, &mut rng).unwrap().mask).collect();
        assert!(masks.len() > 40);
    }
}
