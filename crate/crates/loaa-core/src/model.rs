//! ViT-style encoder over a time-frequency token grid: patch embedding with a
//! CLS token and learned positional embeddings, pre-norm attention/FFN blocks,
//! a classification head read off the CLS token, and freeze semantics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{adapter_delta, AdapterSet, BlockKind};
use crate::checkpoint::{Checkpoint, TensorEntry};
use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

/// Flattened patch length: one 16x16 spectrogram tile per token.
pub const PATCH_DIM: usize = 256;
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Preset {
    Tiny,
    Base,
}

impl core::str::FromStr for Preset {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "base" => Ok(Preset::Base),
            other => Err(CoreError::Config(format!(
                "unknown preset '{other}', expected one of: tiny, base"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Token grid extents `(F_p, T_p)`: frequency rows by time columns.
    pub grid: (usize, usize),
    pub n_classes: usize,
}

impl BackboneConfig {
    pub fn preset(preset: Preset, grid: (usize, usize), n_classes: usize) -> Self {
        match preset {
            Preset::Tiny => {
                BackboneConfig { d: 64, n_layers: 4, n_heads: 4, mlp_ratio: 4, grid, n_classes }
            }
            Preset::Base => {
                BackboneConfig { d: 768, n_layers: 12, n_heads: 12, mlp_ratio: 4, grid, n_classes }
            }
        }
    }

    pub fn tiny(grid: (usize, usize), n_classes: usize) -> Self {
        Self::preset(Preset::Tiny, grid, n_classes)
    }

    pub fn base(grid: (usize, usize), n_classes: usize) -> Self {
        Self::preset(Preset::Base, grid, n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "embedding width {} must be divisible by {} heads",
                self.d, self.n_heads
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(CoreError::Config("token grid extents must be >= 1".into()));
        }
        if self.n_layers == 0 || self.mlp_ratio == 0 || self.n_classes == 0 {
            return Err(CoreError::Config("layers, mlp_ratio, and classes must be >= 1".into()));
        }
        Ok(())
    }

    /// Patch tokens plus one CLS token.
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d
    }
}

/// Closed-form total parameter count (backbone plus classification head);
/// every budget ratio in the repo is computed against this number.
pub fn parameter_census(cfg: &BackboneConfig) -> u64 {
    let d = cfg.d as u64;
    let m = cfg.mlp_hidden() as u64;
    let n = cfg.n_tokens() as u64;
    let per_layer = 2 * d              // ln1
        + 4 * (d * d + d)              // q/k/v/out projections
        + 2 * d                        // ln2
        + (d * m + m) + (m * d + d);   // ffn
    let stem = (PATCH_DIM as u64) * d + d  // patch projection
        + d                                // cls
        + n * d;                           // positional table
    stem + cfg.n_layers as u64 * per_layer + 2 * d + head_census(cfg)
}

/// Classification head size: `d * n_classes + n_classes`.
pub fn head_census(cfg: &BackboneConfig) -> u64 {
    (cfg.d * cfg.n_classes + cfg.n_classes) as u64
}

#[derive(Debug, Clone)]
pub struct NamedParam<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub frozen: bool,
}

/// Ordered collection of named tensors; creation order doubles as the
/// registration and optimizer-state order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<NamedParam<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CoreError::Validation(format!("duplicate parameter '{name}'")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(NamedParam { name, tensor, frozen: false });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, idx: usize) -> &NamedParam<T> {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut NamedParam<T> {
        &mut self.entries[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&NamedParam<T>> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam<T>> {
        self.entries.iter_mut()
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for e in &mut self.entries {
            e.frozen = frozen;
        }
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.tensor.numel() as u64).sum()
    }

    pub fn trainable_params(&self) -> u64 {
        self.entries.iter().filter(|e| !e.frozen).map(|e| e.tensor.numel() as u64).sum()
    }

    /// Registers every entry on the graph: frozen tensors as plain inputs (no
    /// gradient tracking), trainable tensors as parameters. Returns vars
    /// aligned with entry order.
    pub fn register_all(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| if e.frozen { g.input(&e.tensor) } else { g.param(&e.tensor) })
            .collect()
    }

    /// Moves gradients off the graph into each trainable tensor's grad slot.
    pub fn collect_grads(&mut self, g: &Graph<T>, vars: &[Var]) -> Result<()> {
        for (e, &v) in self.entries.iter_mut().zip(vars) {
            if e.frozen {
                continue;
            }
            if let Some(grad) = g.grad(v)? {
                e.tensor.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.clear_grad();
        }
    }
}

/// Samples a normal with the given std, resampling anything outside two
/// standard deviations. Draws happen in f64 so f32 and f64 models built from
/// the same seed hold the same values.
pub fn trunc_normal<T: Element, R: Rng>(
    shape: impl Into<Vec<usize>>,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    let normal = Normal::new(0.0f64, std).expect("std > 0");
    Tensor::from_fn(shape, |_| loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64(v);
        }
    })
}

#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub cfg: BackboneConfig,
    pub store: ParamStore<T>,
}

fn layer_prefix(i: usize) -> String {
    format!("layers.{i}.")
}

/// Backbone tensor names in creation order, with shapes, for one config.
fn tensor_specs(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d;
    let m = cfg.mlp_hidden();
    let mut specs = vec![
        ("patch_embed.w".to_string(), vec![PATCH_DIM, d]),
        ("patch_embed.b".to_string(), vec![d]),
        ("cls".to_string(), vec![1, d]),
        ("pos".to_string(), vec![cfg.n_tokens(), d]),
    ];
    for i in 0..cfg.n_layers {
        let p = layer_prefix(i);
        for (suffix, shape) in [
            ("ln1.g", vec![d]),
            ("ln1.b", vec![d]),
            ("attn.wq", vec![d, d]),
            ("attn.bq", vec![d]),
            ("attn.wk", vec![d, d]),
            ("attn.bk", vec![d]),
            ("attn.wv", vec![d, d]),
            ("attn.bv", vec![d]),
            ("attn.wo", vec![d, d]),
            ("attn.bo", vec![d]),
            ("ln2.g", vec![d]),
            ("ln2.b", vec![d]),
            ("ffn.w1", vec![d, m]),
            ("ffn.b1", vec![m]),
            ("ffn.w2", vec![m, d]),
            ("ffn.b2", vec![d]),
        ] {
            specs.push((format!("{p}{suffix}"), shape));
        }
    }
    specs.push(("ln_f.g".to_string(), vec![d]));
    specs.push(("ln_f.b".to_string(), vec![d]));
    specs.push(("head.w".to_string(), vec![d, cfg.n_classes]));
    specs.push(("head.b".to_string(), vec![cfg.n_classes]));
    specs
}

fn init_tensor<T: Element, R: Rng>(name: &str, shape: &[usize], rng: &mut R) -> Tensor<T> {
    if name.ends_with(".g") {
        // layer-norm gains
        Tensor::full(shape.to_vec(), T::one())
    } else if name.ends_with(".b")
        || name.ends_with(".bq")
        || name.ends_with(".bk")
        || name.ends_with(".bv")
        || name.ends_with(".bo")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
    {
        Tensor::zeros(shape.to_vec())
    } else {
        trunc_normal(shape.to_vec(), INIT_STD, rng)
    }
}

impl<T: Element> Backbone<T> {
    /// Fresh backbone: truncated-normal weights (std 0.02), zero biases, unit
    /// layer-norm gains. Same seed, same bytes.
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape) in tensor_specs(&cfg) {
            let t = init_tensor(&name, &shape, &mut rng);
            store.add(name, t)?;
        }
        Ok(Backbone { cfg, store })
    }

    /// Marks every backbone tensor frozen except the classification head.
    pub fn freeze_backbone(&mut self) {
        for e in self.store.iter_mut() {
            e.frozen = !e.name.starts_with("head.");
        }
    }

    pub fn unfreeze_all(&mut self) {
        self.store.set_all_frozen(false);
    }

    pub fn total_params(&self) -> u64 {
        self.store.total_params()
    }

    pub fn trainable_params(&self) -> u64 {
        self.store.trainable_params()
    }
}

impl Backbone<f32> {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        for e in self.store.iter() {
            ckpt.insert(&e.name, TensorEntry::from_tensor(&e.tensor, e.frozen))?;
        }
        Ok(ckpt)
    }

    /// Rebuilds a backbone from a container, validating every expected name
    /// and shape; all mismatches are collected into one diff report. Extra
    /// tensors (adapters, metadata) are ignored here.
    pub fn from_checkpoint(cfg: BackboneConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut diffs: Vec<String> = Vec::new();
        for (name, shape) in tensor_specs(&cfg) {
            match ckpt.get(&name) {
                None => diffs.push(format!("missing tensor '{name}' (expected {shape:?})")),
                Some(entry) if entry.shape != shape => diffs.push(format!(
                    "shape mismatch for '{name}': expected {shape:?}, file has {:?}",
                    entry.shape
                )),
                Some(entry) => {
                    let idx = store.add(name, entry.to_tensor()?)?;
                    store.entry_mut(idx).frozen = entry.frozen;
                }
            }
        }
        if !diffs.is_empty() {
            return Err(CoreError::Validation(format!(
                "checkpoint does not match the model ({} problems):\n  {}",
                diffs.len(),
                diffs.join("\n  ")
            )));
        }
        Ok(Backbone { cfg, store })
    }
}

/// Vars for one attention block's weights.
pub struct AttnWeights {
    pub ln_g: Var,
    pub ln_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

pub struct FfnWeights {
    pub ln_g: Var,
    pub ln_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct BlockOutput {
    pub y: Var,
    /// The pre-norm sublayer input LN(x); parallel adapters tap this.
    pub ln: Var,
    /// Per-head attention weights, each `[N, N]`; empty for FFN blocks.
    pub attn: Vec<Var>,
}

/// Pre-norm residual attention block: `y = x + MHSA(LN(x))`.
pub fn attention_block<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    w: &AttnWeights,
    n_heads: usize,
) -> Result<BlockOutput> {
    let d = g.value(x)?.shape()[1];
    if d % n_heads != 0 {
        return Err(CoreError::Config(format!("width {d} not divisible by {n_heads} heads")));
    }
    let dh = d / n_heads;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let ln = g.layer_norm(x, w.ln_g, w.ln_b, eps)?;
    let q = g.matmul(ln, w.wq)?;
    let q = g.add_bias(q, w.bq)?;
    let k = g.matmul(ln, w.wk)?;
    let k = g.add_bias(k, w.bk)?;
    let v = g.matmul(ln, w.wv)?;
    let v = g.add_bias(v, w.bv)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale)?;
        let a = g.softmax(scaled, 1)?;
        attn.push(a);
        heads.push(g.matmul(a, vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    let proj = g.matmul(merged, w.wo)?;
    let out = g.add_bias(proj, w.bo)?;
    let y = g.add(x, out)?;
    Ok(BlockOutput { y, ln, attn })
}

/// Pre-norm residual feed-forward block: `y = x + W2 gelu(W1 LN(x))`.
pub fn ffn_block<T: Element>(g: &mut Graph<T>, x: Var, w: &FfnWeights) -> Result<BlockOutput> {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let ln = g.layer_norm(x, w.ln_g, w.ln_b, eps)?;
    let h = g.matmul(ln, w.w1)?;
    let h = g.add_bias(h, w.b1)?;
    let h = g.gelu(h)?;
    let out = g.matmul(h, w.w2)?;
    let out = g.add_bias(out, w.b2)?;
    let y = g.add(x, out)?;
    Ok(BlockOutput { y, ln, attn: Vec::new() })
}

/// Everything a batched forward pass produced, plus the graph vars needed to
/// pull gradients back out.
pub struct ForwardResult {
    /// `[batch, n_classes]` logits.
    pub logits: Var,
    /// `attn[clip][layer][head]` softmax vars, each `[N, N]`.
    pub attn: Vec<Vec<Vec<Var>>>,
    /// Backbone vars aligned with `backbone.store` entries.
    pub backbone_vars: Vec<Var>,
    /// Adapter vars aligned with the adapter store entries (empty if none).
    pub adapter_vars: Vec<Var>,
}

impl ForwardResult {
    /// Stacks one clip's layer attention into an `[n_heads, N, N]` tensor.
    pub fn attention_tensor<T: Element>(
        &self,
        g: &Graph<T>,
        clip: usize,
        layer: usize,
    ) -> Result<Tensor<T>> {
        let heads = &self.attn[clip][layer];
        let n = g.value(heads[0])?.shape()[0];
        let mut data = Vec::with_capacity(heads.len() * n * n);
        for &h in heads {
            data.extend_from_slice(g.value(h)?.data());
        }
        Tensor::new(vec![heads.len(), n, n], data)
    }
}

impl<T: Element> Backbone<T> {
    fn var(&self, vars: &[Var], name: &str) -> Result<Var> {
        self.store
            .index_of(name)
            .map(|i| vars[i])
            .ok_or_else(|| CoreError::Usage(format!("unknown parameter '{name}'")))
    }

    fn attn_weights(&self, vars: &[Var], layer: usize) -> Result<AttnWeights> {
        let p = layer_prefix(layer);
        Ok(AttnWeights {
            ln_g: self.var(vars, &format!("{p}ln1.g"))?,
            ln_b: self.var(vars, &format!("{p}ln1.b"))?,
            wq: self.var(vars, &format!("{p}attn.wq"))?,
            bq: self.var(vars, &format!("{p}attn.bq"))?,
            wk: self.var(vars, &format!("{p}attn.wk"))?,
            bk: self.var(vars, &format!("{p}attn.bk"))?,
            wv: self.var(vars, &format!("{p}attn.wv"))?,
            bv: self.var(vars, &format!("{p}attn.bv"))?,
            wo: self.var(vars, &format!("{p}attn.wo"))?,
            bo: self.var(vars, &format!("{p}attn.bo"))?,
        })
    }

    fn ffn_weights(&self, vars: &[Var], layer: usize) -> Result<FfnWeights> {
        let p = layer_prefix(layer);
        Ok(FfnWeights {
            ln_g: self.var(vars, &format!("{p}ln2.g"))?,
            ln_b: self.var(vars, &format!("{p}ln2.b"))?,
            w1: self.var(vars, &format!("{p}ffn.w1"))?,
            b1: self.var(vars, &format!("{p}ffn.b1"))?,
            w2: self.var(vars, &format!("{p}ffn.w2"))?,
            b2: self.var(vars, &format!("{p}ffn.b2"))?,
        })
    }

    /// Embeds one clip grid: per-token projection, CLS prepend, positions.
    fn patch_embed(&self, g: &mut Graph<T>, vars: &[Var], clip: &Tensor<T>) -> Result<Var> {
        let (fp, tp) = self.cfg.grid;
        if clip.shape() != [fp, tp, PATCH_DIM] {
            return Err(CoreError::Dimension(format!(
                "clip grid {:?} does not match configured [{fp}, {tp}, {PATCH_DIM}]",
                clip.shape()
            )));
        }
        let x = g.input(clip);
        let flat = g.reshape(x, vec![fp * tp, PATCH_DIM])?;
        let proj = g.matmul(flat, self.var(vars, "patch_embed.w")?)?;
        let proj = g.add_bias(proj, self.var(vars, "patch_embed.b")?)?;
        let cls = self.var(vars, "cls")?;
        let tokens = g.concat_rows(&[cls, proj])?;
        g.add(tokens, self.var(vars, "pos")?)
    }

    /// Runs the full encoder over a batch of clip grids. Adapters, when
    /// present, add their deltas in parallel with the blocks they are
    /// attached to.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        clips: &[&Tensor<T>],
        adapters: Option<&AdapterSet<T>>,
    ) -> Result<ForwardResult> {
        if clips.is_empty() {
            return Err(CoreError::Usage("forward_batch needs at least one clip".into()));
        }
        if let Some(a) = adapters {
            a.check_compatible(&self.cfg)?;
        }
        let backbone_vars = self.store.register_all(g);
        let adapter_vars = adapters.map(|a| a.store.register_all(g)).unwrap_or_default();

        let mut rows = Vec::with_capacity(clips.len());
        let mut attn_all = Vec::with_capacity(clips.len());
        for clip in clips {
            let mut x = self.patch_embed(g, &backbone_vars, clip)?;
            let mut attn_layers = Vec::with_capacity(self.cfg.n_layers);
            for layer in 0..self.cfg.n_layers {
                let aw = self.attn_weights(&backbone_vars, layer)?;
                let block = attention_block(g, x, &aw, self.cfg.n_heads)?;
                let mut y = block.y;
                if let Some(a) = adapters {
                    if let Some(site) = a.site(layer, BlockKind::Attn) {
                        let delta =
                            adapter_delta(g, block.ln, &site.vars(&adapter_vars), self.cfg.grid)?;
                        y = g.add(y, delta)?;
                    }
                }
                attn_layers.push(block.attn);

                let fw = self.ffn_weights(&backbone_vars, layer)?;
                let block = ffn_block(g, y, &fw)?;
                let mut z = block.y;
                if let Some(a) = adapters {
                    if let Some(site) = a.site(layer, BlockKind::Ffn) {
                        let delta =
                            adapter_delta(g, block.ln, &site.vars(&adapter_vars), self.cfg.grid)?;
                        z = g.add(z, delta)?;
                    }
                }
                x = z;
            }
            let eps = T::from_f64(LAYER_NORM_EPS);
            let lnf = g.layer_norm(
                x,
                self.var(&backbone_vars, "ln_f.g")?,
                self.var(&backbone_vars, "ln_f.b")?,
                eps,
            )?;
            let cls_tok = g.slice_rows(lnf, 0, 1)?;
            let logits = g.matmul(cls_tok, self.var(&backbone_vars, "head.w")?)?;
            let logits = g.add_bias(logits, self.var(&backbone_vars, "head.b")?)?;
            rows.push(logits);
            attn_all.push(attn_layers);
        }
        let logits = if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows)? };
        Ok(ForwardResult { logits, attn: attn_all, backbone_vars, adapter_vars })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig::tiny((2, 3), 4)
    }

    fn clip(cfg: &BackboneConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![cfg.grid.0, cfg.grid.1, PATCH_DIM], |_| {
            rng.random::<f64>() * 2.0 - 1.0
        })
    }

    #[test]
    fn census_formula_matches_materialized_store() {
        for cfg in [tiny_cfg(), BackboneConfig::base((8, 64), 44)] {
            let bb = Backbone::<f32>::init(cfg.clone(), 1).unwrap();
            assert_eq!(bb.total_params(), parameter_census(&cfg));
        }
    }

    #[test]
    fn base_census_reference_values() {
        let cfg = BackboneConfig::base((8, 64), 44);
        assert_eq!(head_census(&cfg), 33_836);
        let total = parameter_census(&cfg);
        // The head is ~0.04% of the full model.
        let frac = head_census(&cfg) as f64 / total as f64;
        assert!((frac - 0.0004).abs() < 5e-5, "head fraction {frac}");
    }

    #[test]
    fn token_count_is_grid_plus_cls() {
        let cfg = BackboneConfig::base((8, 64), 44);
        assert_eq!(cfg.n_tokens(), 513);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = Backbone::<f32>::init(tiny_cfg(), 7).unwrap();
        let b = Backbone::<f32>::init(tiny_cfg(), 7).unwrap();
        for (x, y) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(x.tensor.data(), y.tensor.data());
        }
        let c = Backbone::<f32>::init(tiny_cfg(), 8).unwrap();
        assert_ne!(
            a.store.by_name("patch_embed.w").unwrap().tensor.data(),
            c.store.by_name("patch_embed.w").unwrap().tensor.data()
        );
    }

    #[test]
    fn patch_embed_zero_input_is_bias_plus_position() {
        let cfg = tiny_cfg();
        let bb = Backbone::<f64>::init(cfg.clone(), 3).unwrap();
        let mut g = Graph::new();
        let vars = bb.store.register_all(&mut g);
        let zero = Tensor::zeros(vec![cfg.grid.0, cfg.grid.1, PATCH_DIM]);
        let x = bb.patch_embed(&mut g, &vars, &zero).unwrap();
        let out = g.value(x).unwrap();
        let bias = bb.store.by_name("patch_embed.b").unwrap().tensor.data();
        let pos = bb.store.by_name("pos").unwrap().tensor.data();
        let d = cfg.d;
        for tok in 1..cfg.n_tokens() {
            for j in 0..d {
                let expect = bias[j] + pos[tok * d + j];
                assert!((out.data()[tok * d + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_embed_permutation_moves_embeddings() {
        let cfg = tiny_cfg();
        let bb = Backbone::<f64>::init(cfg.clone(), 3).unwrap();
        let base = clip(&cfg, 10);
        // Swap patch tokens 0 and 1 (cells (0,0) and (0,1)).
        let mut swapped = base.clone();
        let (a, b) = (0usize, 1usize);
        for c in 0..PATCH_DIM {
            swapped.data_mut().swap(a * PATCH_DIM + c, b * PATCH_DIM + c);
        }
        let embed = |input: &Tensor<f64>| {
            let mut g = Graph::new();
            let vars = bb.store.register_all(&mut g);
            let x = bb.patch_embed(&mut g, &vars, input).unwrap();
            g.value(x).unwrap().data().to_vec()
        };
        let e0 = embed(&base);
        let e1 = embed(&swapped);
        let d = cfg.d;
        let pos = bb.store.by_name("pos").unwrap().tensor.data();
        // Pre-positional embeddings permute with the patches.
        for j in 0..d {
            let pre0_b = e0[(b + 1) * d + j] - pos[(b + 1) * d + j];
            let pre1_a = e1[(a + 1) * d + j] - pos[(a + 1) * d + j];
            assert!((pre0_b - pre1_a).abs() < 1e-12);
        }
        // CLS row is untouched.
        for j in 0..d {
            assert_eq!(e0[j], e1[j]);
        }
    }

    #[test]
    fn attention_block_with_zero_value_proj_is_identity() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::<f64>::init(cfg.clone(), 4).unwrap();
        for name in ["layers.0.attn.wv", "layers.0.attn.bv", "layers.0.attn.wo", "layers.0.attn.bo"]
        {
            let idx = bb.store.index_of(name).unwrap();
            let shape = bb.store.entry(idx).tensor.shape().to_vec();
            bb.store.entry_mut(idx).tensor = Tensor::zeros(shape);
        }
        let mut g = Graph::new();
        let vars = bb.store.register_all(&mut g);
        let x = g.input(&Tensor::from_fn(vec![7, cfg.d], |i| (i as f64 * 0.7).sin()));
        let aw = bb.attn_weights(&vars, 0).unwrap();
        let out = attention_block(&mut g, x, &aw, cfg.n_heads).unwrap();
        assert_eq!(g.value(out.y).unwrap().data(), g.value(x).unwrap().data());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = tiny_cfg();
        let bb = Backbone::<f32>::init(cfg.clone(), 5).unwrap();
        let mut g = Graph::new();
        let c = clip(&cfg, 2).to_f32();
        let res = bb.forward_batch(&mut g, &[&c], None).unwrap();
        for layer in 0..cfg.n_layers {
            for &head in &res.attn[0][layer] {
                let a = g.value(head).unwrap();
                let n = a.shape()[0];
                for r in 0..n {
                    let s: f32 = a.data()[r * n..(r + 1) * n].iter().sum();
                    assert!((s - 1.0).abs() < 1e-6, "layer {layer} row {r} sums to {s}");
                }
            }
        }
    }

    #[test]
    fn single_head_attention_matches_direct_oracle() {
        // 3 tokens, d = 2, one head, hand-rolled f64 reference.
        let mut g = Graph::<f64>::new();
        let xs = [[0.3, -0.8], [1.1, 0.4], [-0.5, 0.9]];
        let x = g.input(&Tensor::new(vec![3, 2], xs.iter().flatten().copied().collect()).unwrap());
        let ident = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let gain = g.input(&Tensor::full(vec![2], 1.0));
        let zero2 = g.input(&Tensor::zeros(vec![2]));
        let wq = g.input(&ident);
        let w = AttnWeights {
            ln_g: gain,
            ln_b: zero2,
            wq,
            bq: zero2,
            wk: wq,
            bk: zero2,
            wv: wq,
            bv: zero2,
            wo: wq,
            bo: zero2,
        };
        let out = attention_block(&mut g, x, &w, 1).unwrap();
        let got = g.value(out.y).unwrap().data().to_vec();

        // Oracle: layer norm, q=k=v=ln(x), softmax(q k^T / sqrt(2)) v + x.
        let mut ln = [[0.0f64; 2]; 3];
        for i in 0..3 {
            let mean = (xs[i][0] + xs[i][1]) / 2.0;
            let var = ((xs[i][0] - mean).powi(2) + (xs[i][1] - mean).powi(2)) / 2.0;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            ln[i] = [(xs[i][0] - mean) * rstd, (xs[i][1] - mean) * rstd];
        }
        for i in 0..3 {
            let mut scores = [0.0f64; 3];
            for j in 0..3 {
                scores[j] = (ln[i][0] * ln[j][0] + ln[i][1] * ln[j][1]) / (2.0f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: [f64; 3] = core::array::from_fn(|j| (scores[j] - m).exp());
            let denom: f64 = exps.iter().sum();
            let mut out_i = [0.0f64; 2];
            for j in 0..3 {
                let a = exps[j] / denom;
                out_i[0] += a * ln[j][0];
                out_i[1] += a * ln[j][1];
            }
            assert!((got[i * 2] - (xs[i][0] + out_i[0])).abs() < 1e-10);
            assert!((got[i * 2 + 1] - (xs[i][1] + out_i[1])).abs() < 1e-10);
        }
    }

    #[test]
    fn ffn_block_zero_w2_is_identity_and_linear_regime_matches_taylor() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::<f64>::init(cfg.clone(), 6).unwrap();
        for name in ["layers.0.ffn.w2", "layers.0.ffn.b2"] {
            let idx = bb.store.index_of(name).unwrap();
            let shape = bb.store.entry(idx).tensor.shape().to_vec();
            bb.store.entry_mut(idx).tensor = Tensor::zeros(shape);
        }
        let mut g = Graph::new();
        let vars = bb.store.register_all(&mut g);
        let x = g.input(&Tensor::from_fn(vec![5, cfg.d], |i| (i as f64 * 0.3).cos()));
        let fw = bb.ffn_weights(&vars, 0).unwrap();
        let out = ffn_block(&mut g, x, &fw).unwrap();
        assert_eq!(g.value(out.y).unwrap().data(), g.value(x).unwrap().data());

        // Linear regime: gelu(h) ~ h/2 for |h| << 1, so the branch collapses
        // to LN(x) W1 W2 / 2 to first order. Scale W1 down to enter it.
        let mut bb2 = Backbone::<f64>::init(cfg.clone(), 6).unwrap();
        let epsilon = 1e-6;
        let idx = bb2.store.index_of("layers.0.ffn.w1").unwrap();
        for v in bb2.store.entry_mut(idx).tensor.data_mut() {
            *v *= epsilon;
        }
        for name in ["layers.0.ffn.b1", "layers.0.ffn.b2"] {
            let idx = bb2.store.index_of(name).unwrap();
            let shape = bb2.store.entry(idx).tensor.shape().to_vec();
            bb2.store.entry_mut(idx).tensor = Tensor::zeros(shape);
        }
        let mut g2 = Graph::new();
        let vars2 = bb2.store.register_all(&mut g2);
        let xt = Tensor::from_fn(vec![4, cfg.d], |i| ((i * 3) as f64 * 0.11).sin());
        let x2 = g2.input(&xt);
        let fw2 = bb2.ffn_weights(&vars2, 0).unwrap();
        let out2 = ffn_block(&mut g2, x2, &fw2).unwrap();

        let ln = g2.layer_norm(x2, fw2.ln_g, fw2.ln_b, 1e-5).unwrap();
        let h = g2.matmul(ln, fw2.w1).unwrap();
        let half = g2.scale(h, 0.5).unwrap();
        let lin = g2.matmul(half, fw2.w2).unwrap();
        let approx = g2.add(x2, lin).unwrap();
        let got = g2.value(out2.y).unwrap().data();
        let want = g2.value(approx).unwrap().data();
        for (a, b) in got.iter().zip(want) {
            // Agreement to first order: the residual is O(epsilon^2).
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_of_identical_clips_gives_identical_rows() {
        let cfg = tiny_cfg();
        let bb = Backbone::<f32>::init(cfg.clone(), 9).unwrap();
        let c = clip(&cfg, 3).to_f32();
        let mut g = Graph::new();
        let res = bb.forward_batch(&mut g, &[&c, &c], None).unwrap();
        let logits = g.value(res.logits).unwrap();
        assert_eq!(logits.shape(), &[2, cfg.n_classes]);
        let (r0, r1) = logits.data().split_at(cfg.n_classes);
        assert_eq!(r0, r1);
    }

    #[test]
    fn forward_is_replay_deterministic() {
        let cfg = tiny_cfg();
        let bb = Backbone::<f64>::init(cfg.clone(), 42).unwrap();
        let c = clip(&cfg, 1);
        let run = || {
            let mut g = Graph::new();
            let res = bb.forward_batch(&mut g, &[&c], None).unwrap();
            g.value(res.logits).unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn freeze_keeps_head_trainable() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::<f32>::init(cfg.clone(), 2).unwrap();
        bb.freeze_backbone();
        assert_eq!(bb.trainable_params(), head_census(&cfg));
        assert!(bb.store.by_name("head.w").map(|e| !e.frozen).unwrap());
        assert!(bb.store.by_name("pos").map(|e| e.frozen).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_and_shape_diff() {
        let cfg = tiny_cfg();
        let mut bb = Backbone::<f32>::init(cfg.clone(), 11).unwrap();
        bb.freeze_backbone();
        let ckpt = bb.to_checkpoint().unwrap();
        let back = Backbone::<f32>::from_checkpoint(cfg.clone(), &ckpt).unwrap();
        for (a, b) in bb.store.iter().zip(back.store.iter()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
            assert_eq!(a.frozen, b.frozen);
        }
        // Loading into a mismatched config lists every problem.
        let base = BackboneConfig::base((8, 64), 44);
        let err = Backbone::<f32>::from_checkpoint(base, &ckpt).unwrap_err();
        match err {
            CoreError::Validation(msg) => {
                assert!(msg.contains("shape mismatch"));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }
}
