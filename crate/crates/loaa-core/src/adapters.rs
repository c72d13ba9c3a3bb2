//! Parallel bottleneck adapters on a frozen encoder.
//!
//! The grid adapter projects tokens down to `r` channels and back up with
//! convolutions over the time-frequency token grid, so tokens interact along
//! the time axis (kernel `(1,3)`), the frequency axis (`(3,1)`), both
//! (`(3,3)`), or not at all (`(1,1)`, which is exactly the classic linear
//! parallel adapter). Budgets across kernel shapes are matched by solving for
//! the bottleneck width `r`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{Checkpoint, TensorEntry};
use crate::error::{CoreError, Result};
use crate::graph::{gelu_value, Graph, Var};
use crate::model::{
    head_census, parameter_census, trunc_normal, BackboneConfig, ParamStore, INIT_STD,
};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum BlockKind {
    Attn,
    Ffn,
}

impl core::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BlockKind::Attn => write!(f, "attn"),
            BlockKind::Ffn => write!(f, "ffn"),
        }
    }
}

/// Adapter kernel footprint over the `(frequency, time)` grid.
///
/// Aliases follow the usual shorthand: `L` = linear `(1,1)`, `T` = time
/// `(1,3)`, `F` = frequency `(3,1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "String", into = "String"))]
pub enum KernelShape {
    K1x1,
    K1x3,
    K3x1,
    K3x3,
}

impl KernelShape {
    pub const ALL: [KernelShape; 4] =
        [KernelShape::K1x1, KernelShape::K3x1, KernelShape::K1x3, KernelShape::K3x3];

    pub fn dims(self) -> (usize, usize) {
        match self {
            KernelShape::K1x1 => (1, 1),
            KernelShape::K1x3 => (1, 3),
            KernelShape::K3x1 => (3, 1),
            KernelShape::K3x3 => (3, 3),
        }
    }

    /// Kernel area `k_f * k_t`.
    pub fn taps(self) -> usize {
        let (kf, kt) = self.dims();
        kf * kt
    }

    pub fn alias(self) -> Option<char> {
        match self {
            KernelShape::K1x1 => Some('L'),
            KernelShape::K1x3 => Some('T'),
            KernelShape::K3x1 => Some('F'),
            KernelShape::K3x3 => None,
        }
    }
}

impl core::fmt::Display for KernelShape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let (kf, kt) = self.dims();
        write!(f, "({kf},{kt})")
    }
}

impl core::str::FromStr for KernelShape {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "L" | "l" | "(1,1)" | "1x1" => Ok(KernelShape::K1x1),
            "T" | "t" | "(1,3)" | "1x3" => Ok(KernelShape::K1x3),
            "F" | "f" | "(3,1)" | "3x1" => Ok(KernelShape::K3x1),
            "(3,3)" | "3x3" => Ok(KernelShape::K3x3),
            other => Err(CoreError::Config(format!(
                "unknown kernel shape '{other}', expected L, T, F, (1,1), (1,3), (3,1) or (3,3)"
            ))),
        }
    }
}

impl From<KernelShape> for String {
    fn from(k: KernelShape) -> String {
        match k.alias() {
            Some(c) => String::from(c),
            None => format!("{k}"),
        }
    }
}

impl TryFrom<String> for KernelShape {
    type Error = CoreError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdapterConfig {
    pub attn_kernel: Option<KernelShape>,
    pub ffn_kernel: Option<KernelShape>,
    /// Bottleneck channel count, `1 <= r < d`.
    pub r: usize,
    /// Token grid the adapter reshapes to; must match the backbone grid.
    pub grid: (usize, usize),
}

impl AdapterConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.attn_kernel.is_none() && self.ffn_kernel.is_none() {
            return Err(CoreError::Config(
                "adapter config needs at least one of attn_kernel/ffn_kernel".into(),
            ));
        }
        if self.r == 0 || self.r >= d {
            return Err(CoreError::Config(format!(
                "bottleneck r = {} must satisfy 1 <= r < d = {d}",
                self.r
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(CoreError::Config("adapter grid extents must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kernel_for(&self, kind: BlockKind) -> Option<KernelShape> {
        match kind {
            BlockKind::Attn => self.attn_kernel,
            BlockKind::Ffn => self.ffn_kernel,
        }
    }

    /// "Attn(T) FFN(F)"-style cell label.
    pub fn cell_label(&self) -> String {
        let part = |kind: &str, k: Option<KernelShape>| match k {
            Some(k) => match k.alias() {
                Some(c) => format!("{kind}({c})"),
                None => format!("{kind}{k}"),
            },
            None => String::new(),
        };
        let a = part("Attn", self.attn_kernel);
        let f = part("FFN", self.ffn_kernel);
        match (a.is_empty(), f.is_empty()) {
            (false, false) => format!("{a} {f}"),
            (false, true) => a,
            (true, false) => f,
            (true, true) => String::from("none"),
        }
    }
}

/// Store indices of one adapter site's four tensors.
#[derive(Debug, Clone, Copy)]
pub struct SiteIndices {
    pub down_w: usize,
    pub down_b: usize,
    pub up_w: usize,
    pub up_b: usize,
}

/// Graph vars of one adapter site's four tensors.
pub struct SiteVars {
    pub down_w: Var,
    pub down_b: Var,
    pub up_w: Var,
    pub up_b: Var,
}

impl SiteIndices {
    pub fn vars(&self, vars: &[Var]) -> SiteVars {
        SiteVars {
            down_w: vars[self.down_w],
            down_b: vars[self.down_b],
            up_w: vars[self.up_w],
            up_b: vars[self.up_b],
        }
    }
}

/// Per-layer, non-shared adapter weights for every attached site.
pub struct AdapterSet<T> {
    pub cfg: AdapterConfig,
    pub store: ParamStore<T>,
    d: usize,
    sites: BTreeMap<(usize, BlockKind), SiteIndices>,
}

fn site_tensor_name(layer: usize, kind: BlockKind, part: &str) -> String {
    format!("adapter.L{layer}.{kind}.{part}")
}

impl<T: Element> AdapterSet<T> {
    /// Builds adapters on every layer named by the config. Down projections
    /// are truncated-normal, up projections exactly zero, so a fresh adapter
    /// set is a no-op.
    pub fn init(cfg: AdapterConfig, backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate(backbone.d)?;
        if cfg.grid != backbone.grid {
            return Err(CoreError::Config(format!(
                "adapter grid {:?} does not match backbone grid {:?}",
                cfg.grid, backbone.grid
            )));
        }
        let mut set =
            AdapterSet { cfg, store: ParamStore::new(), d: backbone.d, sites: BTreeMap::new() };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for layer in 0..backbone.n_layers {
            if set.cfg.attn_kernel.is_some() {
                set.attach(layer, BlockKind::Attn, &mut rng)?;
            }
            if set.cfg.ffn_kernel.is_some() {
                set.attach(layer, BlockKind::Ffn, &mut rng)?;
            }
        }
        Ok(set)
    }

    /// Attaches one adapter site. Attaching the same (layer, block) twice is a
    /// configuration error.
    pub fn attach<R: Rng>(&mut self, layer: usize, kind: BlockKind, rng: &mut R) -> Result<()> {
        if self.sites.contains_key(&(layer, kind)) {
            return Err(CoreError::Config(format!(
                "adapter already attached to layer {layer} {kind} block"
            )));
        }
        let kernel = self
            .cfg
            .kernel_for(kind)
            .ok_or_else(|| CoreError::Config(format!("no kernel configured for {kind} blocks")))?;
        let (kf, kt) = kernel.dims();
        let (d, r) = (self.d, self.cfg.r);
        let down_w = self.store.add(
            site_tensor_name(layer, kind, "down.w"),
            trunc_normal(vec![kf, kt, d, r], INIT_STD, rng),
        )?;
        let down_b =
            self.store.add(site_tensor_name(layer, kind, "down.b"), Tensor::zeros(vec![r]))?;
        let up_w = self
            .store
            .add(site_tensor_name(layer, kind, "up.w"), Tensor::zeros(vec![kf, kt, r, d]))?;
        let up_b = self.store.add(site_tensor_name(layer, kind, "up.b"), Tensor::zeros(vec![d]))?;
        self.sites.insert((layer, kind), SiteIndices { down_w, down_b, up_w, up_b });
        Ok(())
    }

    pub fn site(&self, layer: usize, kind: BlockKind) -> Option<&SiteIndices> {
        self.sites.get(&(layer, kind))
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn check_compatible(&self, backbone: &BackboneConfig) -> Result<()> {
        if self.d != backbone.d {
            return Err(CoreError::Config(format!(
                "adapter width {} does not match backbone width {}",
                self.d, backbone.d
            )));
        }
        if self.cfg.grid != backbone.grid {
            return Err(CoreError::Config(format!(
                "adapter grid {:?} does not match backbone grid {:?}",
                self.cfg.grid, backbone.grid
            )));
        }
        Ok(())
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.store.set_all_frozen(frozen);
    }

    pub fn trainable_params(&self) -> u64 {
        self.store.trainable_params()
    }

    pub fn total_params(&self) -> u64 {
        self.store.total_params()
    }
}

impl AdapterSet<f32> {
    pub fn write_to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        for e in self.store.iter() {
            ckpt.insert(&e.name, TensorEntry::from_tensor(&e.tensor, e.frozen))?;
        }
        Ok(())
    }

    pub fn from_checkpoint(
        cfg: AdapterConfig,
        backbone: &BackboneConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut set = AdapterSet::init(cfg, backbone, 0)?;
        let mut diffs: Vec<String> = Vec::new();
        for e in set.store.iter_mut() {
            match ckpt.get(&e.name) {
                None => diffs.push(format!("missing tensor '{}'", e.name)),
                Some(entry) if entry.shape != e.tensor.shape() => diffs.push(format!(
                    "shape mismatch for '{}': expected {:?}, file has {:?}",
                    e.name,
                    e.tensor.shape(),
                    entry.shape
                )),
                Some(entry) => {
                    e.tensor = entry.to_tensor()?;
                    e.frozen = entry.frozen;
                }
            }
        }
        if !diffs.is_empty() {
            return Err(CoreError::Validation(format!(
                "adapter tensors do not match the config ({} problems):\n  {}",
                diffs.len(),
                diffs.join("\n  ")
            )));
        }
        Ok(set)
    }
}

/// The adapter branch on one block: split off CLS, reshape the patch tokens to
/// the time-frequency grid, bottleneck through two grid convolutions with a
/// GELU between, and reassemble. The CLS token has no grid position, so its
/// delta row is zero. Returns only the delta; the caller adds it to the block
/// output.
pub fn adapter_delta<T: Element>(
    g: &mut Graph<T>,
    ln_tokens: Var,
    site: &SiteVars,
    grid: (usize, usize),
) -> Result<Var> {
    let (fp, tp) = grid;
    let shape = g.value(ln_tokens)?.shape().to_vec();
    if shape.len() != 2 || shape[0] != fp * tp + 1 {
        return Err(CoreError::Dimension(format!(
            "adapter input {shape:?} does not match grid {fp}x{tp} plus CLS"
        )));
    }
    let d = shape[1];
    let patches = g.slice_rows(ln_tokens, 1, fp * tp)?;
    let grid3 = g.reshape(patches, vec![fp, tp, d])?;
    let down = g.conv_grid(grid3, site.down_w, site.down_b)?;
    let act = g.gelu(down)?;
    let up = g.conv_grid(act, site.up_w, site.up_b)?;
    let flat = g.reshape(up, vec![fp * tp, d])?;
    let cls_zero = g.input(&Tensor::zeros(vec![1, d]));
    g.concat_rows(&[cls_zero, flat])
}

/// Splits tokens into (grid, cls): token `i > 0` lands at grid cell
/// `((i-1) / T_p, (i-1) % T_p)`, the exact inverse of the patchify flatten
/// order.
pub fn tokens_to_grid<T: Element>(
    tokens: &Tensor<T>,
    grid: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (fp, tp) = grid;
    let shape = tokens.shape();
    if shape.len() != 2 || shape[0] != fp * tp + 1 {
        return Err(CoreError::Dimension(format!(
            "token matrix {shape:?} does not match grid {fp}x{tp} plus CLS"
        )));
    }
    let d = shape[1];
    let cls = Tensor::new(vec![d], tokens.data()[..d].to_vec())?;
    let grid3 = Tensor::new(vec![fp, tp, d], tokens.data()[d..].to_vec())?;
    Ok((grid3, cls))
}

/// Exact inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<T: Element>(grid3: &Tensor<T>, cls: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = grid3.shape();
    if shape.len() != 3 {
        return Err(CoreError::Dimension(format!("grid must be rank 3, got {shape:?}")));
    }
    let d = shape[2];
    if cls.shape() != [d] {
        return Err(CoreError::Dimension(format!(
            "cls must have shape [{d}], got {:?}",
            cls.shape()
        )));
    }
    let mut data = Vec::with_capacity((shape[0] * shape[1] + 1) * d);
    data.extend_from_slice(cls.data());
    data.extend_from_slice(grid3.data());
    Tensor::new(vec![shape[0] * shape[1] + 1, d], data)
}

/// Independent reference for the linear parallel adapter: a plain two-layer
/// bottleneck `gelu(h W_down + b_down) W_up + b_up` applied per patch token
/// via explicit loops, with a zero CLS row. The grid-convolution path with a
/// `(1,1)` kernel must agree with this elementwise.
pub fn linear_adapter_delta_reference<T: Element>(
    tokens: &Tensor<T>,
    down_w: &Tensor<T>,
    down_b: &Tensor<T>,
    up_w: &Tensor<T>,
    up_b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let shape = tokens.shape();
    if shape.len() != 2 {
        return Err(CoreError::Dimension("tokens must be rank 2".into()));
    }
    let (n, d) = (shape[0], shape[1]);
    let r = down_b.numel();
    if down_w.shape() != [d, r] || up_w.shape() != [r, d] || up_b.shape() != [d] {
        return Err(CoreError::Dimension(format!(
            "reference adapter weight shapes inconsistent: {:?} {:?} {:?}",
            down_w.shape(),
            up_w.shape(),
            up_b.shape()
        )));
    }
    let mut out = vec![T::zero(); n * d];
    for i in 1..n {
        let h = &tokens.data()[i * d..(i + 1) * d];
        let mut hidden = vec![T::zero(); r];
        for (j, slot) in hidden.iter_mut().enumerate() {
            let mut acc = down_b.data()[j];
            for (c, &hv) in h.iter().enumerate() {
                acc = acc + hv * down_w.data()[c * r + j];
            }
            *slot = gelu_value(acc);
        }
        let row = &mut out[i * d..(i + 1) * d];
        for (c, slot) in row.iter_mut().enumerate() {
            let mut acc = up_b.data()[c];
            for (j, &hv) in hidden.iter().enumerate() {
                acc = acc + hv * up_w.data()[j * d + c];
            }
            *slot = acc;
        }
    }
    Tensor::new(vec![n, d], out)
}

// ---------------------------------------------------------------------------
// Parameter accounting and budget matching
// ---------------------------------------------------------------------------

/// All parameters of one adapter site: both projections plus both biases.
pub fn site_param_count(kernel: KernelShape, d: usize, r: usize) -> u64 {
    (2 * kernel.taps() * d * r + r + d) as u64
}

/// Weight parameters only (biases excluded); budgets are matched on these so
/// the kernel-area/bottleneck trade is exact.
pub fn site_weight_count(kernel: KernelShape, d: usize, r: usize) -> u64 {
    (2 * kernel.taps() * d * r) as u64
}

/// Trainable parameters of a full adapter configuration, optionally plus the
/// classification head.
pub fn param_count(cfg: &AdapterConfig, backbone: &BackboneConfig, include_head: bool) -> u64 {
    let mut total = 0;
    for kernel in [cfg.attn_kernel, cfg.ffn_kernel].into_iter().flatten() {
        total += backbone.n_layers as u64 * site_param_count(kernel, backbone.d, cfg.r);
    }
    if include_head {
        total += head_census(backbone);
    }
    total
}

/// Weight-only count over all sites for budget matching.
pub fn weight_count(cfg: &AdapterConfig, backbone: &BackboneConfig) -> u64 {
    let mut total = 0;
    for kernel in [cfg.attn_kernel, cfg.ffn_kernel].into_iter().flatten() {
        total += backbone.n_layers as u64 * site_weight_count(kernel, backbone.d, cfg.r);
    }
    total
}

/// Named parameter budgets. The nominal percentage labels follow the
/// convention that a budget is pinned by the equivalent linear-bottleneck
/// adapter: "2%" and "5%" anchor at linear r = 108 (on one or both blocks),
/// "10%" at linear r = 216.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BudgetPreset {
    TwoPercent,
    FivePercent,
    TenPercent,
}

impl BudgetPreset {
    pub fn linear_anchor_r(self) -> usize {
        match self {
            BudgetPreset::TwoPercent | BudgetPreset::FivePercent => 108,
            BudgetPreset::TenPercent => 216,
        }
    }
}

impl core::str::FromStr for BudgetPreset {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2%" | "two-percent" => Ok(BudgetPreset::TwoPercent),
            "5%" | "five-percent" => Ok(BudgetPreset::FivePercent),
            "10%" | "ten-percent" => Ok(BudgetPreset::TenPercent),
            other => Err(CoreError::Config(format!(
                "unknown budget preset '{other}', expected 2%, 5% or 10%"
            ))),
        }
    }
}

/// How cmd-level code states a parameter budget.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum BudgetSpec {
    /// Fraction of the backbone census spent on adapter weights.
    Fraction(f64),
    /// Match the weight count of a linear `(1,1)` adapter with this `r` on
    /// the same placement.
    MatchLinearR(usize),
    Preset(BudgetPreset),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSolution {
    pub r: usize,
    pub target_weights: u64,
    pub achieved_weights: u64,
    /// Achieved total (weights + biases + head) over the backbone census.
    pub achieved_fraction: f64,
    pub params_with_head: u64,
    pub params_without_head: u64,
}

/// Largest `r >= 1` whose adapter weight count stays within the budget.
/// Weight counts are linear in `r`, so the solution is a single division and
/// strictly increasing budgets give strictly increasing counts.
pub fn budget_solve_r(
    spec: BudgetSpec,
    attn_kernel: Option<KernelShape>,
    ffn_kernel: Option<KernelShape>,
    backbone: &BackboneConfig,
) -> Result<BudgetSolution> {
    if attn_kernel.is_none() && ffn_kernel.is_none() {
        return Err(CoreError::Config("budget needs at least one placement".into()));
    }
    let per_r: u64 = [attn_kernel, ffn_kernel]
        .into_iter()
        .flatten()
        .map(|k| backbone.n_layers as u64 * 2 * k.taps() as u64 * backbone.d as u64)
        .sum();
    let census = parameter_census(backbone);
    let target_weights = match spec {
        BudgetSpec::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(CoreError::Config(format!(
                    "budget fraction must be in (0, 1), got {f}"
                )));
            }
            (f * census as f64) as u64
        }
        BudgetSpec::MatchLinearR(r_lin) => {
            if r_lin == 0 {
                return Err(CoreError::Config("linear anchor r must be >= 1".into()));
            }
            [attn_kernel, ffn_kernel]
                .into_iter()
                .flatten()
                .map(|_| {
                    backbone.n_layers as u64
                        * site_weight_count(KernelShape::K1x1, backbone.d, r_lin)
                })
                .sum()
        }
        BudgetSpec::Preset(p) => {
            return budget_solve_r(
                BudgetSpec::MatchLinearR(p.linear_anchor_r()),
                attn_kernel,
                ffn_kernel,
                backbone,
            );
        }
    };
    let r = (target_weights / per_r) as usize;
    if r == 0 {
        return Err(CoreError::Budget(format!(
            "no bottleneck fits: budget of {target_weights} weights is below one unit of {per_r}"
        )));
    }
    // The bottleneck must stay below the embedding width.
    let r = r.min(backbone.d - 1);
    let cfg = AdapterConfig { attn_kernel, ffn_kernel, r, grid: backbone.grid };
    let with_head = param_count(&cfg, backbone, true);
    Ok(BudgetSolution {
        r,
        target_weights,
        achieved_weights: weight_count(&cfg, backbone),
        achieved_fraction: with_head as f64 / census as f64,
        params_with_head: with_head,
        params_without_head: param_count(&cfg, backbone, false),
    })
}
