//! Domain-specific tokenisation: patching, the shared patch projector,
//! sinusoidal temporal embeddings and per-domain variate embeddings.
//!
//! Tokens are laid out variate-major: grid cell `(v, t)` is row `v·T′ + t`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainSpec, PreparedSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;
use crate::params::ParamStore;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const EMBEDDING_INIT_STD: f64 = 0.02;
const SINUSOID_BASE: f64 = 10_000.0;

pub(crate) const PROJ_W: &str = "projector.conv.w";
pub(crate) const PROJ_B: &str = "projector.conv.b";
pub(crate) const PROJ_LN_G: &str = "projector.ln.g";
pub(crate) const PROJ_LN_B: &str = "projector.ln.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokeniserConfig {
    pub patch_size: usize,
    pub model_dim: usize,
    /// Pre-training context length `T̄` in time points.
    pub context_length: usize,
}

impl TokeniserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.model_dim == 0 {
            return Err(Error::Config("patch size and model dim must be positive".into()));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::Config(format!("model dim {} must be even for sin/cos embeddings", self.model_dim)));
        }
        if self.context_length == 0 || self.context_length % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "context length {} is not a positive multiple of patch size {}",
                self.context_length, self.patch_size
            )));
        }
        Ok(())
    }

    /// `T′` of the pre-training context.
    pub fn num_patches(&self) -> usize {
        self.context_length / self.patch_size
    }
}

/// Non-overlapping patches of a prepared sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `(V·T′) × P`, variate-major.
    pub patches: Matrix,
    /// Per patch: every time point is real data.
    pub fully_valid: Vec<bool>,
    /// Per patch: at least one time point is real data.
    pub any_valid: Vec<bool>,
    pub variates: usize,
    pub patches_per_variate: usize,
}

pub fn patchify(sample: &PreparedSample, patch_size: usize) -> Result<PatchGrid> {
    let (v, t) = sample.values.shape();
    if patch_size == 0 || t % patch_size != 0 {
        return Err(Error::Shape(format!("sample length {t} is not a multiple of patch size {patch_size}")));
    }
    if sample.time_validity.len() != t {
        return Err(Error::Shape(format!(
            "time validity has length {} but sample has {t} time points",
            sample.time_validity.len()
        )));
    }
    let tp = t / patch_size;
    // row-major V×T̄ is already (V·T′)×P in memory
    let patches = sample.values.clone().reshaped(v * tp, patch_size);
    let mut fully_valid = Vec::with_capacity(v * tp);
    let mut any_valid = Vec::with_capacity(v * tp);
    for _ in 0..v {
        for p in 0..tp {
            let w = &sample.time_validity[p * patch_size..(p + 1) * patch_size];
            fully_valid.push(w.iter().all(|x| *x));
            any_valid.push(w.iter().any(|x| *x));
        }
    }
    Ok(PatchGrid { patches, fully_valid, any_valid, variates: v, patches_per_variate: tp })
}

/// Creates the patch projector parameters: a width-`P`, stride-`P`
/// convolution (kernel stored as `P × D`, i.e. the transposed `D×1×P`
/// kernel) followed by layer norm.
pub fn init_projector<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &TokeniserConfig, rng: &mut R) -> Result<()> {
    let bound = 1.0 / (cfg.patch_size as f64).sqrt();
    let w = Matrix::from_fn(cfg.patch_size, cfg.model_dim, |_, _| rng.random_range(-bound..bound));
    store.insert(PROJ_W, w)?;
    store.insert(PROJ_B, Matrix::zeros(1, cfg.model_dim))?;
    store.insert(PROJ_LN_G, Matrix::filled(1, cfg.model_dim, 1.0))?;
    store.insert(PROJ_LN_B, Matrix::zeros(1, cfg.model_dim))?;
    Ok(())
}

/// conv → layer norm → GELU on every patch row, with shared weights.
pub fn embed_patches_graph(g: &mut Graph, store: &ParamStore, patches: Var) -> Result<Var> {
    let w = g.param(store, store.require(PROJ_W)?);
    let b = g.param(store, store.require(PROJ_B)?);
    let ln_g = g.param(store, store.require(PROJ_LN_G)?);
    let ln_b = g.param(store, store.require(PROJ_LN_B)?);
    if g.value(patches).cols() != g.value(w).rows() {
        return Err(Error::Shape(format!(
            "patch width {} does not match projector kernel width {}",
            g.value(patches).cols(),
            g.value(w).rows()
        )));
    }
    let x = g.matmul(patches, w);
    let x = g.add_row(x, b);
    let x = g.layer_norm(x, ln_g, ln_b, LAYER_NORM_EPS);
    Ok(g.gelu(x))
}

/// Patch embeddings `(V·T′) × D` for a patch grid.
pub fn embed_patches(grid: &PatchGrid, store: &ParamStore) -> Result<Matrix> {
    let mut g = Graph::new();
    let p = g.constant(grid.patches.clone());
    let out = embed_patches_graph(&mut g, store, p)?;
    Ok(g.value(out).clone())
}

fn sinusoid_table(rows: usize, dim: usize) -> Matrix {
    Matrix::from_fn(rows, dim, |t, j| {
        let pair = (j / 2) as f64;
        let angle = t as f64 / SINUSOID_BASE.powf(2.0 * pair / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Fixed temporal table for `target` patches. Up to the pre-training
/// `T′` this is the standard sin/cos table; beyond it the `T′`-row table is
/// linearly interpolated onto `target` positions spaced `T′/target` apart
/// (the last source row is held past the end).
pub fn temporal_embeddings(target: usize, cfg: &TokeniserConfig) -> Matrix {
    let base = cfg.num_patches();
    if target <= base {
        return sinusoid_table(target, cfg.model_dim);
    }
    let table = sinusoid_table(base, cfg.model_dim);
    interpolate_rows(&table, target)
}

pub(crate) fn interpolate_rows(table: &Matrix, target: usize) -> Matrix {
    let n = table.rows();
    let step = n as f64 / target as f64;
    Matrix::from_fn(target, table.cols(), |j, c| {
        let pos = j as f64 * step;
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 || lo == hi {
            table.get(lo, c)
        } else {
            (1.0 - frac) * table.get(lo, c) + frac * table.get(hi, c)
        }
    })
}

/// Per-domain variate catalogues. The embedding tables themselves live in the
/// model's [`ParamStore`] under `registry.<domain>` so they train with
/// everything else.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainRegistry {
    domains: Vec<DomainSpec>,
}

impl DomainRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn param_name(domain: &str) -> String {
        format!("registry.{domain}")
    }

    pub fn get(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn domains(&self) -> &[DomainSpec] {
        &self.domains
    }

    /// Adds a domain with an i.i.d. `N(0, 0.02²)` table of shape `V × D`.
    pub fn register_domain<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        spec: DomainSpec,
        model_dim: usize,
        rng: &mut R,
    ) -> Result<()> {
        if self.contains(&spec.name) {
            return Err(Error::DuplicateDomain(spec.name));
        }
        let table = init_rows(spec.num_variates(), model_dim, rng);
        store.insert(Self::param_name(&spec.name), table)?;
        self.domains.push(spec);
        Ok(())
    }

    /// Appends rows for `new_variates`; existing rows are left untouched.
    pub fn extend_domain<R: Rng + ?Sized>(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        new_variates: &[String],
        rng: &mut R,
    ) -> Result<()> {
        let spec =
            self.domains.iter_mut().find(|d| d.name == name).ok_or_else(|| Error::UnknownDomain(name.to_string()))?;
        let mut seen = std::collections::HashSet::new();
        for v in new_variates {
            if spec.variates.contains(v) || !seen.insert(v) {
                return Err(Error::VariateCollision { domain: name.to_string(), variate: v.clone() });
            }
        }
        if new_variates.is_empty() {
            return Ok(());
        }
        let id = store.require(&Self::param_name(name))?;
        let old = store.value(id);
        let extra = init_rows(new_variates.len(), old.cols(), rng);
        let mut data = old.as_slice().to_vec();
        data.extend_from_slice(extra.as_slice());
        let rows = old.rows() + new_variates.len();
        let cols = old.cols();
        store.replace(id, Matrix::from_vec(rows, cols, data));
        spec.variates.extend(new_variates.iter().cloned());
        spec.multivariate = spec.variates.len() > 1 || spec.multivariate;
        Ok(())
    }
}

fn init_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid normal");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(rng))
}

/// Assembled input sequence for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `(V·T′) × D`.
    pub tokens: Matrix,
    pub token_validity: Vec<bool>,
    pub variates: usize,
    pub patches_per_variate: usize,
}

/// Graph handles produced by [`assemble_graph`].
pub struct AssembledTokens {
    /// `e^P + e^T + e^V` per grid cell.
    pub tokens: Var,
    /// `e^T + e^V` per grid cell (zero for batch-padding variates).
    pub positional: Var,
    pub token_validity: Vec<bool>,
    pub variates: usize,
    pub patches_per_variate: usize,
}

/// Builds `e_{v,t} = e^P_{v,t} + e^T_t + e^V_{S,v}` on the graph.
///
/// `slots[v]` is the catalogue index for row `v` of the sample, or `None`
/// for a batch-padding variate, whose tokens are all zero and invalid.
pub fn assemble_graph(
    g: &mut Graph,
    store: &ParamStore,
    registry: &DomainRegistry,
    cfg: &TokeniserConfig,
    sample: &PreparedSample,
    domain: &str,
    slots: &[Option<usize>],
) -> Result<AssembledTokens> {
    let spec = registry.get(domain).ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
    if slots.len() != sample.num_variates() {
        return Err(Error::Shape(format!(
            "{} variate slots for a sample with {} rows",
            slots.len(),
            sample.num_variates()
        )));
    }
    for &i in slots.iter().flatten() {
        if i >= spec.num_variates() {
            return Err(Error::VariateIndex { domain: domain.to_string(), index: i, count: spec.num_variates() });
        }
    }
    let grid = patchify(sample, cfg.patch_size)?;
    let tp = grid.patches_per_variate;
    let n = grid.variates * tp;

    let token_validity: Vec<bool> = (0..n).map(|r| slots[r / tp].is_some() && grid.any_valid[r]).collect();

    let patches = g.constant(grid.patches);
    let patch_emb = embed_patches_graph(g, store, patches)?;

    let temporal = temporal_embeddings(tp, cfg);
    let temporal_grid =
        Matrix::from_fn(n, cfg.model_dim, |r, c| if slots[r / tp].is_some() { temporal.get(r % tp, c) } else { 0.0 });
    let temporal_grid = g.constant(temporal_grid);

    let table = g.param(store, store.require(&DomainRegistry::param_name(domain))?);
    let index: Vec<Option<usize>> = (0..n).map(|r| slots[r / tp]).collect();
    let variate_grid = g.gather_rows(table, &index);

    let positional = g.add(temporal_grid, variate_grid);
    // zero whole rows of padding variates, patch embeddings included
    let keep: Vec<Option<usize>> = (0..n).map(|r| slots[r / tp].map(|_| r)).collect();
    let patch_emb = if slots.iter().all(Option::is_some) { patch_emb } else { g.gather_rows(patch_emb, &keep) };
    let tokens = g.add(patch_emb, positional);
    Ok(AssembledTokens { tokens, positional, token_validity, variates: grid.variates, patches_per_variate: tp })
}

/// Value-only [`assemble_graph`] for a sample that covers `variate_subset`.
pub fn assemble(
    sample: &PreparedSample,
    domain: &str,
    variate_subset: &[usize],
    registry: &DomainRegistry,
    store: &ParamStore,
    cfg: &TokeniserConfig,
) -> Result<TokenSequence> {
    let slots: Vec<Option<usize>> = variate_subset.iter().copied().map(Some).collect();
    let mut g = Graph::new();
    let a = assemble_graph(&mut g, store, registry, cfg, sample, domain, &slots)?;
    Ok(TokenSequence {
        tokens: g.value(a.tokens).clone(),
        token_validity: a.token_validity,
        variates: a.variates,
        patches_per_variate: a.patches_per_variate,
    })
}
