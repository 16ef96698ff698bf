//! Encoder over visible tokens, mask-token insertion, and the light decoder
//! that reconstructs every patch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{DomainSpec, PreparedSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::MaskPlan;
use crate::matrix::Matrix;
use crate::params::ParamStore;
use crate::tokeniser::{
    assemble_graph, init_projector, DomainRegistry, TokenSequence, TokeniserConfig, EMBEDDING_INIT_STD, LAYER_NORM_EPS,
};

pub(crate) const ADAPTER_W: &str = "adapter.w";
pub(crate) const ADAPTER_B: &str = "adapter.b";
pub(crate) const DECODER_POS_W: &str = "decoder.pos.w";
pub(crate) const MASK_TOKEN: &str = "mask_token";
pub(crate) const DECODER_HEAD_W: &str = "decoder.head.w";
pub(crate) const DECODER_HEAD_B: &str = "decoder.head.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub dim: usize,
    pub mlp: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl TransformerConfig {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: String,
    pub patch_size: usize,
    /// Pre-training context length in time points.
    pub context_length: usize,
    pub encoder: TransformerConfig,
    pub decoder: TransformerConfig,
}

impl ModelConfig {
    fn shallow_decoder() -> TransformerConfig {
        TransformerConfig { layers: 4, dim: 160, mlp: 640, heads: 5, head_dim: 32 }
    }

    /// Desk-scale variant used by tests and demos.
    pub fn tiny() -> Self {
        Self {
            variant: "tiny".into(),
            patch_size: 24,
            context_length: 1008,
            encoder: TransformerConfig { layers: 4, dim: 32, mlp: 64, heads: 2, head_dim: 16 },
            decoder: TransformerConfig { layers: 2, dim: 32, mlp: 64, heads: 2, head_dim: 16 },
        }
    }

    pub fn base() -> Self {
        Self {
            variant: "base".into(),
            patch_size: 24,
            context_length: 1008,
            encoder: TransformerConfig { layers: 12, dim: 192, mlp: 768, heads: 3, head_dim: 64 },
            decoder: Self::shallow_decoder(),
        }
    }

    pub fn large() -> Self {
        Self {
            variant: "large".into(),
            patch_size: 24,
            context_length: 1008,
            encoder: TransformerConfig { layers: 18, dim: 384, mlp: 1536, heads: 6, head_dim: 64 },
            decoder: Self::shallow_decoder(),
        }
    }

    pub fn huge() -> Self {
        Self {
            variant: "huge".into(),
            patch_size: 24,
            context_length: 1008,
            encoder: TransformerConfig { layers: 24, dim: 576, mlp: 2304, heads: 8, head_dim: 72 },
            decoder: Self::shallow_decoder(),
        }
    }

    pub fn named(variant: &str) -> Result<Self> {
        match variant {
            "tiny" => Ok(Self::tiny()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            "huge" => Ok(Self::huge()),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }

    pub fn tokeniser(&self) -> TokeniserConfig {
        TokeniserConfig {
            patch_size: self.patch_size,
            model_dim: self.encoder.dim,
            context_length: self.context_length,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.context_length / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        self.tokeniser().validate()?;
        for (name, t) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if t.dim == 0 || t.mlp == 0 || t.heads == 0 || t.head_dim == 0 {
                return Err(Error::Config(format!("{name} dimensions must be positive")));
            }
        }
        if self.encoder.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        Ok(())
    }
}

/// Encoder features for the effective-visible tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `N1 × D`, row `i` belongs to grid cell `visible[i]`.
    pub features: Matrix,
    pub visible: Vec<usize>,
}

/// Graph handles of one reconstruction pass.
pub struct Reconstruction {
    /// `V × T̄`.
    pub prediction: Var,
    /// `N1 × D` encoder output.
    pub encoded: Var,
    pub visible: Vec<usize>,
    pub token_validity: Vec<bool>,
    /// Row-major `V × T̄` point validity.
    pub point_validity: Vec<bool>,
}

/// Per-block residual keep factors `(attention, mlp)`; `1.0` everywhere
/// disables drop-path.
pub type DropScales = [(f64, f64)];

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub registry: DomainRegistry,
}

fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, t: &TransformerConfig, rng: &mut R) -> Result<()> {
    let inner = t.inner();
    store.insert(format!("{prefix}.ln1.g"), Matrix::filled(1, t.dim, 1.0))?;
    store.insert(format!("{prefix}.ln1.b"), Matrix::zeros(1, t.dim))?;
    store.insert(format!("{prefix}.attn.qkv.w"), xavier(t.dim, 3 * inner, rng))?;
    store.insert(format!("{prefix}.attn.qkv.b"), Matrix::zeros(1, 3 * inner))?;
    store.insert(format!("{prefix}.attn.out.w"), xavier(inner, t.dim, rng))?;
    store.insert(format!("{prefix}.attn.out.b"), Matrix::zeros(1, t.dim))?;
    store.insert(format!("{prefix}.ln2.g"), Matrix::filled(1, t.dim, 1.0))?;
    store.insert(format!("{prefix}.ln2.b"), Matrix::zeros(1, t.dim))?;
    store.insert(format!("{prefix}.mlp.fc1.w"), xavier(t.dim, t.mlp, rng))?;
    store.insert(format!("{prefix}.mlp.fc1.b"), Matrix::zeros(1, t.mlp))?;
    store.insert(format!("{prefix}.mlp.fc2.w"), xavier(t.mlp, t.dim, rng))?;
    store.insert(format!("{prefix}.mlp.fc2.b"), Matrix::zeros(1, t.dim))?;
    Ok(())
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_projector(&mut params, &config.tokeniser(), &mut rng)?;
        let (enc, dec) = (config.encoder, config.decoder);
        for i in 0..enc.layers {
            init_block(&mut params, &format!("encoder.blocks.{i}"), &enc, &mut rng)?;
        }
        params.insert("encoder.norm.g", Matrix::filled(1, enc.dim, 1.0))?;
        params.insert("encoder.norm.b", Matrix::zeros(1, enc.dim))?;
        params.insert(ADAPTER_W, xavier(enc.dim, dec.dim, &mut rng))?;
        params.insert(ADAPTER_B, Matrix::zeros(1, dec.dim))?;
        params.insert(DECODER_POS_W, xavier(enc.dim, dec.dim, &mut rng))?;
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid normal");
        params.insert(MASK_TOKEN, Matrix::from_fn(1, dec.dim, |_, _| normal.sample(&mut rng)))?;
        for i in 0..dec.layers {
            init_block(&mut params, &format!("decoder.blocks.{i}"), &dec, &mut rng)?;
        }
        params.insert("decoder.norm.g", Matrix::filled(1, dec.dim, 1.0))?;
        params.insert("decoder.norm.b", Matrix::zeros(1, dec.dim))?;
        params.insert(DECODER_HEAD_W, xavier(dec.dim, config.patch_size, &mut rng))?;
        params.insert(DECODER_HEAD_B, Matrix::zeros(1, config.patch_size))?;
        Ok(Self { config, params, registry: DomainRegistry::new() })
    }

    pub fn register_domain<R: Rng + ?Sized>(&mut self, spec: DomainSpec, rng: &mut R) -> Result<()> {
        let dim = self.config.encoder.dim;
        self.registry.register_domain(&mut self.params, spec, dim, rng)
    }

    pub fn extend_domain<R: Rng + ?Sized>(&mut self, name: &str, new_variates: &[String], rng: &mut R) -> Result<()> {
        self.registry.extend_domain(&mut self.params, name, new_variates, rng)
    }

    pub fn tokeniser(&self) -> TokeniserConfig {
        self.config.tokeniser()
    }

    pub fn variate_embeddings(&self, domain: &str) -> Result<&Matrix> {
        let id = self
            .params
            .id(&DomainRegistry::param_name(domain))
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))?;
        Ok(self.params.value(id))
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        Ok(g.param(&self.params, self.params.require(name)?))
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        let y = g.matmul(x, w);
        Ok(g.add_row(y, b))
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(g, &format!("{prefix}.g"))?;
        let beta = self.p(g, &format!("{prefix}.b"))?;
        Ok(g.layer_norm(x, gamma, beta, LAYER_NORM_EPS))
    }

    /// Pre-norm transformer block.
    fn block(
        &self,
        g: &mut Graph,
        prefix: &str,
        t: &TransformerConfig,
        x: Var,
        key_valid: Option<&[bool]>,
        keep: (f64, f64),
    ) -> Result<Var> {
        let inner = t.inner();
        let h = self.norm(g, x, &format!("{prefix}.ln1"))?;
        let qkv = self.linear(g, h, &format!("{prefix}.attn.qkv"))?;
        let scale = 1.0 / (t.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(t.heads);
        for head in 0..t.heads {
            let off = head * t.head_dim;
            let q = g.cols(qkv, off, t.head_dim);
            let k = g.cols(qkv, inner + off, t.head_dim);
            let v = g.cols(qkv, 2 * inner + off, t.head_dim);
            let s = g.matmul_nt(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s, key_valid);
            heads.push(g.matmul(a, v));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let mut attn = self.linear(g, cat, &format!("{prefix}.attn.out"))?;
        if keep.0 != 1.0 {
            attn = g.scale(attn, keep.0);
        }
        let x = g.add(x, attn);
        let h = self.norm(g, x, &format!("{prefix}.ln2"))?;
        let h = self.linear(g, h, &format!("{prefix}.mlp.fc1"))?;
        let h = g.gelu(h);
        let mut m = self.linear(g, h, &format!("{prefix}.mlp.fc2"))?;
        if keep.1 != 1.0 {
            m = g.scale(m, keep.1);
        }
        Ok(g.add(x, m))
    }

    /// Encoder stack over the rows of `tokens` (all of which attend to each
    /// other) followed by the final norm.
    pub fn encoder_stack(&self, g: &mut Graph, tokens: Var, drop: Option<&DropScales>) -> Result<Var> {
        let enc = self.config.encoder;
        if let Some(d) = drop {
            if d.len() != enc.layers {
                return Err(Error::Shape(format!("{} drop scales for {} layers", d.len(), enc.layers)));
            }
        }
        let mut x = tokens;
        for i in 0..enc.layers {
            let keep = drop.map_or((1.0, 1.0), |d| d[i]);
            x = self.block(g, &format!("encoder.blocks.{i}"), &enc, x, None, keep)?;
        }
        self.norm(g, x, "encoder.norm")
    }

    /// `H = f(E[m])` for the grid cells listed in `visible`.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        tokens: Var,
        visible: &[usize],
        drop: Option<&DropScales>,
    ) -> Result<Var> {
        if visible.is_empty() {
            return Err(Error::EmptyVisibleSet);
        }
        let index: Vec<Option<usize>> = visible.iter().copied().map(Some).collect();
        let e = g.gather_rows(tokens, &index);
        self.encoder_stack(g, e, drop)
    }

    /// Adapts encoder features to decoder width, scatters them to their grid
    /// slots, fills every other slot with the mask token, and re-adds the
    /// projected positional terms everywhere.
    pub fn insert_mask_tokens_graph(
        &self,
        g: &mut Graph,
        encoded: Var,
        visible: &[usize],
        positional: Var,
    ) -> Result<Var> {
        let total = g.value(positional).rows();
        if g.value(encoded).rows() != visible.len() {
            return Err(Error::Shape(format!(
                "{} encoder rows for {} visible slots",
                g.value(encoded).rows(),
                visible.len()
            )));
        }
        let adapted = self.linear(g, encoded, "adapter")?;
        let mask = self.p(g, MASK_TOKEN)?;
        let grid = g.scatter_rows(adapted, mask, visible, total);
        let pos_w = self.p(g, DECODER_POS_W)?;
        let pos = g.matmul(positional, pos_w);
        Ok(g.add(grid, pos))
    }

    /// Decoder stack over the full grid (padding excluded as keys), then a
    /// linear head to `P` points per token, unfolded to `V × T̄`.
    pub fn decode_graph(&self, g: &mut Graph, grid: Var, token_validity: &[bool], variates: usize) -> Result<Var> {
        let dec = self.config.decoder;
        let n = g.value(grid).rows();
        if token_validity.len() != n || variates == 0 || n % variates != 0 {
            return Err(Error::Shape(format!(
                "decoder grid of {n} rows, {} validity flags, {variates} variates",
                token_validity.len()
            )));
        }
        let mut x = grid;
        for i in 0..dec.layers {
            x = self.block(g, &format!("decoder.blocks.{i}"), &dec, x, Some(token_validity), (1.0, 1.0))?;
        }
        let x = self.norm(g, x, "decoder.norm")?;
        let head = self.linear(g, x, "decoder.head")?;
        let p = self.config.patch_size;
        Ok(g.reshape(head, variates, n / variates * p))
    }

    /// Full pass: assemble → encode visible → insert mask tokens → decode.
    /// `slots[v]` maps sample row `v` to a catalogue index (`None` = batch
    /// padding). The plan must cover the same `V × T′` grid.
    pub fn reconstruct_graph(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        domain: &str,
        slots: &[Option<usize>],
        plan: &MaskPlan,
        drop: Option<&DropScales>,
    ) -> Result<Reconstruction> {
        let cfg = self.tokeniser();
        let a = assemble_graph(g, &self.params, &self.registry, &cfg, sample, domain, slots)?;
        if plan.variates != a.variates || plan.patches != a.patches_per_variate {
            return Err(Error::Shape(format!(
                "mask plan {}x{} for token grid {}x{}",
                plan.variates, plan.patches, a.variates, a.patches_per_variate
            )));
        }
        let visible = plan.effective_visible(&a.token_validity)?;
        let encoded = self.encode_graph(g, a.tokens, &visible, drop)?;
        let grid = self.insert_mask_tokens_graph(g, encoded, &visible, a.positional)?;
        let prediction = self.decode_graph(g, grid, &a.token_validity, a.variates)?;
        let t = sample.len();
        let point_validity =
            (0..a.variates * t).map(|i| slots[i / t].is_some() && sample.time_validity[i % t]).collect();
        Ok(Reconstruction { prediction, encoded, visible, token_validity: a.token_validity, point_validity })
    }

    /// `H = f(E[m ∧ validity])` on an assembled token sequence.
    pub fn encode(&self, tokens: &TokenSequence, plan: &MaskPlan) -> Result<EncoderOutput> {
        let visible = plan.effective_visible(&tokens.token_validity)?;
        let mut g = Graph::new();
        let e = g.constant(tokens.tokens.clone());
        let h = self.encode_graph(&mut g, e, &visible, None)?;
        Ok(EncoderOutput { features: g.value(h).clone(), visible })
    }

    /// `H′` for an encoder output; `positional` is the `(V·T′) × D` sum of
    /// temporal and variate embeddings.
    pub fn insert_mask_tokens(&self, encoded: &EncoderOutput, positional: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let h = g.constant(encoded.features.clone());
        let pos = g.constant(positional.clone());
        let out = self.insert_mask_tokens_graph(&mut g, h, &encoded.visible, pos)?;
        Ok(g.value(out).clone())
    }

    /// `X̂ = g(H′)`.
    pub fn decode(&self, grid: &Matrix, token_validity: &[bool], variates: usize) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.constant(grid.clone());
        let out = self.decode_graph(&mut g, x, token_validity, variates)?;
        Ok(g.value(out).clone())
    }

    /// Reconstruction `X̂` (`V × T̄`) of a sample covering `variate_subset`.
    pub fn forward_reconstruct(
        &self,
        sample: &PreparedSample,
        domain: &str,
        variate_subset: &[usize],
        plan: &MaskPlan,
    ) -> Result<Matrix> {
        let slots: Vec<Option<usize>> = variate_subset.iter().copied().map(Some).collect();
        let mut g = Graph::new();
        let r = self.reconstruct_graph(&mut g, sample, domain, &slots, plan, None)?;
        Ok(g.value(r.prediction).clone())
    }
}
