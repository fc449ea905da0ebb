use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{read_bundle, restore_into, write_bundle};
use crate::autodiff::init::{self, SeededRng};
use crate::autodiff::layers::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::ControlClass;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

const NORM_EPS: f64 = 1e-5;

/// How the control reaches the attention queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Every query is the control projection; token content is ignored.
    Replace,
    /// The control projection is added to each token's query.
    Additive,
    /// Plain causal self-attention.
    Off,
}

impl FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(AttentionMode::Replace),
            "additive" => Ok(AttentionMode::Additive),
            "off" => Ok(AttentionMode::Off),
            other => Err(Error::Config(format!("unknown attention mode {other:?} (expected replace, additive or off)"))),
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::Replace => "replace",
            AttentionMode::Additive => "additive",
            AttentionMode::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub control_dim: usize,
    /// Width of the feed-forward layer as a multiple of `model_dim`.
    pub ff_mult: usize,
    pub attention: AttentionMode,
    pub norm_injection: bool,
    pub embedding_injection: bool,
    /// Standard deviation of the token and position embeddings.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 4,
            heads: 4,
            model_dim: 128,
            vocab_size: 2048,
            max_len: 256,
            control_dim: 16,
            ff_mult: 4,
            attention: AttentionMode::Additive,
            norm_injection: true,
            embedding_injection: true,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
            ("control_dim", self.control_dim),
            ("ff_mult", self.ff_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("transformer {name} must be positive")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!("model_dim {} is not divisible by {} heads", self.model_dim, self.heads)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// All three injection points disabled.
    pub fn uncontrolled(&self) -> Self {
        TransformerConfig { attention: AttentionMode::Off, norm_injection: false, embedding_injection: false, ..self.clone() }
    }
}

/// Layer norm whose gain and shift may be offset by projections of the control embedding.
#[derive(Clone, Debug)]
struct ControlledNorm {
    gain: ParamId,
    shift: ParamId,
    gain_map: ParamId,
    shift_map: ParamId,
}

impl ControlledNorm {
    fn new(store: &mut ParamStore<f64>, name: &str, d: usize, c: usize) -> Self {
        ControlledNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[1, d])),
            gain_map: store.add(format!("{name}.gain_map"), Tensor::zeros(&[c, d])),
            shift_map: store.add(format!("{name}.shift_map"), Tensor::zeros(&[c, d])),
        }
    }

    fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: Var, control: Option<Var>) -> Result<Var> {
        let mut gain = g.param(store, self.gain);
        let mut shift = g.param(store, self.shift);
        if let Some(e) = control {
            let gm = g.param(store, self.gain_map);
            let sm = g.param(store, self.shift_map);
            let dg = g.matmul(e, gm)?;
            let ds = g.matmul(e, sm)?;
            gain = g.add(gain, dg)?;
            shift = g.add(shift, ds)?;
        }
        controlled_layer_norm(g, x, gain, shift)
    }
}

/// `gain ⊙ (x − μ)/√(σ² + ε) + shift` row-wise, with `[1, d]` gain and shift.
pub fn controlled_layer_norm(g: &mut Graph<f64>, x: Var, gain: Var, shift: Var) -> Result<Var> {
    let normed = g.layer_norm(x, NORM_EPS)?;
    let scaled = g.mul_row(normed, gain)?;
    g.add_row(scaled, shift)
}

/// Multi-head causal attention over already projected `[n, d]` queries,
/// keys and values: per head `softmax(Q Kᵀ / √d_k) V` with future positions masked.
pub fn causal_attention(g: &mut Graph<f64>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{d} columns cannot be split into {heads} heads")));
    }
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk)?;
        let kh = g.slice_cols(k, h * dk, dk)?;
        let vh = g.slice_cols(v, h * dk, dk)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scaled = g.scale(scores, scale);
        let weights = g.causal_softmax(scaled)?;
        outs.push(g.matmul(weights, vh)?);
    }
    if heads == 1 {
        return Ok(outs[0]);
    }
    g.concat_cols(&outs)
}

#[derive(Clone, Debug)]
struct Block {
    norm_attn: ControlledNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    /// Control → query-space map.
    query_map: ParamId,
    norm_ff: ControlledNorm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TransformerHeader {
    kind: String,
    config: TransformerConfig,
    vocab: Vocab,
}

/// Decoder-only transformer with control injected at the input embedding,
/// the attention queries and every layer norm. The output projection is
/// tied to the token embedding.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: TransformerConfig,
    vocab: Vocab,
    pub(crate) store: ParamStore<f64>,
    token_embedding: ParamId,
    position_embedding: ParamId,
    control_embedding: ParamId,
    embedding_map: ParamId,
    blocks: Vec<Block>,
    final_norm: ControlledNorm,
}

impl Transformer {
    /// Fresh model. Base weights come from one random stream and the control
    /// adapters from another, so models differing only in injection flags
    /// share every base weight; every adapter map starts at zero.
    pub fn new(mut config: TransformerConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let (d, c) = (config.model_dim, config.control_dim);
        let mut store = ParamStore::new();
        let mut base = init::rng(config.seed);
        let mut adapters = init::rng(init::derive_seed(config.seed, 1));

        let token_embedding = store.add("embed.token", init::normal(&mut base, &[config.vocab_size, d], config.init_std));
        let position_embedding = store.add("embed.position", init::normal(&mut base, &[config.max_len, d], config.init_std));
        let control_embedding = store.add("control.embedding", init::normal(&mut adapters, &[ControlClass::ALL.len(), c], 1.0));
        let embedding_map = store.add("control.embedding_map", Tensor::zeros(&[c, d]));
        let blocks = (0..config.layers)
            .map(|l| Self::block(&mut store, &mut base, &format!("block{l}"), &config))
            .collect();
        let final_norm = ControlledNorm::new(&mut store, "final_norm", d, c);
        Ok(Transformer {
            config,
            vocab,
            store,
            token_embedding,
            position_embedding,
            control_embedding,
            embedding_map,
            blocks,
            final_norm,
        })
    }

    fn block(store: &mut ParamStore<f64>, rng: &mut SeededRng, name: &str, cfg: &TransformerConfig) -> Block {
        let (d, c) = (cfg.model_dim, cfg.control_dim);
        let ff = d * cfg.ff_mult;
        Block {
            norm_attn: ControlledNorm::new(store, &format!("{name}.norm_attn"), d, c),
            query: Linear::new(store, rng, &format!("{name}.query"), d, d),
            key: Linear::new(store, rng, &format!("{name}.key"), d, d),
            value: Linear::new(store, rng, &format!("{name}.value"), d, d),
            output: Linear::new(store, rng, &format!("{name}.output"), d, d),
            query_map: store.add(format!("{name}.query_map"), Tensor::zeros(&[c, d])),
            norm_ff: ControlledNorm::new(store, &format!("{name}.norm_ff"), d, c),
            ff_in: Linear::new(store, rng, &format!("{name}.ff_in"), d, ff),
            ff_out: Linear::new(store, rng, &format!("{name}.ff_out"), ff, d),
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<f64> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f64> {
        &mut self.store
    }

    /// Per-position next-token logits `[n, vocab]` for `tokens` under control `class`.
    pub fn forward(&self, g: &mut Graph<f64>, tokens: &[usize], class: ControlClass) -> Result<Var> {
        self.forward_with(g, &self.store, tokens, class)
    }

    /// [`Transformer::forward`] reading weights from `store`, which must have
    /// this model's layout; used by finite-difference checks.
    pub fn forward_with(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, tokens: &[usize], class: ControlClass) -> Result<Var> {
        let cfg = &self.config;
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Invalid("cannot run the transformer on an empty sequence".into()));
        }
        if n > cfg.max_len {
            return Err(Error::Invalid(format!("sequence of {n} tokens exceeds the maximum length {}", cfg.max_len)));
        }
        let token_table = g.param(store, self.token_embedding);
        let position_table = g.param(store, self.position_embedding);
        let tok = g.gather(token_table, tokens)?;
        let positions: Vec<usize> = (0..n).collect();
        let pos = g.gather(position_table, &positions)?;
        let mut x = g.add(tok, pos)?;

        let uses_control = cfg.embedding_injection || cfg.norm_injection || cfg.attention != AttentionMode::Off;
        let control = if uses_control {
            let table = g.param(store, self.control_embedding);
            Some(g.gather(table, &[class.index()])?)
        } else {
            None
        };
        let norm_control = if cfg.norm_injection { control } else { None };

        if cfg.embedding_injection {
            let map = g.param(store, self.embedding_map);
            let offset = g.matmul(control.expect("control is gathered"), map)?;
            x = g.add_row(x, offset)?;
        }

        for block in &self.blocks {
            let h = block.norm_attn.forward(g, store, x, norm_control)?;
            let mut q = block.query.forward(g, store, h)?;
            match cfg.attention {
                AttentionMode::Off => {}
                AttentionMode::Additive => {
                    let map = g.param(store, block.query_map);
                    let eta = g.matmul(control.expect("control is gathered"), map)?;
                    q = g.add_row(q, eta)?;
                }
                AttentionMode::Replace => {
                    let map = g.param(store, block.query_map);
                    let eta = g.matmul(control.expect("control is gathered"), map)?;
                    let zeros = g.constant(Tensor::zeros(&[n, cfg.model_dim]));
                    q = g.add_row(zeros, eta)?;
                }
            }
            let k = block.key.forward(g, store, h)?;
            let v = block.value.forward(g, store, h)?;
            let attended = causal_attention(g, q, k, v, cfg.heads)?;
            let projected = block.output.forward(g, store, attended)?;
            x = g.add(x, projected)?;

            let h = block.norm_ff.forward(g, store, x, norm_control)?;
            let inner = block.ff_in.forward(g, store, h)?;
            let inner = g.relu(inner);
            let out = block.ff_out.forward(g, store, inner)?;
            x = g.add(x, out)?;
        }
        let x = self.final_norm.forward(g, store, x, norm_control)?;
        g.matmul_nt(x, token_table)
    }

    /// Logits as a plain tensor.
    pub fn logits(&self, tokens: &[usize], class: ControlClass) -> Result<Tensor<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, tokens, class)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = TransformerHeader { kind: "transformer".into(), config: self.config.clone(), vocab: self.vocab.clone() };
        write_bundle(path, &header, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, stored): (TransformerHeader, ParamStore<f64>) = read_bundle(path)?;
        if header.kind != "transformer" {
            return Err(Error::Checkpoint(format!("expected a transformer checkpoint, found {:?}", header.kind)));
        }
        let mut model = Transformer::new(header.config, header.vocab)?;
        restore_into(&mut model.store, &stored)?;
        Ok(model)
    }

    pub fn parameter_bits(&self) -> Vec<u64> {
        self.store.flat_values().iter().map(|x| x.to_bits()).collect()
    }
}
