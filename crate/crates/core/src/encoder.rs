//! The embedding pipeline: a bidirectional pre-norm transformer over token
//! sequences, mean pooling along the sequence axis, and a linear projection
//! to the output dimension.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::tokenizer::ByteTokenizer;
use crate::tensor::{self, Graph, Segment, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of each block's MLP.
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub d_out: usize,
    /// Nested prefix sizes trained with their own loss; the last equals `d_out`.
    pub mrl_dims: Vec<usize>,
}

fn default_d_ff() -> usize {
    256
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 512,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            d_out: 64,
            mrl_dims: vec![16, 32, 64],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("d_out", self.d_out),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        validate_mrl_dims(&self.mrl_dims, self.d_out)
    }

    /// The fixed tensor-name set and shapes of a parameter map for this config.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut out = vec![
            ("token_embedding".to_string(), vec![self.vocab_size, d]),
            ("position_embedding".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("ln1.gain"), vec![d]),
                (p("ln1.bias"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.gain"), vec![d]),
                (p("ln2.bias"), vec![d]),
                (p("mlp.w1"), vec![d, f]),
                (p("mlp.b1"), vec![f]),
                (p("mlp.w2"), vec![f, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.push(("projection.weight".to_string(), vec![d, self.d_out]));
        out.push(("projection.bias".to_string(), vec![self.d_out]));
        out
    }
}

pub fn validate_mrl_dims(dims: &[usize], d_out: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::Config("mrl_dims is empty".into()));
    }
    if dims[0] == 0 || dims.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "mrl_dims {dims:?} must be positive and strictly ascending"
        )));
    }
    if *dims.last().unwrap() != d_out {
        return Err(Error::Config(format!(
            "last mrl dim {} must equal d_out {d_out}",
            dims.last().unwrap()
        )));
    }
    Ok(())
}

/// Validated token ids. Construct through the tokenizer or [`TokenSequence::new`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>, cfg: &EncoderConfig) -> Result<Self> {
        let seq = TokenSequence(ids);
        seq.check(cfg)?;
        Ok(seq)
    }

    pub(crate) fn from_ids_unchecked(ids: Vec<u32>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if self.0.len() > cfg.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                self.0.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(id) = self.0.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {id} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    tensors: BTreeMap<String, Tensor>,
}

impl EncoderParams {
    /// Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let tensors = cfg
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; n]
                } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                    vec![0.0; n]
                } else {
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                };
                let t = Tensor::new(shape, data).expect("shape from config");
                (name, t)
            })
            .collect();
        EncoderParams { tensors }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        EncoderParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that names and shapes are exactly those the config prescribes
    /// and that every value is finite.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = cfg.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Input(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Input(format!("tensor {name} has non-finite values")));
            }
        }
        Ok(())
    }
}

/// Parameter leaves bound on one graph.
pub type ParamVars = BTreeMap<String, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Encoder { config, params })
    }

    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, seed);
        Ok(Encoder { config, params })
    }

    pub fn tokenizer(&self) -> ByteTokenizer {
        ByteTokenizer::new(self.config.max_seq_len)
    }

    /// Places every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), g.leaf(t.clone(), trainable)))
            .collect()
    }

    /// Runs the transformer over a batch of sequences packed row-wise.
    /// Returns the T×d_model token states and the per-sequence segments.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        vars: &ParamVars,
        seqs: &[&TokenSequence],
    ) -> Result<(Var, Vec<Segment>)> {
        if seqs.is_empty() {
            return Err(Error::Input("no sequences to encode".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for seq in seqs {
            seq.check(&self.config)?;
            segments.push(Segment {
                start: ids.len(),
                len: seq.len(),
            });
            ids.extend(seq.ids().iter().map(|&id| id as usize));
            positions.extend(0..seq.len());
        }
        let v = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Contract(format!("parameter {name} not bound")))
        };
        let tok = g.gather_rows(v("token_embedding")?, &ids)?;
        let pos = g.gather_rows(v("position_embedding")?, &positions)?;
        let mut x = g.add(tok, pos)?;
        for l in 0..self.config.n_layers {
            let p = |s: &str| v(&format!("layers.{l}.{s}"));
            let h = g.layer_norm(x, p("ln1.gain")?, p("ln1.bias")?)?;
            let q = g.matmul(h, p("attn.wq")?)?;
            let k = g.matmul(h, p("attn.wk")?)?;
            let val = g.matmul(h, p("attn.wv")?)?;
            let a = g.segment_attention(q, k, val, &segments, self.config.n_heads)?;
            let a = g.matmul(a, p("attn.wo")?)?;
            x = g.add(x, a)?;
            let h = g.layer_norm(x, p("ln2.gain")?, p("ln2.bias")?)?;
            let m = g.matmul(h, p("mlp.w1")?)?;
            let m = g.add_row_bias(m, p("mlp.b1")?)?;
            let m = g.gelu(m);
            let m = g.matmul(m, p("mlp.w2")?)?;
            let m = g.add_row_bias(m, p("mlp.b2")?)?;
            x = g.add(x, m)?;
        }
        Ok((x, segments))
    }

    /// Full pipeline on the graph: encode, mean-pool each sequence, project.
    /// Returns an N×d_out matrix, one row per input sequence.
    pub fn embed_graph(&self, g: &mut Graph, vars: &ParamVars, seqs: &[&TokenSequence]) -> Result<Var> {
        let (x, segments) = self.encode_graph(g, vars, seqs)?;
        let pooled = g.segment_mean(x, segments)?;
        let out = g.matmul(pooled, vars["projection.weight"])?;
        g.add_row_bias(out, vars["projection.bias"])
    }

    /// Token states `M(T)` for one sequence, shape L×d_model.
    pub fn encode_tokens(&self, seq: &TokenSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (x, _) = self.encode_graph(&mut g, &vars, &[seq])?;
        Ok(g.value(x).clone())
    }

    /// `f(mean_pool(M(t ⊕ seq)))`. Passages are embedded with `task = None`.
    pub fn embed(&self, task: Option<&str>, seq: &TokenSequence) -> Result<Tensor> {
        let composed = self.tokenizer().compose(task, seq)?;
        let out = self.embed_batch(&[composed])?;
        Ok(Tensor::vector(out.into_data()))
    }

    /// Embeds many already-composed sequences, returning an N×d_out matrix.
    pub fn embed_batch(&self, seqs: &[TokenSequence]) -> Result<Tensor> {
        const CHUNK: usize = 64;
        let mut data = Vec::with_capacity(seqs.len() * self.config.d_out);
        for chunk in seqs.chunks(CHUNK) {
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let refs: Vec<&TokenSequence> = chunk.iter().collect();
            let out = self.embed_graph(&mut g, &vars, &refs)?;
            data.extend_from_slice(g.value(out).data());
        }
        Tensor::matrix(seqs.len(), self.config.d_out, data)
    }
}

/// Average of the token states along the sequence axis.
pub fn mean_pool(t_embed: &Tensor) -> Result<Tensor> {
    let (rows, cols) = t_embed.dims2()?;
    if rows == 0 {
        return Err(Error::Input("mean_pool of an empty sequence".into()));
    }
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(t_embed.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / rows as f64;
    Ok(Tensor::vector(out.into_iter().map(|v| v * inv).collect()))
}

/// `p_embed · f_weight + f_bias`.
pub fn project(params: &EncoderParams, p_embed: &Tensor) -> Result<Tensor> {
    let w = params.get("projection.weight")?;
    let b = params.get("projection.bias")?;
    let row = p_embed.clone().reshape(vec![1, p_embed.len()])?;
    let mut out = tensor::matmul(&row, w)?.into_data();
    if out.len() != b.len() {
        return Err(Error::dim("project", "bias width"));
    }
    for (o, bv) in out.iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(Tensor::vector(out))
}
