//! Toy transformer encoders for images, captions and multi-spectral images.
//!
//! Every encoder is the same stack: a linear embedding of patches (or
//! one-hot tokens), learned positions, `depth` pre-norm blocks of
//! single-head self-attention and a two-layer GELU MLP, a final layer norm,
//! mean pooling over tokens, and a linear map to the embedding dimension.
//! Outputs are never normalized here.

mod projection;
mod tokenizer;

pub use projection::ProjectionHead;
pub use tokenizer::{TextTokenizer, DEFAULT_MAX_LEN};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::{Checkpoint, META_SEED};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const META_CONFIG: &str = "encoder_config";
pub const META_VOCAB: &str = "vocab";

/// Rows per forward pass during batched inference.
const INFERENCE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Image,
    Text,
    Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Image channels, or vocabulary size for text.
    pub in_channels: usize,
    /// Square image side, or maximum token count for text.
    pub input_size: usize,
    /// Patch side; ignored for text.
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    /// Standard deviation multiplier for the output map's initialization.
    pub out_init_scale: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn image(seed: u64) -> Self {
        EncoderConfig {
            kind: EncoderKind::Image,
            in_channels: 3,
            input_size: 16,
            patch: 4,
            width: 64,
            depth: 2,
            mlp_hidden: 128,
            embed_dim: 32,
            out_init_scale: 0.5,
            seed,
        }
    }

    pub fn text(vocab_size: usize, seed: u64) -> Self {
        EncoderConfig {
            kind: EncoderKind::Text,
            in_channels: vocab_size,
            input_size: DEFAULT_MAX_LEN,
            patch: 1,
            ..EncoderConfig::image(seed)
        }
    }

    pub fn modality(channels: usize, seed: u64) -> Self {
        EncoderConfig {
            kind: EncoderKind::Modality,
            in_channels: channels,
            width: 48,
            mlp_hidden: 96,
            embed_dim: 24,
            ..EncoderConfig::image(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.in_channels, self.input_size, self.patch, self.width, self.depth, self.mlp_hidden, self.embed_dim];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("encoder dims must be positive: {self:?}")));
        }
        if self.kind != EncoderKind::Text && self.input_size % self.patch != 0 {
            return Err(Error::InvalidArgument(format!(
                "image side {} not divisible by patch {}",
                self.input_size, self.patch
            )));
        }
        if !(self.out_init_scale > 0.0) {
            return Err(Error::InvalidArgument("out_init_scale must be positive".into()));
        }
        Ok(())
    }

    /// Number of tokens the transformer sees.
    pub fn tokens(&self) -> usize {
        match self.kind {
            EncoderKind::Text => self.input_size,
            _ => (self.input_size / self.patch).pow(2),
        }
    }

    /// Length of one token's input vector.
    pub fn token_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Text => self.in_channels,
            _ => self.in_channels * self.patch * self.patch,
        }
    }

    /// Stable identifier recorded in checkpoint metadata.
    pub fn architecture_id(&self) -> String {
        let kind = match self.kind {
            EncoderKind::Image => "image",
            EncoderKind::Text => "text",
            EncoderKind::Modality => "modality",
        };
        format!(
            "{kind}-c{}-s{}-p{}-w{}-d{}-h{}-e{}",
            self.in_channels, self.input_size, self.patch, self.width, self.depth, self.mlp_hidden, self.embed_dim
        )
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> usize {
        let (w, h, t) = (self.width, self.mlp_hidden, self.tokens());
        let embed = match self.kind {
            EncoderKind::Text => self.in_channels * w,
            _ => self.token_dim() * w + w,
        };
        let block = 2 * w + 4 * (w * w + w) + 2 * w + (w * h + h) + (h * w + w);
        embed + t * w + self.depth * block + 2 * w + w * self.embed_dim + self.embed_dim
    }

    /// Ordered parameter names and shapes.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (w, h) = (self.width, self.mlp_hidden);
        let mut out = Vec::new();
        match self.kind {
            EncoderKind::Text => out.push(("tok".to_string(), vec![self.in_channels, w])),
            _ => {
                out.push(("patch.w".to_string(), vec![self.token_dim(), w]));
                out.push(("patch.b".to_string(), vec![w]));
            }
        }
        out.push(("pos".to_string(), vec![self.tokens(), w]));
        for i in 0..self.depth {
            let p = |s: &str| format!("blk{i}.{s}");
            out.push((p("ln1.g"), vec![w]));
            out.push((p("ln1.b"), vec![w]));
            for m in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.w{m}")), vec![w, w]));
                out.push((p(&format!("attn.b{m}")), vec![w]));
            }
            out.push((p("ln2.g"), vec![w]));
            out.push((p("ln2.b"), vec![w]));
            out.push((p("mlp.w1"), vec![w, h]));
            out.push((p("mlp.b1"), vec![h]));
            out.push((p("mlp.w2"), vec![h, w]));
            out.push((p("mlp.b2"), vec![w]));
        }
        out.push(("ln_f.g".to_string(), vec![w]));
        out.push(("ln_f.b".to_string(), vec![w]));
        out.push(("out.w".to_string(), vec![w, self.embed_dim]));
        out.push(("out.b".to_string(), vec![self.embed_dim]));
        out
    }
}

/// Encoder parameters bound to their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    params: Checkpoint,
}

impl Encoder {
    /// Seeded initialization: LeCun-normal matrices, unit layer-norm gains,
    /// zero biases, small learned positions.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(config.seed, &config.architecture_id());
        let mut params = Checkpoint::new(&config.architecture_id(), config.embed_dim);
        for (name, shape) in config.parameter_shapes() {
            let n: usize = shape.iter().product();
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let data = if name == "pos" {
                rng.normal_vec(n, 0.1)
            } else if name == "tok" {
                rng.normal_vec(n, 1.0)
            } else if leaf == "g" {
                vec![1.0; n]
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let std = 1.0 / (shape[0] as f64).sqrt();
                let std = if name == "out.w" { std * config.out_init_scale } else { std };
                rng.normal_vec(n, std)
            };
            params.insert(&name, Tensor::new(shape, data)?)?;
        }
        params.set_meta(META_CONFIG, serde_json::to_string(&config)?);
        params.set_meta(META_SEED, config.seed.to_string());
        Ok(Encoder { config, params })
    }

    /// Wraps an existing checkpoint, checking architecture and shapes.
    pub fn from_checkpoint(config: EncoderConfig, params: Checkpoint) -> Result<Self> {
        config.validate()?;
        params.expect_architecture(&config.architecture_id())?;
        for (name, shape) in config.parameter_shapes() {
            let t = params.require(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    format!("parameter {name:?}"),
                    format!("expected {shape:?}, found {:?}", t.shape()),
                ));
            }
        }
        Ok(Encoder { config, params })
    }

    /// Rebuilds an encoder from a checkpoint that carries its own config.
    pub fn from_self_describing(params: Checkpoint) -> Result<Self> {
        let raw = params
            .meta_value(META_CONFIG)
            .ok_or_else(|| Error::Header("checkpoint lacks an encoder config".into()))?;
        let config: EncoderConfig = serde_json::from_str(raw)?;
        Encoder::from_checkpoint(config, params)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Encoder::from_self_describing(Checkpoint::load(path)?)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &Checkpoint {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Checkpoint {
        &mut self.params
    }

    pub fn into_params(self) -> Checkpoint {
        self.params
    }

    /// Same config, different weights (e.g. an interpolated checkpoint).
    pub fn with_params(&self, params: Checkpoint) -> Result<Self> {
        Encoder::from_checkpoint(self.config.clone(), params)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Converts a raw batch to token vectors `[N, T, token_dim]`.
    ///
    /// Images are `[N, C, H, W]` and are cut into non-overlapping patches in
    /// row-major patch order, each flattened channel-major. Text is `[N, L]`
    /// token ids, one-hot encoded.
    pub fn tokenize_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let s = batch.shape();
        match c.kind {
            EncoderKind::Text => {
                if s.len() != 2 || s[1] != c.input_size {
                    return Err(Error::shape("text input", format!("expected [N, {}], got {s:?}", c.input_size)));
                }
                let v = c.in_channels;
                let mut out = vec![0.0f32; s[0] * s[1] * v];
                for (i, &id) in batch.data().iter().enumerate() {
                    let id = id as usize;
                    if id as f32 != batch.data()[i] || id >= v {
                        return Err(Error::InvalidArgument(format!("token id {} outside vocabulary of {v}", batch.data()[i])));
                    }
                    out[i * v + id] = 1.0;
                }
                Tensor::new(vec![s[0], s[1], v], out)
            }
            _ => {
                if s.len() != 4 || s[1] != c.in_channels || s[2] != c.input_size || s[3] != c.input_size {
                    return Err(Error::shape(
                        "image input",
                        format!("expected [N, {0}, {1}, {1}], got {s:?}", c.in_channels, c.input_size),
                    ));
                }
                Ok(patchify(batch, c.patch))
            }
        }
    }

    /// Adds this encoder's parameters as leaves named `{prefix}{name}` and
    /// returns the `[N, D]` embedding node for the token input `tokens`.
    pub fn build(&self, g: &mut Graph, tokens: NodeId, prefix: &str, trainable: bool) -> Result<NodeId> {
        let c = &self.config;
        let p = |g: &mut Graph, name: &str| -> Result<NodeId> {
            g.param(&format!("{prefix}{name}"), self.params.require(name)?, trainable)
        };
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 3 || shape[1] != c.tokens() || shape[2] != c.token_dim() {
            return Err(Error::shape(
                "encoder input",
                format!("expected [N, {}, {}], got {shape:?}", c.tokens(), c.token_dim()),
            ));
        }
        let (n, t, w) = (shape[0], c.tokens(), c.width);

        let mut x = match c.kind {
            EncoderKind::Text => {
                let tok = p(g, "tok")?;
                g.matmul(tokens, tok)?
            }
            _ => {
                let pw = p(g, "patch.w")?;
                let pb = p(g, "patch.b")?;
                let x = g.matmul(tokens, pw)?;
                g.add(x, pb)?
            }
        };
        let pos = p(g, "pos")?;
        x = g.add(x, pos)?;

        let attn_scale = 1.0 / (w as f64).sqrt();
        for i in 0..c.depth {
            let b = |s: &str| format!("blk{i}.{s}");
            let (g1, b1) = (p(g, &b("ln1.g"))?, p(g, &b("ln1.b"))?);
            let h = g.layer_norm(x, g1, b1)?;
            let proj = |g: &mut Graph, m: &str| -> Result<NodeId> {
                let wm = p(g, &b(&format!("attn.w{m}")))?;
                let bm = p(g, &b(&format!("attn.b{m}")))?;
                let y = g.matmul(h, wm)?;
                g.add(y, bm)
            };
            let q = proj(g, "q")?;
            let k = proj(g, "k")?;
            let v = proj(g, "v")?;
            let scores = g.matmul_t(q, k)?;
            let scores = g.scale(scores, attn_scale)?;
            let attn = g.softmax(scores)?;
            let mixed = g.matmul(attn, v)?;
            let wo = p(g, &b("attn.wo"))?;
            let bo = p(g, &b("attn.bo"))?;
            let o = g.matmul(mixed, wo)?;
            let o = g.add(o, bo)?;
            x = g.add(x, o)?;

            let (g2, b2) = (p(g, &b("ln2.g"))?, p(g, &b("ln2.b"))?);
            let h = g.layer_norm(x, g2, b2)?;
            let (w1, bb1) = (p(g, &b("mlp.w1"))?, p(g, &b("mlp.b1"))?);
            let (w2, bb2) = (p(g, &b("mlp.w2"))?, p(g, &b("mlp.b2"))?);
            let m = g.matmul(h, w1)?;
            let m = g.add(m, bb1)?;
            let m = g.gelu(m)?;
            let m = g.matmul(m, w2)?;
            let m = g.add(m, bb2)?;
            x = g.add(x, m)?;
        }
        let (gf, bf) = (p(g, "ln_f.g")?, p(g, "ln_f.b")?);
        x = g.layer_norm(x, gf, bf)?;
        debug_assert_eq!(g.shape(x), &[n, t, w]);
        let pooled = g.mean_pool(x)?;
        let (ow, ob) = (p(g, "out.w")?, p(g, "out.b")?);
        let e = g.matmul(pooled, ow)?;
        g.add(e, ob)
    }

    /// Inference over a full batch, chunked and evaluated in parallel.
    /// Output rows keep input order.
    pub fn encode(&self, batch: &Tensor) -> Result<Tensor> {
        let n = batch.rows();
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(INFERENCE_CHUNK)
            .map(|s| (s, (s + INFERENCE_CHUNK).min(n)))
            .collect();
        let parts: Vec<Result<Tensor>> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let idx: Vec<usize> = (s..e).collect();
                let part = batch.select_rows(&idx)?;
                self.encode_chunk(&part)
            })
            .collect();
        let d = self.config.embed_dim;
        let mut data = Vec::with_capacity(n * d);
        for p in parts {
            data.extend_from_slice(p?.data());
        }
        Tensor::new(vec![n, d], data)
    }

    fn encode_chunk(&self, batch: &Tensor) -> Result<Tensor> {
        let tokens = self.tokenize_batch(batch)?;
        let mut g = Graph::new();
        let input = g.input("tokens", &tokens)?;
        let out = self.build(&mut g, input, "", false)?;
        Ok(g.value(out))
    }
}

/// `[N, C, H, W] -> [N, (H/p)*(W/p), C*p*p]`.
pub fn patchify(batch: &Tensor, patch: usize) -> Tensor {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = batch.data();
    let mut out = Vec::with_capacity(n * gh * gw * pd);
    for ni in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for dy in 0..patch {
                        let row = ((ni * c + ci) * h + py * patch + dy) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, gh * gw, pd], out).expect("patch layout is consistent")
}

/// Text encoder paired with the tokenizer it was trained with.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub encoder: Encoder,
    pub tokenizer: TextTokenizer,
}

impl TextEncoder {
    pub fn init(tokenizer: TextTokenizer, seed: u64) -> Result<Self> {
        let mut config = EncoderConfig::text(tokenizer.vocab_size(), seed);
        config.input_size = tokenizer.max_len();
        TextEncoder::with_config(tokenizer, config)
    }

    /// `config` must be a text config sized to the tokenizer.
    pub fn with_config(tokenizer: TextTokenizer, config: EncoderConfig) -> Result<Self> {
        if config.kind != EncoderKind::Text
            || config.in_channels != tokenizer.vocab_size()
            || config.input_size != tokenizer.max_len()
        {
            return Err(Error::InvalidArgument(format!(
                "text config {config:?} does not fit a vocabulary of {} and length {}",
                tokenizer.vocab_size(),
                tokenizer.max_len()
            )));
        }
        let mut encoder = Encoder::init(config)?;
        encoder.params_mut().set_meta(META_VOCAB, tokenizer.to_json());
        Ok(TextEncoder { encoder, tokenizer })
    }

    pub fn from_checkpoint(params: Checkpoint) -> Result<Self> {
        let encoder = Encoder::from_self_describing(params)?;
        if encoder.config().kind != EncoderKind::Text {
            return Err(Error::Architecture {
                expected: "text".into(),
                found: encoder.config().architecture_id(),
            });
        }
        let vocab = encoder
            .params()
            .meta_value(META_VOCAB)
            .ok_or_else(|| Error::Header("text checkpoint lacks a vocabulary".into()))?;
        let tokenizer = TextTokenizer::from_json(vocab, encoder.config().input_size)?;
        if tokenizer.vocab_size() != encoder.config().in_channels {
            return Err(Error::Header("vocabulary size disagrees with encoder config".into()));
        }
        Ok(TextEncoder { encoder, tokenizer })
    }

    /// `[N, L]` id tensor for a list of strings.
    pub fn tokenize(&self, texts: &[String]) -> Result<Tensor> {
        let l = self.tokenizer.max_len();
        let data = texts.iter().flat_map(|t| self.tokenizer.encode(t)).map(|i| i as f32).collect();
        Tensor::new(vec![texts.len(), l], data)
    }

    pub fn encode_texts(&self, texts: &[String]) -> Result<Tensor> {
        self.encoder.encode(&self.tokenize(texts)?)
    }
}

/// Image-text encoding with the given image encoder.
pub fn encode_image(image: &Encoder, batch: &Tensor) -> Result<Tensor> {
    if image.config().kind != EncoderKind::Image {
        return Err(Error::InvalidArgument("encode_image needs an image encoder".into()));
    }
    image.encode(batch)
}

pub fn encode_text(text: &Encoder, tokens: &Tensor) -> Result<Tensor> {
    if text.config().kind != EncoderKind::Text {
        return Err(Error::InvalidArgument("encode_text needs a text encoder".into()));
    }
    text.encode(tokens)
}

/// Encodes a modality batch and maps it into the teacher space of size
/// `target_dim`. A projection is required exactly when the dims differ.
pub fn encode_modality(
    student: &Encoder,
    batch: &Tensor,
    proj: Option<&ProjectionHead>,
    target_dim: usize,
) -> Result<Tensor> {
    let raw = student.encode(batch)?;
    match (proj, student.embed_dim() == target_dim) {
        (None, true) => Ok(raw),
        (Some(p), false) => p.apply(&raw),
        (None, false) => Err(Error::InvalidArgument(format!(
            "student dim {} differs from target {target_dim}; a projection head is required",
            student.embed_dim()
        ))),
        (Some(_), true) => Err(Error::InvalidArgument(
            "projection head given although dims already match".into(),
        )),
    }
}
