//! Toy causal transformer language model.
//!
//! Pre-norm residual blocks (parameter-free RMS norm), multi-head causal
//! self-attention without biases, GELU MLP, and a biased output head. The
//! canonical flattening order of parameters is the array order below; every
//! flat vector in the crate (gradients, directions, Fisher diagonals) uses it.
//!
//! ```text
//! embed.tok [V, d]   embed.pos [C, d]
//! block{i}.q/.k/.v/.o [d, d]   block{i}.mlp_in [d, h]   block{i}.mlp_out [h, d]
//! head.w [d, V]   head.b [V]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, log_softmax_in_place, Array, Graph, Var};
use crate::error::{arg, Error, Result};
use crate::rng;
use crate::world::{Sample, Token};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 64,
            context_len: 32,
            d_model: 32,
            n_heads: 4,
            n_blocks: 3,
            mlp_hidden: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if c.vocab_size == 0 || c.context_len == 0 || c.d_model == 0 || c.n_heads == 0 || c.mlp_hidden == 0 {
            return arg("model dimensions must be positive");
        }
        if c.d_model % c.n_heads != 0 {
            return arg(format!("d_model {} not divisible by n_heads {}", c.d_model, c.n_heads));
        }
        if c.n_blocks < 3 {
            return arg(format!("n_blocks must be at least 3, got {}", c.n_blocks));
        }
        Ok(())
    }

    /// `(name, shape)` for every parameter array, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (v, c, d, h) = (self.vocab_size, self.context_len, self.d_model, self.mlp_hidden);
        let mut out = vec![
            ("embed.tok".to_string(), vec![v, d]),
            ("embed.pos".to_string(), vec![c, d]),
        ];
        for b in 0..self.n_blocks {
            for part in ["q", "k", "v", "o"] {
                out.push((format!("block{b}.{part}"), vec![d, d]));
            }
            out.push((format!("block{b}.mlp_in"), vec![d, h]));
            out.push((format!("block{b}.mlp_out"), vec![h, d]));
        }
        out.push(("head.w".to_string(), vec![d, v]));
        out.push(("head.b".to_string(), vec![v]));
        out
    }

    /// Equal architecture, ignoring the init seed.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            seed: 0,
            ..self.clone()
        } == ModelConfig {
            seed: 0,
            ..other.clone()
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

const EMBED_TOK: usize = 0;
const EMBED_POS: usize = 1;
const PER_BLOCK: usize = 6;

fn block_base(b: usize) -> usize {
    2 + b * PER_BLOCK
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    arrays: Vec<Array>,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "model/init");
        let mut names = Vec::new();
        let mut arrays = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name == "head.b" {
                vec![0.0; n]
            } else {
                // An embedding lookup has a single active input row.
                let fan_in = if name.starts_with("embed") { 1 } else { shape[0] };
                let scale = 1.0 / (fan_in as f64).sqrt();
                (0..n)
                    .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
                    .collect()
            };
            arrays.push(Array::new(shape, data)?);
            names.push(name);
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            arrays,
        })
    }

    pub fn from_flat(config: &ModelConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.n_params() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, model needs {}",
                flat.len(),
                config.n_params()
            )));
        }
        let mut off = 0;
        let mut names = Vec::new();
        let mut arrays = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            arrays.push(Array::new(shape, flat[off..off + n].to_vec())?);
            names.push(name);
            off += n;
        }
        Ok(ModelParams {
            config: config.clone(),
            names,
            arrays,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arrays(&self) -> &[Array] {
        &self.arrays
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn array(&self, name: &str) -> Option<&Array> {
        self.names.iter().position(|n| n == name).map(|i| &self.arrays[i])
    }

    pub fn array_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.arrays[i])
    }

    pub fn n_params(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for a in &self.arrays {
            out.extend_from_slice(a.data());
        }
        out
    }

    /// Start offset of each array in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.arrays
            .iter()
            .map(|a| {
                let o = off;
                off += a.len();
                o
            })
            .collect()
    }

    /// In-place `self += alpha * direction` over the flat layout.
    pub fn add_scaled(&mut self, direction: &[f64], alpha: f64) -> Result<()> {
        if direction.len() != self.n_params() {
            return Err(Error::Shape(format!(
                "direction has {} values, model has {}",
                direction.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for a in &mut self.arrays {
            let n = a.len();
            for (x, d) in a.data_mut().iter_mut().zip(&direction[off..off + n]) {
                *x += alpha * d;
            }
            off += n;
        }
        Ok(())
    }

    /// `theta + alpha * direction` for a unit-norm direction.
    pub fn perturb(&self, direction: &[f64], alpha: f64) -> Result<ModelParams> {
        if direction.len() != self.n_params() {
            return arg(format!(
                "direction length {} != parameter count {}",
                direction.len(),
                self.n_params()
            ));
        }
        let norm = dot(direction, direction).sqrt();
        if (norm - 1.0).abs() >= 1e-9 {
            return arg(format!("direction norm {norm} is not 1"));
        }
        let mut out = self.clone();
        if alpha != 0.0 {
            out.add_scaled(direction, alpha)?;
        }
        Ok(out)
    }

    pub fn resolve(&self, subset: &SubsetSpec) -> Result<Vec<usize>> {
        subset.coordinates(self)
    }

    /// Flat values of a parameter subset and their global coordinates.
    pub fn param_vector_view(&self, subset: &SubsetSpec) -> Result<(Vec<f64>, Vec<usize>)> {
        let coords = subset.coordinates(self)?;
        let flat = self.flatten();
        Ok((coords.iter().map(|&c| flat[c]).collect(), coords))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(SNAPSHOT_MAGIC)?;
        out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.context_len,
            c.d_model,
            c.n_heads,
            c.n_blocks,
            c.mlp_hidden,
        ] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&c.seed.to_le_bytes())?;
        out.write_all(&(self.n_params() as u64).to_le_bytes())?;
        for a in &self.arrays {
            for x in a.data() {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if buf.len() < 8 + 4 + 8 * 8 || &buf[..8] != SNAPSHOT_MAGIC {
            return Err(bad("not a parameter snapshot"));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let word = |i: usize| u64::from_le_bytes(buf[12 + 8 * i..20 + 8 * i].try_into().unwrap());
        let config = ModelConfig {
            vocab_size: word(0) as usize,
            context_len: word(1) as usize,
            d_model: word(2) as usize,
            n_heads: word(3) as usize,
            n_blocks: word(4) as usize,
            mlp_hidden: word(5) as usize,
            seed: word(6),
        };
        let count = word(7) as usize;
        let body = &buf[12 + 64..];
        if config.validate().is_err() || count != config.n_params() || body.len() != 8 * count {
            return Err(bad("header does not match payload"));
        }
        let flat: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ModelParams::from_flat(&config, &flat)
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"DLPARAMS";
const SNAPSHOT_VERSION: u32 = 1;

/// Named parameter subsets and macros over them.
///
/// Names: `embed`, `head`, `block{i}.Q|K|V|O|MLP`, any raw array name, or the
/// macros `LAST_V`, `LAST_O`, `LAST_MLP`, `LAST_QKVO`, `LAST_ALL`, `MIDDLE`
/// (the middle third of blocks) and `ALL`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetSpec(pub Vec<String>);

impl SubsetSpec {
    pub fn one(name: &str) -> Self {
        SubsetSpec(vec![name.to_string()])
    }

    pub fn label(&self) -> String {
        self.0.join("+")
    }

    fn arrays_for(name: &str, params: &ModelParams) -> Result<Vec<usize>> {
        let nb = params.config.n_blocks;
        let last = nb - 1;
        let block_parts = |b: usize, parts: &[&str]| -> Vec<usize> {
            parts
                .iter()
                .map(|p| {
                    block_base(b)
                        + match *p {
                            "Q" => 0,
                            "K" => 1,
                            "V" => 2,
                            "O" => 3,
                            "MLP_IN" => 4,
                            _ => 5,
                        }
                })
                .collect()
        };
        let all_block = ["Q", "K", "V", "O", "MLP_IN", "MLP_OUT"];
        let ids = match name {
            "ALL" => (0..params.arrays.len()).collect(),
            "LAST_V" => block_parts(last, &["V"]),
            "LAST_O" => block_parts(last, &["O"]),
            "LAST_MLP" => block_parts(last, &["MLP_IN", "MLP_OUT"]),
            "LAST_QKVO" => block_parts(last, &["Q", "K", "V", "O"]),
            "LAST_ALL" => block_parts(last, &all_block),
            "MIDDLE" => {
                let (lo, hi) = (nb / 3, (2 * nb).div_ceil(3));
                (lo..hi.max(lo + 1)).flat_map(|b| block_parts(b, &all_block)).collect()
            }
            "embed" => vec![EMBED_TOK, EMBED_POS],
            "head" => {
                let n = params.arrays.len();
                vec![n - 2, n - 1]
            }
            other => {
                if let Some(i) = params.names.iter().position(|n| n == other) {
                    vec![i]
                } else if let Some((blk, part)) = other.split_once('.') {
                    let b: usize = blk
                        .strip_prefix("block")
                        .and_then(|s| s.parse().ok())
                        .filter(|&b| b < nb)
                        .ok_or_else(|| Error::Argument(format!("unknown subset '{other}'")))?;
                    match part {
                        "Q" | "K" | "V" | "O" => block_parts(b, &[part]),
                        "MLP" => block_parts(b, &["MLP_IN", "MLP_OUT"]),
                        _ => return arg(format!("unknown subset '{other}'")),
                    }
                } else {
                    return arg(format!("unknown subset '{other}'"));
                }
            }
        };
        Ok(ids)
    }

    /// Sorted, de-duplicated global coordinates covered by this subset.
    pub fn coordinates(&self, params: &ModelParams) -> Result<Vec<usize>> {
        if self.0.is_empty() {
            return arg("empty subset list");
        }
        let mut ids = Vec::new();
        for name in &self.0 {
            ids.extend(Self::arrays_for(name, params)?);
        }
        ids.sort_unstable();
        ids.dedup();
        let offsets = params.offsets();
        let mut coords = Vec::new();
        for i in ids {
            let o = offsets[i];
            coords.extend(o..o + params.arrays[i].len());
        }
        Ok(coords)
    }
}

fn causal_mask(n: usize) -> Array {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = -1e9;
        }
    }
    Array::matrix(n, n, m).expect("mask shape")
}

/// Records the forward pass and returns the `[tokens.len(), V]` logits node.
pub fn build_logits(g: &mut Graph, config: &ModelConfig, tokens: &[Token]) -> Result<Var> {
    let n = tokens.len();
    if n == 0 || n > config.context_len {
        return arg(format!("sequence length {n} outside 1..={}", config.context_len));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return arg(format!("token {t} outside vocabulary"));
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let d = config.d_model;
    let dh = d / config.n_heads;
    let att_scale = 1.0 / (dh as f64).sqrt();

    let tok = g.param(EMBED_TOK)?;
    let pos = g.param(EMBED_POS)?;
    let te = g.gather_rows(tok, &ids)?;
    let pe = g.gather_rows(pos, &positions)?;
    let mut h = g.add(te, pe)?;
    let mask = g.constant(causal_mask(n))?;

    for b in 0..config.n_blocks {
        let base = block_base(b);
        let a = g.rms_norm(h)?;
        let wq = g.param(base)?;
        let wk = g.param(base + 1)?;
        let wv = g.param(base + 2)?;
        let wo = g.param(base + 3)?;
        let q = g.matmul(a, wq)?;
        let k = g.matmul(a, wk)?;
        let v = g.matmul(a, wv)?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for hd in 0..config.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, att_scale)?;
            let s = g.add(s, mask)?;
            let p = g.softmax(s)?;
            heads.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let o = g.matmul(cat, wo)?;
        h = g.add(h, o)?;

        let m = g.rms_norm(h)?;
        let w1 = g.param(base + 4)?;
        let w2 = g.param(base + 5)?;
        let u = g.matmul(m, w1)?;
        let u = g.gelu(u)?;
        let u = g.matmul(u, w2)?;
        h = g.add(h, u)?;
    }
    let f = g.rms_norm(h)?;
    let nb = 2 + config.n_blocks * PER_BLOCK;
    let hw = g.param(nb)?;
    let hb = g.param(nb + 1)?;
    let logits = g.matmul(f, hw)?;
    g.add(logits, hb)
}

fn check_sample(config: &ModelConfig, tokens: &[Token], prompt_len: usize, end: usize) -> Result<()> {
    if prompt_len == 0 || end <= prompt_len {
        return arg("target span is empty");
    }
    if end > tokens.len() {
        return arg("target span runs past the sequence");
    }
    if end > config.context_len + 1 {
        return arg(format!(
            "sequence of {end} tokens exceeds context {}",
            config.context_len
        ));
    }
    Ok(())
}

/// Mean next-token NLL over `tokens[prompt_len..end]`. Tokens at or after
/// `end` are never read.
pub fn build_nll_span(
    g: &mut Graph,
    config: &ModelConfig,
    tokens: &[Token],
    prompt_len: usize,
    end: usize,
) -> Result<Var> {
    check_sample(config, tokens, prompt_len, end)?;
    let input = &tokens[..end - 1];
    let logits = build_logits(g, config, input)?;
    let lp = g.log_softmax(logits)?;
    let v = config.vocab_size;
    let picks: Vec<usize> = (prompt_len..end).map(|t| (t - 1) * v + tokens[t] as usize).collect();
    let picked = g.gather(lp, &picks)?;
    let mean = g.reduce_mean(picked)?;
    g.scale(mean, -1.0)
}

pub fn build_nll(g: &mut Graph, params: &ModelParams, sample: &Sample) -> Result<Var> {
    build_nll_span(
        g,
        &params.config,
        &sample.tokens,
        sample.prompt_len,
        sample.tokens.len(),
    )
}

pub fn forward_nll(params: &ModelParams, sample: &Sample) -> Result<f64> {
    let mut g = Graph::new(&params.arrays);
    let l = build_nll(&mut g, params, sample)?;
    Ok(g.scalar(l))
}

/// Loss and flat gradient for one sample.
pub fn loss_and_grad(params: &ModelParams, sample: &Sample) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(&params.arrays);
    let l = build_nll(&mut g, params, sample)?;
    let grads = g.backward(l)?;
    let mut flat = Vec::with_capacity(params.n_params());
    for a in grads {
        flat.extend(a.into_data());
    }
    Ok((g.scalar(l), flat))
}

/// Loss, full gradient and its L2 norm for one sample.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    pub sample_index: usize,
    pub loss: f64,
    pub grad: Vec<f64>,
    pub grad_norm: f64,
}

pub fn sample_gradient(params: &ModelParams, sample: &Sample) -> Result<SampleGradient> {
    let (loss, grad) = loss_and_grad(params, sample)?;
    let grad_norm = dot(&grad, &grad).sqrt();
    Ok(SampleGradient {
        sample_index: sample.index,
        loss,
        grad,
        grad_norm,
    })
}

/// Log-probabilities for every position of `tokens`, row-major `[n, V]`.
pub fn log_probs(params: &ModelParams, tokens: &[Token]) -> Result<Vec<f64>> {
    let mut g = Graph::new(&params.arrays);
    let logits = build_logits(&mut g, &params.config, tokens)?;
    let mut data = g.value(logits).data().to_vec();
    for row in data.chunks_mut(params.config.vocab_size) {
        log_softmax_in_place(row);
    }
    Ok(data)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy next token after `tokens`; ties go to the lowest id.
pub fn next_token(params: &ModelParams, tokens: &[Token]) -> Result<Token> {
    let mut g = Graph::new(&params.arrays);
    let logits = build_logits(&mut g, &params.config, tokens)?;
    let v = params.config.vocab_size;
    let lv = g.value(logits).data();
    Ok(argmax_lowest(&lv[lv.len() - v..]) as Token)
}

/// Prompt followed by `max_new` greedily decoded tokens (fewer if the
/// context fills up).
pub fn greedy_decode(params: &ModelParams, prompt: &[Token], max_new: usize) -> Result<Vec<Token>> {
    if prompt.is_empty() || prompt.len() >= params.config.context_len {
        return arg(format!(
            "prompt length {} must be in 1..{}",
            prompt.len(),
            params.config.context_len
        ));
    }
    if max_new == 0 {
        return arg("max_new must be at least 1");
    }
    let mut seq = prompt.to_vec();
    for _ in 0..max_new {
        if seq.len() > params.config.context_len {
            break;
        }
        let t = next_token(params, &seq)?;
        seq.push(t);
    }
    Ok(seq)
}
