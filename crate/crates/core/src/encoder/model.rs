use std::fmt;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use super::{Embedding, PoolingSpec};
use crate::diffcore::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-12;

/// Architecture descriptor shared by every encoder in an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            ffn: 64,
            max_len: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 || self.max_len == 0 {
            return Err(Error::invalid(format!("architecture has a zero dimension: {self}")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "layers={} hidden={} heads={} ffn={} max_len={}",
            self.layers, self.hidden, self.heads, self.ffn, self.max_len
        )
    }
}

// Parameter layout: 4 embedding tensors, then PER_LAYER per transformer layer.
const EMB_PARAMS: usize = 4;
const PER_LAYER: usize = 14;

/// Small post-LN transformer encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    vocab: Vocabulary,
    params: Vec<Tensor>,
}

/// Encoder parameters recorded on a graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    vars: Vec<Var>,
}

impl BoundEncoder {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Token ids after length handling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedIds {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

pub fn param_names(config: &EncoderConfig) -> Vec<String> {
    let mut names: Vec<String> = ["embeddings.token", "embeddings.position", "embeddings.ln.gamma", "embeddings.ln.beta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for l in 0..config.layers {
        for p in [
            "attn.query",
            "attn.query_bias",
            "attn.key",
            "attn.value",
            "attn.out",
            "attn.out_bias",
            "attn.ln.gamma",
            "attn.ln.beta",
            "ffn.in",
            "ffn.in_bias",
            "ffn.out",
            "ffn.out_bias",
            "ffn.ln.gamma",
            "ffn.ln.beta",
        ] {
            names.push(format!("layer{l}.{p}"));
        }
    }
    names
}

fn param_shapes(config: &EncoderConfig, vocab_size: usize) -> Vec<Vec<usize>> {
    let (d, f) = (config.hidden, config.ffn);
    let mut shapes = vec![vec![vocab_size, d], vec![config.max_len, d], vec![1, d], vec![1, d]];
    for _ in 0..config.layers {
        shapes.extend([
            vec![d, d],
            vec![1, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![1, d],
            vec![1, d],
            vec![1, d],
            vec![d, f],
            vec![1, f],
            vec![f, d],
            vec![1, d],
            vec![1, d],
            vec![1, d],
        ]);
    }
    shapes
}

impl EncoderModel {
    /// Randomly initialised encoder, deterministic in `seed`.
    pub fn init(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f) = (config.hidden as f64, config.ffn as f64);
        let mut params = vec![
            Tensor::randn(&[vocab.size(), config.hidden], 1.0, &mut rng),
            Tensor::randn(&[config.max_len, config.hidden], 0.2, &mut rng),
            Tensor::full(&[1, config.hidden], 1.0),
            Tensor::zeros(&[1, config.hidden]),
        ];
        let dd = [config.hidden, config.hidden];
        for _ in 0..config.layers {
            params.push(Tensor::randn(&dd, d.powf(-0.5), &mut rng));
            params.push(Tensor::zeros(&[1, config.hidden]));
            params.push(Tensor::randn(&dd, d.powf(-0.5), &mut rng));
            params.push(Tensor::randn(&dd, d.powf(-0.5), &mut rng));
            params.push(Tensor::randn(&dd, d.powf(-0.5), &mut rng));
            params.push(Tensor::zeros(&[1, config.hidden]));
            params.push(Tensor::full(&[1, config.hidden], 1.0));
            params.push(Tensor::zeros(&[1, config.hidden]));
            params.push(Tensor::randn(&[config.hidden, config.ffn], d.powf(-0.5), &mut rng));
            params.push(Tensor::zeros(&[1, config.ffn]));
            params.push(Tensor::randn(&[config.ffn, config.hidden], f.powf(-0.5), &mut rng));
            params.push(Tensor::zeros(&[1, config.hidden]));
            params.push(Tensor::full(&[1, config.hidden], 1.0));
            params.push(Tensor::zeros(&[1, config.hidden]));
        }
        Ok(EncoderModel { config, vocab, params })
    }

    /// Assembles a model from stored parts, checking every shape.
    pub fn from_parts(config: EncoderConfig, vocab: Vocabulary, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config, vocab.size());
        if shapes.len() != params.len() {
            return Err(Error::shape(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if p.shape() != s.as_slice() {
                return Err(Error::shape(format!("parameter {i}: expected {s:?}, found {:?}", p.shape())));
            }
        }
        Ok(EncoderModel { config, vocab, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.config.hidden
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        param_names(&self.config)
    }

    /// Same architecture and vocabulary size.
    pub fn same_architecture(&self, other: &EncoderModel) -> bool {
        self.config == other.config && self.vocab.size() == other.vocab.size()
    }

    pub fn describe(&self) -> String {
        format!("{} vocab={}", self.config, self.vocab.size())
    }

    /// Records parameters on `g`; `trainable = false` records them as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEncoder {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        BoundEncoder { vars }
    }

    /// Tokenizes and truncates to `max_len`.
    pub fn prepare(&self, sentence: &str) -> PreparedIds {
        let mut ids = self.vocab.tokenize(sentence);
        let truncated = ids.len() > self.config.max_len;
        if truncated {
            warn!(
                "sentence of {} tokens truncated to {}: {:.40}",
                ids.len(),
                self.config.max_len,
                sentence
            );
            ids.truncate(self.config.max_len);
        }
        PreparedIds { ids, truncated }
    }

    /// Hidden-state grids for `ids` padded to `pad_to` rows.
    ///
    /// Returns `layers + 1` vars of shape `[pad_to, hidden]`: the embedding
    /// layer followed by each transformer layer. Padding rows never influence
    /// the first `ids.len()` rows.
    pub fn forward(&self, g: &mut Graph, bound: &BoundEncoder, ids: &[usize], pad_to: usize) -> Result<Vec<Var>> {
        let n = ids.len();
        if n == 0 || n > pad_to || pad_to > self.config.max_len {
            return Err(Error::shape(format!(
                "forward: {n} tokens padded to {pad_to} (max_len {})",
                self.config.max_len
            )));
        }
        let p = &bound.vars;
        let mut padded = ids.to_vec();
        padded.resize(pad_to, Vocabulary::PAD_ID);

        let tok = g.gather(p[0], &padded)?;
        let pos = g.slice_rows(p[1], 0, pad_to)?;
        let x = g.add(tok, pos)?;
        let mut h = affine_norm(g, x, p[2], p[3])?;
        let mut states = vec![h];

        let (d, dh) = (self.config.hidden, self.config.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..self.config.layers {
            let w = &p[EMB_PARAMS + l * PER_LAYER..EMB_PARAMS + (l + 1) * PER_LAYER];
            let q = g.matmul(h, w[0])?;
            let q = g.add_row(q, w[1])?;
            let k = g.matmul(h, w[2])?;
            let v = g.matmul(h, w[3])?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(q, a, b)?;
                let kh = g.slice_cols(k, a, b)?;
                let vh = g.slice_cols(v, a, b)?;
                let kt = g.transpose(kh);
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let probs = g.masked_softmax(scores, n)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = g.matmul(attn, w[4])?;
            let attn = g.add_row(attn, w[5])?;
            let r1 = g.add(h, attn)?;
            let h1 = affine_norm(g, r1, w[6], w[7])?;

            let f = g.matmul(h1, w[8])?;
            let f = g.add_row(f, w[9])?;
            let f = g.tanh(f);
            let f = g.matmul(f, w[10])?;
            let f = g.add_row(f, w[11])?;
            let r2 = g.add(h1, f)?;
            h = affine_norm(g, r2, w[12], w[13])?;
            debug_assert_eq!(g.value(h).dims2(), (pad_to, d));
            states.push(h);
        }
        Ok(states)
    }

    /// Token-mean per layer over the first `valid` rows, then mean over the final `k` layers.
    pub fn pool(&self, g: &mut Graph, states: &[Var], valid: usize, pool: PoolingSpec) -> Result<Var> {
        let k = pool.k();
        if k > states.len() {
            return Err(Error::invalid(format!(
                "pooling over {k} layers but the encoder exposes {}",
                states.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for &s in &states[states.len() - k..] {
            let m = g.mean_rows(s, valid)?;
            acc = Some(match acc {
                None => m,
                Some(a) => g.add(a, m)?,
            });
        }
        let sum = acc.expect("k >= 1");
        Ok(if k == 1 { sum } else { g.scale(sum, 1.0 / k as f64) })
    }

    /// Pooled embedding var for one sentence (unpadded).
    pub fn embed_var(&self, g: &mut Graph, bound: &BoundEncoder, sentence: &str, pool: PoolingSpec) -> Result<Var> {
        let prepared = self.prepare(sentence);
        let states = self.forward(g, bound, &prepared.ids, prepared.ids.len())?;
        self.pool(g, &states, prepared.ids.len(), pool)
    }

    pub fn encode(&self, sentence: &str, pool: PoolingSpec) -> Result<Embedding> {
        self.encode_with_info(sentence, pool).map(|(e, _)| e)
    }

    /// Embedding plus whether the sentence was truncated.
    pub fn encode_with_info(&self, sentence: &str, pool: PoolingSpec) -> Result<(Embedding, bool)> {
        let prepared = self.prepare(sentence);
        let n = prepared.ids.len();
        let e = self.encode_ids(&prepared.ids, n, pool)?;
        Ok((e, prepared.truncated))
    }

    /// Embeds `ids` inside a grid padded to `pad_to` rows.
    pub fn encode_ids(&self, ids: &[usize], pad_to: usize, pool: PoolingSpec) -> Result<Embedding> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let states = self.forward(&mut g, &bound, ids, pad_to)?;
        let v = self.pool(&mut g, &states, ids.len(), pool)?;
        Ok(Embedding::new(g.value(v).data().to_vec()))
    }

    /// Embeds a batch padded to its longest member.
    pub fn encode_batch<S: AsRef<str>>(&self, sentences: &[S], pool: PoolingSpec) -> Result<Vec<Embedding>> {
        let prepared: Vec<PreparedIds> = sentences.iter().map(|s| self.prepare(s.as_ref())).collect();
        let pad_to = prepared.iter().map(|p| p.ids.len()).max().unwrap_or(1);
        prepared.iter().map(|p| self.encode_ids(&p.ids, pad_to, pool)).collect()
    }

    /// Per-layer hidden grids `[T, hidden]` for one sentence, embedding layer first.
    pub fn hidden_states(&self, sentence: &str) -> Result<Vec<Tensor>> {
        let prepared = self.prepare(sentence);
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let n = prepared.ids.len();
        let states = self.forward(&mut g, &bound, &prepared.ids, n)?;
        Ok(states.iter().map(|&s| g.value(s).clone()).collect())
    }
}

fn affine_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul_row(n, gamma)?;
    g.add_row(n, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderModel {
        let vocab = Vocabulary::build(&["a b c d e f g h"], 1, None);
        let cfg = EncoderConfig {
            layers: 2,
            hidden: 8,
            heads: 2,
            ffn: 12,
            max_len: 6,
        };
        EncoderModel::init(cfg, vocab, 3).unwrap()
    }

    #[test]
    fn forward_yields_layers_plus_one_grids() {
        let m = tiny();
        let hs = m.hidden_states("a b c").unwrap();
        assert_eq!(hs.len(), 3);
        for h in hs {
            assert_eq!(h.shape(), &[3, 8]);
        }
    }

    #[test]
    fn single_token_k1_is_final_state() {
        let m = tiny();
        let hs = m.hidden_states("c").unwrap();
        let e = m.encode("c", PoolingSpec::new(1).unwrap()).unwrap();
        assert_eq!(e.as_slice(), hs[2].data());
    }

    #[test]
    fn long_sentences_truncate() {
        let m = tiny();
        let (e, truncated) = m
            .encode_with_info("a b c d e f g h a b", PoolingSpec::new(1).unwrap())
            .unwrap();
        assert!(truncated);
        assert_eq!(e, m.encode("a b c d e f", PoolingSpec::new(1).unwrap()).unwrap());
    }

    #[test]
    fn bad_head_count_rejected() {
        let cfg = EncoderConfig {
            hidden: 10,
            heads: 3,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = tiny();
        let mut params = m.params().to_vec();
        params.pop();
        assert!(EncoderModel::from_parts(*m.config(), m.vocab().clone(), params).is_err());
        assert!(EncoderModel::from_parts(*m.config(), m.vocab().clone(), m.params().to_vec()).is_ok());
        assert_eq!(m.param_names().len(), m.params().len());
    }
}
