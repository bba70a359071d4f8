use serde::{Deserialize, Serialize};

use super::config::LMConfig;
use super::params::{layout, LMParams, ParamGrads};
use crate::autodiff::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// A sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self(tokens)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&t| t as usize >= vocab_size) {
            Some(t) => Err(Error::Contract(format!(
                "token id {t} outside vocabulary of size {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

/// Parameters of one model bound as leaves of a [`Graph`].
#[derive(Clone, Debug)]
pub struct ModelNodes {
    config: LMConfig,
    ids: Vec<NodeId>,
}

struct LayerIds {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

const PER_LAYER: usize = 12;

impl ModelNodes {
    /// Borrows every parameter into `g`. Frozen parameters become
    /// constants, so no adjoint ever reaches them.
    pub fn bind<'p>(params: &'p LMParams, g: &mut Graph<'p>) -> Result<Self> {
        Self::bind_with(params, g, !params.is_frozen())
    }

    /// Binds parameters as constants regardless of their frozen flag.
    pub fn bind_constant<'p>(params: &'p LMParams, g: &mut Graph<'p>) -> Result<Self> {
        Self::bind_with(params, g, false)
    }

    fn bind_with<'p>(params: &'p LMParams, g: &mut Graph<'p>, grad: bool) -> Result<Self> {
        let ids = params
            .tensors()
            .iter()
            .map(|t| g.param(t, grad))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: params.config().clone(),
            ids,
        })
    }

    /// Wraps leaves created elsewhere (e.g. by the gradient checker).
    pub fn from_ids(config: &LMConfig, ids: Vec<NodeId>) -> Result<Self> {
        let want = layout(config).len();
        if ids.len() != want {
            return Err(Error::Contract(format!(
                "model needs {want} parameter nodes, got {}",
                ids.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            ids,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Collects parameter gradients in storage order (zeros where no adjoint arrived).
    pub fn collect_grads(&self, g: &Graph<'_>, grads: &Gradients) -> ParamGrads {
        ParamGrads {
            tensors: self
                .ids
                .iter()
                .map(|&id| grads.get_or_zeros(id, g.value(id)))
                .collect(),
        }
    }

    fn layer(&self, l: usize) -> LayerIds {
        let s = &self.ids[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        LayerIds {
            ln1_gain: s[0],
            ln1_bias: s[1],
            wq: s[2],
            wk: s[3],
            wv: s[4],
            wo: s[5],
            ln2_gain: s[6],
            ln2_bias: s[7],
            w1: s[8],
            b1: s[9],
            w2: s[10],
            b2: s[11],
        }
    }

    fn tail(&self) -> [NodeId; 4] {
        let n = self.ids.len();
        [self.ids[n - 4], self.ids[n - 3], self.ids[n - 2], self.ids[n - 1]]
    }

    fn norm(g: &mut Graph<'_>, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = g.layer_norm_rows(x, LN_EPS)?;
        let n = g.mul(n, gain)?;
        g.add(n, bias)
    }

    /// Logits `[len(seq) × L]`; row `t` scores the token following `seq[..=t]`.
    pub fn forward_logits(&self, g: &mut Graph<'_>, seq: &[u32]) -> Result<NodeId> {
        let cfg = &self.config;
        if seq.is_empty() {
            return Err(Error::Contract("cannot run the model on an empty sequence".into()));
        }
        if seq.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: seq.len(),
                max: cfg.max_seq_len,
            });
        }
        let ids: Vec<usize> = seq.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..seq.len()).collect();
        let tok = g.embedding(self.ids[0], &ids)?;
        let pos = g.embedding(self.ids[1], &positions)?;
        let mut x = g.add(tok, pos)?;

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        for l in 0..cfg.n_layers {
            let p = self.layer(l);
            let h = Self::norm(g, x, p.ln1_gain, p.ln1_bias)?;
            let q = g.matmul(h, p.wq)?;
            let k = g.matmul(h, p.wk)?;
            let v = g.matmul(h, p.wv)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = g.slice_cols(q, head * hd, hd)?;
                let kh = g.slice_cols(k, head * hd, hd)?;
                let vh = g.slice_cols(v, head * hd, hd)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.causal_softmax_rows(scores)?;
                heads.push(g.matmul(attn, vh)?);
            }
            let o = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let o = g.matmul(o, p.wo)?;
            x = g.add(x, o)?;

            let h = Self::norm(g, x, p.ln2_gain, p.ln2_bias)?;
            let f = g.matmul(h, p.w1)?;
            let f = g.add(f, p.b1)?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p.w2)?;
            let f = g.add(f, p.b2)?;
            x = g.add(x, f)?;
        }
        let [gain, bias, head_w, head_b] = self.tail();
        let h = Self::norm(g, x, gain, bias)?;
        let logits = g.matmul(h, head_w)?;
        g.add(logits, head_b)
    }

    fn check_pair_lengths(&self, prompt: &[u32], completion: &[u32]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must be non-empty".into()));
        }
        if completion.is_empty() {
            return Err(Error::Contract("completion must be non-empty".into()));
        }
        let total = prompt.len() + completion.len();
        if total > self.config.max_seq_len {
            return Err(Error::Length {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        TokenSeq(prompt.to_vec()).check_vocab(self.config.vocab_size)?;
        TokenSeq(completion.to_vec()).check_vocab(self.config.vocab_size)?;
        Ok(())
    }

    /// Teacher-forced `log π(t_k | prompt, t_<k)` for every completion token, as a `[K]` vector.
    pub fn per_token_log_probs(
        &self,
        g: &mut Graph<'_>,
        prompt: &[u32],
        completion: &[u32],
    ) -> Result<NodeId> {
        self.check_pair_lengths(prompt, completion)?;
        let mut input = Vec::with_capacity(prompt.len() + completion.len() - 1);
        input.extend_from_slice(prompt);
        input.extend_from_slice(&completion[..completion.len() - 1]);
        let logits = self.forward_logits(g, &input)?;
        let logp = g.log_softmax_rows(logits)?;
        let index: Vec<(usize, usize)> = completion
            .iter()
            .enumerate()
            .map(|(k, &t)| (prompt.len() - 1 + k, t as usize))
            .collect();
        g.gather(logp, &index)
    }

    /// `log π(completion | prompt)` as a scalar node.
    pub fn completion_log_prob(
        &self,
        g: &mut Graph<'_>,
        prompt: &[u32],
        completion: &[u32],
    ) -> Result<NodeId> {
        let per_token = self.per_token_log_probs(g, prompt, completion)?;
        g.sum(per_token)
    }
}

impl LMParams {
    pub fn forward_logits(&self, seq: &TokenSeq) -> Result<Tensor> {
        seq.check_vocab(self.config().vocab_size)?;
        let mut g = Graph::new();
        let m = ModelNodes::bind_constant(self, &mut g)?;
        let out = m.forward_logits(&mut g, seq.tokens())?;
        Ok(g.value(out).clone())
    }

    pub fn per_token_log_probs(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = ModelNodes::bind_constant(self, &mut g)?;
        let out = m.per_token_log_probs(&mut g, prompt.tokens(), completion.tokens())?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn completion_log_prob(&self, prompt: &TokenSeq, completion: &TokenSeq) -> Result<f64> {
        Ok(self.per_token_log_probs(prompt, completion)?.iter().sum())
    }
}
