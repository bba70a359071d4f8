use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::LMConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    /// Residual output projections, scaled down by depth.
    ResidualNormal,
    Zeros,
    Ones,
}

/// Name, shape and initializer of every parameter tensor, in storage order.
pub(crate) fn layout(config: &LMConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (l, d, f) = (config.vocab_size, config.d_model, config.ffn_dim());
    let mut out = vec![
        ("tok_emb".to_string(), vec![l, d], Init::Normal),
        ("pos_emb".to_string(), vec![config.max_seq_len, d], Init::Normal),
    ];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.wo"), vec![d, d], Init::ResidualNormal),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, f], Init::Normal),
            (p("ffn.b1"), vec![f], Init::Zeros),
            (p("ffn.w2"), vec![f, d], Init::ResidualNormal),
            (p("ffn.b2"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.gain".to_string(), vec![d], Init::Ones),
        ("ln_f.bias".to_string(), vec![d], Init::Zeros),
        ("head.w".to_string(), vec![d, l], Init::Normal),
        ("head.b".to_string(), vec![l], Init::Zeros),
    ]);
    out
}

/// Parameters of the language model, stored as a flat list in [`layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct LMParams {
    config: LMConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    frozen: bool,
}

impl LMParams {
    /// Deterministic initialization: same `(config, seed)` gives identical bytes.
    pub fn init(config: &LMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let resid_std = INIT_STD / (2.0 * config.n_layers.max(1) as f64).sqrt();
        let resid = Normal::new(0.0, resid_std).expect("valid std");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                Init::ResidualNormal => (0..n).map(|_| resid.sample(&mut rng)).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            frozen: false,
        })
    }

    /// Every tensor zero (including layer-norm gains): the model is uniform.
    pub fn zeros(config: &LMConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = layout(config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .unzip();
        Ok(Self {
            config: config.clone(),
            names,
            tensors,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(
        config: LMConfig,
        tensors: Vec<(String, Tensor)>,
        frozen: bool,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} has non-finite values")));
            }
        }
        let (names, tensors) = tensors.into_iter().unzip();
        Ok(Self {
            config,
            names,
            tensors,
            frozen,
        })
    }

    pub fn config(&self) -> &LMConfig {
        &self.config
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Mutable access for optimizers. Frozen parameters refuse.
    pub fn tensors_mut(&mut self) -> Result<&mut [Tensor]> {
        if self.frozen {
            return Err(Error::Contract(
                "frozen parameters cannot be updated".into(),
            ));
        }
        Ok(&mut self.tensors)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Frozen deep copy serving as the reference policy.
    pub fn snapshot_reference(&self) -> LMParams {
        let mut copy = self.clone();
        copy.frozen = true;
        copy
    }

    /// Trainable deep copy.
    pub fn thawed(&self) -> LMParams {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }
}

/// Gradients for every parameter tensor, in the same order as [`LMParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(params: &LMParams) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}
