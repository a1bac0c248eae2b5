use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderConfig, ModelFamily};
use crate::checkpoint::{Container, IntoStored};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_from_seed;
use crate::tensor::{ParamSet, Tape, Tensor, Var};

const CHECKPOINT_KIND: &str = "encoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Gelu,
}

/// Encoder, pooler and MLM-head dense weights. Dense weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
    pub pooler_activation: Activation,
}

pub(crate) const POOLER_WEIGHT: &str = "pooler.dense.weight";
pub(crate) const POOLER_BIAS: &str = "pooler.dense.bias";
pub(crate) const MLM_WEIGHT: &str = "mlm.dense.weight";
pub(crate) const MLM_BIAS: &str = "mlm.dense.bias";

fn layer_name(i: usize, rest: &str) -> String {
    format!("layers.{i}.{rest}")
}

/// Resolved parameter positions for one forward pass.
struct Layout {
    token: usize,
    position: usize,
    emb_gamma: usize,
    emb_beta: usize,
    layers: Vec<[usize; 16]>,
    pooler_w: usize,
    pooler_b: usize,
}

const LAYER_PARTS: [&str; 16] = [
    "attn.query.weight",
    "attn.query.bias",
    "attn.key.weight",
    "attn.key.bias",
    "attn.value.weight",
    "attn.value.bias",
    "attn.output.weight",
    "attn.output.bias",
    "attn.ln.gamma",
    "attn.ln.beta",
    "ffn.in.weight",
    "ffn.in.bias",
    "ffn.out.weight",
    "ffn.out.bias",
    "ffn.ln.gamma",
    "ffn.ln.beta",
];

impl<T: Scalar> EncoderParams<T> {
    /// Random initialisation: normal(0, init_std) for weights and embeddings,
    /// zero biases, unit layer-norm gains. Pooler activation is Tanh.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::invalid(format!("init distribution: {e}")))?;
        let mut sample = |shape: Vec<usize>| -> Tensor<T> {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                .collect();
            Tensor::new(shape, data).expect("consistent shape")
        };
        let d = config.d_model;
        let ff = config.d_ff;
        let mut p = ParamSet::new();
        p.insert("embeddings.token", sample(vec![config.vocab_size, d]))?;
        p.insert("embeddings.position", sample(vec![config.max_position, d]))?;
        p.insert("embeddings.ln.gamma", Tensor::filled(vec![d], T::one()))?;
        p.insert("embeddings.ln.beta", Tensor::zeros(vec![d]))?;
        for i in 0..config.n_layers {
            for proj in ["query", "key", "value", "output"] {
                p.insert(layer_name(i, &format!("attn.{proj}.weight")), sample(vec![d, d]))?;
                p.insert(layer_name(i, &format!("attn.{proj}.bias")), Tensor::zeros(vec![d]))?;
            }
            p.insert(layer_name(i, "attn.ln.gamma"), Tensor::filled(vec![d], T::one()))?;
            p.insert(layer_name(i, "attn.ln.beta"), Tensor::zeros(vec![d]))?;
            p.insert(layer_name(i, "ffn.in.weight"), sample(vec![d, ff]))?;
            p.insert(layer_name(i, "ffn.in.bias"), Tensor::zeros(vec![ff]))?;
            p.insert(layer_name(i, "ffn.out.weight"), sample(vec![ff, d]))?;
            p.insert(layer_name(i, "ffn.out.bias"), Tensor::zeros(vec![d]))?;
            p.insert(layer_name(i, "ffn.ln.gamma"), Tensor::filled(vec![d], T::one()))?;
            p.insert(layer_name(i, "ffn.ln.beta"), Tensor::zeros(vec![d]))?;
        }
        p.insert(POOLER_WEIGHT, sample(vec![d, d]))?;
        p.insert(POOLER_BIAS, Tensor::zeros(vec![d]))?;
        p.insert(MLM_WEIGHT, sample(vec![d, d]))?;
        p.insert(MLM_BIAS, Tensor::zeros(vec![d]))?;
        Ok(Self {
            config,
            params: p,
            pooler_activation: Activation::Tanh,
        })
    }

    /// Parameters optimised by the entry-classification objective. The MLM head
    /// is not on the loss path and stays frozen.
    pub fn is_trainable(name: &str) -> bool {
        !name.starts_with("mlm.")
    }

    /// Parameters that receive weight decay: everything trainable except biases
    /// and layer-norm affine terms.
    pub fn decays(name: &str) -> bool {
        !(name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta"))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    pub fn cast<U: Scalar>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            params: self.params.cast(),
            pooler_activation: self.pooler_activation,
        }
    }

    /// Stable identity over config, pooler activation and every parameter bit.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.config).expect("config serialises"));
        hasher.update(format!("{:?}", self.pooler_activation).as_bytes());
        hasher.update(self.params.fingerprint().as_bytes());
        hex::encode(hasher.finalize())
    }

    fn layout(&self) -> Result<Layout> {
        let pos = |name: &str| {
            self.params
                .position(name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
        };
        let mut layers = Vec::with_capacity(self.config.n_layers);
        for i in 0..self.config.n_layers {
            let mut idx = [0usize; 16];
            for (slot, part) in idx.iter_mut().zip(LAYER_PARTS) {
                *slot = pos(&layer_name(i, part))?;
            }
            layers.push(idx);
        }
        Ok(Layout {
            token: pos("embeddings.token")?,
            position: pos("embeddings.position")?,
            emb_gamma: pos("embeddings.ln.gamma")?,
            emb_beta: pos("embeddings.ln.beta")?,
            layers,
            pooler_w: pos(POOLER_WEIGHT)?,
            pooler_b: pos(POOLER_BIAS)?,
        })
    }

    /// Put every parameter on `tape`; trainable ones as gradient-receiving leaves
    /// when `with_grad` is set. The returned vector is indexed like `self.params`.
    pub fn register(&self, tape: &mut Tape<T>, with_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                let grad = with_grad && Self::is_trainable(name);
                let data = t.data().to_vec();
                let shape = t.shape().to_vec();
                if grad {
                    tape.variable(shape, data)
                } else {
                    tape.constant(shape, data)
                }
                .expect("parameter shapes are consistent")
            })
            .collect()
    }

    fn check_inputs(&self, ids: &[usize], mask: &[T]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if ids.len() > self.config.max_position {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_position {}",
                ids.len(),
                self.config.max_position
            )));
        }
        if mask.len() != ids.len() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![ids.len()],
                rhs: vec![mask.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::invalid(format!("unknown token id {bad}")));
        }
        if mask.iter().any(|&m| m != T::zero() && m != T::one()) {
            return Err(Error::invalid("attention mask must be 0/1"));
        }
        if mask[0] != T::one() {
            return Err(Error::invalid("attention mask must include position 0"));
        }
        Ok(())
    }

    /// Last-layer hidden states `[len, d_model]` on `tape`.
    pub fn hidden_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        ids: &[usize],
        mask: &[T],
    ) -> Result<Var> {
        self.check_inputs(ids, mask)?;
        let lay = self.layout()?;
        let cfg = &self.config;
        let len = ids.len();
        let eps = T::from_f64_lossy(cfg.layer_norm_eps);

        let tok = tape.embedding(vars[lay.token], ids)?;
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embedding(vars[lay.position], &positions)?;
        let sum = tape.add(tok, pos)?;
        let mut x = tape.layer_norm(sum, vars[lay.emb_gamma], vars[lay.emb_beta], eps)?;

        let neg = T::from_f64_lossy(-1e9);
        let mut bias = Vec::with_capacity(len * len);
        for _ in 0..len {
            bias.extend(mask.iter().map(|&m| if m == T::one() { T::zero() } else { neg }));
        }
        let mask_bias = tape.constant(vec![len, len], bias)?;
        let dh = cfg.head_dim();
        let inv_sqrt = T::one() / T::from_usize(dh).expect("usize to float").sqrt();

        for idx in &lay.layers {
            let v = |k: usize| vars[idx[k]];
            let dense = |tape: &mut Tape<T>, input: Var, w: Var, b: Var| -> Result<Var> {
                let y = tape.matmul(input, w)?;
                tape.add_row(y, b)
            };
            let q = dense(tape, x, v(0), v(1))?;
            let k = dense(tape, x, v(2), v(3))?;
            let val = dense(tape, x, v(4), v(5))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(val, h * dh, dh)?;
                let scores = tape.matmul_bt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let scores = tape.add(scores, mask_bias)?;
                let probs = tape.softmax_rows(scores)?;
                heads.push(tape.matmul(probs, vh)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let attn = dense(tape, ctx, v(6), v(7))?;
            let res = tape.add(x, attn)?;
            x = tape.layer_norm(res, v(8), v(9), eps)?;
            let inner = dense(tape, x, v(10), v(11))?;
            let inner = tape.gelu(inner);
            let ff = dense(tape, inner, v(12), v(13))?;
            let res = tape.add(x, ff)?;
            x = tape.layer_norm(res, v(14), v(15), eps)?;
        }
        Ok(x)
    }

    /// Pooler on a `[1, d_model]` row: dense followed by the activation tag.
    pub fn pooler_on_tape(&self, tape: &mut Tape<T>, vars: &[Var], input: Var) -> Result<Var> {
        let lay = self.layout()?;
        let y = tape.matmul(input, vars[lay.pooler_w])?;
        let y = tape.add_row(y, vars[lay.pooler_b])?;
        Ok(match self.pooler_activation {
            Activation::Tanh => tape.tanh(y),
            Activation::Gelu => tape.gelu(y),
        })
    }

    /// Last-layer hidden states `[len, d_model]`.
    pub fn encode(&self, ids: &[usize], mask: &[T]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let h = self.hidden_on_tape(&mut tape, &vars, ids, mask)?;
        Ok(tape.to_tensor(h))
    }

    /// Pooler applied to a single `d_model` vector.
    pub fn pooler_forward(&self, input: &[T]) -> Result<Vec<T>> {
        if input.len() != self.config.d_model {
            return Err(Error::ShapeMismatch {
                op: "pooler",
                lhs: vec![input.len()],
                rhs: vec![self.config.d_model],
            });
        }
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let x = tape.constant(vec![1, input.len()], input.to_vec())?;
        let y = self.pooler_on_tape(&mut tape, &vars, x)?;
        Ok(tape.value(y).to_vec())
    }

    /// Copy the MLM-head dense layer into the pooler and switch Tanh to GELU.
    /// Only valid for roberta-like models; repeated application is a no-op.
    pub fn apply_roberta_pooler_surgery(&self) -> Result<Self> {
        if self.config.model_family != ModelFamily::RobertaLike {
            return Err(Error::invalid(
                "pooler surgery applies to roberta-like models only; the bert-like pooler is kept",
            ));
        }
        let mut out = self.clone();
        let w = self.params.require(MLM_WEIGHT)?.clone();
        let b = self.params.require(MLM_BIAS)?.clone();
        *out.params.get_mut(POOLER_WEIGHT).expect("pooler weight") = w;
        *out.params.get_mut(POOLER_BIAS).expect("pooler bias") = b;
        out.pooler_activation = Activation::Gelu;
        Ok(out)
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "pooler_activation": self.pooler_activation,
            "dtype": T::DTYPE,
            "fingerprint": self.fingerprint(),
        })
    }

    pub fn to_container(&self) -> Container
    where
        Tensor<T>: IntoStored,
    {
        let mut c = Container::new(CHECKPOINT_KIND, self.metadata());
        for (name, t) in self.params.iter() {
            c.push(name, t.clone());
        }
        c
    }

    pub fn from_container(mut container: Container) -> Result<Self> {
        if container.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!(
                "expected an encoder checkpoint, found {}",
                container.kind
            )));
        }
        let config: EncoderConfig =
            serde_json::from_value(container.metadata["config"].clone())?;
        let pooler_activation: Activation =
            serde_json::from_value(container.metadata["pooler_activation"].clone())?;
        let mut params = ParamSet::new();
        for (name, stored) in std::mem::take(&mut container.tensors) {
            params.insert(name, stored.into_tensor()?)?;
        }
        let out = Self {
            config,
            params,
            pooler_activation,
        };
        out.layout()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()>
    where
        Tensor<T>: IntoStored,
    {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}
