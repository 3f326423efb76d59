use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Which projection a weight matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Embed,
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
    LmHead,
}

impl WeightKind {
    pub fn name(self) -> &'static str {
        match self {
            WeightKind::Embed => "embed",
            WeightKind::Q => "wq",
            WeightKind::K => "wk",
            WeightKind::V => "wv",
            WeightKind::O => "wo",
            WeightKind::Gate => "w_gate",
            WeightKind::Up => "w_up",
            WeightKind::Down => "w_down",
            WeightKind::LmHead => "lm_head",
        }
    }
}

/// A base parameter matrix, identified for read accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeightId {
    pub layer: Option<usize>,
    pub kind: WeightKind,
}

impl WeightId {
    pub fn layer(layer: usize, kind: WeightKind) -> Self {
        Self {
            layer: Some(layer),
            kind,
        }
    }

    pub fn global(kind: WeightKind) -> Self {
        Self { layer: None, kind }
    }
}

impl fmt::Display for WeightId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "layers.{l}.{}", self.kind.name()),
            None => f.write_str(self.kind.name()),
        }
    }
}

/// Frozen per-layer parameters. Linear weights are stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Scalar = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn linear(&self, kind: WeightKind) -> &Tensor<T> {
        match kind {
            WeightKind::Q => &self.wq,
            WeightKind::K => &self.wk,
            WeightKind::V => &self.wv,
            WeightKind::O => &self.wo,
            WeightKind::Gate => &self.w_gate,
            WeightKind::Up => &self.w_up,
            WeightKind::Down => &self.w_down,
            WeightKind::Embed | WeightKind::LmHead => {
                unreachable!("{kind:?} is not a per-layer weight")
            }
        }
    }

    fn named(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }
}

/// The frozen base model: the only producer of KV entries.
///
/// Fields are private; the content hash taken at construction is the freeze
/// witness and [`BaseWeights::verify_frozen`] re-derives it on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights<T: Scalar = f32> {
    config: ModelConfig,
    embed: Tensor<T>,
    layers: Vec<LayerWeights<T>>,
    final_norm: Tensor<T>,
    lm_head: Tensor<T>,
    freeze_hash: String,
}

impl<T: Scalar> BaseWeights<T> {
    /// Seeded initialisation: linear weights `~ N(0, 1/fan_in)`, embeddings
    /// `~ N(0, 1)`, norm gains at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "config precision {} does not match tensor type {}",
                config.precision,
                T::PRECISION
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let lin = |rng: &mut ChaCha8Rng, i: usize, o: usize| Tensor::randn(&[i, o], 1.0 / (i as f64).sqrt(), rng);
        let ones = || Tensor::from_fn(&[d], |_| T::one());
        let embed = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                attn_norm: ones(),
                wq: lin(&mut rng, d, config.q_width()),
                wk: lin(&mut rng, d, config.kv_width()),
                wv: lin(&mut rng, d, config.kv_width()),
                wo: lin(&mut rng, config.q_width(), d),
                ffn_norm: ones(),
                w_gate: lin(&mut rng, d, config.ffn_dim),
                w_up: lin(&mut rng, d, config.ffn_dim),
                w_down: lin(&mut rng, config.ffn_dim, d),
            })
            .collect();
        let final_norm = ones();
        let lm_head = lin(&mut rng, d, config.vocab_size);
        Self::from_parts(config.clone(), embed, layers, final_norm, lm_head)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        embed: Tensor<T>,
        layers: Vec<LayerWeights<T>>,
        final_norm: Tensor<T>,
        lm_head: Tensor<T>,
    ) -> Result<Self> {
        let mut w = Self {
            config,
            embed,
            layers,
            final_norm,
            lm_head,
            freeze_hash: String::new(),
        };
        w.check_shapes()?;
        w.freeze_hash = w.content_hash();
        Ok(w)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.hidden;
        let want = |t: &Tensor<T>, shape: &[usize], what: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "{what} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        want(&self.embed, &[c.vocab_size, d], "embed")?;
        want(&self.final_norm, &[d], "final_norm")?;
        want(&self.lm_head, &[d, c.vocab_size], "lm_head")?;
        if self.layers.len() != c.num_layers {
            return Err(Error::Config("layer count mismatch".into()));
        }
        for l in &self.layers {
            want(&l.attn_norm, &[d], "attn_norm")?;
            want(&l.ffn_norm, &[d], "ffn_norm")?;
            want(&l.wq, &[d, c.q_width()], "wq")?;
            want(&l.wk, &[d, c.kv_width()], "wk")?;
            want(&l.wv, &[d, c.kv_width()], "wv")?;
            want(&l.wo, &[c.q_width(), d], "wo")?;
            want(&l.w_gate, &[d, c.ffn_dim], "w_gate")?;
            want(&l.w_up, &[d, c.ffn_dim], "w_up")?;
            want(&l.w_down, &[c.ffn_dim, d], "w_down")?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embed(&self) -> &Tensor<T> {
        &self.embed
    }

    pub fn layers(&self) -> &[LayerWeights<T>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerWeights<T> {
        &self.layers[i]
    }

    pub fn final_norm(&self) -> &Tensor<T> {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Tensor<T> {
        &self.lm_head
    }

    /// Hash recorded when the weights were built.
    pub fn freeze_hash(&self) -> &str {
        &self.freeze_hash
    }

    /// SHA-256 over the configuration and every tensor, in a fixed order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            t.digest_into(&mut h);
        }
        hex::encode(h.finalize())
    }

    /// Re-derive the content hash and compare it with the freeze witness.
    pub fn verify_frozen(&self) -> Result<()> {
        let now = self.content_hash();
        if now != self.freeze_hash {
            return Err(Error::ContractViolation(format!(
                "base weights changed after freezing ({} -> {now})",
                self.freeze_hash
            )));
        }
        Ok(())
    }

    /// All tensors with stable checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in l.named() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuild from checkpoint tensors looked up by name.
    pub(crate) fn from_named(config: ModelConfig, mut take: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        let layers = (0..config.num_layers)
            .map(|i| {
                let mut t = |n: &str| take(&format!("layers.{i}.{n}"));
                Ok(LayerWeights {
                    attn_norm: t("attn_norm")?,
                    wq: t("wq")?,
                    wk: t("wk")?,
                    wv: t("wv")?,
                    wo: t("wo")?,
                    ffn_norm: t("ffn_norm")?,
                    w_gate: t("w_gate")?,
                    w_up: t("w_up")?,
                    w_down: t("w_down")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let embed = take("embed")?;
        let final_norm = take("final_norm")?;
        let lm_head = take("lm_head")?;
        Self::from_parts(config, embed, layers, final_norm, lm_head)
    }

    /// Same weights in another precision (fresh freeze witness).
    pub fn cast<U: Scalar>(&self) -> BaseWeights<U> {
        let config = ModelConfig {
            precision: U::PRECISION,
            ..self.config.clone()
        };
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                attn_norm: l.attn_norm.cast(),
                wq: l.wq.cast(),
                wk: l.wk.cast(),
                wv: l.wv.cast(),
                wo: l.wo.cast(),
                ffn_norm: l.ffn_norm.cast(),
                w_gate: l.w_gate.cast(),
                w_up: l.w_up.cast(),
                w_down: l.w_down.cast(),
            })
            .collect();
        BaseWeights::from_parts(
            config,
            self.embed.cast(),
            layers,
            self.final_norm.cast(),
            self.lm_head.cast(),
        )
        .expect("cast keeps shapes")
    }

    #[cfg(test)]
    pub(crate) fn tamper_for_test(&mut self) {
        let mut data = self.lm_head.data().to_vec();
        data[0] = data[0] + T::one();
        self.lm_head = Tensor::new(self.lm_head.shape().to_vec(), data).unwrap();
    }
}
