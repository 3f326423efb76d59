//! Adapter training.
//!
//! In ICaRus mode a batch is run twice: the frozen base model produces the
//! keys and values (exactly as its prefill would), and the adapter branch
//! attends over them to produce the logits. Gradients reach adapter tensors
//! only. Conventional mode trains a single-branch model whose adapters also
//! touch the key and value projections, so its KV cache is its own.

mod corpus;
mod optim;
mod step;

pub use corpus::{CorpusRule, ToyCorpus, BOS, SEP};
pub use optim::{lr_at, AdamW};
pub use step::{
    conventional_loss, conventional_loss_and_grads, conventional_train_step, encoder_kv, icarus_loss,
    icarus_loss_and_grads, icarus_train_step, GradReport, Trainable,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::{AdapterSet, BaseWeights, ConventionalAdapters, ModelConfig};
use crate::tensor::{Precision, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Icarus,
    Conventional,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Icarus => "icarus",
            TrainMode::Conventional => "conventional",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icarus" => Ok(TrainMode::Icarus),
            "conventional" => Ok(TrainMode::Conventional),
            _ => Err(Error::Mode(format!(
                "unknown training mode {s:?} (expected icarus or conventional)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub rank: usize,
    pub alpha: f64,
    pub corpus: ToyCorpus,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Icarus,
            lr: 1e-2,
            steps: 500,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_frac: 0.03,
            clip_norm: 1.0,
            rank: 8,
            alpha: 16.0,
            corpus: ToyCorpus::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.lr >= 0.0) || self.batch_size == 0 || self.rank == 0 || !(self.alpha > 0.0) {
            return Err(Error::Config(
                "learning rate, batch size, rank and alpha must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimizer moments must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || !(self.weight_decay >= 0.0) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("warmup fraction and weight decay out of range".into()));
        }
        if self.corpus.seq_len > model.max_context + 1 {
            return Err(Error::Config("sequences exceed the model context".into()));
        }
        self.corpus.validate(model.vocab_size)
    }
}

/// Per-step training losses of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub mode: TrainMode,
    pub losses: Vec<f64>,
}

impl LossTrace {
    pub const CSV_HEADER: &'static str = "step,mode,loss";

    /// `step,mode,loss` records with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{},{l:.9}\n", self.mode));
        }
        out
    }

    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    /// Mean of the last `window` losses.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        let w = window.min(self.losses.len());
        (w > 0).then(|| self.losses[self.losses.len() - w..].iter().sum::<f64>() / w as f64)
    }
}

/// Result of [`train_loop`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: LossTrace,
    /// Serialised final adapters.
    pub checkpoint: Vec<u8>,
    /// Content hash of the base weights, unchanged by training.
    pub base_hash: String,
}

/// Train adapters for `config.steps` steps on the corpus, starting from a
/// base model seeded with `config.seed`.
pub fn train_loop(model: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    config.validate(model)?;
    match model.precision {
        Precision::F32 => run::<f32>(model, config),
        Precision::F64 => run::<f64>(model, config),
    }
}

fn run<T: Scalar>(model: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let base = BaseWeights::<T>::init(model, config.seed)?;
    let data = config.corpus.generate(model.vocab_size)?;
    let mut opt =
        AdamW::new(config.beta1, config.beta2, config.eps, config.weight_decay).with_clip_norm(config.clip_norm);
    let adapter_seed = config.seed.wrapping_add(1);
    let mut losses = Vec::with_capacity(config.steps);
    let batch_at = |step: usize| -> Vec<Vec<usize>> {
        (0..config.batch_size)
            .map(|i| data[(step * config.batch_size + i) % data.len()].clone())
            .collect()
    };
    let diverged = |step: usize, losses: &[f64]| {
        Error::Numeric(format!(
            "{} loss diverged at step {step}; trace so far: {losses:?}",
            config.mode
        ))
    };
    let checkpoint = match config.mode {
        TrainMode::Icarus => {
            let mut a = AdapterSet::<T>::init(model, "toy", config.rank, config.alpha, adapter_seed)?;
            for step in 0..config.steps {
                let lr = lr_at(step, config.steps, config.lr, config.warmup_frac);
                match icarus_train_step(&base, &mut a, &batch_at(step), &mut opt, lr) {
                    Ok(l) => losses.push(l),
                    Err(Error::Numeric(_)) => return Err(diverged(step, &losses)),
                    Err(e) => return Err(e),
                }
            }
            checkpoint::encode_adapters(&a, model)
        }
        TrainMode::Conventional => {
            let mut a = ConventionalAdapters::<T>::init(model, "toy", config.rank, config.alpha, adapter_seed)?;
            for step in 0..config.steps {
                let lr = lr_at(step, config.steps, config.lr, config.warmup_frac);
                match conventional_train_step(&base, &mut a, &batch_at(step), &mut opt, lr) {
                    Ok(l) => losses.push(l),
                    Err(Error::Numeric(_)) => return Err(diverged(step, &losses)),
                    Err(e) => return Err(e),
                }
            }
            checkpoint::encode_conventional(&a, model)
        }
    };
    base.verify_frozen()?;
    Ok(TrainOutcome {
        trace: LossTrace {
            mode: config.mode,
            losses,
        },
        checkpoint,
        base_hash: base.content_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig::tiny();
        let t = TrainConfig {
            steps: 6,
            batch_size: 2,
            rank: 2,
            alpha: 4.0,
            corpus: ToyCorpus {
                samples: 16,
                seq_len: 8,
                ..ToyCorpus::default()
            },
            ..TrainConfig::default()
        };
        (m, t)
    }

    #[test]
    fn zero_steps_gives_header_only_trace() {
        let (m, t) = small();
        let out = train_loop(&m, &TrainConfig { steps: 0, ..t }).unwrap();
        assert_eq!(out.trace.to_csv(), "step,mode,loss\n");
    }

    #[test]
    fn reruns_are_identical_and_base_is_untouched() {
        let (m, t) = small();
        let a = train_loop(&m, &t).unwrap();
        let b = train_loop(&m, &t).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(
            a.base_hash,
            BaseWeights::<f32>::init(&m, t.seed).unwrap().content_hash()
        );
        let c = train_loop(
            &m,
            &TrainConfig {
                mode: TrainMode::Conventional,
                ..t
            },
        )
        .unwrap();
        assert_eq!(c.trace.losses.len(), 6);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (m, t) = small();
        assert!(train_loop(
            &m,
            &TrainConfig {
                batch_size: 0,
                ..t.clone()
            }
        )
        .is_err());
        assert!(train_loop(&m, &TrainConfig { beta1: 1.0, ..t }).is_err());
    }
}
