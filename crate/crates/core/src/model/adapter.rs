//! Low-rank adapters.
//!
//! [`AdapterSet`] is the trainable part of a task decoder. It has slots for
//! the query, output and FFN projections only: there is no way to attach an
//! adapter to the key or value projections, so the KV cache a task decoder
//! attends to is always the base model's.
//!
//! [`ConventionalAdapters`] is the comparison baseline: the same slots plus
//! key/value adapters. A model built from it writes its own KV entries and
//! cannot share a cache with anything else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, WeightKind};
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// One adapter pair: `delta(x) = scaling * (x A) B` with `A: [in, r]`,
/// `B: [r, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank<T: Scalar = f32> {
    a: Tensor<T>,
    b: Tensor<T>,
    scaling: T,
}

impl<T: Scalar> LowRank<T> {
    /// `A ~ N(0, 1/in)`, `B = 0`, so the adapter starts as an exact no-op.
    pub fn init(d_in: usize, d_out: usize, rank: usize, scaling: T, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Tensor::randn(&[d_in, rank], 1.0 / (d_in as f64).sqrt(), rng),
            b: Tensor::zeros(&[rank, d_out]),
            scaling,
        }
    }

    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, scaling: T) -> Result<Self> {
        let [_, r] = a.dims2("adapter A")?;
        let [r2, _] = b.dims2("adapter B")?;
        if r != r2 {
            return Err(Error::Config(format!(
                "adapter rank mismatch: A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b, scaling })
    }

    pub fn a(&self) -> &Tensor<T> {
        &self.a
    }

    pub fn b(&self) -> &Tensor<T> {
        &self.b
    }

    pub fn scaling(&self) -> T {
        self.scaling
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[1]
    }

    /// Adapter contribution for the rows of `x`.
    pub fn delta(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let xa = tensor::matmul(x, &self.a)?;
        Ok(tensor::scale(&tensor::matmul(&xa, &self.b)?, self.scaling))
    }

    pub fn is_noop(&self) -> bool {
        self.b.max_abs() == T::zero()
    }

    /// Check that this adapter fits a base weight of shape `[in, out]`.
    pub fn check_fits(&self, base: &Tensor<T>) -> Result<()> {
        if base.shape() != [self.d_in(), self.d_out()] {
            return Err(Error::Config(format!(
                "adapter [{}, {}] does not fit base weight {:?}",
                self.d_in(),
                self.d_out(),
                base.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor<T>; 2] {
        [&mut self.a, &mut self.b]
    }

    fn randomize_b(&mut self, std: f64, rng: &mut ChaCha8Rng) {
        self.b = Tensor::randn(self.b.shape(), std, rng);
    }

    fn cast<U: Scalar>(&self) -> LowRank<U> {
        LowRank {
            a: self.a.cast(),
            b: self.b.cast(),
            scaling: U::from_f64(self.scaling.as_f64()),
        }
    }
}

/// Lookup of the adapter attached to a layer projection, if any.
pub trait AdapterLookup<T: Scalar> {
    fn adapter(&self, layer: usize, kind: WeightKind) -> Option<&LowRank<T>>;
}

/// Decoder-path adapters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapters<T: Scalar = f32> {
    pub q: LowRank<T>,
    pub o: LowRank<T>,
    pub gate: LowRank<T>,
    pub up: LowRank<T>,
    pub down: LowRank<T>,
}

impl<T: Scalar> LayerAdapters<T> {
    fn all(&self) -> [(&'static str, &LowRank<T>); 5] {
        [
            ("q", &self.q),
            ("o", &self.o),
            ("gate", &self.gate),
            ("up", &self.up),
            ("down", &self.down),
        ]
    }

    fn all_mut(&mut self) -> [&mut LowRank<T>; 5] {
        [&mut self.q, &mut self.o, &mut self.gate, &mut self.up, &mut self.down]
    }
}

/// The trainable part of a task decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Scalar = f32> {
    task: String,
    rank: usize,
    alpha: f64,
    layers: Vec<LayerAdapters<T>>,
}

impl<T: Scalar> AdapterSet<T> {
    /// Fresh adapters with `B = 0`; `scaling = alpha / rank`.
    pub fn init(config: &ModelConfig, task: &str, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if rank == 0 || !(alpha > 0.0) {
            return Err(Error::Config(format!(
                "adapter rank and alpha must be positive (rank {rank}, alpha {alpha})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = T::from_f64(alpha / rank as f64);
        let (d, q, f) = (config.hidden, config.q_width(), config.ffn_dim);
        let layers = (0..config.num_layers)
            .map(|_| LayerAdapters {
                q: LowRank::init(d, q, rank, s, &mut rng),
                o: LowRank::init(q, d, rank, s, &mut rng),
                gate: LowRank::init(d, f, rank, s, &mut rng),
                up: LowRank::init(d, f, rank, s, &mut rng),
                down: LowRank::init(f, d, rank, s, &mut rng),
            })
            .collect();
        Ok(Self {
            task: task.to_string(),
            rank,
            alpha,
            layers,
        })
    }

    /// Adapters with random `B` as well, for equivalence testing.
    pub fn random(config: &ModelConfig, task: &str, rank: usize, alpha: f64, seed: u64, b_std: f64) -> Result<Self> {
        let mut set = Self::init(config, task, rank, alpha, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eedb);
        for l in &mut set.layers {
            for a in l.all_mut() {
                a.randomize_b(b_std, &mut rng);
            }
        }
        Ok(set)
    }

    pub fn task(&self) -> &str {
        &self.task
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn layers(&self) -> &[LayerAdapters<T>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// True when every `B` is zero.
    pub fn is_noop(&self) -> bool {
        self.layers.iter().all(|l| l.all().iter().all(|(_, a)| a.is_noop()))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (name, a) in l.all() {
                out.push((format!("layers.{i}.{name}.a"), a.a()));
                out.push((format!("layers.{i}.{name}.b"), a.b()));
            }
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.all_mut())
            .flat_map(|a| a.tensors_mut())
            .collect()
    }

    pub(crate) fn from_named(
        task: String,
        rank: usize,
        alpha: f64,
        num_layers: usize,
        mut take: impl FnMut(&str) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let s = T::from_f64(alpha / rank as f64);
        let layers = (0..num_layers)
            .map(|i| {
                let mut pair = |n: &str| {
                    LowRank::from_parts(
                        take(&format!("layers.{i}.{n}.a"))?,
                        take(&format!("layers.{i}.{n}.b"))?,
                        s,
                    )
                };
                Ok(LayerAdapters {
                    q: pair("q")?,
                    o: pair("o")?,
                    gate: pair("gate")?,
                    up: pair("up")?,
                    down: pair("down")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task,
            rank,
            alpha,
            layers,
        })
    }

    /// Check every adapter against the base weight it attaches to.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(Error::Config(format!(
                "adapter has {} layers, model has {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        let (d, q, f) = (config.hidden, config.q_width(), config.ffn_dim);
        for l in &self.layers {
            for (a, (i, o)) in
                [&l.q, &l.o, &l.gate, &l.up, &l.down]
                    .into_iter()
                    .zip([(d, q), (q, d), (d, f), (d, f), (f, d)])
            {
                if a.d_in() != i || a.d_out() != o {
                    return Err(Error::Config(format!(
                        "adapter [{}, {}] does not fit [{i}, {o}]",
                        a.d_in(),
                        a.d_out()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AdapterSet<U> {
        AdapterSet {
            task: self.task.clone(),
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LayerAdapters {
                    q: l.q.cast(),
                    o: l.o.cast(),
                    gate: l.gate.cast(),
                    up: l.up.cast(),
                    down: l.down.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> AdapterLookup<T> for AdapterSet<T> {
    fn adapter(&self, layer: usize, kind: WeightKind) -> Option<&LowRank<T>> {
        let l = self.layers.get(layer)?;
        match kind {
            WeightKind::Q => Some(&l.q),
            WeightKind::O => Some(&l.o),
            WeightKind::Gate => Some(&l.gate),
            WeightKind::Up => Some(&l.up),
            WeightKind::Down => Some(&l.down),
            WeightKind::K | WeightKind::V | WeightKind::Embed | WeightKind::LmHead => None,
        }
    }
}

/// Key/value adapters of one layer (conventional fine-tuning only).
#[derive(Debug, Clone, PartialEq)]
pub struct KvAdapters<T: Scalar = f32> {
    pub k: LowRank<T>,
    pub v: LowRank<T>,
}

/// Conventional fine-tuning adapters: decoder slots plus key/value adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConventionalAdapters<T: Scalar = f32> {
    decoder: AdapterSet<T>,
    kv: Vec<KvAdapters<T>>,
}

impl<T: Scalar> ConventionalAdapters<T> {
    pub fn init(config: &ModelConfig, task: &str, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let decoder = AdapterSet::init(config, task, rank, alpha, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b76);
        let s = T::from_f64(alpha / rank as f64);
        let kv = (0..config.num_layers)
            .map(|_| KvAdapters {
                k: LowRank::init(config.hidden, config.kv_width(), rank, s, &mut rng),
                v: LowRank::init(config.hidden, config.kv_width(), rank, s, &mut rng),
            })
            .collect();
        Ok(Self { decoder, kv })
    }

    /// Adapters with random `B` everywhere, including keys and values.
    pub fn random(config: &ModelConfig, task: &str, rank: usize, alpha: f64, seed: u64, b_std: f64) -> Result<Self> {
        let mut set = Self::init(config, task, rank, alpha, seed)?;
        set.decoder = AdapterSet::random(config, task, rank, alpha, seed, b_std)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0006_b76b);
        for l in &mut set.kv {
            l.k.randomize_b(b_std, &mut rng);
            l.v.randomize_b(b_std, &mut rng);
        }
        Ok(set)
    }

    pub fn decoder(&self) -> &AdapterSet<T> {
        &self.decoder
    }

    pub fn kv(&self) -> &[KvAdapters<T>] {
        &self.kv
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.decoder.named_tensors();
        for (i, l) in self.kv.iter().enumerate() {
            out.push((format!("layers.{i}.k.a"), l.k.a()));
            out.push((format!("layers.{i}.k.b"), l.k.b()));
            out.push((format!("layers.{i}.v.a"), l.v.a()));
            out.push((format!("layers.{i}.v.b"), l.v.b()));
        }
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.decoder.tensors_mut();
        for l in &mut self.kv {
            out.extend(l.k.tensors_mut());
            out.extend(l.v.tensors_mut());
        }
        out
    }

    pub(crate) fn from_named(
        task: String,
        rank: usize,
        alpha: f64,
        num_layers: usize,
        mut take: impl FnMut(&str) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let decoder = AdapterSet::from_named(task, rank, alpha, num_layers, &mut take)?;
        let s = T::from_f64(alpha / rank as f64);
        let kv = (0..num_layers)
            .map(|i| {
                let mut pair = |n: &str| {
                    LowRank::from_parts(
                        take(&format!("layers.{i}.{n}.a"))?,
                        take(&format!("layers.{i}.{n}.b"))?,
                        s,
                    )
                };
                Ok(KvAdapters {
                    k: pair("k")?,
                    v: pair("v")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { decoder, kv })
    }
}

impl<T: Scalar> AdapterLookup<T> for ConventionalAdapters<T> {
    fn adapter(&self, layer: usize, kind: WeightKind) -> Option<&LowRank<T>> {
        match kind {
            WeightKind::K => self.kv.get(layer).map(|l| &l.k),
            WeightKind::V => self.kv.get(layer).map(|l| &l.v),
            _ => self.decoder.adapter(layer, kind),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_adapters_have_no_key_or_value_slot() {
        let c = ModelConfig::default();
        let set = AdapterSet::<f32>::init(&c, "math", 8, 16.0, 1).unwrap();
        for layer in 0..c.num_layers {
            for kind in [WeightKind::K, WeightKind::V, WeightKind::Embed, WeightKind::LmHead] {
                assert!(set.adapter(layer, kind).is_none());
            }
            for kind in [
                WeightKind::Q,
                WeightKind::O,
                WeightKind::Gate,
                WeightKind::Up,
                WeightKind::Down,
            ] {
                assert!(set.adapter(layer, kind).is_some());
            }
        }
        assert_eq!(set.scaling(), 2.0);
        set.check_against(&c).unwrap();
    }

    #[test]
    fn fresh_adapters_are_exact_noops() {
        let c = ModelConfig::tiny();
        let set = AdapterSet::<f32>::init(&c, "t", 4, 8.0, 2).unwrap();
        assert!(set.is_noop());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::randn(&[3, c.hidden], 1.0, &mut rng);
        let d = set.layers()[0].q.delta(&x).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
        assert!(!AdapterSet::<f32>::random(&c, "t", 4, 8.0, 2, 0.1).unwrap().is_noop());
    }

    #[test]
    fn conventional_adapters_expose_kv_slots() {
        let c = ModelConfig::tiny();
        let set = ConventionalAdapters::<f32>::init(&c, "t", 4, 8.0, 2).unwrap();
        assert!(set.adapter(1, WeightKind::K).is_some());
        assert!(set.adapter(1, WeightKind::V).is_some());
        assert_eq!(set.named_tensors().len(), c.num_layers * (10 + 4));
    }

    #[test]
    fn rejects_bad_rank_and_mismatched_fit() {
        let c = ModelConfig::tiny();
        assert!(AdapterSet::<f32>::init(&c, "t", 0, 8.0, 0).is_err());
        let set = AdapterSet::<f32>::init(&c, "t", 2, 4.0, 0).unwrap();
        let other = ModelConfig { ffn_dim: 48, ..c };
        assert!(set.check_against(&other).is_err());
        let w = Tensor::<f32>::zeros(&[5, 5]);
        assert!(set.layers()[0].q.check_fits(&w).is_err());
    }
}
