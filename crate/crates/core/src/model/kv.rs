use crate::error::{Error, Result};
use crate::metrics::StepLedger;
use crate::tensor::{Scalar, Tensor};

use super::ModelConfig;

/// Which half of a stacked pair is writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// The frozen base path; the only legal KV producer.
    Encoder,
    /// The adapter path.
    Decoder,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerKv<T> {
    keys: Vec<T>,
    values: Vec<T>,
}

/// Append-only per-layer key/value store, `[positions, kv_heads * head_dim]`
/// per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheTensor<T: Scalar = f32> {
    kv_width: usize,
    max_context: usize,
    layers: Vec<LayerKv<T>>,
}

/// Borrowed keys and values of one layer.
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a, T: Scalar> {
    pub keys: &'a [T],
    pub values: &'a [T],
    pub len: usize,
}

impl<T: Scalar> KvCacheTensor<T> {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            kv_width: config.kv_width(),
            max_context: config.max_context,
            layers: (0..config.num_layers)
                .map(|_| LayerKv {
                    keys: Vec::new(),
                    values: Vec::new(),
                })
                .collect(),
        }
    }

    /// Rebuild from per-layer `(keys, values)` rows, e.g. copied out of
    /// cached blocks.
    pub fn from_layers(config: &ModelConfig, layers: Vec<(Vec<T>, Vec<T>)>) -> Result<Self> {
        let mut kv = Self::new(config);
        if layers.len() != kv.layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers of KV, got {}",
                kv.layers.len(),
                layers.len()
            )));
        }
        let len = layers[0].0.len() / kv.kv_width;
        for (slot, (k, v)) in kv.layers.iter_mut().zip(layers) {
            if k.len() != len * kv.kv_width || v.len() != k.len() {
                return Err(Error::Config("ragged KV layers".into()));
            }
            slot.keys = k;
            slot.values = v;
        }
        if len > kv.max_context {
            return Err(Error::Capacity(format!(
                "{len} cached positions exceed max context {}",
                kv.max_context
            )));
        }
        Ok(kv)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn kv_width(&self) -> usize {
        self.kv_width
    }

    /// Positions stored in `layer`.
    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].keys.len() / self.kv_width
    }

    /// Positions present in every layer.
    pub fn len(&self) -> usize {
        (0..self.layers.len()).map(|l| self.layer_len(l)).min().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes held across all layers.
    pub fn bytes(&self) -> usize {
        self.layers
            .iter()
            .map(|l| (l.keys.len() + l.values.len()) * T::PRECISION.bytes())
            .sum()
    }

    /// Append rows of `k` and `v` (`[n, kv_width]`) to `layer`.
    ///
    /// Only [`Branch::Encoder`] may write.
    pub fn append(
        &mut self,
        layer: usize,
        branch: Branch,
        k: &Tensor<T>,
        v: &Tensor<T>,
        ledger: &mut StepLedger,
    ) -> Result<()> {
        if branch != Branch::Encoder {
            return Err(Error::ContractViolation(format!(
                "decoder branch attempted to write KV at layer {layer}"
            )));
        }
        let size = self.layers.len();
        if layer >= size {
            return Err(Error::Index {
                what: "kv layer",
                index: layer,
                size,
            });
        }
        if k.shape() != v.shape() || k.last_dim() != self.kv_width {
            return Err(Error::Dimension {
                op: "kv append",
                lhs: k.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let n = k.rows();
        if self.layer_len(layer) + n > self.max_context {
            return Err(Error::Capacity(format!(
                "KV would grow to {} positions, max context is {}",
                self.layer_len(layer) + n,
                self.max_context
            )));
        }
        let slot = &mut self.layers[layer];
        slot.keys.extend_from_slice(k.data());
        slot.values.extend_from_slice(v.data());
        ledger.record_kv_write(2 * k.len() * T::PRECISION.bytes());
        Ok(())
    }

    /// Borrow a layer's keys and values, counting one KV read.
    pub fn view(&self, layer: usize, ledger: &mut StepLedger) -> KvView<'_, T> {
        let l = &self.layers[layer];
        ledger.record_kv_read(layer, (l.keys.len() + l.values.len()) * T::PRECISION.bytes());
        KvView {
            keys: &l.keys,
            values: &l.values,
            len: l.keys.len() / self.kv_width,
        }
    }

    pub fn keys(&self, layer: usize) -> &[T] {
        &self.layers[layer].keys
    }

    pub fn values(&self, layer: usize) -> &[T] {
        &self.layers[layer].values
    }

    /// Per-layer copies of positions `start..end`.
    pub fn slice_positions(&self, start: usize, end: usize) -> Vec<(Vec<T>, Vec<T>)> {
        let w = self.kv_width;
        self.layers
            .iter()
            .map(|l| {
                (
                    l.keys[start * w..end * w].to_vec(),
                    l.values[start * w..end * w].to_vec(),
                )
            })
            .collect()
    }

    /// Bitwise equality of every stored key and value.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| bits_eq(&a.keys, &b.keys) && bits_eq(&a.values, &b.values))
    }
}

fn bits_eq<T: Scalar>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let (mut bx, mut by) = (Vec::new(), Vec::new());
            x.write_le(&mut bx);
            y.write_le(&mut by);
            bx == by
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, w: usize, start: f32) -> Tensor<f32> {
        Tensor::from_fn(&[n, w], |i| start + i as f32)
    }

    #[test]
    fn append_grows_and_never_rewrites() {
        let c = ModelConfig::tiny();
        let mut kv = KvCacheTensor::<f32>::new(&c);
        let mut led = StepLedger::new();
        let w = c.kv_width();
        kv.append(0, Branch::Encoder, &rows(3, w, 0.0), &rows(3, w, 1.0), &mut led)
            .unwrap();
        assert_eq!(kv.layer_len(0), 3);
        assert_eq!(kv.len(), 0);
        let before = kv.keys(0).to_vec();
        kv.append(0, Branch::Encoder, &rows(1, w, 9.0), &rows(1, w, 9.0), &mut led)
            .unwrap();
        assert_eq!(&kv.keys(0)[..before.len()], before.as_slice());
        assert_eq!(led.kv_bytes_written(), (2 * 4 * w * 4) as u64);
    }

    #[test]
    fn decoder_branch_cannot_write() {
        let c = ModelConfig::tiny();
        let mut kv = KvCacheTensor::<f32>::new(&c);
        let t = rows(1, c.kv_width(), 0.0);
        let err = kv
            .append(0, Branch::Decoder, &t, &t, &mut StepLedger::new())
            .unwrap_err();
        assert!(matches!(err, Error::ContractViolation(_)));
        assert!(kv.is_empty());
    }

    #[test]
    fn capacity_is_enforced() {
        let c = ModelConfig {
            max_context: 2,
            ..ModelConfig::tiny()
        };
        let mut kv = KvCacheTensor::<f32>::new(&c);
        let t = rows(3, c.kv_width(), 0.0);
        let err = kv
            .append(0, Branch::Encoder, &t, &t, &mut StepLedger::new())
            .unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn view_counts_one_read_and_bitwise_eq_detects_change() {
        let c = ModelConfig::tiny();
        let w = c.kv_width();
        let mut a = KvCacheTensor::<f32>::new(&c);
        let mut led = StepLedger::new();
        for l in 0..c.num_layers {
            a.append(l, Branch::Encoder, &rows(2, w, 0.0), &rows(2, w, 0.5), &mut led)
                .unwrap();
        }
        let b = KvCacheTensor::from_layers(&c, a.slice_positions(0, 2)).unwrap();
        assert!(a.bitwise_eq(&b));
        let v = a.view(1, &mut led);
        assert_eq!(v.len, 2);
        assert_eq!(led.kv_read_events(), 1);
        let mut layers = a.slice_positions(0, 2);
        layers[1].0[0] = -0.0;
        let c2 = KvCacheTensor::from_layers(&c, layers).unwrap();
        assert!(!a.bitwise_eq(&c2));
    }
}
