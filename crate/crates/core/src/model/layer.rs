//! One transformer layer in its three execution shapes.
//!
//! * single branch: the base model alone (prefill, plain decode) or a
//!   conventionally fine-tuned model whose adapters may touch K/V;
//! * fused pair: encoder and decoder stacked as a batch of two, one read of
//!   every base weight, queries concatenated to `2H` heads for one attention
//!   call;
//! * two-pass: the same pair computed as two separate passes over the base
//!   weights. This is the reference the fused path is checked against.

use super::kv::Branch;
use super::{
    AdapterLookup, AdapterSet, BaseWeights, KvCacheTensor, KvView, LowRank, ModelConfig, WeightId, WeightKind,
};
use crate::error::{Error, Result};
use crate::metrics::StepLedger;
use crate::tensor::{self, Scalar, Tensor};

/// Which inference phase a forward call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

fn weight_bytes<T: Scalar>(w: &Tensor<T>) -> usize {
    w.len() * T::PRECISION.bytes()
}

/// `x W`, plus the adapter delta on rows `from..`; one read of `W`.
fn project<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    id: WeightId,
    adapter: Option<(&LowRank<T>, usize)>,
    ledger: &mut StepLedger,
) -> Result<Tensor<T>> {
    ledger.record_weight_read(id, weight_bytes(w));
    let out = tensor::matmul(x, w)?;
    let Some((a, from)) = adapter else {
        return Ok(out);
    };
    a.check_fits(w)?;
    let delta = a.delta(&x.slice_rows(from, x.rows()))?;
    let shape = out.shape().to_vec();
    let mut data = out.into_data();
    let start = from * shape[1];
    for (o, &d) in data[start..].iter_mut().zip(delta.data()) {
        *o = *o + d;
    }
    Tensor::new(shape, data)
}

/// Batch-of-two linear: both branches share one pass over `base`; the
/// adapter contribution is added to branch 1 only.
///
/// `x_pair` is `[2, n, d_in]`; the result is `[2, n, d_out]`.
pub fn icarus_linear<T: Scalar>(
    x_pair: &Tensor<T>,
    base: &Tensor<T>,
    id: WeightId,
    adapter: Option<&LowRank<T>>,
    ledger: &mut StepLedger,
) -> Result<Tensor<T>> {
    let (n, d_in) = match x_pair.shape() {
        [2, n, d] => (*n, *d),
        s => {
            return Err(Error::Dimension {
                op: "icarus_linear",
                lhs: s.to_vec(),
                rhs: vec![2],
            })
        }
    };
    if let Some(a) = adapter {
        a.check_fits(base)?;
    }
    let flat = x_pair.clone().reshape(&[2 * n, d_in])?;
    let out = project(&flat, base, id, adapter.map(|a| (a, n)), ledger)?;
    let d_out = out.last_dim();
    out.reshape(&[2, n, d_out])
}

/// Grouped-query attention of `q` (`[n, H*d_k]` or `[n, 2H*d_k]`) over one
/// layer's cached K/V, with query row `i` at position `q_start + i`.
pub fn layer_attention<T: Scalar>(
    q: &Tensor<T>,
    kv: &KvView<'_, T>,
    config: &ModelConfig,
    q_start: usize,
) -> Result<Tensor<T>> {
    let heads = q.last_dim() / config.head_dim;
    let branches = match heads {
        h if h == config.num_query_heads && q.last_dim().is_multiple_of(config.head_dim) => 1,
        h if h == 2 * config.num_query_heads && q.last_dim().is_multiple_of(config.head_dim) => 2,
        _ => {
            return Err(Error::Mode(format!(
                "query width {} is neither H nor 2H heads of size {}",
                q.last_dim(),
                config.head_dim
            )))
        }
    };
    if kv.len == 0 {
        return Err(Error::State("attention over an empty KV cache".into()));
    }
    tensor::gqa_attention(q, kv.keys, kv.values, q_start, &config.attention_layout(branches))
}

/// The pieces of one layer, shared by all three execution shapes.
struct LayerOps<'a, T: Scalar> {
    base: &'a BaseWeights<T>,
    layer: usize,
}

impl<'a, T: Scalar> LayerOps<'a, T> {
    fn config(&self) -> &ModelConfig {
        self.base.config()
    }

    fn id(&self, kind: WeightKind) -> WeightId {
        WeightId::layer(self.layer, kind)
    }

    fn eps(&self) -> T {
        T::from_f64(self.config().rms_eps)
    }

    fn adapt<'b>(
        &self,
        lookup: Option<&'b dyn AdapterLookup<T>>,
        kind: WeightKind,
        from: usize,
    ) -> Option<(&'b LowRank<T>, usize)> {
        lookup.and_then(|l| l.adapter(self.layer, kind)).map(|a| (a, from))
    }

    /// Queries for stacked rows, each branch of `n` rows roped from `start`.
    fn queries(
        &self,
        h: &Tensor<T>,
        n: usize,
        start: usize,
        lookup: Option<&dyn AdapterLookup<T>>,
        from: usize,
        ledger: &mut StepLedger,
    ) -> Result<Tensor<T>> {
        let lw = self.base.layer(self.layer);
        let q = project(
            h,
            &lw.wq,
            self.id(WeightKind::Q),
            self.adapt(lookup, WeightKind::Q, from),
            ledger,
        )?;
        let c = self.config();
        let parts = (0..q.rows() / n.max(1))
            .map(|b| {
                tensor::rope_rows(
                    &q.slice_rows(b * n, (b + 1) * n),
                    start,
                    c.head_dim,
                    c.rope_theta,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
    }

    /// Project K/V from the encoder rows `h0` and append them.
    fn write_kv(
        &self,
        h0: &Tensor<T>,
        start: usize,
        lookup: Option<&dyn AdapterLookup<T>>,
        kv: &mut KvCacheTensor<T>,
        ledger: &mut StepLedger,
    ) -> Result<()> {
        let lw = self.base.layer(self.layer);
        let c = self.config();
        let k = project(
            h0,
            &lw.wk,
            self.id(WeightKind::K),
            self.adapt(lookup, WeightKind::K, 0),
            ledger,
        )?;
        let v = project(
            h0,
            &lw.wv,
            self.id(WeightKind::V),
            self.adapt(lookup, WeightKind::V, 0),
            ledger,
        )?;
        let k = tensor::rope_rows(&k, start, c.head_dim, c.rope_theta, false)?;
        kv.append(self.layer, Branch::Encoder, &k, &v, ledger)
    }

    fn attend(&self, q: &Tensor<T>, view: &KvView<'_, T>, start: usize, ledger: &mut StepLedger) -> Result<Tensor<T>> {
        ledger.record_attention_call();
        layer_attention(q, view, self.config(), start)
    }

    /// Output projection, residual, then the gated FFN block.
    fn finish(
        &self,
        x: &Tensor<T>,
        attn: &Tensor<T>,
        lookup: Option<&dyn AdapterLookup<T>>,
        from: usize,
        ledger: &mut StepLedger,
    ) -> Result<Tensor<T>> {
        let lw = self.base.layer(self.layer);
        let o = project(
            attn,
            &lw.wo,
            self.id(WeightKind::O),
            self.adapt(lookup, WeightKind::O, from),
            ledger,
        )?;
        let x = tensor::add(x, &o)?;
        let h = tensor::rms_norm(&x, &lw.ffn_norm, self.eps())?;
        let g = project(
            &h,
            &lw.w_gate,
            self.id(WeightKind::Gate),
            self.adapt(lookup, WeightKind::Gate, from),
            ledger,
        )?;
        let u = project(
            &h,
            &lw.w_up,
            self.id(WeightKind::Up),
            self.adapt(lookup, WeightKind::Up, from),
            ledger,
        )?;
        let a = tensor::mul(&tensor::silu(&g), &u)?;
        let d = project(
            &a,
            &lw.w_down,
            self.id(WeightKind::Down),
            self.adapt(lookup, WeightKind::Down, from),
            ledger,
        )?;
        tensor::add(&x, &d)
    }
}

fn check_layer<T: Scalar>(base: &BaseWeights<T>, layer: usize) -> Result<()> {
    let size = base.config().num_layers;
    if layer >= size {
        return Err(Error::Index {
            what: "layer",
            index: layer,
            size,
        });
    }
    Ok(())
}

/// Single-branch layer over rows `x` (`[n, d]`) at positions
/// `kv.layer_len(layer)..`. With `lookup = None` this is the base model.
pub fn block_forward_single<T: Scalar>(
    x: &Tensor<T>,
    layer: usize,
    base: &BaseWeights<T>,
    lookup: Option<&dyn AdapterLookup<T>>,
    kv: &mut KvCacheTensor<T>,
    ledger: &mut StepLedger,
) -> Result<Tensor<T>> {
    check_layer(base, layer)?;
    let ops = LayerOps { base, layer };
    let n = x.rows();
    let start = kv.layer_len(layer);
    let h = tensor::rms_norm(x, &base.layer(layer).attn_norm, ops.eps())?;
    let q = ops.queries(&h, n, start, lookup, 0, ledger)?;
    ops.write_kv(&h, start, lookup, kv, ledger)?;
    let view = kv.view(layer, ledger);
    let attn = ops.attend(&q, &view, start, ledger)?;
    ops.finish(x, &attn, lookup, 0, ledger)
}

/// One layer of the stacked pair `x_pair` (`[b, n, d]`).
///
/// * `b = 1`: base model only. Required in prefill.
/// * `b = 2`, decode: branch 0 is the encoder, branch 1 the decoder. K/V of
///   the new positions come from branch 0 and are appended before attention;
///   both branches' queries are concatenated to `2H` heads and attend once.
pub fn block_forward<T: Scalar>(
    x_pair: &Tensor<T>,
    layer: usize,
    base: &BaseWeights<T>,
    adapter: Option<&AdapterSet<T>>,
    kv: &mut KvCacheTensor<T>,
    phase: Phase,
    ledger: &mut StepLedger,
) -> Result<Tensor<T>> {
    check_layer(base, layer)?;
    let d = base.config().hidden;
    let (b, n) = match x_pair.shape() {
        [b, n, dd] if *dd == d && (*b == 1 || *b == 2) => (*b, *n),
        s => {
            return Err(Error::Dimension {
                op: "block_forward",
                lhs: s.to_vec(),
                rhs: vec![2, 1, d],
            })
        }
    };
    if let Some(a) = adapter {
        a.check_against(base.config())?;
    }
    let flat = x_pair.clone().reshape(&[b * n, d])?;
    if b == 1 {
        let out = block_forward_single(&flat, layer, base, None, kv, ledger)?;
        return out.reshape(&[1, n, d]);
    }
    if phase == Phase::Prefill {
        return Err(Error::Mode("prefill runs the encoder branch alone".into()));
    }
    let lookup = adapter.map(|a| a as &dyn AdapterLookup<T>);
    let ops = LayerOps { base, layer };
    let start = kv.layer_len(layer);
    let h = tensor::rms_norm(&flat, &base.layer(layer).attn_norm, ops.eps())?;
    let q = ops.queries(&h, n, start, lookup, n, ledger)?;
    ops.write_kv(&h.slice_rows(0, n), start, None, kv, ledger)?;
    let view = kv.view(layer, ledger);
    let q_cat = concat_heads(&q, n)?;
    let attn = split_heads(&ops.attend(&q_cat, &view, start, ledger)?, n)?;
    ops.finish(&flat, &attn, lookup, n, ledger)?.reshape(&[2, n, d])
}

/// Encoder and decoder computed as two separate passes over the base
/// weights. The KV view of the layer is loaded once and attended by both.
///
/// Returns the next encoder and decoder hidden states.
pub fn block_forward_two_pass<T: Scalar>(
    x_enc: &Tensor<T>,
    x_dec: &Tensor<T>,
    layer: usize,
    base: &BaseWeights<T>,
    adapter: Option<&AdapterSet<T>>,
    kv: &mut KvCacheTensor<T>,
    ledger: &mut StepLedger,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_layer(base, layer)?;
    let lookup = adapter.map(|a| a as &dyn AdapterLookup<T>);
    let ops = LayerOps { base, layer };
    let n = x_enc.rows();
    let start = kv.layer_len(layer);
    let norm = &base.layer(layer).attn_norm;

    let h0 = tensor::rms_norm(x_enc, norm, ops.eps())?;
    let q0 = ops.queries(&h0, n, start, None, 0, ledger)?;
    ops.write_kv(&h0, start, None, kv, ledger)?;
    let view = kv.view(layer, ledger);
    let a0 = ops.attend(&q0, &view, start, ledger)?;
    let next_enc = ops.finish(x_enc, &a0, None, 0, ledger)?;

    let h1 = tensor::rms_norm(x_dec, norm, ops.eps())?;
    let q1 = ops.queries(&h1, n, start, lookup, 0, ledger)?;
    let a1 = ops.attend(&q1, &view, start, ledger)?;
    let next_dec = ops.finish(x_dec, &a1, lookup, 0, ledger)?;
    Ok((next_enc, next_dec))
}

/// `[2n, w]` stacked branches to `[n, 2w]` rows `[q0_i | q1_i]`.
fn concat_heads<T: Scalar>(q: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let w = q.last_dim();
    let mut data = Vec::with_capacity(q.len());
    for i in 0..n {
        data.extend_from_slice(q.row(i));
        data.extend_from_slice(q.row(n + i));
    }
    Tensor::new(vec![n, 2 * w], data)
}

fn split_heads<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let w = x.last_dim() / 2;
    let mut data = Vec::with_capacity(x.len());
    for b in 0..2 {
        for i in 0..n {
            data.extend_from_slice(&x.row(i)[b * w..(b + 1) * w]);
        }
    }
    Tensor::new(vec![2 * n, w], data)
}

/// Final norm and LM head over the rows of `x` (`[n, d]`).
pub fn lm_logits<T: Scalar>(x: &Tensor<T>, base: &BaseWeights<T>, ledger: &mut StepLedger) -> Result<Tensor<T>> {
    let h = tensor::rms_norm(x, base.final_norm(), T::from_f64(base.config().rms_eps))?;
    ledger.record_weight_read(WeightId::global(WeightKind::LmHead), weight_bytes(base.lm_head()));
    tensor::matmul(&h, base.lm_head())
}

/// Embedding rows for `tokens`, counted as one read of the table.
pub fn embed<T: Scalar>(tokens: &[usize], base: &BaseWeights<T>, ledger: &mut StepLedger) -> Result<Tensor<T>> {
    let table = base.embed();
    let vocab = table.shape()[0];
    let mut data = Vec::with_capacity(tokens.len() * base.config().hidden);
    for &t in tokens {
        if t >= vocab {
            return Err(Error::Index {
                what: "vocabulary",
                index: t,
                size: vocab,
            });
        }
        data.extend_from_slice(table.row(t));
    }
    ledger.record_weight_read(WeightId::global(WeightKind::Embed), weight_bytes(table));
    Tensor::new(vec![tokens.len(), base.config().hidden], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelConfig, BaseWeights<f32>, AdapterSet<f32>) {
        let c = ModelConfig::tiny();
        let base = BaseWeights::init(&c, 3).unwrap();
        let ad = AdapterSet::random(&c, "t", 4, 8.0, 5, 0.2).unwrap();
        (c, base, ad)
    }

    fn prefilled(c: &ModelConfig, base: &BaseWeights<f32>, n: usize) -> (KvCacheTensor<f32>, Tensor<f32>) {
        let mut kv = KvCacheTensor::new(c);
        let mut led = StepLedger::new();
        let tokens: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % c.vocab_size).collect();
        let mut x = embed(&tokens, base, &mut led).unwrap();
        for l in 0..c.num_layers {
            x = block_forward_single(&x, l, base, None, &mut kv, &mut led).unwrap();
        }
        (kv, x)
    }

    #[test]
    fn icarus_linear_zero_adapter_and_no_adapter() {
        let (c, base, _) = setup();
        let zero = AdapterSet::<f32>::init(&c, "z", 4, 8.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = Tensor::<f32>::randn(&[1, c.hidden], 1.0, &mut rng);
        let pair = Tensor::concat_rows(&[&row, &row])
            .unwrap()
            .reshape(&[2, 1, c.hidden])
            .unwrap();
        let w = &base.layer(0).wq;
        let id = WeightId::layer(0, WeightKind::Q);
        let mut led = StepLedger::new();
        let out = icarus_linear(&pair, w, id, Some(&zero.layers()[0].q), &mut led).unwrap();
        assert_eq!(out.shape(), &[2, 1, c.q_width()]);
        assert_eq!(out.row(0), out.row(1));
        let plain = icarus_linear(&pair, w, id, None, &mut led).unwrap();
        let oracle = tensor::matmul(&row, w).unwrap();
        assert_eq!(plain.row(0), oracle.data());
        assert_eq!(plain.row(1), oracle.data());
        assert_eq!(led.weight_reads(id), 2);
    }

    #[test]
    fn icarus_linear_adds_adapter_to_branch_one_only() {
        let (c, base, ad) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[2, 1, c.hidden], 1.0, &mut rng);
        let w = &base.layer(1).w_up;
        let a = &ad.layers()[1].up;
        let mut led = StepLedger::new();
        let out = icarus_linear(&x, w, WeightId::layer(1, WeightKind::Up), Some(a), &mut led).unwrap();
        assert_eq!(led.param_read_events(), 1);
        let x0 = x.clone().reshape(&[2, c.hidden]).unwrap().slice_rows(0, 1);
        let x1 = x.clone().reshape(&[2, c.hidden]).unwrap().slice_rows(1, 2);
        assert_eq!(out.row(0), tensor::matmul(&x0, w).unwrap().data());
        // two-step oracle: x W + s * ((x A) B), computed in f64
        let xa: Vec<f64> = (0..a.a().shape()[1])
            .map(|j| {
                (0..c.hidden)
                    .map(|i| x1.data()[i] as f64 * a.a().data()[i * a.a().shape()[1] + j] as f64)
                    .sum()
            })
            .collect();
        for o in 0..c.ffn_dim {
            let base_term: f64 = (0..c.hidden)
                .map(|i| x1.data()[i] as f64 * w.data()[i * c.ffn_dim + o] as f64)
                .sum();
            let delta: f64 = xa
                .iter()
                .enumerate()
                .map(|(j, v)| v * a.b().data()[j * c.ffn_dim + o] as f64)
                .sum();
            let want = base_term + a.scaling() as f64 * delta;
            assert!((out.row(1)[o] as f64 - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
        let bad = Tensor::<f32>::zeros(&[c.hidden, 3]);
        assert!(matches!(
            icarus_linear(&x, &bad, WeightId::layer(0, WeightKind::Up), Some(a), &mut led),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_rejects_wrong_head_count_and_empty_cache() {
        let (c, base, _) = setup();
        let (kv, _) = prefilled(&c, &base, 3);
        let mut led = StepLedger::new();
        let view = kv.view(0, &mut led);
        let q = Tensor::<f32>::zeros(&[1, 3 * c.head_dim]);
        assert!(matches!(layer_attention(&q, &view, &c, 2), Err(Error::Mode(_))));
        let empty = KvCacheTensor::<f32>::new(&c);
        let q = Tensor::<f32>::zeros(&[1, c.q_width()]);
        assert!(matches!(
            layer_attention(&q, &empty.view(0, &mut led), &c, 0),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn attention_over_one_position_returns_value() {
        let (c, base, _) = setup();
        let (kv, _) = prefilled(&c, &base, 1);
        let mut led = StepLedger::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::<f32>::randn(&[1, 2 * c.q_width()], 3.0, &mut rng);
        let out = layer_attention(&q, &kv.view(0, &mut led), &c, 0).unwrap();
        let v = kv.values(0);
        let layout = c.attention_layout(2);
        for h in 0..layout.query_heads {
            let g = layout.kv_head(h);
            assert_eq!(
                &out.data()[h * c.head_dim..(h + 1) * c.head_dim],
                &v[g * c.head_dim..(g + 1) * c.head_dim]
            );
        }
    }

    #[test]
    fn fused_heads_equal_two_separate_calls() {
        let (c, base, _) = setup();
        let (kv, _) = prefilled(&c, &base, 5);
        let mut led = StepLedger::new();
        let view = kv.view(1, &mut led);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q0 = Tensor::<f32>::randn(&[1, c.q_width()], 1.0, &mut rng);
        let q1 = Tensor::<f32>::randn(&[1, c.q_width()], 1.0, &mut rng);
        let stacked = Tensor::concat_rows(&[&q0, &q1]).unwrap();
        let fused = layer_attention(&concat_heads(&stacked, 1).unwrap(), &view, &c, 4).unwrap();
        let a0 = layer_attention(&q0, &view, &c, 4).unwrap();
        let a1 = layer_attention(&q1, &view, &c, 4).unwrap();
        let split = split_heads(&fused, 1).unwrap();
        for (got, want) in split.data().iter().zip(a0.data().iter().chain(a1.data())) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn grouping_equals_replicated_heads() {
        let grouped = ModelConfig::tiny();
        let full = ModelConfig {
            num_kv_heads: grouped.num_query_heads,
            ..grouped.clone()
        };
        let (kv, _) = prefilled(&grouped, &BaseWeights::init(&grouped, 8).unwrap(), 4);
        let group = grouped.num_query_heads / grouped.num_kv_heads;
        let dk = grouped.head_dim;
        let expand = |src: &[f32]| -> Vec<f32> {
            src.chunks(grouped.kv_width())
                .flat_map(|row| {
                    (0..full.num_kv_heads).flat_map(move |h| row[(h / group) * dk..(h / group + 1) * dk].to_vec())
                })
                .collect()
        };
        let (k, v) = (expand(kv.keys(0)), expand(kv.values(0)));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = Tensor::<f32>::randn(&[1, grouped.q_width()], 1.0, &mut rng);
        let mut led = StepLedger::new();
        let a = layer_attention(&q, &kv.view(0, &mut led), &grouped, 3).unwrap();
        let view = KvView {
            keys: &k,
            values: &v,
            len: 4,
        };
        let b = layer_attention(&q, &view, &full, 3).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn prefill_and_decode_grow_cache() {
        let (c, base, ad) = setup();
        let (mut kv, x) = prefilled(&c, &base, 6);
        assert_eq!(kv.len(), 6);
        let _ = x;
        let mut led = StepLedger::new();
        let row = embed(&[3], &base, &mut led).unwrap();
        let pair = Tensor::concat_rows(&[&row, &row])
            .unwrap()
            .reshape(&[2, 1, c.hidden])
            .unwrap();
        let mut y = pair;
        for l in 0..c.num_layers {
            y = block_forward(&y, l, &base, Some(&ad), &mut kv, Phase::Decode, &mut led).unwrap();
        }
        assert_eq!(kv.len(), 7);
        assert!(matches!(
            block_forward(&y, 0, &base, Some(&ad), &mut kv, Phase::Prefill, &mut led),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn branch_zero_matches_plain_base_bitwise() {
        let (c, base, ad) = setup();
        let (mut kv_pair, _) = prefilled(&c, &base, 4);
        let mut kv_base = kv_pair.clone();
        let mut led = StepLedger::new();
        let row = embed(&[11], &base, &mut led).unwrap();
        let mut pair = Tensor::concat_rows(&[&row, &row])
            .unwrap()
            .reshape(&[2, 1, c.hidden])
            .unwrap();
        let mut single = row.reshape(&[1, 1, c.hidden]).unwrap();
        for l in 0..c.num_layers {
            pair = block_forward(&pair, l, &base, Some(&ad), &mut kv_pair, Phase::Decode, &mut led).unwrap();
            single = block_forward(&single, l, &base, None, &mut kv_base, Phase::Decode, &mut led).unwrap();
            assert_eq!(pair.row(0), single.row(0));
            assert_ne!(pair.row(1), single.row(0));
        }
        assert!(kv_pair.bitwise_eq(&kv_base));
    }
}
