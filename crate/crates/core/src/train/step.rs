use crate::error::{Error, Result};
use crate::model::{AdapterLookup, AdapterSet, BaseWeights, ConventionalAdapters, KvCacheTensor, WeightKind};
use crate::runtime::GenerationSession;
use crate::tensor::{GradTape, Gradients, Scalar, Tensor, Var};

use super::optim::AdamW;

/// Adapter sets the trainer can optimise.
pub trait Trainable<T: Scalar>: AdapterLookup<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;
    fn num_layers(&self) -> usize;
}

impl<T: Scalar> Trainable<T> for AdapterSet<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut()
    }
    fn num_layers(&self) -> usize {
        AdapterSet::num_layers(self)
    }
}

impl<T: Scalar> Trainable<T> for ConventionalAdapters<T> {
    fn params(&self) -> Vec<(String, &Tensor<T>)> {
        self.named_tensors()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors_mut()
    }
    fn num_layers(&self) -> usize {
        self.decoder().num_layers()
    }
}

/// Loss and gradients of one batch.
#[derive(Debug, Clone)]
pub struct GradReport<T: Scalar> {
    pub loss: f64,
    /// One gradient per adapter tensor, in [`Trainable::params`] order.
    pub adapter: Vec<(String, Tensor<T>)>,
    /// One gradient per base tensor: all zeros unless something leaked.
    pub base: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> GradReport<T> {
    pub fn adapter_grads(&self) -> Vec<Tensor<T>> {
        self.adapter.iter().map(|(_, g)| g.clone()).collect()
    }
}

/// Teacher-forced forward on a tape.
struct TapeForward<'a, T: Scalar> {
    tape: GradTape<T>,
    base: &'a BaseWeights<T>,
    base_vars: Vec<(String, Var)>,
    adapter_vars: Vec<Var>,
    lookup: Vec<Option<[(Var, Var); 2]>>,
}

const ADAPTED: [WeightKind; 7] = [
    WeightKind::Q,
    WeightKind::K,
    WeightKind::V,
    WeightKind::O,
    WeightKind::Gate,
    WeightKind::Up,
    WeightKind::Down,
];

fn slot(layer: usize, kind: WeightKind) -> usize {
    layer * ADAPTED.len() + ADAPTED.iter().position(|&k| k == kind).expect("adapted kind")
}

impl<'a, T: Scalar> TapeForward<'a, T> {
    fn new<A: Trainable<T> + ?Sized>(base: &'a BaseWeights<T>, adapters: &A) -> Self {
        let mut tape = GradTape::new();
        let base_vars = base
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, tape.leaf(t.clone(), false)))
            .collect();
        let params = adapters.params();
        let adapter_vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf((*t).clone(), true)).collect();
        // map (layer, kind) to the (A, B) leaves by tensor identity
        let layers = base.config().num_layers;
        let mut lookup = vec![None; layers * ADAPTED.len()];
        for l in 0..layers {
            for kind in ADAPTED {
                if let Some(a) = adapters.adapter(l, kind) {
                    let find = |t: &Tensor<T>| {
                        params
                            .iter()
                            .position(|(_, p)| std::ptr::eq(*p, t))
                            .map(|i| adapter_vars[i])
                            .expect("adapter tensor is a parameter")
                    };
                    let s = tape.constant(Tensor::vector(vec![a.scaling()]));
                    lookup[slot(l, kind)] = Some([(find(a.a()), find(a.b())), (s, s)]);
                }
            }
        }
        Self {
            tape,
            base,
            base_vars,
            adapter_vars,
            lookup,
        }
    }

    fn base_var(&self, name: &str) -> Var {
        self.base_vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .expect("base tensor on tape")
    }

    fn linear(&mut self, x: Var, layer: usize, kind: WeightKind) -> Result<Var> {
        let w = self.base_var(&format!("layers.{layer}.{}", kind.name()));
        let y = self.tape.matmul(x, w)?;
        let Some([(a, b), (s, _)]) = self.lookup[slot(layer, kind)] else {
            return Ok(y);
        };
        let xa = self.tape.matmul(x, a)?;
        let xab = self.tape.matmul(xa, b)?;
        let scaling = self.tape.value(s).data()[0];
        let delta = self.tape.scale(xab, scaling);
        self.tape.add(y, delta)
    }

    /// Mean next-token loss of one sequence. `kv` carries precomputed
    /// encoder keys and values; without it K/V are computed on the tape.
    fn sequence_loss(&mut self, seq: &[usize], kv: Option<&KvCacheTensor<T>>) -> Result<Var> {
        let c = self.base.config().clone();
        let (inputs, targets) = (&seq[..seq.len() - 1], &seq[1..]);
        let n = inputs.len();
        let eps = T::from_f64(c.rms_eps);
        let layout = c.attention_layout(1);
        let embed = self.base_var("embed");
        let mut x = self.tape.embedding(embed, inputs)?;
        for l in 0..c.num_layers {
            let norm = self.base_var(&format!("layers.{l}.attn_norm"));
            let h = self.tape.rms_norm(x, norm, eps)?;
            let q = self.linear(h, l, WeightKind::Q)?;
            let q = self.tape.rope(q, 0, c.head_dim, c.rope_theta)?;
            let (k, v) = match kv {
                Some(cache) => {
                    let w = cache.kv_width();
                    let k = self.tape.constant(Tensor::new(vec![n, w], cache.keys(l).to_vec())?);
                    let v = self.tape.constant(Tensor::new(vec![n, w], cache.values(l).to_vec())?);
                    (k, v)
                }
                None => {
                    let k = self.linear(h, l, WeightKind::K)?;
                    let k = self.tape.rope(k, 0, c.head_dim, c.rope_theta)?;
                    (k, self.linear(h, l, WeightKind::V)?)
                }
            };
            let a = self.tape.attention(q, k, v, 0, layout)?;
            let o = self.linear(a, l, WeightKind::O)?;
            x = self.tape.add(x, o)?;
            let norm = self.base_var(&format!("layers.{l}.ffn_norm"));
            let h = self.tape.rms_norm(x, norm, eps)?;
            let g = self.linear(h, l, WeightKind::Gate)?;
            let u = self.linear(h, l, WeightKind::Up)?;
            let g = self.tape.silu(g);
            let m = self.tape.mul(g, u)?;
            let d = self.linear(m, l, WeightKind::Down)?;
            x = self.tape.add(x, d)?;
        }
        let fnorm = self.base_var("final_norm");
        let h = self.tape.rms_norm(x, fnorm, eps)?;
        let head = self.base_var("lm_head");
        let logits = self.tape.matmul(h, head)?;
        self.tape.cross_entropy_mean(logits, targets)
    }

    fn batch_loss(&mut self, batch: &[Vec<usize>], kvs: Option<&[KvCacheTensor<T>]>) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (i, seq) in batch.iter().enumerate() {
            let l = self.sequence_loss(seq, kvs.map(|k| &k[i]))?;
            total = Some(match total {
                Some(t) => self.tape.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
        Ok(self.tape.scale(total, T::from_f64(1.0 / batch.len() as f64)))
    }

    fn report(&self, loss: Var, grads: &Gradients<T>, names: Vec<String>) -> Result<GradReport<T>> {
        let mut base = Vec::with_capacity(self.base_vars.len());
        for (name, v) in &self.base_vars {
            let zero = Tensor::zeros(self.tape.value(*v).shape());
            match grads.get(*v) {
                Some(g) if g.max_abs() != T::zero() => {
                    return Err(Error::ContractViolation(format!(
                        "gradient reached frozen base tensor {name}"
                    )))
                }
                _ => base.push((name.clone(), zero)),
            }
        }
        let adapter = names
            .into_iter()
            .zip(&self.adapter_vars)
            .map(|(n, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(*v).shape()));
                (n, g)
            })
            .collect();
        Ok(GradReport {
            loss: self.tape.value(loss).data()[0].as_f64(),
            adapter,
            base,
        })
    }
}

fn check_batch<T: Scalar>(base: &BaseWeights<T>, batch: &[Vec<usize>]) -> Result<()> {
    if batch.is_empty() || batch.iter().any(|s| s.len() < 2) {
        return Err(Error::Config("every batch item needs at least two tokens".into()));
    }
    let vocab = base.config().vocab_size;
    if let Some(&t) = batch.iter().flatten().find(|&&t| t >= vocab) {
        return Err(Error::Index {
            what: "vocabulary",
            index: t,
            size: vocab,
        });
    }
    Ok(())
}

/// Encoder K/V of each input sequence, produced by the base model's own
/// prefill.
pub fn encoder_kv<T: Scalar>(base: &BaseWeights<T>, batch: &[Vec<usize>]) -> Result<Vec<KvCacheTensor<T>>> {
    batch
        .iter()
        .map(|seq| {
            let mut s = GenerationSession::base(base, seq[..seq.len() - 1].to_vec());
            s.prefill()?;
            Ok(s.into_cache())
        })
        .collect()
}

/// ICaRus loss and gradients: every key and value comes from the frozen
/// base model, the logits from the adapter branch.
pub fn icarus_loss_and_grads<T: Scalar>(
    base: &BaseWeights<T>,
    adapters: &AdapterSet<T>,
    batch: &[Vec<usize>],
) -> Result<GradReport<T>> {
    check_batch(base, batch)?;
    adapters.check_against(base.config())?;
    let kvs = encoder_kv(base, batch)?;
    let mut f = TapeForward::new(base, adapters);
    let loss = f.batch_loss(batch, Some(&kvs))?;
    let grads = f.tape.backward(loss)?;
    f.report(loss, &grads, adapters.params().into_iter().map(|(n, _)| n).collect())
}

/// Single-branch loss and gradients of a conventionally adapted model.
pub fn conventional_loss_and_grads<T: Scalar>(
    base: &BaseWeights<T>,
    adapters: &ConventionalAdapters<T>,
    batch: &[Vec<usize>],
) -> Result<GradReport<T>> {
    check_batch(base, batch)?;
    adapters.decoder().check_against(base.config())?;
    let mut f = TapeForward::new(base, adapters);
    let loss = f.batch_loss(batch, None)?;
    let grads = f.tape.backward(loss)?;
    f.report(loss, &grads, adapters.params().into_iter().map(|(n, _)| n).collect())
}

/// Loss only, for finite-difference probes.
pub fn icarus_loss<T: Scalar>(base: &BaseWeights<T>, adapters: &AdapterSet<T>, batch: &[Vec<usize>]) -> Result<f64> {
    check_batch(base, batch)?;
    let kvs = encoder_kv(base, batch)?;
    let mut f = TapeForward::new(base, adapters);
    let loss = f.batch_loss(batch, Some(&kvs))?;
    Ok(f.tape.value(loss).data()[0].as_f64())
}

pub fn conventional_loss<T: Scalar>(
    base: &BaseWeights<T>,
    adapters: &ConventionalAdapters<T>,
    batch: &[Vec<usize>],
) -> Result<f64> {
    check_batch(base, batch)?;
    let mut f = TapeForward::new(base, adapters);
    let loss = f.batch_loss(batch, None)?;
    Ok(f.tape.value(loss).data()[0].as_f64())
}

fn apply<T: Scalar, A: Trainable<T>>(
    base: &BaseWeights<T>,
    adapters: &mut A,
    report: &GradReport<T>,
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    if !report.loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", report.loss)));
    }
    opt.step(adapters.params_mut(), &report.adapter_grads(), lr)?;
    base.verify_frozen()?;
    Ok(report.loss)
}

/// One optimisation step of a task decoder; returns the pre-update loss.
pub fn icarus_train_step<T: Scalar>(
    base: &BaseWeights<T>,
    adapters: &mut AdapterSet<T>,
    batch: &[Vec<usize>],
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let report = icarus_loss_and_grads(base, adapters, batch)?;
    apply(base, adapters, &report, opt, lr)
}

/// One optimisation step of a conventionally adapted model.
pub fn conventional_train_step<T: Scalar>(
    base: &BaseWeights<T>,
    adapters: &mut ConventionalAdapters<T>,
    batch: &[Vec<usize>],
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let report = conventional_loss_and_grads(base, adapters, batch)?;
    apply(base, adapters, &report, opt, lr)
}
