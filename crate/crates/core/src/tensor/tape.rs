//! Reverse-mode differentiation over a recorded operation list.
//!
//! Forward values are produced by the same kernels the inference path uses,
//! so a value on the tape is bit-identical to the one computed eagerly.
//! Leaves are either trainable or frozen; gradients are only propagated
//! through nodes that depend on a trainable leaf, and frozen leaves never get
//! a gradient buffer.

use super::ops::{self, attention_probs, rms_inverse, sigmoid, softmax_into, AttentionLayout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RmsNorm {
        x: Var,
        gain: Var,
        eps: T,
    },
    Rope {
        x: Var,
        start: usize,
        head_dim: usize,
        theta: f64,
    },
    Silu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_start: usize,
        layout: AttentionLayout,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropyMean {
        logits: Var,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    trainable: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct GradTape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`GradTape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when no buffer was ever allocated for it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn has_buffer(&self, var: Var) -> bool {
        self.get(var).is_some()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an input. Trainable leaves receive gradients; frozen ones never do.
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        let v = self.push(value, Op::Leaf, trainable);
        self.nodes[v.0].trainable = trainable;
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = ops::scale(self.value(a), s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let value = ops::rms_norm(self.value(x), self.value(gain), eps)?;
        let rg = self.rg(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, eps }, rg))
    }

    pub fn rope(&mut self, x: Var, start: usize, head_dim: usize, theta: f64) -> Result<Var> {
        let value = ops::rope_rows(self.value(x), start, head_dim, theta, false)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                start,
                head_dim,
                theta,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = ops::silu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Silu(x), rg)
    }

    /// Causal grouped-query attention; see [`ops::gqa_attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, q_start: usize, layout: AttentionLayout) -> Result<Var> {
        let value = ops::gqa_attention(
            self.value(q),
            self.value(k).data(),
            self.value(v).data(),
            q_start,
            &layout,
        )?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                q_start,
                layout,
            },
            rg,
        ))
    }

    /// Gather rows `ids` of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [vocab, d] = t.dims2("embedding")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: id,
                    size: vocab,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], data);
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy of `[n, vocab]` logits against `targets`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != targets.len() || targets.is_empty() {
            return Err(Error::Dimension {
                op: "cross_entropy_mean",
                lhs: l.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            total = total + ops::cross_entropy(l.row(r), t)?;
        }
        let value = Tensor::vector(vec![total / T::from_f64(targets.len() as f64)]);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Propagate d(loss)/d(·) back through the tape.
    ///
    /// `loss` must hold a single element. Every trainable leaf ends up with a
    /// buffer (zeros if it does not influence the loss); frozen leaves and
    /// nodes that do not depend on a trainable leaf never get one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(self.value(loss).shape().to_vec(), vec![T::one()]));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            } else if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        let slot = &mut grads[v.0];
        *slot = Some(match slot.take() {
            None => g,
            Some(prev) => ops::add(&prev, &g)?,
        });
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    let bt = self.value(*b).transpose()?;
                    self.accumulate(grads, *a, ops::matmul(g, &bt)?)?;
                }
                if self.requires_grad(*b) {
                    let at = self.value(*a).transpose()?;
                    self.accumulate(grads, *b, ops::matmul(&at, g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, ops::mul(g, self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, ops::mul(g, self.value(*a))?)?;
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, ops::scale(g, *s))?,
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).data();
                let d = xv.last_dim();
                let mut dx = Vec::with_capacity(xv.len());
                let mut dgain = vec![T::zero(); d];
                let dn = T::from_f64(d as f64);
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let gr = g.row(r);
                    let inv = rms_inverse(row, *eps);
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot = dot + gr[j] * gv[j] * row[j];
                        dgain[j] = dgain[j] + gr[j] * row[j] * inv;
                    }
                    let coef = inv * inv * inv * dot / dn;
                    dx.extend((0..d).map(|j| inv * gv[j] * gr[j] - coef * row[j]));
                }
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx))?;
                }
                if self.requires_grad(*gain) {
                    let shape = self.value(*gain).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::from_parts(shape, dgain))?;
                }
            }
            Op::Rope {
                x,
                start,
                head_dim,
                theta,
            } => {
                let back = ops::rope_rows(g, *start, *head_dim, *theta, true)?;
                self.accumulate(grads, *x, back)?;
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gy)| {
                        let s = sigmoid(v);
                        gy * (s + v * s * (T::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), data))?;
            }
            Op::Attention {
                q,
                k,
                v,
                q_start,
                layout,
            } => self.attention_backward(*q, *k, *v, *q_start, layout, g, grads)?,
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.last_dim();
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, &gv) in dt[id * d..(id + 1) * d].iter_mut().zip(g.row(r)) {
                        *acc = *acc + gv;
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt))?;
            }
            Op::CrossEntropyMean { logits, targets } => {
                let lv = self.value(*logits);
                let upstream = g.data()[0] / T::from_f64(targets.len() as f64);
                let mut dl = Vec::with_capacity(lv.len());
                for (r, &t) in targets.iter().enumerate() {
                    let start = dl.len();
                    softmax_into(lv.row(r), &mut dl);
                    dl[start + t] = dl[start + t] - T::one();
                    for x in &mut dl[start..] {
                        *x = *x * upstream;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), dl))?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        q_start: usize,
        layout: &AttentionLayout,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dk = layout.head_dim;
        let width = layout.kv_heads * dk;
        let qh = layout.query_heads;
        let scale = T::one() / T::from_f64(dk as f64).sqrt();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dkey = vec![T::zero(); kv.len()];
        let mut dval = vec![T::zero(); vv.len()];
        for i in 0..qv.rows() {
            let count = q_start + i + 1;
            for h in 0..qh {
                let kvh = layout.kv_head(h);
                let qoff = (i * qh + h) * dk;
                let qhead = &qv.data()[qoff..qoff + dk];
                let go = &g.data()[qoff..qoff + dk];
                let probs = attention_probs(qhead, kv.data(), count, kvh, layout);
                let mut dp = Vec::with_capacity(count);
                for (j, &p) in probs.iter().enumerate() {
                    let voff = j * width + kvh * dk;
                    let mut dot = T::zero();
                    for t in 0..dk {
                        dot = dot + go[t] * vv.data()[voff + t];
                        dval[voff + t] = dval[voff + t] + p * go[t];
                    }
                    dp.push(dot);
                }
                let mut mix = T::zero();
                for (&p, &d) in probs.iter().zip(&dp) {
                    mix = mix + p * d;
                }
                for (j, (&p, &d)) in probs.iter().zip(&dp).enumerate() {
                    let ds = p * (d - mix) * scale;
                    let koff = j * width + kvh * dk;
                    for t in 0..dk {
                        dq[qoff + t] = dq[qoff + t] + ds * kv.data()[koff + t];
                        dkey[koff + t] = dkey[koff + t] + ds * qhead[t];
                    }
                }
            }
        }
        if self.requires_grad(q) {
            self.accumulate(grads, q, Tensor::from_parts(qv.shape().to_vec(), dq))?;
        }
        if self.requires_grad(k) {
            self.accumulate(grads, k, Tensor::from_parts(kv.shape().to_vec(), dkey))?;
        }
        if self.requires_grad(v) {
            self.accumulate(grads, v, Tensor::from_parts(vv.shape().to_vec(), dval))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let num: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den = b.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        num / den
    }

    /// Check d(build)/d(input `which`) against central differences.
    fn check(inputs: Vec<Tensor<f64>>, which: usize, build: impl Fn(&mut GradTape<f64>, &[Var]) -> Var) {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), i == which))
            .collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(vars[which]).unwrap().clone();
        for (i, v) in vars.iter().enumerate() {
            assert_eq!(grads.has_buffer(*v), i == which);
        }
        let fd = finite_difference_grad(
            |p| {
                let mut t = GradTape::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, x)| t.constant(if i == which { p.clone() } else { x.clone() }))
                    .collect();
                let l = build(&mut t, &vs);
                Ok(t.value(l).data()[0])
            },
            &inputs[which],
            1e-4,
        )
        .unwrap();
        let err = rel_err(&analytic, &fd);
        assert!(err < 1e-4, "relative gradient error {err}");
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    #[test]
    fn matmul_and_cross_entropy_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[3, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 5], 1.0, &mut r);
        for which in 0..2 {
            check(vec![x.clone(), w.clone()], which, |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                t.cross_entropy_mean(y, &[1, 4, 0]).unwrap()
            });
        }
    }

    #[test]
    fn rms_norm_silu_mul_gradients() {
        let mut r = rng();
        let x = Tensor::randn(&[2, 6], 1.0, &mut r);
        let g = Tensor::randn(&[6], 1.0, &mut r);
        let m = Tensor::randn(&[2, 6], 1.0, &mut r);
        for which in 0..3 {
            check(vec![x.clone(), g.clone(), m.clone()], which, |t, v| {
                let n = t.rms_norm(v[0], v[1], 1e-5).unwrap();
                let s = t.silu(n);
                let p = t.mul(s, v[2]).unwrap();
                let p = t.scale(p, 0.7);
                t.cross_entropy_mean(p, &[5, 2]).unwrap()
            });
        }
    }

    #[test]
    fn attention_rope_embedding_gradients() {
        let mut r = rng();
        let layout = AttentionLayout {
            query_heads: 4,
            branch_heads: 4,
            kv_heads: 2,
            head_dim: 4,
        };
        let table = Tensor::randn(&[7, 16], 1.0, &mut r);
        let wk = Tensor::randn(&[16, 8], 0.5, &mut r);
        let wv = Tensor::randn(&[16, 8], 0.5, &mut r);
        let ids = [3usize, 1, 6, 2];
        for which in 0..3 {
            check(vec![table.clone(), wk.clone(), wv.clone()], which, |t, v| {
                let x = t.embedding(v[0], &ids).unwrap();
                let q = t.rope(x, 0, 4, 100.0).unwrap();
                let k = t.matmul(x, v[1]).unwrap();
                let k = t.rope(k, 0, 4, 100.0).unwrap();
                let val = t.matmul(x, v[2]).unwrap();
                let a = t.attention(q, k, val, 0, layout).unwrap();
                let a = t.add(a, x).unwrap();
                t.cross_entropy_mean(a, &[0, 9, 15, 4]).unwrap()
            });
        }
    }

    #[test]
    fn frozen_leaves_get_no_buffer_and_unused_trainables_get_zeros() {
        let mut tape = GradTape::<f64>::new();
        let frozen = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), false);
        let unused = tape.leaf(Tensor::vector(vec![3.0]), true);
        let used = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(), true);
        let s = tape.mul(frozen, used).unwrap();
        let loss = tape.cross_entropy_mean(s, &[1]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(!g.has_buffer(frozen));
        assert_eq!(g.get(unused).unwrap().data(), &[0.0]);
        assert!(g.get(used).unwrap().max_abs() > 0.0);
    }
}
