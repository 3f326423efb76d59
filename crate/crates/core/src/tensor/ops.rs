use super::{Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Matrix product of `[m, k]` and `[k, n]`.
///
/// Each output entry is accumulated over `k` from left to right starting at
/// zero, exactly like the textbook triple loop.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2("matmul")?;
    let [k2, n] = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Elementwise product.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| x * s).collect())
}

/// Softmax over the trailing dimension with max-subtraction.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if c == 0 || x.shape().is_empty() {
        return Err(Error::Dimension {
            op: "softmax_lastdim",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        softmax_into(x.row(r), &mut out);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let start = out.len();
    let mut sum = T::zero();
    for &v in row {
        let e = (v - max).exp();
        sum = sum + e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / sum;
    }
}

/// Root-mean-square normalisation of every row, scaled by `gain`.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.last_dim();
    if gain.len() != d {
        return Err(Error::Dimension {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let inv = rms_inverse(row, eps);
        out.extend(row.iter().zip(gain.data()).map(|(&v, &g)| v * inv * g));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn rms_inverse<T: Scalar>(row: &[T], eps: T) -> T {
    let mut ss = T::zero();
    for &v in row {
        ss = ss + v * v;
    }
    let ms = ss / T::from_f64(row.len() as f64);
    T::one() / (ms + eps).sqrt()
}

fn rope_check(head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary embedding needs an even head dimension, got {head_dim}"
        )));
    }
    Ok(())
}

/// `(cos, sin)` of the rotation applied to pair `pair` at `position`.
pub(crate) fn rope_angle(position: usize, pair: usize, head_dim: usize, theta: f64) -> (f64, f64) {
    let freq = theta.powf(-((2 * pair) as f64) / head_dim as f64);
    let angle = position as f64 * freq;
    (angle.cos(), angle.sin())
}

fn rotate_head<T: Scalar>(head: &mut [T], position: usize, theta: f64, inverse: bool) {
    let dk = head.len();
    for p in 0..dk / 2 {
        let (c, s) = rope_angle(position, p, dk, theta);
        let (c, s) = (T::from_f64(c), T::from_f64(if inverse { -s } else { s }));
        let (x0, x1) = (head[2 * p], head[2 * p + 1]);
        head[2 * p] = x0 * c - x1 * s;
        head[2 * p + 1] = x0 * s + x1 * c;
    }
}

/// Rotary position embedding of every head vector in `x` at one position.
///
/// The trailing dimension is the head dimension; adjacent pairs
/// `(2i, 2i+1)` rotate by `position * theta^(-2i/head_dim)`.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, position: usize, theta: f64) -> Result<Tensor<T>> {
    let dk = x.last_dim();
    rope_check(dk)?;
    let mut data = x.data().to_vec();
    for head in data.chunks_mut(dk) {
        rotate_head(head, position, theta, false);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// Rotary embedding of a `[n, heads * head_dim]` block whose row `i` sits at
/// absolute position `start + i`. `inverse` applies the transpose rotation.
pub fn rope_rows<T: Scalar>(
    x: &Tensor<T>,
    start: usize,
    head_dim: usize,
    theta: f64,
    inverse: bool,
) -> Result<Tensor<T>> {
    rope_check(head_dim)?;
    let width = x.last_dim();
    if !width.is_multiple_of(head_dim) {
        return Err(Error::Dimension {
            op: "rope_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![head_dim],
        });
    }
    let mut data = x.data().to_vec();
    for (i, row) in data.chunks_mut(width).enumerate() {
        for head in row.chunks_mut(head_dim) {
            rotate_head(head, start + i, theta, inverse);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `x * sigmoid(x)` elementwise.
pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| v * sigmoid(v)).collect())
}

/// `-log softmax(logits)[target]` for a single logit vector.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "vocabulary",
            index: target,
            size: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[target])
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for &v in row {
        sum = sum + (v - max).exp();
    }
    max + sum.ln()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Head arrangement for a grouped-query attention call.
///
/// `branch_heads` query heads share the `kv_heads` key/value heads in equal
/// groups. A call may carry `query_heads = k * branch_heads` heads (two
/// branches concatenated along the head axis in fused decoding); head `h`
/// reads key/value head `(h % branch_heads) / (branch_heads / kv_heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub query_heads: usize,
    pub branch_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionLayout {
    pub fn kv_head(&self, h: usize) -> usize {
        (h % self.branch_heads) / (self.branch_heads / self.kv_heads)
    }

    pub(crate) fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

/// Attention probabilities of one query head over keys `0..count`.
pub(crate) fn attention_probs<T: Scalar>(
    q_head: &[T],
    keys: &[T],
    count: usize,
    kv_head: usize,
    layout: &AttentionLayout,
) -> Vec<T> {
    let dk = layout.head_dim;
    let width = layout.kv_width();
    let scale = T::one() / T::from_f64(dk as f64).sqrt();
    let mut scores = Vec::with_capacity(count);
    for j in 0..count {
        let key = &keys[j * width + kv_head * dk..j * width + (kv_head + 1) * dk];
        let mut dot = T::zero();
        for (&a, &b) in q_head.iter().zip(key) {
            dot = dot + a * b;
        }
        scores.push(dot * scale);
    }
    let mut probs = Vec::with_capacity(count);
    softmax_into(&scores, &mut probs);
    probs
}

/// Causal grouped-query attention.
///
/// `q` is `[n, query_heads * head_dim]`; `keys` and `values` are flat
/// `[m, kv_heads * head_dim]` buffers holding `m` positions. Query row `i`
/// sits at absolute position `q_start + i` and attends to keys
/// `0..=q_start + i`, which must all be present.
pub fn gqa_attention<T: Scalar>(
    q: &Tensor<T>,
    keys: &[T],
    values: &[T],
    q_start: usize,
    layout: &AttentionLayout,
) -> Result<Tensor<T>> {
    let dk = layout.head_dim;
    let width = layout.kv_width();
    if layout.kv_heads == 0
        || !layout.branch_heads.is_multiple_of(layout.kv_heads)
        || !layout.query_heads.is_multiple_of(layout.branch_heads)
    {
        return Err(Error::Config(format!("bad attention layout {layout:?}")));
    }
    if q.last_dim() != layout.query_heads * dk || keys.len() != values.len() {
        return Err(Error::Dimension {
            op: "gqa_attention",
            lhs: q.shape().to_vec(),
            rhs: vec![keys.len() / width.max(1), width],
        });
    }
    let m = keys.len() / width;
    let n = q.rows();
    if n > 0 && q_start + n > m {
        return Err(Error::Index {
            what: "kv positions",
            index: q_start + n - 1,
            size: m,
        });
    }
    let mut out = vec![T::zero(); n * layout.query_heads * dk];
    for i in 0..n {
        let count = q_start + i + 1;
        let qrow = q.row(i);
        for h in 0..layout.query_heads {
            let kvh = layout.kv_head(h);
            let probs = attention_probs(&qrow[h * dk..(h + 1) * dk], keys, count, kvh, layout);
            let o = &mut out[(i * layout.query_heads + h) * dk..(i * layout.query_heads + h + 1) * dk];
            for (j, &p) in probs.iter().enumerate() {
                let val = &values[j * width + kvh * dk..j * width + (kvh + 1) * dk];
                for (acc, &v) in o.iter_mut().zip(val) {
                    *acc = *acc + p * v;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, layout.query_heads * dk], out))
}
