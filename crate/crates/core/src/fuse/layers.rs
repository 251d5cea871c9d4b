//! Dense, MLP, layer-norm and axial self-attention layers with hand-written
//! backward passes. All activations are row-major `rows × width`.

use rand::Rng;

use super::scalar::{gemm, Scalar};

fn uniform<F: Scalar, R: Rng>(rng: &mut R, len: usize, bound: f64) -> Vec<F> {
    (0..len).map(|_| F::of(rng.random_range(-bound..=bound))).collect()
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl<F: Scalar> Linear<F> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: vec![F::zero(); fan_in * fan_out],
            bias: vec![F::zero(); fan_out],
            fan_in,
            fan_out,
        }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) weights and biases.
    pub fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: uniform(rng, fan_in * fan_out, bound),
            bias: uniform(rng, fan_out, bound),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        let mut y = Vec::with_capacity(rows * self.fan_out);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias);
        }
        gemm(rows, self.fan_in, self.fan_out, x, false, &self.weight, false, &mut y, F::one());
        y
    }

    /// Accumulates parameter gradients into `grad`; returns `dx` when asked.
    pub fn backward(&self, x: &[F], dy: &[F], rows: usize, grad: &mut Linear<F>, need_dx: bool) -> Option<Vec<F>> {
        gemm(self.fan_in, rows, self.fan_out, x, true, dy, false, &mut grad.weight, F::one());
        for row in dy.chunks_exact(self.fan_out) {
            for (g, d) in grad.bias.iter_mut().zip(row) {
                *g += *d;
            }
        }
        need_dx.then(|| {
            let mut dx = vec![F::zero(); rows * self.fan_in];
            gemm(rows, self.fan_out, self.fan_in, dy, false, &self.weight, true, &mut dx, F::zero());
            dx
        })
    }
}

/// Two dense layers with a ReLU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<F> {
    pub hidden: Linear<F>,
    pub output: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    input: Vec<F>,
    activated: Vec<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn zeros(fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            hidden: Linear::zeros(fan_in, hidden),
            output: Linear::zeros(hidden, fan_out),
        }
    }

    pub fn init<R: Rng>(fan_in: usize, hidden: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(fan_in, hidden, rng),
            output: Linear::init(hidden, fan_out, rng),
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        self.forward_cached(x, rows).0
    }

    pub fn forward_cached(&self, x: &[F], rows: usize) -> (Vec<F>, MlpCache<F>) {
        let mut h = self.hidden.forward(x, rows);
        h.iter_mut().for_each(|v| *v = v.max(F::zero()));
        let y = self.output.forward(&h, rows);
        (
            y,
            MlpCache {
                input: x.to_vec(),
                activated: h,
            },
        )
    }

    /// Parameter gradients only; MLP inputs are data.
    pub fn backward(&self, cache: &MlpCache<F>, dy: &[F], rows: usize, grad: &mut Mlp<F>) {
        let mut dh = self
            .output
            .backward(&cache.activated, dy, rows, &mut grad.output, true)
            .unwrap();
        for (d, h) in dh.iter_mut().zip(&cache.activated) {
            if *h <= F::zero() {
                *d = F::zero();
            }
        }
        self.hidden.backward(&cache.input, &dh, rows, &mut grad.hidden, false);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Vec<F>,
    pub beta: Vec<F>,
    pub eps: F,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    normalized: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(width: usize, eps: f64) -> Self {
        Self {
            gamma: vec![F::one(); width],
            beta: vec![F::zero(); width],
            eps: F::of(eps),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: vec![F::zero(); self.gamma.len()],
            beta: vec![F::zero(); self.beta.len()],
            eps: self.eps,
        }
    }

    pub fn forward(&self, x: &[F]) -> (Vec<F>, LayerNormCache<F>) {
        let d = self.gamma.len();
        let inv_d = F::one() / F::of(d as f64);
        let rows = x.len() / d;
        let mut normalized = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean = row.iter().fold(F::zero(), |a, v| a + *v) * inv_d;
            let var = row.iter().fold(F::zero(), |a, v| a + (*v - mean) * (*v - mean)) * inv_d;
            let is = F::one() / (var + self.eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let n = (*v - mean) * is;
                normalized.push(n);
                y.push(n * self.gamma[j] + self.beta[j]);
            }
        }
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &[F], grad: &mut LayerNorm<F>) -> Vec<F> {
        let d = self.gamma.len();
        let inv_d = F::one() / F::of(d as f64);
        let mut dx = vec![F::zero(); dy.len()];
        let mut dn = vec![F::zero(); d];
        for (r, (dy_row, n_row)) in dy.chunks_exact(d).zip(cache.normalized.chunks_exact(d)).enumerate() {
            let mut sum_dn = F::zero();
            let mut sum_dn_n = F::zero();
            for j in 0..d {
                grad.gamma[j] += dy_row[j] * n_row[j];
                grad.beta[j] += dy_row[j];
                dn[j] = dy_row[j] * self.gamma[j];
                sum_dn += dn[j];
                sum_dn_n += dn[j] * n_row[j];
            }
            let is = cache.inv_std[r];
            for j in 0..d {
                dx[r * d + j] = is * (dn[j] - sum_dn * inv_d - n_row[j] * sum_dn_n * inv_d);
            }
        }
        dx
    }
}

/// Axis of the `N_elem × T × D` tensor that attention runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Element,
}

impl Axis {
    /// Row indices (into the flattened `N·T` rows) of every sequence along
    /// this axis; the other axis acts as the batch.
    pub fn sequences(self, elements: usize, frames: usize) -> Vec<Vec<usize>> {
        match self {
            Axis::Time => (0..elements)
                .map(|i| (0..frames).map(|t| i * frames + t).collect())
                .collect(),
            Axis::Element => (0..frames)
                .map(|t| (0..elements).map(|i| i * frames + t).collect())
                .collect(),
        }
    }
}

/// Pre-norm multi-head self-attention with a residual connection and no
/// feed-forward sublayer: `y = x + W_o·Attn(LN(x))` on valid rows, `y = x`
/// on masked rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AxialBlock<F> {
    pub norm: LayerNorm<F>,
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub heads: usize,
}

/// Softmax weights of one head over one sequence, restricted to its valid
/// positions (`rows` are flattened row indices).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<F> {
    pub rows: Vec<usize>,
    pub head: usize,
    /// `rows.len() × rows.len()`, query-major.
    pub weights: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct AxialCache<F> {
    norm: LayerNormCache<F>,
    normed: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    context: Vec<F>,
    pub weights: Vec<HeadWeights<F>>,
}

impl<F: Scalar> AxialBlock<F> {
    pub fn init<R: Rng>(dim: usize, heads: usize, eps: f64, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(dim, eps),
            query: Linear::init(dim, dim, rng),
            key: Linear::init(dim, dim, rng),
            value: Linear::init(dim, dim, rng),
            output: Linear::init(dim, dim, rng),
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.query.fan_in;
        Self {
            norm: self.norm.zeros_like(),
            query: Linear::zeros(d, d),
            key: Linear::zeros(d, d),
            value: Linear::zeros(d, d),
            output: Linear::zeros(d, d),
            heads: self.heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.query.fan_in
    }

    /// Runs attention along `axis`. With `keep_weights` the cache retains the
    /// softmax matrices needed for the backward pass.
    pub fn forward(
        &self,
        x: &[F],
        mask: &[bool],
        axis: Axis,
        elements: usize,
        frames: usize,
        keep_weights: bool,
    ) -> (Vec<F>, AxialCache<F>) {
        let d = self.dim();
        let rows = elements * frames;
        debug_assert_eq!(x.len(), rows * d);
        let dh = d / self.heads;
        let scale = F::one() / F::of(dh as f64).sqrt();

        let (normed, norm_cache) = self.norm.forward(x);
        let q = self.query.forward(&normed, rows);
        let k = self.key.forward(&normed, rows);
        let v = self.value.forward(&normed, rows);
        let mut context = vec![F::zero(); rows * d];
        let mut kept = Vec::new();

        let mut qh = Vec::new();
        let mut kh = Vec::new();
        let mut vh = Vec::new();
        let mut scores = Vec::new();
        let mut ctx = Vec::new();
        for seq in axis.sequences(elements, frames) {
            let valid: Vec<usize> = seq.into_iter().filter(|&r| mask[r]).collect();
            let n = valid.len();
            if n == 0 {
                continue;
            }
            for h in 0..self.heads {
                gather_head(&q, &valid, d, h * dh, dh, &mut qh);
                gather_head(&k, &valid, d, h * dh, dh, &mut kh);
                gather_head(&v, &valid, d, h * dh, dh, &mut vh);
                scores.clear();
                scores.resize(n * n, F::zero());
                gemm(n, dh, n, &qh, false, &kh, true, &mut scores, F::zero());
                for row in scores.chunks_exact_mut(n) {
                    softmax_in_place(row, scale);
                }
                ctx.clear();
                ctx.resize(n * dh, F::zero());
                gemm(n, n, dh, &scores, false, &vh, false, &mut ctx, F::zero());
                for (a, &r) in valid.iter().enumerate() {
                    context[r * d + h * dh..r * d + (h + 1) * dh].copy_from_slice(&ctx[a * dh..(a + 1) * dh]);
                }
                if keep_weights {
                    kept.push(HeadWeights {
                        rows: valid.clone(),
                        head: h,
                        weights: scores.clone(),
                    });
                }
            }
        }

        let projected = self.output.forward(&context, rows);
        let mut y = x.to_vec();
        for r in (0..rows).filter(|&r| mask[r]) {
            for j in 0..d {
                y[r * d + j] += projected[r * d + j];
            }
        }
        let cache = AxialCache {
            norm: norm_cache,
            normed,
            q,
            k,
            v,
            context,
            weights: kept,
        };
        (y, cache)
    }

    /// Backward pass; requires a cache built with `keep_weights`.
    pub fn backward(&self, cache: &AxialCache<F>, dy: &[F], mask: &[bool], grad: &mut AxialBlock<F>) -> Vec<F> {
        let d = self.dim();
        let rows = mask.len();
        let dh = d / self.heads;
        let scale = F::one() / F::of(dh as f64).sqrt();

        let mut d_proj = dy.to_vec();
        for r in (0..rows).filter(|&r| !mask[r]) {
            d_proj[r * d..(r + 1) * d].fill(F::zero());
        }
        let d_context = self
            .output
            .backward(&cache.context, &d_proj, rows, &mut grad.output, true)
            .unwrap();

        let mut dq = vec![F::zero(); rows * d];
        let mut dk = vec![F::zero(); rows * d];
        let mut dv = vec![F::zero(); rows * d];
        let (mut qh, mut kh, mut vh, mut dctx) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut dweights = Vec::new();
        let mut dvh = Vec::new();
        let mut dqh = Vec::new();
        let mut dkh = Vec::new();
        for hw in &cache.weights {
            let (valid, n, h) = (&hw.rows, hw.rows.len(), hw.head);
            gather_head(&cache.q, valid, d, h * dh, dh, &mut qh);
            gather_head(&cache.k, valid, d, h * dh, dh, &mut kh);
            gather_head(&cache.v, valid, d, h * dh, dh, &mut vh);
            gather_head(&d_context, valid, d, h * dh, dh, &mut dctx);

            dweights.clear();
            dweights.resize(n * n, F::zero());
            gemm(n, dh, n, &dctx, false, &vh, true, &mut dweights, F::zero());
            dvh.clear();
            dvh.resize(n * dh, F::zero());
            gemm(n, n, dh, &hw.weights, true, &dctx, false, &mut dvh, F::zero());
            // softmax backward, then the 1/√dh score scale
            for (da, a) in dweights.chunks_exact_mut(n).zip(hw.weights.chunks_exact(n)) {
                let dot = da.iter().zip(a).fold(F::zero(), |s, (x, y)| s + *x * *y);
                for (x, y) in da.iter_mut().zip(a) {
                    *x = *y * (*x - dot) * scale;
                }
            }
            dqh.clear();
            dqh.resize(n * dh, F::zero());
            gemm(n, n, dh, &dweights, false, &kh, false, &mut dqh, F::zero());
            dkh.clear();
            dkh.resize(n * dh, F::zero());
            gemm(n, n, dh, &dweights, true, &qh, false, &mut dkh, F::zero());
            scatter_head_add(&mut dq, valid, d, h * dh, dh, &dqh);
            scatter_head_add(&mut dk, valid, d, h * dh, dh, &dkh);
            scatter_head_add(&mut dv, valid, d, h * dh, dh, &dvh);
        }

        let mut d_normed = self.query.backward(&cache.normed, &dq, rows, &mut grad.query, true).unwrap();
        for (block, dgrad, src) in [
            (&self.key, &mut grad.key, &dk),
            (&self.value, &mut grad.value, &dv),
        ] {
            let part = block.backward(&cache.normed, src, rows, dgrad, true).unwrap();
            d_normed.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        let dx_norm = self.norm.backward(&cache.norm, &d_normed, &mut grad.norm);
        let mut dx = dy.to_vec();
        dx.iter_mut().zip(dx_norm).for_each(|(a, b)| *a += b);
        dx
    }
}

fn gather_head<F: Scalar>(src: &[F], rows: &[usize], width: usize, offset: usize, dh: usize, out: &mut Vec<F>) {
    out.clear();
    for &r in rows {
        out.extend_from_slice(&src[r * width + offset..r * width + offset + dh]);
    }
}

fn scatter_head_add<F: Scalar>(dst: &mut [F], rows: &[usize], width: usize, offset: usize, dh: usize, src: &[F]) {
    for (a, &r) in rows.iter().enumerate() {
        for j in 0..dh {
            dst[r * width + offset + j] += src[a * dh + j];
        }
    }
}

/// Numerically stable softmax of `scale · row`.
pub fn softmax_in_place<F: Scalar>(row: &mut [F], scale: F) {
    let max = row.iter().fold(F::neg_infinity(), |m, v| m.max(*v * scale));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}
