use super::{join, Linear, Parameters};
use crate::flops;
use crate::rng::SplitMix64;
use crate::tensor::{gemm, MatMut, MatRef, Scalar, Tensor};

/// Query rows processed per score block in [`MultiHeadAttention::infer`].
const INFER_BLOCK: usize = 128;

/// Multi-head scaled dot-product attention:
/// per head `softmax(Q_h K_hᵀ / √head_dim) V_h`, heads concatenated and
/// passed through the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention<T> {
    pub w_q: Linear<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
    pub w_o: Linear<T>,
    pub n_heads: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    xq: Tensor<T>,
    xkv: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// `n_heads × m × n` attention weights.
    probs: Vec<T>,
    concat: Tensor<T>,
}

impl<T> AttentionCache<T> {
    /// Attention weights of head `h` for query `i`.
    pub fn weights(&self, h: usize, i: usize) -> &[T] {
        let (m, n) = (self.q.rows(), self.k.rows());
        &self.probs[(h * m + i) * n..(h * m + i + 1) * n]
    }
}

fn softmax_rows<T: Scalar>(scores: &mut [T], n: usize) {
    if n == 0 {
        return;
    }
    flops::add(flops::SOFTMAX_FLOPS_PER_ELEMENT * scores.len() as u64);
    for row in scores.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Scores, softmax and weighted values for one head and a block of
/// queries. `probs` receives the `m × n` weights.
fn attend_head<T: Scalar>(
    q: MatRef<'_, T>,
    k: MatRef<'_, T>,
    v: MatRef<'_, T>,
    scale: T,
    probs: &mut [T],
    out: MatMut<'_, T>,
) {
    let (m, n) = (q.rows(), k.rows());
    gemm(scale, q, k.t(), T::zero(), MatMut::new(probs, m, n));
    softmax_rows(probs, n);
    gemm(T::one(), MatRef::new(probs, m, n), v, T::zero(), out);
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(
        dim: usize,
        n_heads: usize,
        qkv_bias: bool,
        kv_bias: bool,
        rng: &mut SplitMix64,
    ) -> Self {
        assert!(
            n_heads > 0 && dim % n_heads == 0,
            "embed_dim must be divisible by n_heads"
        );
        Self {
            w_q: Linear::new(dim, dim, qkv_bias, rng),
            w_k: Linear::new(dim, dim, kv_bias, rng),
            w_v: Linear::new(dim, dim, kv_bias, rng),
            w_o: Linear::new(dim, dim, true, rng),
            n_heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.d_in()
    }

    fn head_dim(&self) -> usize {
        self.dim() / self.n_heads
    }

    fn scale(&self) -> T {
        T::one() / T::c(self.head_dim() as f64).sqrt()
    }

    /// `queries` (`m × d`) attend to `keys_values` (`n × d`). Self-attention
    /// passes the same tensor twice.
    pub fn forward(
        &self,
        queries: &Tensor<T>,
        keys_values: &Tensor<T>,
    ) -> (Tensor<T>, AttentionCache<T>) {
        let ((out, cache), cost) = flops::measure(|| {
            let (m, n, hd) = (queries.rows(), keys_values.rows(), self.head_dim());
            let q = self.w_q.forward(queries);
            let k = self.w_k.forward(keys_values);
            let v = self.w_v.forward(keys_values);
            let mut probs = vec![T::zero(); self.n_heads * m * n];
            let mut concat = Tensor::zeros(&[m, self.dim()]);
            for h in 0..self.n_heads {
                attend_head(
                    q.view().cols_range(h * hd, hd),
                    k.view().cols_range(h * hd, hd),
                    v.view().cols_range(h * hd, hd),
                    self.scale(),
                    &mut probs[h * m * n..(h + 1) * m * n],
                    concat.view_mut().cols_range(h * hd, hd),
                );
            }
            let out = self.w_o.forward(&concat);
            let cache = AttentionCache {
                xq: queries.clone(),
                xkv: keys_values.clone(),
                q,
                k,
                v,
                probs,
                concat,
            };
            (out, cache)
        });
        flops::add_attention(cost.total);
        (out, cache)
    }

    /// Forward pass without caches. Scores are materialized for at most
    /// [`INFER_BLOCK`] queries at a time, so long sequences fit in memory.
    pub fn infer(&self, queries: &Tensor<T>, keys_values: &Tensor<T>) -> Tensor<T> {
        let (out, cost) = flops::measure(|| {
            let (m, n, hd) = (queries.rows(), keys_values.rows(), self.head_dim());
            let q = self.w_q.forward(queries);
            let k = self.w_k.forward(keys_values);
            let v = self.w_v.forward(keys_values);
            let mut scratch = vec![T::zero(); INFER_BLOCK.min(m.max(1)) * n];
            let mut concat = Tensor::zeros(&[m, self.dim()]);
            let d = self.dim();
            for start in (0..m).step_by(INFER_BLOCK) {
                let rows = INFER_BLOCK.min(m - start);
                for h in 0..self.n_heads {
                    let q_blk = MatRef::strided(&q.data()[start * d..], rows, d, d as isize, 1)
                        .cols_range(h * hd, hd);
                    let out_blk = MatMut::strided(
                        &mut concat.data_mut()[start * d..],
                        rows,
                        d,
                        d as isize,
                        1,
                    )
                    .cols_range(h * hd, hd);
                    attend_head(
                        q_blk,
                        k.view().cols_range(h * hd, hd),
                        v.view().cols_range(h * hd, hd),
                        self.scale(),
                        &mut scratch[..rows * n],
                        out_blk,
                    );
                }
            }
            self.w_o.forward(&concat)
        });
        flops::add_attention(cost.total);
        out
    }

    /// Returns `(dL/dqueries, dL/dkeys_values)`.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dout: &Tensor<T>,
        grads: &mut Self,
    ) -> (Tensor<T>, Tensor<T>) {
        let (m, n, hd, d) = (cache.q.rows(), cache.k.rows(), self.head_dim(), self.dim());
        let scale = self.scale();
        let dconcat = self.w_o.backward(&cache.concat, dout, &mut grads.w_o);
        let mut dq = Tensor::zeros(&[m, d]);
        let mut dk = Tensor::zeros(&[n, d]);
        let mut dv = Tensor::zeros(&[n, d]);
        let mut dp = vec![T::zero(); m * n];
        for h in 0..self.n_heads {
            let p = &cache.probs[h * m * n..(h + 1) * m * n];
            let p_ref = MatRef::new(p, m, n);
            let do_h = dconcat.view().cols_range(h * hd, hd);
            // dV_h = Pᵀ dO_h
            gemm(
                T::one(),
                p_ref.t(),
                do_h,
                T::zero(),
                dv.view_mut().cols_range(h * hd, hd),
            );
            // dP = dO_h V_hᵀ
            gemm(
                T::one(),
                do_h,
                cache.v.view().cols_range(h * hd, hd).t(),
                T::zero(),
                MatMut::new(&mut dp, m, n),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for (dp_row, p_row) in dp.chunks_exact_mut(n.max(1)).zip(p.chunks_exact(n.max(1))) {
                let dot = dp_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum::<T>();
                for (g, &pp) in dp_row.iter_mut().zip(p_row) {
                    *g = pp * (*g - dot) * scale;
                }
            }
            let ds = MatRef::new(&dp[..], m, n);
            gemm(
                T::one(),
                ds,
                cache.k.view().cols_range(h * hd, hd),
                T::zero(),
                dq.view_mut().cols_range(h * hd, hd),
            );
            gemm(
                T::one(),
                ds.t(),
                cache.q.view().cols_range(h * hd, hd),
                T::zero(),
                dk.view_mut().cols_range(h * hd, hd),
            );
        }
        let dxq = self.w_q.backward(&cache.xq, &dq, &mut grads.w_q);
        let mut dxkv = self.w_k.backward(&cache.xkv, &dk, &mut grads.w_k);
        dxkv.add_assign(&self.w_v.backward(&cache.xkv, &dv, &mut grads.w_v));
        (dxq, dxkv)
    }
}

impl<T: Scalar> Parameters<T> for MultiHeadAttention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.w_q.visit(&join(prefix, "w_q"), f);
        self.w_k.visit(&join(prefix, "w_k"), f);
        self.w_v.visit(&join(prefix, "w_v"), f);
        self.w_o.visit(&join(prefix, "w_o"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.w_q.visit_mut(&join(prefix, "w_q"), f);
        self.w_k.visit_mut(&join(prefix, "w_k"), f);
        self.w_v.visit_mut(&join(prefix, "w_v"), f);
        self.w_o.visit_mut(&join(prefix, "w_o"), f);
    }
}

/// Dense single-sample reference used by tests: returns the output for
/// one query row computed straight from the formula, in `f64`.
#[cfg(test)]
pub(crate) fn reference_attention(
    attn: &MultiHeadAttention<f64>,
    queries: &Tensor<f64>,
    keys_values: &Tensor<f64>,
) -> Tensor<f64> {
    let d = attn.dim();
    let hd = d / attn.n_heads;
    let proj = |lin: &Linear<f64>, x: &[f64]| -> Vec<f64> {
        (0..lin.d_out())
            .map(|j| {
                let b = lin.bias.as_ref().map_or(0.0, |b| b.data()[j]);
                b + (0..lin.d_in())
                    .map(|i| x[i] * lin.weight.data()[i * lin.d_out() + j])
                    .sum::<f64>()
            })
            .collect()
    };
    let ks: Vec<Vec<f64>> = (0..keys_values.rows())
        .map(|r| proj(&attn.w_k, keys_values.row(r)))
        .collect();
    let vs: Vec<Vec<f64>> = (0..keys_values.rows())
        .map(|r| proj(&attn.w_v, keys_values.row(r)))
        .collect();
    let mut out = Vec::new();
    for r in 0..queries.rows() {
        let q = proj(&attn.w_q, queries.row(r));
        let mut concat = vec![0.0; d];
        for h in 0..attn.n_heads {
            let s: Vec<f64> = ks
                .iter()
                .map(|k| {
                    (0..hd).map(|i| q[h * hd + i] * k[h * hd + i]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for (j, v) in vs.iter().enumerate() {
                let w = s[j].exp() / z;
                for i in 0..hd {
                    concat[h * hd + i] += w * v[h * hd + i];
                }
            }
        }
        out.extend(proj(&attn.w_o, &concat));
    }
    Tensor::matrix(queries.rows(), d, out)
}
