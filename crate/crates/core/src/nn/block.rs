use super::{join, AttentionCache, LayerNorm, Linear, MultiHeadAttention, NormCache, Parameters};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    T::c(0.5) * x * (T::one() + (x * T::c(FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::c(0.5) * (T::one() + (x * T::c(FRAC_1_SQRT_2)).erf());
    let pdf = T::c(FRAC_1_SQRT_2PI) * (-(x * x) * T::c(0.5)).exp();
    cdf + x * pdf
}

/// Pre-norm transformer block:
/// `x ← x + attn(norm1(x))`, then `x ← x + fc2(gelu(fc1(norm2(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1: LayerNorm<T>,
    pub attn: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    n1: NormCache<T>,
    attn: AttentionCache<T>,
    n2: NormCache<T>,
    n2_out: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new(dim: usize, n_heads: usize, mlp_ratio: usize, rng: &mut SplitMix64) -> Self {
        Self {
            norm1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(dim, n_heads, true, true, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * mlp_ratio, true, rng),
            fc2: Linear::new(dim * mlp_ratio, dim, true, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, path: &str) -> Result<(Tensor<T>, BlockCache<T>)> {
        let (n1_out, n1) = self.norm1.forward(x);
        let (a, attn) = self.attn.forward(&n1_out, &n1_out);
        let mut mid = x.clone();
        mid.add_assign(&a);
        let (n2_out, n2) = self.norm2.forward(&mid);
        let hidden_pre = self.fc1.forward(&n2_out);
        let mut hidden = hidden_pre.clone();
        hidden.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let mut out = mid;
        out.add_assign(&self.fc2.forward(&hidden));
        if !out.all_finite() {
            return Err(Error::Numerical {
                path: path.to_string(),
            });
        }
        Ok((
            out,
            BlockCache {
                n1,
                attn,
                n2,
                n2_out,
                hidden_pre,
                hidden,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache<T>, dout: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let mut dhidden = self.fc2.backward(&cache.hidden, dout, &mut grads.fc2);
        for (g, &x) in dhidden.data_mut().iter_mut().zip(cache.hidden_pre.data()) {
            *g *= gelu_grad(x);
        }
        let dn2 = self.fc1.backward(&cache.n2_out, &dhidden, &mut grads.fc1);
        let mut dmid = dout.clone();
        dmid.add_assign(&self.norm2.backward(&cache.n2, &dn2, &mut grads.norm2));
        let (dq, dkv) = self.attn.backward(&cache.attn, &dmid, &mut grads.attn);
        let mut dn1 = dq;
        dn1.add_assign(&dkv);
        let mut dx = dmid;
        dx.add_assign(&self.norm1.backward(&cache.n1, &dn1, &mut grads.norm1));
        dx
    }
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}
