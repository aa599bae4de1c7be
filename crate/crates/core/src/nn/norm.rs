use super::{join, Parameters};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-6;

/// Layer normalization over the last axis with learnable scale and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T> {
    pub scale: Tensor<T>,
    pub offset: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            scale: Tensor::full(&[dim], T::one()),
            offset: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let d = x.cols();
        let inv_d = T::one() / T::c(d as f64);
        let eps = T::c(LN_EPS);
        let mut xhat = Tensor::zeros(&[x.rows(), d]);
        let mut y = Tensor::zeros(&[x.rows(), d]);
        let mut rstd = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let xh = xhat.row(r);
            for ((o, &h), (&g, &b)) in y
                .row_mut(r)
                .iter_mut()
                .zip(xh)
                .zip(self.scale.data().iter().zip(self.offset.data()))
            {
                *o = h * g + b;
            }
        }
        (y, NormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &NormCache<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let d = dy.cols();
        let inv_d = T::one() / T::c(d as f64);
        let mut dx = Tensor::zeros(&[dy.rows(), d]);
        let mut dxhat = vec![T::zero(); d];
        for r in 0..dy.rows() {
            let (dyr, xh) = (dy.row(r), cache.xhat.row(r));
            {
                let gs = grads.scale.data_mut();
                for i in 0..d {
                    gs[i] += dyr[i] * xh[i];
                }
            }
            {
                let go = grads.offset.data_mut();
                for i in 0..d {
                    go[i] += dyr[i];
                }
            }
            let scale = self.scale.data();
            for i in 0..d {
                dxhat[i] = dyr[i] * scale[i];
            }
            let mean_d = dxhat.iter().copied().sum::<T>() * inv_d;
            let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
            let rs = cache.rstd[r];
            for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = rs * (dxhat[i] - mean_d - xh[i] * mean_dx);
            }
        }
        dx
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "scale"), &self.scale);
        f(join(prefix, "offset"), &self.offset);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "scale"), &mut self.scale);
        f(join(prefix, "offset"), &mut self.offset);
    }
}
