use super::{join, truncated_normal, Parameters};
use crate::rng::SplitMix64;
use crate::tensor::{matmul, matmul_acc, Scalar, Tensor};

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    /// Truncated-normal weights, zero bias.
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut SplitMix64) -> Self {
        Self {
            weight: truncated_normal(&[d_in, d_out], rng),
            bias: bias.then(|| Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = matmul(x.view(), self.weight.view());
        if let Some(b) = &self.bias {
            for r in 0..y.rows() {
                for (v, &bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients only.
    pub fn backward_params(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Self) {
        matmul_acc(&mut grads.weight, x.view().t(), dy.view());
        if let Some(gb) = &mut grads.bias {
            let gb = gb.data_mut();
            for r in 0..dy.rows() {
                for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        self.backward_params(x, dy, grads);
        matmul(dy.view(), self.weight.view().t())
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}
