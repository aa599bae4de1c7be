//! Transformer substrate: linear maps, layer norm, multi-head attention,
//! pre-norm blocks and encoders, each with an explicit backward pass.
//!
//! Layers are plain structs of [`Tensor`]s. A gradient buffer for a layer
//! is another instance of the same struct (see [`Parameters::zeros_like`]),
//! and `backward` accumulates into it.

mod attention;
mod block;
mod encoder;
mod linear;
mod norm;
mod posemb;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use block::{gelu, gelu_grad, Block, BlockCache};
pub use encoder::{Encoder, EncoderCache, TransformerConfig};
pub use linear::Linear;
pub use norm::{LayerNorm, NormCache, LN_EPS};
pub use posemb::sincos_2d;

use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal initialization.
pub const INIT_STD: f64 = 0.02;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named access to every learnable tensor of a module.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |k, t| out.push((k, t)));
        out
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(T::zero()));
        z
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(T::zero()));
    }
}

pub(crate) fn truncated_normal<T: Scalar>(shape: &[usize], rng: &mut SplitMix64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::c(rng.truncated_normal(INIT_STD)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenPosition {
    Class,
    Patch { row: usize, col: usize },
}

/// Ordered embedding vectors with their patch-grid coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// `len × embed_dim`.
    pub tokens: Tensor<T>,
    pub has_class_token: bool,
    pub positions: Vec<TokenPosition>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, positions: Vec<TokenPosition>) -> crate::Result<Self> {
        if tokens.rows() != positions.len() {
            return Err(crate::Error::shape(format!(
                "{} tokens but {} positions",
                tokens.rows(),
                positions.len()
            )));
        }
        let class_count = positions
            .iter()
            .filter(|p| **p == TokenPosition::Class)
            .count();
        let has_class_token = positions.first() == Some(&TokenPosition::Class);
        if class_count > usize::from(has_class_token) {
            return Err(crate::Error::shape(
                "class token must be unique and leading",
            ));
        }
        Ok(Self {
            tokens,
            has_class_token,
            positions,
        })
    }

    /// Full row-major grid, optionally preceded by a class token.
    pub fn for_grid(tokens: Tensor<T>, has_class_token: bool, grid: (usize, usize)) -> Self {
        let mut positions = Vec::with_capacity(grid.0 * grid.1 + 1);
        if has_class_token {
            positions.push(TokenPosition::Class);
        }
        for row in 0..grid.0 {
            for col in 0..grid.1 {
                positions.push(TokenPosition::Patch { row, col });
            }
        }
        assert_eq!(
            tokens.rows(),
            positions.len(),
            "token count must match the grid"
        );
        Self {
            tokens,
            has_class_token,
            positions,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.cols()
    }
}
