use super::{join, Block, BlockCache, LayerNorm, NormCache, Parameters};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
}

impl TransformerConfig {
    /// 64 wide, 4 deep, 4 heads.
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            n_heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads.max(1)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "{name}: embed_dim must be divisible by n_heads"
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "{name}: embed_dim must be divisible by 4 for 2-D sin-cos positions"
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config(format!("{name}: mlp_ratio must be positive")));
        }
        Ok(())
    }
}

/// `depth` pre-norm blocks followed by a final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub blocks: Vec<Block<T>>,
    pub norm: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    norm: NormCache<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(cfg: &TransformerConfig, rng: &mut SplitMix64) -> Self {
        Self {
            blocks: (0..cfg.depth)
                .map(|_| Block::new(cfg.embed_dim, cfg.n_heads, cfg.mlp_ratio, rng))
                .collect(),
            norm: LayerNorm::new(cfg.embed_dim),
        }
    }

    /// `path` prefixes block names in numerical error reports.
    pub fn forward(&self, x: &Tensor<T>, path: &str) -> Result<(Tensor<T>, EncoderCache<T>)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (next, cache) = block.forward(&h, &join(path, &format!("block{i}")))?;
            h = next;
            caches.push(cache);
        }
        let (out, norm) = self.norm.forward(&h);
        Ok((
            out,
            EncoderCache {
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        dout: &Tensor<T>,
        grads: &mut Self,
    ) -> Tensor<T> {
        let mut d = self.norm.backward(&cache.norm, dout, &mut grads.norm);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            d = block.backward(&cache.blocks[i], &d, &mut grads.blocks[i]);
        }
        d
    }
}

impl<T: Scalar> Parameters<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit(&join(prefix, "norm"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}
