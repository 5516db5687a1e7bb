use crate::error::Result;
use crate::layers::{
    he_normal, maxpool2d, maxpool2d_backward, xavier_normal, Activation, BatchNorm2d, BnCache, Conv2d, Mode,
    PoolCache,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Conv -> ReLU -> BatchNorm -> 2x2 MaxPool.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    pub input: Tensor,
    pub conv_out: Tensor,
    pub relu_out: Tensor,
    pub bn: BnCache,
    pub pool: PoolCache,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub input: Tensor,
    pub conv_w: Tensor,
    pub conv_b: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
}

impl ConvBlock {
    pub fn new(kernel: usize, c_in: usize, c_out: usize, eps: f64, momentum: f64, rng: &mut Rng) -> Result<Self> {
        let fan_in = kernel * kernel * c_in;
        let conv = Conv2d::new(
            he_normal(&[kernel, kernel, c_in, c_out], fan_in, rng),
            Tensor::zeros(&[c_out]),
            1,
        )?;
        let mut bn = BatchNorm2d::new(c_out);
        bn.eps = eps;
        bn.momentum = momentum;
        Ok(Self { conv, bn })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BlockCache)> {
        let conv_out = self.conv.forward(x)?;
        let relu_out = Activation::Relu.forward(&conv_out);
        let (bn_out, bn) = self.bn.forward(&relu_out, mode)?;
        let (out, pool) = maxpool2d(&bn_out)?;
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                conv_out,
                relu_out,
                bn,
                pool,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache, grad_out: &Tensor) -> Result<BlockGrads> {
        let g_bn_out = maxpool2d_backward(&cache.pool, grad_out)?;
        let bn = self.bn.backward(&cache.bn, &g_bn_out)?;
        let g_conv_out = Activation::Relu.backward(&cache.conv_out, &cache.relu_out, &bn.input)?;
        let conv = self.conv.backward(&cache.input, &g_conv_out)?;
        Ok(BlockGrads {
            input: conv.input,
            conv_w: conv.weight,
            conv_b: conv.bias,
            bn_gamma: bn.gamma,
            bn_beta: bn.beta,
        })
    }
}

/// Four conv blocks sharing one kernel size.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub kernel: usize,
    pub blocks: Vec<ConvBlock>,
}

impl Branch {
    pub fn new(
        kernel: usize,
        in_channels: usize,
        channels: &[usize; 4],
        eps: f64,
        momentum: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(4);
        let mut c_in = in_channels;
        for &c_out in channels {
            blocks.push(ConvBlock::new(kernel, c_in, c_out, eps, momentum, rng)?);
            c_in = c_out;
        }
        Ok(Self { kernel, blocks })
    }
}

/// Fusion spatial attention: dilated conv over the concatenated block-1
/// outputs of both branches, followed by a sigmoid. Produces one
/// attention channel that is broadcast over feature channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusam {
    pub conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct FusamCache {
    pub concat: Tensor,
    pub logits: Tensor,
}

impl Fusam {
    pub fn new(kernel: usize, dilation: usize, c_in: usize, rng: &mut Rng) -> Result<Self> {
        let fan_in = kernel * kernel * c_in;
        let fan_out = kernel * kernel;
        let conv = Conv2d::new(
            xavier_normal(&[kernel, kernel, c_in, 1], fan_in, fan_out, rng),
            Tensor::zeros(&[1]),
            dilation,
        )?;
        Ok(Self { conv })
    }

    pub fn forward(&self, y1: &Tensor, y2: &Tensor) -> Result<(Tensor, FusamCache)> {
        let concat = Tensor::concat_last(&[y1, y2])?;
        let logits = self.conv.forward(&concat)?;
        let map = Activation::Sigmoid.forward(&logits);
        Ok((map, FusamCache { concat, logits }))
    }
}
