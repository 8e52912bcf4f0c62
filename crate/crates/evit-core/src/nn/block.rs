use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::attention::{from_tokens, to_tokens, AttentionCore};
use crate::nn::{collect_bn, ConvNorm, ConvParams, ParamSet, LAYER_SCALE_INIT};
use crate::ops::{self, BatchNorm2dParams, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Layer-scaled depthwise-conv FFN residual unit:
/// out = x + S ⊙ project(act(dw(act(expand(x))))), each conv batch-normed.
pub struct LocalBlock<T: Scalar> {
    pub expand: ConvNorm<T>,
    pub dw: ConvNorm<T>,
    pub project: ConvNorm<T>,
    pub layer_scale: Tensor<T>,
    pub channels: usize,
}

impl<T: Scalar> LocalBlock<T> {
    pub fn new(init: &mut Initializer, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        LocalBlock {
            expand: ConvNorm {
                conv: ConvParams::dense(init, channels, hidden, 1, 1, 0, false),
                norm: BatchNorm2dParams::new(hidden),
            },
            dw: ConvNorm {
                conv: ConvParams::depthwise(init, hidden, 3, 1, 1),
                norm: BatchNorm2dParams::new(hidden),
            },
            project: ConvNorm {
                conv: ConvParams::dense(init, hidden, channels, 1, 1, 0, false),
                norm: BatchNorm2dParams::new(channels),
            },
            layer_scale: init.constant(&[channels], LAYER_SCALE_INIT),
            channels,
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape()[1] != self.channels {
            return Err(Error::shape(
                "local_block",
                format!("{} channels, block expects {}", x.shape()[1], self.channels),
            ));
        }
        let h = self.expand.forward_act(tape, x, mode)?;
        let h = self.dw.forward_act(tape, &h, mode)?;
        let f = self.project.forward(tape, &h, mode)?;
        let scaled = ops::scale_channels(tape, &f, &self.layer_scale)?;
        ops::add(tape, x, &scaled)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        self.expand.collect(&format!("{prefix}.expand"), set);
        self.dw.collect(&format!("{prefix}.dw"), set);
        self.project.collect(&format!("{prefix}.project"), set);
        set.param(format!("{prefix}.layer_scale"), &self.layer_scale);
    }
}

/// MHSA residual (with learnable position bias) followed by a local FFN
/// residual: y = x + S_attn ⊙ MHSA(Proj(x)); out = y + S ⊙ FFN(y).
pub struct GlobalLocalBlock<T: Scalar> {
    pub wq: ConvParams<T>,
    pub wk: ConvParams<T>,
    pub wv: ConvParams<T>,
    pub proj: ConvParams<T>,
    pub attn: AttentionCore<T>,
    pub attn_layer_scale: Tensor<T>,
    pub ffn: LocalBlock<T>,
    pub channels: usize,
}

impl<T: Scalar> GlobalLocalBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer,
        channels: usize,
        expansion: usize,
        heads: usize,
        head_dim: usize,
        grid: (usize, usize),
        attn_scale: bool,
    ) -> Self {
        let inner = heads * head_dim;
        let ab = init.zeros(&[heads, super::attention::bias_table_len(grid)]);
        GlobalLocalBlock {
            wq: ConvParams::dense(init, channels, inner, 1, 1, 0, true),
            // A key-projection bias shifts every logit in a row equally and
            // cancels in the softmax, so it stays unparameterized.
            wk: ConvParams::dense(init, channels, inner, 1, 1, 0, false),
            wv: ConvParams::dense(init, channels, inner, 1, 1, 0, true),
            proj: ConvParams::dense(init, inner, channels, 1, 1, 0, true),
            attn: AttentionCore::new(heads, head_dim, grid, grid, ab, attn_scale, true),
            attn_layer_scale: init.constant(&[channels], LAYER_SCALE_INIT),
            ffn: LocalBlock::new(init, channels, expansion),
            channels,
        }
    }

    /// The MHSA half alone (projection to tokens, attention, projection
    /// back); callers add layer scale and residual.
    pub fn mhsa(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if (h, w) != self.attn.q_grid {
            return Err(Error::BiasExtentMismatch {
                expected: self.attn.nq(),
                got: h * w,
            });
        }
        let q = to_tokens(tape, &self.wq.forward(tape, x)?, self.attn.heads, self.attn.head_dim)?;
        let k = to_tokens(tape, &self.wk.forward(tape, x)?, self.attn.heads, self.attn.head_dim)?;
        let v = to_tokens(tape, &self.wv.forward(tape, x)?, self.attn.heads, self.attn.head_dim)?;
        let out = self.attn.apply(tape, &q, &k, &v)?;
        let feat = from_tokens(tape, &out, h, w)?;
        self.proj.forward(tape, &feat)
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape()[1] != self.channels {
            return Err(Error::shape(
                "global_local_block",
                format!("{} channels, block expects {}", x.shape()[1], self.channels),
            ));
        }
        let a = self.mhsa(tape, x)?;
        let scaled = ops::scale_channels(tape, &a, &self.attn_layer_scale)?;
        let y = ops::add(tape, x, &scaled)?;
        self.ffn.forward(tape, &y, mode)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        self.wq.collect(&format!("{prefix}.attn.q"), set);
        self.wk.collect(&format!("{prefix}.attn.k"), set);
        self.wv.collect(&format!("{prefix}.attn.v"), set);
        self.proj.collect(&format!("{prefix}.attn.proj"), set);
        set.param(format!("{prefix}.attn.ab"), &self.attn.ab);
        set.param(format!("{prefix}.attn_layer_scale"), &self.attn_layer_scale);
        self.ffn.collect(&format!("{prefix}.ffn"), set);
    }
}

/// Either block kind, so stages can be stored uniformly.
pub enum Block<T: Scalar> {
    Local(LocalBlock<T>),
    Global(GlobalLocalBlock<T>),
}

impl<T: Scalar> Block<T> {
    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Block::Local(b) => b.forward(tape, x, mode),
            Block::Global(b) => b.forward(tape, x, mode),
        }
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        match self {
            Block::Local(b) => b.collect(prefix, set),
            Block::Global(b) => b.collect(prefix, set),
        }
    }
}

/// Two stride-2 conv-norm-GELU layers: [B,3,H,W] -> [B,C₁,H/4,W/4].
pub struct Stem<T: Scalar> {
    pub conv1: ConvNorm<T>,
    pub conv2: ConvNorm<T>,
}

impl<T: Scalar> Stem<T> {
    pub fn new(init: &mut Initializer, width: usize) -> Self {
        Stem {
            conv1: ConvNorm {
                conv: ConvParams::dense(init, 3, width / 2, 3, 2, 1, false),
                norm: BatchNorm2dParams::new(width / 2),
            },
            conv2: ConvNorm {
                conv: ConvParams::dense(init, width / 2, width, 3, 2, 1, false),
                norm: BatchNorm2dParams::new(width),
            },
        }
    }

    pub fn forward(&self, tape: &Tape<T>, img: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (h, w) = (img.shape()[2], img.shape()[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArg(format!(
                "stem: input extents {h}x{w} must be divisible by 4"
            )));
        }
        let y = self.conv1.forward_act(tape, img, mode)?;
        self.conv2.forward_act(tape, &y, mode)
    }

    pub fn collect(&self, set: &mut ParamSet<T>) {
        self.conv1.conv.collect("stem.conv1", set);
        collect_bn("stem.norm1", &self.conv1.norm, set);
        self.conv2.conv.collect("stem.conv2", set);
        collect_bn("stem.norm2", &self.conv2.norm, set);
    }
}
