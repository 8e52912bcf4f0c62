use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::attention::{bias_table_len, from_tokens, to_tokens, AttentionCore};
use crate::nn::{ConvNorm, ConvParams, ParamSet};
use crate::ops::{self, BatchNorm2dParams, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Attention resampler: queries come from a resampled copy of the input
/// (2x2 mean pool for down, nearest duplication for up), keys and values
/// from every input token. The query-token count, not the key count, sets
/// the output resolution.
pub struct AttnResample<T: Scalar> {
    pub down: bool,
    pub wq: ConvParams<T>,
    pub wk: ConvParams<T>,
    pub wv: ConvParams<T>,
    pub proj: ConvParams<T>,
    pub attn: AttentionCore<T>,
}

impl<T: Scalar> AttnResample<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Initializer,
        cin: usize,
        cout: usize,
        heads: usize,
        head_dim: usize,
        in_grid: (usize, usize),
        down: bool,
        attn_scale: bool,
        softmax_on: bool,
    ) -> Self {
        let q_grid = if down {
            (in_grid.0 / 2, in_grid.1 / 2)
        } else {
            (in_grid.0 * 2, in_grid.1 * 2)
        };
        let inner = heads * head_dim;
        let ab = init.zeros(&[heads, bias_table_len(in_grid)]);
        AttnResample {
            down,
            wq: ConvParams::dense(init, cin, inner, 1, 1, 0, true),
            wk: ConvParams::dense(init, cin, inner, 1, 1, 0, false),
            wv: ConvParams::dense(init, cin, inner, 1, 1, 0, true),
            proj: ConvParams::dense(init, inner, cout, 1, 1, 0, true),
            attn: AttentionCore::new(heads, head_dim, q_grid, in_grid, ab, attn_scale, softmax_on),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if (h, w) != self.attn.k_grid {
            return Err(Error::BiasExtentMismatch {
                expected: self.attn.nk(),
                got: h * w,
            });
        }
        if self.down && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::InvalidArg(format!(
                "attn_downsample: spatial extents {h}x{w} must be even"
            )));
        }
        let q_src = if self.down {
            ops::avg_pool2x2(tape, x)?
        } else {
            ops::nearest_upsample2x(tape, x)?
        };
        let (heads, d) = (self.attn.heads, self.attn.head_dim);
        let q = to_tokens(tape, &self.wq.forward(tape, &q_src)?, heads, d)?;
        let k = to_tokens(tape, &self.wk.forward(tape, x)?, heads, d)?;
        let v = to_tokens(tape, &self.wv.forward(tape, x)?, heads, d)?;
        let out = self.attn.apply(tape, &q, &k, &v)?;
        let (qh, qw) = self.attn.q_grid;
        let feat = from_tokens(tape, &out, qh, qw)?;
        self.proj.forward(tape, &feat)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        self.wq.collect(&format!("{prefix}.q"), set);
        self.wk.collect(&format!("{prefix}.k"), set);
        self.wv.collect(&format!("{prefix}.v"), set);
        self.proj.collect(&format!("{prefix}.proj"), set);
        set.param(format!("{prefix}.ab"), &self.attn.ab);
    }
}

/// Stage-transition operator: convolutional at high resolution, attention
/// based at low resolution.
pub enum Resample<T: Scalar> {
    /// 3x3 stride-2 conv + norm.
    ConvDown(ConvNorm<T>),
    /// Bilinear 2x then 1x1 conv + norm.
    ConvUp(ConvNorm<T>),
    Attn(AttnResample<T>),
}

impl<T: Scalar> Resample<T> {
    pub fn conv_down(init: &mut Initializer, cin: usize, cout: usize) -> Self {
        Resample::ConvDown(ConvNorm {
            conv: ConvParams::dense(init, cin, cout, 3, 2, 1, false),
            norm: BatchNorm2dParams::new(cout),
        })
    }

    pub fn conv_up(init: &mut Initializer, cin: usize, cout: usize) -> Self {
        Resample::ConvUp(ConvNorm {
            conv: ConvParams::dense(init, cin, cout, 1, 1, 0, false),
            norm: BatchNorm2dParams::new(cout),
        })
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Resample::ConvDown(unit) => {
                let (h, w) = (x.shape()[2], x.shape()[3]);
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::InvalidArg(format!(
                        "conv_downsample: spatial extents {h}x{w} must be even"
                    )));
                }
                unit.forward(tape, x, mode)
            }
            Resample::ConvUp(unit) => {
                let up = ops::bilinear_upsample(tape, x, 2)?;
                unit.forward(tape, &up, mode)
            }
            Resample::Attn(a) => a.forward(tape, x),
        }
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        match self {
            Resample::ConvDown(unit) | Resample::ConvUp(unit) => unit.collect(prefix, set),
            Resample::Attn(a) => a.collect(prefix, set),
        }
    }
}

/// Final prediction head: bilinear 4x then 1x1 conv to class logits.
pub struct Head<T: Scalar> {
    pub conv: ConvParams<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new(init: &mut Initializer, cin: usize, num_classes: usize) -> Self {
        Head {
            conv: ConvParams::dense(init, cin, num_classes, 1, 1, 0, true),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let up = ops::bilinear_upsample(tape, x, 4)?;
        self.conv.forward(tape, &up)
    }

    pub fn collect(&self, set: &mut ParamSet<T>) {
        self.conv.collect("head.conv", set);
    }
}
