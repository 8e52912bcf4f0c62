use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::init::Initializer;
use crate::nn::{collect_bn, ConvParams, ParamSet};
use crate::ops::{self, BatchNorm2dParams, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Channel-attention skip connection. The gate averages two pooled
/// descriptors, att = (MLP_x(GAP(x)) + MLP_g(GAP(g)))/2, and emits
/// ReLU(x ⊙ σ(att)); the fusion then concatenates the gated decoder
/// feature with the raw encoder feature and projects back to C channels.
pub struct SkipFusion<T: Scalar> {
    pub mlp_x_w: Tensor<T>,
    pub mlp_x_b: Tensor<T>,
    pub mlp_g_w: Tensor<T>,
    pub mlp_g_b: Tensor<T>,
    pub fuse: ConvParams<T>,
    pub fuse_norm: BatchNorm2dParams<T>,
    pub channels: usize,
}

impl<T: Scalar> SkipFusion<T> {
    pub fn new(init: &mut Initializer, channels: usize) -> Self {
        SkipFusion {
            mlp_x_w: init.xavier_linear(&[channels, channels]),
            mlp_x_b: init.zeros(&[1, channels]),
            mlp_g_w: init.xavier_linear(&[channels, channels]),
            mlp_g_b: init.zeros(&[1, channels]),
            fuse: ConvParams::dense(init, 2 * channels, channels, 1, 1, 0, false),
            fuse_norm: BatchNorm2dParams::new(channels),
            channels,
        }
    }

    fn check_pair(&self, op: &'static str, x: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
        if x.shape() != g.shape() {
            return Err(Error::shape(
                op,
                format!("decoder {:?} vs encoder {:?}", x.shape(), g.shape()),
            ));
        }
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return Err(Error::shape(
                op,
                format!("expected [B,{},h,w], got {:?}", self.channels, x.shape()),
            ));
        }
        Ok(())
    }

    /// gated = ReLU(x ⊙ σ((MLP_x(GAP(x)) + MLP_g(GAP(g)))/2)), gate
    /// broadcast over the spatial axes. `x` is the decoder feature, `g`
    /// the encoder skip feature.
    pub fn channel_attention_gate(
        &self,
        tape: &Tape<T>,
        x: &Tensor<T>,
        g: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_pair("channel_attention_gate", x, g)?;
        let b = x.shape()[0];
        let px = ops::global_avg_pool(tape, x)?;
        let pg = ops::global_avg_pool(tape, g)?;
        let ax = ops::add(tape, &ops::matmul(tape, &px, &self.mlp_x_w)?, &self.mlp_x_b)?;
        let ag = ops::add(tape, &ops::matmul(tape, &pg, &self.mlp_g_w)?, &self.mlp_g_b)?;
        let att_avg = ops::scale(tape, &ops::add(tape, &ax, &ag)?, 0.5);
        let gate = ops::sigmoid(tape, &att_avg);
        let gate4 = ops::reshape(tape, &gate, &[b, self.channels, 1, 1])?;
        let gated = ops::mul(tape, x, &gate4)?;
        Ok(ops::relu(tape, &gated))
    }

    /// concat(gate(x,g), g) -> 1x1 conv + norm back to C channels.
    pub fn fuse(
        &self,
        tape: &Tape<T>,
        x_dec: &Tensor<T>,
        g_enc: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        self.check_pair("skip_fuse", x_dec, g_enc)?;
        let gated = self.channel_attention_gate(tape, x_dec, g_enc)?;
        let cat = ops::concat_channels(tape, &gated, g_enc)?;
        let y = self.fuse.forward(tape, &cat)?;
        ops::batchnorm2d(tape, &y, &self.fuse_norm, mode)
    }

    pub fn collect(&self, prefix: &str, set: &mut ParamSet<T>) {
        set.param(format!("{prefix}.mlp_x.w"), &self.mlp_x_w);
        set.param(format!("{prefix}.mlp_x.b"), &self.mlp_x_b);
        set.param(format!("{prefix}.mlp_g.w"), &self.mlp_g_w);
        set.param(format!("{prefix}.mlp_g.b"), &self.mlp_g_b);
        self.fuse.collect(&format!("{prefix}.fuse"), set);
        collect_bn(&format!("{prefix}.fuse_norm"), &self.fuse_norm, set);
    }
}
