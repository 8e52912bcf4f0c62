//! Forward operators with recorded reverse-mode gradients.
//!
//! Every op follows the same pattern: validate shapes, compute the output,
//! and, when the tape is enabled and an input requires grad, record a
//! backward rule that routes gradient contributions through
//! [`Tape::accumulate`]. Backward rules are plain loops over buffers; they
//! never invoke recorded ops.

mod bias;
mod conv;
mod elementwise;
mod matmul;
mod norm;
mod pool;
mod resize;
mod shape;
mod softmax;

pub use bias::rel_bias;
pub use conv::{conv2d, depthwise_conv2d};
pub use elementwise::{
    add, add_scalar, div, gelu, mul, relu, scale, scale_channels, sigmoid, sub,
};
pub use matmul::matmul;
pub use norm::{batchnorm2d, BatchNorm2dParams, Mode};
pub use pool::{avg_pool2x2, global_avg_pool, nearest_upsample2x};
pub use resize::bilinear_upsample;
pub use shape::{concat_channels, mean_all, permute, reshape, sum_all, sum_axis};
pub use softmax::softmax_lastdim;

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps output linear indices to a (possibly broadcast) input's indices.
pub(crate) enum IndexMap {
    /// Shapes identical.
    Identity,
    /// Input repeats along leading axes: `i % len`.
    Cycle { len: usize },
    /// Input constant along trailing axes: `i / tail`.
    Chunk { tail: usize },
    /// General case: decompose by output shape, dot with zeroed strides.
    Strided {
        out_strides: Vec<usize>,
        in_strides: Vec<usize>,
    },
}

impl IndexMap {
    pub(crate) fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        debug_assert_eq!(in_shape.len(), out_shape.len());
        if in_shape == out_shape {
            return IndexMap::Identity;
        }
        let rank = out_shape.len();
        // First axis (scanning from the left) where the shapes still agree.
        let lead_eq = in_shape
            .iter()
            .zip(out_shape)
            .take_while(|(a, b)| a == b)
            .count();
        let trail_eq = in_shape
            .iter()
            .rev()
            .zip(out_shape.iter().rev())
            .take_while(|(a, b)| a == b)
            .count();
        let bcast_only_leading = in_shape[..rank - trail_eq].iter().all(|&d| d == 1);
        if bcast_only_leading {
            let len: usize = in_shape.iter().product();
            return IndexMap::Cycle { len };
        }
        let bcast_only_trailing = in_shape[lead_eq..].iter().all(|&d| d == 1);
        if bcast_only_trailing {
            let tail: usize = out_shape[lead_eq..].iter().product();
            return IndexMap::Chunk { tail };
        }
        let mut in_strides = strides_of(in_shape);
        for (s, (&i, &o)) in in_strides.iter_mut().zip(in_shape.iter().zip(out_shape)) {
            if i == 1 && o != 1 {
                *s = 0;
            }
        }
        IndexMap::Strided {
            out_strides: strides_of(out_shape),
            in_strides,
        }
    }

    #[inline]
    pub(crate) fn map(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Cycle { len } => i % len,
            IndexMap::Chunk { tail } => i / tail,
            IndexMap::Strided {
                out_strides,
                in_strides,
            } => {
                let mut rem = i;
                let mut off = 0;
                for (os, is) in out_strides.iter().zip(in_strides) {
                    let q = rem / os;
                    rem %= os;
                    off += q * is;
                }
                off
            }
        }
    }
}

/// Output shape for an axis-of-1 broadcast of two equal-rank shapes.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> crate::error::Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(crate::error::Error::shape(
            op,
            format!("ranks differ: {a:?} vs {b:?}"),
        ));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(crate::error::Error::shape(
                    op,
                    format!("incompatible shapes {a:?} vs {b:?}"),
                ))
            }
        })
        .collect()
}
