use std::sync::Arc;

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Head-splitting, logit shaping, and softmax aggregation shared by the
/// in-block attention and the attention resamplers.
///
/// The bias table has one row per head and one column per relative offset
/// between a query's representative key-grid position and a key position;
/// `bias_index` flattens that lookup for a fixed (query grid, key grid)
/// pair.
pub struct AttentionCore<T: Scalar> {
    pub heads: usize,
    pub head_dim: usize,
    pub q_grid: (usize, usize),
    pub k_grid: (usize, usize),
    pub ab: Tensor<T>,
    pub bias_index: Arc<Vec<usize>>,
    /// Multiply logits by 1/√d before softmax.
    pub scale_logits: bool,
    /// Apply softmax(+bias); when off the op is the raw (Q·Kᵀ)·V form and
    /// the bias table is unused.
    pub softmax_on: bool,
}

impl<T: Scalar> AttentionCore<T> {
    pub fn new(
        heads: usize,
        head_dim: usize,
        q_grid: (usize, usize),
        k_grid: (usize, usize),
        ab: Tensor<T>,
        scale_logits: bool,
        softmax_on: bool,
    ) -> Self {
        let bias_index = Arc::new(bias_index_for(q_grid, k_grid));
        AttentionCore {
            heads,
            head_dim,
            q_grid,
            k_grid,
            ab,
            bias_index,
            scale_logits,
            softmax_on,
        }
    }

    pub fn nq(&self) -> usize {
        self.q_grid.0 * self.q_grid.1
    }

    pub fn nk(&self) -> usize {
        self.k_grid.0 * self.k_grid.1
    }

    /// q: [B,H,Nq,d], k/v: [B,H,Nk,d] -> [B,H,Nq,d].
    pub fn apply(
        &self,
        tape: &Tape<T>,
        q: &Tensor<T>,
        k: &Tensor<T>,
        v: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if q.shape()[2] != self.nq() {
            return Err(Error::BiasExtentMismatch {
                expected: self.nq(),
                got: q.shape()[2],
            });
        }
        if k.shape()[2] != self.nk() {
            return Err(Error::BiasExtentMismatch {
                expected: self.nk(),
                got: k.shape()[2],
            });
        }
        let kt = ops::permute(tape, k, &[0, 1, 3, 2])?;
        let logits = ops::matmul(tape, q, &kt)?;
        if !self.softmax_on {
            return ops::matmul(tape, &logits, v);
        }
        let logits = if self.scale_logits {
            ops::scale(tape, &logits, 1.0 / (self.head_dim as f64).sqrt())
        } else {
            logits
        };
        let bias = ops::rel_bias(tape, &self.ab, &self.bias_index, self.nq(), self.nk())?;
        let logits = ops::add(tape, &logits, &bias)?;
        let attn = ops::softmax_lastdim(tape, &logits)?;
        ops::matmul(tape, &attn, v)
    }
}

/// Offset-table extent for a key grid: (2h−1)·(2w−1) relative positions.
pub fn bias_table_len(k_grid: (usize, usize)) -> usize {
    (2 * k_grid.0 - 1) * (2 * k_grid.1 - 1)
}

/// Flattened (query, key) → offset-slot index. A query cell maps to the
/// key-grid coordinate floor(q·kh/qh); offsets are then regular relative
/// positions on the key grid.
pub fn bias_index_for(q_grid: (usize, usize), k_grid: (usize, usize)) -> Vec<usize> {
    let (qh, qw) = q_grid;
    let (kh, kw) = k_grid;
    let span_w = 2 * kw - 1;
    let mut index = Vec::with_capacity(qh * qw * kh * kw);
    for qy in 0..qh {
        let ry = qy * kh / qh;
        for qx in 0..qw {
            let rx = qx * kw / qw;
            for ky in 0..kh {
                let dy = ry as isize - ky as isize + (kh as isize - 1);
                for kx in 0..kw {
                    let dx = rx as isize - kx as isize + (kw as isize - 1);
                    index.push(dy as usize * span_w + dx as usize);
                }
            }
        }
    }
    index
}

/// [B, H·d, h, w] -> token layout [B, H, h·w, d].
pub fn to_tokens<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    heads: usize,
    head_dim: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if c != heads * head_dim {
        return Err(Error::shape(
            "to_tokens",
            format!("{c} channels != {heads} heads x {head_dim} dims"),
        ));
    }
    let r = ops::reshape(tape, x, &[b, heads, head_dim, h * w])?;
    ops::permute(tape, &r, &[0, 1, 3, 2])
}

/// Token layout [B, H, h·w, d] -> [B, H·d, h, w].
pub fn from_tokens<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (b, heads, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if n != h * w {
        return Err(Error::shape(
            "from_tokens",
            format!("{n} tokens cannot fill a {h}x{w} grid"),
        ));
    }
    let p = ops::permute(tape, x, &[0, 1, 3, 2])?;
    ops::reshape(tape, &p, &[b, heads * d, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bias_index_identity_grid() {
        // 2x2 grid attending to itself: offset of a token with itself is the
        // center slot ((h-1)·(2w-1) + (w-1)).
        let idx = bias_index_for((2, 2), (2, 2));
        assert_eq!(idx.len(), 16);
        let center = 1 * 3 + 1;
        for q in 0..4 {
            assert_eq!(idx[q * 4 + q], center);
        }
        assert!(idx.iter().all(|&i| i < bias_table_len((2, 2))));
    }

    #[test]
    fn bias_index_scaled_grids_stay_in_table() {
        for (qg, kg) in [((2, 2), (4, 4)), ((4, 4), (2, 2)), ((3, 3), (3, 3))] {
            let idx = bias_index_for(qg, kg);
            assert_eq!(idx.len(), qg.0 * qg.1 * kg.0 * kg.1);
            assert!(idx.iter().all(|&i| i < bias_table_len(kg)));
        }
    }

    #[test]
    fn token_round_trip() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 6, 2, 2], (0..24).map(|i| i as f64).collect()).unwrap();
        let tok = to_tokens(&tape, &x, 2, 3).unwrap();
        assert_eq!(tok.shape(), &[1, 2, 4, 3]);
        let back = from_tokens(&tape, &tok, 2, 2).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }
}
