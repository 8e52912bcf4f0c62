use super::strides_of;
use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Reinterpret the (contiguous, row-major) data under a new shape.
pub fn reshape<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if shape.iter().any(|&d| d == 0) || n != x.numel() {
        return Err(Error::shape(
            "reshape",
            format!("{:?} -> {:?} changes element count", x.shape(), shape),
        ));
    }
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(shape.to_vec(), x.to_vec(), rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            if xi.requires_grad() {
                tp.accumulate(&xi, g.to_vec());
            }
        });
    }
    Ok(res)
}

/// Reorder axes; the result is materialized contiguous.
pub fn permute<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(Error::InvalidArg(format!(
            "permute: {axes:?} is not a permutation of 0..{rank}"
        )));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let out = permute_data(&x.data(), x.shape(), axes);
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(out_shape, out, rec);
    if rec {
        let xi = x.clone();
        let inverse: Vec<usize> = {
            let mut inv = vec![0; rank];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let fwd_shape: Vec<usize> = axes.iter().map(|&a| xi.shape()[a]).collect();
        tape.record(&res, move |tp, g| {
            if xi.requires_grad() {
                tp.accumulate(&xi, permute_data(g, &fwd_shape, &inverse));
            }
        });
    }
    Ok(res)
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides = strides_of(&out_shape);
    let n = data.len();
    let mut out = vec![T::zero(); n];
    // Walk the output in order, computing the source offset incrementally.
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    for slot in out.iter_mut() {
        *slot = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    let _ = out_strides;
    out
}

/// Concatenate two [B,C,H,W] maps along the channel axis.
pub fn concat_channels<T: Scalar>(
    tape: &Tape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    if a.rank() != 4 || b.rank() != 4 {
        return Err(Error::shape("concat_channels", "inputs must be rank 4"));
    }
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::shape(
            "concat_channels",
            format!("non-channel extents differ: {sa:?} vs {sb:?}"),
        ));
    }
    let (bn, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let mut out = Vec::with_capacity((ca + cb) * bn * plane);
    {
        let (ad, bd) = (a.data(), b.data());
        for bi in 0..bn {
            out.extend_from_slice(&ad[bi * ca * plane..(bi + 1) * ca * plane]);
            out.extend_from_slice(&bd[bi * cb * plane..(bi + 1) * cb * plane]);
        }
    }
    let rec = tape.should_record(&[a, b]);
    let res = Tensor::new_internal(vec![bn, ca + cb, sa[2], sa[3]], out, rec);
    if rec {
        let (ai, bi_) = (a.clone(), b.clone());
        tape.record(&res, move |tp, g| {
            let row = (ca + cb) * plane;
            if ai.requires_grad() {
                let mut ga = Vec::with_capacity(bn * ca * plane);
                for bi in 0..bn {
                    ga.extend_from_slice(&g[bi * row..bi * row + ca * plane]);
                }
                tp.accumulate(&ai, ga);
            }
            if bi_.requires_grad() {
                let mut gb = Vec::with_capacity(bn * cb * plane);
                for bi in 0..bn {
                    gb.extend_from_slice(&g[bi * row + ca * plane..(bi + 1) * row]);
                }
                tp.accumulate(&bi_, gb);
            }
        });
    }
    Ok(res)
}

/// Sum out one axis.
pub fn sum_axis<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::InvalidArg(format!(
            "sum_axis: axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let base = (o * len + k) * inner;
            let obase = o * inner;
            for i in 0..inner {
                out[obase + i] += xd[base + i];
            }
        }
    }
    drop(xd);
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(out_shape, out, rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            if xi.requires_grad() {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        let obase = o * inner;
                        gx[base..base + inner].copy_from_slice(&g[obase..obase + inner]);
                    }
                }
                tp.accumulate(&xi, gx);
            }
        });
    }
    Ok(res)
}

/// Sum of all elements, as a [1] tensor.
pub fn sum_all<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data().iter() {
        acc += v;
    }
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(vec![1], vec![acc], rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            if xi.requires_grad() {
                tp.accumulate(&xi, vec![g[0]; xi.numel()]);
            }
        });
    }
    res
}

/// Mean of all elements, as a [1] tensor.
pub fn mean_all<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let s = sum_all(tape, x);
    super::scale(tape, &s, 1.0 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_round_trips() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[2, 3, 4], (0..24).map(|i| i as f64).collect()).unwrap();
        let y = permute(&tape, &x, &[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let back = permute(&tape, &y, &[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn permute_swaps_last_two() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = permute(&tape, &x, &[1, 0]).unwrap();
        assert_eq!(y.to_vec(), vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn sum_axis_middle() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[2, 3, 2], (1..=12).map(|i| i as f64).collect()).unwrap();
        let y = sum_axis(&tape, &x, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_eq!(y.to_vec(), vec![9., 12., 27., 30.]);
    }

    #[test]
    fn concat_then_split_grads() {
        let tape = Tape::new();
        let a = Tensor::<f64>::param(&[1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::param(&[1, 1, 1, 2], vec![5., 6.]).unwrap();
        let c = concat_channels(&tape, &a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 3, 1, 2]);
        assert_eq!(c.to_vec(), vec![1., 2., 3., 4., 5., 6.]);
        let s = sum_all(&tape, &c);
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 2]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = Tensor::<f64>::param(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = sum_all(&tape, &x);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn two_backwards_double_the_gradient() {
        let tape = Tape::new();
        let x = Tensor::<f64>::param(&[3], vec![1., 2., 3.]).unwrap();
        let y = crate::ops::mul(&tape, &x, &x).unwrap();
        let s = sum_all(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2., 4., 6.]);
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4., 8., 12.]);
    }
}
