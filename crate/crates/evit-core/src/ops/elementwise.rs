use super::{broadcast_shape, IndexMap};
use crate::dtype::{t, Scalar};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

// Tanh-approximation GELU constants.
const GELU_CUBIC: f64 = 0.044715;

fn sqrt_2_over_pi<T: Scalar>() -> T {
    t((2.0 / std::f64::consts::PI).sqrt())
}

/// Shared driver for broadcasting binary ops.
///
/// `fwd(a, b) -> out`, `da(g, a, b) -> contribution to a`, likewise `db`.
fn binary_bcast<T, F, Ga, Gb>(
    op: &'static str,
    tape: &Tape<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    fwd: F,
    da: Ga,
    db: Gb,
) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(T, T) -> T,
    Ga: Fn(T, T, T) -> T + 'static,
    Gb: Fn(T, T, T) -> T + 'static,
{
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let amap = IndexMap::new(a.shape(), &out_shape);
    let bmap = IndexMap::new(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n);
    if matches!(amap, IndexMap::Identity) && matches!(bmap, IndexMap::Identity) {
        out.extend(ad.iter().zip(bd.iter()).map(|(&x, &y)| fwd(x, y)));
    } else {
        for i in 0..n {
            out.push(fwd(ad[amap.map(i)], bd[bmap.map(i)]));
        }
    }
    drop(ad);
    drop(bd);
    let rec = tape.should_record(&[a, b]);
    let res = Tensor::new_internal(out_shape.clone(), out, rec);
    if rec {
        let (ai, bi) = (a.clone(), b.clone());
        tape.record(&res, move |tp, g| {
            let amap = IndexMap::new(ai.shape(), &out_shape);
            let bmap = IndexMap::new(bi.shape(), &out_shape);
            let (ad, bd) = (ai.data(), bi.data());
            if ai.requires_grad() {
                let mut ga = vec![T::zero(); ai.numel()];
                for (i, &gv) in g.iter().enumerate() {
                    let (ia, ib) = (amap.map(i), bmap.map(i));
                    ga[ia] += da(gv, ad[ia], bd[ib]);
                }
                tp.accumulate(&ai, ga);
            }
            if bi.requires_grad() {
                let mut gb = vec![T::zero(); bi.numel()];
                for (i, &gv) in g.iter().enumerate() {
                    let (ia, ib) = (amap.map(i), bmap.map(i));
                    gb[ib] += db(gv, ad[ia], bd[ib]);
                }
                drop(ad);
                drop(bd);
                tp.accumulate(&bi, gb);
            }
        });
    }
    Ok(res)
}

/// Elementwise sum with axis-of-1 broadcasting.
pub fn add<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_bcast(
        "add",
        tape,
        a,
        b,
        |x, y| x + y,
        |g, _, _| g,
        |g, _, _| g,
    )
}

/// Elementwise difference with axis-of-1 broadcasting.
pub fn sub<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_bcast(
        "sub",
        tape,
        a,
        b,
        |x, y| x - y,
        |g, _, _| g,
        |g, _, _| -g,
    )
}

/// Elementwise product with axis-of-1 broadcasting.
pub fn mul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_bcast(
        "mul",
        tape,
        a,
        b,
        |x, y| x * y,
        |g, _, y| g * y,
        |g, x, _| g * x,
    )
}

/// Elementwise quotient with axis-of-1 broadcasting.
pub fn div<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary_bcast(
        "div",
        tape,
        a,
        b,
        |x, y| x / y,
        |g, _, y| g / y,
        |g, x, y| -g * x / (y * y),
    )
}

fn unary<T, F, D>(tape: &Tape<T>, x: &Tensor<T>, fwd: F, dfn: D) -> Tensor<T>
where
    T: Scalar,
    F: Fn(T) -> T,
    D: Fn(T) -> T + 'static,
{
    let out: Vec<T> = x.data().iter().map(|&v| fwd(v)).collect();
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(x.shape().to_vec(), out, rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            let xd = xi.data();
            let gin: Vec<T> = g.iter().zip(xd.iter()).map(|(&gv, &xv)| gv * dfn(xv)).collect();
            drop(xd);
            tp.accumulate(&xi, gin);
        });
    }
    res
}

/// Multiply every element by a constant.
pub fn scale<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c: T = t(c);
    unary(tape, x, move |v| v * c, move |_| c)
}

/// Add a constant to every element.
pub fn add_scalar<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c: T = t(c);
    unary(tape, x, move |v| v + c, |_| T::one())
}

pub fn relu<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    unary(
        tape,
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |v| if v > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let f = |v: T| T::one() / (T::one() + (-v).exp());
    unary(tape, x, f, move |v| {
        let s = f(v);
        s * (T::one() - s)
    })
}

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
    let k: T = sqrt_2_over_pi();
    let c: T = t(GELU_CUBIC);
    let half: T = t(0.5);
    let three: T = t(3.0);
    unary(
        tape,
        x,
        move |v| {
            let u = k * (v + c * v * v * v);
            half * v * (T::one() + u.tanh())
        },
        move |v| {
            let u = k * (v + c * v * v * v);
            let th = u.tanh();
            let sech2 = T::one() - th * th;
            half * (T::one() + th) + half * v * sech2 * k * (T::one() + three * c * v * v)
        },
    )
}

/// Multiply each channel of a [B,C,H,W] map by the matching entry of a [C]
/// vector (the layer-scale primitive).
pub fn scale_channels<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    s: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape(
            "scale_channels",
            format!("expected rank-4 input, got {:?}", x.shape()),
        ));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if s.shape() != [c] {
        return Err(Error::shape(
            "scale_channels",
            format!("scale {:?} does not match channels {c}", s.shape()),
        ));
    }
    let plane = h * w;
    let xd = x.data();
    let sd = s.data();
    let mut out = Vec::with_capacity(xd.len());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let sv = sd[ci];
            out.extend(xd[base..base + plane].iter().map(|&v| v * sv));
        }
    }
    drop(xd);
    drop(sd);
    let rec = tape.should_record(&[x, s]);
    let res = Tensor::new_internal(x.shape().to_vec(), out, rec);
    if rec {
        let (xi, si) = (x.clone(), s.clone());
        tape.record(&res, move |tp, g| {
            let xd = xi.data();
            let sd = si.data();
            if xi.requires_grad() {
                let mut gx = vec![T::zero(); xd.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let sv = sd[ci];
                        for k in 0..plane {
                            gx[base + k] = g[base + k] * sv;
                        }
                    }
                }
                tp.accumulate(&xi, gx);
            }
            if si.requires_grad() {
                let mut gs = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let mut acc = T::zero();
                        for k in 0..plane {
                            acc += g[base + k] * xd[base + k];
                        }
                        gs[ci] += acc;
                    }
                }
                drop(xd);
                drop(sd);
                tp.accumulate(&si, gs);
            }
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(sigmoid(&tape, &x).to_vec(), vec![0.5]);
    }

    #[test]
    fn relu_kills_negatives() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[4], vec![-3.0, -0.1, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&tape, &x).to_vec(), vec![0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn add_broadcasts_from_one() {
        let tape = Tape::disabled();
        let a = Tensor::<f64>::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1, 3], vec![10., 20., 30.]).unwrap();
        let c = add(&tape, &a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![11., 22., 33., 14., 25., 36.]);
    }

    #[test]
    fn add_rejects_incompatible() {
        let tape = Tape::disabled();
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[2, 4]).unwrap();
        assert!(add(&tape, &a, &b).is_err());
    }

    #[test]
    fn scale_channels_matches_manual() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = Tensor::<f64>::from_vec(&[2], vec![10.0, 0.5]).unwrap();
        let y = scale_channels(&tape, &x, &s).unwrap();
        assert_eq!(y.to_vec(), vec![10., 20., 1.5, 2.0]);
    }

    #[test]
    fn mul_gradient_broadcast_sums() {
        let tape = Tape::new();
        let a = Tensor::<f64>::param(&[1, 3], vec![2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::param(&[2, 3], vec![1.0; 6]).unwrap();
        let c = mul(&tape, &a, &b).unwrap();
        let s = crate::ops::sum_all(&tape, &c);
        tape.backward(&s).unwrap();
        // a is broadcast over 2 rows of ones: grad = 2 per element.
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
    }
}
