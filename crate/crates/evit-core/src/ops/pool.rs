use crate::dtype::{t, Scalar};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn rank4<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {:?}", x.shape())));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Spatial mean per channel: [B,C,H,W] -> [B,C].
pub fn global_avg_pool<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = rank4("global_avg_pool", x)?;
    let plane = h * w;
    let inv: T = t(1.0 / plane as f64);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c);
    for p in 0..b * c {
        let mut acc = T::zero();
        for &v in &xd[p * plane..(p + 1) * plane] {
            acc += v;
        }
        out.push(acc * inv);
    }
    drop(xd);
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(vec![b, c], out, rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            if xi.requires_grad() {
                let mut gx = vec![T::zero(); b * c * plane];
                for p in 0..b * c {
                    let gv = g[p] * inv;
                    gx[p * plane..(p + 1) * plane].fill(gv);
                }
                tp.accumulate(&xi, gx);
            }
        });
    }
    Ok(res)
}

/// Non-overlapping 2x2 mean pooling; spatial extents must be even.
pub fn avg_pool2x2<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = rank4("avg_pool2x2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArg(format!(
            "avg_pool2x2: spatial extents must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter: T = t(0.25);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out.push((r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter);
            }
        }
    }
    drop(xd);
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(vec![b, c, oh, ow], out, rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            if xi.requires_grad() {
                let mut gx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    let gplane = &mut gx[p * h * w..(p + 1) * h * w];
                    let goplane = &g[p * oh * ow..(p + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = goplane[oy * ow + ox] * quarter;
                            gplane[2 * oy * w + 2 * ox] += gv;
                            gplane[2 * oy * w + 2 * ox + 1] += gv;
                            gplane[(2 * oy + 1) * w + 2 * ox] += gv;
                            gplane[(2 * oy + 1) * w + 2 * ox + 1] += gv;
                        }
                    }
                }
                tp.accumulate(&xi, gx);
            }
        });
    }
    Ok(res)
}

/// Nearest-neighbor 2x duplication of each pixel: [B,C,H,W] -> [B,C,2H,2W].
pub fn nearest_upsample2x<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = rank4("nearest_upsample2x", x)?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / 2]);
            }
        }
    }
    drop(xd);
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(vec![b, c, oh, ow], out, rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            if xi.requires_grad() {
                let mut gx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    let gplane = &mut gx[p * h * w..(p + 1) * h * w];
                    let goplane = &g[p * oh * ow..(p + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gplane[(oy / 2) * w + ox / 2] += goplane[oy * ow + ox];
                        }
                    }
                }
                tp.accumulate(&xi, gx);
            }
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_of_constant_is_constant() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 2.5).unwrap();
        let y = global_avg_pool(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.to_vec().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn gap_hand_computed() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = global_avg_pool(&tape, &x).unwrap();
        assert_eq!(y.to_vec(), vec![2.5]);
    }

    #[test]
    fn avg_pool_halves_extents() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = avg_pool2x2(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.to_vec(), vec![3.5, 5.5]);
    }

    #[test]
    fn avg_pool_rejects_odd() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::zeros(&[1, 1, 3, 4]).unwrap();
        assert!(avg_pool2x2(&tape, &x).is_err());
    }

    #[test]
    fn nearest_duplicates() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![1., 2.]).unwrap();
        let y = nearest_upsample2x(&tape, &x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.to_vec(), vec![1., 1., 2., 2., 1., 1., 2., 2.]);
    }
}
