use rayon::prelude::*;

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Dense 2-D convolution: x [B,C_in,H,W], w [C_out,C_in,kh,kw],
/// optional bias [C_out]; H' = (H + 2·pad − kh)/stride + 1.
pub fn conv2d<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_grouped(tape, x, w, bias, stride, pad, 1)
}

/// Depthwise 2-D convolution: one filter per channel, w [C,1,kh,kw].
pub fn depthwise_conv2d<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    if x.rank() == 4 && w.rank() == 4 && w.shape()[1] != 1 {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("weight {:?} must have one input channel per filter", w.shape()),
        ));
    }
    let groups = x.shape().get(1).copied().unwrap_or(0);
    conv2d_grouped(tape, x, w, bias, stride, pad, groups)
}

fn conv2d_grouped<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("x {:?} and w {:?} must be rank 4", x.shape(), w.shape()),
        ));
    }
    if stride < 1 {
        return Err(Error::InvalidArg("conv2d: stride must be >= 1".into()));
    }
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
        return Err(Error::shape(
            "conv2d",
            format!(
                "channels disagree: x has {cin}, w is {:?} with {groups} groups",
                w.shape()
            ),
        ));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::InvalidArg(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} does not match {cout} filters", bt.shape()),
            ));
        }
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;

    let xd_ref = x.data();
    let wd_ref = w.data();
    let xd: &[T] = &xd_ref;
    let wdat: &[T] = &wd_ref;
    let bdat: Option<Vec<T>> = bias.map(|t| t.to_vec());
    let mut out = vec![T::zero(); b * cout * oh * ow];
    // One output plane per task: deterministic regardless of thread count.
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pi, plane)| {
        let (bi, co) = (pi / cout, pi % cout);
        if let Some(bv) = &bdat {
            plane.fill(bv[co]);
        }
        let g = co / cout_g;
        for cl in 0..cin_g {
            let ci = g * cin_g + cl;
            let xplane = &xd[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdat[((co * cin_g + cl) * kh + ky) * kw + kx];
                    accumulate_shifted(plane, xplane, wv, h, wd, oh, ow, stride, pad, ky, kx);
                }
            }
        }
    });
    drop(xd_ref);
    drop(wd_ref);

    let mut inputs: Vec<&Tensor<T>> = vec![x, w];
    if let Some(bt) = bias {
        inputs.push(bt);
    }
    let rec = tape.should_record(&inputs);
    let res = Tensor::new_internal(vec![b, cout, oh, ow], out, rec);
    if rec {
        let (xi, wi) = (x.clone(), w.clone());
        let bi_t = bias.cloned();
        tape.record(&res, move |tp, gout| {
            let xd_ref = xi.data();
            let wd_ref = wi.data();
            let xd: &[T] = &xd_ref;
            let wdat: &[T] = &wd_ref;
            if xi.requires_grad() {
                let mut gx = vec![T::zero(); xi.numel()];
                gx.par_chunks_mut(h * wd).enumerate().for_each(|(pi, gplane)| {
                    let (bi, ci) = (pi / cin, pi % cin);
                    let g = ci / cin_g;
                    let cl = ci % cin_g;
                    for col in 0..cout_g {
                        let co = g * cout_g + col;
                        let goplane = &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = wdat[((co * cin_g + cl) * kh + ky) * kw + kx];
                                scatter_shifted(gplane, goplane, wv, h, wd, oh, ow, stride, pad, ky, kx);
                            }
                        }
                    }
                });
                tp.accumulate(&xi, gx);
            }
            if wi.requires_grad() {
                let mut gw = vec![T::zero(); wi.numel()];
                gw.par_chunks_mut(cin_g * kh * kw).enumerate().for_each(|(co, gfilt)| {
                    let g = co / cout_g;
                    for bi in 0..b {
                        let goplane =
                            &gout[(bi * cout + co) * oh * ow..(bi * cout + co + 1) * oh * ow];
                        for cl in 0..cin_g {
                            let ci = g * cin_g + cl;
                            let xplane = &xd[(bi * cin + ci) * h * wd..(bi * cin + ci + 1) * h * wd];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    gfilt[(cl * kh + ky) * kw + kx] += correlate_shifted(
                                        goplane, xplane, h, wd, oh, ow, stride, pad, ky, kx,
                                    );
                                }
                            }
                        }
                    }
                });
                tp.accumulate(&wi, gw);
            }
            if let Some(bt) = &bi_t {
                if bt.requires_grad() {
                    let mut gb = vec![T::zero(); cout];
                    for bi in 0..b {
                        for (co, slot) in gb.iter_mut().enumerate() {
                            let base = (bi * cout + co) * oh * ow;
                            for &gv in &gout[base..base + oh * ow] {
                                *slot += gv;
                            }
                        }
                    }
                    tp.accumulate(bt, gb);
                }
            }
        });
    }
    Ok(res)
}

/// Valid output-column range for a kernel column `kx`: the `ow` values whose
/// source column `ow·stride + kx − pad` lands inside the input.
#[inline]
fn ow_range(wd: usize, ow: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let start = if pad > kx {
        (pad - kx).div_ceil(stride)
    } else {
        0
    };
    let end = if wd + pad > kx {
        (((wd + pad - kx - 1) / stride) + 1).min(ow)
    } else {
        0
    };
    (start.min(end), end)
}

/// plane[oh,ow] += wv * xplane[oh·s+ky−pad, ow·s+kx−pad] over valid positions.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted<T: Scalar>(
    plane: &mut [T],
    xplane: &[T],
    wv: T,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    let (c0, c1) = ow_range(wd, ow, stride, pad, kx);
    if c0 >= c1 {
        return;
    }
    for oy in 0..oh {
        let iy = oy * stride + ky;
        if iy < pad || iy - pad >= h {
            continue;
        }
        let xrow = &xplane[(iy - pad) * wd..(iy - pad + 1) * wd];
        let orow = &mut plane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let xoff = c0 + kx - pad;
            for (o, &xv) in orow[c0..c1].iter_mut().zip(&xrow[xoff..xoff + (c1 - c0)]) {
                *o += wv * xv;
            }
        } else {
            for oc in c0..c1 {
                orow[oc] += wv * xrow[oc * stride + kx - pad];
            }
        }
    }
}

/// gplane[iy,ix] += wv * goplane[oy,oc]: transpose of `accumulate_shifted`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn scatter_shifted<T: Scalar>(
    gplane: &mut [T],
    goplane: &[T],
    wv: T,
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) {
    let (c0, c1) = ow_range(wd, ow, stride, pad, kx);
    if c0 >= c1 {
        return;
    }
    for oy in 0..oh {
        let iy = oy * stride + ky;
        if iy < pad || iy - pad >= h {
            continue;
        }
        let grow = &mut gplane[(iy - pad) * wd..(iy - pad + 1) * wd];
        let gorow = &goplane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let xoff = c0 + kx - pad;
            for (x, &gv) in grow[xoff..xoff + (c1 - c0)].iter_mut().zip(&gorow[c0..c1]) {
                *x += wv * gv;
            }
        } else {
            for oc in c0..c1 {
                grow[oc * stride + kx - pad] += wv * gorow[oc];
            }
        }
    }
}

/// Σ goplane[oy,oc] · xplane[oy·s+ky−pad, oc·s+kx−pad] over valid positions.
#[inline]
#[allow(clippy::too_many_arguments)]
fn correlate_shifted<T: Scalar>(
    goplane: &[T],
    xplane: &[T],
    h: usize,
    wd: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    ky: usize,
    kx: usize,
) -> T {
    let (c0, c1) = ow_range(wd, ow, stride, pad, kx);
    let mut acc = T::zero();
    if c0 >= c1 {
        return acc;
    }
    for oy in 0..oh {
        let iy = oy * stride + ky;
        if iy < pad || iy - pad >= h {
            continue;
        }
        let xrow = &xplane[(iy - pad) * wd..(iy - pad + 1) * wd];
        let gorow = &goplane[oy * ow..(oy + 1) * ow];
        if stride == 1 {
            let xoff = c0 + kx - pad;
            for (&gv, &xv) in gorow[c0..c1].iter().zip(&xrow[xoff..xoff + (c1 - c0)]) {
                acc += gv * xv;
            }
        } else {
            for oc in c0..c1 {
                acc += gorow[oc] * xrow[oc * stride + kx - pad];
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_mixer() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 2, 2, 2], (1..=8).map(|i| i as f64).collect()).unwrap();
        // 1x1 kernel = identity channel mixer
        let w = Tensor::<f64>::from_vec(&[2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap();
        let y = conv2d(&tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn ones_kernel_sums_window() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor::<f64>::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv2d(&tape, &x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.to_vec(), vec![9.0]);
    }

    #[test]
    fn delta_kernel_is_identity_depthwise() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 2, 3, 3], (1..=18).map(|i| i as f64).collect()).unwrap();
        let mut wk = vec![0.0; 2 * 9];
        wk[4] = 1.0; // center of first 3x3 filter
        wk[9 + 4] = 1.0;
        let w = Tensor::<f64>::from_vec(&[2, 1, 3, 3], wk).unwrap();
        let y = depthwise_conv2d(&tape, &x, &w, None, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn rejects_channel_mismatch() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(&[2, 4, 3, 3]).unwrap();
        assert!(conv2d(&tape, &x, &w, None, 1, 1).is_err());
    }

    #[test]
    fn rejects_zero_stride() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]).unwrap();
        assert!(matches!(
            conv2d(&tape, &x, &w, None, 0, 1),
            Err(Error::InvalidArg(_))
        ));
    }

    #[test]
    fn output_extent_formula() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::zeros(&[2, 3, 8, 8]).unwrap();
        let w = Tensor::<f64>::zeros(&[4, 3, 3, 3]).unwrap();
        let y = conv2d(&tape, &x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 4]);
    }
}
