use crate::dtype::{t, Scalar};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Bilinear upsampling by an integer factor (2 or 4), align_corners=false:
/// output pixel o samples source coordinate (o + 0.5)/factor − 0.5, clamped
/// to the input extent. The gradient is the transpose of the interpolation.
pub fn bilinear_upsample<T: Scalar>(
    tape: &Tape<T>,
    x: &Tensor<T>,
    factor: usize,
) -> Result<Tensor<T>> {
    if factor != 2 && factor != 4 {
        return Err(Error::InvalidArg(format!(
            "bilinear_upsample: factor must be 2 or 4, got {factor}"
        )));
    }
    if x.rank() != 4 {
        return Err(Error::shape(
            "bilinear_upsample",
            format!("expected rank 4, got {:?}", x.shape()),
        ));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h * factor, w * factor);

    // Per-output-row/column sampling tables shared across planes.
    let table = |out_len: usize, in_len: usize| -> Vec<(usize, usize, T)> {
        (0..out_len)
            .map(|o| {
                let src = (o as f64 + 0.5) / factor as f64 - 0.5;
                let src = src.clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                let frac = src - lo as f64;
                (lo, hi, t::<T>(frac))
            })
            .collect()
    };
    let rows = table(oh, h);
    let cols = table(ow, w);

    let xd = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for p in 0..b * c {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for &(ry0, ry1, fy) in &rows {
            let r0 = &plane[ry0 * w..(ry0 + 1) * w];
            let r1 = &plane[ry1 * w..(ry1 + 1) * w];
            for &(cx0, cx1, fx) in &cols {
                let top = r0[cx0] + (r0[cx1] - r0[cx0]) * fx;
                let bot = r1[cx0] + (r1[cx1] - r1[cx0]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    drop(xd);
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(vec![b, c, oh, ow], out, rec);
    if rec {
        let xi = x.clone();
        tape.record(&res, move |tp, g| {
            if !xi.requires_grad() {
                return;
            }
            let one = T::one();
            let mut gx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let gplane = &mut gx[p * h * w..(p + 1) * h * w];
                let goplane = &g[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(ry0, ry1, fy)) in rows.iter().enumerate() {
                    for (ox, &(cx0, cx1, fx)) in cols.iter().enumerate() {
                        let gv = goplane[oy * ow + ox];
                        gplane[ry0 * w + cx0] += gv * (one - fy) * (one - fx);
                        gplane[ry0 * w + cx1] += gv * (one - fy) * fx;
                        gplane[ry1 * w + cx0] += gv * fy * (one - fx);
                        gplane[ry1 * w + cx1] += gv * fy * fx;
                    }
                }
            }
            tp.accumulate(&xi, gx);
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stays_constant() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::full(&[1, 2, 3, 3], 1.25).unwrap();
        let y = bilinear_upsample(&tape, &x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        assert!(y.to_vec().iter().all(|&v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn single_pixel_replicates() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let y = bilinear_upsample(&tape, &x, 2).unwrap();
        assert_eq!(y.to_vec(), vec![3.0; 4]);
    }

    #[test]
    fn rejects_unsupported_factor() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]).unwrap();
        assert!(bilinear_upsample(&tape, &x, 3).is_err());
    }

    #[test]
    fn gradient_is_transpose_of_forward() {
        // For a linear map, grad of sum(out) = column sums of the matrix;
        // bilinear weights per output sum to 1, so grad of sum spreads
        // total weight factor^2 across inputs.
        let tape = Tape::new();
        let x = Tensor::<f64>::param(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = bilinear_upsample(&tape, &x, 2).unwrap();
        let s = crate::ops::sum_all(&tape, &y);
        tape.backward(&s).unwrap();
        let g = x.grad().unwrap();
        let total: f64 = g.iter().sum();
        assert!((total - 16.0).abs() < 1e-9);
    }
}
