use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Max-subtracted softmax over the last axis. Each last-axis slice of the
/// output sums to 1 for finite input.
pub fn softmax_lastdim<T: Scalar>(tape: &Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 1 {
        return Err(Error::shape("softmax_lastdim", "rank must be >= 1"));
    }
    let len = *x.shape().last().unwrap();
    let rows = x.numel() / len;
    let xd = x.data();
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &xd[r * len..(r + 1) * len];
        let orow = &mut out[r * len..(r + 1) * len];
        let mut mx = row[0];
        for &v in row.iter().skip(1) {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            denom += e;
        }
        for o in orow.iter_mut() {
            *o = *o / denom;
        }
    }
    drop(xd);
    let rec = tape.should_record(&[x]);
    let res = Tensor::new_internal(x.shape().to_vec(), out, rec);
    if rec {
        let xi = x.clone();
        let oi = res.clone();
        tape.record(&res, move |tp, g| {
            if !xi.requires_grad() {
                return;
            }
            // dx = y ⊙ (g − <g, y>) per row
            let y = oi.data();
            let mut gx = vec![T::zero(); y.len()];
            for r in 0..rows {
                let ys = &y[r * len..(r + 1) * len];
                let gs = &g[r * len..(r + 1) * len];
                let mut dot = T::zero();
                for (yv, gv) in ys.iter().zip(gs) {
                    dot += *yv * *gv;
                }
                for ((o, &yv), &gv) in gx[r * len..(r + 1) * len].iter_mut().zip(ys).zip(gs) {
                    *o = yv * (gv - dot);
                }
            }
            drop(y);
            tp.accumulate(&xi, gx);
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_row_is_uniform() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[4], vec![2.5; 4]).unwrap();
        let y = softmax_lastdim(&tape, &x).unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_quarter_three_quarters() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = softmax_lastdim(&tape, &x).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn large_inputs_do_not_overflow() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(&[2], vec![1000.0, 1000.0]).unwrap();
        let y = softmax_lastdim(&tape, &x).unwrap().to_vec();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn rows_sum_to_one() {
        let tape = Tape::disabled();
        let x = Tensor::<f64>::from_vec(
            &[3, 5],
            (0..15).map(|i| ((i * 37) % 11) as f64 / 3.0 - 1.5).collect(),
        )
        .unwrap();
        let y = softmax_lastdim(&tape, &x).unwrap();
        let d = y.to_vec();
        for r in 0..3 {
            let s: f64 = d[r * 5..(r + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(d[r * 5..(r + 1) * 5].iter().all(|&v| v > 0.0));
        }
    }
}
