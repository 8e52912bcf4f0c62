use std::sync::Arc;

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Expand a relative-position bias table [H, T] into logits-shaped
/// [1, H, Nq, Nk] using a precomputed offset index (length Nq·Nk, values
/// < T). The gradient scatter-adds back into the table.
pub fn rel_bias<T: Scalar>(
    tape: &Tape<T>,
    table: &Tensor<T>,
    index: &Arc<Vec<usize>>,
    nq: usize,
    nk: usize,
) -> Result<Tensor<T>> {
    if table.rank() != 2 {
        return Err(Error::shape(
            "rel_bias",
            format!("table must be [heads, offsets], got {:?}", table.shape()),
        ));
    }
    let (heads, t_len) = (table.shape()[0], table.shape()[1]);
    if index.len() != nq * nk {
        return Err(Error::BiasExtentMismatch {
            expected: index.len(),
            got: nq * nk,
        });
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= t_len) {
        return Err(Error::InvalidArg(format!(
            "rel_bias: offset index {bad} out of table range {t_len}"
        )));
    }
    let td = table.data();
    let mut out = Vec::with_capacity(heads * nq * nk);
    for hd in 0..heads {
        let row = &td[hd * t_len..(hd + 1) * t_len];
        out.extend(index.iter().map(|&i| row[i]));
    }
    drop(td);
    let rec = tape.should_record(&[table]);
    let res = Tensor::new_internal(vec![1, heads, nq, nk], out, rec);
    if rec {
        let ti = table.clone();
        let idx = Arc::clone(index);
        tape.record(&res, move |tp, g| {
            if ti.requires_grad() {
                let mut gt = vec![T::zero(); heads * t_len];
                for hd in 0..heads {
                    let grow = &g[hd * nq * nk..(hd + 1) * nq * nk];
                    let trow = &mut gt[hd * t_len..(hd + 1) * t_len];
                    for (&i, &gv) in idx.iter().zip(grow) {
                        trow[i] += gv;
                    }
                }
                tp.accumulate(&ti, gt);
            }
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gathers_and_scatters() {
        let tape = Tape::new();
        let table = Tensor::<f64>::param(&[1, 3], vec![10., 20., 30.]).unwrap();
        let index = Arc::new(vec![0usize, 2, 2, 1]);
        let b = rel_bias(&tape, &table, &index, 2, 2).unwrap();
        assert_eq!(b.shape(), &[1, 1, 2, 2]);
        assert_eq!(b.to_vec(), vec![10., 30., 30., 20.]);
        let s = crate::ops::sum_all(&tape, &b);
        tape.backward(&s).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1., 1., 2.]);
    }

    #[test]
    fn rejects_wrong_token_count() {
        let tape = Tape::disabled();
        let table = Tensor::<f64>::zeros(&[1, 3]).unwrap();
        let index = Arc::new(vec![0usize; 4]);
        assert!(rel_bias(&tape, &table, &index, 3, 2).is_err());
    }
}
