use rayon::prelude::*;

use super::{broadcast_shape, IndexMap};
use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

// Below this many output elements the rayon dispatch costs more than it saves.
const PAR_MIN: usize = 4096;

/// Batched matrix product: a […,m,k] · b […,k,n] -> […,m,n].
/// Leading dims must be equal or broadcastable from 1.
pub fn matmul<T: Scalar>(tape: &Tape<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank() {
        return Err(Error::shape(
            "matmul",
            format!("need equal ranks >= 2, got {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let rank = a.rank();
    let (m, ka) = (a.shape()[rank - 2], a.shape()[rank - 1]);
    let (kb, n) = (b.shape()[rank - 2], b.shape()[rank - 1]);
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let lead = broadcast_shape("matmul", &a.shape()[..rank - 2], &b.shape()[..rank - 2])?;
    let batches: usize = lead.iter().product();
    let amap = IndexMap::new(&a.shape()[..rank - 2], &lead);
    let bmap = IndexMap::new(&b.shape()[..rank - 2], &lead);

    let mut out_shape = lead.clone();
    out_shape.push(m);
    out_shape.push(n);
    let k = ka;
    let ad_ref = a.data();
    let bd_ref = b.data();
    let ad: &[T] = &ad_ref;
    let bd: &[T] = &bd_ref;
    let mut out = vec![T::zero(); batches * m * n];
    let do_one_row = |row: &mut [T], abase: usize, bbase: usize, i: usize, ad: &[T], bd: &[T]| {
        for p in 0..k {
            let av = ad[abase + i * k + p];
            let brow = &bd[bbase + p * n..bbase + p * n + n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if batches * m * n >= PAR_MIN {
        out.par_chunks_mut(n).enumerate().for_each(|(ri, row)| {
            let (batch, i) = (ri / m, ri % m);
            let abase = amap.map(batch) * m * k;
            let bbase = bmap.map(batch) * k * n;
            do_one_row(row, abase, bbase, i, ad, bd);
        });
    } else {
        for (ri, row) in out.chunks_mut(n).enumerate() {
            let (batch, i) = (ri / m, ri % m);
            let abase = amap.map(batch) * m * k;
            let bbase = bmap.map(batch) * k * n;
            do_one_row(row, abase, bbase, i, ad, bd);
        }
    }
    drop(ad_ref);
    drop(bd_ref);

    let rec = tape.should_record(&[a, b]);
    let res = Tensor::new_internal(out_shape, out, rec);
    if rec {
        let (ai, bi) = (a.clone(), b.clone());
        let lead_c = lead.clone();
        tape.record(&res, move |tp, g| {
            let amap = IndexMap::new(&ai.shape()[..rank - 2], &lead_c);
            let bmap = IndexMap::new(&bi.shape()[..rank - 2], &lead_c);
            let ad_ref = ai.data();
            let bd_ref = bi.data();
            let ad: &[T] = &ad_ref;
            let bd: &[T] = &bd_ref;
            let a_batches: usize = ai.shape()[..rank - 2].iter().product();
            let b_batches: usize = bi.shape()[..rank - 2].iter().product();
            if ai.requires_grad() {
                // dA[i,p] = sum_j g[i,j] * b[p,j]
                let mut ga = vec![T::zero(); ai.numel()];
                if a_batches == batches {
                    ga.par_chunks_mut(k).enumerate().for_each(|(ri, row)| {
                        let (batch, i) = (ri / m, ri % m);
                        let gbase = batch * m * n + i * n;
                        let bbase = bmap.map(batch) * k * n;
                        for (p, slot) in row.iter_mut().enumerate() {
                            let brow = &bd[bbase + p * n..bbase + p * n + n];
                            let mut acc = T::zero();
                            for (gv, bv) in g[gbase..gbase + n].iter().zip(brow) {
                                acc += *gv * *bv;
                            }
                            *slot += acc;
                        }
                    });
                } else {
                    // a was broadcast over batches: accumulate sequentially.
                    for batch in 0..batches {
                        let bbase = bmap.map(batch) * k * n;
                        for i in 0..m {
                            let gbase = batch * m * n + i * n;
                            for p in 0..k {
                                let brow = &bd[bbase + p * n..bbase + p * n + n];
                                let mut acc = T::zero();
                                for (gv, bv) in g[gbase..gbase + n].iter().zip(brow) {
                                    acc += *gv * *bv;
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                }
                tp.accumulate(&ai, ga);
            }
            if bi.requires_grad() {
                // dB[p,j] = sum_i a[i,p] * g[i,j]
                let mut gb = vec![T::zero(); bi.numel()];
                if b_batches == batches {
                    gb.par_chunks_mut(k * n).enumerate().for_each(|(batch, gbb)| {
                        let abase = amap.map(batch) * m * k;
                        let gbase = batch * m * n;
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[abase + i * k + p];
                                let grow = &g[gbase + i * n..gbase + i * n + n];
                                let brow = &mut gbb[p * n..p * n + n];
                                for (o, &gv) in brow.iter_mut().zip(grow) {
                                    *o += av * gv;
                                }
                            }
                        }
                    });
                } else {
                    for batch in 0..batches {
                        let abase = amap.map(batch) * m * k;
                        let gbase = batch * m * n;
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[abase + i * k + p];
                                let grow = &g[gbase + i * n..gbase + i * n + n];
                                for (j, &gv) in grow.iter().enumerate() {
                                    gb[p * n + j] += av * gv;
                                }
                            }
                        }
                    }
                }
                tp.accumulate(&bi, gb);
            }
        });
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(n: usize) -> Tensor<f64> {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::from_vec(&[n, n], d).unwrap()
    }

    #[test]
    fn identity_leaves_matrix_unchanged() {
        let tape = Tape::disabled();
        let m = Tensor::<f64>::from_vec(&[3, 3], (1..=9).map(|i| i as f64).collect()).unwrap();
        let y = matmul(&tape, &eye(3), &m).unwrap();
        assert_eq!(y.to_vec(), m.to_vec());
    }

    #[test]
    fn hand_computed_2x2_by_2x1() {
        let tape = Tape::disabled();
        let a = Tensor::<f64>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![1., 1.]).unwrap();
        let y = matmul(&tape, &a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.to_vec(), vec![3., 7.]);
    }

    #[test]
    fn rejects_inner_dim_mismatch() {
        let tape = Tape::disabled();
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[4, 2]).unwrap();
        assert!(matmul(&tape, &a, &b).is_err());
    }

    #[test]
    fn rejects_bad_leading_dims() {
        let tape = Tape::disabled();
        let a = Tensor::<f64>::zeros(&[2, 3, 4]).unwrap();
        let b = Tensor::<f64>::zeros(&[3, 4, 5]).unwrap();
        assert!(matmul(&tape, &a, &b).is_err());
    }

    #[test]
    fn batched_broadcast_from_one() {
        let tape = Tape::disabled();
        let a = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::from_vec(&[1, 2, 1], vec![1., 1.]).unwrap();
        let y = matmul(&tape, &a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.to_vec(), vec![3., 7.]);
    }

    #[test]
    fn gradients_match_transpose_rules() {
        // loss = sum(A·B): dA = 1·B^T, dB = A^T·1
        let tape = Tape::new();
        let a = Tensor::<f64>::param(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::param(&[2, 2], vec![5., 6., 7., 8.]).unwrap();
        let y = matmul(&tape, &a, &b).unwrap();
        let s = crate::ops::sum_all(&tape, &y);
        tape.backward(&s).unwrap();
        assert_eq!(a.grad().unwrap(), vec![11., 15., 11., 15.]);
        assert_eq!(b.grad().unwrap(), vec![4., 4., 6., 6.]);
    }
}
