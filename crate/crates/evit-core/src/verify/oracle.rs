//! Independent reference computations, written as plain nested loops over
//! slices. These deliberately share no code with the op implementations
//! they check.

/// Direct dense convolution, seven nested loops.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_direct(
    x: &[f64],
    (b, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (cout, _cin, kh, kw): (usize, usize, usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy < pad || ix < pad {
                                    continue;
                                }
                                let (iy, ix) = (iy - pad, ix - pad);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                acc += x[((bi * cin + ci) * h + iy) * w + ix]
                                    * wt[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct per-channel convolution.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_direct(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (kh, kw): (usize, usize),
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * c * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bv| bv[ci]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            if iy < pad || ix < pad {
                                continue;
                            }
                            let (iy, ix) = (iy - pad, ix - pad);
                            if iy >= h || ix >= w {
                                continue;
                            }
                            acc += x[((bi * c + ci) * h + iy) * w + ix]
                                * wt[(ci * kh + ky) * kw + kx];
                        }
                    }
                    out[((bi * c + ci) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scalar triple-loop matrix product.
pub fn matmul_triple_loop(a: &[f64], (m, k): (usize, usize), b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Attention evaluated one query at a time: per head, logits against every
/// key, optional 1/√d scale and bias, softmax, weighted sum of values.
/// q: [H,Nq,d], k/v: [H,Nk,d], bias (when softmax): [H, Nq·Nk] expanded.
#[allow(clippy::too_many_arguments)]
pub fn attention_per_query(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    heads: usize,
    nq: usize,
    nk: usize,
    d: usize,
    bias: Option<&[f64]>,
    scale: bool,
    softmax_on: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; heads * nq * d];
    let s = if scale { 1.0 / (d as f64).sqrt() } else { 1.0 };
    for hd in 0..heads {
        for qi in 0..nq {
            let qrow = &q[(hd * nq + qi) * d..(hd * nq + qi + 1) * d];
            let mut logits = vec![0.0; nk];
            for (ki, slot) in logits.iter_mut().enumerate() {
                let krow = &k[(hd * nk + ki) * d..(hd * nk + ki + 1) * d];
                let mut dot = 0.0;
                for p in 0..d {
                    dot += qrow[p] * krow[p];
                }
                let mut l = if softmax_on { dot * s } else { dot };
                if softmax_on {
                    if let Some(bt) = bias {
                        l += bt[hd * nq * nk + qi * nk + ki];
                    }
                }
                *slot = l;
            }
            let weights = if softmax_on {
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                exps.into_iter().map(|e| e / denom).collect::<Vec<f64>>()
            } else {
                logits
            };
            let orow = &mut out[(hd * nq + qi) * d..(hd * nq + qi + 1) * d];
            for (ki, &wgt) in weights.iter().enumerate() {
                let vrow = &v[(hd * nk + ki) * d..(hd * nk + ki + 1) * d];
                for p in 0..d {
                    orow[p] += wgt * vrow[p];
                }
            }
        }
    }
    out
}

/// Per-class DSC and IoU from raw pixel counting.
pub fn dsc_iou_counting(pred: &[u8], truth: &[u8], classes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dsc = Vec::with_capacity(classes);
    let mut iou = Vec::with_capacity(classes);
    for c in 0..classes {
        let mut np = 0u64;
        let mut nt = 0u64;
        let mut ni = 0u64;
        for (&p, &t) in pred.iter().zip(truth) {
            let (ip, it) = (p as usize == c, t as usize == c);
            np += ip as u64;
            nt += it as u64;
            ni += (ip && it) as u64;
        }
        dsc.push(if np + nt == 0 {
            1.0
        } else {
            2.0 * ni as f64 / (np + nt) as f64
        });
        iou.push(if np + nt == 0 {
            1.0
        } else {
            let union = np + nt - ni;
            if union == 0 {
                1.0
            } else {
                ni as f64 / union as f64
            }
        });
    }
    (dsc, iou)
}
