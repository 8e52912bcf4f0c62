use crate::dtype::{t, Scalar};
use crate::error::{Error, Result};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const DICE_SMOOTHING: f64 = 1e-5;

fn check_labels(labels: &[u8], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::LabelOutOfRange {
            label: bad as usize,
            classes,
        });
    }
    Ok(())
}

fn logits_dims<T: Scalar>(op: &'static str, logits: &Tensor<T>, labels: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if logits.rank() != 4 {
        return Err(Error::shape(op, format!("logits must be [B,K,H,W], got {:?}", logits.shape())));
    }
    let (b, k, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    if labels.len() != b * h * w {
        return Err(Error::shape(
            op,
            format!("{} labels for {b}x{h}x{w} pixels", labels.len()),
        ));
    }
    check_labels(labels, k)?;
    Ok((b, k, h, w))
}

/// One-hot labels in [B,H,W,K] layout (matching softmax over the last axis).
fn one_hot_lastdim<T: Scalar>(labels: &[u8], b: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); b * h * w * k];
    for (pix, &l) in labels.iter().enumerate() {
        data[pix * k + l as usize] = T::one();
    }
    Tensor::new_internal(vec![b, h, w, k], data, false)
}

/// Soft Dice loss on softmaxed logits against one-hot labels:
/// 1 − mean over (batch, class) of (2·|p∩t| + ε)/(|p| + |t| + ε).
pub fn dice_loss<T: Scalar>(tape: &Tape<T>, logits: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    let (b, k, h, w) = logits_dims("dice_loss", logits, labels)?;
    let perm = ops::permute(tape, logits, &[0, 2, 3, 1])?; // [B,H,W,K]
    let p = ops::softmax_lastdim(tape, &perm)?;
    let t_hot = one_hot_lastdim::<T>(labels, b, h, w, k);
    let pt = ops::mul(tape, &p, &t_hot)?;
    // Sum out H then W: [B,H,W,K] -> [B,K]
    let sum_hw = |tp: &Tape<T>, x: &Tensor<T>| -> Result<Tensor<T>> {
        let s1 = ops::sum_axis(tp, x, 1)?;
        ops::sum_axis(tp, &s1, 1)
    };
    let inter = sum_hw(tape, &pt)?;
    let p_sum = sum_hw(tape, &p)?;
    let t_sum = sum_hw(tape, &t_hot)?;
    let num = ops::add_scalar(tape, &ops::scale(tape, &inter, 2.0), DICE_SMOOTHING);
    let den = ops::add_scalar(tape, &ops::add(tape, &p_sum, &t_sum)?, DICE_SMOOTHING);
    let dice = ops::div(tape, &num, &den)?;
    let mean = ops::mean_all(tape, &dice);
    Ok(ops::add_scalar(tape, &ops::scale(tape, &mean, -1.0), 1.0))
}

/// Pixelwise log-softmax negative log-likelihood, mean over pixels.
/// Fused forward/backward for numerical stability.
pub fn cross_entropy_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<Tensor<T>> {
    let (b, k, h, w) = logits_dims("cross_entropy_loss", logits, labels)?;
    let plane = h * w;
    let n_pix = b * plane;
    let ld = logits.data();
    let mut total = T::zero();
    for bi in 0..b {
        for pix in 0..plane {
            // channel stride is `plane` in [B,K,H,W]
            let base = bi * k * plane + pix;
            let mut mx = ld[base];
            for c in 1..k {
                let v = ld[base + c * plane];
                if v > mx {
                    mx = v;
                }
            }
            let mut lse = T::zero();
            for c in 0..k {
                lse += (ld[base + c * plane] - mx).exp();
            }
            let lse = lse.ln() + mx;
            let z = ld[base + labels[bi * plane + pix] as usize * plane];
            total += lse - z;
        }
    }
    drop(ld);
    let mean = total * t::<T>(1.0 / n_pix as f64);
    let rec = tape.should_record(&[logits]);
    let res = Tensor::new_internal(vec![1], vec![mean], rec);
    if rec {
        let li = logits.clone();
        let labels = labels.to_vec();
        tape.record(&res, move |tp, g| {
            if !li.requires_grad() {
                return;
            }
            // d/dz = (softmax(z) − onehot) / n_pix
            let ld = li.data();
            let scale = g[0] * t::<T>(1.0 / n_pix as f64);
            let mut gx = vec![T::zero(); ld.len()];
            for bi in 0..b {
                for pix in 0..plane {
                    let base = bi * k * plane + pix;
                    let mut mx = ld[base];
                    for c in 1..k {
                        let v = ld[base + c * plane];
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut denom = T::zero();
                    for c in 0..k {
                        denom += (ld[base + c * plane] - mx).exp();
                    }
                    let label = labels[bi * plane + pix] as usize;
                    for c in 0..k {
                        let p = (ld[base + c * plane] - mx).exp() / denom;
                        let delta = if c == label { T::one() } else { T::zero() };
                        gx[base + c * plane] = (p - delta) * scale;
                    }
                }
            }
            drop(ld);
            tp.accumulate(&li, gx);
        });
    }
    Ok(res)
}

/// w_ce·CE + w_dice·Dice.
pub fn combined_loss<T: Scalar>(
    tape: &Tape<T>,
    logits: &Tensor<T>,
    labels: &[u8],
    w_ce: f64,
    w_dice: f64,
) -> Result<Tensor<T>> {
    let ce = cross_entropy_loss(tape, logits, labels)?;
    let dice = dice_loss(tape, logits, labels)?;
    ops::add(
        tape,
        &ops::scale(tape, &ce, w_ce),
        &ops::scale(tape, &dice, w_dice),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Logits that put ±margin on the labeled class.
    fn sharp_logits(labels: &[u8], b: usize, k: usize, h: usize, w: usize, margin: f64) -> Tensor<f64> {
        let plane = h * w;
        let mut data = vec![-margin; b * k * plane];
        for bi in 0..b {
            for pix in 0..plane {
                let l = labels[bi * plane + pix] as usize;
                data[bi * k * plane + l * plane + pix] = margin;
            }
        }
        Tensor::from_vec(&[b, k, h, w], data).unwrap()
    }

    #[test]
    fn perfect_prediction_has_tiny_dice_loss() {
        let tape = Tape::disabled();
        let labels = vec![0u8, 1, 1, 0];
        let logits = sharp_logits(&labels, 1, 2, 2, 2, 20.0);
        let l = dice_loss(&tape, &logits, &labels).unwrap().item().unwrap();
        assert!(l < 1e-3, "dice loss {l}");
    }

    #[test]
    fn uniform_logits_balanced_mask_gives_half() {
        // p = 0.5 everywhere, |T_k| = N/2: dice_k = (N/2)/(N) = 0.5 each
        let tape = Tape::disabled();
        let labels = vec![0u8, 1, 0, 1];
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2]).unwrap();
        let l = dice_loss(&tape, &logits, &labels).unwrap().item().unwrap();
        assert!((l - 0.5).abs() < 1e-5, "dice loss {l}");
    }

    #[test]
    fn uniform_logits_ce_is_ln_k() {
        let tape = Tape::disabled();
        for k in [2usize, 5, 9] {
            let labels = vec![0u8; 4];
            let logits = Tensor::<f64>::zeros(&[1, k, 2, 2]).unwrap();
            let l = cross_entropy_loss(&tape, &logits, &labels).unwrap().item().unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn ce_goes_to_zero_with_margin() {
        let tape = Tape::disabled();
        let labels = vec![1u8, 0, 1, 1];
        let mut prev = f64::INFINITY;
        for margin in [2.0, 5.0, 10.0, 20.0] {
            let logits = sharp_logits(&labels, 1, 2, 2, 2, margin);
            let l = cross_entropy_loss(&tape, &logits, &labels).unwrap().item().unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let tape = Tape::disabled();
        let labels = vec![3u8; 4];
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2]).unwrap();
        assert!(matches!(
            cross_entropy_loss(&tape, &logits, &labels),
            Err(Error::LabelOutOfRange { label: 3, classes: 2 })
        ));
    }

    #[test]
    fn combined_with_unit_ce_weight_is_ce() {
        let tape = Tape::disabled();
        let labels = vec![0u8, 1, 1, 0];
        let logits = Tensor::<f64>::from_vec(
            &[1, 2, 2, 2],
            vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.0, 1.2],
        )
        .unwrap();
        let ce = cross_entropy_loss(&tape, &logits, &labels).unwrap().item().unwrap();
        let comb = combined_loss(&tape, &logits, &labels, 1.0, 0.0)
            .unwrap()
            .item()
            .unwrap();
        assert_eq!(ce, comb);
    }

    #[test]
    fn combined_is_linear_in_weights() {
        let tape = Tape::disabled();
        let labels = vec![0u8, 1, 1, 0];
        let logits = Tensor::<f64>::from_vec(
            &[1, 2, 2, 2],
            vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4, 0.0, 1.2],
        )
        .unwrap();
        let ce = cross_entropy_loss(&tape, &logits, &labels).unwrap().item().unwrap();
        let dice = dice_loss(&tape, &logits, &labels).unwrap().item().unwrap();
        let comb = combined_loss(&tape, &logits, &labels, 0.5, 0.5)
            .unwrap()
            .item()
            .unwrap();
        assert!((comb - (0.5 * ce + 0.5 * dice)).abs() < 1e-12);
    }
}
