use crate::dtype::Scalar;
use crate::tensor::Tensor;

/// Per-class overlap counts accumulated over any number of samples.
#[derive(Debug, Clone)]
pub struct ConfusionCounts {
    pub classes: usize,
    pub intersection: Vec<u64>,
    pub predicted: Vec<u64>,
    pub truth: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(classes: usize) -> Self {
        ConfusionCounts {
            classes,
            intersection: vec![0; classes],
            predicted: vec![0; classes],
            truth: vec![0; classes],
        }
    }

    pub fn update(&mut self, pred: &[u8], truth: &[u8]) {
        debug_assert_eq!(pred.len(), truth.len());
        for (&p, &t) in pred.iter().zip(truth) {
            self.predicted[p as usize] += 1;
            self.truth[t as usize] += 1;
            if p == t {
                self.intersection[p as usize] += 1;
            }
        }
    }

    /// DSC_k = 2|P∩T| / (|P| + |T|); both empty counts as perfect (1.0).
    pub fn dsc(&self, class: usize) -> f64 {
        let denom = self.predicted[class] + self.truth[class];
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.intersection[class] as f64 / denom as f64
    }

    /// IoU_k = |P∩T| / |P∪T|; both empty counts as perfect (1.0).
    pub fn iou(&self, class: usize) -> f64 {
        let union = self.predicted[class] + self.truth[class] - self.intersection[class];
        if union == 0 {
            return 1.0;
        }
        self.intersection[class] as f64 / union as f64
    }

    pub fn report(&self, loss: f64) -> MetricReport {
        let per_class_dsc: Vec<f64> = (0..self.classes).map(|c| self.dsc(c)).collect();
        let per_class_iou: Vec<f64> = (0..self.classes).map(|c| self.iou(c)).collect();
        // Means exclude the background class (0).
        let fg = (self.classes - 1).max(1) as f64;
        let mean_dsc = per_class_dsc.iter().skip(1).sum::<f64>() / fg;
        let mean_iou = per_class_iou.iter().skip(1).sum::<f64>() / fg;
        MetricReport {
            per_class_dsc,
            per_class_iou,
            mean_dsc,
            mean_iou,
            loss,
        }
    }
}

/// Segmentation quality summary. Means are over foreground classes only.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub per_class_dsc: Vec<f64>,
    pub per_class_iou: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_iou: f64,
    pub loss: f64,
}

impl MetricReport {
    pub fn render_text(&self) -> String {
        let mut s = String::from("class        dsc        iou\n");
        for (c, (d, i)) in self
            .per_class_dsc
            .iter()
            .zip(&self.per_class_iou)
            .enumerate()
        {
            s.push_str(&format!("{c:>5} {d:>10.6} {i:>10.6}\n"));
        }
        s.push_str(&format!(
            "mean (fg) dsc={:.6} iou={:.6} loss={:.6}\n",
            self.mean_dsc, self.mean_iou, self.loss
        ));
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("class,dsc,iou\n");
        for (c, (d, i)) in self
            .per_class_dsc
            .iter()
            .zip(&self.per_class_iou)
            .enumerate()
        {
            s.push_str(&format!("{c},{d:.6},{i:.6}\n"));
        }
        s.push_str(&format!("mean_fg,{:.6},{:.6}\n", self.mean_dsc, self.mean_iou));
        s
    }
}

/// Argmax over the class axis of [B,K,H,W] logits; first maximum wins.
pub fn argmax_classes<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let (b, k, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    let plane = h * w;
    let ld = logits.data();
    let mut out = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for pix in 0..plane {
            let base = bi * k * plane + pix;
            let mut best = 0u8;
            let mut bv = ld[base];
            for c in 1..k {
                let v = ld[base + c * plane];
                if v > bv {
                    bv = v;
                    best = c as u8;
                }
            }
            out.push(best);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_masks_score_one() {
        let mut c = ConfusionCounts::new(3);
        let m = vec![0u8, 1, 2, 1, 0, 2];
        c.update(&m, &m);
        for k in 0..3 {
            assert_eq!(c.dsc(k), 1.0);
            assert_eq!(c.iou(k), 1.0);
        }
    }

    #[test]
    fn disjoint_nonempty_masks_score_zero() {
        let mut c = ConfusionCounts::new(2);
        c.update(&[1, 1, 0, 0], &[0, 0, 1, 1]);
        assert_eq!(c.dsc(1), 0.0);
        assert_eq!(c.iou(1), 0.0);
    }

    #[test]
    fn empty_empty_class_is_perfect() {
        let mut c = ConfusionCounts::new(3);
        c.update(&[0, 1], &[0, 1]); // class 2 never appears
        assert_eq!(c.dsc(2), 1.0);
        assert_eq!(c.iou(2), 1.0);
    }

    #[test]
    fn dsc_iou_identity_holds() {
        let mut c = ConfusionCounts::new(4);
        // pseudo-random masks via a small LCG
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 4) as u8
        };
        let pred: Vec<u8> = (0..500).map(|_| next()).collect();
        let truth: Vec<u8> = (0..500).map(|_| next()).collect();
        c.update(&pred, &truth);
        for k in 0..4 {
            let (d, i) = (c.dsc(k), c.iou(k));
            assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-9);
            assert!(i <= d + 1e-12);
        }
    }

    #[test]
    fn argmax_first_max_wins() {
        let logits =
            Tensor::<f64>::from_vec(&[1, 3, 1, 2], vec![1.0, 0.5, 1.0, 2.0, 0.0, 2.0]).unwrap();
        // pixel 0: [1,1,0] -> class 0 (tie, first wins); pixel 1: [0.5,2,2] -> class 1
        assert_eq!(argmax_classes(&logits), vec![0, 1]);
    }
}
