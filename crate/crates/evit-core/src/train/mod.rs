//! Training loop, losses, metrics, and the synthetic dataset.

pub mod loss;
pub mod metrics;
pub mod sgd;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dtype::Scalar;
use crate::error::Result;
use crate::model::EvitUnet;
use crate::ops::Mode;
use crate::tape::Tape;

pub use loss::{combined_loss, cross_entropy_loss, dice_loss};
pub use metrics::{argmax_classes, ConfusionCounts, MetricReport};
pub use sgd::Sgd;
pub use synth::{batch_of, generate_synth_dataset, SynthSample};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub ce_weight: f64,
    pub dice_weight: f64,
    /// Drives epoch shuffles and the train/eval split.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            ce_weight: 0.5,
            dice_weight: 0.5,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: MetricReport,
}

/// 80/20 split: indices are shuffled once (seeded), every fifth position
/// goes to the held-out set.
pub fn split_dataset(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5117);
    idx.shuffle(&mut rng);
    let mut train = Vec::with_capacity(n * 4 / 5 + 1);
    let mut eval = Vec::with_capacity(n / 5 + 1);
    for (pos, &i) in idx.iter().enumerate() {
        if pos % 5 == 4 {
            eval.push(i);
        } else {
            train.push(i);
        }
    }
    (train, eval)
}

/// No-grad forward over a sample set, aggregating confusion counts over
/// every pixel; the report's loss is the pixel-weighted mean combined loss.
pub fn evaluate<T: Scalar>(
    model: &EvitUnet<T>,
    samples: &[&SynthSample<T>],
    batch_size: usize,
    ce_weight: f64,
    dice_weight: f64,
) -> Result<MetricReport> {
    let classes = model.config.num_classes;
    let mut counts = ConfusionCounts::new(classes);
    let mut loss_sum = 0.0;
    let mut n_pix = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let (x, labels) = batch_of(chunk);
        let tape = Tape::disabled();
        let logits = model.forward(&tape, &x, Mode::Eval)?;
        let loss = combined_loss(&tape, &logits, &labels, ce_weight, dice_weight)?
            .item()?
            .to_f64_();
        loss_sum += loss * labels.len() as f64;
        n_pix += labels.len();
        let pred = argmax_classes(&logits);
        counts.update(&pred, &labels);
    }
    Ok(counts.report(loss_sum / n_pix.max(1) as f64))
}

/// SGD training over the 80% split with per-epoch evaluation on the rest.
/// `on_epoch` fires after each epoch (for logging).
pub fn train_model<T: Scalar>(
    model: &EvitUnet<T>,
    dataset: &[SynthSample<T>],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    if dataset.is_empty() {
        return Err(crate::Error::InvalidArg("training dataset is empty".into()));
    }
    let (train_idx, eval_idx) = split_dataset(dataset.len(), opts.seed);
    let eval_set: Vec<&SynthSample<T>> = eval_idx.iter().map(|&i| &dataset[i]).collect();
    let params = model.param_set().params;
    let mut sgd = Sgd::new(opts.lr, opts.momentum, opts.weight_decay);
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(
            opts.seed.wrapping_add((epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        );
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(opts.batch_size.max(1)) {
            let batch: Vec<&SynthSample<T>> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (x, labels) = batch_of(&batch);
            let tape = Tape::new();
            let logits = model.forward(&tape, &x, Mode::Train)?;
            let loss = combined_loss(&tape, &logits, &labels, opts.ce_weight, opts.dice_weight)?;
            tape.backward(&loss)?;
            sgd.step(&params)?;
            for (_, p) in &params {
                p.zero_grad();
            }
            loss_sum += loss.item()?.to_f64_() * batch.len() as f64;
            seen += batch.len();
        }

        let eval = evaluate(model, &eval_set, opts.batch_size, opts.ce_weight, opts.dice_weight)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            eval,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(history)
}

/// history.csv rows: epoch, train loss, held-out mean DSC and IoU.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,eval_mean_dsc,eval_mean_iou\n");
    for r in history {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.epoch, r.train_loss, r.eval.mean_dsc, r.eval.mean_iou
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_80_20() {
        let (tr1, ev1) = split_dataset(100, 9);
        let (tr2, ev2) = split_dataset(100, 9);
        assert_eq!(tr1, tr2);
        assert_eq!(ev1, ev2);
        assert_eq!(tr1.len(), 80);
        assert_eq!(ev1.len(), 20);
        let mut all: Vec<usize> = tr1.iter().chain(ev1.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
