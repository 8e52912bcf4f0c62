//! The assembled U-shaped network: stem, four encoder stages with
//! transitions, mirrored decoder with channel-attention skips, and the 4x
//! prediction head. Stages 1-2 use local (conv-FFN) blocks, stages 3-4 add
//! MHSA; transitions into and out of the low-resolution stages use
//! attention resampling, the rest convolution.

pub mod checkpoint;
mod config;

pub use config::EvitUnetConfig;

use crate::dtype::Scalar;
use crate::error::Result;
use crate::init::Initializer;
use crate::nn::block::Block;
use crate::nn::{GlobalLocalBlock, Head, LocalBlock, ParamSet, Resample, SkipFusion, Stem};
use crate::ops::Mode;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub struct EvitUnet<T: Scalar> {
    pub config: EvitUnetConfig,
    stem: Stem<T>,
    enc_stages: Vec<Vec<Block<T>>>,
    /// [1→2 conv, 2→3 attn, 3→4 attn]
    enc_trans: Vec<Resample<T>>,
    /// Executed deepest-first: [stage 3, stage 2, stage 1].
    dec_stages: Vec<Vec<Block<T>>>,
    /// [4→3 attn, 3→2 attn, 2→1 conv]
    dec_trans: Vec<Resample<T>>,
    /// [skip 3, skip 2, skip 1]
    skips: Vec<SkipFusion<T>>,
    head: Head<T>,
}

impl<T: Scalar> EvitUnet<T> {
    /// Deterministically initialize the full parameter tree from the
    /// config seed.
    pub fn build(config: &EvitUnetConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(config.seed);
        let cfg = config.clone();
        let w = cfg.stage_widths;

        let stem = Stem::new(&mut init, w[0]);
        let make_stage = |init: &mut Initializer, stage: usize| -> Vec<Block<T>> {
            let c = w[stage - 1];
            (0..cfg.stage_depths[stage - 1])
                .map(|_| {
                    if stage <= 2 {
                        Block::Local(LocalBlock::new(init, c, cfg.expansion))
                    } else {
                        Block::Global(GlobalLocalBlock::new(
                            init,
                            c,
                            cfg.expansion,
                            cfg.heads_for_stage(stage),
                            cfg.head_dim,
                            cfg.stage_hw(stage),
                            cfg.attn_scale,
                        ))
                    }
                })
                .collect()
        };

        let enc_stages: Vec<Vec<Block<T>>> =
            (1..=4).map(|s| make_stage(&mut init, s)).collect();
        let enc_trans = vec![
            Resample::conv_down(&mut init, w[0], w[1]),
            Resample::Attn(crate::nn::resample::AttnResample::new(
                &mut init,
                w[1],
                w[2],
                cfg.heads_for_stage(3),
                cfg.head_dim,
                cfg.stage_hw(2),
                true,
                cfg.attn_scale,
                cfg.resample_softmax,
            )),
            Resample::Attn(crate::nn::resample::AttnResample::new(
                &mut init,
                w[2],
                w[3],
                cfg.heads_for_stage(4),
                cfg.head_dim,
                cfg.stage_hw(3),
                true,
                cfg.attn_scale,
                cfg.resample_softmax,
            )),
        ];
        let dec_trans = vec![
            Resample::Attn(crate::nn::resample::AttnResample::new(
                &mut init,
                w[3],
                w[2],
                cfg.heads_for_stage(4),
                cfg.head_dim,
                cfg.stage_hw(4),
                false,
                cfg.attn_scale,
                cfg.resample_softmax,
            )),
            Resample::Attn(crate::nn::resample::AttnResample::new(
                &mut init,
                w[2],
                w[1],
                cfg.heads_for_stage(3),
                cfg.head_dim,
                cfg.stage_hw(3),
                false,
                cfg.attn_scale,
                cfg.resample_softmax,
            )),
            Resample::conv_up(&mut init, w[1], w[0]),
        ];
        let dec_stages: Vec<Vec<Block<T>>> =
            [3usize, 2, 1].iter().map(|&s| make_stage(&mut init, s)).collect();
        let skips: Vec<SkipFusion<T>> = [3usize, 2, 1]
            .iter()
            .map(|&s| SkipFusion::new(&mut init, w[s - 1]))
            .collect();
        let head = Head::new(&mut init, w[0], cfg.num_classes);

        Ok(EvitUnet {
            config: cfg,
            stem,
            enc_stages,
            enc_trans,
            dec_stages,
            dec_trans,
            skips,
            head,
        })
    }

    fn run_stage(
        tape: &Tape<T>,
        blocks: &[Block<T>],
        mut x: Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        for b in blocks {
            x = b.forward(tape, &x, mode)?;
        }
        Ok(x)
    }

    /// Full forward pass. The trace records every stage boundary's output
    /// shape in execution order.
    pub fn forward_traced(
        &self,
        tape: &Tape<T>,
        img: &Tensor<T>,
        mode: Mode,
        trace: Option<&mut Vec<(String, Vec<usize>)>>,
    ) -> Result<Tensor<T>> {
        let mut sink = Vec::new();
        let trace = trace.unwrap_or(&mut sink);
        let mut note = |name: &str, t: &Tensor<T>| {
            trace.push((name.to_string(), t.shape().to_vec()));
        };
        let stage = |e: crate::Error, name: &str| e.in_stage(name);

        let s0 = self.stem.forward(tape, img, mode).map_err(|e| stage(e, "stem"))?;
        note("stem", &s0);
        let e1 = Self::run_stage(tape, &self.enc_stages[0], s0, mode)
            .map_err(|e| stage(e, "enc.s1"))?;
        note("enc.s1", &e1);
        let t12 = self.enc_trans[0]
            .forward(tape, &e1, mode)
            .map_err(|e| stage(e, "enc.t12"))?;
        let e2 = Self::run_stage(tape, &self.enc_stages[1], t12, mode)
            .map_err(|e| stage(e, "enc.s2"))?;
        note("enc.s2", &e2);
        let t23 = self.enc_trans[1]
            .forward(tape, &e2, mode)
            .map_err(|e| stage(e, "enc.t23"))?;
        let e3 = Self::run_stage(tape, &self.enc_stages[2], t23, mode)
            .map_err(|e| stage(e, "enc.s3"))?;
        note("enc.s3", &e3);
        let t34 = self.enc_trans[2]
            .forward(tape, &e3, mode)
            .map_err(|e| stage(e, "enc.t34"))?;
        let e4 = Self::run_stage(tape, &self.enc_stages[3], t34, mode)
            .map_err(|e| stage(e, "enc.s4"))?;
        note("enc.s4", &e4);

        let u3 = self.dec_trans[0]
            .forward(tape, &e4, mode)
            .map_err(|e| stage(e, "dec.t43"))?;
        let f3 = self.skips[0]
            .fuse(tape, &u3, &e3, mode)
            .map_err(|e| stage(e, "skip.s3"))?;
        let d3 = Self::run_stage(tape, &self.dec_stages[0], f3, mode)
            .map_err(|e| stage(e, "dec.s3"))?;
        note("dec.s3", &d3);
        let u2 = self.dec_trans[1]
            .forward(tape, &d3, mode)
            .map_err(|e| stage(e, "dec.t32"))?;
        let f2 = self.skips[1]
            .fuse(tape, &u2, &e2, mode)
            .map_err(|e| stage(e, "skip.s2"))?;
        let d2 = Self::run_stage(tape, &self.dec_stages[1], f2, mode)
            .map_err(|e| stage(e, "dec.s2"))?;
        note("dec.s2", &d2);
        let u1 = self.dec_trans[2]
            .forward(tape, &d2, mode)
            .map_err(|e| stage(e, "dec.t21"))?;
        let f1 = self.skips[2]
            .fuse(tape, &u1, &e1, mode)
            .map_err(|e| stage(e, "skip.s1"))?;
        let d1 = Self::run_stage(tape, &self.dec_stages[2], f1, mode)
            .map_err(|e| stage(e, "dec.s1"))?;
        note("dec.s1", &d1);
        let logits = self.head.forward(tape, &d1).map_err(|e| stage(e, "head"))?;
        note("head", &logits);
        Ok(logits)
    }

    pub fn forward(&self, tape: &Tape<T>, img: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.forward_traced(tape, img, mode, None)
    }

    /// Every named parameter and running-stat buffer, in canonical order.
    pub fn param_set(&self) -> ParamSet<T> {
        let mut set = ParamSet::new();
        self.stem.collect(&mut set);
        for (si, blocks) in self.enc_stages.iter().enumerate() {
            for (bi, b) in blocks.iter().enumerate() {
                b.collect(&format!("enc.s{}.b{}", si + 1, bi), &mut set);
            }
        }
        for (ti, name) in ["t12", "t23", "t34"].iter().enumerate() {
            self.enc_trans[ti].collect(&format!("enc.{name}"), &mut set);
        }
        for (ti, name) in ["t43", "t32", "t21"].iter().enumerate() {
            self.dec_trans[ti].collect(&format!("dec.{name}"), &mut set);
        }
        for (di, stage) in [3usize, 2, 1].iter().enumerate() {
            for (bi, b) in self.dec_stages[di].iter().enumerate() {
                b.collect(&format!("dec.s{stage}.b{bi}"), &mut set);
            }
        }
        for (ki, stage) in [3usize, 2, 1].iter().enumerate() {
            self.skips[ki].collect(&format!("skip.s{stage}"), &mut set);
        }
        self.head.collect(&mut set);
        set
    }

    /// Set every gradient buffer to empty.
    pub fn zero_grads(&self) {
        for (_, p) in self.param_set().params {
            p.zero_grad();
        }
    }

    /// Force all layer-scale vectors to zero (every block becomes the
    /// identity map); used by ablation and equation-fidelity checks.
    pub fn zero_layer_scales(&self) {
        for (name, p) in self.param_set().params {
            if name.ends_with("layer_scale") {
                let zeros = vec![T::zero(); p.numel()];
                p.set_data(&zeros).unwrap();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EvitUnetConfig {
        EvitUnetConfig {
            stage_widths: [8, 16, 24, 32],
            stage_depths: [1, 1, 1, 1],
            heads: [2, 2],
            head_dim: 8,
            expansion: 2,
            num_classes: 2,
            input_hw: (32, 32),
            ..Default::default()
        }
    }

    #[test]
    fn builds_and_runs_tiny() {
        let model = EvitUnet::<f32>::build(&tiny_config()).unwrap();
        let tape = Tape::disabled();
        let img = crate::init::random_tensor(&[1, 3, 32, 32], 1, -1.0, 1.0);
        let mut trace = Vec::new();
        let out = model
            .forward_traced(&tape, &img, Mode::Eval, Some(&mut trace))
            .unwrap();
        assert_eq!(out.shape(), &[1, 2, 32, 32]);
        let by_name: std::collections::HashMap<_, _> = trace.into_iter().collect();
        assert_eq!(by_name["enc.s1"], vec![1, 8, 8, 8]);
        assert_eq!(by_name["enc.s4"], vec![1, 32, 1, 1]);
        // decoder mirrors encoder shapes
        for s in 1..=3 {
            assert_eq!(by_name[&format!("enc.s{s}")], by_name[&format!("dec.s{s}")]);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = tiny_config();
        let a = EvitUnet::<f32>::build(&cfg).unwrap();
        let b = EvitUnet::<f32>::build(&cfg).unwrap();
        let (pa, pb) = (a.param_set(), b.param_set());
        assert_eq!(pa.params.len(), pb.params.len());
        for ((na, ta), (nb, tb)) in pa.params.iter().zip(&pb.params) {
            assert_eq!(na, nb);
            assert_eq!(ta.to_vec(), tb.to_vec(), "parameter {na} differs");
        }
    }

    #[test]
    fn invalid_input_hw_rejected() {
        let cfg = EvitUnetConfig {
            input_hw: (100, 100),
            ..tiny_config()
        };
        assert!(EvitUnet::<f32>::build(&cfg).is_err());
    }
}
