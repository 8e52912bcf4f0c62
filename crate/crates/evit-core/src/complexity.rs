//! Analytic parameter and multiply-accumulate accounting over the model
//! graph, derived from the config alone (no build required).
//!
//! Conventions: one MAC is one multiply plus one add. Convolutions cost
//! C_out·(C_in/groups)·kh·kw per output element, linear maps in·out,
//! attention 2·heads·Nq·Nk·d (the two token matmuls), bilinear resizing 4
//! MACs per output element. Normalization, activations, softmax, and
//! pooling are counted as zero.

use crate::error::Result;
use crate::model::{EvitUnet, EvitUnetConfig};
use crate::nn::attention::bias_table_len;
use crate::Scalar;

#[derive(Debug, Clone)]
pub struct CostRow {
    /// Top-level group: stem, enc, dec, skip, head.
    pub module: String,
    /// Leaf module path, matching checkpoint parameter prefixes.
    pub path: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub input_hw: (usize, usize),
    pub batch: usize,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn render_text(&self) -> String {
        let mut s = format!(
            "{:<6} {:<16} {:>12} {:>14}\n",
            "module", "path", "params", "macs"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<6} {:<16} {:>12} {:>14}\n",
                r.module, r.path, r.params, r.macs
            ));
        }
        s.push_str(&format!(
            "{:<6} {:<16} {:>12} {:>14}\n",
            "total",
            "",
            self.total_params(),
            self.total_macs()
        ));
        s.push_str(&format!(
            "input {}x{} batch {} | total {:.2} GMac ({:.2} GFLOPs at 2 FLOPs/MAC)\n",
            self.input_hw.0,
            self.input_hw.1,
            self.batch,
            self.total_macs() as f64 / 1e9,
            2.0 * self.total_macs() as f64 / 1e9,
        ));
        s.push_str(
            "conventions: norm/activation/softmax/pooling cost 0 MACs; bilinear = 4 MACs/element\n",
        );
        s
    }

    pub fn render_csv(&self) -> String {
        let mut s = String::from("module,path,params,macs\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.module, r.path, r.params, r.macs));
        }
        s.push_str(&format!(
            "total,,{},{}\n",
            self.total_params(),
            self.total_macs()
        ));
        s
    }
}

// Closed-form unit counts.

pub fn conv2d_params(cin: usize, cout: usize, k: usize, bias: bool) -> u64 {
    (cout * cin * k * k + if bias { cout } else { 0 }) as u64
}

pub fn depthwise_params(c: usize, k: usize, bias: bool) -> u64 {
    (c * k * k + if bias { c } else { 0 }) as u64
}

pub fn conv2d_macs(cin: usize, cout: usize, k: usize, out_hw: (usize, usize)) -> u64 {
    (cout * cin * k * k) as u64 * (out_hw.0 * out_hw.1) as u64
}

pub fn depthwise_macs(c: usize, k: usize, out_hw: (usize, usize)) -> u64 {
    (c * k * k) as u64 * (out_hw.0 * out_hw.1) as u64
}

pub fn linear_params(cin: usize, cout: usize, bias: bool) -> u64 {
    (cin * cout + if bias { cout } else { 0 }) as u64
}

pub fn linear_macs(cin: usize, cout: usize) -> u64 {
    (cin * cout) as u64
}

/// Q·Kᵀ plus A·V, excluding projections.
pub fn attention_macs(heads: usize, nq: usize, nk: usize, d: usize) -> u64 {
    2 * (heads * nq * nk * d) as u64
}

pub fn bilinear_macs(c: usize, out_hw: (usize, usize)) -> u64 {
    4 * (c * out_hw.0 * out_hw.1) as u64
}

fn bn_params(c: usize) -> u64 {
    2 * c as u64
}

struct Ledger {
    rows: Vec<CostRow>,
}

impl Ledger {
    fn push(&mut self, module: &str, path: String, params: u64, macs: u64) {
        self.rows.push(CostRow {
            module: module.to_string(),
            path,
            params,
            macs,
        });
    }
}

/// Per-stage spatial extents for an input size.
fn stage_hw(input_hw: (usize, usize), stage: usize) -> (usize, usize) {
    let div = 1usize << (stage + 1);
    (input_hw.0 / div, input_hw.1 / div)
}

fn local_block_costs(cfg: &EvitUnetConfig, c: usize, hw: (usize, usize)) -> (u64, u64) {
    let e = cfg.expansion;
    let n = hw;
    let params = conv2d_params(c, e * c, 1, false)
        + bn_params(e * c)
        + depthwise_params(e * c, 3, false)
        + bn_params(e * c)
        + conv2d_params(e * c, c, 1, false)
        + bn_params(c)
        + c as u64; // layer scale
    let macs = conv2d_macs(c, e * c, 1, n) + depthwise_macs(e * c, 3, n) + conv2d_macs(e * c, c, 1, n);
    (params, macs)
}

fn global_block_costs(cfg: &EvitUnetConfig, stage: usize, c: usize, hw: (usize, usize)) -> (u64, u64) {
    let heads = cfg.heads_for_stage(stage);
    let d = cfg.head_dim;
    let inner = heads * d;
    let n = hw.0 * hw.1;
    let (fp, fm) = local_block_costs(cfg, c, hw);
    let params = 2 * conv2d_params(c, inner, 1, true)
        + conv2d_params(c, inner, 1, false) // key projection is bias-free
        + conv2d_params(inner, c, 1, true)
        + (heads * bias_table_len(hw)) as u64
        + c as u64 // attention layer scale
        + fp;
    let macs = 3 * conv2d_macs(c, inner, 1, hw)
        + attention_macs(heads, n, n, d)
        + conv2d_macs(inner, c, 1, hw)
        + fm;
    (params, macs)
}

fn attn_resample_costs(
    cfg: &EvitUnetConfig,
    stage_of_heads: usize,
    cin: usize,
    cout: usize,
    in_hw: (usize, usize),
    down: bool,
) -> (u64, u64) {
    let heads = cfg.heads_for_stage(stage_of_heads);
    let d = cfg.head_dim;
    let inner = heads * d;
    let q_hw = if down {
        (in_hw.0 / 2, in_hw.1 / 2)
    } else {
        (in_hw.0 * 2, in_hw.1 * 2)
    };
    let (n, nq) = (in_hw.0 * in_hw.1, q_hw.0 * q_hw.1);
    let params = 2 * conv2d_params(cin, inner, 1, true)
        + conv2d_params(cin, inner, 1, false)
        + conv2d_params(inner, cout, 1, true)
        + (heads * bias_table_len(in_hw)) as u64;
    let macs = conv2d_macs(cin, inner, 1, q_hw)
        + 2 * conv2d_macs(cin, inner, 1, in_hw)
        + attention_macs(heads, nq, n, d)
        + conv2d_macs(inner, cout, 1, q_hw);
    (params, macs)
}

fn skip_costs(c: usize, hw: (usize, usize)) -> (u64, u64) {
    let params = 2 * linear_params(c, c, true) + conv2d_params(2 * c, c, 1, false) + bn_params(c);
    let macs = 2 * linear_macs(c, c) + conv2d_macs(2 * c, c, 1, hw);
    (params, macs)
}

/// Analytic cost rows for the architecture a config describes, at a given
/// input size and batch. MACs scale linearly with batch; params do not.
pub fn count_macs(
    config: &EvitUnetConfig,
    input_hw: (usize, usize),
    batch: usize,
) -> Result<CostReport> {
    let mut cfg = config.clone();
    cfg.input_hw = input_hw;
    cfg.validate()?;
    let w = cfg.stage_widths;
    let mut ledger = Ledger { rows: Vec::new() };

    // Stem: two stride-2 convs at H/2 and H/4.
    let half = (input_hw.0 / 2, input_hw.1 / 2);
    let quarter = stage_hw(input_hw, 1);
    let stem_params = conv2d_params(3, w[0] / 2, 3, false)
        + bn_params(w[0] / 2)
        + conv2d_params(w[0] / 2, w[0], 3, false)
        + bn_params(w[0]);
    let stem_macs = conv2d_macs(3, w[0] / 2, 3, half) + conv2d_macs(w[0] / 2, w[0], 3, quarter);
    ledger.push("stem", "stem".into(), stem_params, stem_macs);

    let block_costs = |stage: usize| -> (u64, u64) {
        let c = w[stage - 1];
        let hw = stage_hw(input_hw, stage);
        if stage <= 2 {
            local_block_costs(&cfg, c, hw)
        } else {
            global_block_costs(&cfg, stage, c, hw)
        }
    };

    for stage in 1..=4 {
        let (p, m) = block_costs(stage);
        for b in 0..cfg.stage_depths[stage - 1] {
            ledger.push("enc", format!("enc.s{stage}.b{b}"), p, m);
        }
    }
    // Encoder transitions.
    let (p, m) = (
        conv2d_params(w[0], w[1], 3, false) + bn_params(w[1]),
        conv2d_macs(w[0], w[1], 3, stage_hw(input_hw, 2)),
    );
    ledger.push("enc", "enc.t12".into(), p, m);
    let (p, m) = attn_resample_costs(&cfg, 3, w[1], w[2], stage_hw(input_hw, 2), true);
    ledger.push("enc", "enc.t23".into(), p, m);
    let (p, m) = attn_resample_costs(&cfg, 4, w[2], w[3], stage_hw(input_hw, 3), true);
    ledger.push("enc", "enc.t34".into(), p, m);

    // Decoder transitions.
    let (p, m) = attn_resample_costs(&cfg, 4, w[3], w[2], stage_hw(input_hw, 4), false);
    ledger.push("dec", "dec.t43".into(), p, m);
    let (p, m) = attn_resample_costs(&cfg, 3, w[2], w[1], stage_hw(input_hw, 3), false);
    ledger.push("dec", "dec.t32".into(), p, m);
    let s1 = stage_hw(input_hw, 1);
    let (p, m) = (
        conv2d_params(w[1], w[0], 1, false) + bn_params(w[0]),
        bilinear_macs(w[1], s1) + conv2d_macs(w[1], w[0], 1, s1),
    );
    ledger.push("dec", "dec.t21".into(), p, m);

    for &stage in &[3usize, 2, 1] {
        let (p, m) = block_costs(stage);
        for b in 0..cfg.stage_depths[stage - 1] {
            ledger.push("dec", format!("dec.s{stage}.b{b}"), p, m);
        }
    }
    for &stage in &[3usize, 2, 1] {
        let (p, m) = skip_costs(w[stage - 1], stage_hw(input_hw, stage));
        ledger.push("skip", format!("skip.s{stage}"), p, m);
    }
    let head_params = conv2d_params(w[0], cfg.num_classes, 1, true);
    let head_macs =
        bilinear_macs(w[0], input_hw) + conv2d_macs(w[0], cfg.num_classes, 1, input_hw);
    ledger.push("head", "head".into(), head_params, head_macs);

    for row in ledger.rows.iter_mut() {
        row.macs *= batch as u64;
    }
    Ok(CostReport {
        rows: ledger.rows,
        input_hw,
        batch,
    })
}

/// Exact per-module scalar counts from a built model, grouped under the
/// same row paths `count_macs` uses (MAC column zero).
pub fn count_params<T: Scalar>(model: &EvitUnet<T>) -> CostReport {
    let analytic = count_macs(&model.config, model.config.input_hw, 1)
        .expect("a built model always has a valid config");
    let mut rows: Vec<CostRow> = analytic
        .rows
        .iter()
        .map(|r| CostRow {
            module: r.module.clone(),
            path: r.path.clone(),
            params: 0,
            macs: 0,
        })
        .collect();
    for (name, t) in model.param_set().params {
        let row = rows
            .iter_mut()
            .filter(|r| name == r.path || name.starts_with(&format!("{}.", r.path)))
            .max_by_key(|r| r.path.len())
            .unwrap_or_else(|| panic!("parameter {name} matches no cost row"));
        row.params += t.numel() as u64;
    }
    CostReport {
        rows,
        input_hw: model.config.input_hw,
        batch: 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_conv_params() {
        assert_eq!(conv2d_params(3, 8, 3, true), 224);
        assert_eq!(depthwise_params(40, 3, true), 400);
    }

    #[test]
    fn closed_form_pointwise_macs() {
        assert_eq!(conv2d_macs(8, 16, 1, (4, 4)), 2048);
    }

    #[test]
    fn closed_form_attention_macs() {
        assert_eq!(attention_macs(1, 4, 4, 2), 64);
    }

    #[test]
    fn analytic_params_match_built_model() {
        let cfg = EvitUnetConfig {
            stage_widths: [8, 16, 24, 32],
            stage_depths: [1, 2, 1, 1],
            heads: [2, 4],
            head_dim: 8,
            expansion: 2,
            num_classes: 3,
            input_hw: (64, 64),
            ..Default::default()
        };
        let model = EvitUnet::<f32>::build(&cfg).unwrap();
        let counted = count_params(&model);
        let analytic = count_macs(&cfg, cfg.input_hw, 1).unwrap();
        assert_eq!(counted.rows.len(), analytic.rows.len());
        for (c, a) in counted.rows.iter().zip(&analytic.rows) {
            assert_eq!(c.path, a.path);
            assert_eq!(c.params, a.params, "row {} params disagree", c.path);
        }
        assert_eq!(counted.total_params(), analytic.total_params());
    }

    #[test]
    fn stem_macs_scale_quadratically() {
        let cfg = EvitUnetConfig::default();
        let find = |r: &CostReport| {
            r.rows.iter().find(|x| x.path == "stem").unwrap().macs
        };
        let a = count_macs(&cfg, (224, 224), 1).unwrap();
        let b = count_macs(&cfg, (448, 448), 1).unwrap();
        assert_eq!(find(&b), 4 * find(&a));
    }

    #[test]
    fn macs_linear_in_batch() {
        let cfg = EvitUnetConfig::default();
        let a = count_macs(&cfg, (224, 224), 1).unwrap();
        let b = count_macs(&cfg, (224, 224), 3).unwrap();
        assert_eq!(b.total_macs(), 3 * a.total_macs());
        assert_eq!(b.total_params(), a.total_params());
    }

    #[test]
    fn empty_report_renders_header_only() {
        let r = CostReport {
            rows: vec![],
            input_hw: (64, 64),
            batch: 1,
        };
        assert_eq!(r.render_csv(), "module,path,params,macs\ntotal,,0,0\n");
        assert!(r.render_text().starts_with("module"));
    }

    #[test]
    fn csv_round_trips() {
        let cfg = EvitUnetConfig::default();
        let r = count_macs(&cfg, (224, 224), 1).unwrap();
        let csv = r.render_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "module,path,params,macs");
        let mut params = 0u64;
        let mut macs = 0u64;
        let mut total = (0u64, 0u64);
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let (p, m) = (f[2].parse::<u64>().unwrap(), f[3].parse::<u64>().unwrap());
            if f[0] == "total" {
                total = (p, m);
            } else {
                params += p;
                macs += m;
            }
        }
        assert_eq!(total, (params, macs));
        assert_eq!(total, (r.total_params(), r.total_macs()));
    }
}
