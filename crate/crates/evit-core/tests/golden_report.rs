//! The cost report for a frozen toy configuration, compared against
//! checked-in golden renderings (hand-verified: e.g. stem = 420 params /
//! 184320 MACs, enc.s2.b0 = 1488 / 83968, head = 27 / 229376).

use evit_core::complexity::count_macs;
use evit_core::EvitUnetConfig;

fn toy() -> EvitUnetConfig {
    EvitUnetConfig {
        stage_widths: [8, 16, 24, 32],
        stage_depths: [1, 1, 1, 1],
        heads: [2, 2],
        head_dim: 8,
        expansion: 2,
        num_classes: 3,
        input_hw: (64, 64),
        ..Default::default()
    }
}

#[test]
fn text_report_matches_golden() {
    let report = count_macs(&toy(), (64, 64), 1).unwrap();
    assert_eq!(report.render_text(), include_str!("golden/flops_toy.txt"));
}

#[test]
fn csv_report_matches_golden_and_reparses() {
    let report = count_macs(&toy(), (64, 64), 1).unwrap();
    let csv = report.render_csv();
    assert_eq!(csv, include_str!("golden/flops_toy.csv"));
    // Round-trip: numbers parse back identically.
    let mut params = Vec::new();
    let mut macs = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[0] != "total" {
            params.push(f[2].parse::<u64>().unwrap());
            macs.push(f[3].parse::<u64>().unwrap());
        }
    }
    for (row, (p, m)) in report.rows.iter().zip(params.iter().zip(&macs)) {
        assert_eq!(row.params, *p);
        assert_eq!(row.macs, *m);
    }
}
