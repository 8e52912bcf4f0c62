use evit_core::verify;

#[test]
fn op_gradchecks_pass() {
    let results = verify::op_gradchecks(&verify::DEFAULT_SEEDS);
    for r in &results {
        println!("{}", r.line());
    }
    assert!(verify::all_passed(&results));
}

#[test]
fn block_gradchecks_pass() {
    let results = verify::block_gradchecks(&verify::DEFAULT_SEEDS);
    for r in &results {
        println!("{}", r.line());
    }
    assert!(verify::all_passed(&results));
}

#[test]
fn model_gradcheck_passes() {
    let results = verify::model_gradcheck(&verify::DEFAULT_SEEDS);
    for r in &results {
        println!("{}", r.line());
    }
    assert!(verify::all_passed(&results));
}

#[test]
fn model_gradcheck_bisect() {
    for s in [11u64, 23, 37, 51, 64] {
        let results = evit_core::verify::model_gradcheck(&[s]);
        println!("seed {s}: {}", results[0].line());
    }
}
