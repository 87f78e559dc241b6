use misr_core::verify::{gradcheck_model_config, gradient_suite, model_gradcheck, oracle_suite};

#[test]
fn every_primitive_passes_finite_differences() {
    let results = gradient_suite(20, 7, None).unwrap();
    for r in &results {
        println!("{r}");
    }
    assert!(results.iter().all(|r| r.passed() && r.instances == 20));
}

#[test]
fn kernels_match_loop_oracles() {
    let results = oracle_suite(20, 11).unwrap();
    for r in &results {
        println!("{r}");
    }
    assert!(results.iter().all(|r| r.passed() && r.instances == 20));
}

#[test]
fn broken_backward_is_detected() {
    let results = gradient_suite(2, 7, Some("gelu")).unwrap();
    let gelu = results.iter().find(|r| r.name == "grad/gelu").unwrap();
    assert!(!gelu.passed());
}

#[test]
fn tiny_model_passes_finite_differences() {
    let mut cfg = gradcheck_model_config();
    cfg.frames = 2;
    let r = model_gradcheck(&cfg, 6, 2, 3, None).unwrap();
    println!("{r}");
    assert!(r.passed());
}

#[test]
#[ignore]
fn desk_model_timing() {
    let t = std::time::Instant::now();
    let r = model_gradcheck(&gradcheck_model_config(), 16, 2, 5, None).unwrap();
    println!("{r} in {:?}", t.elapsed());
}
