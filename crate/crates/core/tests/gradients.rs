use dfpn_core::gradcheck::{model_suite, suite_passed, unit_suite};

#[test]
fn unit_suite_passes() {
    let r = unit_suite(11).unwrap();
    for c in &r {
        println!("{c:?}");
    }
    assert!(suite_passed(&r));
}

#[test]
fn model_suite_passes() {
    let t = std::time::Instant::now();
    let r = model_suite(5, None).unwrap();
    for c in &r {
        println!("{c:?}");
    }
    println!("{:?}", t.elapsed());
    assert!(suite_passed(&r));
}
