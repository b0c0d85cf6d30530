use cvf_core::gradcheck::{loss_suite, primitive_suite, TOLERANCE};

fn assert_all(reports: Vec<cvf_core::gradcheck::CheckReport>) {
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "above {TOLERANCE}: {failed:?}");
    assert!(reports.iter().all(|r| r.trials >= 50));
}

#[test]
fn primitives_match_central_differences() {
    assert_all(primitive_suite(50, 11));
}

#[test]
fn losses_match_central_differences() {
    assert_all(loss_suite(50, 12));
}

#[test]
fn checker_catches_a_wrong_gradient() {
    use cvf_core::autodiff::{ParamStore, Tape};
    use cvf_core::linalg::Matrix;
    let mut store = ParamStore::new();
    let id = store.insert("x", Matrix::row_vector(&[0.3, -0.7]), true);
    let mut r = cvf_core::rng::stream(0, "checker");
    // The value is ‖x‖² but enters the tape as a constant, so the tape
    // gradient is zero while the numeric one is 2x.
    let err = cvf_core::gradcheck::relative_error(
        &mut store,
        |s, t: &mut Tape| {
            let sq: f64 = s.value(id).data().iter().map(|v| v * v).sum();
            let x = t.param(s, id);
            let zero = t.scale(x, 0.0);
            let zero = t.sum(zero);
            let c = t.constant(Matrix::filled(1, 1, sq));
            t.add(c, zero).unwrap()
        },
        None,
        &mut r,
    );
    assert!(err > 0.5, "{err}");
}
