mod common;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, err) in common::primitive_gradient_errors() {
        assert!(err < 1e-6, "{name}: relative error {err:e}");
    }
}

#[test]
fn micro_encoder_with_masked_loss_matches_central_differences() {
    for (head, err) in common::encoder_gradient_errors() {
        assert!(err < 1e-4, "{head}: relative error {err:e}");
    }
}
