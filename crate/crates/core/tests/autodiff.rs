//! Gradient correctness of every primitive against the float64
//! finite-difference oracle.

mod common;

#[test]
fn every_primitive_matches_finite_differences() {
    // 20+ random shapes per op, as the exit criteria demand.
    common::op_gradient_suite(20, 0xAD01);
}

#[test]
fn mlp_end_to_end_gradients() {
    for seed in 0..5 {
        common::mlp_gradient_check(0x313 + seed);
    }
}
