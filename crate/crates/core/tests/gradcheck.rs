mod common;

use common::gradcheck;

#[test]
fn elementwise_ops() {
    gradcheck::elementwise_ops();
}

#[test]
fn scalar_broadcast_in_binary_ops() {
    gradcheck::scalar_broadcast_in_binary_ops();
}

#[test]
fn reductions_and_layout_ops() {
    gradcheck::reductions_and_layout_ops();
}

#[test]
fn matmul_and_softmax_family() {
    gradcheck::matmul_and_softmax_family();
}

#[test]
fn classifier_forward_pass() {
    gradcheck::classifier_forward_pass();
}

#[test]
fn second_order_through_grad() {
    gradcheck::second_order_through_grad();
}

#[test]
fn third_derivative_of_a_cubic() {
    gradcheck::third_derivative_of_a_cubic();
}
