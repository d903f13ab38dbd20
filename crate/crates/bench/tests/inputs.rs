use saeaudit::audit::average_precision;
use saeaudit::gpt::Mode;
use saeaudit_bench::*;

#[test]
fn matmul_inputs_have_the_expected_shapes() {
    let (a, b) = (matrix(5, 3, 1), matrix(3, 4, 2));
    assert_eq!(matmul_step(&a, &b, false).unwrap().shape(), &[5, 4]);
    assert_eq!(matmul_step(&a, &b, true).unwrap().shape(), &[3, 4]);
    assert_eq!(matrix(2, 2, 9), matrix(2, 2, 9));
}

#[test]
fn attention_and_model_inputs_run() {
    let inp = attention_input(8, 16, 4, 3);
    assert_eq!(attention_forward(&inp).unwrap().shape(), &[8, 16]);
    let (logits, _) = toy_gpt().unwrap().forward(&[1, 2, 3], Mode::Eval, false).unwrap();
    assert_eq!(logits.shape(), &[3, 1000]);
}

#[test]
fn sae_and_ap_inputs_are_valid() {
    let sae = toy_sae(16, 48, 4).unwrap();
    let codes = sae.encode_batch(&matrix(10, 16, 4)).unwrap();
    assert!((0..10).all(|r| codes.row(r).iter().filter(|&&v| v != 0.0).count() <= 4));
    let (s, l) = ap_instance(100, 0.1, 5);
    let ap = average_precision(&s, &l).unwrap();
    assert!((0.0..=1.0).contains(&ap));
}
