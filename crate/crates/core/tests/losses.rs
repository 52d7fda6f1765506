mod common;

use common::{random_backbone_features, random_tensor, Nd};
use proptest::prelude::*;
use tashr_core::losses::{
    detection_loss, feature_loss, gan_losses, gram, pixel_loss, text_loss, total_loss, weighted_total, FeatureProvider,
    TvMode,
};
use tashr_core::ErrorClass;
use tashr_tensor::gradcheck::{max_relative_error, numerical_gradient};
use tashr_tensor::{Tape, Tensor};

const WIDTHS: [usize; 3] = [4, 6, 8];

fn providers() -> (FeatureProvider<f64>, FeatureProvider<f64>, FeatureProvider<f64>) {
    (
        FeatureProvider::random("perceptual", 11, &WIDTHS).unwrap(),
        FeatureProvider::random("text-det", 12, &WIDTHS).unwrap(),
        FeatureProvider::random("text-rec", 13, &[5]).unwrap(),
    )
}

fn scalar(t: &Tensor<f64>) -> f64 {
    t.item()
}

fn detection(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    scalar(&detection_loss(tape.constant(a.clone()), tape.constant(b.clone())).unwrap().value())
}

fn pixel(a: &Tensor<f64>, b: &Tensor<f64>, mode: TvMode) -> f64 {
    let tape = Tape::new();
    scalar(&pixel_loss(tape.constant(a.clone()), tape.constant(b.clone()), mode).unwrap().value())
}

fn feature(a: &Tensor<f64>, b: &Tensor<f64>, p: &FeatureProvider<f64>) -> f64 {
    let tape = Tape::new();
    scalar(&feature_loss(tape.constant(a.clone()), tape.constant(b.clone()), p).unwrap().value())
}

fn text(a: &Tensor<f64>, b: &Tensor<f64>, det: &FeatureProvider<f64>, rec: &FeatureProvider<f64>) -> f64 {
    let tape = Tape::new();
    scalar(&text_loss(tape.constant(a.clone()), tape.constant(b.clone()), det, rec).unwrap().value())
}

fn hinge(real: &Tensor<f64>, fake: &Tensor<f64>) -> (f64, f64) {
    let tape = Tape::new();
    let (g, d) = gan_losses(tape.constant(real.clone()), tape.constant(fake.clone())).unwrap();
    (scalar(&g.value()), scalar(&d.value()))
}

#[test]
fn detection_examples() {
    let ones = Tensor::ones(&[1, 1, 4, 4]);
    let zeros = Tensor::zeros(&[1, 1, 4, 4]);
    assert_eq!(detection(&ones, &ones), 0.0);
    assert_eq!(detection(&ones, &zeros), 1.0);
    assert_eq!(detection(&Tensor::full(&[1, 1, 4, 4], 0.25), &Tensor::full(&[1, 1, 4, 4], 0.75)), 0.5);
    let tape = Tape::new();
    let err = detection_loss(tape.constant(ones.clone()), tape.constant(Tensor::ones(&[1, 1, 4, 5]))).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
}

#[test]
fn pixel_examples() {
    let c = Tensor::full(&[1, 3, 4, 4], 0.3);
    assert_eq!(pixel(&c, &c, TvMode::AsPrinted), 0.0);
    let up = Tensor::full(&[1, 3, 4, 4], 0.4);
    assert!((pixel(&up, &c, TvMode::AsPrinted) - 0.52).abs() < 1e-12);
    // 2x2 ramp [[0, 1], [2, 3]]: down pairs |2-0|, |3-1|; right pairs |1-0|, |3-2|
    let ramp = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    assert!((pixel(&ramp, &ramp, TvMode::AsPrinted) - 0.1 * (2.0 + 1.0)).abs() < 1e-12);
}

#[test]
fn gram_examples() {
    let tape = Tape::new();
    let g = gram(tape.constant(Tensor::ones(&[1, 1, 2, 2]))).unwrap().value();
    assert_eq!(g.data(), &[1.0]);
    let zero = gram(tape.constant(Tensor::<f64>::zeros(&[1, 3, 2, 2]))).unwrap().value();
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let disjoint = Tensor::new(&[1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let g = gram(tape.constant(disjoint)).unwrap().value();
    assert_eq!(g.data()[1], 0.0);
    assert_eq!(g.data()[2], 0.0);
}

#[test]
fn hinge_examples() {
    let z = Tensor::zeros(&[2, 1, 2, 2]);
    assert_eq!(hinge(&z, &z), (0.0, 2.0));
    let (g, d) = hinge(&Tensor::full(&[2, 1, 2, 2], 2.0), &Tensor::full(&[2, 1, 2, 2], -2.0));
    assert_eq!((g, d), (2.0, 0.0));
    assert_eq!(hinge(&z, &Tensor::full(&[2, 1, 2, 2], 3.0)).0, -3.0);
}

#[test]
fn total_examples() {
    assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, 0.0).unwrap().total, 0.0);
    assert!((total_loss(1.0, 1.0, 1.0, 1.0, 1.0, 0.0).unwrap().total - 13.01).abs() < 1e-12);
    assert!((total_loss(0.0, 0.0, 0.0, -3.0, 0.0, 0.0).unwrap().total + 0.03).abs() < 1e-12);
    let err = total_loss(0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Numeric);
    assert!(err.to_string().contains("l_pixel"));
}

#[test]
fn losses_match_straight_line_oracles() {
    let (perc, det, rec) = providers();
    for seed in 0..4 {
        let out = random_tensor(&[2, 3, 8, 8], 100 + seed, 0.0, 1.0);
        let gt = random_tensor(&[2, 3, 8, 8], 200 + seed, 0.0, 1.0);
        let (o, g) = (Nd::from_tensor(&out), Nd::from_tensor(&gt));
        let m_out = random_tensor(&[2, 1, 8, 8], 300 + seed, 0.0, 1.0);
        let m_gt = random_tensor(&[2, 1, 8, 8], 400 + seed, 0.0, 1.0);
        assert!((detection(&m_out, &m_gt) - common::mean_abs(m_out.data(), m_gt.data())).abs() < 1e-6);
        assert!((pixel(&out, &gt, TvMode::AsPrinted) - common::pixel_loss(&o, &g, false)).abs() < 1e-6);
        assert!((pixel(&out, &gt, TvMode::SelfShift) - common::pixel_loss(&o, &g, true)).abs() < 1e-6);
        let fo = random_backbone_features(&perc, &WIDTHS, 3, &o);
        let fg = random_backbone_features(&perc, &WIDTHS, 3, &g);
        assert!((feature(&out, &gt, &perc) - common::feature_loss(&fo, &fg)).abs() < 1e-6);
        let expected_text = common::text_loss(
            &random_backbone_features(&det, &WIDTHS, 3, &o),
            &random_backbone_features(&det, &WIDTHS, 3, &g),
            &random_backbone_features(&rec, &[5], 3, &o),
            &random_backbone_features(&rec, &[5], 3, &g),
        );
        assert!((text(&out, &gt, &det, &rec) - expected_text).abs() < 1e-6);
    }
}

#[test]
fn reconstruction_losses_vanish_at_identity() {
    let (perc, det, rec) = providers();
    let x = random_tensor(&[1, 3, 8, 8], 5, 0.0, 1.0);
    assert_eq!(feature(&x, &x, &perc), 0.0);
    assert_eq!(text(&x, &x, &det, &rec), 0.0);
    let y = random_tensor(&[1, 3, 8, 8], 6, 0.0, 1.0);
    assert!((feature(&x, &y, &perc) - feature(&y, &x, &perc)).abs() < 1e-12);
}

#[test]
fn text_loss_requires_three_and_one_taps() {
    let (perc, det, rec) = providers();
    let x = random_tensor(&[1, 3, 8, 8], 5, 0.0, 1.0);
    let tape = Tape::new();
    let a = tape.constant(x.clone());
    assert_eq!(text_loss(a, a, &det, &det).unwrap_err().class(), ErrorClass::Config);
    assert_eq!(text_loss(a, a, &rec, &rec).unwrap_err().class(), ErrorClass::Config);
    assert!(text_loss(a, a, &perc, &rec).is_ok());
}

#[test]
fn text_loss_is_invariant_under_pixel_permutation() {
    let det = FeatureProvider::pointwise("det", 21, &[4, 6, 5]).unwrap();
    let rec = FeatureProvider::pointwise("rec", 22, &[7]).unwrap();
    let out = random_tensor(&[1, 3, 8, 8], 1, 0.0, 1.0);
    let gt = random_tensor(&[1, 3, 8, 8], 2, 0.0, 1.0);
    // a fixed pseudo-random permutation of the 64 positions
    let perm: Vec<usize> = (0..64).map(|i| (i * 37 + 11) % 64).collect();
    let permute = |t: &Tensor<f64>| {
        Tensor::from_fn(&[1, 3, 8, 8], |i| {
            let (c, p) = (i / 64, i % 64);
            t.data()[c * 64 + perm[p]]
        })
    };
    let a = text(&out, &gt, &det, &rec);
    let b = text(&permute(&out), &permute(&gt), &det, &rec);
    assert!(a > 0.0);
    assert!((a - b).abs() < 1e-12);
}

fn assert_grad_matches(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64, analytic: Tensor<f64>) {
    let numeric = numerical_gradient(x, 1e-6, &f);
    let err = max_relative_error(analytic.data(), numeric.data(), 1e-8);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (perc, det, rec) = providers();
    let out = random_tensor(&[1, 3, 8, 8], 31, 0.05, 0.95);
    let gt = random_tensor(&[1, 3, 8, 8], 32, 0.05, 0.95);
    for mode in [TvMode::AsPrinted, TvMode::SelfShift] {
        let tape = Tape::new();
        let x = tape.param(out.clone());
        let l = pixel_loss(x, tape.constant(gt.clone()), mode).unwrap();
        let g = l.backward().unwrap().get(x).unwrap().clone();
        assert_grad_matches(&out, |t| pixel(t, &gt, mode), g);
    }
    let tape = Tape::new();
    let x = tape.param(out.clone());
    let l = feature_loss(x, tape.constant(gt.clone()), &perc).unwrap();
    let g = l.backward().unwrap().get(x).unwrap().clone();
    assert_grad_matches(&out, |t| feature(t, &gt, &perc), g);

    let tape = Tape::new();
    let x = tape.param(out.clone());
    let l = text_loss(x, tape.constant(gt.clone()), &det, &rec).unwrap();
    let g = l.backward().unwrap().get(x).unwrap().clone();
    assert_grad_matches(&out, |t| text(t, &gt, &det, &rec), g);

    let m_out = random_tensor(&[1, 1, 8, 8], 33, 0.0, 1.0);
    let m_gt = random_tensor(&[1, 1, 8, 8], 34, 0.0, 1.0);
    let tape = Tape::new();
    let x = tape.param(m_out.clone());
    let l = detection_loss(x, tape.constant(m_gt.clone())).unwrap();
    let g = l.backward().unwrap().get(x).unwrap().clone();
    assert_grad_matches(&m_out, |t| detection(t, &m_gt), g);
}

#[test]
fn provider_weights_get_no_gradient() {
    let (perc, _, _) = providers();
    let tape = Tape::new();
    let x = tape.param(random_tensor(&[1, 3, 8, 8], 1, 0.0, 1.0));
    let gt = tape.constant(random_tensor(&[1, 3, 8, 8], 2, 0.0, 1.0));
    let before = perc.clone();
    let grads = feature_loss(x, gt, &perc).unwrap().backward().unwrap();
    assert!(grads.get(x).is_some());
    assert_eq!(perc, before);
}

proptest! {
    #[test]
    fn total_is_the_stated_combination(parts in prop::array::uniform6(-100.0f64..100.0)) {
        let [a, b, c, d, e, f] = parts;
        let r = total_loss(a, b, c, d, e, f).unwrap();
        let expected = 10.0 * a + b + c + 0.01 * d + e;
        prop_assert!((r.total - expected).abs() <= 1e-9 * (1.0 + expected.abs()));
        prop_assert_eq!(r.total, weighted_total(a, b, c, d, e));
        prop_assert_eq!(r.l_gan_d, f);
    }

    #[test]
    fn reconstruction_losses_are_non_negative(seed in 0u64..1000) {
        let a = random_tensor(&[1, 3, 8, 8], seed, 0.0, 1.0);
        let b = random_tensor(&[1, 3, 8, 8], seed + 1, 0.0, 1.0);
        prop_assert!(detection(&a, &b) >= 0.0);
        prop_assert!(pixel(&a, &b, TvMode::AsPrinted) >= 0.0);
        let real = random_tensor(&[1, 1, 2, 2], seed + 2, -3.0, 3.0);
        let fake = random_tensor(&[1, 1, 2, 2], seed + 3, -3.0, 3.0);
        prop_assert!(hinge(&real, &fake).1 >= 0.0);
    }
}
