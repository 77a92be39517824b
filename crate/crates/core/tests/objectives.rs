mod common;

use almrr::numeric::gradcheck::{check_gradients, GradCheckOptions};
use almrr::numeric::{Graph, Tensor};
use almrr::objectives::{self, dice_loss_grad, focal_loss_grad, rec_loss_grad, FocalParams, LossReport, DICE_EPS};
use common::*;
use proptest::prelude::*;

fn binary_mask(seed: u64, n: usize) -> Vec<f64> {
    random_vec(seed, n, 0.0, 1.0).into_iter().map(|v| if v > 0.6 { 1.0 } else { 0.0 }).collect()
}

#[test]
fn reconstruction_loss_matches_loop() {
    let (c, h, w) = (4, 5, 3);
    let fh = random_vec(1, c * h * w, -2.0, 2.0);
    let phi = random_vec(2, c * h * w, -2.0, 2.0);
    let mut want = 0.0;
    for i in 0..h * w {
        want += (0..c).map(|k| (fh[k * h * w + i] - phi[k * h * w + i]).powi(2)).sum::<f64>().sqrt();
    }
    want /= (h * w) as f64;
    let (v, _) = rec_loss_grad(&fh, &phi, c).unwrap();
    assert!((v - want).abs() < 1e-13);
    let (zero, g) = rec_loss_grad(&phi, &phi, c).unwrap();
    assert_eq!(zero, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn focal_two_by_two_constant() {
    let (v, _) = focal_loss_grad(&[0.9f64, 0.1, 0.8, 0.2], &[1.0, 0.0, 1.0, 0.0], FocalParams::default()).unwrap();
    assert!((v - 0.002494836802286662).abs() < 1e-12, "{v}");
}

#[test]
fn focal_without_focusing_is_weighted_cross_entropy() {
    let p = random_vec(3, 200, 0.01, 0.99);
    let m = binary_mask(4, 200);
    let (v, _) = focal_loss_grad(&p, &m, FocalParams { alpha_pos: 0.5, gamma: 0.0 }).unwrap();
    let bce = p.iter().zip(&m).map(|(&p, &m)| -(m * p.ln() + (1.0 - m) * (1.0 - p).ln())).sum::<f64>() / 200.0;
    assert!((v - 0.5 * bce).abs() < 1e-13);

    let (v, _) = focal_loss_grad(&p, &m, FocalParams { alpha_pos: 0.75, gamma: 0.0 }).unwrap();
    let weighted = p.iter().zip(&m).map(|(&p, &m)| -(0.75 * m * p.ln() + 0.25 * (1.0 - m) * (1.0 - p).ln())).sum::<f64>() / 200.0;
    assert!((v - weighted).abs() < 1e-13);
}

#[test]
fn focal_decreases_toward_the_label() {
    let fp = FocalParams::default();
    let mut last = f64::INFINITY;
    for k in 1..20 {
        let p = k as f64 / 20.0;
        let (pos, _) = focal_loss_grad(&[p], &[1.0], fp).unwrap();
        let (neg, _) = focal_loss_grad(&[1.0 - p], &[0.0], fp).unwrap();
        assert!(pos < last);
        assert!(neg <= pos, "background weight is the smaller one");
        last = pos;
    }
}

#[test]
fn focal_clamps_saturated_predictions() {
    let (v, g) = focal_loss_grad(&[0.0f64, 1.0], &[1.0, 0.0], FocalParams::default()).unwrap();
    assert!(v.is_finite() && v > 0.0);
    assert_eq!(g, vec![0.0, 0.0]);
}

#[test]
fn dice_reference_cases() {
    let (v, _) = dice_loss_grad(&[1.0, 1.0, 0.0, 0.0], &[0.0, 1.0, 1.0, 0.0], 0.0).unwrap();
    assert_eq!(v, 0.5);
    let m = [1.0, 0.0, 1.0, 1.0];
    assert_eq!(dice_loss_grad(&m, &m, 0.0).unwrap().0, 0.0);
    assert_eq!(dice_loss_grad(&[0.0, 1.0, 0.0, 0.0], &m, 0.0).unwrap().0, 1.0);
    assert!(dice_loss_grad(&[0.0; 4], &[0.0; 4], 0.0).is_err());
    assert_eq!(dice_loss_grad(&[0.0; 4], &[0.0; 4], DICE_EPS).unwrap().0, 0.0);
}

#[test]
fn losses_reject_soft_masks() {
    assert!(focal_loss_grad(&[0.3], &[0.5], FocalParams::default()).is_err());
    assert!(dice_loss_grad(&[0.3], &[0.5], 1.0).is_err());
    assert!(dice_loss_grad(&[0.3, 0.1], &[1.0], 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn dice_is_symmetric_on_binary_pairs(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..40)) {
        let a: Vec<f64> = bits.iter().map(|b| b.0 as u8 as f64).collect();
        let b: Vec<f64> = bits.iter().map(|b| b.1 as u8 as f64).collect();
        let ab = dice_loss_grad(&a, &b, 1.0).unwrap().0;
        let ba = dice_loss_grad(&b, &a, 1.0).unwrap().0;
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn report_totals_are_exact_sums(r in -1e3f64..1e3, f in 0f64..1e2, d in 0f64..1.0) {
        let rep = LossReport::new(r, f, d);
        prop_assert_eq!(rep.l_ref, f + d);
        prop_assert_eq!(rep.l_total, r + (f + d));
    }
}

#[test]
fn dice_decreases_as_masked_prediction_grows() {
    let m = [1.0, 1.0, 0.0, 0.0];
    let mut last = f64::INFINITY;
    for k in 0..=10 {
        let p = k as f64 / 10.0;
        let (v, _) = dice_loss_grad(&[p, 0.3, 0.2, 0.1], &m, 1.0).unwrap();
        assert!(v < last);
        last = v;
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let opts = GradCheckOptions::default();
    let mask = binary_mask(5, 36);
    let logits = random_tensor(6, &[1, 6, 6]).with_grad();
    let fh = random_tensor(7, &[3, 4, 4]).with_grad();
    let phi = random_tensor(8, &[3, 4, 4]).with_grad();

    let r = check_gradients(&[fh.clone(), phi.clone()], |_, v| objectives::rec_loss(v[0], v[1]), &opts).unwrap();
    assert!(r.passed(), "rec {r:?}");
    for gamma in [0.0, 1.0, 2.0, 2.5] {
        let fp = FocalParams { alpha_pos: 0.75, gamma };
        let r = check_gradients(&[logits.clone()], |_, v| objectives::focal_loss(v[0].sigmoid(), &mask, fp), &opts).unwrap();
        assert!(r.passed(), "focal γ={gamma} {r:?}");
    }
    for eps in [0.0, 1.0] {
        let r = check_gradients(&[logits.clone()], |_, v| objectives::dice_loss(v[0].sigmoid(), &mask, eps), &opts).unwrap();
        assert!(r.passed(), "dice ε={eps} {r:?}");
    }
    let r = check_gradients(
        &[fh, phi, logits],
        |_, v| Ok(objectives::total_loss(objectives::rec_loss(v[0], v[1])?, v[2].sigmoid(), &mask, FocalParams::default())?.loss),
        &opts,
    )
    .unwrap();
    assert!(r.passed(), "total {r:?}");
}

#[test]
fn total_gradient_is_sum_of_parts() {
    let mask = binary_mask(9, 16);
    let p = Tensor::new(vec![1, 4, 4], random_vec(10, 16, 0.05, 0.95)).unwrap().with_grad();
    let fp = FocalParams::default();
    let g = Graph::new();
    let (fh, phi, pv) = (g.leaf(&random_tensor(11, &[2, 4, 4]).with_grad()), g.leaf(&random_tensor(12, &[2, 4, 4])), g.leaf(&p));
    let t = objectives::total_loss(objectives::rec_loss(fh, phi).unwrap(), pv, &mask, fp).unwrap();
    assert_eq!(t.report.l_total, t.report.l_rec + t.report.l_ref);
    assert_eq!(t.loss.item(), t.report.l_rec + (t.report.l_focal + t.report.l_dice));
    g.backward(t.loss).unwrap();
    let (_, gf) = focal_loss_grad(&p.data, &mask, fp).unwrap();
    let (_, gd) = dice_loss_grad(&p.data, &mask, DICE_EPS).unwrap();
    let want: Vec<f64> = gf.iter().zip(&gd).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(&pv.grad().unwrap(), &want) < 1e-15);
}
