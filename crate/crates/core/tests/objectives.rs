use infomask::numerics::{finite_diff_check, Tape, Tensor, Var};
use infomask::objectives::{adversarial_loss, contrastive_loss, total_loss, wti, LossParts, LossWeights};
use infomask::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen::<f64>() * 2.0 - 1.0).unwrap()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Direct enumeration of the weighted max-over-tokens score for one pair.
fn brute_wti(x1: &[Vec<f64>], g1: &[f64], x2: &[Vec<f64>], g2: &[f64]) -> f64 {
    let (w1, w2) = (softmax(g1), softmax(g2));
    let s: Vec<Vec<f64>> = x1.iter().map(|a| x2.iter().map(|b| cosine(a, b)).collect()).collect();
    let mut fwd = 0.0;
    for i in 0..x1.len() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..x2.len() {
            best = best.max(s[i][j]);
        }
        fwd += w1[i] * best;
    }
    let mut bwd = 0.0;
    for j in 0..x2.len() {
        let mut best = f64::NEG_INFINITY;
        for i in 0..x1.len() {
            best = best.max(s[i][j]);
        }
        bwd += w2[j] * best;
    }
    0.5 * (fwd + bwd)
}

fn rows(t: &Tensor, b: usize) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (n, e) = (s[1], s[2]);
    (0..n).map(|i| t.data()[(b * n + i) * e..(b * n + i + 1) * e].to_vec()).collect()
}

#[test]
fn wti_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x1, x2) = (rand_t(&[2, 2, 5], &mut rng), rand_t(&[3, 3, 5], &mut rng));
    let (g1, g2) = (rand_t(&[2, 2], &mut rng), rand_t(&[3, 3], &mut rng));
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let s = wti(c(&x1), c(&g1), c(&x2), c(&g2)).unwrap().value();
    assert_eq!(s.shape(), &[2, 3]);
    for a in 0..2 {
        for b in 0..3 {
            let want = brute_wti(&rows(&x1, a), &g1.data()[a * 2..a * 2 + 2], &rows(&x2, b), &g2.data()[b * 3..b * 3 + 3]);
            assert!((s.at(&[a, b]) - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn wti_rejects_mismatched_widths() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros([1, 2, 3]));
    let b = tape.constant(Tensor::zeros([1, 2, 4]));
    let w = tape.constant(Tensor::zeros([1, 2]));
    assert!(wti(a, w, b, w).is_err());
}

/// Independent evaluation of the symmetric cross-entropy.
fn brute_contrastive(s: &Tensor, tau: f64) -> f64 {
    let b = s.shape()[0];
    let mut rows = 0.0;
    let mut cols = 0.0;
    for i in 0..b {
        let r: Vec<f64> = (0..b).map(|j| s.at(&[i, j]) / tau).collect();
        let c: Vec<f64> = (0..b).map(|j| s.at(&[j, i]) / tau).collect();
        rows -= softmax(&r)[i].ln();
        cols -= softmax(&c)[i].ln();
    }
    0.5 * (rows / b as f64 + cols / b as f64)
}

#[test]
fn contrastive_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let s = rand_t(&[3, 3], &mut rng);
        let tau = rng.gen_range(0.01..0.5);
        let tape = Tape::new();
        let l = contrastive_loss(tape.constant(s.clone()), tape.constant(Tensor::scalar(1.0 / tau).unwrap()))
            .unwrap()
            .item()
            .unwrap();
        assert!((l - brute_contrastive(&s, tau)).abs() <= 1e-10);
    }
}

#[test]
fn contrastive_vanishes_when_diagonal_dominates() {
    let tape = Tape::new();
    let inv = tape.constant(Tensor::scalar(1.0).unwrap());
    let mut last = f64::INFINITY;
    for scale in [1.0, 10.0, 100.0, 1000.0] {
        let s = Tensor::from_fn([3, 3], |k| if k % 4 == 0 { scale } else { 0.0 }).unwrap();
        let l = contrastive_loss(tape.constant(s), inv).unwrap().item().unwrap();
        assert!(l < last || l == 0.0);
        last = l;
    }
    assert!(last < 1e-12);
}

proptest! {
    #[test]
    fn contrastive_nonnegative_and_tau_absorbs_scale(
        data in prop::collection::vec(-1.0f64..1.0, 16),
        tau in 0.01f64..0.5,
        c in 0.1f64..10.0,
    ) {
        let s = Tensor::new([4, 4], data).unwrap();
        let tape = Tape::new();
        let l1 = contrastive_loss(tape.constant(s.clone()), tape.constant(Tensor::scalar(1.0 / tau).unwrap())).unwrap().item().unwrap();
        let scaled = Tensor::new([4, 4], s.data().iter().map(|v| v * c).collect()).unwrap();
        let l2 = contrastive_loss(tape.constant(scaled), tape.constant(Tensor::scalar(1.0 / (tau * c)).unwrap())).unwrap().item().unwrap();
        prop_assert!(l1 >= 0.0);
        prop_assert!((l1 - l2).abs() <= 1e-10 * l1.max(1.0));
    }

    #[test]
    fn wti_self_similarity_is_one(data in prop::collection::vec(-1.0f64..1.0, 12), g in prop::collection::vec(-2.0f64..2.0, 3)) {
        prop_assume!(data.chunks(4).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
        let tape = Tape::new();
        let x = tape.constant(Tensor::new([1, 3, 4], data).unwrap());
        let w = tape.constant(Tensor::new([1, 3], g).unwrap());
        let s = wti(x, w, x, w).unwrap().item().unwrap();
        prop_assert!((s - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    fn wti_loss(x: Var<'_>) -> Result<Var<'_>> {
        let tape = x.tape();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = tape.constant(rand_t(&[3, 2, 4], &mut rng));
        let g1 = tape.constant(rand_t(&[3, 3], &mut rng));
        let g2 = tape.constant(rand_t(&[3, 2], &mut rng));
        let s = wti(x, g1, y, g2)?;
        contrastive_loss(s, tape.constant(Tensor::scalar(5.0)?))
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_t(&[3, 3, 4], &mut rng);
    assert!(finite_diff_check(wti_loss, &x, 1e-6).unwrap() <= 1e-6);

    fn adv(x: Var<'_>) -> Result<Var<'_>> {
        let a = x.select(0, 0)?.softmax_lastdim()?;
        let b = x.select(0, 1)?.softmax_lastdim()?;
        adversarial_loss(a, b)
    }
    let x = rand_t(&[2, 3, 2], &mut rng);
    assert!(finite_diff_check(adv, &x, 1e-6).unwrap() <= 1e-8);
}

#[test]
fn total_gradient_is_weighted_sum_of_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0 = rand_t(&[6], &mut rng);
    let w = LossWeights::default();
    let grad_of = |pick: Option<usize>| {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let part = |i: usize| x.select(0, i).unwrap().exp().unwrap().scale(i as f64 + 1.0).unwrap();
        let parts = LossParts { vtc: part(0), vtc_h: part(1), vvc_h: part(2), vtc_l: part(3), vvc_l: part(4), adv: part(5) };
        let list = [parts.vtc, parts.vtc_h, parts.vvc_h, parts.vtc_l, parts.vvc_l, parts.adv];
        let loss = match pick {
            Some(i) => list[i],
            None => total_loss(&parts, &w).unwrap(),
        };
        tape.backward(loss).unwrap().wrt(x)
    };
    let total = grad_of(None);
    let k = [1.0, w.alpha, w.alpha, w.beta, w.beta, w.gamma];
    let mut sum = vec![0.0; 6];
    for (i, ki) in k.iter().enumerate() {
        grad_of(Some(i)).data().iter().zip(sum.iter_mut()).for_each(|(g, s)| *s += ki * g);
    }
    for (a, b) in total.data().iter().zip(&sum) {
        assert!((a - b).abs() < 1e-12);
    }
}
