use morphseg::autodiff::{grad_check_many, Graph, Tensor, Var};
use morphseg::error::Error;
use morphseg::gradsuite;
use morphseg::losses::*;
use morphseg::network::NetworkOutputs;
use morphseg::volume::{gradient_magnitude_l1, Shape3, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: [usize; 5] = [1, 1, 4, 4, 4];

fn t(data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(SHAPE.to_vec(), data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Vec<f64> {
    (0..64).map(|_| rng.random_range(lo..hi)).collect()
}

fn scalar(g: &Graph<f64>, v: Var) -> f64 {
    g.value(v).item()
}

#[test]
fn region_means_of_matching_binary_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s: Vec<f64> = (0..64).map(|_| rng.random_range(0..2) as f64).collect();
    let mut g = Graph::new();
    let i = g.constant(t(s.clone()));
    let sv = g.constant(t(s));
    let (c1, c2) = region_means_soft(&mut g, i, sv).unwrap();
    assert_eq!((scalar(&g, c1), scalar(&g, c2)), (1.0, 0.0));
}

#[test]
fn region_means_of_half_mask_are_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random(&mut rng, 0.0, 1.0);
    let mean = img.iter().sum::<f64>() / 64.0;
    let mut g = Graph::new();
    let i = g.constant(t(img));
    let s = g.constant(t(vec![0.5; 64]));
    let (c1, c2) = region_means_soft(&mut g, i, s).unwrap();
    assert!((scalar(&g, c1) - mean).abs() < 1e-12);
    assert!((scalar(&g, c2) - mean).abs() < 1e-12);
}

#[test]
fn region_means_match_weighted_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let img = random(&mut rng, 0.0, 1.0);
        let s = random(&mut rng, 0.0, 1.0);
        let num1: f64 = img.iter().zip(&s).map(|(a, b)| a * b).sum();
        let num2: f64 = img.iter().zip(&s).map(|(a, b)| a * (1.0 - b)).sum();
        let den1: f64 = s.iter().sum();
        let den2: f64 = s.iter().map(|b| 1.0 - b).sum();
        let mut g = Graph::new();
        let i = g.constant(t(img));
        let sv = g.constant(t(s));
        let (c1, c2) = region_means_soft(&mut g, i, sv).unwrap();
        assert!((scalar(&g, c1) - num1 / den1).abs() < 1e-12);
        assert!((scalar(&g, c2) - num2 / den2).abs() < 1e-12);
    }
}

#[test]
fn collapsed_masks_are_errors() {
    let mut g = Graph::new();
    let i = g.constant(t(vec![0.5; 64]));
    let zeros = g.constant(t(vec![0.0; 64]));
    let ones = g.constant(t(vec![1.0; 64]));
    assert!(matches!(region_means_soft(&mut g, i, zeros), Err(Error::CollapsedMask(_))));
    assert!(matches!(region_means_soft(&mut g, i, ones), Err(Error::CollapsedMask(_))));
}

#[test]
fn gamma_of_constant_s_bar_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let i = g.constant(t(random(&mut rng, 0.0, 1.0)));
    let sb = g.constant(t(vec![0.3; 64]));
    let c1 = g.scalar(0.8);
    let c2 = g.scalar(0.2);
    let gamma = gamma_net(&mut g, i, sb, c1, c2, 1.0, 2.0).unwrap();
    assert!(g.value(gamma).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gamma_matches_pointwise_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mut img = random(&mut rng, 0.0, 1.0);
        let sb = random(&mut rng, 0.0, 1.0);
        let (c1v, c2v) = (rng.random_range(0.5..1.0), rng.random_range(0.0..0.5));
        img[10] = c2v;
        let mag = gradient_magnitude_l1(
            &Volume3D::new(Shape3::new(4, 4, 4), sb.iter().map(|&v| v as f32).collect()).unwrap(),
        )
        .unwrap();
        let mut g = Graph::new();
        let i = g.constant(t(img.clone()));
        let s = g.constant(t(sb.clone()));
        let (c1, c2) = (g.scalar(c1v), g.scalar(c2v));
        let gamma = gamma_net(&mut g, i, s, c1, c2, 1.0, 2.0).unwrap();
        let gv = g.value(gamma).data();
        for k in 0..64 {
            let expect = mag.data()[k] as f64 * ((img[k] - c1v).powi(2) - 2.0 * (img[k] - c2v).powi(2));
            assert!((gv[k] - expect).abs() < 1e-6, "{k}: {} vs {expect}", gv[k]);
        }
        assert!(gv[10] >= 0.0);
        assert!((gv[10] - mag.data()[10] as f64 * (c2v - c1v).powi(2)).abs() < 1e-6);
    }
}

fn ac_value(gamma: Vec<f64>, s: Vec<f64>) -> f64 {
    let mut g = Graph::new();
    let gv = g.constant(t(gamma));
    let sv = g.constant(t(s));
    let l = loss_ac(&mut g, gv, sv).unwrap();
    scalar(&g, l)
}

#[test]
fn loss_ac_hand_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    assert_eq!(ac_value(vec![0.0; 64], random(&mut rng, 0.0, 1.0)), 1.0);
    assert!((ac_value(vec![-2.0; 64], vec![1.0; 64]) - (-2.0f64).exp()).abs() < 1e-12);
    assert_eq!(ac_value(vec![-2.0; 64], vec![0.0; 64]), 1.0);
    assert_eq!(ac_value(vec![3.0; 64], vec![1.0; 64]), 1.0);
    assert!((ac_value(vec![3.0; 64], vec![0.0; 64]) - (-3.0f64).exp()).abs() < 1e-12);
}

#[test]
fn loss_ac_per_voxel_range_and_gradient_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let gamma = random(&mut rng, -3.0, 3.0);
        let s = random(&mut rng, 0.0, 1.0);
        let max_abs = gamma.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for k in 0..64 {
            let mut one = vec![0.0; 64];
            one[k] = gamma[k];
            let per = ac_value(one, s.clone()) * 64.0 - 63.0;
            assert!(per > 0.0 && per <= max_abs.exp() + 1e-9);
        }
        let mut g = Graph::new();
        let gv = g.constant(t(gamma.clone()));
        let sv = g.param(t(s));
        let l = loss_ac(&mut g, gv, sv).unwrap();
        g.backward(l).unwrap();
        for (d, gm) in g.grad(sv).unwrap().data().iter().zip(&gamma) {
            assert_eq!(d.signum(), gm.signum(), "Γ {gm}, ∂L/∂S {d}");
        }
    }
}

fn rank_value(c1: f64, c2: f64) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.scalar(c1), g.scalar(c2));
    let l = loss_rank(&mut g, a, b).unwrap();
    scalar(&g, l)
}

#[test]
fn loss_rank_values() {
    assert_eq!(rank_value(0.4, 0.4), 1.0);
    assert!((rank_value(1.0, 0.0) - (-1.0f64).exp()).abs() < 1e-15);
    assert!(rank_value(0.9, 0.1) < rank_value(0.6, 0.1));
    assert!((rank_value(0.7, 0.2) - rank_value(0.9, 0.4)).abs() < 1e-12);
}

#[test]
fn loss_rec_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let c = g.constant(t(vec![0.3; 64]));
    let l = loss_rec(&mut g, c, c).unwrap();
    assert_eq!(scalar(&g, l), 0.0);

    let img = random(&mut rng, 0.0, 1.0);
    let mag =
        gradient_magnitude_l1(&Volume3D::new(Shape3::new(4, 4, 4), img.iter().map(|&v| v as f32).collect()).unwrap())
            .unwrap();
    let i = g.constant(t(img.clone()));
    let l = loss_rec(&mut g, i, i).unwrap();
    assert!((scalar(&g, l) - mag.mean()).abs() < 1e-6);

    let l = loss_rec(&mut g, c, i).unwrap();
    let expect = img.iter().map(|v| (0.3 - v).powi(2)).sum::<f64>() / 64.0;
    assert!((scalar(&g, l) - expect).abs() < 1e-12);
}

#[test]
fn loss_tight_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let z = g.constant(t(vec![0.0; 64]));
    let o = g.constant(t(vec![1.0; 64]));
    let r = g.constant(t(random(&mut rng, 0.0, 1.0)));
    let (lz, lo) = (loss_tight(&mut g, z, false), loss_tight(&mut g, o, false));
    assert_eq!((scalar(&g, lz), scalar(&g, lo)), (0.0, 1.0));
    let (n, lit) = (loss_tight(&mut g, r, false), loss_tight(&mut g, r, true));
    assert!((scalar(&g, n) * 64.0 - scalar(&g, lit)).abs() < 1e-12);
}

#[test]
fn loss_mv_and_me_values() {
    let mut g = Graph::new();
    let z = g.constant(t(vec![0.0; 64]));
    let me = loss_me(&mut g, z).unwrap();
    let mv = loss_mv(&mut g, z, false).unwrap();
    assert_eq!(scalar(&g, me), 0.0);
    assert_eq!(scalar(&g, mv), 1.0);

    let half = g.constant(t((0..64).map(|k| (k % 2) as f64).collect()));
    let mv = loss_mv(&mut g, half, false).unwrap();
    let lit = loss_mv(&mut g, half, true).unwrap();
    assert!((scalar(&g, mv) - (-0.25f64).exp()).abs() < 1e-12);
    assert!((scalar(&g, lit) - 0.25f64.exp()).abs() < 1e-12);

    let e = std::f64::consts::E;
    let c = g.constant(t(vec![1.0 / e; 64]));
    let me = loss_me(&mut g, c).unwrap();
    assert!((scalar(&g, me) - 1.0 / e).abs() < 1e-7);
    for s in [0.1, 0.2, 0.5, 0.9] {
        let v = g.constant(t(vec![s; 64]));
        let m = loss_me(&mut g, v).unwrap();
        assert!(scalar(&g, m) < 1.0 / e);
    }
}

fn fixture(seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = vec![2, 1, 4, 4, 4];
    let mut r =
        |lo: f64, hi: f64| Tensor::new(shape.clone(), (0..128).map(|_| rng.random_range(lo..hi)).collect()).unwrap();
    (r(0.0, 1.0), r(0.05, 0.95), r(0.05, 0.95), r(0.0, 1.0))
}

fn compound_of(w: LossWeights, flags: LossFlags) -> (LossBreakdown, f64) {
    let (img, s_bar, s, rec) = fixture(9);
    let mut g = Graph::new();
    let i = g.constant(img);
    let out = NetworkOutputs { s_bar: g.constant(s_bar), s: g.constant(s), i_rec: Some(g.constant(rec)) };
    let (terms, b) = compound(&mut g, i, &out, &w, &flags).unwrap();
    (b, scalar(&g, terms.total))
}

#[test]
fn compound_weighting() {
    let zero = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
        lambda4: 0.0,
        lambda5: 0.0,
        lambda6: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(compound_of(zero, LossFlags::default()).0.total, 0.0);
    let (b, total) = compound_of(LossWeights::ac_only(), LossFlags::default());
    assert_eq!(b.total, b.ac);
    assert_eq!(total, b.total);
}

#[test]
fn compound_equals_hand_composition() {
    let w = LossWeights::default();
    let (b, _) = compound_of(w, LossFlags::default());
    let (img, s_bar, s, rec) = fixture(9);
    let per = 64;
    let mut sums = [0.0f64; 6];
    let (mut c1s, mut c2s) = (0.0, 0.0);
    for k in 0..2 {
        let sl = |x: &Tensor<f64>| Tensor::new(SHAPE.to_vec(), x.data()[k * per..(k + 1) * per].to_vec()).unwrap();
        let mut g = Graph::new();
        let i = g.constant(sl(&img));
        let sb = g.constant(sl(&s_bar));
        let sv = g.constant(sl(&s));
        let r = g.constant(sl(&rec));
        let (c1, c2) = region_means_soft(&mut g, i, sv).unwrap();
        let gamma = gamma_net(&mut g, i, sb, c1, c2, w.alpha, w.beta).unwrap();
        let terms = [
            loss_ac(&mut g, gamma, sv).unwrap(),
            loss_rank(&mut g, c1, c2).unwrap(),
            loss_rec(&mut g, r, i).unwrap(),
            loss_tight(&mut g, sv, false),
            loss_mv(&mut g, sv, false).unwrap(),
            loss_me(&mut g, sv).unwrap(),
        ];
        for (acc, v) in sums.iter_mut().zip(terms) {
            *acc += scalar(&g, v) / 2.0;
        }
        c1s += scalar(&g, c1) / 2.0;
        c2s += scalar(&g, c2) / 2.0;
    }
    let got = [b.ac, b.rank, b.rec, b.tight, b.mv, b.me];
    for (a, e) in got.iter().zip(&sums) {
        assert!((a - e).abs() < 1e-12);
    }
    let total: f64 = sums.iter().zip(w.lambdas()).map(|(v, l)| v * l).sum();
    assert!((b.total - total).abs() < 1e-12);
    assert!((b.c1 - c1s).abs() < 1e-12 && (b.c2 - c2s).abs() < 1e-12);
}

#[test]
fn compound_flags_change_terms() {
    let base = compound_of(LossWeights::default(), LossFlags::default()).0;
    let sbar = compound_of(LossWeights::default(), LossFlags { ac_uses_s_bar: true, ..LossFlags::default() }).0;
    assert_ne!(base.ac, sbar.ac);
    let lit = compound_of(
        LossWeights::default(),
        LossFlags { literal_tight: true, literal_mv: true, ..LossFlags::default() },
    )
    .0;
    assert!((lit.tight - base.tight * 64.0).abs() < 1e-9);
    assert!(lit.mv > 1.0 && base.mv < 1.0);
}

#[test]
fn compound_fd_through_smoothing() {
    // Tie-free logits keep every route of the smoothing fixed under the probe.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let shape = [2, 1, 4, 5, 6];
    let logits = gradsuite::tie_free(&shape, &mut rng).map(|v| (v - 0.12) * 20.0);
    let rec = Tensor::new(shape.to_vec(), (0..240).map(|_| rng.random::<f64>()).collect()).unwrap();
    let img = Tensor::new(shape.to_vec(), (0..240).map(|_| rng.random::<f64>()).collect()).unwrap();
    let report = grad_check_many(
        |g, v| {
            let x = g.constant(img.clone());
            let s_bar = g.sigmoid(v[0]);
            let s = g.curvature_smooth(s_bar, 1)?;
            let out = NetworkOutputs { s_bar, s, i_rec: Some(v[1]) };
            let (terms, _) = compound(g, x, &out, &LossWeights::default(), &LossFlags::default())?;
            Ok(terms.total)
        },
        &[logits, rec],
        gradsuite::FD_EPS,
        120,
        0,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn weights_validation() {
    assert!(LossWeights { lambda2: -1.0, ..LossWeights::default() }.validate().is_err());
    assert!(LossWeights::default().validate().is_ok());
}
