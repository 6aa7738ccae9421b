use cotap_lab::align::{sample_knn_positive, CropSpec, KnnTable};
use cotap_lab::cotap::{
    cotap_bound_exact, cotap_loss, gamma_tilde_from_gamma, huber_surrogate, psi_weights, CoTapConfig, ScorePair,
};
use cotap_lab::numeric::{
    correspondence_map, read_tensor_from, softmax, write_tensor_to, FeatureGrid, Matrix, RngState,
};
use cotap_lab::sinkhorn::{sinkhorn_normalize, SinkhornConfig};
use proptest::prelude::*;

fn unit_scores(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_len).prop_flat_map(|n| {
        let grid = prop_oneof![(0u8..=8).prop_map(|k| k as f64 / 8.0), 0.0..=1.0f64];
        (prop::collection::vec(grid.clone(), n), prop::collection::vec(grid, n))
    })
}

fn crop() -> impl Strategy<Value = CropSpec> {
    (0.0..0.9f64, 0.0..0.9f64, 0.05..1.0f64, 0.05..1.0f64)
        .prop_map(|(x0, y0, w, h)| CropSpec::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant(
        v in prop::collection::vec(-30.0..30.0f64, 1..40),
        shift in -50.0..50.0f64,
        t in 0.05..5.0f64,
    ) {
        let p = softmax(&v, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = softmax(&shifted, t).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn sinkhorn_rows_are_distributions_and_rows_permute(
        b in 1usize..12,
        d in 1usize..12,
        seed in any::<u64>(),
        temperature in 0.2..2.0f64,
    ) {
        let mut rng = RngState::new(seed);
        let logits = Matrix::new(b, d, rng.normal_vec(b * d, 1.0)).unwrap();
        let cfg = SinkhornConfig { temperature, ..SinkhornConfig::default() };
        let q = sinkhorn_normalize(&logits, &cfg).unwrap();
        for r in 0..b {
            prop_assert!((q.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(q.row(r).iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        // reversing the rows reverses the assignment
        let rev = Matrix::from_fn(b, d, |r, c| logits.get(b - 1 - r, c));
        let qr = sinkhorn_normalize(&rev, &cfg).unwrap();
        for r in 0..b {
            for c in 0..d {
                prop_assert!((qr.get(r, c) - q.get(b - 1 - r, c)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn correspondences_lie_in_unit_interval(
        h in 1usize..4,
        w in 1usize..4,
        dim in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = RngState::new(seed);
        let a = FeatureGrid::new(h, w, dim, rng.normal_vec(h * w * dim, 1.0)).unwrap().normalized().unwrap();
        let s = correspondence_map(&a, &a).unwrap();
        let m = s.matrix();
        for i in 0..m.rows() {
            prop_assert!((m.get(i, i) - 1.0).abs() <= 1e-12);
            for j in 0..m.cols() {
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&m.get(i, j)));
                prop_assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn surrogate_dominates_the_step(d in -2.0..2.0f64, tau2 in 0.05..2.0f64, e in 0.0..1.0f64) {
        let step = if d <= 0.0 { 1.0 } else { 0.0 };
        prop_assert!(huber_surrogate(d, tau2) >= step);
        prop_assert!(huber_surrogate(d + e, tau2) <= huber_surrogate(d, tau2));
    }

    #[test]
    fn surrogate_loss_upper_bounds_indicator_form((p, q) in unit_scores(24), tau1 in -0.5..0.5f64) {
        let sp = ScorePair::new(p, q).unwrap();
        let cfg = CoTapConfig { tau1, ..CoTapConfig::default() };
        let gt: Vec<f64> = sp.target().iter().map(|&x| (x - tau1).max(0.0)).collect();
        let bound = cotap_bound_exact(&sp, &gt).unwrap();
        let smooth = cotap_loss(&sp, &cfg, None).unwrap();
        prop_assert!(bound >= 0.0);
        prop_assert!(smooth + 1e-12 >= bound, "{} < {}", smooth, bound);
    }

    #[test]
    fn weights_are_nonnegative_and_psi_bounded((p, q) in unit_scores(24)) {
        let sp = ScorePair::new(p, q).unwrap();
        let gt = gamma_tilde_from_gamma(sp.target(), |x| (x + 0.2).max(0.0));
        prop_assert!(gt.iter().all(|&g| g >= 0.0));
        let psi = psi_weights(&sp);
        prop_assert!(psi.iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn out_of_range_scores_are_rejected(bad in prop_oneof![-1.0..-1e-9f64, 1.0 + 1e-9..2.0f64]) {
        prop_assert!(ScorePair::new(vec![0.5, bad], vec![0.5, 0.5]).is_err());
        prop_assert!(ScorePair::new(vec![0.5, 0.5], vec![bad, 0.5]).is_err());
    }

    #[test]
    fn crop_intersection_is_symmetric_and_contained(a in crop(), b in crop()) {
        let ab = a.intersect(&b);
        let ba = b.intersect(&a);
        prop_assert_eq!(&ab, &ba);
        if let Some(c) = ab {
            prop_assert!(c.x0 >= a.x0.max(b.x0) && c.x1 <= a.x1.min(b.x1));
            prop_assert!(c.area() <= a.area().min(b.area()) + 1e-15);
        }
    }

    #[test]
    fn knn_table_has_no_self_loops(n in 2usize..20, dim in 1usize..5, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let k = 1 + rng.below(n - 1);
        let emb = Matrix::new(n, dim, rng.normal_vec(n * dim, 1.0)).unwrap();
        let t = KnnTable::build(&emb, k).unwrap();
        prop_assert!(t.validate().is_ok());
        for i in 0..n {
            prop_assert_eq!(t.neighbors[i].len(), k);
            prop_assert!(!t.neighbors[i].contains(&i));
            let j = sample_knn_positive(i, &t, &mut rng).unwrap();
            prop_assert!(t.neighbors[i].contains(&j));
        }
    }

    #[test]
    fn tensor_dump_round_trips(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let mut data = rng.normal_vec(rows * cols, 1e3);
        if let Some(x) = data.first_mut() {
            *x = f64::MIN_POSITIVE;
        }
        let m = Matrix::new(rows, cols, data).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &m).unwrap();
        let back = read_tensor_from(&buf[..]).unwrap();
        prop_assert_eq!(back, m);
    }
}
