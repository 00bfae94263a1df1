//! Cost-matrix and alignment-loss invariants on random inputs.

use otalign::align::{finite_diff_check, layer_ot_loss, ot_loss, ReprBundle};
use otalign::cost::{cost_matrix, init_projection, similarity, Projection};
use otalign::numerics::row_softmax;
use otalign::ot::SinkhornConfig;
use otalign::Matrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cost_rows_complement_a_distribution(
        n in 1usize..=16, m in 1usize..=16, d in 1usize..=16, big_d in 1usize..=16,
        scale in 0.1f64..1.0, seed in any::<u64>(),
    ) {
        // Unit-scale inputs. Far larger score spreads (beyond ~37 nats) let a
        // softmax entry fall below 2^-53, and 1 - p then rounds to exactly 1.
        let x = Matrix::seeded_uniform(n, d, scale, seed);
        let y = Matrix::seeded_uniform(m, big_d, scale, seed ^ 1);
        let p = init_projection(big_d, d, seed ^ 2).unwrap();
        let c = cost_matrix(&x, &y, Some(&p)).unwrap();
        prop_assert_eq!(c.shape(), (n, m));
        for i in 0..n {
            let s: f64 = c.row(i).iter().map(|v| 1.0 - v).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
            prop_assert!(c.row(i).iter().all(|&v| (0.0..1.0).contains(&v)));
        }
    }

    #[test]
    fn cost_ignores_per_row_score_shifts(n in 1usize..=8, m in 1usize..=8, seed in any::<u64>()) {
        let x = Matrix::seeded_uniform(n, 4, 1.0, seed);
        let y = Matrix::seeded_uniform(m, 4, 1.0, seed ^ 7);
        let s = similarity(&x, &y, None).unwrap();
        let shifted = Matrix::from_fn(n, m, |i, j| s[(i, j)] + 3.0 * i as f64 - 1.0);
        let (a, b) = (row_softmax(&s).unwrap(), row_softmax(&shifted).unwrap());
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn ot_loss_is_finite_and_nonnegative_for_any_lengths(n in 1usize..=12, m in 1usize..=12, seed in any::<u64>()) {
        let x = Matrix::seeded_uniform(n, 3, 2.0, seed);
        let y = Matrix::seeded_uniform(m, 5, 2.0, seed ^ 3);
        let p = init_projection(5, 3, seed).unwrap();
        let (loss, plan) = ot_loss(&x, &y, Some(&p), &SinkhornConfig::default()).unwrap();
        prop_assert!(loss.is_finite() && loss >= 0.0);
        prop_assert_eq!(plan.plan.shape(), (n, m));
    }

    #[test]
    fn ot_loss_is_invariant_to_student_row_order(n in 2usize..=8, m in 1usize..=8, seed in any::<u64>(), rot in 1usize..8) {
        let x = Matrix::seeded_uniform(n, 4, 1.5, seed);
        let y = Matrix::seeded_uniform(m, 4, 1.5, seed ^ 5);
        let permuted = Matrix::from_fn(n, 4, |i, j| x[((i + rot) % n, j)]);
        let cfg = SinkhornConfig::default();
        let (a, _) = ot_loss(&x, &y, None, &cfg).unwrap();
        let (b, _) = ot_loss(&permuted, &y, None, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }

    #[test]
    fn layer_loss_is_the_sum_of_its_parts(n in 1usize..=6, m in 1usize..=6, seed in any::<u64>()) {
        let s = ReprBundle::new(Matrix::seeded_uniform(n, 3, 1.0, seed), Matrix::seeded_uniform(n, 2, 1.0, seed ^ 1), "s").unwrap();
        let t = ReprBundle::new(Matrix::seeded_uniform(m, 4, 1.0, seed ^ 2), Matrix::seeded_uniform(m, 2, 1.0, seed ^ 3), "t").unwrap();
        let pe = init_projection(4, 3, seed).unwrap();
        let cfg = SinkhornConfig::default();
        let r = layer_ot_loss(&s, &t, Some(&pe), None, &cfg).unwrap();
        prop_assert_eq!(r.loss, r.emb_loss + r.hid_loss);
        prop_assert_eq!(r.emb_loss, ot_loss(&s.embeddings, &t.embeddings, Some(&pe), &cfg).unwrap().0);
        prop_assert_eq!(r.hid_loss, ot_loss(&s.hiddens, &t.hiddens, None, &cfg).unwrap().0);
        prop_assert!(r.emb_projected && !r.hid_projected);
    }
}

#[test]
fn frozen_plan_gradients_match_finite_differences() {
    let cfg = SinkhornConfig::default();
    for seed in 0..20u64 {
        let n = 2 + (seed % 4) as usize;
        let m = 2 + (seed % 5) as usize;
        let x = Matrix::seeded_uniform(n, 4, 1.0, seed);
        let y = Matrix::seeded_uniform(m, 6, 1.0, seed + 1000);
        let p = init_projection(6, 4, seed).unwrap();
        let r = finite_diff_check(&x, &y, Some(&p), &cfg, 1e-5).unwrap();
        assert!(r.pass, "seed {seed}: {r:?}");
        let r = finite_diff_check(&x, &Matrix::seeded_uniform(m, 4, 1.0, seed + 2000), None, &cfg, 1e-5).unwrap();
        assert!(r.pass, "seed {seed} without projection: {r:?}");
    }
}

#[test]
fn well_separated_self_alignment_puts_the_minimum_on_the_diagonal() {
    for seed in 0..20u64 {
        // Rows are scaled one-hot vectors plus small noise, so each row is far
        // more similar to itself than to any other row.
        let n = 2 + (seed % 5) as usize;
        let noise = Matrix::seeded_uniform(n, n, 0.05, seed);
        let x = Matrix::from_fn(n, n, |i, j| if i == j { 3.0 } else { 0.0 } + noise[(i, j)]);
        let p = Projection::from_matrix(Matrix::identity(n)).unwrap();
        let c = cost_matrix(&x, &x, Some(&p)).unwrap();
        for i in 0..n {
            let min = c.row(i).iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(c[(i, i)], min, "seed {seed}, row {i}");
        }
    }
}

#[test]
fn projection_init_is_centered_and_bounded() {
    let bound = Projection::init_bound(4, 2);
    let mut grand = 0.0;
    for seed in 0..1000u64 {
        let p = init_projection(4, 2, seed).unwrap();
        assert!(p.weights.as_slice().iter().all(|w| w.abs() <= bound));
        grand += p.weights.as_slice().iter().sum::<f64>() / 8.0;
    }
    assert!((grand / 1000.0).abs() <= 0.9 * bound);
    assert_eq!(init_projection(4, 2, 7).unwrap(), init_projection(4, 2, 7).unwrap());
}
