mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triprec::autodiff::Graph;
use triprec::data::{surviving_checkins, CheckIn, FilterConfig};
use triprec::fusion::{cross_entropy_sum, top_p_candidates};
use triprec::ode::{trapezoid, INTENSITY_EPS};
use triprec::params::ParamStore;
use triprec::tensor::Tensor;
use triprec::Model;

fn ce(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let logits = g.constant(Tensor::from_rows(rows));
    let loss = cross_entropy_sum(&mut g, logits, targets).unwrap();
    g.item(loss)
}

fn logit_rows() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..5, 2usize..7).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(prop::collection::vec(-5.0f64..5.0, k), n),
            prop::collection::vec(0..k, n),
        )
    })
}

fn sorted_grid() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..2.0, 1..12).prop_map(|gaps| {
        let mut t = vec![0.0];
        for g in gaps {
            t.push(t.last().unwrap() + g);
        }
        t
    })
}

fn raw_checkins() -> impl Strategy<Value = Vec<CheckIn>> {
    prop::collection::vec((0usize..6, 0usize..2, 0usize..10, 0u32..50), 0..80).prop_map(|rows| {
        rows.into_iter()
            .map(|(user, region, poi, hour)| CheckIn {
                user_id: format!("u{user}"),
                time: hour as f64 * 3600.0,
                lat: region as f64,
                lon: poi as f64 * 0.01,
                poi: region * 10 + poi,
                region,
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn cross_entropy_ignores_row_shifts((rows, targets) in logit_rows(), shifts in prop::collection::vec(-50.0f64..50.0, 5)) {
        let shifted: Vec<Vec<f64>> = rows
            .iter()
            .zip(&shifts)
            .map(|(r, s)| r.iter().map(|x| x + s).collect())
            .collect();
        let (a, b) = (ce(&rows, &targets), ce(&shifted, &targets));
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn top_p_keeps_the_smallest_sufficient_prefix(
        logits in prop::collection::vec(-6.0f64..6.0, 1..20),
        p in 0.05f64..=1.0,
        mask_bits in any::<u32>(),
    ) {
        let mut masked: Vec<bool> = (0..logits.len()).map(|i| mask_bits >> (i % 32) & 1 == 1).collect();
        masked[0] = false;
        let kept = top_p_candidates(&logits, p, &masked).unwrap();
        prop_assert!(!kept.is_empty());
        prop_assert!(kept.iter().all(|&(i, _)| !masked[i]));
        let mass: f64 = kept.iter().map(|k| k.1).sum();
        prop_assert!(mass >= p - 1e-12);
        // Without the last kept entry the mass falls short.
        prop_assert!(mass - kept.last().unwrap().1 < p);
        // Kept entries dominate everything left out.
        let floor = kept.last().unwrap().1;
        let max_open = logits.iter().zip(&masked).filter(|(_, &m)| !m).map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().zip(&masked).filter(|(_, &m)| !m).map(|(l, _)| (l - max_open).exp()).sum();
        for (i, l) in logits.iter().enumerate() {
            if !masked[i] && kept.iter().all(|k| k.0 != i) {
                prop_assert!((l - max_open).exp() / z <= floor + 1e-12);
            }
        }
    }

    #[test]
    fn trapezoid_is_exact_on_lines(times in sorted_grid(), a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let (t0, t1) = (times[0], *times.last().unwrap());
        let constant: Vec<f64> = times.iter().map(|_| a).collect();
        prop_assert!((trapezoid(&times, &constant) - a * (t1 - t0)).abs() < 1e-10);
        let line: Vec<f64> = times.iter().map(|t| a + b * t).collect();
        let exact = a * (t1 - t0) + 0.5 * b * (t1 * t1 - t0 * t0);
        prop_assert!((trapezoid(&times, &line) - exact).abs() < 1e-10);
    }

    #[test]
    fn filtering_is_idempotent(checkins in raw_checkins(), min_visits in 1usize..4, min_pair in 1usize..3) {
        let cfg = FilterConfig {
            min_poi_visits: min_visits,
            min_hometown: 2,
            min_outoftown: 2,
            min_pair_frequency: min_pair,
            min_duration_secs: 0.0,
            max_duration_secs: 1e9,
        };
        let once = surviving_checkins(&checkins, &cfg);
        let twice = surviving_checkins(&once, &cfg);
        prop_assert_eq!(once, twice);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn intensity_stays_above_its_floor(rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 8), 1..6), seed in 0u64..4) {
        let ds = common::dataset(20);
        let model = Model::new(&common::small_model(), &ds, seed).unwrap();
        let mut g = Graph::new(&model.params);
        let states = g.constant(Tensor::from_rows(&rows));
        let lam = model.dynamic.intensity(&mut g, states);
        for &v in g.value(lam).data() {
            prop_assert!(v >= INTENSITY_EPS && v.is_finite());
        }
    }

    #[test]
    fn recommendations_respect_the_query(idx in 0usize..1000, sample_seed in any::<u64>(), dedup in any::<bool>(), p in 0.1f64..=1.0) {
        let ds = common::dataset(20);
        let model = Model::new(&common::small_model(), &ds, 3).unwrap();
        let record = &ds.train[idx % ds.train.len()];
        let q = record.query();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let trip = model.recommend(&record.hometown, &q, p, dedup, &mut rng).unwrap();
        prop_assert_eq!(trip.len(), q.stops);
        prop_assert_eq!(trip[0], q.origin);
        prop_assert_eq!(*trip.last().unwrap(), q.destination);
        let region = model.region_pois(q.region).unwrap();
        prop_assert!(trip.iter().all(|x| region.contains(x)));
        if dedup {
            let mut mid = trip[1..trip.len() - 1].to_vec();
            mid.sort_unstable();
            let before = mid.len();
            mid.dedup();
            if before <= region.len().saturating_sub(2) {
                prop_assert_eq!(mid.len(), before);
            }
        }
    }
}
