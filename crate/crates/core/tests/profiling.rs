use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use semicomp_core::profiling::*;

/// Posterior-like ratio samples: hospital means spread on the log scale with
/// per-sample noise, so some hospitals are certain and others are not.
fn posterior(j: usize, m: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mu1: Vec<f64> = (0..j).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mu2: Vec<f64> = (0..j).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut draw = |mu: &[f64]| -> Vec<Vec<f64>> {
        (0..m)
            .map(|_| {
                mu.iter()
                    .map(|u| (u + 0.25 * rng.sample::<f64, _>(StandardNormal)).exp())
                    .collect()
            })
            .collect()
    };
    let t1 = draw(&mu1);
    let t2 = draw(&mu2);
    (t1, t2)
}

fn random_weights(rng: &mut ChaCha8Rng) -> LossSpec {
    let mut weights = [[0.0; 4]; 4];
    for (c, row) in weights.iter_mut().enumerate() {
        for (d, w) in row.iter_mut().enumerate() {
            if c != d {
                *w = rng.random_range(0.1..3.0);
            }
        }
    }
    LossSpec::Quadrant { weights }
}

/// Enumerates every label vector of length `j` over `cats` independently of
/// the library's enumerator and returns the minimum direct Bayes risk.
fn enumerate_min(
    j: usize,
    cats: &[u8],
    keep: impl Fn(&[u8]) -> bool,
    risk: impl Fn(&[u8]) -> f64,
) -> (f64, Vec<u8>) {
    let c = cats.len();
    let total = c.pow(j as u32);
    let mut best = (f64::INFINITY, Vec::new());
    for code in 0..total {
        let mut x = code;
        let mut labels = vec![0u8; j];
        for h in (0..j).rev() {
            labels[h] = cats[x % c];
            x /= c;
        }
        if !keep(&labels) {
            continue;
        }
        let r = risk(&labels);
        if r < best.0 - 1e-12 {
            best = (r, labels);
        }
    }
    best
}

#[test]
fn topk_labels_follow_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let theta: Vec<f64> = (0..25).map(|_| rng.random_range(0.5..1.5)).collect();
    let base = classify_topk(&theta, 0.3).unwrap();
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..theta.len()).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f64> = perm.iter().map(|p| theta[*p]).collect();
        let c = classify_topk(&permuted, 0.3).unwrap();
        let mut back = vec![0u8; theta.len()];
        for (i, p) in perm.iter().enumerate() {
            back[*p] = c.labels[i];
        }
        assert_eq!(back, base.labels);
    }
}

#[test]
fn quadrant_agrees_with_sign_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b): (Vec<f64>, Vec<f64>) = (0..10_000)
        .map(|i| {
            if i % 100 == 0 {
                (1.0, rng.random_range(0.0..2.0))
            } else {
                (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0))
            }
        })
        .unzip();
    let c = classify_quadrant(&a, &b).unwrap();
    for i in 0..a.len() {
        let s1 = (a[i] - 1.0).signum() > 0.0 && a[i] != 1.0;
        let s2 = (b[i] - 1.0).signum() > 0.0 && b[i] != 1.0;
        let expected = [[4, 3], [2, 1]][s1 as usize][s2 as usize];
        assert_eq!(c.labels[i], expected);
    }
}

#[test]
fn unit_loss_is_hamming_over_j() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = LossSpec::unit_quadrant();
    for _ in 0..10_000 {
        let j = rng.random_range(1..30);
        let a: Vec<u8> = (0..j).map(|_| rng.random_range(1..=4)).collect();
        let b: Vec<u8> = (0..j).map(|_| rng.random_range(1..=4)).collect();
        let hamming = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        let l = loss(
            &Classification::new(a, Scheme::Quadrant).unwrap(),
            &Classification::new(b, Scheme::Quadrant).unwrap(),
            &spec,
        )
        .unwrap();
        assert_eq!(l, hamming as f64 / j as f64);
    }
}

#[test]
fn weighted_loss_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1_000 {
        let spec = random_weights(&mut rng);
        let LossSpec::Quadrant { weights } = &spec else {
            unreachable!()
        };
        let j = rng.random_range(1..40);
        let star: Vec<u8> = (0..j).map(|_| rng.random_range(1..=4)).collect();
        let truth: Vec<u8> = (0..j).map(|_| rng.random_range(1..=4)).collect();
        let mut direct = 0.0;
        for h in 0..j {
            for c in 1..=4u8 {
                for d in 1..=4u8 {
                    if truth[h] == c && star[h] == d {
                        direct += weights[c as usize - 1][d as usize - 1];
                    }
                }
            }
        }
        direct /= j as f64;
        let l = loss(
            &Classification::new(star, Scheme::Quadrant).unwrap(),
            &Classification::new(truth, Scheme::Quadrant).unwrap(),
            &spec,
        )
        .unwrap();
        assert!((l - direct).abs() < 1e-12);
    }
}

#[test]
fn table_risk_matches_sample_by_sample_risk() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (t1, t2) = posterior(12, 60, &mut rng);
        let spec = random_weights(&mut rng);
        let samples = sample_classifications(Scheme::Quadrant, &t1, Some(&t2)).unwrap();
        let table = RiskTable::new(&samples, &spec).unwrap();
        let star: Vec<u8> = (0..12).map(|_| rng.random_range(1..=4)).collect();
        let batch = bayes_risk_hat(
            &Classification::new(star.clone(), Scheme::Quadrant).unwrap(),
            &samples,
            &spec,
        )
        .unwrap();
        assert!((table.risk(&star) - batch).abs() < 1e-12);

        let topk = sample_classifications(Scheme::Topk { gamma_frac: 0.3 }, &t1, None).unwrap();
        let table = RiskTable::new(&topk, &LossSpec::unit_topk()).unwrap();
        let star = topk[0].clone();
        let batch = bayes_risk_hat(&star, &topk, &LossSpec::unit_topk()).unwrap();
        assert!((table.risk(&star.labels) - batch).abs() < 1e-12);
    }
}

#[test]
fn single_sample_is_its_own_minimizer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (t1, t2) = posterior(7, 1, &mut rng);
    let samples = sample_classifications(Scheme::Quadrant, &t1, Some(&t2)).unwrap();
    let table = RiskTable::new(&samples, &LossSpec::unit_quadrant()).unwrap();
    let space = CandidateSpace::full(&table);
    let best = brute_force_minimizer(&table, &space).unwrap();
    assert_eq!(best.labels, samples[0].labels);
    assert_eq!(best.risk, 0.0);
    let seq = sequential_minimizer(&table, &space, &[4; 7], 1, 0).unwrap();
    assert_eq!(seq.labels, samples[0].labels);
    assert_eq!(bayes_risk_hat(&samples[0], &samples, &LossSpec::unit_quadrant()).unwrap(), 0.0);
}

#[test]
fn topk_brute_force_matches_independent_enumerator() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gamma_frac = 3.0 / 7.0; // J = 6: threshold 3, so k = 2
    for _ in 0..20 {
        let (t1, _) = posterior(6, 50, &mut rng);
        let samples = sample_classifications(Scheme::Topk { gamma_frac }, &t1, None).unwrap();
        assert!(samples.iter().all(|s| s.labels.iter().filter(|l| **l == 1).count() == 2));
        let spec = LossSpec::unit_topk();
        let table = RiskTable::new(&samples, &spec).unwrap();
        let best = brute_force_minimizer(&table, &CandidateSpace::full(&table)).unwrap();
        assert_eq!(best.evaluated, 15);
        let (risk, labels) = enumerate_min(
            6,
            &[0, 1],
            |l| l.iter().filter(|x| **x == 1).count() == 2,
            |l| {
                let star = Classification::new(l.to_vec(), Scheme::Topk { gamma_frac }).unwrap();
                bayes_risk_hat(&star, &samples, &spec).unwrap()
            },
        );
        assert!((best.risk - risk).abs() < 1e-12);
        assert_eq!(best.labels, labels);
    }
}

#[test]
fn quadrant_unit_minimizers_recover_posterior_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (t1, t2) = posterior(7, 40, &mut rng);
        let samples = sample_classifications(Scheme::Quadrant, &t1, Some(&t2)).unwrap();
        let table = RiskTable::new(&samples, &LossSpec::unit_quadrant()).unwrap();
        let space = CandidateSpace::full(&table);
        let modes = table.posterior_modes();
        let brute = brute_force_minimizer(&table, &space).unwrap();
        assert!((brute.risk - table.risk(&modes)).abs() < 1e-15);
        let seq = sequential_minimizer(&table, &space, &[1; 7], 3, 0).unwrap();
        assert!((seq.risk - table.risk(&modes)).abs() < 1e-15);
    }
}

#[test]
fn reduction_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t1, t2) = posterior(5, 30, &mut rng);
    let samples = sample_classifications(Scheme::Quadrant, &t1, Some(&t2)).unwrap();
    let table = RiskTable::new(&samples, &LossSpec::unit_quadrant()).unwrap();
    // no hospital can exceed 1 − ε when every sample is different enough
    let mixed: Vec<Classification> = (0..40)
        .map(|m| Classification::new(vec![1 + (m % 4) as u8; 5], Scheme::Quadrant).unwrap())
        .collect();
    let mixed_table = RiskTable::new(&mixed, &LossSpec::unit_quadrant()).unwrap();
    let space = reduce_candidates(&mixed_table, 0.01).unwrap();
    assert_eq!(space, CandidateSpace::full(&mixed_table));
    assert_eq!(space.size(), 4u128.pow(5));

    let same = vec![samples[0].clone(); 10];
    let same_table = RiskTable::new(&same, &LossSpec::unit_quadrant()).unwrap();
    let space = reduce_candidates(&same_table, 0.01).unwrap();
    assert_eq!(space.size(), 1);
    assert!(space.contains(&samples[0].labels));
    assert!(reduce_candidates(&table, 0.5).is_err());
}

#[test]
fn reduced_search_matches_full_search_when_freezes_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut compared = 0;
    for i in 0..100 {
        let (t1, t2) = posterior(6, 100, &mut rng);
        let (samples, spec) = if i % 2 == 0 {
            let s = sample_classifications(Scheme::Quadrant, &t1, Some(&t2)).unwrap();
            (s, random_weights(&mut rng))
        } else {
            let s = sample_classifications(Scheme::Topk { gamma_frac: 3.0 / 7.0 }, &t1, None).unwrap();
            (s, LossSpec::unit_topk())
        };
        let table = RiskTable::new(&samples, &spec).unwrap();
        let full = brute_force_minimizer(&table, &CandidateSpace::full(&table)).unwrap();
        let space = reduce_candidates(&table, 0.01).unwrap();
        if space.contains(&full.labels) {
            compared += 1;
            let reduced = brute_force_minimizer(&table, &space).unwrap();
            assert_eq!(reduced.labels, full.labels);
            assert!(reduced.evaluated <= full.evaluated);
        }
    }
    assert!(compared > 50, "{compared}");
}

#[test]
fn sequential_from_optimum_stops_after_one_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for scheme in [Scheme::Quadrant, Scheme::Topk { gamma_frac: 0.3 }] {
        let (t1, t2) = posterior(8, 80, &mut rng);
        let samples = sample_classifications(scheme, &t1, Some(&t2)).unwrap();
        let spec = match scheme {
            Scheme::Quadrant => random_weights(&mut rng),
            Scheme::Topk { .. } => LossSpec::unit_topk(),
        };
        let table = RiskTable::new(&samples, &spec).unwrap();
        let space = CandidateSpace::full(&table);
        let best = brute_force_minimizer(&table, &space).unwrap();
        let seq = sequential_minimizer(&table, &space, &best.labels, 5, 0).unwrap();
        assert_eq!(seq.sweeps, 1);
        assert_eq!(seq.labels, best.labels);
    }
}

#[test]
fn sequential_is_deterministic_and_never_worse_than_plug_in() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for scheme in [Scheme::Quadrant, Scheme::Topk { gamma_frac: 0.2 }] {
        let (t1, t2) = posterior(40, 100, &mut rng);
        let spec = match scheme {
            Scheme::Quadrant => LossSpec::unit_quadrant(),
            Scheme::Topk { .. } => LossSpec::unit_topk(),
        };
        let config = ProfileConfig {
            scheme,
            loss: spec,
            epsilon: Some(0.01),
            random_starts: 4,
            exhaustive_when_small: false,
        };
        let a = profile(&config, &t1, Some(&t2), 77).unwrap();
        let b = profile(&config, &t1, Some(&t2), 77).unwrap();
        assert_eq!(a, b);
        assert!(a.risk <= a.plug_in_risk);
        let tab = cross_tab(&a.plug_in.labels, &a.loss_based, scheme.categories());
        assert_eq!(tab.iter().flatten().sum::<usize>(), 40);
    }
}

#[test]
fn topk_start_with_wrong_size_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (t1, _) = posterior(6, 10, &mut rng);
    let samples = sample_classifications(Scheme::Topk { gamma_frac: 3.0 / 7.0 }, &t1, None).unwrap();
    let table = RiskTable::new(&samples, &LossSpec::unit_topk()).unwrap();
    let err = sequential_minimizer(&table, &CandidateSpace::full(&table), &[1, 1, 1, 0, 0, 0], 1, 0);
    assert_eq!(
        err.unwrap_err(),
        ProfilingError::WrongCount {
            expected: 2,
            got: 3
        }
    );
}

proptest! {
    #[test]
    fn topk_depends_on_ranks_only(
        theta in prop::collection::vec(0.01f64..10.0, 1..40),
        gamma in 0.05f64..0.95,
    ) {
        let a = classify_topk(&theta, gamma).unwrap();
        let mapped: Vec<f64> = theta.iter().map(|t| 3.0 * t.ln() + 1.0).collect();
        let b = classify_topk(&mapped, gamma).unwrap();
        prop_assert_eq!(&a.labels, &b.labels);
        prop_assert_eq!(a.labels.iter().filter(|l| **l == 1).count(), topk_count(theta.len(), gamma));
    }

    #[test]
    fn cross_tab_margins_sum_to_j(
        pairs in prop::collection::vec((1u8..=4, 1u8..=4), 0..60),
    ) {
        let (a, b): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let t = cross_tab(&a, &b, &[1, 2, 3, 4]);
        let rows: usize = t.iter().map(|r| r.iter().sum::<usize>()).sum();
        prop_assert_eq!(rows, a.len());
        for (c, row) in t.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), a.iter().filter(|x| **x as usize == c + 1).count());
        }
    }

    #[test]
    fn sequential_risk_never_increases(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (t1, t2) = posterior(9, 30, &mut rng);
        let samples = sample_classifications(Scheme::Quadrant, &t1, Some(&t2)).unwrap();
        let table = RiskTable::new(&samples, &random_weights(&mut rng)).unwrap();
        let start: Vec<u8> = (0..9).map(|_| rng.random_range(1..=4)).collect();
        let out = sequential_minimizer(&table, &CandidateSpace::full(&table), &start, seed, 0).unwrap();
        prop_assert!(out.risk <= table.risk(&start));
    }
}
