//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test -p semicomp-cli --test acceptance -- 1 6`.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::fs;
use std::path::Path;
use std::process::{Command as Process, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use semicomp_cli::config::RunConfig;
use semicomp_cli::io::{read_rows, CrossTabRow};
use semicomp_cli::pipeline::{node_ladder, Report};
use semicomp_core::glmm::{glmm_excess_ratio, inv_logit, BinaryData, BinaryOutcomeRecord, GlmmSamples};
use semicomp_core::mcmc::{run_chain, McmcConfig, Sampler};
use semicomp_core::metrics::{quantile_sorted, DeathRoute, Hazards, TimeRules};
use semicomp_core::model::{Clock, Dataset, ModelState};
use semicomp_core::profiling::{
    brute_force_minimizer, loss, multi_start_minimizer, plug_in, random_starts,
    sample_classifications, Classification, CandidateSpace, LossSpec, RiskTable, Scheme,
};
use semicomp_core::quadrature::LegendreScheme;
use semicomp_core::simulate::{simulate_dataset, GroupSize, SimConfig};
use statrs::distribution::{ChiSquared, ContinuousCDF, Gamma};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn hazards(p: &oracle::Params) -> Hazards<f64> {
    Hazards {
        alpha: p.alpha,
        scale: p.scale,
        clock: if p.markov { Clock::Markov } else { Clock::SemiMarkov },
    }
}

/// Quadrature rates against dense trapezoid oracles over 200 parameter sets.
fn criterion_1() -> Outcome {
    let rules = TimeRules::new(LegendreScheme::graded(15)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases: Vec<(oracle::Params, f64)> = (0..200)
        .map(|i| {
            let t = rng.random_range(10.0..180.0);
            (oracle::random_params(&mut rng, t, i % 2 == 1), t)
        })
        .collect();
    let start = Instant::now();
    let got: Vec<(f64, f64, f64)> = cases
        .iter()
        .map(|(p, t)| {
            let hz = hazards(p);
            (
                hz.cif_readmission(*t, &rules),
                hz.cdf_death(*t, &rules, DeathRoute::Nested),
                hz.cdf_death(*t, &rules, DeathRoute::Collapsed),
            )
        })
        .collect();
    let elapsed = start.elapsed();
    let want: Vec<(f64, f64)> = cases
        .par_iter()
        .map(|(p, t)| (oracle::cif_readmission(p, *t, 1_000_000), oracle::cdf_death(p, *t, 2000, 1_000_000)))
        .collect();
    let (mut cif, mut cdf) = (0.0f64, 0.0f64);
    for ((a, b, c), (f1, f2)) in got.iter().zip(&want) {
        cif = cif.max((a / f1 - 1.0).abs());
        cdf = cdf.max((b - f2).abs()).max((c - f2).abs());
    }
    check(
        cif < 1e-7 && cdf < 1e-5 && elapsed < Duration::from_secs(120),
        format!("max cif rel err {cif:.2e}, max cdf abs err {cdf:.2e}, quadrature time {elapsed:.2?}"),
    )
}

/// `F1 + F2-before-readmission + S = 1`.
fn criterion_2() -> Outcome {
    let rules = TimeRules::new(LegendreScheme::graded(15)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let p = oracle::random_params(&mut rng, 90.0, i % 2 == 0);
        let hz = hazards(&p);
        for k in 1..=20 {
            let t = 9.0 * k as f64;
            let total = hz.cif_readmission(t, &rules) + hz.cif_death_first(t, &rules) + hz.survival(t);
            worst = worst.max((total - 1.0).abs());
        }
    }
    check(worst < 1e-8, format!("max |sum - 1| {worst:.2e}"))
}

/// Node ladder K = 5 against K = 15 on a synthetic fit.
fn criterion_3() -> Outcome {
    let mut cfg = RunConfig::example();
    let sim = cfg.simulate.as_mut().unwrap();
    sim.hospitals = 30;
    sim.patients_per_hospital = GroupSize::Fixed(30);
    let sim = simulate_dataset(&sim.to_config(cfg.seed)).unwrap();
    cfg.fit.burnin = 2000;
    cfg.fit.thin = 10;
    cfg.fit.n_iter = cfg.fit.burnin + 200 * cfg.fit.thin;
    let start = Instant::now();
    let fit = run_chain(&sim.dataset, &cfg.fit.chain_config(cfg.seed, 0)).unwrap();
    let rows = node_ladder(&sim.dataset, &fit.states, &[90.0], &cfg.metrics, &[5, 15]).unwrap();
    let elapsed = start.elapsed();
    let worst = rows
        .iter()
        .filter(|r| r.statistic.starts_with("mu_S") || r.statistic.starts_with("theta"))
        .map(|r| r.max_rel_diff)
        .fold(0.0f64, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) });
    check(
        worst < 2e-5 && elapsed < Duration::from_secs(600),
        format!("M={}, max rel diff of mu_S and theta {worst:.2e}, time {elapsed:.2?}", fit.states.len()),
    )
}

fn recovery_config(replicate: u64) -> SimConfig {
    SimConfig {
        hospitals: 50,
        patients_per_hospital: GroupSize::Fixed(40),
        sigma_v: [[0.3, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.2]],
        theta: 0.5,
        seed: 4000 + replicate,
        ..SimConfig::default()
    }
}

/// Frailty draws given the rest of the state, mapped through the conjugate
/// Gamma CDF; the values must be uniform.
fn frailty_pit_p(ds: &Dataset<f64>, state: &ModelState<f64>) -> f64 {
    let cfg = McmcConfig {
        n_iter: 2,
        burnin: 1,
        thin: 1,
        seed: 9,
        ..McmcConfig::default()
    };
    let mut sampler = Sampler::new(ds, &cfg).unwrap();
    sampler.set_state(state.clone()).unwrap();
    let conditionals: Vec<Gamma> = ds
        .records()
        .iter()
        .map(|r| {
            let j = r.hospital;
            let c = |g: usize| {
                let tp = &state.trans[g];
                let lp: f64 = r.x[g].iter().zip(&tp.beta).map(|(x, b)| x * b).sum::<f64>() + state.v[j][g];
                tp.kappa * lp.exp()
            };
            let a = |g: usize| state.trans[g].alpha;
            let exit = if r.delta1 { r.y1 } else { r.y2 };
            let mut h = (c(0) * exit.powf(a(0))) + c(1) * exit.powf(a(1));
            if r.delta1 {
                h += c(2) * (r.y2 - r.y1).powf(a(2));
            }
            let events = f64::from(u8::from(r.delta1) + u8::from(r.delta2));
            Gamma::new(1.0 / state.theta + events, 1.0 / state.theta + h).unwrap()
        })
        .collect();
    let bins = 50;
    let mut counts = vec![0usize; bins];
    let sweeps = 200;
    for _ in 0..sweeps {
        sampler.update_gamma().unwrap();
        for (g, d) in sampler.state().gamma.iter().zip(&conditionals) {
            let u = d.cdf(*g);
            counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    let expected = (sweeps * ds.len()) as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(stat)
}

/// Credible-interval coverage of β over replicate datasets and chains, plus
/// the frailty conjugacy check.
fn criterion_4() -> Outcome {
    let replicates = 20u64;
    let start = Instant::now();
    let covered: Vec<[[bool; 2]; 3]> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let cfg = recovery_config(r);
            let sim = simulate_dataset(&cfg).unwrap();
            let mcmc = McmcConfig {
                n_iter: 20_000,
                burnin: 5_000,
                thin: 15,
                seed: 77,
                chain: r,
                ..McmcConfig::default()
            };
            let out = run_chain(&sim.dataset, &mcmc).unwrap();
            std::array::from_fn(|g| {
                std::array::from_fn(|k| {
                    let mut d: Vec<f64> = out.states.iter().map(|s| s.trans[g].beta[k]).collect();
                    d.sort_by(f64::total_cmp);
                    let truth = cfg.transitions[g].beta[k];
                    quantile_sorted(&d, 0.025) <= truth && truth <= quantile_sorted(&d, 0.975)
                })
            })
        })
        .collect();
    let mut counts = [[0usize; 2]; 3];
    for c in &covered {
        for g in 0..3 {
            for k in 0..2 {
                counts[g][k] += usize::from(c[g][k]);
            }
        }
    }
    let min = counts.iter().flatten().min().copied().unwrap();
    let sim = simulate_dataset(&recovery_config(0)).unwrap();
    let p = frailty_pit_p(&sim.dataset, &sim.truth.state());
    check(
        min >= 17 && p > 0.01,
        format!("beta coverage {counts:?} of {replicates}, frailty chi-square p {p:.3}, time {:.0?}", start.elapsed()),
    )
}

/// Sequential minimizer against brute force for J = 8.
fn criterion_5() -> Outcome {
    let (j, m) = (8, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut summary = Vec::new();
    let mut ok = true;
    for variant in ["topk", "quadrant-weighted", "quadrant-unit"] {
        let (mut hits, mut worst) = (0, 0.0f64);
        for inst in 0..100u64 {
            let mut draw = || -> Vec<Vec<f64>> {
                let mu: Vec<f64> = (0..j).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
                (0..m)
                    .map(|_| mu.iter().map(|u| (u + 0.25 * rng.sample::<f64, _>(StandardNormal)).exp()).collect())
                    .collect()
            };
            let (t1, t2) = (draw(), draw());
            let (scheme, spec) = match variant {
                "topk" => (Scheme::Topk { gamma_frac: 0.3 }, LossSpec::unit_topk()),
                "quadrant-unit" => (Scheme::Quadrant, LossSpec::unit_quadrant()),
                _ => {
                    let mut weights = [[0.0; 4]; 4];
                    for (c, row) in weights.iter_mut().enumerate() {
                        for (d, w) in row.iter_mut().enumerate() {
                            if c != d {
                                *w = rng.random_range(0.1..3.0);
                            }
                        }
                    }
                    (Scheme::Quadrant, LossSpec::Quadrant { weights })
                }
            };
            let samples = sample_classifications(scheme, &t1, Some(&t2)).unwrap();
            let table = RiskTable::new(&samples, &spec).unwrap();
            let space = CandidateSpace::full(&table);
            let brute = brute_force_minimizer(&table, &space).unwrap();
            let mut starts = vec![plug_in(scheme, &t1, Some(&t2)).unwrap().labels];
            starts.extend(random_starts(&space, 4, inst));
            let best = multi_start_minimizer(&table, &space, &starts, inst).unwrap();
            let hit = if variant == "quadrant-unit" {
                best.labels == table.posterior_modes()
            } else {
                (best.risk - brute.risk).abs() < 1e-12
            };
            hits += usize::from(hit);
            worst = worst.max(best.risk - brute.risk);
        }
        let need = if variant == "quadrant-unit" { 100 } else { 95 };
        ok &= hits >= need && worst <= 0.02;
        summary.push(format!("{variant} {hits}/100 (worst gap {worst:.1e})"));
    }
    check(ok, summary.join(", "))
}

/// Unit-weight loss is Hamming/J; weighted loss matches a double sum.
fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let (mut hamming_ok, mut worst) = (0, 0.0f64);
    let pairs = 10_000;
    for i in 0..pairs {
        let j = rng.random_range(1..50);
        let (scheme, spec, cats) = if i % 2 == 0 {
            (Scheme::Quadrant, LossSpec::unit_quadrant(), 1..=4u8)
        } else {
            (Scheme::Topk { gamma_frac: 0.3 }, LossSpec::unit_topk(), 0..=1u8)
        };
        let a: Vec<u8> = (0..j).map(|_| rng.random_range(cats.clone())).collect();
        let b: Vec<u8> = (0..j).map(|_| rng.random_range(cats.clone())).collect();
        let hamming = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / j as f64;
        let l = loss(&Classification::new(a, scheme).unwrap(), &Classification::new(b, scheme).unwrap(), &spec).unwrap();
        hamming_ok += usize::from(l == hamming);

        let mut weights = [[0.0; 4]; 4];
        for (c, row) in weights.iter_mut().enumerate() {
            for (d, w) in row.iter_mut().enumerate() {
                if c != d {
                    *w = rng.random_range(0.0..5.0);
                }
            }
        }
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
            &LossSpec::Quadrant { weights },
        )
        .unwrap();
        worst = worst.max((l - direct).abs());
    }
    check(
        hamming_ok == pairs && worst < 1e-12,
        format!("Hamming/J exact on {hamming_ok}/{pairs} pairs, weighted max diff {worst:.1e}"),
    )
}

/// GLMM ratio is exactly one without hospital variation, and its standardized
/// rate matches Monte Carlo.
fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let records: Vec<BinaryOutcomeRecord> = (0..60)
        .map(|i| BinaryOutcomeRecord {
            hospital: i % 4,
            y_star: rng.random_bool(0.3),
            x_star: vec![1.0, rng.sample(StandardNormal), f64::from(u8::from(rng.random_bool(0.5)))],
        })
        .collect();
    let names = vec!["(intercept)".to_string(), "z1".into(), "z2".into()];
    let data = BinaryData::new(records, 4, names).unwrap();
    let flat = GlmmSamples {
        beta: vec![vec![-1.2, 0.4, 0.8], vec![0.3, -0.7, 0.1]],
        v: vec![vec![0.0; 4]; 2],
        sigma2: vec![0.0; 2],
        acceptance: Vec::new(),
    };
    let unit = glmm_excess_ratio(&data, &flat, 15).unwrap().theta.iter().flatten().all(|t| *t == 1.0);

    let mut worst_z = 0.0f64;
    for (xb, sigma2) in [(-1.5, 0.5), (0.2, 1.0), (1.0, 2.0)] {
        let one = BinaryData::new(
            vec![BinaryOutcomeRecord { hospital: 0, y_star: false, x_star: vec![1.0] }],
            1,
            vec!["(intercept)".into()],
        )
        .unwrap();
        let s = GlmmSamples { beta: vec![vec![xb]], v: vec![vec![0.0]], sigma2: vec![sigma2], acceptance: Vec::new() };
        let mu_s = glmm_excess_ratio(&one, &s, 15).unwrap().mu_s[0][0];
        let n = 10_000_000;
        let sd = f64::sqrt(sigma2);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let p = inv_logit(xb + sd * rng.sample::<f64, _>(StandardNormal));
            sum += p;
            sq += p * p;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        worst_z = worst_z.max((mu_s - mean).abs() / se);
    }
    check(
        unit && worst_z < 3.0,
        format!("unit ratio at zero variance: {unit}, worst |mu_s - MC| / SE {worst_z:.2}"),
    )
}

fn binary(args: &[&str]) -> std::process::Output {
    Process::new(env!("CARGO_BIN_EXE_semicomp")).args(args).output().unwrap()
}

fn run_example(dir: &Path, command: &str) -> Result<(), String> {
    let config = dir.join("run.toml");
    fs::write(&config, RunConfig::example().to_toml()).map_err(|e| e.to_string())?;
    let out_dir = dir.join(command);
    let out = binary(&[command, "--config", config.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{command} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// Two profile runs with the same seed give byte-identical artifacts.
fn criterion_8() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_example(d.path(), "profile")?;
    }
    let list = |d: &Path| {
        let mut v: Vec<String> = fs::read_dir(d.join("profile"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let files = list(dirs[0].path());
    if files != list(dirs[1].path()) {
        return Err("artifact lists differ".into());
    }
    let differing: Vec<&String> = files
        .iter()
        .filter(|f| {
            fs::read(dirs[0].path().join("profile").join(f)).unwrap()
                != fs::read(dirs[1].path().join("profile").join(f)).unwrap()
        })
        .collect();
    check(
        differing.is_empty() && files.len() >= 9,
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    )
}

/// The report's cross-tabulations all cover every hospital exactly once.
fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    run_example(dir.path(), "report")?;
    let out = dir.path().join("report");
    let j = RunConfig::example().simulate.unwrap().hospitals;
    let mut tables: Vec<CrossTabRow> = read_rows(fs::File::open(out.join("crosstabs.csv")).unwrap()).unwrap();
    tables.extend(read_rows::<CrossTabRow, _>(fs::File::open(out.join("reclassification.csv")).unwrap()).unwrap());
    let mut names: Vec<&str> = tables.iter().map(|t| t.table.as_str()).collect();
    names.dedup();
    let mut bad = Vec::new();
    for name in &names {
        let cells: Vec<&CrossTabRow> = tables.iter().filter(|t| t.table == *name).collect();
        let mut cats: Vec<u8> = cells.iter().map(|c| c.row).collect();
        cats.sort();
        cats.dedup();
        let rows: usize = cats.iter().map(|r| cells.iter().filter(|c| c.row == *r).map(|c| c.count).sum::<usize>()).sum();
        let cols: usize = cats.iter().map(|k| cells.iter().filter(|c| c.col == *k).map(|c| c.count).sum::<usize>()).sum();
        if rows != j || cols != j || cells.len() != cats.len() * cats.len() {
            bad.push(*name);
        }
    }
    let report: Report = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let moved_ok = report.reclassification.iter().all(|r| r.winners + r.losers + r.unchanged == j);
    let expected = [
        "topk_readmission",
        "topk_death",
        "quadrant",
        "topk_joint",
        "glmm_vs_semicomp_readmission",
        "glmm_vs_semicomp_death",
    ];
    check(
        bad.is_empty() && moved_ok && expected.iter().all(|e| names.contains(e)),
        format!("{} tables with margins summing to J={j}; inconsistent: {bad:?}", names.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "quadrature matches dense oracles", criterion_1),
        (2, "first-event probabilities sum to one", criterion_2),
        (3, "node ladder K=5 vs K=15", criterion_3),
        (4, "posterior recovery and frailty conjugacy", criterion_4),
        (5, "sequential minimizer vs brute force", criterion_5),
        (6, "loss identities", criterion_6),
        (7, "GLMM comparator", criterion_7),
        (8, "end-to-end determinism", criterion_8),
        (9, "reclassification tables", criterion_9),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
