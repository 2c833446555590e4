//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]`/`[FAIL]` line (visible with `cargo test --test acceptance --
//! --nocapture`). Expected values come from the independent oracles in
//! `omh-oracles` or from closed forms, never from the code under test.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use omh::config::ExperimentConfig;
use omh::hierarchy::{
    expansion_schedule, maxpool_weighted, maxpool_weighted_backward, transported_activation,
};
use omh::linalg::{col_onehot_argmax, cosine_sim, DenseMatrix};
use omh::losses::{cluster_loss, distill_loss, match_loss, total_loss, LossValue, LossWeights};
use omh::optim::{train, LabelTarget};
use omh::synthdata::generate;
use omh::transport::{
    plan_entropy, sinkhorn, uniform_marginal, SinkhornSettings, TransportError, TransportPlan,
};
use omh_oracles::{
    append_reports, assignment_bruteforce, entropic_objective, finite_difference_grad,
    max_rel_error, ot_bruteforce_2x2, OracleReport,
};

struct Criterion {
    name: &'static str,
    passed: bool,
}

impl Criterion {
    fn check(name: &'static str, passed: bool) -> Self {
        println!("[{}] {}", if passed { "PASS" } else { "FAIL" }, name);
        Self { name, passed }
    }

    fn assert(self) {
        assert!(self.passed, "criterion failed: {}", self.name);
    }
}

fn report_path(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(file)
}

fn random_cost(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m.set(r, c, rng.gen::<f64>());
        }
    }
    m
}

#[test]
fn criterion_1_ot_matches_bruteforce_on_2x2() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let settings = |temperature: f64| SinkhornSettings {
        temperature,
        max_iterations: 200_000,
        tolerance: 1e-8,
        log_domain: true,
    };
    // Moderate temperatures on unconstrained random costs, plus the sparse
    // regime (0.02) on costs with a clear diagonal gap, where the scaling
    // iteration still converges geometrically.
    let temperatures = [1.0, 0.5, 0.2, 0.1];
    let mut reports = Vec::new();
    let mut ok = true;
    for case in 0..200 {
        let (cost, temperature) = if case % 5 == 4 {
            let mut m = DenseMatrix::zeros(2, 2);
            m.set(0, 0, 0.2 * rng.gen::<f64>());
            m.set(1, 1, 0.2 * rng.gen::<f64>());
            m.set(0, 1, 0.8 + 0.2 * rng.gen::<f64>());
            m.set(1, 0, 0.8 + 0.2 * rng.gen::<f64>());
            (m, 0.02)
        } else {
            (random_cost(2, 2, &mut rng), temperatures[case % 4])
        };
        let plan =
            sinkhorn(&cost, &settings(temperature), &uniform_marginal(2), &uniform_marginal(2))
                .unwrap();
        let cost_arr = [[cost.get(0, 0), cost.get(0, 1)], [cost.get(1, 0), cost.get(1, 1)]];
        let oracle = ot_bruteforce_2x2(&cost_arr, temperature);
        let flat = [cost_arr[0][0], cost_arr[0][1], cost_arr[1][0], cost_arr[1][1]];
        let oracle_flat = [oracle[0][0], oracle[0][1], oracle[1][0], oracle[1][1]];
        let solver_obj = entropic_objective(plan.plan.data(), &flat, temperature);
        let oracle_obj = entropic_objective(&oracle_flat, &flat, temperature);
        reports.push(OracleReport::new(format!("ot2x2_{case}"), solver_obj, oracle_obj));
        if !(solver_obj <= oracle_obj + 1e-6) || plan.marginal_violation > 1e-8 {
            eprintln!(
                "case {case}: objective {solver_obj} vs oracle {oracle_obj}, violation {}",
                plan.marginal_violation
            );
            ok = false;
        }
    }
    let elapsed = start.elapsed();
    append_reports(&report_path("oracle_reports_ot.csv"), &reports).unwrap();
    ok &= elapsed.as_secs_f64() < 5.0;
    Criterion::check(
        "criterion 1: 200 random 2x2 plans beat the grid oracle within 1e-6 at violation <= 1e-8 in < 5 s",
        ok,
    )
    .assert();
}

#[test]
fn criterion_2_entropy_monotone_in_temperature() {
    let temperatures = [0.02, 0.05, 0.10, 0.5, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut violations = 0;
    for _ in 0..20 {
        let cost = random_cost(8, 16, &mut rng);
        let mut last = f64::NEG_INFINITY;
        for &temperature in &temperatures {
            let settings = SinkhornSettings {
                temperature,
                max_iterations: 50_000,
                tolerance: 1e-8,
                log_domain: true,
            };
            let plan =
                sinkhorn(&cost, &settings, &uniform_marginal(8), &uniform_marginal(16)).unwrap();
            let entropy = plan_entropy(&plan);
            if entropy < last - 1e-9 {
                eprintln!("entropy {entropy} < {last} at temperature {temperature}");
                violations += 1;
            }
            last = entropy;
        }
    }
    Criterion::check(
        "criterion 2: plan entropy non-decreasing over temperatures {0.02..1.0} x 20 random 8x16 costs",
        violations == 0,
    )
    .assert();
}

#[test]
fn criterion_3_log_domain_survives_below_the_naive_floor() {
    // Random costs built around a cheap random assignment: expensive enough
    // off-assignment that exp(-c/lambda) underflows to zero in the plain
    // kernel, while the optimal support stays scalable so the log-domain
    // iteration converges.
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut ok = true;
    for case in 0..10 {
        let n = 6;
        let mut cost = DenseMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                cost.set(r, c, 4.0 + 4.0 * rng.gen::<f64>());
            }
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        for (r, &c) in perm.iter().enumerate() {
            cost.set(r, c, 0.3 * rng.gen::<f64>());
        }

        let log = SinkhornSettings {
            temperature: 0.005,
            max_iterations: 200_000,
            tolerance: 1e-8,
            log_domain: true,
        };
        let plain = SinkhornSettings { log_domain: false, ..log.clone() };
        let naive = sinkhorn(&cost, &plain, &uniform_marginal(n), &uniform_marginal(n));
        let underflowed = matches!(naive, Err(TransportError::NumericalUnderflow { .. }));
        let plan = sinkhorn(&cost, &log, &uniform_marginal(n), &uniform_marginal(n)).unwrap();
        if !underflowed || !plan.converged || plan.marginal_violation > 1e-8 {
            eprintln!(
                "case {case}: naive underflow {underflowed}, log violation {}",
                plan.marginal_violation
            );
            ok = false;
        }
    }
    Criterion::check(
        "criterion 3: at temperature 0.005 the plain kernel underflows while the log-domain solver converges to 1e-8",
        ok,
    )
    .assert();
}

/// Samples entries in `[0, 1]` until every per-column argmax gap clears the
/// kink radius.
fn activation_clear_of_ties(
    rows: usize,
    cols: usize,
    rng: &mut ChaCha8Rng,
    margin: f64,
) -> DenseMatrix {
    loop {
        let mut m = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.gen::<f64>());
            }
        }
        let clear = (0..cols).all(|c| {
            let mut col: Vec<f64> = (0..rows).map(|r| m.get(r, c)).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            rows < 2 || col[0] - col[1] > margin
        });
        if clear {
            return m;
        }
    }
}

fn feature_clear_of_clips(
    rows: usize,
    cols: usize,
    partner: Option<&DenseMatrix>,
    rng: &mut ChaCha8Rng,
    margin: f64,
) -> DenseMatrix {
    loop {
        let mut m = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, 2.0 * rng.gen::<f64>() - 1.0);
            }
        }
        if (0..rows).any(|r| m.row_norm(r) < 0.2) {
            continue;
        }
        match partner {
            None => return m,
            Some(other) => {
                let sims = cosine_sim(&m, other).unwrap();
                if sims.data().iter().all(|s| s.abs() > margin) {
                    return m;
                }
            }
        }
    }
}

#[test]
fn criterion_4_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let step = 1e-5;
    let margin = 1e-3;
    let mut worst: f64 = 0.0;

    // Distillation term.
    for _ in 0..50 {
        let enc_x = feature_clear_of_clips(3, 4, None, &mut rng, margin);
        let enc_y = feature_clear_of_clips(3, 4, None, &mut rng, margin);
        let f_y = feature_clear_of_clips(3, 2, None, &mut rng, margin);
        let f_x = feature_clear_of_clips(3, 2, Some(&f_y), &mut rng, margin);
        let b = rng.gen::<f64>() * 0.5;
        let loss = distill_loss(&enc_x, &enc_y, &f_x, &f_y, b).unwrap();
        let fd_x = finite_difference_grad(
            |flat| {
                let m = DenseMatrix::from_vec(3, 2, flat.to_vec()).unwrap();
                distill_loss(&enc_x, &enc_y, &m, &f_y, b).unwrap().value
            },
            f_x.data(),
            step,
        );
        let fd_x: Vec<Option<f64>> = fd_x.into_iter().map(Some).collect();
        worst = worst.max(max_rel_error(loss.grad("f_x").unwrap().data(), &fd_x));
        let fd_y = finite_difference_grad(
            |flat| {
                let m = DenseMatrix::from_vec(3, 2, flat.to_vec()).unwrap();
                distill_loss(&enc_x, &enc_y, &f_x, &m, b).unwrap().value
            },
            f_y.data(),
            step,
        );
        let fd_y: Vec<Option<f64>> = fd_y.into_iter().map(Some).collect();
        worst = worst.max(max_rel_error(loss.grad("f_y").unwrap().data(), &fd_y));
    }

    // Cluster term (kinks are argmax ties, excluded by construction).
    for _ in 0..50 {
        let m = activation_clear_of_ties(3, 4, &mut rng, margin);
        let loss = cluster_loss(&m);
        let fd = finite_difference_grad(
            |flat| cluster_loss(&DenseMatrix::from_vec(3, 4, flat.to_vec()).unwrap()).value,
            m.data(),
            step,
        );
        let fd: Vec<Option<f64>> = fd.into_iter().map(Some).collect();
        worst = worst.max(max_rel_error(loss.grad("m").unwrap().data(), &fd));
    }

    // Matching term composed with the max-pool, differentiated with respect
    // to both the coarse activations and the finer ones behind the pool.
    let mut match_cases = 0;
    while match_cases < 50 {
        let mut weights = DenseMatrix::zeros(2, 3);
        for r in 0..2 {
            for c in 0..3 {
                weights.set(r, c, rng.gen::<f64>());
            }
        }
        let m_hi = activation_clear_of_ties(3, 4, &mut rng, margin);
        let m_lo = activation_clear_of_ties(2, 4, &mut rng, margin);
        let transported = maxpool_weighted(&weights, &m_hi).unwrap();
        // Kink exclusion: pool argmax gaps and L1 differences must clear the
        // margin, else resample the instance.
        let mut clear = true;
        for k in 0..2 {
            for p in 0..4 {
                let mut vals: Vec<f64> =
                    (0..3).map(|l| weights.get(k, l) * m_hi.get(l, p)).collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if vals[0] - vals[1] < margin {
                    clear = false;
                }
                if (transported.get(k, p) - m_lo.get(k, p)).abs() < margin {
                    clear = false;
                }
            }
        }
        if !clear {
            continue;
        }
        match_cases += 1;

        let loss = match_loss(&m_lo, &transported).unwrap();
        let analytic_lo = loss.grad("activation").unwrap();
        let analytic_hi =
            maxpool_weighted_backward(&weights, &m_hi, loss.grad("transported").unwrap()).unwrap();

        let fd_lo = finite_difference_grad(
            |flat| {
                let m = DenseMatrix::from_vec(2, 4, flat.to_vec()).unwrap();
                match_loss(&m, &transported).unwrap().value
            },
            m_lo.data(),
            step,
        );
        let fd_lo: Vec<Option<f64>> = fd_lo.into_iter().map(Some).collect();
        worst = worst.max(max_rel_error(analytic_lo.data(), &fd_lo));

        let fd_hi = finite_difference_grad(
            |flat| {
                let m = DenseMatrix::from_vec(3, 4, flat.to_vec()).unwrap();
                let t = maxpool_weighted(&weights, &m).unwrap();
                match_loss(&m_lo, &t).unwrap().value
            },
            m_hi.data(),
            step,
        );
        let fd_hi: Vec<Option<f64>> = fd_hi.into_iter().map(Some).collect();
        worst = worst.max(max_rel_error(analytic_hi.data(), &fd_hi));
    }

    // Combined loss over independent leaves.
    let weights = LossWeights { sparsity_weight: 0.01, structure_weight: 0.3, distill_b: 0.2 };
    for _ in 0..50 {
        let m_cluster = activation_clear_of_ties(3, 4, &mut rng, margin);
        let m_lo = activation_clear_of_ties(2, 4, &mut rng, margin);
        let mut transported = activation_clear_of_ties(2, 4, &mut rng, margin);
        while (0..8).any(|i| (transported.data()[i] - m_lo.data()[i]).abs() < margin) {
            transported = activation_clear_of_ties(2, 4, &mut rng, margin);
        }
        let total_of = |mc: &DenseMatrix, ml: &DenseMatrix, tr: &DenseMatrix| {
            total_loss(
                LossValue::constant(1.25),
                &[cluster_loss(mc)],
                &[match_loss(ml, tr).unwrap()],
                &weights,
            )
        };
        let total = total_of(&m_cluster, &m_lo, &transported);
        for (key, leaf, rows, cols) in [
            ("m", &m_cluster, 3, 4),
            ("activation", &m_lo, 2, 4),
            ("transported", &transported, 2, 4),
        ] {
            let fd = finite_difference_grad(
                |flat| {
                    let m = DenseMatrix::from_vec(rows, cols, flat.to_vec()).unwrap();
                    match key {
                        "m" => total_of(&m, &m_lo, &transported).value,
                        "activation" => total_of(&m_cluster, &m, &transported).value,
                        _ => total_of(&m_cluster, &m_lo, &m).value,
                    }
                },
                leaf.data(),
                step,
            );
            let fd: Vec<Option<f64>> = fd.into_iter().map(Some).collect();
            worst = worst.max(max_rel_error(total.grad(key).unwrap().data(), &fd));
        }
    }

    let elapsed = start.elapsed();
    let ok = worst < 1e-4 && elapsed.as_secs_f64() < 30.0;
    println!("  worst relative error {worst:.3e} in {elapsed:?}");
    Criterion::check(
        "criterion 4: analytic gradients of all four losses match central differences (rel err < 1e-4, 50 kink-free instances each, < 30 s)",
        ok,
    )
    .assert();
}

#[test]
fn criterion_5_expansion_schedule_exact() {
    let schedule = expansion_schedule(27, 2.0, 3).unwrap();
    Criterion::check(
        "criterion 5: expansion_schedule(27, 2, 3) = [27, 54, 108] exactly",
        schedule == vec![27, 54, 108],
    )
    .assert();
}

#[test]
fn criterion_6_hungarian_agrees_with_bruteforce() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC6);
    let mut ok = true;
    let mut reports = Vec::new();
    for case in 0..500 {
        let k_pred = rng.gen_range(1..=7);
        let k_true = rng.gen_range(1..=7);
        let mut cm = omh::eval::ConfusionMatrix::new(k_pred, k_true);
        for p in 0..k_pred {
            for t in 0..k_true {
                let count = if rng.gen::<f64>() < 0.25 { 0 } else { rng.gen_range(0..50u64) };
                for _ in 0..count {
                    cm.record(p, t).unwrap();
                }
            }
        }
        let assignment = omh::eval::hungarian_match(&cm);
        let total = omh::eval::matched_count(&cm, &assignment);
        let (oracle_assignment, oracle_total, unique) = assignment_bruteforce(&cm.rows());
        if total != oracle_total {
            eprintln!("case {case}: {total} vs oracle {oracle_total}");
            ok = false;
        }
        if unique && assignment != oracle_assignment {
            eprintln!("case {case}: assignments differ on a unique optimum");
            ok = false;
        }
        if case % 50 == 0 {
            reports.push(OracleReport::new(
                format!("hungarian_{case}"),
                total as f64,
                oracle_total as f64,
            ));
        }
    }
    append_reports(&report_path("oracle_reports_assignment.csv"), &reports).unwrap();
    Criterion::check(
        "criterion 6: exact agreement with brute-force assignment on 500 random confusion matrices (K <= 7)",
        ok,
    )
    .assert();
}

#[test]
fn criterion_7_match_loss_zero_on_consistent_stack() {
    // Scaled one-to-two hard assignment: each coarse cluster owns two fine
    // clusters at equal mass.
    let plan = TransportPlan {
        plan: DenseMatrix::from_rows(&[&[0.25, 0.25, 0.0, 0.0], &[0.0, 0.0, 0.25, 0.25]]),
        row_marginal: uniform_marginal(2),
        col_marginal: uniform_marginal(4),
        temperature: 0.02,
        iterations_run: 1,
        marginal_violation: 0.0,
        converged: true,
    };
    let m_hi = DenseMatrix::from_rows(&[
        &[0.9, 0.1, 0.3],
        &[0.2, 0.8, 0.4],
        &[0.1, 0.6, 0.9],
        &[0.5, 0.2, 0.7],
    ]);
    let transported = transported_activation(&plan, &m_hi).unwrap();
    let loss = match_loss(&transported, &transported).unwrap();
    Criterion::check(
        "criterion 7: matching loss is exactly zero when coarse activations equal the transported ones",
        loss.value == 0.0,
    )
    .assert();
}

fn final_coarse_accuracy(config: &ExperimentConfig) -> f64 {
    let data = generate(&config.synthetic_params(), config.data_seed).unwrap();
    let out = train(config, &data).unwrap();
    let last = out.evals.iter().map(|r| r.step).max().unwrap();
    out.evals
        .iter()
        .find(|r| r.step == last && r.level == 0 && r.target == LabelTarget::Coarse)
        .map(|r| r.accuracy)
        .unwrap()
}

#[test]
fn criterion_8_hierarchy_beats_single_level_baseline() {
    let start = Instant::now();
    let mut wins = 0;
    let mut mean_full = 0.0;
    let mut mean_single = 0.0;
    for seed in 0..10u64 {
        let mut full = ExperimentConfig::default();
        full.seed = seed;
        full.data_seed = seed;
        let mut single = full.clone();
        single.depth = 1;
        let acc_full = final_coarse_accuracy(&full);
        let acc_single = final_coarse_accuracy(&single);
        println!("  seed {seed}: hierarchy {acc_full:.4} vs single-level {acc_single:.4}");
        if acc_full >= acc_single {
            wins += 1;
        }
        mean_full += acc_full / 10.0;
        mean_single += acc_single / 10.0;
    }
    let elapsed = start.elapsed();
    println!(
        "  wins {wins}/10, mean hierarchy {mean_full:.4} vs single-level {mean_single:.4} in {elapsed:?}"
    );
    let ok = wins >= 8 && mean_full > mean_single && elapsed.as_secs_f64() < 300.0;
    Criterion::check(
        "criterion 8: 3-level hierarchy matches or beats the single-level baseline on >= 8/10 seeds with strictly higher mean accuracy in < 5 min",
        ok,
    )
    .assert();
}

#[test]
fn criterion_9_trained_plan_is_balanced_one_to_two() {
    let config = ExperimentConfig { seed: 0, data_seed: 0, ..ExperimentConfig::default() };
    let data = generate(&config.synthetic_params(), config.data_seed).unwrap();
    let out = train(&config, &data).unwrap();
    let mut stack = out.state.stack;
    stack.build_plans(&config.sinkhorn_settings()).unwrap();
    let plan = &stack.plans[0].plan;
    let threshold = 0.01 / plan.rows() as f64;
    let mut total_support = 0usize;
    for r in 0..plan.rows() {
        total_support += plan.row(r).iter().filter(|&&v| v > threshold).count();
    }
    let avg = total_support as f64 / plan.rows() as f64;
    println!("  average row support {avg:.3} fine clusters per coarse cluster");
    Criterion::check(
        "criterion 9: trained coarse-fine plan supports 1.5-3 fine clusters per coarse cluster on average",
        (1.5..=3.0).contains(&avg),
    )
    .assert();
}

#[test]
fn criterion_10_training_logs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig {
        steps: 60,
        eval_interval: 30,
        structure_warmup: 20,
        data_images: 2,
        data_per_class: 8,
        ..ExperimentConfig::default()
    };
    config.output_dir = tmp.path().join("a").to_string_lossy().into_owned();
    omh::experiment::run(&config).unwrap();
    let mut again = config.clone();
    again.output_dir = tmp.path().join("b").to_string_lossy().into_owned();
    omh::experiment::run(&again).unwrap();

    let log_a = std::fs::read(tmp.path().join("a/training_log.csv")).unwrap();
    let log_b = std::fs::read(tmp.path().join("b/training_log.csv")).unwrap();
    Criterion::check(
        "criterion 10: identical seeded runs produce byte-identical training logs",
        log_a == log_b,
    )
    .assert();
}

#[test]
fn oracle_equivalence_holds_on_3x3_instances() {
    // Companion to criterion 1: the grid oracle also bounds 3x3 solves.
    let mut rng = ChaCha8Rng::seed_from_u64(0x33);
    for case in 0..10 {
        let cost = random_cost(3, 3, &mut rng);
        let temperature = [0.2, 0.5][case % 2];
        let settings = SinkhornSettings {
            temperature,
            max_iterations: 100_000,
            tolerance: 1e-10,
            log_domain: true,
        };
        let plan =
            sinkhorn(&cost, &settings, &uniform_marginal(3), &uniform_marginal(3)).unwrap();
        let (_, oracle_obj) = omh_oracles::ot_bruteforce_small(
            cost.data(),
            3,
            3,
            temperature,
            &uniform_marginal(3),
            &uniform_marginal(3),
        );
        let solver_obj = entropic_objective(plan.plan.data(), cost.data(), temperature);
        assert!(
            solver_obj <= oracle_obj + 1e-6,
            "case {case}: {solver_obj} vs oracle {oracle_obj}"
        );
        // Sanity in the other direction: the solver cannot beat the polytope
        // minimum by more than the oracle's resolution.
        assert!(solver_obj >= oracle_obj - 1e-4);
    }
}

#[test]
fn cluster_onehot_fixture() {
    // Shared fixture for criterion 4's cluster term: hard assignments are
    // what the finite differences see between kinks.
    let m = DenseMatrix::from_rows(&[&[0.9, 0.1], &[0.05, 0.8]]);
    let hat = col_onehot_argmax(&m);
    assert_eq!(hat, DenseMatrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
}
