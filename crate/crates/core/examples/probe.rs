//! Scratch probe for calibrating the simulated-world behaviors.

use std::sync::Arc;

use routelab_core::learning::PolicyModel;
use routelab_core::net::{make_trace, DriftParams, Regime};
use routelab_core::sim::*;
use routelab_core::world::{generate_tasks, CorpusConfig, Task};

fn tasks(count: usize, seed: u64) -> Vec<Arc<Task>> {
    generate_tasks(&CorpusConfig {
        count,
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
    .into_iter()
    .map(Arc::new)
    .collect()
}

fn main() {
    let all = tasks(2000, 100);
    let params = SimParams::default();
    let calib_trace = make_trace(
        &[
            (Regime::good(), 4000),
            (Regime::mid(), 4000),
            (Regime::bad(), 4000),
        ],
        &DriftParams::default(),
        100,
    )
    .unwrap();
    let t0 = std::time::Instant::now();
    let setup = setup_world(&all, &calib_trace, &params, &SetupConfig::default(), 100).unwrap();
    println!("setup took {:?}", t0.elapsed());
    println!("tau0 = {:.4}", setup.calibration.tau0);
    println!("per-regime tau0: {:?}", setup.calibration.per_regime_tau0);
    println!("funcdyn: {:?}", setup.calibration.funcdyn);
    println!("score bounds: {:?}", setup.calibration.score_bounds);

    // Score informativeness: mean score of exact-edge vs wrong-edge actions.
    let eval = &setup.eval_tasks;
    println!("eval tasks: {}", eval.len());

    // Distribution of scores on an all-edge run.
    let out = run_experiment(
        &eval[..500.min(eval.len())],
        &calib_trace,
        &setup.policy_sft,
        &setup.rm,
        &RunController::AllEdge,
        &SimParams {
            counterfactual: true,
            ..params
        },
        None,
        None,
        101,
    )
    .unwrap();
    let mut scores: Vec<f64> = out.records.iter().map(|r| r.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| scores[(p * (scores.len() - 1) as f64) as usize];
    println!(
        "score quantiles: 5%={:.3} 25%={:.3} 50%={:.3} 75%={:.3} 95%={:.3}",
        q(0.05),
        q(0.25),
        q(0.5),
        q(0.75),
        q(0.95)
    );
    let cb_rate = out
        .records
        .iter()
        .filter(|r| r.cloud_better.unwrap())
        .count() as f64
        / out.records.len() as f64;
    println!(
        "all-edge: mean_q={:.3} schema_viol={:.3} cloud_better={:.3}",
        out.metrics.mean_q, out.metrics.schema_violation_rate, cb_rate
    );
    // Score vs correctness: quartile quality.
    let mut by_score: Vec<(&f64, f64)> = out
        .records
        .iter()
        .map(|r| (&r.score, r.quality))
        .collect();
    by_score.sort_by(|a, b| a.0.partial_cmp(b.0).unwrap());
    for (name, chunk) in [("q1", 0), ("q2", 1), ("q3", 2), ("q4", 3)] {
        let n = by_score.len() / 4;
        let slice = &by_score[chunk * n..(chunk + 1) * n];
        let mq = slice.iter().map(|x| x.1).sum::<f64>() / n as f64;
        println!("  score {} -> mean quality {:.3}", name, mq);
    }

    // Regime scans: per-regime argmax tau at lambda = 10.
    let grid = routelab_core::theory::linspace(
        setup.calibration.score_bounds.0,
        setup.calibration.score_bounds.1,
        33,
    );
    let t1 = std::time::Instant::now();
    for regime in [Regime::good(), Regime::mid(), Regime::bad()] {
        let trace = make_trace(&[(regime, 30000)], &DriftParams::default(), 102).unwrap();
        let table = threshold_scan(
            &eval[..500.min(eval.len())],
            &trace,
            &setup.policy_sft,
            &setup.rm,
            &params,
            &grid,
            &[8.0, 10.0, 12.0],
            &[7, 8, 9],
        )
        .unwrap();
        println!("regime {:?}: argmax {:?}", regime.name, table.argmax);
    }
    println!("scans took {:?}", t1.elapsed());

    // FuncDyn vs fixed on an interleaved trace.
    let mixed = make_trace(
        &[
            (Regime::good(), 2000),
            (Regime::bad(), 2000),
            (Regime::mid(), 2000),
            (Regime::good(), 2000),
            (Regime::bad(), 2000),
        ],
        &DriftParams::default(),
        103,
    )
    .unwrap();
    let run = |c: &RunController, seed: u64| {
        run_experiment(
            &eval[..500.min(eval.len())],
            &mixed,
            &setup.policy_sft,
            &setup.rm,
            c,
            &params,
            None,
            None,
            seed,
        )
        .unwrap()
        .metrics
    };
    for seed in [201, 202, 203] {
        let fixed = run(
            &RunController::Fixed {
                tau: setup.calibration.tau0,
            },
            seed,
        );
        let dynamic = run(&RunController::FuncDyn(setup.calibration.funcdyn), seed);
        println!(
            "seed {}: fixed J={:.4} offload={:.3} | funcdyn J={:.4} offload={:.3}",
            seed, fixed.mean_j, fixed.offload_rate, dynamic.mean_j, dynamic.offload_rate
        );
    }

    // Learning probe: does reward rise, offload fall, schema stay?
    let t2 = std::time::Instant::now();
    let lc = LearningConfig::default();
    let eval_params = params;
    let controller = RunController::Fixed {
        tau: setup.calibration.tau0,
    };
    let train_trace = make_trace(
        &[
            (Regime::good(), 10000),
            (Regime::mid(), 10000),
            (Regime::bad(), 10000),
        ],
        &DriftParams::default(),
        104,
    )
    .unwrap();
    let before = run_experiment(
        &eval[..300],
        &calib_trace,
        &setup.policy_sft,
        &setup.rm,
        &controller,
        &eval_params,
        None,
        None,
        300,
    )
    .unwrap()
    .metrics;
    let trained = run_experiment(
        &eval[300..1100.min(eval.len())],
        &train_trace,
        &setup.policy_sft,
        &setup.rm,
        &controller,
        &params,
        Some(&lc),
        Some(&setup.policy_sft),
        301,
    )
    .unwrap();
    let after = run_experiment(
        &eval[..300],
        &calib_trace,
        &trained.policy,
        &trained.rm,
        &controller,
        &eval_params,
        None,
        None,
        300,
    )
    .unwrap()
    .metrics;
    println!("learning took {:?}, {} updates", t2.elapsed(), trained.training.len());
    println!(
        "before: score={:.3} offload={:.3} schema={:.3} q={:.3}",
        before.mean_score, before.offload_rate, before.schema_violation_rate, before.mean_q
    );
    println!(
        "after : score={:.3} offload={:.3} schema={:.3} q={:.3}",
        after.mean_score, after.offload_rate, after.schema_violation_rate, after.mean_q
    );
    let d_params = |p: &routelab_core::world::EdgePolicy| {
        p.params().iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    println!(
        "policy param norms: sft={:.3} trained={:.3}",
        d_params(&setup.policy_sft),
        d_params(&trained.policy)
    );
}
