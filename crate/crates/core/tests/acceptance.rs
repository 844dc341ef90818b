//! Acceptance suite. Every criterion runs, prints one PASS/FAIL line on
//! stderr (uncaptured), and the test fails at the end if any criterion did.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use failmass::clustering::{adjusted_rand_index, densest_mode, fit_gmm, GmmOptions};
use failmass::diagnosis::{distill, Diagnosis, RuleDiagnoser};
use failmass::graph::{Node, NodeId, OperatorLibrary, WorkflowGraph};
use failmass::harness::{
    run_dataset, Backend, DatasetInstance, NodeRecord, NodeStatus, PlantedMode, RepairPattern, RepairRule, SimWorldSpec,
    SimulatedBackend, Trace, Trigger,
};
use failmass::mass_oracle::{self, apply_kernel, greedy_kernel_descent, total_mass, EditKernel};
use failmass::optimizer::{
    optimize, populate_pool, Components, Hyperparams, OptimizationState, RunSeeds, Splits, StopReason,
    SuccessRateScorer, ValidationScorer,
};
use failmass::propose::{estimate_utility, RuleProposer};
use failmass::report::emit_report;
use failmass::scenario;
use failmass::seed;
use failmass::signature::{FailureSignature, SignatureSpace};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scenario_splits(n: usize, seed: u64) -> Splits {
    let data = scenario::dataset(n, seed);
    let (train, rest) = data.split_at(n * 8 / 10);
    let (validation, test) = rest.split_at(rest.len() / 2);
    Splits {
        train: train.to_vec(),
        validation: validation.to_vec(),
        test: test.to_vec(),
    }
}

fn run_with(
    backend: &dyn Backend,
    hp: &Hyperparams,
    splits: &Splits,
    scorer: &dyn ValidationScorer,
) -> (WorkflowGraph, OptimizationState) {
    let parts = Components {
        backend,
        diagnoser: &RuleDiagnoser,
        proposer: &RuleProposer,
        library: OperatorLibrary::base(),
        embedder: hp.hashing_embedder().unwrap(),
        scorer,
    };
    optimize(&scenario::pipeline(), splits, hp, &parts).unwrap()
}

fn mass_bound_holds() -> Outcome {
    let started = Instant::now();
    let sweep = mass_oracle::mass_bound_sweep(64, 100, 2024);
    let elapsed = started.elapsed();
    let applicable = sweep.iter().filter(|r| r.check.applicable).count();
    let holds = sweep.iter().filter(|r| r.check.applicable && r.check.holds).count();
    let min_slack = sweep.iter().map(|r| r.check.slack).fold(f64::INFINITY, f64::min);
    check(
        sweep.len() == 100 && applicable == 100 && holds == 100 && min_slack >= -1e-9 && elapsed < Duration::from_secs(1),
        format!("{holds}/100 hold, min slack {min_slack:.3e}, {elapsed:?}"),
    )
}

fn greedy_descent_order() -> Outcome {
    let (rho, kernels) = mass_oracle::planted_modes(64, &[0.30, 0.15, 0.05], 5);
    // Menu order deliberately differs from the expected selection order.
    let mut menu = vec![EditKernel::identity(rho.cells())];
    menu.push(kernels[2].clone());
    menu.push(kernels[0].clone());
    menu.push(kernels[1].clone());
    let d = greedy_kernel_descent(&rho, &menu, 10).map_err(|e| e.to_string())?;
    let steps: Vec<f64> = d.trajectory.windows(2).map(|w| w[0] - w[1]).collect();
    let order_ok = d.chosen == vec![2, 3, 1]
        && steps.len() == 3
        && steps.iter().zip([0.30, 0.15, 0.05]).all(|(s, e)| (s - e).abs() < 1e-12);
    let final_ok = (d.trajectory[0] - d.trajectory[3] - 0.50).abs() < 1e-12 && d.stationary;

    let mut violations = 0;
    for s in 0..1000u64 {
        let rho = mass_oracle::random_density(16, 4, seed::derive_index(7, s));
        let mut rng = seed::rng(s);
        let mut menu = vec![EditKernel::identity(rho.cells())];
        for j in 0..rng.gen_range(1..6) {
            menu.push(mass_oracle::random_kernel(&rho, seed::derive_index(s, j)));
        }
        let d = greedy_kernel_descent(&rho, &menu, 10).map_err(|e| e.to_string())?;
        if d.trajectory.windows(2).any(|w| w[1] > w[0]) {
            violations += 1;
        }
    }
    check(
        order_ok && final_ok && violations == 0,
        format!(
            "steps {:?}, total reduction {:.15}, {violations} nonmonotone of 1000 menus",
            steps,
            d.trajectory[0] - d.trajectory.last().unwrap()
        ),
    )
}

fn dummy_sig(i: usize) -> FailureSignature {
    FailureSignature {
        instance_id: format!("s{i}"),
        node_id: NodeId::new("n"),
        message: "synthetic".into(),
        structural_index: 0,
        structural_weight: 1.0,
        semantic: vec![],
    }
}

/// True when the densest mode is not the weight-0.5 component.
fn mode_selection_error(n: usize, trial: u64) -> bool {
    let mut rng = seed::rng(seed::derive_index(seed::derive(n as u64, "mixture"), trial));
    let noise = Normal::new(0.0, 1.0).unwrap();
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
    let weights = [0.5, 0.3, 0.2];
    let mut data = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let c = if u < weights[0] {
            0
        } else if u < weights[0] + weights[1] {
            1
        } else {
            2
        };
        data.push(vec![
            centers[c][0] + noise.sample(&mut rng),
            centers[c][1] + noise.sample(&mut rng),
        ]);
        truth.push(c);
    }
    let sigs: Vec<_> = (0..n).map(dummy_sig).collect();
    let fit = fit_gmm(&data, &GmmOptions::default(), seed::derive_index(trial, n as u64)).unwrap();
    let sel = densest_mode(&fit.model, &data, &sigs).unwrap();
    let hits = sel.members.iter().filter(|&&i| truth[i] == 0).count();
    hits * 2 <= sel.members.len()
}

fn mode_recovery() -> Outcome {
    let sizes = [50, 100, 200, 400, 800];
    let errors: Vec<usize> = sizes
        .iter()
        .map(|&n| (0..100).filter(|&t| mode_selection_error(n, t)).count())
        .collect();
    let correct_200 = 100 - errors[2];
    let monotone = errors.windows(2).all(|w| w[1] <= w[0]);
    check(
        correct_200 >= 95 && monotone,
        format!("{correct_200}/100 correct at n=200; errors per size {errors:?}"),
    )
}

fn estimator_properties() -> Outcome {
    let world = SimWorldSpec {
        modes: vec![PlantedMode {
            mode_id: "m".into(),
            trigger: Trigger {
                node: Some("b".into()),
                kind: None,
                input_contains: vec![],
            },
            probability: 1.0,
            message: "persistent fault".into(),
        }],
        base_noise_rate: 0.0,
        noise_message: "noise".into(),
        repairs: vec![RepairRule {
            mode_id: "m".into(),
            pattern: RepairPattern::PromptContains {
                node: "b".into(),
                phrase: "fix".into(),
            },
            effectiveness: 0.8,
        }],
        essential_nodes: vec![],
    };
    let backend = SimulatedBackend::new(world).unwrap();
    let graph = WorkflowGraph::chain(vec![
        Node::prompt_step("a", "first"),
        Node::prompt_step("b", "second"),
        Node::aggregate("c"),
    ])
    .unwrap();
    let edit = failmass::graph::Edit::new(
        "RevisePrompt",
        vec![failmass::graph::Arg::node("b"), failmass::graph::Arg::text("second, with the fix")],
    );
    let members: Vec<DatasetInstance> = (0..200).map(|i| DatasetInstance::new(format!("m{i}"), "x", "1")).collect();
    let refs: Vec<&DatasetInstance> = members.iter().collect();
    let lib = OperatorLibrary::base();
    let vs: Vec<f64> = (0..1000u64)
        .map(|r| estimate_utility(&graph, &edit, &lib, &refs, 10, &backend, seed::derive_index(99, r)).v)
        .collect();
    let mean = vs.iter().sum::<f64>() / vs.len() as f64;
    let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vs.len() - 1) as f64;
    let mean_tol = 3.0 * (0.8f64 * 0.2 / 10.0 / 1000.0).sqrt();
    let var_cap = 0.8 * 0.2 / 10.0 + 0.005;
    check(
        (mean - 0.8).abs() < mean_tol && var <= var_cap,
        format!("mean {mean:.4} (tol {mean_tol:.4}), variance {var:.4} (cap {var_cap:.4})"),
    )
}

fn end_to_end() -> Outcome {
    let s = scenario_splits(500, 3);
    let hp = Hyperparams {
        seed: 3,
        ..Hyperparams::default()
    };
    let backend = SimulatedBackend::new(scenario::world(0.02)).unwrap();
    let started = Instant::now();
    let (_, state) = run_with(&backend, &hp, &s, &SuccessRateScorer);
    let elapsed = started.elapsed();
    let initial = state.rounds[0].train_failure_rate;
    let final_failure = 1.0 - state.final_scores.train;
    let smooth = state.e0_trajectory.windows(2).all(|w| w[1] >= w[0] - 0.02);
    check(
        final_failure <= 0.10 && smooth && elapsed < Duration::from_secs(30),
        format!(
            "train failure {initial:.3} -> {final_failure:.3}, E_0 {:?}, {elapsed:?}",
            state.e0_trajectory.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ),
    )
}

fn localization_at_scale() -> Outcome {
    let nodes: Vec<NodeId> = (0..1000).map(|i| NodeId::new(format!("n{i:04}"))).collect();
    let mut rng = seed::rng(61);
    let traces: Vec<(usize, Trace)> = (0..500)
        .map(|j| {
            let at = rng.gen_range(0..nodes.len());
            let records = nodes
                .iter()
                .enumerate()
                .map(|(i, id)| NodeRecord {
                    node_id: id.clone(),
                    input: String::new(),
                    output: String::new(),
                    status: if i == at { NodeStatus::Error } else { NodeStatus::Ok },
                    error_message: if i == at { format!("fault {} at stage {i}", j % 7) } else { String::new() },
                })
                .collect();
            let trace = Trace {
                instance_id: format!("t{j}"),
                records,
                final_output: String::new(),
                success: false,
                seed: j as u64,
                cost_units: 0,
            };
            (at, trace)
        })
        .collect();

    let diagnoses: Vec<Diagnosis> = traces
        .iter()
        .map(|(_, t)| distill(t, &RuleDiagnoser, 0.5).diagnosis().cloned())
        .collect::<Option<_>>()
        .ok_or("undiagnosable trace")?;

    // Batch embedding: grow the registry for the batch, then embed and
    // materialize the dense rows the mixture is fitted on. Each phase is
    // timed as the best of several repetitions of the whole batch, which
    // filters scheduler noise from concurrently running tests.
    let embed_batch = || -> Result<(SignatureSpace, Vec<Vec<f64>>, Duration, Duration), String> {
        let mut space = SignatureSpace::hashing(64, 0, 1.0).unwrap();
        let t0 = Instant::now();
        space.registry.register_batch(diagnoses.iter().map(|d| &d.v_err));
        let register = t0.elapsed();
        // A registry that never grows still pays one lookup per failure;
        // only the excess over that is growth.
        let t2 = Instant::now();
        let found = diagnoses.iter().filter(|d| space.registry.get(&d.v_err).is_some()).count();
        let lookup = t2.elapsed();
        assert_eq!(found, diagnoses.len());
        let resize = register.saturating_sub(lookup);
        let t1 = Instant::now();
        let sigs: Vec<FailureSignature> = traces
            .iter()
            .zip(&diagnoses)
            .map(|((_, t), d)| space.signature(&t.instance_id, d))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let rows = space.matrix(&sigs);
        Ok((space, rows, resize, lookup + t1.elapsed()))
    };
    let (mut resize, mut embed) = (Duration::MAX, Duration::MAX);
    let mut last = None;
    for _ in 0..11 {
        let (space, rows, r, e) = embed_batch()?;
        resize = resize.min(r);
        embed = embed.min(e);
        last = Some((space, rows));
    }
    let share = resize.as_secs_f64() / (resize + embed).as_secs_f64();
    let (space, rows) = last.expect("at least one repetition");

    let width = space.registry.width();
    assert_eq!(rows[0].len(), width + 64);
    let mut correct = 0;
    for ((at, _), row) in traces.iter().zip(&rows) {
        let structural = &row[..width];
        let arg = (0..width).fold(0, |b, i| if structural[i] > structural[b] { i } else { b });
        if space.registry.id(arg) == Some(&nodes[*at]) {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / rows.len() as f64;
    check(
        accuracy >= 0.985 && share <= 0.05,
        format!(
            "localization {accuracy:.3}, registry growth {resize:?} = {:.2}% of embedding time {:?}",
            share * 100.0,
            resize + embed
        ),
    )
}

fn hashing_seed_robustness() -> Outcome {
    let s = scenario_splits(500, 3);
    let backend = SimulatedBackend::new(scenario::world(0.02)).unwrap();
    let seeds = RunSeeds::new(3);
    let (pool, _) = populate_pool(&scenario::pipeline(), &s.train, &backend, &RuleDiagnoser, 0.5, seeds.train)
        .map_err(|e| e.to_string())?;
    let labels_under = |embed_seed: u64| -> Vec<usize> {
        let mut space = SignatureSpace::hashing(64, embed_seed, 1.0).unwrap();
        let sigs: Vec<_> = pool
            .iter()
            .filter_map(|p| p.diagnosis.diagnosis().map(|d| space.signature(&p.instance_id, d).unwrap()))
            .collect();
        let data = space.matrix(&sigs);
        let fit = fit_gmm(&data, &GmmOptions::default(), 17).unwrap();
        densest_mode(&fit.model, &data, &sigs).unwrap().labels
    };
    let a = labels_under(0);
    let b = labels_under(0x5eed);
    let ari = adjusted_rand_index(&a, &b);
    check(ari >= 0.8, format!("ARI {ari:.4} over {} signatures", a.len()))
}

/// Alternates 0.1/0.9 through round 6, then holds at 0.5.
struct PlateauScorer;

impl ValidationScorer for PlateauScorer {
    fn score(&self, round: usize, _: &WorkflowGraph, _: &[DatasetInstance], _: &dyn Backend, _: u64) -> (f64, u64) {
        let g = if round > 6 {
            0.5
        } else if round.is_multiple_of(2) {
            0.9
        } else {
            0.1
        };
        (g, 0)
    }
}

fn convergence_stopping() -> Outcome {
    // Heavy unrepairable noise keeps the pool nonempty every round.
    let backend = SimulatedBackend::new(scenario::world(0.5)).unwrap();
    let s = scenario_splits(100, 8);
    let hp = Hyperparams {
        seed: 8,
        ..Hyperparams::default()
    };
    let (_, on) = run_with(&backend, &hp, &s, &PlateauScorer);
    let off_hp = Hyperparams {
        stopping: false,
        ..hp.clone()
    };
    let (_, off) = run_with(&backend, &off_hp, &s, &PlateauScorer);
    check(
        on.rounds.len() == 11
            && on.stop_reason == StopReason::Converged
            && off.rounds.len() == 20
            && off.stop_reason == StopReason::MaxRounds,
        format!(
            "stopping on: {} rounds ({:?}); off: {} rounds ({:?})",
            on.rounds.len(),
            on.stop_reason,
            off.rounds.len(),
            off.stop_reason
        ),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let s = scenario_splits(300, 21);
    let hp = Hyperparams {
        seed: 21,
        ..Hyperparams::default()
    };
    let backend = SimulatedBackend::new(scenario::world(0.05)).unwrap();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let (_, state) = run_with(&backend, &hp, &s, &SuccessRateScorer);
        let out = dir.path().join(name);
        emit_report(&state, &out).map_err(|e| e.to_string())?;
        trees.push(read_tree(&out));
    }
    let differing: Vec<&str> = trees[0]
        .iter()
        .zip(&trees[1])
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    check(
        trees[0].len() == trees[1].len() && differing.is_empty() && !trees[0].is_empty(),
        format!("{} files compared, {} differ {:?}", trees[0].len(), differing.len(), differing),
    )
}

fn signature_injectivity() -> Outcome {
    let faults = [
        "timeout while calling the tool",
        "incorrect factorization of the quadratic",
        "unit conversion missing",
        "the sum was incorrect",
        "parser rejected malformed json",
        "answer left blank",
        "division by zero encountered",
        "hallucinated citation in summary",
        "wrong variable substituted",
        "retrieval returned no documents",
    ];
    let mut space = SignatureSpace::hashing(64, 0, 1.0).unwrap();
    let mut sigs = Vec::new();
    for n in 0..20 {
        for f in faults {
            let d = Diagnosis {
                v_err: NodeId::new(format!("step{n}")),
                z_err: f.to_string(),
                confidence: 1.0,
            };
            sigs.push(space.signature(&format!("{n}:{f}"), &d).map_err(|e| e.to_string())?);
        }
    }
    let width = space.registry.width();
    let keys: BTreeSet<Vec<u64>> = sigs
        .iter()
        .map(|s| s.to_dense(width).iter().map(|x| x.to_bits()).collect())
        .collect();
    let mut collisions = 0;
    for i in 0..sigs.len() {
        for j in i + 1..sigs.len() {
            if sigs[i].to_dense(width) == sigs[j].to_dense(width) {
                collisions += 1;
            }
        }
    }
    check(
        sigs.len() == 200 && keys.len() == 200 && collisions == 0,
        format!("{} distinct of {} signatures, {collisions} colliding pairs", keys.len(), sigs.len()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("mass bound on random kernels", mass_bound_holds),
        ("greedy descent ordering", greedy_descent_order),
        ("densest mode recovery", mode_recovery),
        ("repair-rate estimator", estimator_properties),
        ("end-to-end planted optimization", end_to_end),
        ("structural localization at scale", localization_at_scale),
        ("hashing-seed robustness", hashing_seed_robustness),
        ("convergence stopping", convergence_stopping),
        ("determinism", determinism),
        ("signature injectivity", signature_injectivity),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed.push(i + 1);
                ("FAIL", d)
            }
        };
        writeln!(
            err,
            "acceptance {:>2} {status} {name}: {detail} [{:.2}s]",
            i + 1,
            started.elapsed().as_secs_f64()
        )
        .unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn kernel_application_is_exact_on_planted_regions() {
    let (rho, kernels) = mass_oracle::planted_modes(32, &[0.30, 0.15, 0.05], 1);
    assert!((total_mass(&rho) - 1.0).abs() < 1e-12);
    for (k, m) in kernels.iter().zip([0.30, 0.15, 0.05]) {
        let after = apply_kernel(&rho, k).unwrap();
        assert!((total_mass(&rho) - total_mass(&after.density) - m).abs() < 1e-12);
        assert_eq!(after.realized.spillover, 0.0);
    }
}

#[test]
fn planted_run_fails_about_half_initially() {
    let s = scenario_splits(500, 3);
    let backend = SimulatedBackend::new(scenario::world(0.0)).unwrap();
    let out = run_dataset(&scenario::pipeline(), &s.train, &backend, 3).unwrap();
    let rate = 1.0 - out.success_rate;
    // Binomial(400, 0.5): three standard deviations is 0.075.
    assert!((rate - 0.5).abs() < 0.075, "{rate}");
}
