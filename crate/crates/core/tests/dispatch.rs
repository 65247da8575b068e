use feeder_dispatch::dispatch::{
    ada_run, baseline_run, expected_dispatch, pda_run, pda_select, sliding_average, Algorithm,
    DualState, Problem, SlotChoice, StepSchedule, StopCriteria,
};
use feeder_dispatch::evaluate::{monte_carlo_eval, saa_oracle, EvalOptions};
use feeder_dispatch::feeder::FeederModel;
use feeder_dispatch::scenario::{
    expected_scenario, sample, FixedSource, ScenarioParams, ScenarioSpec,
};
use feeder_dispatch::subproblem::{build_saa, SolverOptions};
use serde_json::json;

/// Three-bus path: load at both buses, diesel at bus 1, PV at the far end.
fn path3() -> FeederModel {
    let doc = json!({
        "name": "path3",
        "base": {"voltage_kv": 12.47},
        "buses": [
            {"index": 0},
            {"index": 1, "p_load": 0.6, "q_load": 0.29},
            {"index": 2, "p_load": 0.5, "q_load": 0.24}
        ],
        "lines": [
            {"from": 0, "to": 1, "r": 0.02, "x": 0.03, "s_max": 5.0},
            {"from": 1, "to": 2, "r": 0.03, "x": 0.04, "s_max": 5.0}
        ],
        "pv_units": [{"bus": 2, "rating_mw": 0.8, "inverter_mva": 0.9, "pf_min": 0.9}],
        "diesel_units": [
            {"bus": 1, "p_min": 0.0, "p_max": 0.3, "cost_linear": 30.0, "cost_quadratic": 15.0}
        ],
        "prices": {"block": 37.0, "buy": 45.0, "sell": 19.0, "pv": [35.0]},
        "voltage_regions": {
            "a_lower": 0.9604, "a_upper": 1.0404,
            "b_lower": 0.9409, "b_upper": 1.0609,
            "substation_lower": 0.9409, "substation_upper": 1.0609
        }
    });
    FeederModel::from_json_str(&doc.to_string()).unwrap()
}

fn setup(params: ScenarioParams) -> (Problem, ScenarioSpec) {
    let model = path3();
    let spec = ScenarioSpec::new(&model, &params, 7).unwrap();
    let p0a = Problem::default_p0a_box(&spec.p_load_mean);
    (Problem::new(model, p0a, SolverOptions::default()).unwrap(), spec)
}

fn noiseless() -> ScenarioParams {
    ScenarioParams {
        load_std_factor: 0.0,
        solar_low_factor: 0.75,
        solar_high_factor: 0.75,
        load_scale: 1.0,
    }
}

fn stop(max_iters: u64) -> StopCriteria {
    StopCriteria {
        max_iters,
        ..Default::default()
    }
}

#[test]
fn duplicated_scenarios_leave_the_sample_average_unchanged() {
    let (problem, spec) = setup(ScenarioParams::default());
    let s = sample(&spec, 3);
    let one = build_saa(&problem.model, &problem.sens, &problem.bounds, std::slice::from_ref(&s))
        .unwrap()
        .solve(&problem.solver)
        .unwrap();
    let two = build_saa(&problem.model, &problem.sens, &problem.bounds, &[s.clone(), s])
        .unwrap()
        .solve(&problem.solver)
        .unwrap();
    // voltages need not be unique at the optimum; the value is
    assert!((one.cost - two.cost).abs() < 1e-6 * one.cost.abs().max(1.0));
}

#[test]
fn centered_solution_keeps_the_optimal_cost() {
    let (problem, spec) = setup(ScenarioParams::default());
    let mean = expected_scenario(&spec);
    let saa = build_saa(&problem.model, &problem.sens, &problem.bounds, std::slice::from_ref(&mean))
        .unwrap();
    let plain = saa.solve(&problem.solver).unwrap();
    let centered = saa.solve_centered(&problem.solver).unwrap();
    assert!((plain.cost - centered.cost).abs() < 1e-5 * plain.cost.abs().max(1.0));
    let z = expected_dispatch(&problem, &mean).unwrap();
    assert!((z.v0a - centered.z.v0a).abs() < 1e-9);
}

#[test]
fn ada_without_noise_approaches_the_single_scenario_optimum() {
    let (problem, spec) = setup(noiseless());
    let mean = expected_scenario(&spec);
    let oracle = saa_oracle(&problem, std::slice::from_ref(&mean)).unwrap();
    let out = ada_run(
        &problem,
        &FixedSource(mean),
        &StepSchedule::ada_default(),
        &StopCriteria::default(),
    )
    .unwrap();
    assert!(out.converged);
    let report = monte_carlo_eval(
        &problem,
        &spec,
        &out.policy(),
        &EvalOptions {
            n_samples: 1,
            seed: 0,
            histogram_buses: vec![],
        },
    )
    .unwrap();
    let rel = (report.expected_cost - oracle.cost).abs() / oracle.cost;
    assert!(rel < 0.01, "ADA {} vs oracle {}", report.expected_cost, oracle.cost);
}

#[test]
fn trace_averages_match_the_batch_formula() {
    let (problem, spec) = setup(ScenarioParams::default());
    let out = ada_run(&problem, &spec, &StepSchedule::ada_default(), &stop(40)).unwrap();
    let mut history = vec![out.trace.initial_z.clone()];
    history.extend(out.trace.records.iter().map(|r| r.z.clone()));
    for r in &out.trace.records {
        let batch = sliding_average(&history, r.k as usize + 1);
        for (a, b) in batch.iter().zip(&r.z_avg) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "k = {}", r.k);
        }
    }
    assert_eq!(out.z.to_vec(), out.trace.records.last().unwrap().z_avg);
}

#[test]
fn zero_iterations_return_the_initial_iterate() {
    let (problem, spec) = setup(ScenarioParams::default());
    for out in [
        ada_run(&problem, &spec, &StepSchedule::ada_default(), &stop(0)).unwrap(),
        pda_run(&problem, &spec, &StepSchedule::pda_default(), &stop(0), 0.05).unwrap(),
    ] {
        assert_eq!(out.iterations, 0);
        assert!(!out.converged);
        assert!(out.trace.records.is_empty());
        assert_eq!(out.z.to_vec(), out.trace.initial_z);
    }
}

#[test]
fn pda_dual_moves_by_the_step_times_indicator_gap() {
    let (problem, spec) = setup(ScenarioParams::default());
    let steps = StepSchedule::pda_default();
    let alpha = 0.05;
    let out = pda_run(&problem, &spec, &steps, &stop(30), alpha).unwrap();
    let mut nu = out.trace.initial_nu[0];
    for r in &out.trace.records {
        let ind = r.indicator.unwrap() as u8 as f64;
        nu = (nu + steps.dual(r.k) * (ind - alpha)).max(0.0);
        assert_eq!(r.nu[0], nu, "k = {}", r.k);
    }
}

#[test]
fn selection_rule_examples() {
    assert_eq!(pda_select(10.0, true, Some(9.0), 0.0), (SlotChoice::Loose, false));
    assert_eq!(pda_select(10.0, false, Some(10.4), 0.5), (SlotChoice::Tight, false));
    assert_eq!(pda_select(10.0, false, Some(10.6), 0.5), (SlotChoice::Loose, true));
    assert_eq!(pda_select(10.0, false, None, 1e9), (SlotChoice::Loose, true));
}

#[test]
fn deterministic_baseline_needs_no_iterations() {
    let (problem, spec) = setup(ScenarioParams::default());
    let out = baseline_run(
        &problem,
        &spec,
        Algorithm::Deterministic,
        &StepSchedule::ada_default(),
        &StopCriteria::default(),
        None,
    )
    .unwrap();
    assert!(out.converged);
    assert_eq!(out.iterations, 0);
    assert_eq!(out.dual, DualState::None);
    let z = expected_dispatch(&problem, &expected_scenario(&spec)).unwrap();
    assert_eq!(out.z, z);
}

#[test]
fn approximate_baselines_keep_the_expected_dispatch() {
    let (problem, spec) = setup(ScenarioParams::default());
    let z = expected_dispatch(&problem, &expected_scenario(&spec)).unwrap();
    for (kind, alpha) in [(Algorithm::ApproxAvg, None), (Algorithm::ApproxProb, Some(0.05))] {
        let out = baseline_run(&problem, &spec, kind, &kind.default_steps(), &stop(50), alpha)
            .unwrap();
        assert_eq!(out.z, z, "{kind}");
        assert!(out.trace.records.iter().all(|r| r.z == z.to_vec()));
    }
}

#[test]
fn approx_prob_without_alpha_is_rejected() {
    let (problem, spec) = setup(ScenarioParams::default());
    let err = baseline_run(
        &problem,
        &spec,
        Algorithm::ApproxProb,
        &StepSchedule::pda_default(),
        &stop(5),
        None,
    )
    .unwrap_err();
    assert!(err.to_string().contains("alpha required"), "{err}");
}

#[test]
fn reruns_are_bit_identical() {
    let (problem, spec) = setup(ScenarioParams::default());
    let run = || pda_run(&problem, &spec, &StepSchedule::pda_default(), &stop(60), 0.05).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.z, b.z);
    let eval = |o: &feeder_dispatch::dispatch::RunOutcome| {
        monte_carlo_eval(
            &problem,
            &spec.with_seed(99),
            &o.policy(),
            &EvalOptions {
                n_samples: 64,
                seed: 99,
                histogram_buses: vec![2],
            },
        )
        .unwrap()
    };
    assert_eq!(eval(&a), eval(&b));
}
