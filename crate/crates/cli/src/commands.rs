//! The four experiment commands. Each returns its artifacts in memory; the
//! binary writes them out.

use serde::Serialize;

use mvpdmp::cell::{
    closed_form_v1, population_v1_monte_carlo, tagged_value_analytic, tagged_value_functions, CellReward,
    TimeAugmentedPopulationModel,
};
use mvpdmp::pdmp::simulate;
use mvpdmp::solver::{evaluate_policy, Reward, StoppingPolicy, ValueIteration};
use mvpdmp::{PdmpModel, RngStream};

use crate::config::{ExperimentConfig, ModelKind, RewardKind};
use crate::error::CliError;
use crate::report::{
    fixed, flag, render_table, sci, ComparisonReport, CrossCheck, MonteCarloSummary, PolicyReport, PolicySummary,
    PopulationValue, Provenance, Sandwich, SimulatedPath, SimulationReport, TaggedValue, ValueRecord, ValueReport,
    CROSS_CHECK_TOL,
};

/// Stream offsets keep the random inputs of different estimators disjoint.
const POLICY_STREAMS: u64 = 0;
const FIRST_JUMP_STREAMS: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Debug)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub table: String,
    pub json: String,
    /// Set when a tolerance check failed; the artifacts are still valid.
    pub failure: Option<CliError>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
    s.push('\n');
    s
}

fn finish(stem: &str, json: String, table: String, mut extra: Vec<Artifact>, failure: Option<CliError>) -> Outcome {
    let mut artifacts = vec![
        Artifact {
            name: format!("{stem}.json"),
            contents: json.clone(),
        },
        Artifact {
            name: format!("{stem}.txt"),
            contents: table.clone(),
        },
    ];
    artifacts.append(&mut extra);
    Outcome {
        artifacts,
        table,
        json,
        failure,
    }
}

pub fn simulate_command(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    let model = config.model();
    let x = config.initial_state()?;
    let num = config.solver.numerics();
    let base = RngStream::new(config.seed, 0);
    let mut paths = Vec::with_capacity(config.paths);
    let mut csv = Vec::with_capacity(config.paths);
    for index in 0..config.paths {
        let stream = base.substream(index as u64);
        let trajectory = simulate(model.as_ref(), &x, config.simulate, stream, &num)?;
        csv.push(Artifact {
            name: format!("trajectory_{index:04}.csv"),
            contents: trajectory.to_csv(),
        });
        paths.push(SimulatedPath {
            index,
            stream,
            trajectory,
        });
    }
    let rows = paths
        .iter()
        .map(|p| {
            let t = &p.trajectory;
            vec![
                p.index.to_string(),
                t.jumps.len().to_string(),
                t.jump_times().last().map_or("-".into(), |&s| fixed(s)),
                t.jumps.last().map_or(&t.initial, |j| &j.z).measure.total_mass().to_string(),
                flag(t.truncated),
            ]
        })
        .collect::<Vec<_>>();
    let table = render_table(&["path", "jumps", "last jump", "final mass", "truncated"], &rows);
    let report = SimulationReport {
        provenance: Provenance::new("simulate", config),
        stop: config.simulate,
        paths,
    };
    Ok(finish("simulate", to_json(&report), table, csv, None))
}

fn value_record(
    solver: &ValueIteration<'_, dyn PdmpModel>,
    config: &ExperimentConfig,
) -> Result<ValueRecord, CliError> {
    let x = config.initial_state()?;
    let n = config.horizon;
    if n == 0 {
        return Ok(ValueRecord {
            value: solver.value(0, &x)?,
            x,
            n,
            epsilon: config.epsilon,
            arg_sup: None,
            sup_j: None,
            k_value: None,
            horizon: None,
            truncation_bound: 0.0,
            mean: None,
            stderr: None,
        });
    }
    let d = solver.diagnostics(n, &x)?;
    Ok(ValueRecord {
        x,
        n,
        epsilon: config.epsilon,
        value: d.value,
        arg_sup: Some(d.arg_sup),
        sup_j: Some(d.sup_j),
        k_value: Some(d.k_value),
        horizon: Some(d.horizon),
        truncation_bound: d.truncation_bound,
        mean: None,
        stderr: None,
    })
}

fn value_rows(r: &ValueRecord) -> Vec<Vec<String>> {
    let opt = |v: Option<f64>| v.map_or("-".into(), fixed);
    vec![
        vec![format!("V_{}(x0)", r.n), fixed(r.value)],
        vec!["arg sup J".into(), opt(r.arg_sup)],
        vec!["sup J".into(), opt(r.sup_j)],
        vec!["K".into(), opt(r.k_value)],
        vec!["t_max".into(), opt(r.horizon)],
        vec!["truncation bound".into(), sci(r.truncation_bound)],
    ]
}

pub fn value_command(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    let model = config.model();
    let reward = config.reward();
    let solver = ValueIteration::new(model.as_ref(), reward.as_ref(), config.solver)?;
    let record = value_record(&solver, config)?;
    let mut extra = Vec::new();
    if config.horizon > 0 {
        extra.push(Artifact {
            name: "compromise_curve.csv".into(),
            contents: solver.curve(config.horizon, &record.x)?.to_csv(),
        });
    }
    let table = render_table(&["quantity", "value"], &value_rows(&record));
    let report = ValueReport {
        provenance: Provenance::new("value", config),
        record,
    };
    Ok(finish("value", to_json(&report), table, extra, None))
}

pub fn policy_eval_command(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    if config.horizon == 0 {
        return Err(CliError::Config("policy evaluation needs horizon n >= 1".into()));
    }
    let model = config.model();
    let reward = config.reward();
    let solver = ValueIteration::new(model.as_ref(), reward.as_ref(), config.solver)?;
    let mut record = value_record(&solver, config)?;
    let policy = StoppingPolicy::new(config.horizon, config.epsilon)?;
    let base = RngStream::new(config.seed, POLICY_STREAMS);
    let estimate = evaluate_policy(&solver, &policy, &record.x, config.mc_samples, base)?;
    record.mean = Some(estimate.mean);
    record.stderr = Some(estimate.stderr);
    let sandwich = Sandwich::new(record.value, config.epsilon, &estimate);

    let mut rows = value_rows(&record);
    rows.push(vec!["policy mean".into(), fixed(estimate.mean)]);
    rows.push(vec!["policy stderr".into(), sci(estimate.stderr)]);
    rows.push(vec!["ci95 low".into(), fixed(estimate.ci95.0)]);
    rows.push(vec!["ci95 high".into(), fixed(estimate.ci95.1)]);
    rows.push(vec!["sandwich low".into(), fixed(sandwich.lower)]);
    rows.push(vec!["sandwich high".into(), fixed(sandwich.upper)]);
    rows.push(vec!["sandwich holds".into(), flag(sandwich.holds)]);
    let table = render_table(&["quantity", "value"], &rows);
    let failure = (!sandwich.holds).then(|| {
        CliError::Tolerance(format!(
            "policy mean {} outside [{}, {}]",
            estimate.mean, sandwich.lower, sandwich.upper
        ))
    });
    let report = PolicyReport {
        provenance: Provenance::new("policy-eval", config),
        record,
        estimate,
        sandwich,
    };
    Ok(finish("policy_eval", to_json(&report), table, Vec::new(), failure))
}

/// Population against tagged cell, from one initial cell.
pub fn compare_command(config: &ExperimentConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    if config.model != ModelKind::PopulationTimeAugmented || config.reward != RewardKind::Cell {
        return Err(CliError::Config(
            "compare runs the population_time_augmented model with the cell reward".into(),
        ));
    }
    if config.initial.len() != 1 || config.clock != 0.0 {
        return Err(CliError::Config("compare starts from a single cell at clock 0".into()));
    }
    if config.horizon == 0 {
        return Err(CliError::Config("compare needs horizon n >= 1".into()));
    }
    let size = config.initial[0];
    let params = config.params;
    let solver_config = config.solver;

    let closed = closed_form_v1(&config.initial, &params, &solver_config)?;
    let reward = CellReward::new(params);
    let model = TimeAugmentedPopulationModel::new(params);
    let x = model.state(&config.initial, 0.0)?;
    let v1_population = PopulationValue {
        value: closed.value,
        arg_sup: closed.arg_sup,
        k_value: closed.k_value,
        horizon: closed.horizon,
        truncation_bound: reward.bound(&x, 1) * closed.tail_probability,
    };

    let solver = ValueIteration::new(&model, &reward, solver_config)?;
    let solver_value = solver.value(1, &x)?;
    let difference = (solver_value - closed.value).abs();
    let cross_check = CrossCheck {
        solver_value,
        difference,
        tolerance: CROSS_CHECK_TOL,
        agrees: difference <= CROSS_CHECK_TOL,
    };

    let tagged = tagged_value_functions(size, &params, &solver_config)?;
    let v1_tagged = TaggedValue {
        value: tagged.v1.value,
        arg_sup: tagged.v1.arg_sup,
        analytic: tagged_value_analytic(size, &params),
    };

    let mc = population_v1_monte_carlo(
        &config.initial,
        &params,
        &solver_config,
        config.mc_samples,
        RngStream::new(config.seed, FIRST_JUMP_STREAMS),
    )?;
    let v1_population_mc = MonteCarloSummary {
        mean: mc.estimate.mean,
        stderr: mc.estimate.stderr,
        ci95: mc.estimate.ci95,
        samples: mc.estimate.samples,
        arg_sup: mc.arg_sup,
        wait_for_jump: mc.wait_for_jump,
    };

    let policy = StoppingPolicy::new(config.horizon, config.epsilon)?;
    let estimate = evaluate_policy(
        &solver,
        &policy,
        &x,
        config.mc_samples,
        RngStream::new(config.seed, POLICY_STREAMS),
    )?;
    let value_n = solver.value(config.horizon, &x)?;
    let policy_eval = PolicySummary {
        n: config.horizon,
        epsilon: config.epsilon,
        estimate,
        sandwich: Sandwich::new(value_n, config.epsilon, &estimate),
    };

    let mut report = ComparisonReport {
        provenance: Provenance::new("compare", config),
        v1_population,
        cross_check,
        v1_tagged,
        v1_population_mc,
        policy_eval,
        gap: 0.0,
        gap_exceeds_flag: false,
    };
    report.refresh_gap();

    let table = comparison_table(&report);
    let failure = if !report.cross_check.agrees {
        Some(CliError::Tolerance(format!(
            "closed-form and operator values differ by {difference:e} (tolerance {CROSS_CHECK_TOL:e})"
        )))
    } else if !report.policy_eval.sandwich.holds {
        Some(CliError::Tolerance(format!(
            "policy mean {} outside [{}, {}]",
            estimate.mean, report.policy_eval.sandwich.lower, report.policy_eval.sandwich.upper
        )))
    } else {
        None
    };
    Ok(finish("compare", to_json(&report), table, Vec::new(), failure))
}

fn comparison_table(r: &ComparisonReport) -> String {
    let p = &r.policy_eval;
    let rows = vec![
        vec![
            "V1 population, closed form".into(),
            fixed(r.v1_population.value),
            "-".into(),
            format!("t = {}", fixed(r.v1_population.arg_sup)),
        ],
        vec![
            "V1 population, operators".into(),
            fixed(r.cross_check.solver_value),
            "-".into(),
            format!("|diff| = {}", sci(r.cross_check.difference)),
        ],
        vec![
            "V1 population, Monte Carlo".into(),
            fixed(r.v1_population_mc.mean),
            sci(r.v1_population_mc.stderr),
            format!("N = {}", r.v1_population_mc.samples),
        ],
        vec![
            "V1 tagged cell, formula".into(),
            fixed(r.v1_tagged.value),
            "-".into(),
            format!("t = {}", fixed(r.v1_tagged.arg_sup)),
        ],
        vec![
            "V1 tagged cell, analytic".into(),
            r.v1_tagged.analytic.map_or("-".into(), fixed),
            "-".into(),
            "-".into(),
        ],
        vec![
            format!("policy S(n={}, eps={})", p.n, p.epsilon),
            fixed(p.estimate.mean),
            sci(p.estimate.stderr),
            format!("bounds [{}, {}]", fixed(p.sandwich.lower), fixed(p.sandwich.upper)),
        ],
        vec![
            "gap population - tagged".into(),
            fixed(r.gap),
            "-".into(),
            format!("> 0.3: {}", flag(r.gap_exceeds_flag)),
        ],
    ];
    render_table(&["quantity", "value", "stderr", "note"], &rows)
}
