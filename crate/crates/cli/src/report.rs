//! Result records written by the commands, and their text rendering.

use serde::{Deserialize, Serialize};

use mvpdmp::pdmp::{StopRule, Trajectory};
use mvpdmp::solver::McEstimate;
use mvpdmp::{HybridState, RngStream};

use crate::config::ExperimentConfig;

/// Tolerance between the closed-form and operator-based population values.
pub const CROSS_CHECK_TOL: f64 = 5e-3;

/// Threshold on the population/tagged gap flagged in the comparison.
pub const GAP_FLAG: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

impl Provenance {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedPath {
    pub index: usize,
    pub stream: RngStream,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub provenance: Provenance,
    pub stop: StopRule,
    pub paths: Vec<SimulatedPath>,
}

/// One value or policy query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRecord {
    pub x: HybridState,
    pub n: usize,
    pub epsilon: f64,
    pub value: f64,
    pub arg_sup: Option<f64>,
    pub sup_j: Option<f64>,
    pub k_value: Option<f64>,
    pub horizon: Option<f64>,
    pub truncation_bound: f64,
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub provenance: Provenance,
    pub record: ValueRecord,
}

/// `V_n − ε − 3·stderr ≤ mean ≤ V_n + 3·stderr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sandwich {
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

impl Sandwich {
    pub fn new(value: f64, epsilon: f64, estimate: &McEstimate) -> Self {
        let lower = value - epsilon - 3.0 * estimate.stderr;
        let upper = value + 3.0 * estimate.stderr;
        Self {
            lower,
            upper,
            holds: lower <= estimate.mean && estimate.mean <= upper,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub provenance: Provenance,
    pub record: ValueRecord,
    pub estimate: McEstimate,
    pub sandwich: Sandwich,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationValue {
    pub value: f64,
    pub arg_sup: f64,
    pub k_value: f64,
    pub horizon: f64,
    pub truncation_bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossCheck {
    pub solver_value: f64,
    pub difference: f64,
    pub tolerance: f64,
    pub agrees: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggedValue {
    pub value: f64,
    pub arg_sup: f64,
    /// Exact value from the indicator analysis, when it applies.
    pub analytic: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub mean: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    pub samples: usize,
    pub arg_sup: f64,
    pub wait_for_jump: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub n: usize,
    pub epsilon: f64,
    pub estimate: McEstimate,
    pub sandwich: Sandwich,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub provenance: Provenance,
    pub v1_population: PopulationValue,
    pub cross_check: CrossCheck,
    pub v1_tagged: TaggedValue,
    pub v1_population_mc: MonteCarloSummary,
    pub policy_eval: PolicySummary,
    pub gap: f64,
    pub gap_exceeds_flag: bool,
}

impl ComparisonReport {
    /// Recomputes `gap` and its flag from the two stored values.
    pub fn refresh_gap(&mut self) {
        self.gap = self.v1_population.value - self.v1_tagged.value;
        self.gap_exceeds_flag = self.gap > GAP_FLAG;
    }
}

/// Left-aligned first column, right-aligned others.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut out = String::new();
        for (k, cell) in cells.iter().enumerate().take(cols) {
            let pad = widths[k] - cell.chars().count();
            if k == 0 {
                out.push_str(cell);
                out.push_str(&" ".repeat(pad));
            } else {
                out.push_str("  ");
                out.push_str(&" ".repeat(pad));
                out.push_str(cell);
            }
        }
        out.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
    }
    out
}

pub fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

pub fn sci(v: f64) -> String {
    format!("{v:.3e}")
}

pub fn flag(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}
