//! JSON report written by `verify` and `bounds`.

use diffcert::deltabounds::{CaseHistogram, DiffPass};
use diffcert::symexpr::{ConcreteInterval, Direction};
use diffcert::symvars::VarOrigin;
use diffcert::verifier::{Status, UnresolvedRegion, VerificationOutcome};
use diffcert::Mode;
use serde::Serialize;

pub const SCHEMA: &str = "diffcert-report/1";

#[derive(Debug, Serialize)]
pub struct Tool {
    pub name: &'static str,
    pub version: &'static str,
}

impl Tool {
    pub fn current() -> Self {
        Self {
            name: "diffcert",
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct OutputBounds {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symbolic_lower: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub symbolic_upper: Option<String>,
}

impl OutputBounds {
    fn concrete(index: usize, iv: &ConcreteInterval) -> Self {
        Self {
            index,
            lower: iv.lo,
            upper: iv.hi,
            symbolic_lower: None,
            symbolic_upper: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct Variable {
    pub name: String,
    pub origin: VarOrigin,
    pub lower: String,
    pub upper: String,
}

#[derive(Debug, Serialize)]
pub struct Subregions {
    pub explored: usize,
    pub analysed: usize,
    pub max_depth_reached: usize,
    pub timed_out: bool,
    pub unresolved: Vec<UnresolvedRegion>,
}

#[derive(Debug, Serialize)]
pub struct Settings {
    pub threads: usize,
    pub timeout_s: f64,
    pub max_depth: usize,
    pub split: String,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub tool: Tool,
    pub command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub status: Option<Status>,
    pub mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub minimal_epsilon: Option<f64>,
    pub outputs: Vec<OutputBounds>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub variables: Vec<Variable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subregions: Option<Subregions>,
    pub symvars_introduced: usize,
    pub case_histogram: CaseHistogram,
    pub wall_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub settings: Option<Settings>,
}

/// Smallest epsilon a single pass with these bounds verifies.
pub fn minimal_epsilon(pass: &DiffPass) -> f64 {
    pass.max_magnitude().next_up()
}

pub fn bounds_report(pass: &DiffPass, mode: Mode, wall_seconds: f64) -> Report {
    let outputs = pass
        .output
        .iter()
        .enumerate()
        .map(|(j, iv)| {
            let sym = pass.output_interval(j);
            OutputBounds {
                symbolic_lower: Some(sym.lb.to_string()),
                symbolic_upper: Some(sym.ub.to_string()),
                ..OutputBounds::concrete(j, iv)
            }
        })
        .collect();
    let inputs = pass.table.inputs();
    let variables = pass
        .table
        .defs()
        .iter()
        .enumerate()
        .map(|(k, def)| {
            let id = inputs + k;
            Variable {
                name: format!("x{}", id + 1),
                origin: def.origin,
                lower: pass.table.def_expr(id, Direction::Lower).map(|e| e.to_string()).unwrap_or_default(),
                upper: pass.table.def_expr(id, Direction::Upper).map(|e| e.to_string()).unwrap_or_default(),
            }
        })
        .collect();
    Report {
        schema: SCHEMA,
        tool: Tool::current(),
        command: "bounds",
        status: None,
        mode,
        epsilon: None,
        minimal_epsilon: Some(minimal_epsilon(pass)),
        outputs,
        variables,
        subregions: None,
        symvars_introduced: pass.stats.symvars_introduced,
        case_histogram: pass.stats.histogram.clone(),
        wall_seconds,
        settings: None,
    }
}

pub fn verify_report(out: &VerificationOutcome, mode: Mode, epsilon: f64, settings: Settings) -> Report {
    Report {
        schema: SCHEMA,
        tool: Tool::current(),
        command: "verify",
        status: Some(out.status),
        mode,
        epsilon: Some(epsilon),
        minimal_epsilon: None,
        outputs: out.output.iter().enumerate().map(|(j, iv)| OutputBounds::concrete(j, iv)).collect(),
        variables: Vec::new(),
        subregions: Some(Subregions {
            explored: out.subregions_explored,
            analysed: out.regions_analysed,
            max_depth_reached: out.max_depth_reached,
            timed_out: out.timed_out,
            unresolved: out.unresolved.clone(),
        }),
        symvars_introduced: out.symvars_introduced,
        case_histogram: out.case_histogram.clone(),
        wall_seconds: out.wall_time.as_secs_f64(),
        settings: Some(settings),
    }
}
