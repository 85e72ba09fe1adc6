//! Average Difference in Scores.
//!
//! For each year `t` after the baseline, the estimand is the student change
//! from baseline minus the agent change from baseline:
//! `beta_t = (mean_t - mean_base)_student - (mean_t - mean_base)_agent`.
//! Negative values mean students lost ground relative to the agent.
//!
//! Three estimators are provided: plain mean differences, a saturated
//! no-intercept regression and a Bayesian comparison of group means.

mod bayes;
pub mod mcmc;
mod ols;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{CohortStats, Group, Level};
use crate::stats;

pub use bayes::{
    ads_bayes, fit_posterior, fit_posterior_population, GroupDraws, McmcConfig, MonteCarloConfig, PosteriorDraws,
    PriorSpec, DrawSource,
};
pub use mcmc::{effective_sample_size, split_rhat, Diagnostics};
pub use ols::{ads_ols, ads_ols_with, SeKind};

pub const BASELINE_YEAR: u16 = crate::FIRST_YEAR;

/// Normal quantile used for the frequentist intervals.
const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("unit {0} has no baseline-year score")]
    MissingBaseline(String),
    #[error("agent has no baseline-year exams")]
    NoAgentBaseline,
    #[error("year {year} has no {role} observations")]
    EmptyYearCell { year: u16, role: Role },
    #[error("no observations to estimate from")]
    NoObservations,
    #[error("design matrix is rank deficient: {0}")]
    RankDeficient(String),
    #[error("design matrix condition number {condition:.3e} exceeds {threshold:.1e}")]
    NumericalInstability { condition: f64, threshold: f64 },
    #[error("regression has zero residual degrees of freedom; standard errors undefined")]
    ZeroResidualDf,
    #[error("year {year} {role}: need at least 2 observations, have {have}")]
    TooFewObservations { year: u16, role: Role, have: usize },
    #[error("year {year} {role}: data mean {mean} outside prior support")]
    PriorSupportViolation { year: u16, role: Role, mean: f64 },
    #[error("year {year} {role}: not converged after {extensions} extensions (R-hat {rhat:.4}, ESS {ess:.0})")]
    NonConvergence {
        year: u16,
        role: Role,
        rhat: f64,
        ess: f64,
        extensions: u32,
    },
    #[error("row {unit}/{year} lacks sd or n")]
    MissingPopulationFields { unit: String, year: u16 },
    #[error("posterior draws cannot be aligned: {0}")]
    DrawCountMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Agent,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Student => "student",
            Role::Agent => "agent",
        })
    }
}

/// One agent exam on the common scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub year: u16,
    pub exam_id: String,
    pub scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaObservation {
    pub unit_id: String,
    pub role: Role,
    pub year: u16,
    pub delta: f64,
    pub level: Level,
    pub group: Group,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ols")]
    Ols,
    #[serde(rename = "meandiff")]
    MeanDiff,
    #[serde(rename = "bayes")]
    Bayes,
    #[serde(rename = "mcbayes")]
    MonteCarloBayes,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Ols => "ols",
            Method::MeanDiff => "meandiff",
            Method::Bayes => "bayes",
            Method::MonteCarloBayes => "mcbayes",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearEstimate {
    pub year: u16,
    /// ADS relative to the baseline year.
    pub beta: f64,
    /// Agent change from baseline.
    pub gamma: f64,
    pub se: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n_student: usize,
    pub n_agent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdsEstimate {
    pub method: Method,
    pub years: Vec<YearEstimate>,
    pub excluded_years: Vec<u16>,
    /// Residual degrees of freedom and standard deviation of the regression.
    pub residual_df: Option<usize>,
    pub residual_sigma: Option<f64>,
}

impl AdsEstimate {
    pub fn year(&self, year: u16) -> Option<&YearEstimate> {
        self.years.iter().find(|y| y.year == year)
    }

    pub fn beta(&self, year: u16) -> Option<f64> {
        self.year(year).map(|y| y.beta)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EstimatorError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["year", "estimate", "se", "ci_lo", "ci_hi", "n_student", "n_agent"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for y in &self.years {
            w.write_record([
                y.year.to_string(),
                format!("{:.6}", y.beta),
                opt(y.se),
                opt(y.ci_lo),
                opt(y.ci_hi),
                y.n_student.to_string(),
                y.n_agent.to_string(),
            ])?;
        }
        w.flush().map_err(|source| EstimatorError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Differences each student unit against its own baseline and each agent exam
/// against the mean baseline agent score. Baseline and excluded years produce
/// no observations; units without a baseline are an error.
pub fn build_deltas(
    student_stats: &[CohortStats],
    agent_scores: &[AgentScore],
    baseline_year: u16,
    exclude_years: &BTreeSet<u16>,
) -> Result<Vec<DeltaObservation>, EstimatorError> {
    let (level, group) = student_stats
        .first()
        .map(|s| (s.level, s.group))
        .ok_or(EstimatorError::NoObservations)?;

    let mut by_unit: BTreeMap<&str, Vec<&CohortStats>> = BTreeMap::new();
    for s in student_stats {
        by_unit.entry(s.unit_id.as_str()).or_default().push(s);
    }
    let mut out = Vec::new();
    for (unit, rows) in &by_unit {
        let base = rows
            .iter()
            .find(|r| r.year == baseline_year)
            .ok_or_else(|| EstimatorError::MissingBaseline(unit.to_string()))?
            .mean_score;
        for r in rows {
            if r.year == baseline_year || exclude_years.contains(&r.year) {
                continue;
            }
            out.push(DeltaObservation {
                unit_id: unit.to_string(),
                role: Role::Student,
                year: r.year,
                delta: r.mean_score - base,
                level: r.level,
                group: r.group,
            });
        }
    }

    let base: Vec<f64> = agent_scores
        .iter()
        .filter(|a| a.year == baseline_year)
        .map(|a| a.scaled)
        .collect();
    if base.is_empty() {
        return Err(EstimatorError::NoAgentBaseline);
    }
    let agent_base = stats::mean(&base);
    for a in agent_scores {
        if a.year == baseline_year || exclude_years.contains(&a.year) {
            continue;
        }
        out.push(DeltaObservation {
            unit_id: a.exam_id.clone(),
            role: Role::Agent,
            year: a.year,
            delta: a.scaled - agent_base,
            level,
            group,
        });
    }
    out.sort_by(|a, b| (a.year, a.role, &a.unit_id).cmp(&(b.year, b.role, &b.unit_id)));
    Ok(out)
}

/// Deltas grouped by year and role.
pub(crate) fn cells(deltas: &[DeltaObservation]) -> BTreeMap<u16, [Vec<f64>; 2]> {
    let mut out: BTreeMap<u16, [Vec<f64>; 2]> = BTreeMap::new();
    for d in deltas {
        let cell = out.entry(d.year).or_default();
        cell[d.role as usize].push(d.delta);
    }
    out
}

/// Per-year difference of role means, with an unpooled standard error.
pub fn ads_mean_diff(deltas: &[DeltaObservation]) -> Result<AdsEstimate, EstimatorError> {
    let cells = cells(deltas);
    if cells.is_empty() {
        return Err(EstimatorError::NoObservations);
    }
    let mut years = Vec::with_capacity(cells.len());
    for (&year, [student, agent]) in &cells {
        for (role, xs) in [(Role::Student, student), (Role::Agent, agent)] {
            if xs.is_empty() {
                return Err(EstimatorError::EmptyYearCell { year, role });
            }
        }
        let gamma = stats::mean(agent);
        let beta = stats::mean(student) - gamma;
        let se = (student.len() >= 2 && agent.len() >= 2)
            .then(|| (stats::variance(student) / student.len() as f64 + stats::variance(agent) / agent.len() as f64).sqrt());
        years.push(YearEstimate {
            year,
            beta,
            gamma,
            se,
            ci_lo: se.map(|s| beta - Z_975 * s),
            ci_hi: se.map(|s| beta + Z_975 * s),
            n_student: student.len(),
            n_agent: agent.len(),
        });
    }
    Ok(AdsEstimate {
        method: Method::MeanDiff,
        years,
        excluded_years: Vec::new(),
        residual_df: None,
        residual_sigma: None,
    })
}

/// Writes one row per year with a column per estimate, keyed by column name.
pub fn write_wide_table(path: &Path, columns: &[(String, &AdsEstimate)]) -> Result<(), EstimatorError> {
    let years: BTreeSet<u16> = columns
        .iter()
        .flat_map(|(_, e)| e.years.iter().map(|y| y.year))
        .collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["year".to_string()];
    for (name, _) in columns {
        header.push(name.clone());
        header.push(format!("{name}_se"));
    }
    w.write_record(&header)?;
    for year in years {
        let mut row = vec![year.to_string()];
        for (_, est) in columns {
            match est.year(year) {
                Some(y) => {
                    row.push(format!("{:.3}", y.beta));
                    row.push(y.se.map(|s| format!("{s:.3}")).unwrap_or_default());
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| EstimatorError::Io {
        path: path.display().to_string(),
        source,
    })
}
