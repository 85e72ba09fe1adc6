//! Bayesian comparison of group means.
//!
//! Each (year, role) group of scores gets its own Normal model with uniform
//! priors on the mean and standard deviation. When only population summaries
//! are available the group mean is drawn from a Normal with the standard error
//! of the mean, truncated to the score range.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mcmc::{sample_normal, Diagnostics};
pub use super::mcmc::{McmcConfig, PriorSpec};
use super::{AdsEstimate, EstimatorError, Method, Role, YearEstimate};
use crate::bank::CohortStats;
use crate::{seeds, stats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonteCarloConfig {
    pub draws: usize,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig { draws: 8000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DrawSource {
    Mcmc,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDraws {
    pub year: u16,
    pub role: Role,
    pub source: DrawSource,
    /// Draws of the group mean, chains concatenated in chain order.
    pub mu: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    pub diagnostics: Option<Diagnostics>,
    pub seed: u64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub prior: PriorSpec,
    pub groups: Vec<GroupDraws>,
}

impl PosteriorDraws {
    pub fn get(&self, year: u16, role: Role) -> Option<&GroupDraws> {
        self.groups.iter().find(|g| g.year == year && g.role == role)
    }

    pub fn years(&self, role: Role) -> Vec<u16> {
        let mut out: Vec<u16> = self.groups.iter().filter(|g| g.role == role).map(|g| g.year).collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Fits every group independently. Group `(year, role)` is seeded with
/// `derive(seed, "mcmc/<year>/<role>")`.
pub fn fit_posterior(
    samples: &BTreeMap<(u16, Role), Vec<f64>>,
    prior: &PriorSpec,
    config: &McmcConfig,
    seed: u64,
) -> Result<PosteriorDraws, EstimatorError> {
    for (&(year, role), xs) in samples {
        if xs.len() < 2 {
            return Err(EstimatorError::TooFewObservations {
                year,
                role,
                have: xs.len(),
            });
        }
        let mean = stats::mean(xs);
        if !(prior.mu_lo..=prior.mu_hi).contains(&mean) {
            return Err(EstimatorError::PriorSupportViolation { year, role, mean });
        }
    }
    let entries: Vec<_> = samples.iter().collect();
    let groups = entries
        .par_iter()
        .map(|(&(year, role), xs)| {
            let group_seed = seeds::derive(seed, &format!("mcmc/{year}/{role}"));
            let fit = sample_normal(xs, *prior, config, group_seed);
            let d = &fit.diagnostics;
            if !d.converged {
                return Err(EstimatorError::NonConvergence {
                    year,
                    role,
                    rhat: d.max_rhat(),
                    ess: d.min_ess(),
                    extensions: d.extensions,
                });
            }
            Ok(GroupDraws {
                year,
                role,
                source: DrawSource::Mcmc,
                mu: fit.param(0).concat(),
                sigma: Some(fit.param(1).concat()),
                diagnostics: Some(fit.diagnostics),
                seed: group_seed,
                n_obs: xs.len(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PosteriorDraws { prior: *prior, groups })
}

/// Draws each row's mean from Normal(mean, sd / sqrt(n)) truncated to the
/// score range, one group per row. Rows are taken to be student cohorts.
pub fn fit_posterior_population(
    stats: &[CohortStats],
    config: &MonteCarloConfig,
    seed: u64,
) -> Result<PosteriorDraws, EstimatorError> {
    let prior = PriorSpec::default();
    let mut groups = Vec::with_capacity(stats.len());
    for row in stats {
        let (Some(sd), Some(n)) = (row.sd, row.n) else {
            return Err(EstimatorError::MissingPopulationFields {
                unit: row.unit_id.clone(),
                year: row.year,
            });
        };
        if !(sd > 0.0) || n == 0 {
            return Err(EstimatorError::MissingPopulationFields {
                unit: row.unit_id.clone(),
                year: row.year,
            });
        }
        let group_seed = seeds::derive(seed, &format!("population/{}/{}", row.year, row.unit_id));
        let mut rng = ChaCha8Rng::seed_from_u64(group_seed);
        let dist = Normal::new(row.mean_score, sd / (n as f64).sqrt()).expect("finite positive sd");
        let mut mu = Vec::with_capacity(config.draws);
        while mu.len() < config.draws {
            let x = dist.sample(&mut rng);
            if (prior.mu_lo..=prior.mu_hi).contains(&x) {
                mu.push(x);
            }
        }
        groups.push(GroupDraws {
            year: row.year,
            role: Role::Student,
            source: DrawSource::MonteCarlo,
            mu,
            sigma: None,
            diagnostics: None,
            seed: group_seed,
            n_obs: n as usize,
        });
    }
    Ok(PosteriorDraws { prior, groups })
}

/// Evenly spaced subsample of `len` draws.
fn thin(draws: &[f64], len: usize) -> impl Iterator<Item = f64> + '_ {
    let stride = draws.len() as f64 / len as f64;
    (0..len).map(move |k| draws[(k as f64 * stride) as usize])
}

/// Combines group means drawwise into ADS draws per year:
/// `(mu_t - mu_base)_student - (mu_t - mu_base)_agent`.
/// All groups are thinned to the smallest draw count first.
pub fn ads_bayes(
    student: &PosteriorDraws,
    agent: &PosteriorDraws,
    baseline_year: u16,
) -> Result<(AdsEstimate, BTreeMap<u16, Vec<f64>>), EstimatorError> {
    let s_base = student
        .get(baseline_year, Role::Student)
        .ok_or_else(|| EstimatorError::MissingBaseline("student posterior".into()))?;
    let a_base = agent.get(baseline_year, Role::Agent).ok_or(EstimatorError::NoAgentBaseline)?;
    let years: Vec<u16> = student
        .years(Role::Student)
        .into_iter()
        .filter(|&y| y != baseline_year && agent.get(y, Role::Agent).is_some())
        .collect();

    let used: Vec<&GroupDraws> = [s_base, a_base]
        .into_iter()
        .chain(years.iter().flat_map(|&y| {
            [student.get(y, Role::Student).expect("year listed"), agent.get(y, Role::Agent).expect("year checked")]
        }))
        .collect();
    let m = used.iter().map(|g| g.mu.len()).min().unwrap_or(0);
    if m == 0 {
        let empty = used.iter().find(|g| g.mu.is_empty()).expect("some group is empty");
        return Err(EstimatorError::DrawCountMismatch(format!(
            "{} {} has no draws",
            empty.year, empty.role
        )));
    }

    let sb: Vec<f64> = thin(&s_base.mu, m).collect();
    let ab: Vec<f64> = thin(&a_base.mu, m).collect();
    let method = if student.groups.iter().any(|g| g.source == DrawSource::MonteCarlo) {
        Method::MonteCarloBayes
    } else {
        Method::Bayes
    };

    let mut estimates = Vec::with_capacity(years.len());
    let mut draws = BTreeMap::new();
    for &year in &years {
        let s = student.get(year, Role::Student).expect("year listed");
        let a = agent.get(year, Role::Agent).expect("year checked");
        let agent_change: Vec<f64> = thin(&a.mu, m).zip(&ab).map(|(t, b)| t - b).collect();
        let ads: Vec<f64> = thin(&s.mu, m)
            .zip(&sb)
            .zip(&agent_change)
            .map(|((t, b), g)| (t - b) - g)
            .collect();
        let (lo, hi) = stats::central_interval(&ads, 0.95);
        estimates.push(YearEstimate {
            year,
            beta: stats::mean(&ads),
            gamma: stats::mean(&agent_change),
            se: Some(stats::std_dev(&ads)),
            ci_lo: Some(lo),
            ci_hi: Some(hi),
            n_student: s.n_obs,
            n_agent: a.n_obs,
        });
        draws.insert(year, ads);
    }
    Ok((
        AdsEstimate {
            method,
            years: estimates,
            excluded_years: Vec::new(),
            residual_df: None,
            residual_sigma: None,
        },
        draws,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{Group, Level};

    fn national(year: u16, mean: f64, sd: f64, n: u64) -> CohortStats {
        CohortStats {
            year,
            level: Level::National,
            unit_id: "US".into(),
            group: Group::All,
            mean_score: mean,
            sd: Some(sd),
            n: Some(n),
            needs_concordance: false,
        }
    }

    #[test]
    fn population_draw_spread() {
        let cfg = MonteCarloConfig { draws: 20_000 };
        let big = fit_posterior_population(&[national(2010, 500.0, 100.0, 1_000_000)], &cfg, 1).unwrap();
        let sd = stats::std_dev(&big.groups[0].mu);
        assert!((sd - 0.1).abs() < 0.005, "sd {sd}");
        let one = fit_posterior_population(&[national(2010, 500.0, 100.0, 1)], &cfg, 1).unwrap();
        let sd = stats::std_dev(&one.groups[0].mu);
        // Truncation at 200 and 800 is three sds away and barely narrows the spread.
        assert!((sd - 100.0).abs() < 3.0, "sd {sd}");
        let edge = fit_posterior_population(&[national(2010, 210.0, 100.0, 1)], &cfg, 1).unwrap();
        assert!(edge.groups[0].mu.iter().all(|&x| (200.0..=800.0).contains(&x)));

        let mut missing = national(2010, 500.0, 1.0, 1);
        missing.n = None;
        assert!(matches!(
            fit_posterior_population(&[missing], &cfg, 1),
            Err(EstimatorError::MissingPopulationFields { year: 2010, .. })
        ));
    }

    fn group(year: u16, role: Role, mu: Vec<f64>) -> GroupDraws {
        GroupDraws {
            year,
            role,
            source: DrawSource::Mcmc,
            mu,
            sigma: None,
            diagnostics: None,
            seed: 0,
            n_obs: 10,
        }
    }

    #[test]
    fn identical_streams_cancel() {
        let stream: Vec<f64> = (0..100).map(|i| 500.0 + (i as f64).sin() * 10.0).collect();
        let shifted: Vec<f64> = stream.iter().map(|x| x + 7.0).collect();
        let mk = |role| PosteriorDraws {
            prior: PriorSpec::default(),
            groups: vec![group(2008, role, stream.clone()), group(2012, role, shifted.clone())],
        };
        let (est, draws) = ads_bayes(&mk(Role::Student), &mk(Role::Agent), 2008).unwrap();
        assert!(draws[&2012].iter().all(|&d| d == 0.0));
        assert_eq!(est.years[0].beta, 0.0);
        assert!((est.years[0].gamma - 7.0).abs() < 1e-9);
    }

    #[test]
    fn thinning_aligns_counts() {
        let s = PosteriorDraws {
            prior: PriorSpec::default(),
            groups: vec![group(2008, Role::Student, vec![500.0; 10]), group(2009, Role::Student, vec![490.0; 10])],
        };
        let a = PosteriorDraws {
            prior: PriorSpec::default(),
            groups: vec![group(2008, Role::Agent, vec![500.0; 4]), group(2009, Role::Agent, vec![505.0; 4])],
        };
        let (est, draws) = ads_bayes(&s, &a, 2008).unwrap();
        assert_eq!(draws[&2009].len(), 4);
        assert_eq!(est.beta(2009), Some(-15.0));
        let empty = PosteriorDraws {
            prior: PriorSpec::default(),
            groups: vec![group(2008, Role::Agent, vec![]), group(2009, Role::Agent, vec![505.0; 4])],
        };
        assert!(matches!(ads_bayes(&s, &empty, 2008), Err(EstimatorError::DrawCountMismatch(_))));
    }

    #[test]
    fn fit_checks_inputs() {
        let mut samples = BTreeMap::new();
        samples.insert((2008, Role::Agent), vec![500.0]);
        assert!(matches!(
            fit_posterior(&samples, &PriorSpec::default(), &McmcConfig::default(), 0),
            Err(EstimatorError::TooFewObservations { have: 1, .. })
        ));
        samples.insert((2008, Role::Agent), vec![900.0, 910.0]);
        assert!(matches!(
            fit_posterior(&samples, &PriorSpec::default(), &McmcConfig::default(), 0),
            Err(EstimatorError::PriorSupportViolation { .. })
        ));
    }

    #[test]
    fn fitted_groups_stay_in_support() {
        let mut samples = BTreeMap::new();
        samples.insert((2008, Role::Student), vec![205.0, 201.0, 203.0, 230.0]);
        samples.insert((2009, Role::Student), (0..30).map(|i| 600.0 + i as f64).collect());
        let prior = PriorSpec::default();
        let post = fit_posterior(&samples, &prior, &McmcConfig::default(), 5).unwrap();
        for g in &post.groups {
            let sigma = g.sigma.as_ref().unwrap();
            assert!(g.mu.iter().zip(sigma).all(|(&m, &s)| prior.contains(m, s)));
            assert!(g.diagnostics.as_ref().unwrap().converged);
        }
    }
}
