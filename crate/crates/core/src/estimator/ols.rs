//! Saturated no-intercept regression of deltas on year dummies and
//! year-by-student interactions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{cells, AdsEstimate, DeltaObservation, EstimatorError, Method, Role, YearEstimate, Z_975};

/// Largest accepted ratio of extreme singular values of the design matrix.
pub const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeKind {
    /// Pooled residual variance, one sigma for every coefficient.
    #[default]
    Homoskedastic,
    /// White sandwich estimator with the n/(n-p) correction.
    Hc1,
}

pub fn ads_ols(deltas: &[DeltaObservation]) -> Result<AdsEstimate, EstimatorError> {
    ads_ols_with(deltas, SeKind::Homoskedastic)
}

/// Columns are `[gamma_1..gamma_T, beta_1..beta_T]`: the year dummy and the
/// year dummy times the student indicator.
pub fn ads_ols_with(deltas: &[DeltaObservation], se_kind: SeKind) -> Result<AdsEstimate, EstimatorError> {
    let cells = cells(deltas);
    if cells.is_empty() {
        return Err(EstimatorError::NoObservations);
    }
    for (&year, [student, agent]) in &cells {
        if student.is_empty() || agent.is_empty() {
            let role = if student.is_empty() { Role::Student } else { Role::Agent };
            return Err(EstimatorError::RankDeficient(format!("year {year} has no {role} observations")));
        }
    }
    let years: Vec<u16> = cells.keys().copied().collect();
    let t = years.len();
    let p = 2 * t;
    let n = deltas.len();

    let mut x = DMatrix::<f64>::zeros(n, p);
    let mut y = DVector::<f64>::zeros(n);
    for (i, d) in deltas.iter().enumerate() {
        let j = years.binary_search(&d.year).expect("year indexed");
        x[(i, j)] = 1.0;
        if d.role == Role::Student {
            x[(i, t + j)] = 1.0;
        }
        y[i] = d.delta;
    }

    let qr = x.clone().qr();
    let r = qr.r();
    let singular = r.clone().singular_values();
    let (smax, smin) = singular
        .iter()
        .fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
    if smin <= 0.0 || !smin.is_finite() {
        return Err(EstimatorError::RankDeficient("singular design".into()));
    }
    let condition = smax / smin;
    if condition > MAX_CONDITION {
        return Err(EstimatorError::NumericalInstability {
            condition,
            threshold: MAX_CONDITION,
        });
    }

    let mut qty = y.clone();
    qr.q_tr_mul(&mut qty);
    let coef = r
        .solve_upper_triangular(&qty.rows(0, p).into_owned())
        .ok_or_else(|| EstimatorError::RankDeficient("triangular solve failed".into()))?;

    let df = n - p;
    if df == 0 {
        return Err(EstimatorError::ZeroResidualDf);
    }
    let resid = &y - &x * &coef;
    let sigma2 = resid.norm_squared() / df as f64;

    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| EstimatorError::RankDeficient("triangular inverse failed".into()))?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let cov = match se_kind {
        SeKind::Homoskedastic => xtx_inv * sigma2,
        SeKind::Hc1 => {
            let mut weighted = x.clone();
            for (i, e) in resid.iter().enumerate() {
                weighted.row_mut(i).scale_mut(e * e);
            }
            let meat = x.transpose() * weighted;
            &xtx_inv * meat * &xtx_inv * (n as f64 / df as f64)
        }
    };

    let estimates = years
        .iter()
        .enumerate()
        .map(|(j, &year)| {
            let beta = coef[t + j];
            let se = cov[(t + j, t + j)].max(0.0).sqrt();
            let [student, agent] = &cells[&year];
            YearEstimate {
                year,
                beta,
                gamma: coef[j],
                se: Some(se),
                ci_lo: Some(beta - Z_975 * se),
                ci_hi: Some(beta + Z_975 * se),
                n_student: student.len(),
                n_agent: agent.len(),
            }
        })
        .collect();
    Ok(AdsEstimate {
        method: Method::Ols,
        years: estimates,
        excluded_years: Vec::new(),
        residual_df: Some(df),
        residual_sigma: Some(sigma2.sqrt()),
    })
}
