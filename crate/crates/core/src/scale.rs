//! Raw-to-scaled conversion and the pre-to-post scale concordance.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{CohortStats, Era};
use crate::{SCALE_MAX, SCALE_MIN};

/// Largest residual tolerated between the linear concordance and its table.
pub const MAX_CONCORDANCE_RESIDUAL: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("raw score {raw} outside table domain 0..={max}")]
    RawOutOfDomain { raw: i64, max: usize },
    #[error("score {0} outside 200-800")]
    OutOfRange(f64),
    #[error("concordance needs at least two distinct inputs")]
    DegenerateFit,
    #[error("concordance residual {0:.3} exceeds {MAX_CONCORDANCE_RESIDUAL}")]
    ResidualTooLarge(f64),
    #[error("invalid conversion table: {0}")]
    InvalidTable(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// Raw score to scaled score lookup for one era.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionTable {
    pub era: Era,
    /// `rows[raw]` is the scaled score.
    rows: Vec<u16>,
}

#[derive(Debug, Deserialize)]
struct TableRow {
    raw: i64,
    scaled: f64,
}

impl ConversionTable {
    /// Validates domain `0..=total_questions`, monotonicity and the 200-800 range.
    pub fn new(era: Era, pairs: &[(i64, u16)]) -> Result<Self, ScaleError> {
        let mut sorted = pairs.to_vec();
        sorted.sort_by_key(|p| p.0);
        for (expected, (raw, _)) in sorted.iter().enumerate() {
            if *raw != expected as i64 {
                return Err(ScaleError::InvalidTable(format!(
                    "raw scores must cover 0..n without gaps; found {raw} at position {expected}"
                )));
            }
        }
        let rows: Vec<u16> = sorted.iter().map(|p| p.1).collect();
        if rows.len() != era.default_total() + 1 {
            log::warn!(
                "{era:?} conversion table covers 0..{} instead of 0..{}",
                rows.len().saturating_sub(1),
                era.default_total()
            );
        }
        if let Some(bad) = rows
            .iter()
            .find(|&&s| !(SCALE_MIN..=SCALE_MAX).contains(&(s as f64)))
        {
            return Err(ScaleError::InvalidTable(format!("scaled score {bad} outside 200-800")));
        }
        if rows.windows(2).any(|w| w[0] > w[1]) {
            return Err(ScaleError::InvalidTable("table is not monotone".into()));
        }
        Ok(ConversionTable { era, rows })
    }

    /// Loads a `raw,scaled` CSV.
    pub fn load(era: Era, path: impl AsRef<Path>) -> Result<Self, ScaleError> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(source) => ScaleError::Io {
                    path: path.display().to_string(),
                    source,
                },
                other => ScaleError::InvalidTable(format!("{other:?}")),
            })?;
        let mut pairs = Vec::new();
        for row in reader.deserialize() {
            let row: TableRow = row?;
            if row.scaled.fract() != 0.0 || row.scaled < 0.0 {
                return Err(ScaleError::InvalidTable(format!(
                    "scaled score {} is not an integer",
                    row.scaled
                )));
            }
            pairs.push((row.raw, row.scaled as u16));
        }
        Self::new(era, &pairs)
    }

    pub fn max_raw(&self) -> usize {
        self.rows.len() - 1
    }

    pub fn rows(&self) -> &[u16] {
        &self.rows
    }

    /// Exact table lookup.
    pub fn raw_to_scaled(&self, raw: i64) -> Result<u16, ScaleError> {
        usize::try_from(raw)
            .ok()
            .and_then(|r| self.rows.get(r).copied())
            .ok_or(ScaleError::RawOutOfDomain {
                raw,
                max: self.max_raw(),
            })
    }
}

/// Affine map from pre-2017 scaled scores onto the post-2017 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearConcordance {
    pub slope: f64,
    pub intercept: f64,
    pub max_abs_residual: f64,
    pub points: usize,
}

/// Least-squares line through `(old_scaled, new_scaled)` pairs.
pub fn fit_concordance(pairs: &[(f64, f64)]) -> Result<LinearConcordance, ScaleError> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Err(ScaleError::DegenerateFit);
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) {
        return Err(ScaleError::DegenerateFit);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if !(slope > 0.0) {
        return Err(ScaleError::InvalidTable(format!(
            "concordance slope {slope} is not positive"
        )));
    }
    let max_abs_residual = pairs
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).abs())
        .fold(0.0, f64::max);
    if max_abs_residual > MAX_CONCORDANCE_RESIDUAL {
        return Err(ScaleError::ResidualTooLarge(max_abs_residual));
    }
    Ok(LinearConcordance {
        slope,
        intercept,
        max_abs_residual,
        points: pairs.len(),
    })
}

#[derive(Debug, Deserialize)]
struct ConcordanceRow {
    old_scaled: f64,
    new_scaled: f64,
}

/// Reads `old_scaled,new_scaled` pairs.
pub fn load_concordance_pairs(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>, ScaleError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScaleError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    reader
        .deserialize()
        .map(|r| {
            r.map(|row: ConcordanceRow| (row.old_scaled, row.new_scaled))
                .map_err(ScaleError::from)
        })
        .collect()
}

impl LinearConcordance {
    /// Maps a pre-era score, clamping the result to 200-800.
    pub fn map_pre_to_post(&self, scaled_pre: f64) -> Result<f64, ScaleError> {
        if !(SCALE_MIN..=SCALE_MAX).contains(&scaled_pre) {
            return Err(ScaleError::OutOfRange(scaled_pre));
        }
        Ok((self.slope * scaled_pre + self.intercept).clamp(SCALE_MIN, SCALE_MAX))
    }

    pub fn identity() -> Self {
        LinearConcordance {
            slope: 1.0,
            intercept: 0.0,
            max_abs_residual: 0.0,
            points: 0,
        }
    }
}

/// Both era tables plus the concordance: everything needed to put a raw
/// score from any year onto the common post-2017 scale.
#[derive(Debug, Clone)]
pub struct ScoreScale {
    pub pre: ConversionTable,
    pub post: ConversionTable,
    pub concordance: LinearConcordance,
}

impl ScoreScale {
    pub fn table(&self, era: Era) -> &ConversionTable {
        match era {
            Era::Pre => &self.pre,
            Era::Post => &self.post,
        }
    }

    /// Era table lookup, followed by the concordance for pre-era years.
    pub fn common_scale(&self, year: u16, raw: i64) -> Result<f64, ScaleError> {
        let era = Era::of_year(year);
        let scaled = self.table(era).raw_to_scaled(raw)? as f64;
        match era {
            Era::Pre => self.concordance.map_pre_to_post(scaled),
            Era::Post => Ok(scaled),
        }
    }

    /// Maps flagged cohort rows onto the post scale and clears the flag.
    pub fn map_cohort(&self, stats: &[CohortStats]) -> Result<Vec<CohortStats>, ScaleError> {
        stats
            .iter()
            .map(|s| {
                let mut s = s.clone();
                if s.needs_concordance {
                    s.mean_score = self.concordance.map_pre_to_post(s.mean_score)?;
                    s.sd = s.sd.map(|sd| sd * self.concordance.slope);
                    s.needs_concordance = false;
                }
                Ok(s)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_table(era: Era) -> ConversionTable {
        let max = era.default_total() as i64;
        let pairs: Vec<(i64, u16)> = (0..=max)
            .map(|r| (r, (200.0 + 600.0 * r as f64 / max as f64).round() as u16))
            .collect();
        ConversionTable::new(era, &pairs).unwrap()
    }

    #[test]
    fn floor_and_ceiling() {
        for era in [Era::Pre, Era::Post] {
            let t = linear_table(era);
            assert_eq!(t.raw_to_scaled(0).unwrap(), 200);
            assert_eq!(t.raw_to_scaled(era.default_total() as i64).unwrap(), 800);
            assert!(matches!(t.raw_to_scaled(-1), Err(ScaleError::RawOutOfDomain { .. })));
            assert!(matches!(
                t.raw_to_scaled(era.default_total() as i64 + 1),
                Err(ScaleError::RawOutOfDomain { .. })
            ));
        }
    }

    #[test]
    fn rejects_non_monotone_or_gappy_tables() {
        assert!(ConversionTable::new(Era::Pre, &[(0, 200), (1, 300), (2, 250)]).is_err());
        assert!(ConversionTable::new(Era::Pre, &[(0, 200), (2, 300)]).is_err());
        assert!(ConversionTable::new(Era::Pre, &[(0, 150), (1, 300)]).is_err());
    }

    #[test]
    fn exact_line_fit() {
        let pairs: Vec<(f64, f64)> = (0..20)
            .map(|i| {
                let x = 300.0 + 20.0 * i as f64;
                (x, 1.1 * x - 30.0)
            })
            .collect();
        let c = fit_concordance(&pairs).unwrap();
        assert!((c.slope - 1.1).abs() < 1e-12);
        assert!((c.intercept + 30.0).abs() < 1e-9);
        assert!(c.max_abs_residual < 1e-9);

        let ident: Vec<(f64, f64)> = (20..=80).map(|i| (10.0 * i as f64, 10.0 * i as f64)).collect();
        let c = fit_concordance(&ident).unwrap();
        assert!((c.slope - 1.0).abs() < 1e-12 && c.intercept.abs() < 1e-9);
    }

    #[test]
    fn degenerate_fit() {
        assert!(matches!(fit_concordance(&[(500.0, 510.0)]), Err(ScaleError::DegenerateFit)));
        assert!(matches!(
            fit_concordance(&[(500.0, 510.0), (500.0, 520.0)]),
            Err(ScaleError::DegenerateFit)
        ));
    }

    #[test]
    fn mapping_behaviour() {
        let c = LinearConcordance {
            slope: 1.05,
            intercept: -10.0,
            max_abs_residual: 0.0,
            points: 2,
        };
        let a = c.map_pre_to_post(514.0).unwrap();
        let b = c.map_pre_to_post(515.0).unwrap();
        assert!((b - a - 1.05).abs() < 1e-9);
        assert_eq!(c.map_pre_to_post(800.0).unwrap(), 800.0);
        assert!(matches!(c.map_pre_to_post(199.0), Err(ScaleError::OutOfRange(_))));
        assert_eq!(LinearConcordance::identity().map_pre_to_post(200.0).unwrap(), 200.0);
    }

    #[test]
    fn common_scale_stays_in_range() {
        let scale = ScoreScale {
            pre: linear_table(Era::Pre),
            post: linear_table(Era::Post),
            concordance: LinearConcordance {
                slope: 1.2,
                intercept: -100.0,
                max_abs_residual: 0.0,
                points: 2,
            },
        };
        for year in 2008..=2016 {
            for raw in 0..=54 {
                let v = scale.common_scale(year, raw).unwrap();
                assert!((200.0..=800.0).contains(&v));
            }
        }
        assert_eq!(scale.common_scale(2020, 58).unwrap(), 800.0);
    }
}
