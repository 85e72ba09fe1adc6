//! Transformed-control evaluation harness.
//!
//! An LLM agent sits bootstrapped SAT math exams from each year; its scaled
//! scores form a control trend against which student cohort score changes are
//! compared. The pipeline is:
//!
//! 1. [`bank`] loads the transcribed question bank and cohort statistics.
//! 2. [`sampler`] draws fixed-composition bootstrap exams per year.
//! 3. [`agent`] administers each question statelessly to a chat endpoint (or a mock).
//! 4. [`judge`] parses and grades answers and aggregates per-exam/per-year statistics.
//! 5. [`scale`] converts raw to scaled scores and maps the pre-2017 scale onto the post scale.
//! 6. [`estimator`] estimates the average difference in scores (ADS) by saturated OLS,
//!    plain mean differences and Bayesian posterior comparison.
//! 7. [`difficulty`] classifies question difficulty from embeddings with a random forest.
//! 8. [`pipeline`] drives all of the above from a single config file.

pub mod agent;
pub mod bank;
pub mod difficulty;
pub mod estimator;
pub mod judge;
pub mod pipeline;
pub mod sampler;
pub mod scale;
pub mod seeds;
pub mod stats;

pub use bank::{
    exam_format, load_cohort_stats, load_question_bank, CohortStats, Era, ExamFormat, Question,
    QuestionBank, QuestionType,
};

/// First exam year covered by the harness.
pub const FIRST_YEAR: u16 = 2008;
/// Last exam year covered by the harness.
pub const LAST_YEAR: u16 = 2023;
/// Last year of the pre-2017 exam format.
pub const LAST_PRE_YEAR: u16 = 2016;
/// Lowest score on the 200-800 scale.
pub const SCALE_MIN: f64 = 200.0;
/// Highest score on the 200-800 scale.
pub const SCALE_MAX: f64 = 800.0;
