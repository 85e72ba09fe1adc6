//! Parsing, grading and per-exam / per-year aggregation of agent answers.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::ResponseRecord;
use crate::bank::{Answer, Question, QuestionBank, QuestionType};
use crate::sampler::Exam;
use crate::stats;

/// Relative tolerance for non-integer numeric answers.
pub const NUMERIC_REL_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("exam {exam_id}: no response for question {question_id}")]
    MissingResponse { exam_id: String, question_id: String },
    #[error("exam {exam_id}: unexpected or duplicate response for question {question_id}")]
    ExtraResponse { exam_id: String, question_id: String },
    #[error("question {0} not in bank")]
    UnknownQuestion(String),
    #[error("scores span several years")]
    MixedYears,
    #[error("need at least two exams for standard errors, got {0}")]
    TooFewExams(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ParsedAnswer {
    Letter(char),
    Number(f64),
    Unparseable,
}

const STRIP: &[char] = &[
    '.', ',', ':', ';', '!', '?', '(', ')', '[', ']', '{', '}', '"', '\'', '`', '*',
];

/// Normalizes raw agent text into a letter or number.
pub fn parse_response(raw_text: &str, qtype: QuestionType) -> ParsedAnswer {
    match qtype {
        QuestionType::Mcq => {
            let core = raw_text.trim().trim_matches(|c: char| c.is_whitespace() || STRIP.contains(&c));
            let mut chars = core.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if ('A'..='E').contains(&c.to_ascii_uppercase()) => {
                    ParsedAnswer::Letter(c.to_ascii_uppercase())
                }
                _ => ParsedAnswer::Unparseable,
            }
        }
        QuestionType::Numeric => {
            let core = raw_text
                .trim()
                .trim_matches(|c: char| c.is_whitespace() || matches!(c, '`' | '"' | '\''))
                .trim_end_matches('.');
            match core.parse::<crate::bank::Number>() {
                Ok(n) => ParsedAnswer::Number(n.value()),
                Err(_) => ParsedAnswer::Unparseable,
            }
        }
    }
}

fn numbers_match(expected: &crate::bank::Number, got: f64) -> bool {
    let want = expected.value();
    if expected.is_integer() {
        return got == want;
    }
    (got - want).abs() <= NUMERIC_REL_TOL * want.abs().max(got.abs())
}

/// Characteristic function of the question's answer set. No negative marking.
pub fn grade(question: &Question, parsed: &ParsedAnswer) -> bool {
    match *parsed {
        ParsedAnswer::Unparseable => false,
        ParsedAnswer::Letter(l) => question.qtype == QuestionType::Mcq
            && question.answers.iter().any(|a| *a == Answer::Letter(l)),
        ParsedAnswer::Number(v) => {
            question.qtype == QuestionType::Numeric
                && question.answers.iter().any(|a| match a {
                    Answer::Value(n) => numbers_match(n, v),
                    Answer::Interval(lo, hi) => v >= lo.value() && v <= hi.value(),
                    Answer::Letter(_) => false,
                })
        }
    }
}

/// One graded item, in exam order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradedItem {
    pub question_id: String,
    pub qtype: QuestionType,
    pub parsed: ParsedAnswer,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamScore {
    pub exam_id: String,
    pub year: u16,
    pub n_correct: usize,
    pub total: usize,
    pub proportion: f64,
    pub mcq_correct: usize,
    pub mcq_total: usize,
    pub numeric_correct: usize,
    pub numeric_total: usize,
}

/// Grades every question of an exam against exactly one response each.
pub fn grade_exam(
    exam: &Exam,
    responses: &[ResponseRecord],
    bank: &QuestionBank,
) -> Result<Vec<GradedItem>, JudgeError> {
    let mut by_id: HashMap<&str, &ResponseRecord> = HashMap::new();
    for r in responses {
        let in_exam = exam.question_ids.iter().any(|q| *q == r.question_id);
        if !in_exam || by_id.insert(r.question_id.as_str(), r).is_some() {
            return Err(JudgeError::ExtraResponse {
                exam_id: exam.exam_id.clone(),
                question_id: r.question_id.clone(),
            });
        }
    }
    exam.question_ids
        .iter()
        .map(|qid| {
            let question = bank
                .get(qid)
                .ok_or_else(|| JudgeError::UnknownQuestion(qid.clone()))?;
            let response = by_id.get(qid.as_str()).ok_or_else(|| JudgeError::MissingResponse {
                exam_id: exam.exam_id.clone(),
                question_id: qid.clone(),
            })?;
            let parsed = parse_response(&response.raw_text, question.qtype);
            Ok(GradedItem {
                question_id: qid.clone(),
                qtype: question.qtype,
                parsed,
                correct: grade(question, &parsed),
            })
        })
        .collect()
}

/// Counts correct answers for one exam.
pub fn score_exam(
    exam: &Exam,
    responses: &[ResponseRecord],
    bank: &QuestionBank,
) -> Result<ExamScore, JudgeError> {
    let items = grade_exam(exam, responses, bank)?;
    Ok(score_items(&exam.exam_id, exam.year, &items))
}

pub fn score_items(exam_id: &str, year: u16, items: &[GradedItem]) -> ExamScore {
    let count = |t: QuestionType, correct_only: bool| {
        items
            .iter()
            .filter(|i| i.qtype == t && (!correct_only || i.correct))
            .count()
    };
    let n_correct = items.iter().filter(|i| i.correct).count();
    let total = items.len();
    ExamScore {
        exam_id: exam_id.to_string(),
        year,
        n_correct,
        total,
        proportion: if total == 0 { 0.0 } else { n_correct as f64 / total as f64 },
        mcq_correct: count(QuestionType::Mcq, true),
        mcq_total: count(QuestionType::Mcq, false),
        numeric_correct: count(QuestionType::Numeric, true),
        numeric_total: count(QuestionType::Numeric, false),
    }
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    fn of(xs: &[f64]) -> Self {
        MeanSe {
            mean: stats::mean(xs),
            se: stats::std_dev(xs) / (xs.len() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearAgentStats {
    pub year: u16,
    /// Mean correct count per exam.
    pub mu: f64,
    /// Mean proportion correct per exam.
    pub nu: f64,
    pub se_mu: f64,
    pub se_nu: f64,
    pub exam_count: usize,
    pub mcq: MeanSe,
    pub numeric: MeanSe,
}

pub fn aggregate_year(scores: &[ExamScore]) -> Result<YearAgentStats, JudgeError> {
    if scores.len() < 2 {
        return Err(JudgeError::TooFewExams(scores.len()));
    }
    let year = scores[0].year;
    if scores.iter().any(|s| s.year != year) {
        return Err(JudgeError::MixedYears);
    }
    let counts: Vec<f64> = scores.iter().map(|s| s.n_correct as f64).collect();
    let props: Vec<f64> = scores.iter().map(|s| s.proportion).collect();
    let ratio = |c: usize, t: usize| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    let mcq: Vec<f64> = scores.iter().map(|s| ratio(s.mcq_correct, s.mcq_total)).collect();
    let numeric: Vec<f64> = scores
        .iter()
        .map(|s| ratio(s.numeric_correct, s.numeric_total))
        .collect();
    let mu = MeanSe::of(&counts);
    let nu = MeanSe::of(&props);
    Ok(YearAgentStats {
        year,
        mu: mu.mean,
        nu: nu.mean,
        se_mu: mu.se,
        se_nu: nu.se,
        exam_count: scores.len(),
        mcq: MeanSe::of(&mcq),
        numeric: MeanSe::of(&numeric),
    })
}

/// Writes `exam_id,n,total,p,mcq_correct,numeric_correct`.
pub fn write_exam_scores(path: &Path, scores: &[ExamScore]) -> Result<(), JudgeError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["exam_id", "n", "total", "p", "mcq_correct", "numeric_correct"])?;
    for s in scores {
        w.write_record([
            s.exam_id.clone(),
            s.n_correct.to_string(),
            s.total.to_string(),
            format!("{:.6}", s.proportion),
            s.mcq_correct.to_string(),
            s.numeric_correct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-year summary in the layout: proportion and SE for all questions,
/// multiple choice only and answer type only.
pub fn write_summary(path: &Path, years: &[YearAgentStats]) -> Result<(), JudgeError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "year,all_proportion,all_se,mcq_proportion,mcq_se,numeric_proportion,numeric_se,mu,se_mu,exams"
    )?;
    for y in years {
        writeln!(
            f,
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            y.year,
            y.nu,
            y.se_nu,
            y.mcq.mean,
            y.mcq.se,
            y.numeric.mean,
            y.numeric.se,
            y.mu,
            y.se_mu,
            y.exam_count
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{AnswerOption, Calculator, Number};
    use crate::sampler::Exam;

    fn mcq(answers: &[char]) -> Question {
        Question {
            id: "m".into(),
            year: 2008,
            source_doc: "d".into(),
            section_index: 1,
            question_index: 1,
            section_length: 10,
            qtype: QuestionType::Mcq,
            calculator: Calculator::Allowed,
            text: "t".into(),
            options: ['A', 'B', 'C', 'D', 'E']
                .iter()
                .map(|&label| AnswerOption { label, text: "x".into() })
                .collect(),
            answers: answers.iter().map(|&c| Answer::Letter(c)).collect(),
            difficulty_rating: None,
        }
    }

    fn numeric(answers: Vec<Answer>) -> Question {
        Question {
            qtype: QuestionType::Numeric,
            options: vec![],
            answers,
            id: "n".into(),
            ..mcq(&['A'])
        }
    }

    #[test]
    fn parse_mcq_forms() {
        for raw in ["  b.", "B", "(B)", "b", "B.", " [b] ", "\"B\""] {
            assert_eq!(parse_response(raw, QuestionType::Mcq), ParsedAnswer::Letter('B'), "{raw}");
        }
        for raw in ["The answer is B", "", "AB", "F", "B or C", "1"] {
            assert_eq!(parse_response(raw, QuestionType::Mcq), ParsedAnswer::Unparseable, "{raw}");
        }
    }

    #[test]
    fn unparseable_oracle_exhaustive() {
        // Anything whose stripped form is not one letter A-E must be rejected.
        let alphabet = ['A', 'b', ' ', '.', '(', ')', 'x', '1', 'E', 'f'];
        for a in alphabet {
            for b in alphabet {
                for c in alphabet {
                    let s: String = [a, b, c].iter().collect();
                    let stripped: String = s
                        .trim_matches(|ch: char| ch.is_whitespace() || STRIP.contains(&ch))
                        .to_string();
                    let oracle_letter = stripped.chars().count() == 1
                        && ('A'..='E').contains(&stripped.chars().next().unwrap().to_ascii_uppercase());
                    let parsed = parse_response(&s, QuestionType::Mcq);
                    assert_eq!(parsed != ParsedAnswer::Unparseable, oracle_letter, "{s:?}");
                }
            }
        }
    }

    #[test]
    fn parse_numeric_forms() {
        assert_eq!(parse_response("3/4", QuestionType::Numeric), ParsedAnswer::Number(0.75));
        assert_eq!(parse_response(" 12 ", QuestionType::Numeric), ParsedAnswer::Number(12.0));
        assert_eq!(parse_response("-2.5", QuestionType::Numeric), ParsedAnswer::Number(-2.5));
        assert_eq!(parse_response(".5", QuestionType::Numeric), ParsedAnswer::Number(0.5));
        assert_eq!(parse_response("x = 3", QuestionType::Numeric), ParsedAnswer::Unparseable);
        assert_eq!(parse_response("3 cm", QuestionType::Numeric), ParsedAnswer::Unparseable);
    }

    #[test]
    fn grading_rules() {
        let q = mcq(&['C']);
        assert!(grade(&q, &ParsedAnswer::Letter('C')));
        assert!(!grade(&q, &ParsedAnswer::Letter('D')));
        assert!(!grade(&q, &ParsedAnswer::Unparseable));
        assert!(!grade(&q, &ParsedAnswer::Number(3.0)));

        let q = numeric(vec![Answer::Value(Number::Decimal(0.75))]);
        assert!(grade(&q, &parse_response("3/4", QuestionType::Numeric)));
        assert!(grade(&q, &ParsedAnswer::Number(0.75 * (1.0 + 5e-7))));
        assert!(!grade(&q, &ParsedAnswer::Number(0.75 * (1.0 + 5e-6))));

        let q = numeric(vec![Answer::Value(Number::Integer(7))]);
        assert!(grade(&q, &ParsedAnswer::Number(7.0)));
        assert!(!grade(&q, &ParsedAnswer::Number(7.000_000_1)));

        let q = numeric(vec![Answer::Interval(Number::Decimal(2.5), Number::Fraction(11, 4))]);
        assert!(grade(&q, &ParsedAnswer::Number(2.6)));
        assert!(grade(&q, &ParsedAnswer::Number(2.75)));
        assert!(!grade(&q, &ParsedAnswer::Number(2.8)));
    }

    #[test]
    fn fraction_grading_matches_rational_oracle() {
        // p/q answers against every decimal rendering with enough digits.
        for p in 1..20i64 {
            for q in 1..12i64 {
                let question = numeric(vec![Answer::Value(Number::Fraction(p, q))]);
                let exact = format!("{p}/{q}");
                assert!(grade(&question, &parse_response(&exact, QuestionType::Numeric)));
                let decimal = format!("{:.9}", p as f64 / q as f64);
                assert!(grade(&question, &parse_response(&decimal, QuestionType::Numeric)));
                let off = format!("{}/{}", p + 1, q);
                assert!(!grade(&question, &parse_response(&off, QuestionType::Numeric)));
            }
        }
    }

    fn record(exam: &str, qid: &str, text: &str) -> ResponseRecord {
        ResponseRecord {
            exam_id: exam.into(),
            question_id: qid.into(),
            raw_text: text.into(),
            latency_ms: 0,
            attempts: 1,
            model_name: "mock".into(),
            timestamp: "t".into(),
        }
    }

    fn tiny_bank() -> (QuestionBank, Exam) {
        let mut qs = Vec::new();
        for i in 0..54 {
            let mut q = if i < 44 {
                mcq(&['A'])
            } else {
                numeric(vec![Answer::Value(Number::Integer(i))])
            };
            q.id = format!("q{i}");
            q.question_index = i as u32 + 1;
            q.section_length = 60;
            qs.push(q);
        }
        let bank = QuestionBank::new(qs, Default::default()).unwrap();
        let exam = crate::sampler::sample_exam_set(&bank, 2008, 1, 0).unwrap().exams.remove(0);
        (bank, exam)
    }

    fn correct_text(bank: &QuestionBank, qid: &str) -> String {
        bank.get(qid).unwrap().answers[0].to_string()
    }

    #[test]
    fn score_all_correct_and_missing() {
        let (bank, exam) = tiny_bank();
        let responses: Vec<ResponseRecord> = exam
            .question_ids
            .iter()
            .map(|q| record(&exam.exam_id, q, &correct_text(&bank, q)))
            .collect();
        let s = score_exam(&exam, &responses, &bank).unwrap();
        assert_eq!((s.n_correct, s.total, s.proportion), (54, 54, 1.0));
        assert_eq!((s.mcq_correct, s.numeric_correct), (44, 10));

        let missing = &responses[1..];
        assert!(matches!(
            score_exam(&exam, missing, &bank),
            Err(JudgeError::MissingResponse { .. })
        ));
        let mut extra = responses.clone();
        extra.push(responses[0].clone());
        assert!(matches!(
            score_exam(&exam, &extra, &bank),
            Err(JudgeError::ExtraResponse { .. })
        ));
    }

    fn score(n: usize, total: usize) -> ExamScore {
        ExamScore {
            exam_id: "e".into(),
            year: 2008,
            n_correct: n,
            total,
            proportion: n as f64 / total as f64,
            mcq_correct: n,
            mcq_total: total,
            numeric_correct: 0,
            numeric_total: 0,
        }
    }

    #[test]
    fn aggregation_cases() {
        let same: Vec<ExamScore> = (0..50).map(|_| score(30, 54)).collect();
        let y = aggregate_year(&same).unwrap();
        assert_eq!((y.mu, y.se_mu), (30.0, 0.0));

        let two = [score(10, 54), score(20, 54)];
        let y = aggregate_year(&two).unwrap();
        assert_eq!(y.mu, 15.0);
        assert!((y.se_mu - 5.0).abs() < 1e-12);

        assert!(matches!(aggregate_year(&two[..1]), Err(JudgeError::TooFewExams(1))));
        let mut mixed = two.to_vec();
        mixed[1].year = 2009;
        assert!(matches!(aggregate_year(&mixed), Err(JudgeError::MixedYears)));
    }

    proptest::proptest! {
        #[test]
        fn aggregation_matches_brute_force(ns in proptest::collection::vec(0usize..=58, 2..60)) {
            let scores: Vec<ExamScore> = ns.iter().map(|&n| score(n, 58)).collect();
            let y = aggregate_year(&scores).unwrap();
            let k = ns.len() as f64;
            let m = ns.iter().sum::<usize>() as f64 / k;
            let var = ns.iter().map(|&n| (n as f64 - m).powi(2)).sum::<f64>() / (k - 1.0);
            proptest::prop_assert!((y.mu - m).abs() < 1e-9);
            proptest::prop_assert!((y.se_mu - (var / k).sqrt()).abs() < 1e-9);
            proptest::prop_assert!((y.nu - m / 58.0).abs() < 1e-12);
            for s in &scores {
                // p * total == n exactly, checked with integer cross-multiplication.
                proptest::prop_assert!(s.n_correct <= s.total);
                proptest::prop_assert_eq!((s.proportion * s.total as f64).round() as usize, s.n_correct);
            }
        }

        #[test]
        fn fixing_a_wrong_answer_never_lowers_the_score(flip in 0usize..54, wrong in proptest::collection::vec(proptest::bool::ANY, 54)) {
            let (bank, exam) = tiny_bank();
            let make = |wrong: &[bool]| -> Vec<ResponseRecord> {
                exam.question_ids.iter().zip(wrong).map(|(q, &w)| {
                    let text = if w { "zzz".to_string() } else { correct_text(&bank, q) };
                    record(&exam.exam_id, q, &text)
                }).collect()
            };
            let before = score_exam(&exam, &make(&wrong), &bank).unwrap();
            let mut fixed = wrong.clone();
            fixed[flip] = false;
            let after = score_exam(&exam, &make(&fixed), &bank).unwrap();
            proptest::prop_assert!(after.n_correct >= before.n_correct);
        }
    }
}
