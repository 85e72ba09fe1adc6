//! Bootstrap exam sampling.
//!
//! Each exam draws, per question-type stratum, exactly the number of questions
//! the year's format declares, uniformly and without replacement. Different
//! exams of the same year are drawn independently and may share questions.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{BankError, Composition, Question, QuestionBank, QuestionType};
use crate::seeds;

/// Default number of exams drawn per year.
pub const DEFAULT_EXAMS_PER_YEAR: usize = 50;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("year {year}: need {need} {qtype} questions, bank has {have}")]
    InsufficientQuestions {
        year: u16,
        qtype: QuestionType,
        need: usize,
        have: usize,
    },
    #[error("exam count must be positive")]
    ZeroCount,
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad exam record in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exam {
    pub exam_id: String,
    pub year: u16,
    /// Ordered by section and position within section.
    pub question_ids: Vec<String>,
    pub composition: Composition,
    pub seed_trace: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamSet {
    pub year: u16,
    pub exams: Vec<Exam>,
}

impl ExamSet {
    pub fn cardinality(&self) -> usize {
        self.exams.len()
    }

    /// Writes one exam per line.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), SampleError> {
        let io_err = |source| SampleError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        for exam in &self.exams {
            let line = serde_json::to_string(exam).expect("exam serializes");
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn read_jsonl(path: &Path) -> Result<ExamSet, SampleError> {
        let io_err = |source| SampleError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = std::fs::File::open(path).map_err(io_err)?;
        let mut exams = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let exam: Exam = serde_json::from_str(&line).map_err(|source| SampleError::Json {
                path: path.display().to_string(),
                source,
            })?;
            exams.push(exam);
        }
        let year = exams.first().map(|e| e.year).unwrap_or_default();
        Ok(ExamSet { year, exams })
    }
}

/// Draws `count` exams for `year`.
///
/// Output is a pure function of `(bank digest, year, count, seed)`.
pub fn sample_exam_set(
    bank: &QuestionBank,
    year: u16,
    count: usize,
    seed: u64,
) -> Result<ExamSet, SampleError> {
    if count == 0 {
        return Err(SampleError::ZeroCount);
    }
    let comp = bank.format(year)?.composition();
    let pool = bank.questions(year);
    let strata: Vec<(QuestionType, Vec<&Question>)> = [QuestionType::Mcq, QuestionType::Numeric]
        .into_iter()
        .map(|t| (t, pool.iter().filter(|q| q.qtype == t).collect()))
        .collect();
    for (qtype, members) in &strata {
        let need = comp.count(*qtype);
        if members.len() < need {
            return Err(SampleError::InsufficientQuestions {
                year,
                qtype: *qtype,
                need,
                have: members.len(),
            });
        }
    }
    let year_seed = seeds::derive(seed, &format!("{}/{year}", bank.digest()));
    let exams = (0..count)
        .map(|j| {
            let seed_trace = seeds::derive(year_seed, &format!("exam/{j}"));
            let mut rng = ChaCha8Rng::seed_from_u64(seed_trace);
            let mut chosen: Vec<&Question> = Vec::with_capacity(comp.total());
            for (qtype, members) in &strata {
                let picks = index::sample(&mut rng, members.len(), comp.count(*qtype));
                chosen.extend(picks.into_iter().map(|i| members[i]));
            }
            chosen.sort_by(|a, b| {
                (a.section_index, a.question_index, &a.source_doc, &a.id).cmp(&(
                    b.section_index,
                    b.question_index,
                    &b.source_doc,
                    &b.id,
                ))
            });
            Exam {
                exam_id: format!("{year}-{:03}", j + 1),
                year,
                question_ids: chosen.into_iter().map(|q| q.id.clone()).collect(),
                composition: comp,
                seed_trace,
            }
        })
        .collect();
    Ok(ExamSet { year, exams })
}

/// Counts the exam's questions by type, looking each one up in the bank.
pub fn composition(exam: &Exam, bank: &QuestionBank) -> Composition {
    let mut comp = Composition { mcq: 0, numeric: 0 };
    for id in &exam.question_ids {
        match bank.get(id).map(|q| q.qtype) {
            Some(QuestionType::Mcq) => comp.mcq += 1,
            Some(QuestionType::Numeric) => comp.numeric += 1,
            None => {}
        }
    }
    comp
}

/// True when no question appears twice.
pub fn is_unique(exam: &Exam) -> bool {
    let set: HashSet<&String> = exam.question_ids.iter().collect();
    set.len() == exam.question_ids.len()
}
