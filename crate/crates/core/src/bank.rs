//! Question bank and student cohort statistics.
//!
//! Both inputs are CSV files with a required header row. The question bank may
//! start with a composition directive overriding the per-era question-type
//! split used by the sampler:
//!
//! ```text
//! #!composition pre=44/10 post=45/13
//! id,year,source,section,question_index,section_length,type,calculator,text,option_a,...
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::{FIRST_YEAR, LAST_PRE_YEAR, LAST_YEAR, SCALE_MAX, SCALE_MIN};

/// Marker reserved for questions that depend on a figure or large table.
pub const FIGURE_MARKER: &str = "[FIGURE]";

const OPTION_LABELS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];

const QUESTION_HEADER: [&str; 15] = [
    "id",
    "year",
    "source",
    "section",
    "question_index",
    "section_length",
    "type",
    "calculator",
    "text",
    "option_a",
    "option_b",
    "option_c",
    "option_d",
    "option_e",
    "answers",
];

#[derive(Debug, Error)]
pub enum BankError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("year {year}: need {need} {qtype} questions for one exam, have {have}")]
    InsufficientQuestions {
        year: u16,
        qtype: QuestionType,
        need: usize,
        have: usize,
    },
    #[error("year {0} outside 2008-2023")]
    YearOutOfRange(i64),
    #[error("line {line}: national rows need both sd and n")]
    MissingPopulationFields { line: u64 },
    #[error("bad composition directive: {0}")]
    BadDirective(String),
}

fn malformed(line: u64, reason: impl Into<String>) -> BankError {
    BankError::MalformedRow {
        line,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuestionType {
    #[serde(rename = "MCQ")]
    Mcq,
    Numeric,
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionType::Mcq => "MCQ",
            QuestionType::Numeric => "Numeric",
        })
    }
}

impl FromStr for QuestionType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mcq" => Ok(QuestionType::Mcq),
            "numeric" => Ok(QuestionType::Numeric),
            other => Err(format!("unknown question type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Calculator {
    Allowed,
    Prohibited,
}

impl fmt::Display for Calculator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Calculator::Allowed => "Allowed",
            Calculator::Prohibited => "Prohibited",
        })
    }
}

impl FromStr for Calculator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "allowed" => Ok(Calculator::Allowed),
            "prohibited" => Ok(Calculator::Prohibited),
            other => Err(format!("unknown calculator policy {other:?}")),
        }
    }
}

/// A numeric literal from the answer grammar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Number {
    Integer(i64),
    Fraction(i64, i64),
    Decimal(f64),
}

impl Number {
    pub fn value(&self) -> f64 {
        match *self {
            Number::Integer(i) => i as f64,
            Number::Fraction(p, q) => p as f64 / q as f64,
            Number::Decimal(d) => d,
        }
    }

    pub fn is_integer(&self) -> bool {
        matches!(self, Number::Integer(_))
    }
}

impl FromStr for Number {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty number".into());
        }
        if let Some((p, q)) = s.split_once('/') {
            let p: i64 = p.trim().parse().map_err(|_| format!("bad numerator in {s:?}"))?;
            let q: i64 = q.trim().parse().map_err(|_| format!("bad denominator in {s:?}"))?;
            if q == 0 {
                return Err(format!("zero denominator in {s:?}"));
            }
            return Ok(Number::Fraction(p, q));
        }
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Number::Integer(i));
        }
        let digits_ok = s
            .trim_start_matches(['-', '+'])
            .chars()
            .all(|c| c.is_ascii_digit() || c == '.');
        if digits_ok && s.chars().filter(|&c| c == '.').count() == 1 {
            if let Ok(d) = s.parse::<f64>() {
                return Ok(Number::Decimal(d));
            }
        }
        Err(format!("not a number: {s:?}"))
    }
}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Number::Integer(i) => write!(f, "{i}"),
            Number::Fraction(p, q) => write!(f, "{p}/{q}"),
            Number::Decimal(d) => {
                let s = format!("{d}");
                if s.contains('.') {
                    f.write_str(&s)
                } else {
                    write!(f, "{s}.0")
                }
            }
        }
    }
}

/// One acceptable answer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Answer {
    Letter(char),
    Value(Number),
    /// Closed interval `lo..hi`.
    Interval(Number, Number),
}

impl Answer {
    fn parse(raw: &str, qtype: QuestionType) -> Result<Self, String> {
        let raw = raw.trim();
        match qtype {
            QuestionType::Mcq => {
                let mut chars = raw.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) if OPTION_LABELS.contains(&c.to_ascii_uppercase()) => {
                        Ok(Answer::Letter(c.to_ascii_uppercase()))
                    }
                    _ => Err(format!("MCQ answer must be a letter A-E, got {raw:?}")),
                }
            }
            QuestionType::Numeric => {
                if let Some((lo, hi)) = raw.split_once("..") {
                    let lo: Number = lo.parse()?;
                    let hi: Number = hi.parse()?;
                    if lo.value() > hi.value() {
                        return Err(format!("empty interval {raw:?}"));
                    }
                    Ok(Answer::Interval(lo, hi))
                } else {
                    Ok(Answer::Value(raw.parse()?))
                }
            }
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Letter(c) => write!(f, "{c}"),
            Answer::Value(n) => write!(f, "{n}"),
            Answer::Interval(lo, hi) => write!(f, "{lo}..{hi}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: char,
    pub text: String,
}

/// One transcribed SAT item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub year: u16,
    pub source_doc: String,
    pub section_index: u32,
    /// 1-based position within the section.
    pub question_index: u32,
    pub section_length: u32,
    pub qtype: QuestionType,
    pub calculator: Calculator,
    pub text: String,
    pub options: Vec<AnswerOption>,
    pub answers: Vec<Answer>,
    pub difficulty_rating: Option<u8>,
}

impl Question {
    /// Position through the section in `[0, 1]`.
    pub fn progress(&self) -> f64 {
        self.question_index as f64 / self.section_length as f64
    }

    /// Checks every row-level invariant.
    pub fn validate(&self) -> Result<(), String> {
        if !(FIRST_YEAR..=LAST_YEAR).contains(&self.year) {
            return Err(format!("year {} outside {FIRST_YEAR}-{LAST_YEAR}", self.year));
        }
        if self.id.trim().is_empty() {
            return Err("empty id".into());
        }
        if self.section_index == 0 || self.section_length == 0 || self.question_index == 0 {
            return Err("section, question_index and section_length must be positive".into());
        }
        if self.question_index > self.section_length {
            return Err(format!(
                "question_index {} exceeds section_length {}",
                self.question_index, self.section_length
            ));
        }
        if self.answers.is_empty() {
            return Err("empty answer set".into());
        }
        if self.text.contains(FIGURE_MARKER)
            || self.options.iter().any(|o| o.text.contains(FIGURE_MARKER))
        {
            return Err("question depends on a figure".into());
        }
        match self.qtype {
            QuestionType::Mcq => {
                if self.options.len() < 2 {
                    return Err(format!("MCQ has {} options", self.options.len()));
                }
                let labels: BTreeSet<char> = self.options.iter().map(|o| o.label).collect();
                if labels.len() != self.options.len() {
                    return Err("duplicate option labels".into());
                }
                for a in &self.answers {
                    match a {
                        Answer::Letter(c) if labels.contains(c) => {}
                        Answer::Letter(c) => {
                            return Err(format!("answer {c} is not one of the options"))
                        }
                        other => return Err(format!("MCQ answer {other} is not a letter")),
                    }
                }
            }
            QuestionType::Numeric => {
                if !self.options.is_empty() {
                    return Err("numeric question has options".into());
                }
                if self.answers.iter().any(|a| matches!(a, Answer::Letter(_))) {
                    return Err("numeric question has a letter answer".into());
                }
            }
        }
        if let Some(r) = self.difficulty_rating {
            if !(1..=5).contains(&r) {
                return Err(format!("difficulty {r} outside 1-5"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Era {
    /// 2008-2016.
    Pre,
    /// 2017-2023.
    Post,
}

impl Era {
    pub fn of_year(year: u16) -> Era {
        if year <= LAST_PRE_YEAR {
            Era::Pre
        } else {
            Era::Post
        }
    }

    pub fn default_total(self) -> usize {
        match self {
            Era::Pre => 54,
            Era::Post => 58,
        }
    }
}

/// Question-type split of one exam.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub mcq: usize,
    pub numeric: usize,
}

impl Composition {
    pub fn total(&self) -> usize {
        self.mcq + self.numeric
    }

    pub fn count(&self, qtype: QuestionType) -> usize {
        match qtype {
            QuestionType::Mcq => self.mcq,
            QuestionType::Numeric => self.numeric,
        }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.mcq, self.numeric)
    }
}

/// Per-era compositions. Defaults are 44/10 (pre) and 45/13 (post).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub pre: Composition,
    pub post: Composition,
}

impl Default for CompositionTable {
    fn default() -> Self {
        CompositionTable {
            pre: Composition { mcq: 44, numeric: 10 },
            post: Composition { mcq: 45, numeric: 13 },
        }
    }
}

impl CompositionTable {
    pub fn for_era(&self, era: Era) -> Composition {
        match era {
            Era::Pre => self.pre,
            Era::Post => self.post,
        }
    }

    fn directive(&self) -> String {
        format!("#!composition pre={} post={}", self.pre, self.post)
    }

    fn parse_directive(line: &str) -> Result<Self, BankError> {
        let bad = || BankError::BadDirective(line.to_string());
        let body = line.trim().strip_prefix("#!composition").ok_or_else(bad)?;
        let mut table = CompositionTable::default();
        for part in body.split_whitespace() {
            let (era, split) = part.split_once('=').ok_or_else(bad)?;
            let (m, n) = split.split_once('/').ok_or_else(bad)?;
            let comp = Composition {
                mcq: m.parse().map_err(|_| bad())?,
                numeric: n.parse().map_err(|_| bad())?,
            };
            match era {
                "pre" => table.pre = comp,
                "post" => table.post = comp,
                _ => return Err(bad()),
            }
        }
        for era in [Era::Pre, Era::Post] {
            let total = table.for_era(era).total();
            if total != era.default_total() {
                log::warn!(
                    "composition for {era:?} totals {total}, not the standard {}",
                    era.default_total()
                );
            }
        }
        Ok(table)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamFormat {
    pub era: Era,
    pub total_questions: usize,
    pub mcq_count: usize,
    pub numeric_count: usize,
    /// Pre-era exams penalised wrong answers; recorded only, never applied.
    pub negative_marking: bool,
}

impl ExamFormat {
    pub fn composition(&self) -> Composition {
        Composition {
            mcq: self.mcq_count,
            numeric: self.numeric_count,
        }
    }

    fn new(era: Era, comp: Composition) -> Self {
        ExamFormat {
            era,
            total_questions: comp.total(),
            mcq_count: comp.mcq,
            numeric_count: comp.numeric,
            negative_marking: era == Era::Pre,
        }
    }
}

/// Default exam format for a year: 54 questions up to 2016, 58 from 2017.
pub fn exam_format(year: i64) -> Result<ExamFormat, BankError> {
    if !(FIRST_YEAR as i64..=LAST_YEAR as i64).contains(&year) {
        return Err(BankError::YearOutOfRange(year));
    }
    let era = Era::of_year(year as u16);
    Ok(ExamFormat::new(era, CompositionTable::default().for_era(era)))
}

/// Immutable, validated question bank indexed by year.
#[derive(Debug, Clone)]
pub struct QuestionBank {
    by_year: BTreeMap<u16, Vec<Question>>,
    index: HashMap<String, (u16, usize)>,
    compositions: CompositionTable,
    digest: String,
}

impl QuestionBank {
    /// Builds a bank from already-parsed questions, enforcing all invariants.
    pub fn new(questions: Vec<Question>, compositions: CompositionTable) -> Result<Self, BankError> {
        let mut by_year: BTreeMap<u16, Vec<Question>> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (i, q) in questions.into_iter().enumerate() {
            q.validate().map_err(|r| malformed(i as u64 + 2, r))?;
            if !seen.insert(q.id.clone()) {
                return Err(BankError::DuplicateId(q.id));
            }
            by_year.entry(q.year).or_default().push(q);
        }
        for (year, qs) in by_year.iter_mut() {
            qs.sort_by(|a, b| exam_order(a).cmp(&exam_order(b)));
            let comp = compositions.for_era(Era::of_year(*year));
            for qtype in [QuestionType::Mcq, QuestionType::Numeric] {
                let have = qs.iter().filter(|q| q.qtype == qtype).count();
                let need = comp.count(qtype);
                if have < need {
                    return Err(BankError::InsufficientQuestions {
                        year: *year,
                        qtype,
                        need,
                        have,
                    });
                }
            }
        }
        let mut index = HashMap::new();
        for (year, qs) in &by_year {
            for (i, q) in qs.iter().enumerate() {
                index.insert(q.id.clone(), (*year, i));
            }
        }
        let mut bank = QuestionBank {
            by_year,
            index,
            compositions,
            digest: String::new(),
        };
        bank.digest = hex::encode(Sha256::digest(bank.to_csv_string()?.as_bytes()));
        Ok(bank)
    }

    pub fn years(&self) -> impl Iterator<Item = u16> + '_ {
        self.by_year.keys().copied()
    }

    pub fn questions(&self, year: u16) -> &[Question] {
        self.by_year.get(&year).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Question> {
        self.by_year.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.index.get(id).map(|&(y, i)| &self.by_year[&y][i])
    }

    pub fn compositions(&self) -> CompositionTable {
        self.compositions
    }

    /// Exam format for `year` using this bank's compositions.
    pub fn format(&self, year: u16) -> Result<ExamFormat, BankError> {
        exam_format(year as i64)?;
        let era = Era::of_year(year);
        Ok(ExamFormat::new(era, self.compositions.for_era(era)))
    }

    /// `(mcq, numeric)` counts available for a year.
    pub fn counts(&self, year: u16) -> (usize, usize) {
        let qs = self.questions(year);
        let mcq = qs.iter().filter(|q| q.qtype == QuestionType::Mcq).count();
        (mcq, qs.len() - mcq)
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Canonical CSV serialization, reloadable by [`load_question_bank`].
    pub fn to_csv_string(&self) -> Result<String, BankError> {
        let mut out = self.compositions.directive();
        out.push('\n');
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<&str> = QUESTION_HEADER.to_vec();
        header.push("difficulty");
        w.write_record(&header)?;
        for q in self.iter() {
            let mut row = vec![
                q.id.clone(),
                q.year.to_string(),
                q.source_doc.clone(),
                q.section_index.to_string(),
                q.question_index.to_string(),
                q.section_length.to_string(),
                q.qtype.to_string(),
                q.calculator.to_string(),
                q.text.clone(),
            ];
            for label in OPTION_LABELS {
                row.push(
                    q.options
                        .iter()
                        .find(|o| o.label == label)
                        .map(|o| o.text.clone())
                        .unwrap_or_default(),
                );
            }
            row.push(
                q.answers
                    .iter()
                    .map(|a| a.to_string())
                    .collect::<Vec<_>>()
                    .join("|"),
            );
            row.push(q.difficulty_rating.map(|r| r.to_string()).unwrap_or_default());
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| BankError::Io {
            path: "<memory>".into(),
            source: e.into_error(),
        })?;
        out.push_str(&String::from_utf8_lossy(&bytes));
        Ok(out)
    }
}

fn exam_order(q: &Question) -> (u32, u32, &str, &str) {
    (q.section_index, q.question_index, q.source_doc.as_str(), q.id.as_str())
}

fn read_text(path: &Path) -> Result<String, BankError> {
    std::fs::read_to_string(path).map_err(|source| BankError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads and validates a question bank CSV file.
pub fn load_question_bank(path: impl AsRef<Path>) -> Result<QuestionBank, BankError> {
    parse_question_bank(&read_text(path.as_ref())?)
}

/// Parses question bank CSV text.
pub fn parse_question_bank(text: &str) -> Result<QuestionBank, BankError> {
    let mut compositions = CompositionTable::default();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if line.starts_with("#!composition") {
            compositions = CompositionTable::parse_directive(line)?;
        }
    }
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, BankError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| malformed(1, format!("missing column {name:?}")))
    };
    let cols: Vec<usize> = QUESTION_HEADER
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;
    let difficulty_col = headers.iter().position(|h| h.trim() == "difficulty");

    let mut questions = Vec::new();
    let mut seen = BTreeSet::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(cols[i]).unwrap_or("").to_string();
        let int = |i: usize| -> Result<i64, BankError> {
            field(i)
                .trim()
                .parse::<i64>()
                .map_err(|_| malformed(line, format!("{} is not an integer", QUESTION_HEADER[i])))
        };
        let year = int(1)?;
        if !(FIRST_YEAR as i64..=LAST_YEAR as i64).contains(&year) {
            return Err(malformed(line, format!("year {year} outside {FIRST_YEAR}-{LAST_YEAR}")));
        }
        let positive = |i: usize| -> Result<u32, BankError> {
            let v = int(i)?;
            u32::try_from(v)
                .ok()
                .filter(|v| *v > 0)
                .ok_or_else(|| malformed(line, format!("{} must be positive", QUESTION_HEADER[i])))
        };
        let qtype: QuestionType = field(6).parse().map_err(|e: String| malformed(line, e))?;
        let calculator: Calculator = field(7).parse().map_err(|e: String| malformed(line, e))?;
        let options: Vec<AnswerOption> = OPTION_LABELS
            .iter()
            .enumerate()
            .filter_map(|(k, &label)| {
                let text = field(9 + k);
                (!text.trim().is_empty()).then_some(AnswerOption { label, text })
            })
            .collect();
        let answers = field(14)
            .split('|')
            .filter(|a| !a.trim().is_empty())
            .map(|a| Answer::parse(a, qtype))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| malformed(line, e))?;
        let difficulty_rating = match difficulty_col.and_then(|c| record.get(c)) {
            Some(s) if !s.trim().is_empty() => Some(
                s.trim()
                    .parse::<u8>()
                    .map_err(|_| malformed(line, "difficulty is not an integer"))?,
            ),
            _ => None,
        };
        let q = Question {
            id: field(0).trim().to_string(),
            year: year as u16,
            source_doc: field(2),
            section_index: positive(3)?,
            question_index: positive(4)?,
            section_length: positive(5)?,
            qtype,
            calculator,
            text: field(8),
            options,
            answers,
            difficulty_rating,
        };
        q.validate().map_err(|r| malformed(line, r))?;
        if q.qtype == QuestionType::Mcq && !(4..=5).contains(&q.options.len()) {
            log::warn!("line {line}: MCQ {} has {} options", q.id, q.options.len());
        }
        if !seen.insert(q.id.clone()) {
            return Err(BankError::DuplicateId(q.id));
        }
        questions.push(q);
    }
    QuestionBank::new(questions, compositions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    National,
    State,
    District,
}

impl FromStr for Level {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "national" => Ok(Level::National),
            "state" => Ok(Level::State),
            "district" => Ok(Level::District),
            other => Err(format!("unknown level {other:?}")),
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format!("{self:?}").to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    All,
    Asian,
    Black,
    White,
    Male,
    Female,
}

impl FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Group::All),
            "asian" => Ok(Group::Asian),
            "black" => Ok(Group::Black),
            "white" => Ok(Group::White),
            "male" => Ok(Group::Male),
            "female" => Ok(Group::Female),
            other => Err(format!("unknown group {other:?}")),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format!("{self:?}").to_ascii_lowercase())
    }
}

/// Student score summary for one (year, unit, group).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub year: u16,
    pub level: Level,
    pub unit_id: String,
    pub group: Group,
    pub mean_score: f64,
    pub sd: Option<f64>,
    pub n: Option<u64>,
    /// Pre-2017 scores still on the old scale.
    pub needs_concordance: bool,
}

#[derive(Debug, Deserialize)]
struct CohortRow {
    year: String,
    level: String,
    unit_id: String,
    group: String,
    mean: String,
    #[serde(default)]
    sd: String,
    #[serde(default)]
    n: String,
}

/// Loads the cohort statistics CSV (`year,level,unit_id,group,mean,sd,n`).
pub fn load_cohort_stats(path: impl AsRef<Path>) -> Result<Vec<CohortStats>, BankError> {
    parse_cohort_stats(&read_text(path.as_ref())?)
}

pub fn parse_cohort_stats(text: &str) -> Result<Vec<CohortStats>, BankError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: CohortRow = record
            .deserialize(Some(&headers))
            .map_err(|e| malformed(line, e.to_string()))?;
        let year: i64 = row
            .year
            .parse()
            .map_err(|_| malformed(line, "year is not an integer"))?;
        if !(FIRST_YEAR as i64..=LAST_YEAR as i64).contains(&year) {
            return Err(malformed(line, format!("year {year} outside {FIRST_YEAR}-{LAST_YEAR}")));
        }
        let level: Level = row.level.parse().map_err(|e: String| malformed(line, e))?;
        let group: Group = row.group.parse().map_err(|e: String| malformed(line, e))?;
        let mean_score: f64 = row
            .mean
            .parse()
            .map_err(|_| malformed(line, "mean is not a number"))?;
        if !(SCALE_MIN..=SCALE_MAX).contains(&mean_score) {
            return Err(malformed(line, format!("mean {mean_score} outside 200-800")));
        }
        let sd = match row.sd.as_str() {
            "" => None,
            s => {
                let v: f64 = s.parse().map_err(|_| malformed(line, "sd is not a number"))?;
                if !(v > 0.0) {
                    return Err(malformed(line, "sd must be positive"));
                }
                Some(v)
            }
        };
        let n = match row.n.as_str() {
            "" => None,
            s => {
                let v: u64 = s.parse().map_err(|_| malformed(line, "n is not a count"))?;
                if v == 0 {
                    return Err(malformed(line, "n must be positive"));
                }
                Some(v)
            }
        };
        if level == Level::National && (sd.is_none() || n.is_none()) {
            return Err(BankError::MissingPopulationFields { line });
        }
        if row.unit_id.is_empty() {
            return Err(malformed(line, "empty unit_id"));
        }
        out.push(CohortStats {
            year: year as u16,
            level,
            unit_id: row.unit_id,
            group,
            mean_score,
            sd,
            n,
            needs_concordance: Era::of_year(year as u16) == Era::Pre,
        });
    }
    Ok(out)
}
