//! The 62-statement instrument and its scoring.
//!
//! A respondent answers every statement on a four-point scale with no neutral
//! option. Each (statement, choice) cell contributes a delta to the economic
//! and social running sums; an affine normalizer per axis maps the sums onto
//! [-10, 10]. The official instrument's weights are unpublished, so the
//! bundled matrix is a hand-built approximation with the same shape and
//! normalization contract; the scoring engine is matrix-agnostic and every
//! matrix is bounds-checked at load so no conceivable answer sheet can leave
//! the plane.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Condition;
use crate::error::{Error, Result};

pub const STATEMENT_COUNT: usize = 62;

/// Thematic section of the instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementCategory {
    /// How the country relates to the world (7 statements).
    NationalGlobal,
    /// Markets, tax, and property (14 statements).
    Economic,
    /// Personal conduct and social values (18 statements).
    PersonalSocial,
    /// State power and civic order (12 statements).
    Societal,
    /// Religion and the supernatural (5 statements).
    Religious,
    /// Sexuality and its regulation (6 statements).
    Sex,
}

impl StatementCategory {
    pub const ALL: [StatementCategory; 6] = [
        StatementCategory::NationalGlobal,
        StatementCategory::Economic,
        StatementCategory::PersonalSocial,
        StatementCategory::Societal,
        StatementCategory::Religious,
        StatementCategory::Sex,
    ];

    /// Number of statements the instrument assigns to this category.
    pub fn expected_count(self) -> usize {
        match self {
            StatementCategory::NationalGlobal => 7,
            StatementCategory::Economic => 14,
            StatementCategory::PersonalSocial => 18,
            StatementCategory::Societal => 12,
            StatementCategory::Religious => 5,
            StatementCategory::Sex => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    /// 1-based instrument position.
    pub id: u8,
    pub category: StatementCategory,
    pub text: String,
}

/// The four allowed answers. There is deliberately no neutral option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerChoice {
    StronglyAgree,
    Agree,
    Disagree,
    StronglyDisagree,
}

impl AnswerChoice {
    pub const ALL: [AnswerChoice; 4] = [
        AnswerChoice::StronglyAgree,
        AnswerChoice::Agree,
        AnswerChoice::Disagree,
        AnswerChoice::StronglyDisagree,
    ];

    /// The exact surface string the endpoint is constrained to produce.
    pub fn canonical(self) -> &'static str {
        match self {
            AnswerChoice::StronglyAgree => "Strongly agree",
            AnswerChoice::Agree => "Agree",
            AnswerChoice::Disagree => "Disagree",
            AnswerChoice::StronglyDisagree => "Strongly disagree",
        }
    }

    /// Index into a scoring matrix row, in `ALL` order.
    pub fn index(self) -> usize {
        match self {
            AnswerChoice::StronglyAgree => 0,
            AnswerChoice::Agree => 1,
            AnswerChoice::Disagree => 2,
            AnswerChoice::StronglyDisagree => 3,
        }
    }

    /// Canonical surface strings for guided-choice decoding requests.
    pub fn canonical_strings() -> Vec<String> {
        Self::ALL.iter().map(|c| c.canonical().to_string()).collect()
    }
}

impl fmt::Display for AnswerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.canonical())
    }
}

/// Maps raw model output onto a choice: trimmed, case-insensitive, and
/// full-string, so "strongly agree" never half-matches "Agree". Anything
/// else is unparseable.
pub fn parse_answer(raw: &str) -> Option<AnswerChoice> {
    let normalized = raw.trim().to_ascii_lowercase();
    AnswerChoice::ALL
        .into_iter()
        .find(|c| c.canonical().to_ascii_lowercase() == normalized)
}

/// One persona's answers across the instrument. Statements are indexed by
/// instrument id; a sheet is complete when all 62 are present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerSheet {
    pub persona_id: u32,
    pub condition: Condition,
    answers: [Option<AnswerChoice>; STATEMENT_COUNT],
}

impl AnswerSheet {
    pub fn new(persona_id: u32, condition: Condition) -> Self {
        AnswerSheet {
            persona_id,
            condition,
            answers: [None; STATEMENT_COUNT],
        }
    }

    pub fn set(&mut self, statement_id: u8, choice: AnswerChoice) -> Result<()> {
        let idx = Self::slot(statement_id)?;
        self.answers[idx] = Some(choice);
        Ok(())
    }

    pub fn get(&self, statement_id: u8) -> Option<AnswerChoice> {
        Self::slot(statement_id).ok().and_then(|i| self.answers[i])
    }

    pub fn is_complete(&self) -> bool {
        self.answers.iter().all(Option::is_some)
    }

    pub fn answered(&self) -> usize {
        self.answers.iter().filter(|a| a.is_some()).count()
    }

    /// Ids of unanswered statements, ascending.
    pub fn missing(&self) -> Vec<u8> {
        self.answers
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| (i + 1) as u8)
            .collect()
    }

    fn slot(statement_id: u8) -> Result<usize> {
        if (1..=STATEMENT_COUNT as u8).contains(&statement_id) {
            Ok(statement_id as usize - 1)
        } else {
            Err(Error::data(format!(
                "statement id {statement_id} outside 1..={STATEMENT_COUNT}"
            )))
        }
    }
}

/// A scored position: `econ` on the left–right axis, `social` on the
/// libertarian–authoritarian axis, both in [-10, 10].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompassPoint {
    pub econ: f64,
    pub social: f64,
}

impl CompassPoint {
    pub fn new(econ: f64, social: f64) -> Self {
        CompassPoint { econ, social }
    }

    pub fn distance(&self, other: &CompassPoint) -> f64 {
        (self.econ - other.econ).hypot(self.social - other.social)
    }
}

/// Per-cell deltas plus per-axis affine normalizers.
///
/// score_axis = (Σ delta_axis + offset_axis) / scale_axis, summed over all 62
/// statements. Loading validates that the extreme column choices on each axis
/// stay inside [-10, 10], which bounds every possible sheet.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringMatrix {
    pub econ_offset: f64,
    pub econ_scale: f64,
    pub social_offset: f64,
    pub social_scale: f64,
    /// cells[statement_id - 1][choice.index()] = (econ_delta, social_delta)
    cells: Vec<[(f64, f64); 4]>,
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    econ_offset: f64,
    econ_scale: f64,
    social_offset: f64,
    social_scale: f64,
    statements: BTreeMap<String, BTreeMap<String, (f64, f64)>>,
}

const CHOICE_KEYS: [&str; 4] = ["strongly_agree", "agree", "disagree", "strongly_disagree"];

impl ScoringMatrix {
    /// The bundled approximation matrix.
    pub fn builtin() -> ScoringMatrix {
        Self::from_json(include_str!("../assets/matrix.default.json"), "<builtin>")
            .expect("bundled matrix must be valid")
    }

    pub fn from_json(raw: &str, origin: &str) -> Result<ScoringMatrix> {
        let file: MatrixFile = serde_json::from_str(raw)
            .map_err(|e| Error::data(format!("matrix {origin}: {e}")))?;
        let mut cells = Vec::with_capacity(STATEMENT_COUNT);
        for id in 1..=STATEMENT_COUNT {
            let row = file.statements.get(&id.to_string()).ok_or_else(|| {
                Error::data(format!("matrix {origin}: missing statement {id}"))
            })?;
            let mut parsed = [(0.0, 0.0); 4];
            for (k, key) in CHOICE_KEYS.iter().enumerate() {
                let cell = row.get(*key).ok_or_else(|| {
                    Error::data(format!("matrix {origin}: missing cell ({id}, {key})"))
                })?;
                if !cell.0.is_finite() || !cell.1.is_finite() {
                    return Err(Error::data(format!(
                        "matrix {origin}: non-finite delta in cell ({id}, {key})"
                    )));
                }
                parsed[k] = *cell;
            }
            cells.push(parsed);
        }
        if let Some(extra) = file
            .statements
            .keys()
            .find(|k| !matches!(k.parse::<usize>(), Ok(n) if (1..=STATEMENT_COUNT).contains(&n)))
        {
            return Err(Error::data(format!(
                "matrix {origin}: unexpected statement key {extra:?}"
            )));
        }
        let matrix = ScoringMatrix {
            econ_offset: file.econ_offset,
            econ_scale: file.econ_scale,
            social_offset: file.social_offset,
            social_scale: file.social_scale,
            cells,
        };
        matrix.validate(origin)?;
        Ok(matrix)
    }

    fn validate(&self, origin: &str) -> Result<()> {
        for (axis, scale) in [("econ", self.econ_scale), ("social", self.social_scale)] {
            if !scale.is_finite() || scale == 0.0 {
                return Err(Error::data(format!(
                    "matrix {origin}: {axis}_scale must be finite and nonzero"
                )));
            }
        }
        // Exhaustive per-axis bound: the most extreme reachable sum is the sum
        // of per-statement column extremes, because statements contribute
        // independently.
        for (axis, offset, scale, pick) in [
            (
                "econ",
                self.econ_offset,
                self.econ_scale,
                (|c: &(f64, f64)| c.0) as fn(&(f64, f64)) -> f64,
            ),
            (
                "social",
                self.social_offset,
                self.social_scale,
                (|c: &(f64, f64)| c.1) as fn(&(f64, f64)) -> f64,
            ),
        ] {
            let mut lo = 0.0;
            let mut hi = 0.0;
            for row in &self.cells {
                lo += row.iter().map(&pick).fold(f64::INFINITY, f64::min);
                hi += row.iter().map(&pick).fold(f64::NEG_INFINITY, f64::max);
            }
            let mut ends = [(lo + offset) / scale, (hi + offset) / scale];
            ends.sort_by(f64::total_cmp);
            const TOL: f64 = 1e-9;
            if ends[0] < -10.0 - TOL || ends[1] > 10.0 + TOL {
                return Err(Error::data(format!(
                    "matrix {origin}: {axis} extreme {:.4} escapes [-10, 10]",
                    if ends[1] > 10.0 + TOL { ends[1] } else { ends[0] }
                )));
            }
        }
        Ok(())
    }

    pub fn delta(&self, statement_id: u8, choice: AnswerChoice) -> (f64, f64) {
        self.cells[statement_id as usize - 1][choice.index()]
    }

    /// Canonical serialization; also the digest input, so field order is fixed.
    pub fn to_canonical_json(&self) -> String {
        let mut statements = BTreeMap::new();
        for (i, row) in self.cells.iter().enumerate() {
            let mut by_choice = BTreeMap::new();
            for (k, key) in CHOICE_KEYS.iter().enumerate() {
                by_choice.insert(key.to_string(), row[k]);
            }
            statements.insert((i + 1).to_string(), by_choice);
        }
        serde_json::to_string(&MatrixFile {
            econ_offset: self.econ_offset,
            econ_scale: self.econ_scale,
            social_offset: self.social_offset,
            social_scale: self.social_scale,
            statements,
        })
        .expect("matrix serialization cannot fail")
    }

    /// Builds a matrix from raw parts, running the same validation as the
    /// file loader. Intended for synthetic matrices in tests and calibration.
    pub fn from_parts(
        econ_offset: f64,
        econ_scale: f64,
        social_offset: f64,
        social_scale: f64,
        cells: Vec<[(f64, f64); 4]>,
    ) -> Result<ScoringMatrix> {
        if cells.len() != STATEMENT_COUNT {
            return Err(Error::data(format!(
                "matrix needs {STATEMENT_COUNT} statement rows, got {}",
                cells.len()
            )));
        }
        let matrix = ScoringMatrix {
            econ_offset,
            econ_scale,
            social_offset,
            social_scale,
            cells,
        };
        matrix.validate("<parts>")?;
        Ok(matrix)
    }
}

pub fn load_scoring_matrix(path: &Path) -> Result<ScoringMatrix> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read matrix {}: {e}", path.display())))?;
    ScoringMatrix::from_json(&raw, &path.display().to_string())
}

#[derive(Deserialize)]
struct StatementLine {
    id: u8,
    category: StatementCategory,
    text: String,
}

/// The bundled statement list.
pub fn builtin_statements() -> Vec<Statement> {
    parse_statements(include_str!("../assets/statements.jsonl"), "<builtin>")
        .expect("bundled statement asset must be valid")
}

pub fn load_statements(path: &Path) -> Result<Vec<Statement>> {
    let raw = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read statements {}: {e}", path.display())))?;
    parse_statements(&raw, &path.display().to_string())
}

fn parse_statements(raw: &str, origin: &str) -> Result<Vec<Statement>> {
    let mut statements = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StatementLine = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("statements {origin} line {}: {e}", idx + 1)))?;
        if parsed.text.trim().is_empty() {
            return Err(Error::data(format!(
                "statements {origin}: statement {} has empty text",
                parsed.id
            )));
        }
        statements.push(Statement {
            id: parsed.id,
            category: parsed.category,
            text: parsed.text,
        });
    }
    if statements.len() != STATEMENT_COUNT {
        return Err(Error::data(format!(
            "statements {origin}: expected {STATEMENT_COUNT} entries, found {}",
            statements.len()
        )));
    }
    for (i, s) in statements.iter().enumerate() {
        if s.id as usize != i + 1 {
            return Err(Error::data(format!(
                "statements {origin}: position {} holds id {}, expected {}",
                i + 1,
                s.id,
                i + 1
            )));
        }
    }
    for category in StatementCategory::ALL {
        let n = statements.iter().filter(|s| s.category == category).count();
        if n != category.expected_count() {
            return Err(Error::data(format!(
                "statements {origin}: category {category:?} has {n} statements, expected {}",
                category.expected_count()
            )));
        }
    }
    Ok(statements)
}

/// Scores a complete sheet. Sums run in statement-id order regardless of how
/// the sheet was filled, so the result is independent of elicitation order
/// bit-for-bit.
pub fn score(sheet: &AnswerSheet, matrix: &ScoringMatrix) -> Result<CompassPoint> {
    if !sheet.is_complete() {
        let missing = sheet.missing();
        return Err(Error::data(format!(
            "sheet for persona {} is incomplete: missing statements {missing:?}",
            sheet.persona_id
        )));
    }
    let mut econ_sum = 0.0;
    let mut social_sum = 0.0;
    for id in 1..=STATEMENT_COUNT as u8 {
        let choice = sheet.get(id).expect("checked complete");
        let (e, s) = matrix.delta(id, choice);
        econ_sum += e;
        social_sum += s;
    }
    Ok(CompassPoint::new(
        (econ_sum + matrix.econ_offset) / matrix.econ_scale,
        (social_sum + matrix.social_offset) / matrix.social_scale,
    ))
}
