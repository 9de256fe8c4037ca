//! Persona corpus loading, ideological descriptor injection, and subsampling.
//!
//! The corpus is a JSONL file with one persona description per line (the
//! PersonaHub layout); the persona id is the zero-based line number. Injection
//! rewrites the description so it opens with an ideological descriptor while
//! still reading as natural English: the descriptor slides in after a leading
//! article when there is one, otherwise the text gains an "a <descriptor> "
//! prefix.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RIGHT_AUTHORITARIAN_DESCRIPTOR: &str = "right leaning authoritarian";
pub const LEFT_LIBERTARIAN_DESCRIPTOR: &str = "left leaning libertarian";

/// Elicitation condition: plain personas, or personas carrying an injected
/// ideological descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Baseline,
    RightAuthoritarian,
    LeftLibertarian,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::Baseline,
        Condition::RightAuthoritarian,
        Condition::LeftLibertarian,
    ];

    /// Descriptor phrase injected into persona texts; `None` for baseline.
    pub fn descriptor(self) -> Option<&'static str> {
        match self {
            Condition::Baseline => None,
            Condition::RightAuthoritarian => Some(RIGHT_AUTHORITARIAN_DESCRIPTOR),
            Condition::LeftLibertarian => Some(LEFT_LIBERTARIAN_DESCRIPTOR),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::RightAuthoritarian => "right_authoritarian",
            Condition::LeftLibertarian => "left_libertarian",
        }
    }

    /// Accepts both snake_case (file formats) and kebab-case (CLI flags).
    pub fn from_label(s: &str) -> Option<Condition> {
        match s.replace('-', "_").as_str() {
            "baseline" => Some(Condition::Baseline),
            "right_authoritarian" => Some(Condition::RightAuthoritarian),
            "left_libertarian" => Some(Condition::LeftLibertarian),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Persona {
    /// Zero-based line number in the source corpus.
    pub id: u32,
    pub text: String,
}

/// A persona after condition rendering. `rendered_text` is what reaches the
/// prompt; for baseline it equals the original text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionedPersona {
    pub persona_id: u32,
    pub condition: Condition,
    pub rendered_text: String,
}

/// Loads a JSONL persona corpus. `field` names the JSON key holding the
/// description ("persona" in the stock corpus).
pub fn load_personas(path: &Path, field: &str) -> Result<Vec<Persona>> {
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open corpus {}: {e}", path.display())))?;
    let mut personas = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
            Error::data(format!(
                "corpus {} line {}: invalid JSON: {e}",
                path.display(),
                idx + 1
            ))
        })?;
        let text = value
            .get(field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| {
                Error::data(format!(
                    "corpus {} line {}: field {field:?} missing or not a string",
                    path.display(),
                    idx + 1
                ))
            })?;
        if text.trim().is_empty() {
            return Err(Error::data(format!(
                "corpus {} line {}: empty persona text",
                path.display(),
                idx + 1
            )));
        }
        personas.push(Persona {
            id: idx as u32,
            text: text.to_string(),
        });
    }
    if personas.is_empty() {
        return Err(Error::data(format!(
            "corpus {} contains no personas",
            path.display()
        )));
    }
    Ok(personas)
}

/// Writes personas back out in the same JSONL layout `load_personas` reads,
/// so load ∘ write is the identity on (id, text) pairs.
pub fn write_personas(path: &Path, personas: &[Persona], field: &str) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for p in personas {
        let mut obj = BTreeMap::new();
        obj.insert(field.to_string(), p.text.as_str());
        serde_json::to_writer(&mut out, &obj).map_err(|e| Error::data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a conditioned corpus as JSONL, one record per persona with the
/// original text plus `persona_id`, `condition`, and `rendered_text`.
pub fn write_conditioned(
    path: &Path,
    originals: &[Persona],
    conditioned: &[ConditionedPersona],
    field: &str,
) -> Result<()> {
    if originals.len() != conditioned.len() {
        return Err(Error::data(
            "conditioned corpus length differs from original corpus",
        ));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for (orig, cond) in originals.iter().zip(conditioned) {
        let record = serde_json::json!({
            field: orig.text,
            "persona_id": cond.persona_id,
            "condition": cond.condition.label(),
            "rendered_text": cond.rendered_text,
        });
        serde_json::to_writer(&mut out, &record).map_err(|e| Error::data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

const ARTICLES: [&str; 4] = ["a ", "an ", "A ", "An "];

/// Renders a persona under a condition. Non-baseline conditions insert the
/// descriptor immediately after a leading article ("a young mother ..." →
/// "a right leaning authoritarian young mother ..."); texts that do not open
/// with an article are prefixed with "a <descriptor> " instead.
pub fn inject_descriptor(persona: &Persona, condition: Condition) -> ConditionedPersona {
    let rendered = match condition.descriptor() {
        None => persona.text.clone(),
        Some(descriptor) => match ARTICLES.iter().find(|a| persona.text.starts_with(**a)) {
            Some(article) => format!(
                "{article}{descriptor} {}",
                &persona.text[article.len()..]
            ),
            None => format!("a {descriptor} {}", persona.text),
        },
    };
    ConditionedPersona {
        persona_id: persona.id,
        condition,
        rendered_text: rendered,
    }
}

/// Strips one leading article token if present.
pub fn strip_leading_article(text: &str) -> &str {
    ARTICLES
        .iter()
        .find_map(|a| text.strip_prefix(a))
        .unwrap_or(text)
}

/// Collapses a rendered persona text back to a condition-free key: the text
/// after any leading article and any injected descriptor. All three
/// renderings of the same persona share a key, which lets anything that only
/// sees the rendered text (a server parsing prompts) agree with code that
/// held the original persona.
pub fn canonical_persona_key(rendered_text: &str) -> &str {
    let stripped = strip_leading_article(rendered_text);
    for descriptor in [RIGHT_AUTHORITARIAN_DESCRIPTOR, LEFT_LIBERTARIAN_DESCRIPTOR] {
        if let Some(rest) = stripped.strip_prefix(descriptor) {
            if let Some(rest) = rest.strip_prefix(' ') {
                return rest;
            }
        }
    }
    stripped
}

/// Infers the condition a rendered text was produced under by looking for an
/// injected descriptor.
pub fn detect_condition(rendered_text: &str) -> Condition {
    if rendered_text.contains(RIGHT_AUTHORITARIAN_DESCRIPTOR) {
        Condition::RightAuthoritarian
    } else if rendered_text.contains(LEFT_LIBERTARIAN_DESCRIPTOR) {
        Condition::LeftLibertarian
    } else {
        Condition::Baseline
    }
}

/// Seeded subsample without replacement, preserving corpus order. The same
/// (corpus, fraction, seed) always selects the same personas.
pub fn split_corpus(personas: &[Persona], fraction: f64, seed: u64) -> Result<Vec<Persona>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::data(format!(
            "split fraction must be in (0, 1], got {fraction}"
        )));
    }
    let take = (fraction * personas.len() as f64).round() as usize;
    if take == 0 {
        return Err(Error::data(format!(
            "fraction {fraction} of {} personas selects nothing",
            personas.len()
        )));
    }
    if take >= personas.len() {
        return Ok(personas.to_vec());
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, personas.len(), take).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| personas[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn persona(id: u32, text: &str) -> Persona {
        Persona {
            id,
            text: text.to_string(),
        }
    }

    #[test]
    fn injects_after_leading_article() {
        let p = persona(0, "a young mother who joined the workforce");
        let c = inject_descriptor(&p, Condition::RightAuthoritarian);
        assert_eq!(
            c.rendered_text,
            "a right leaning authoritarian young mother who joined the workforce"
        );
    }

    #[test]
    fn injects_after_capitalized_article() {
        let p = persona(0, "An economist studying trade policy");
        let c = inject_descriptor(&p, Condition::LeftLibertarian);
        assert_eq!(
            c.rendered_text,
            "An left leaning libertarian economist studying trade policy"
        );
    }

    #[test]
    fn prefixes_when_no_article() {
        let p = persona(0, "Boston Celtics sports journalist");
        let c = inject_descriptor(&p, Condition::RightAuthoritarian);
        assert_eq!(
            c.rendered_text,
            "a right leaning authoritarian Boston Celtics sports journalist"
        );
    }

    #[test]
    fn article_must_be_a_whole_token() {
        // "Another" starts with "An" but not with "An ".
        let p = persona(0, "Another day another persona");
        let c = inject_descriptor(&p, Condition::LeftLibertarian);
        assert_eq!(
            c.rendered_text,
            "a left leaning libertarian Another day another persona"
        );
    }

    #[test]
    fn baseline_is_untouched() {
        let p = persona(3, "a farmer");
        let c = inject_descriptor(&p, Condition::Baseline);
        assert_eq!(c.rendered_text, "a farmer");
        assert_eq!(c.persona_id, 3);
    }

    #[test]
    fn descriptor_removal_recovers_suffix() {
        // Stripping the descriptor and the (possibly introduced) article must
        // recover the original text's own suffix after its article.
        let texts = [
            "a young mother of two",
            "An award-winning chef",
            "freelance data analyst from Lagos",
        ];
        for text in texts {
            let p = persona(0, text);
            for cond in [Condition::RightAuthoritarian, Condition::LeftLibertarian] {
                let rendered = inject_descriptor(&p, cond).rendered_text;
                let after_article = |s: &str| {
                    ARTICLES
                        .iter()
                        .find(|a| s.starts_with(**a))
                        .map(|a| s[a.len()..].to_string())
                        .unwrap_or_else(|| s.to_string())
                };
                let stripped = after_article(&rendered);
                let descriptor = cond.descriptor().unwrap();
                let stripped = stripped
                    .strip_prefix(&format!("{descriptor} "))
                    .expect("descriptor must follow the article");
                assert_eq!(stripped, after_article(text));
            }
        }
    }

    #[test]
    fn canonical_key_is_condition_invariant() {
        let texts = [
            "a young mother of two",
            "An award-winning chef",
            "freelance data analyst from Lagos",
            "Another day another persona",
        ];
        for text in texts {
            let p = persona(0, text);
            let base_key = canonical_persona_key(text).to_string();
            for cond in Condition::ALL {
                let rendered = inject_descriptor(&p, cond).rendered_text;
                assert_eq!(canonical_persona_key(&rendered), base_key, "{text} under {cond:?}");
                assert_eq!(detect_condition(&rendered), cond);
            }
        }
    }

    #[test]
    fn load_assigns_line_numbers_and_reports_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("personas.jsonl");
        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"persona": "a farmer"}}"#).unwrap();
        writeln!(f, r#"{{"persona": "an architect"}}"#).unwrap();
        let loaded = load_personas(&path, "persona").unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].id, 0);
        assert_eq!(loaded[1].text, "an architect");

        let mut f = File::create(&path).unwrap();
        writeln!(f, r#"{{"persona": "ok"}}"#).unwrap();
        writeln!(f, r#"{{"wrong_field": "missing"}}"#).unwrap();
        let err = load_personas(&path, "persona").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn load_rejects_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        File::create(&path).unwrap();
        assert!(load_personas(&path, "persona").is_err());
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("personas.jsonl");
        let personas = vec![persona(0, "a farmer"), persona(1, "an architect")];
        write_personas(&path, &personas, "persona").unwrap();
        let loaded = load_personas(&path, "persona").unwrap();
        assert_eq!(loaded, personas);
    }

    #[test]
    fn split_is_deterministic_and_order_preserving() {
        let personas: Vec<Persona> = (0..10)
            .map(|i| persona(i, &format!("persona number {i}")))
            .collect();
        let a = split_corpus(&personas, 0.1, 7).unwrap();
        let b = split_corpus(&personas, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);

        let half = split_corpus(&personas, 0.5, 11).unwrap();
        assert_eq!(half.len(), 5);
        let ids: Vec<u32> = half.iter().map(|p| p.id).collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(ids, sorted, "subsample must preserve corpus order");
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let personas = vec![persona(0, "solo")];
        assert!(split_corpus(&personas, 0.0, 1).is_err());
        assert!(split_corpus(&personas, 1.5, 1).is_err());
        assert_eq!(split_corpus(&personas, 1.0, 1).unwrap().len(), 1);
    }
}
