use std::collections::BTreeSet;

use thiserror::Error;

use super::ExperimentDescription;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("SyntaxError at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    /// Structurally invalid document. `code` is a stable kebab-case tag,
    /// `subject` names the offending field or id.
    #[error("SchemaError {code} {subject}{}", location(.line, .column))]
    Schema { code: String, subject: String, line: Option<usize>, column: Option<usize> },
}

fn location(line: &Option<usize>, column: &Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" (line {l}, column {c})"),
        _ => String::new(),
    }
}

impl ParseError {
    fn schema(code: &str, subject: impl Into<String>) -> Self {
        ParseError::Schema { code: code.to_string(), subject: subject.into(), line: None, column: None }
    }

    pub fn code(&self) -> &str {
        match self {
            ParseError::Syntax { .. } => "syntax",
            ParseError::Schema { code, .. } => code,
        }
    }
}

/// Pulls the backquoted name out of serde's messages such as
/// "missing field `id`".
fn quoted(msg: &str) -> String {
    msg.split('`').nth(1).unwrap_or("").to_string()
}

fn from_serde(e: serde_json::Error) -> ParseError {
    use serde_json::error::Category;
    let (line, column) = (e.line(), e.column());
    match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => {
            let text = e.to_string();
            let message = text.split(" at line").next().unwrap_or(&text).to_string();
            ParseError::Syntax { line, column, message }
        }
        Category::Data => {
            let msg = e.to_string();
            let code = if msg.starts_with("missing field") {
                "missing-field"
            } else if msg.starts_with("duplicate field") {
                "duplicate-field"
            } else if msg.starts_with("unknown field") {
                "unknown-field"
            } else if msg.starts_with("unknown variant") {
                "unknown-variant"
            } else {
                "invalid-value"
            };
            let subject = match quoted(&msg) {
                s if s.is_empty() => msg.split(" at line").next().unwrap_or("").to_string(),
                s => s,
            };
            ParseError::Schema { code: code.to_string(), subject, line: Some(line), column: Some(column) }
        }
    }
}

/// Parses an experiment document and checks its structural invariants.
///
/// Reference resolution (sites, topics, models, units) is left to
/// [`super::validate_layers`], which needs the site registry.
pub fn parse_experiment(document: &str) -> Result<ExperimentDescription, ParseError> {
    let exp: ExperimentDescription = serde_json::from_str(document).map_err(from_serde)?;
    check_structure(&exp)?;
    Ok(exp)
}

pub(crate) fn check_structure(exp: &ExperimentDescription) -> Result<(), ParseError> {
    if exp.id.is_empty() {
        return Err(ParseError::schema("missing-field", "id"));
    }
    let mut seen = BTreeSet::new();
    for s in &exp.stages {
        if !seen.insert(s.id.as_str()) {
            return Err(ParseError::schema("duplicate-stage", s.id.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for p in &exp.participants {
        if !seen.insert(p.id.as_str()) {
            return Err(ParseError::schema("duplicate-participant", p.id.clone()));
        }
        if p.step_ns == 0 {
            return Err(ParseError::schema("invalid-step", p.id.clone()));
        }
        let offers: BTreeSet<&String> = p.offers.iter().collect();
        if let Some(t) = p.requires.iter().find(|t| offers.contains(t)) {
            return Err(ParseError::schema("offers-requires-overlap", format!("{} {t}", p.id)));
        }
    }
    let mut seen = BTreeSet::new();
    for s in &exp.sites {
        if !seen.insert(s.as_str()) {
            return Err(ParseError::schema("duplicate-site", s.clone()));
        }
    }
    if exp.macro_step_ns == 0 {
        return Err(ParseError::schema("invalid-macro-step", "macro_step_ns"));
    }
    if exp.duration_ns == 0 || exp.duration_ns % exp.macro_step_ns != 0 {
        return Err(ParseError::schema("duration-not-multiple", "duration_ns"));
    }
    if let Some(wr) = &exp.wr {
        if !(wr.tol > 0.0) || wr.max_iter == 0 || wr.window_ns == 0 {
            return Err(ParseError::schema("invalid-wr", "wr"));
        }
    }
    Ok(())
}
