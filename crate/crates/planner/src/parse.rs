//! Extraction of structured answers from free-form completions.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::action::{Action, ActionOrigin};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("completion contains no JSON object with {expected}")]
    Missing { expected: &'static str, raw: String },
    #[error("invalid {field} value in completion: {reason}")]
    InvalidValue {
        field: &'static str,
        reason: String,
        raw: String,
    },
}

impl ParseError {
    pub fn raw(&self) -> &str {
        match self {
            ParseError::Missing { raw, .. } | ParseError::InvalidValue { raw, .. } => raw,
        }
    }
}

/// Drops a leading reasoning block closed by `</think>`.
///
/// Prompts end with an opening `<think>`, so completions usually contain only
/// the closing tag.
pub fn strip_reasoning(raw: &str) -> &str {
    const CLOSE: &str = "</think>";
    match raw.find(CLOSE) {
        Some(end) => &raw[end + CLOSE.len()..],
        None => raw.strip_prefix("<think>").unwrap_or(raw),
    }
}

/// Byte ranges of balanced `{...}` spans, in order of their opening brace.
///
/// Every `{` is tried as a start, so spans may also begin inside string
/// literals; callers validate spans by parsing them. Within a span, braces
/// inside string literals do not count towards nesting.
pub fn balanced_object_spans(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut spans = Vec::new();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{') {
        if let Some(end) = matching_brace(bytes, start) {
            spans.push((start, end + 1));
        }
    }
    spans
}

fn matching_brace(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// First JSON object in `text` accepted by `accept`.
fn first_object<T>(text: &str, mut accept: impl FnMut(&Map<String, Value>) -> Option<T>) -> Option<T> {
    balanced_object_spans(text).into_iter().find_map(|(s, e)| {
        match serde_json::from_str::<Value>(&text[s..e]) {
            Ok(Value::Object(map)) => accept(&map),
            _ => None,
        }
    })
}

fn field<'a>(map: &'a Map<String, Value>, name: &str) -> Option<&'a Value> {
    map.get(name).or_else(|| {
        map.iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v)
    })
}

/// Parses an `{"Action": ..., "Explanation": ...}` completion.
pub fn parse_action(raw: &str) -> Result<Action, ParseError> {
    let body = strip_reasoning(raw);
    first_object(body, |map| {
        let action = field(map, "Action")?.as_str()?.trim();
        let explanation = field(map, "Explanation")?.as_str()?.trim();
        Action::new(action, explanation, ActionOrigin::Generated)
    })
    .ok_or_else(|| ParseError::Missing {
        expected: "non-empty string properties Action and Explanation",
        raw: raw.to_string(),
    })
}

/// Parses a `{"RemainingSteps": n}` completion.
pub fn parse_remaining_steps(raw: &str) -> Result<f64, ParseError> {
    let body = strip_reasoning(raw);
    let value = first_object(body, |map| field(map, "RemainingSteps").cloned()).ok_or_else(|| {
        ParseError::Missing {
            expected: "property RemainingSteps",
            raw: raw.to_string(),
        }
    })?;
    let number = match &value {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match number {
        Some(n) if n.is_finite() && n >= 0.0 => Ok(n),
        _ => Err(ParseError::InvalidValue {
            field: "RemainingSteps",
            reason: format!("expected a non-negative number, got {value}"),
            raw: raw.to_string(),
        }),
    }
}

/// Parses a completion-check answer: `{"Completed": bool}` or a leading yes/no.
pub fn parse_completion_answer(raw: &str) -> Result<bool, ParseError> {
    let body = strip_reasoning(raw);
    if let Some(answer) = first_object(body, |map| match field(map, "Completed")? {
        Value::Bool(b) => Some(*b),
        Value::String(s) => yes_no(s),
        _ => None,
    }) {
        return Ok(answer);
    }
    yes_no(body).ok_or_else(|| ParseError::Missing {
        expected: "property Completed or a yes/no answer",
        raw: raw.to_string(),
    })
}

fn yes_no(text: &str) -> Option<bool> {
    let word: String = text
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_lowercase();
    match word.as_str() {
        "yes" | "true" => Some(true),
        "no" | "false" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn action_after_reasoning() {
        let a = parse_action(
            "<think>The server talks to a C2 host.</think>{\"Action\":\"Block IP X\",\"Explanation\":\"C2 traffic\"}",
        )
        .unwrap();
        assert_eq!(a.action_text, "Block IP X");
        assert_eq!(a.explanation, "C2 traffic");
        assert_eq!(a.origin, ActionOrigin::Generated);
    }

    #[test]
    fn reasoning_without_opening_tag() {
        let a = parse_action("step by step {\"Action\": \"fake\"}</think>\n{\"Action\":\"A\",\"Explanation\":\"B\"}")
            .unwrap();
        assert_eq!(a.action_text, "A");
    }

    #[test]
    fn no_json_is_an_error() {
        let err = parse_action("I would isolate the host.").unwrap_err();
        assert!(matches!(err, ParseError::Missing { .. }));
        assert_eq!(err.raw(), "I would isolate the host.");
    }

    #[test]
    fn missing_property_is_an_error() {
        assert!(parse_action("{\"Action\":\"A\"}").is_err());
        assert!(parse_action("{\"Action\":\"  \",\"Explanation\":\"e\"}").is_err());
        assert!(parse_action("{\"Action\":3,\"Explanation\":\"e\"}").is_err());
    }

    #[test]
    fn prose_and_trailing_tokens() {
        let a = parse_action(
            "Sure! Here you go: {\"Action\": \"Wipe {disk}\", \"Explanation\": \"quote \\\" and }\"} <|eot|>",
        )
        .unwrap();
        assert_eq!(a.action_text, "Wipe {disk}");
        assert_eq!(a.explanation, "quote \" and }");
    }

    #[test]
    fn skips_unrelated_objects() {
        let a = parse_action("{\"note\": 1} then {\"Action\":\"A\",\"Explanation\":\"B\"}").unwrap();
        assert_eq!(a.action_text, "A");
    }

    #[test]
    fn remaining_steps_variants() {
        assert_eq!(parse_remaining_steps("{\"RemainingSteps\": 4}").unwrap(), 4.0);
        assert_eq!(parse_remaining_steps("</think>{\"RemainingSteps\": 2.5}").unwrap(), 2.5);
        assert_eq!(parse_remaining_steps("{\"remainingsteps\": \"7\"}").unwrap(), 7.0);
        assert!(matches!(
            parse_remaining_steps("{\"RemainingSteps\": -1}"),
            Err(ParseError::InvalidValue { .. })
        ));
        assert!(parse_remaining_steps("five").is_err());
    }

    #[test]
    fn completion_answers() {
        assert!(parse_completion_answer("{\"Completed\": true}").unwrap());
        assert!(!parse_completion_answer("</think> No, the attacker is still present.").unwrap());
        assert!(parse_completion_answer("Yes.").unwrap());
        assert!(parse_completion_answer("maybe").is_err());
    }

    #[test]
    fn spans_ignore_braces_in_strings() {
        let text = r#"x {"a":"}{","b":{"c":1}} y"#;
        let spans: Vec<&str> = balanced_object_spans(text)
            .into_iter()
            .map(|(s, e)| &text[s..e])
            .collect();
        assert_eq!(spans[0], r#"{"a":"}{","b":{"c":1}}"#);
        assert!(spans.contains(&r#"{"c":1}"#));
    }
}
