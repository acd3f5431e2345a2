//! Lenient JSON extraction, strict schema checks.

use serde_json::{Map, Value};

/// Finds the JSON object in a completion, tolerating code fences and
/// surrounding prose.
pub fn extract_object(raw: &str) -> Result<Map<String, Value>, String> {
    let trimmed = strip_fence(raw.trim());
    let candidate = match serde_json::from_str::<Value>(trimmed) {
        Ok(v) => v,
        Err(_) => {
            let (Some(start), Some(end)) = (trimmed.find('{'), trimmed.rfind('}')) else {
                return Err("no JSON object in reply".into());
            };
            if end < start {
                return Err("no JSON object in reply".into());
            }
            serde_json::from_str(&trimmed[start..=end]).map_err(|e| format!("invalid JSON: {e}"))?
        }
    };
    match candidate {
        Value::Object(m) => Ok(m),
        other => Err(format!("expected a JSON object, got {}", kind(&other))),
    }
}

fn strip_fence(s: &str) -> &str {
    let Some(body) = s.strip_prefix("```") else { return s };
    let body = body.split_once('\n').map_or("", |(_, rest)| rest);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

pub fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

pub fn required_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, String> {
    match obj.get(key) {
        Some(Value::String(s)) => Ok(s),
        Some(other) => Err(format!("field {key:?} must be a string, got {}", kind(other))),
        None => Err(format!("missing field {key:?}")),
    }
}

pub fn required_nonempty_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<&'a str, String> {
    let s = required_str(obj, key)?;
    if s.trim().is_empty() {
        return Err(format!("field {key:?} is empty"));
    }
    Ok(s)
}

/// Option ids compare after trimming; a bare letter also matches "(B)" or "B.".
pub fn normalize_option(raw: &str) -> String {
    raw.trim()
        .trim_matches(|c: char| c == '(' || c == ')' || c == '.' || c == ':')
        .trim()
        .to_string()
}
