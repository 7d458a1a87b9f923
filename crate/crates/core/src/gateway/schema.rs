//! A small JSON-schema subset for validating structured model output.
//!
//! Supported keywords: `type`, `properties`, `required`, `items`, `enum`,
//! `additionalProperties` (schema form only). Anything else is ignored.

use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub pointer: String,
    pub message: String,
}

impl std::fmt::Display for SchemaError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.pointer.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.pointer, self.message)
        }
    }
}

pub fn validate(schema: &Value, value: &Value) -> Result<(), SchemaError> {
    validate_at(schema, value, "")
}

fn err(pointer: &str, message: impl Into<String>) -> SchemaError {
    SchemaError { pointer: pointer.to_string(), message: message.into() }
}

fn type_matches(expected: &str, value: &Value) -> bool {
    match expected {
        "object" => value.is_object(),
        "array" => value.is_array(),
        "string" => value.is_string(),
        "number" => value.is_number(),
        "integer" => value.is_i64() || value.is_u64(),
        "boolean" => value.is_boolean(),
        "null" => value.is_null(),
        _ => true,
    }
}

fn validate_at(schema: &Value, value: &Value, pointer: &str) -> Result<(), SchemaError> {
    let Some(schema) = schema.as_object() else {
        return Ok(());
    };

    if let Some(ty) = schema.get("type") {
        let ok = match ty {
            Value::String(t) => type_matches(t, value),
            Value::Array(ts) => ts.iter().filter_map(Value::as_str).any(|t| type_matches(t, value)),
            _ => true,
        };
        if !ok {
            return Err(err(pointer, format!("expected type {ty}, found {}", kind_of(value))));
        }
    }

    if let Some(Value::Array(options)) = schema.get("enum") {
        if !options.contains(value) {
            return Err(err(pointer, format!("value {value} not in enum")));
        }
    }

    if let Value::Object(obj) = value {
        if let Some(Value::Array(required)) = schema.get("required") {
            for key in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(key) {
                    return Err(err(pointer, format!("missing required property `{key}`")));
                }
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (key, child) in obj {
            let child_pointer = format!("{pointer}/{key}");
            match props.and_then(|p| p.get(key)) {
                Some(child_schema) => validate_at(child_schema, child, &child_pointer)?,
                None => {
                    if let Some(extra) = schema.get("additionalProperties") {
                        if extra == &Value::Bool(false) {
                            return Err(err(&child_pointer, "unexpected property"));
                        }
                        validate_at(extra, child, &child_pointer)?;
                    }
                }
            }
        }
    }

    if let (Value::Array(items), Some(item_schema)) = (value, schema.get("items")) {
        for (i, item) in items.iter().enumerate() {
            validate_at(item_schema, item, &format!("{pointer}/{i}"))?;
        }
    }

    Ok(())
}

fn kind_of(value: &Value) -> &'static str {
    match value {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Parses model text as JSON, tolerating surrounding code fences and prose
/// around a single top-level object.
pub fn parse_json_text(text: &str) -> Result<Value, String> {
    let trimmed = text.trim();
    let unfenced = trimmed
        .strip_prefix("```json")
        .or_else(|| trimmed.strip_prefix("```"))
        .map(|rest| rest.trim_end().trim_end_matches("```").trim())
        .unwrap_or(trimmed);
    match serde_json::from_str::<Value>(unfenced) {
        Ok(v) => Ok(v),
        Err(first) => {
            if let (Some(open), Some(close)) = (unfenced.find('{'), unfenced.rfind('}')) {
                if open < close {
                    if let Ok(v) = serde_json::from_str::<Value>(&unfenced[open..=close]) {
                        return Ok(v);
                    }
                }
            }
            Err(format!("response is not valid JSON: {first}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn instruments_schema() -> Value {
        json!({
            "type": "object",
            "required": ["instruments"],
            "properties": {
                "instruments": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["name"],
                        "properties": {"name": {"type": "string"}, "evidence": {"type": "string"}}
                    }
                }
            }
        })
    }

    #[test]
    fn accepts_valid_payload() {
        let v = json!({"instruments": [{"name": "CLASS", "evidence": "x", "extra": 1}]});
        assert!(validate(&instruments_schema(), &v).is_ok());
    }

    #[test]
    fn reports_pointer_of_violation() {
        let v = json!({"instruments": [{"name": "A"}, {"name": 3}]});
        let e = validate(&instruments_schema(), &v).unwrap_err();
        assert_eq!(e.pointer, "/instruments/1/name");
        let e = validate(&instruments_schema(), &json!({})).unwrap_err();
        assert!(e.message.contains("instruments"));
    }

    #[test]
    fn enum_and_additional_properties() {
        let s = json!({"type": "object", "additionalProperties": {"type": "array", "items": {"type": "string"}}});
        assert!(validate(&s, &json!({"a": ["x"]})).is_ok());
        assert!(validate(&s, &json!({"a": [1]})).is_err());
        let e = json!({"enum": ["a", "b"]});
        assert!(validate(&e, &json!("c")).is_err());
    }

    #[test]
    fn parses_fenced_and_wrapped_json() {
        assert_eq!(parse_json_text("```json\n{\"a\": 1}\n```").unwrap(), json!({"a": 1}));
        assert_eq!(parse_json_text("Here you go: {\"a\": 1} done").unwrap(), json!({"a": 1}));
        assert!(parse_json_text("{\"instruments\": [").is_err());
    }
}
