//! Minimal JSON-Schema validator covering the subset the in-repo schema
//! files use: `type`, `properties`/`required`, `items`, `enum`, numeric
//! bounds, array length bounds, and `oneOf`.

use serde_json::Value;

/// Validate `value` against `schema`, collecting human-readable errors.
pub fn validate(value: &Value, schema: &Value) -> Result<(), Vec<String>> {
    let mut errors = Vec::new();
    check(value, schema, "$", &mut errors);
    if errors.is_empty() {
        Ok(())
    } else {
        Err(errors)
    }
}

fn check(value: &Value, schema: &Value, path: &str, errors: &mut Vec<String>) {
    let Some(obj) = schema.as_object() else {
        return;
    };

    if let Some(variants) = obj.get("oneOf").and_then(Value::as_array) {
        let matched = variants.iter().any(|v| {
            let mut sub = Vec::new();
            check(value, v, path, &mut sub);
            sub.is_empty()
        });
        if !matched {
            errors.push(format!("{path}: matches no oneOf variant"));
        }
        return;
    }

    if let Some(ty) = obj.get("type").and_then(Value::as_str) {
        let ok = match ty {
            "object" => value.is_object(),
            "array" => value.is_array(),
            "string" => value.is_string(),
            "integer" => value.as_i64().is_some() || value.as_u64().is_some(),
            "number" => value.is_number(),
            "boolean" => value.is_boolean(),
            "null" => value.is_null(),
            _ => true,
        };
        if !ok {
            errors.push(format!("{path}: expected type {ty}"));
            return;
        }
    }

    if let Some(allowed) = obj.get("enum").and_then(Value::as_array) {
        if !allowed.contains(value) {
            errors.push(format!("{path}: value not in enum"));
        }
    }

    if let Some(min) = obj.get("minimum").and_then(Value::as_f64) {
        if let Some(x) = value.as_f64() {
            if x < min {
                errors.push(format!("{path}: {x} below minimum {min}"));
            }
        }
    }
    if let Some(max) = obj.get("maximum").and_then(Value::as_f64) {
        if let Some(x) = value.as_f64() {
            if x > max {
                errors.push(format!("{path}: {x} above maximum {max}"));
            }
        }
    }

    if let Some(arr) = value.as_array() {
        if let Some(min) = obj.get("minItems").and_then(Value::as_u64) {
            if (arr.len() as u64) < min {
                errors.push(format!("{path}: fewer than {min} items"));
            }
        }
        if let Some(max) = obj.get("maxItems").and_then(Value::as_u64) {
            if (arr.len() as u64) > max {
                errors.push(format!("{path}: more than {max} items"));
            }
        }
        if let Some(items) = obj.get("items") {
            for (i, item) in arr.iter().enumerate() {
                check(item, items, &format!("{path}[{i}]"), errors);
            }
        }
    }

    if let Some(map) = value.as_object() {
        if let Some(required) = obj.get("required").and_then(Value::as_array) {
            for name in required.iter().filter_map(Value::as_str) {
                if !map.contains_key(name) {
                    errors.push(format!("{path}: missing required property `{name}`"));
                }
            }
        }
        if let Some(props) = obj.get("properties").and_then(Value::as_object) {
            for (name, sub) in props {
                if let Some(v) = map.get(name) {
                    check(v, sub, &format!("{path}.{name}"), errors);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn type_and_required_checks() {
        let schema = json!({
            "type": "object",
            "required": ["a", "b"],
            "properties": {
                "a": {"type": "integer", "minimum": 0},
                "b": {"type": "array", "items": {"type": "number"}, "minItems": 1}
            }
        });
        assert!(validate(&json!({"a": 3, "b": [1.5]}), &schema).is_ok());
        let errs = validate(&json!({"a": -1, "b": []}), &schema).unwrap_err();
        assert_eq!(errs.len(), 2);
        let errs = validate(&json!({"a": 3}), &schema).unwrap_err();
        assert!(errs[0].contains("`b`"));
    }

    #[test]
    fn one_of_and_enum() {
        let schema = json!({
            "oneOf": [
                {"type": "string"},
                {"type": "integer", "enum": [0, 1]}
            ]
        });
        assert!(validate(&json!("x"), &schema).is_ok());
        assert!(validate(&json!(1), &schema).is_ok());
        assert!(validate(&json!(7), &schema).is_err());
    }
}
