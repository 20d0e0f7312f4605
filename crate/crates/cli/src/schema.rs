//! A small declarative JSON checker that reports every violation with its
//! path, so a config can be fixed in one pass.

use serde_json::Value;

pub enum Kind {
    Object(&'static [Field]),
    /// An object whose remaining fields depend on the string at `tag`.
    Tagged { tag: &'static str, variants: &'static [(&'static str, &'static [Field])] },
    Number { min: f64, strict: bool },
    Integer { min: u64 },
    Str(&'static [&'static str]),
    /// Any string.
    Text,
    Bool,
    Array { item: &'static Kind, min_len: usize },
    /// The inner kind or `null`.
    Nullable(&'static Kind),
}

pub struct Field {
    pub name: &'static str,
    pub required: bool,
    pub kind: Kind,
}

pub const fn req(name: &'static str, kind: Kind) -> Field {
    Field { name, required: true, kind }
}

pub const fn opt(name: &'static str, kind: Kind) -> Field {
    Field { name, required: false, kind }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn shown(path: &str) -> &str {
    if path.is_empty() {
        "<root>"
    } else {
        path
    }
}

fn check_fields(map: &serde_json::Map<String, Value>, fields: &[Field], skip: Option<&str>, path: &str, errors: &mut Vec<String>) {
    for field in fields {
        match map.get(field.name) {
            Some(v) => check(v, &field.kind, &join(path, field.name), errors),
            None if field.required => errors.push(format!("{}: required key is missing", join(path, field.name))),
            None => {}
        }
    }
    let mut unknown: Vec<&String> =
        map.keys().filter(|k| Some(k.as_str()) != skip && !fields.iter().any(|f| f.name == k.as_str())).collect();
    unknown.sort();
    for k in unknown {
        let allowed: Vec<&str> = fields.iter().map(|f| f.name).collect();
        errors.push(format!("{}: unknown key (allowed: {})", join(path, k), allowed.join(", ")));
    }
}

/// Appends one message per violation of `kind` found in `value`.
pub fn check(value: &Value, kind: &Kind, path: &str, errors: &mut Vec<String>) {
    match kind {
        Kind::Object(fields) => match value.as_object() {
            Some(map) => check_fields(map, fields, None, path, errors),
            None => errors.push(format!("{}: expected an object", shown(path))),
        },
        Kind::Tagged { tag, variants } => {
            let Some(map) = value.as_object() else {
                errors.push(format!("{}: expected an object", shown(path)));
                return;
            };
            let names: Vec<&str> = variants.iter().map(|(n, _)| *n).collect();
            match map.get(*tag).and_then(Value::as_str) {
                Some(name) => match variants.iter().find(|(n, _)| *n == name) {
                    Some((_, fields)) => check_fields(map, fields, Some(tag), path, errors),
                    None => errors.push(format!("{}: unknown value `{name}` (expected one of: {})", join(path, tag), names.join(", "))),
                },
                None => errors.push(format!("{}: required string key is missing (one of: {})", join(path, tag), names.join(", "))),
            }
        }
        Kind::Number { min, strict } => match value.as_f64() {
            Some(v) if !v.is_finite() => errors.push(format!("{path}: must be finite")),
            Some(v) if *strict && v <= *min => errors.push(format!("{path}: must be > {min}, got {v}")),
            Some(v) if !*strict && v < *min => errors.push(format!("{path}: must be ≥ {min}, got {v}")),
            Some(_) => {}
            None => errors.push(format!("{path}: expected a number")),
        },
        Kind::Integer { min } => match value.as_u64() {
            Some(v) if v < *min => errors.push(format!("{path}: must be ≥ {min}, got {v}")),
            Some(_) => {}
            None => errors.push(format!("{path}: expected a non-negative integer")),
        },
        Kind::Str(options) => match value.as_str() {
            Some(s) if options.contains(&s) => {}
            Some(s) => errors.push(format!("{path}: unknown value `{s}` (expected one of: {})", options.join(", "))),
            None => errors.push(format!("{path}: expected a string")),
        },
        Kind::Text => {
            if !value.is_string() {
                errors.push(format!("{path}: expected a string"));
            }
        }
        Kind::Bool => {
            if !value.is_boolean() {
                errors.push(format!("{path}: expected true or false"));
            }
        }
        Kind::Array { item, min_len } => match value.as_array() {
            Some(items) => {
                if items.len() < *min_len {
                    errors.push(format!("{path}: needs at least {min_len} entries"));
                }
                for (i, v) in items.iter().enumerate() {
                    check(v, item, &format!("{path}[{i}]"), errors);
                }
            }
            None => errors.push(format!("{path}: expected an array")),
        },
        Kind::Nullable(inner) => {
            if !value.is_null() {
                check(value, inner, path, errors);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const INNER: &[Field] = &[req("rate", Kind::Number { min: 0.0, strict: true }), opt("steps", Kind::Integer { min: 1 })];
    const ROOT: Kind = Kind::Object(&[req("inner", Kind::Object(INNER)), opt("mode", Kind::Str(&["a", "b"]))]);

    fn errors(v: Value) -> Vec<String> {
        let mut e = Vec::new();
        check(&v, &ROOT, "", &mut e);
        e
    }

    #[test]
    fn valid_document_passes() {
        assert!(errors(json!({"inner": {"rate": 0.1, "steps": 3}, "mode": "a"})).is_empty());
    }

    #[test]
    fn all_violations_reported() {
        let e = errors(json!({"inner": {"rate": 0.0, "steps": 0, "extra": 1}, "mode": "c", "other": true}));
        assert_eq!(e.len(), 5, "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("inner.rate:")));
        assert!(e.iter().any(|m| m.starts_with("inner.steps:")));
        assert!(e.iter().any(|m| m.starts_with("inner.extra: unknown key")));
        assert!(e.iter().any(|m| m.starts_with("mode:")));
        assert!(e.iter().any(|m| m.starts_with("other: unknown key")));
    }

    #[test]
    fn missing_section_named() {
        assert_eq!(errors(json!({})), vec!["inner: required key is missing".to_string()]);
    }
}
