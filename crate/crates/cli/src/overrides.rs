//! Dotted `key=value` overrides on JSON configs.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Sets `a.b.c=value` on `root`. Every path segment must already exist, so
/// typos are rejected instead of silently ignored. Values are parsed as JSON
/// and fall back to plain strings.
pub fn apply(root: &mut Value, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override '{assignment}' is not of the form key=value"))?;
    let mut node = root;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| format!("unknown config key '{key}'"))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Round-trips `config` through JSON with every override applied.
pub fn apply_all<T: Serialize + DeserializeOwned>(config: &T, assignments: &[String]) -> Result<T, String> {
    let mut value = serde_json::to_value(config).map_err(|e| e.to_string())?;
    for a in assignments {
        apply(&mut value, a)?;
    }
    serde_json::from_value(value).map_err(|e| format!("invalid override: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn nested_keys_and_types() {
        let mut v = json!({"a": {"b": 1, "c": [1, 2]}, "name": "x"});
        apply(&mut v, "a.b=2.5").unwrap();
        apply(&mut v, "a.c.1=7").unwrap();
        apply(&mut v, "name=mse-ce").unwrap();
        apply(&mut v, "a.c=[3]").unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5, "c": [3]}, "name": "mse-ce"}));
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = json!({"a": {"b": 1}});
        assert!(apply(&mut v, "a.x=1").unwrap_err().contains("a.x"));
        assert!(apply(&mut v, "a.b.c=1").is_err());
        assert!(apply(&mut v, "a.b").is_err());
    }
}
