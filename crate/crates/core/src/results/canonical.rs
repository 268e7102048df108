//! Canonical JSON: object keys sorted, no insignificant whitespace, numbers in
//! shortest round-trip form.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out);
    Ok(out)
}

/// Hex SHA-256 of the canonical serialization.
pub fn canonical_digest<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    Ok(hex::encode(Sha256::digest(
        to_canonical_json(value)?.as_bytes(),
    )))
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            // sort explicitly: serde_json's map order depends on crate features
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(k.clone()).to_string());
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_without_whitespace() {
        let v = json!({"b": 1, "a": {"z": [1, 2.5, "x"], "c": null}});
        assert_eq!(
            to_canonical_json(&v).unwrap(),
            r#"{"a":{"c":null,"z":[1,2.5,"x"]},"b":1}"#
        );
    }

    #[test]
    fn key_order_does_not_change_digest() {
        let a: Value = serde_json::from_str(r#"{"x":1,"y":{"p":true,"q":0.5}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"y":{"q":0.5,"p":true},"x":1}"#).unwrap();
        assert_eq!(canonical_digest(&a).unwrap(), canonical_digest(&b).unwrap());
    }
}
