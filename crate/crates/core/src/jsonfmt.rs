//! Deterministic JSON output.
//!
//! Every file this toolkit writes (results, datasets, parameters, manifests)
//! goes through this writer so that identical runs produce byte-identical
//! files: map keys are sorted (serde_json's default `Map` is a `BTreeMap`)
//! and floats are printed with 17 significant digits, enough to round-trip
//! any finite f64. Non-finite floats are not representable in JSON; serde
//! maps them to `null`, and producers are expected to reject them before
//! serializing.

use serde::Serialize;
use serde_json::Value;

use crate::error::Result;

/// Serialize `v` to a canonical JSON string.
pub fn to_string<T: Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v)?;
    let mut out = String::new();
    write_value(&value, &mut out);
    Ok(out)
}

/// Serialize `v` and append a newline (JSON-lines record).
pub fn to_line<T: Serialize>(v: &T) -> Result<String> {
    let mut s = to_string(v)?;
    s.push('\n');
    Ok(s)
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().expect("number is i64, u64 or f64");
                out.push_str(&format!("{f:.16e}"));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serialization"))
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
        Value::Object(map) => {
            out.push('{');
            for (i, (k, val)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serialization"));
                out.push(':');
                write_value(val, out);
            }
            out.push('}');
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_exactly() {
        for &x in &[0.5f64, 1.0 / 3.0, -2.2e-308, 1.7976931348623157e308, 0.1 + 0.2] {
            let s = to_string(&x).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn keys_are_sorted() {
        let v: Value = serde_json::json!({"b": 1, "a": 2});
        let mut out = String::new();
        write_value(&v, &mut out);
        assert_eq!(out, "{\"a\":2,\"b\":1}");
    }
}
