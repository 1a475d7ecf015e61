//! Canonical JSON: sorted object keys, two-space indentation, trailing newline.

use serde::Serialize;

pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    // serde_json::Map is a BTreeMap here, so going through Value sorts every key.
    let tree = serde_json::to_value(value)?;
    let mut out = serde_json::to_string_pretty(&tree)?;
    out.push('\n');
    Ok(out)
}

/// Single-line canonical form, used for hashing and JSON Lines records.
pub fn to_canonical_line<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let tree = serde_json::to_value(value)?;
    serde_json::to_string(&tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_are_sorted_at_every_level() {
        let v = json!({"b": 1, "a": {"d": 2, "c": [ {"z": 1, "y": 2} ]}});
        assert_eq!(
            to_canonical_line(&v).unwrap(),
            r#"{"a":{"c":[{"y":2,"z":1}],"d":2},"b":1}"#
        );
    }
}
