//! Canonical JSON encoding shared by every persisted artifact.
//!
//! Canonical form is UTF-8 JSON with lexicographically sorted object keys
//! and no insignificant whitespace. Encoding always goes through
//! `serde_json::Value`, whose object representation is a `BTreeMap`, so key
//! order is a property of the encoding and not of struct field order.
//!
//! Exact round-tripping of floating-point fields relies on `serde_json`'s
//! `float_roundtrip` feature (enabled in the workspace manifest); the default
//! parser may drift by one ULP, which would break byte-stable re-encoding.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Schema tag stamped into every transcript this crate writes.
pub const SCHEMA_VERSION: &str = "colm/1";

/// Encode `value` as canonical JSON (sorted keys, compact).
pub fn to_canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let tree = serde_json::to_value(value)?;
    serde_json::to_string(&tree)
}

/// Canonical JSON as bytes, for request bodies and hashing.
pub fn to_canonical_bytes<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    to_canonical_json(value).map(String::into_bytes)
}

/// Decode a value previously produced by [`to_canonical_json`] (or any JSON
/// encoding of the same type — decoding is not order sensitive).
pub fn from_json<T: DeserializeOwned>(text: &str) -> serde_json::Result<T> {
    serde_json::from_str(text)
}

/// Serde adapter storing a `Duration` as integer milliseconds.
pub mod duration_millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Duration, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_u64(value.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Duration, D::Error> {
        let millis = u64::deserialize(de)?;
        Ok(Duration::from_millis(millis))
    }
}
