//! Content-hash identifiers.
//!
//! Every stored entity is addressed by a hash of its canonical serialization,
//! so re-ingesting the same content always yields the same ids.

use serde_json::Value;
use xxhash_rust::xxh3::xxh3_128;

/// Name recorded in manifests so stores built with another hash are refused.
pub const HASH_ALGORITHM: &str = "xxh3-128";

/// Hash a canonical JSON value and render it as `<prefix>-<32 hex digits>`.
pub fn content_id(prefix: &str, canonical: &Value) -> String {
    // serde_json output is deterministic for arrays and strings, which is all
    // callers pass in.
    let bytes = serde_json::to_vec(canonical).expect("json values always serialize");
    format!("{prefix}-{:032x}", xxh3_128(&bytes))
}

/// Hex digest of raw text, used as a cache key.
pub fn text_hash(text: &str) -> String {
    format!("{:032x}", xxh3_128(text.as_bytes()))
}
