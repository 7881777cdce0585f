//! JSON run reports and the on-disk field cache. Reports serialize with
//! sorted keys, so identical runs are byte-identical except for the
//! timestamps, which all live under the single "meta" key.

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::classifier::{Classification, Verdict};
use crate::dominating::{DominatingSolution, Event, Side};
use crate::solver::DecouplingField;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Assembles the standard report envelope around a module payload.
pub fn run_report(
    command: &str,
    spec_hash: Option<&str>,
    payload: Value,
    error: Option<String>,
) -> Value {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let mut map = Map::new();
    map.insert("command".into(), json!(command));
    if let Some(h) = spec_hash {
        map.insert("spec_hash".into(), json!(h));
    }
    map.insert("version".into(), json!(TOOL_VERSION));
    map.insert("meta".into(), json!({ "timestamp_unix": now }));
    if let Some(e) = error {
        map.insert("error".into(), json!(e));
    } else {
        map.insert("result".into(), payload);
    }
    Value::Object(map)
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

pub fn classification_json(cl: &Classification) -> Value {
    let (verdict, extra): (&str, Option<(&str, f64)>) = match cl.verdict {
        Verdict::SolvableAllT => ("SolvableAllT", None),
        Verdict::SolvableUpTo { t_star } => ("SolvableUpTo", Some(("t_star", t_star))),
        Verdict::NotSolvableAllT => ("NotSolvableAllT", None),
        Verdict::SolvableGivenT { t } => ("SolvableGivenT", Some(("t", t))),
        Verdict::Inconclusive => ("Inconclusive", None),
    };
    let mut map = Map::new();
    map.insert("verdict".into(), json!(verdict));
    if let Some((k, v)) = extra {
        map.insert(k.into(), json!(v));
    }
    if let Some(rule) = &cl.fired_rule {
        map.insert("fired_rule".into(), json!(rule));
    }
    if !cl.attempted.is_empty() {
        map.insert("attempted".into(), json!(cl.attempted));
    }
    if let Some((lo, hi)) = cl.bracket {
        map.insert("bracket".into(), json!([lo, hi]));
    }
    if let Some(p) = cl.p_max {
        map.insert("p_max".into(), finite_or_null(p));
        if !p.is_finite() {
            map.insert("p_max_unbounded".into(), json!(true));
        }
    }
    if let Some(t) = cl.t_star {
        map.insert("t_star_diagnostic".into(), json!(t));
    }
    Value::Object(map)
}

pub fn event_json(event: &Event) -> Value {
    let side = |s: &Side| match s {
        Side::Upper => "upper",
        Side::Lower => "lower",
    };
    match event {
        Event::None => json!({ "kind": "none" }),
        Event::BlowUp { t_star, side: s } => {
            json!({ "kind": "blow_up", "t_star": t_star, "side": side(s) })
        }
        Event::SingularHit { t_star, side: s } => {
            json!({ "kind": "singular_hit", "t_star": t_star, "side": side(s) })
        }
    }
}

pub fn dominating_json(sol: &DominatingSolution) -> Value {
    json!({
        "event": event_json(&sol.event),
        "t_min": sol.t_grid.first(),
        "y_upper_start": sol.y_upper.first(),
        "y_lower_start": sol.y_lower.first(),
        "points": sol.t_grid.len(),
    })
}

/// Cache directory: FBSDE_CACHE_DIR, else .fbsde-cache under the current
/// directory.
pub fn cache_dir() -> PathBuf {
    std::env::var_os("FBSDE_CACHE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".fbsde-cache"))
}

/// Content hash for the field cache: spec text plus the grid options that
/// affect the result.
pub fn field_cache_key(spec_text: &str, options_fingerprint: &str) -> String {
    sha256_hex(format!("{spec_text}\u{0}{options_fingerprint}").as_bytes())
}

pub fn load_cached_field(key: &str) -> Option<DecouplingField> {
    let path = cache_dir().join(format!("{key}.json"));
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn store_cached_field(key: &str, field: &DecouplingField) -> std::io::Result<()> {
    let dir = cache_dir();
    std::fs::create_dir_all(&dir)?;
    let text = serde_json::to_string(field).map_err(std::io::Error::other)?;
    std::fs::write(dir.join(format!("{key}.json")), text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_keys_sorted_and_stable() {
        let r = run_report("classify", Some("abc"), json!({"b": 1, "a": 2}), None);
        let s1 = serde_json::to_string(&r).unwrap();
        // Key order is alphabetical regardless of insertion order.
        let ci = s1.find("\"command\"").unwrap();
        let mi = s1.find("\"meta\"").unwrap();
        let vi = s1.find("\"version\"").unwrap();
        assert!(ci < mi && mi < vi);
        let inner = s1.find("\"a\":2").unwrap();
        assert!(inner < s1.find("\"b\":1").unwrap());
    }

    #[test]
    fn error_replaces_result() {
        let r = run_report("solve", None, json!({}), Some("boom".into()));
        assert!(r.get("error").is_some());
        assert!(r.get("result").is_none());
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(field_cache_key("s", "o"), field_cache_key("s", "o"));
        assert_ne!(field_cache_key("s", "o"), field_cache_key("s", "p"));
    }
}
