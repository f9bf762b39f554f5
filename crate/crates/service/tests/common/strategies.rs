//! Proptest generators for malformed and near-valid job submissions.

use proptest::prelude::*;
use serde_json::{json, Value};

use axum::body::Body;
use axum::http::{Request, StatusCode};

use super::{assert_error_body, fixture_png, multipart, Harness, BOUNDARY};

pub fn json_leaf() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::from),
        any::<i64>().prop_map(Value::from),
        (-5.0f64..5.0).prop_map(Value::from),
        "[a-z#0-9:. ]{0,12}".prop_map(Value::from),
    ]
}

pub fn json_value() -> impl Strategy<Value = Value> {
    json_leaf().prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
            prop::collection::btree_map(
                prop_oneof![
                    Just("color_targets".to_string()),
                    Just("region".to_string()),
                    Just("color".to_string()),
                    Just("alpha".to_string()),
                    Just("concepts".to_string()),
                    Just("t_star".to_string()),
                    Just("guidance".to_string()),
                    "[a-z_]{1,8}",
                ],
                inner,
                0..4
            )
            .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

/// Specs close to valid: one field of a good document replaced by noise.
pub fn near_valid_spec() -> impl Strategy<Value = Vec<u8>> {
    (0usize..6, json_value()).prop_map(|(slot, noise)| {
        let mut doc = json!({
            "color_targets": [{"region": "lips", "color": "#B03A4A", "alpha": 0.8}],
            "inversion_steps": 4,
            "reverse_steps": 4
        });
        match slot {
            0 => doc["color_targets"][0]["alpha"] = noise,
            1 => doc["color_targets"][0]["region"] = noise,
            2 => doc["color_targets"][0]["color"] = noise,
            3 => doc["t_star"] = noise,
            4 => doc["concepts"] = noise,
            _ => doc = noise,
        }
        serde_json::to_vec(&doc).unwrap()
    })
}

pub fn image_bytes() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![
        Just(fixture_png("face-a", 32)),
        prop::collection::vec(any::<u8>(), 0..64),
        // A valid PNG header followed by garbage.
        prop::collection::vec(any::<u8>(), 0..64).prop_map(|tail| {
            let mut v = fixture_png("face-a", 32)[..40].to_vec();
            v.extend(tail);
            v
        }),
    ]
}

pub fn field_name() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("image".to_string()),
        Just("labels".to_string()),
        Just("spec".to_string()),
        Just("mapping".to_string()),
        Just("fixture".to_string()),
        Just("reference".to_string()),
        Just("reference_labels".to_string()),
        Just("backend".to_string()),
        Just("debug".to_string()),
        "[a-z]{1,6}",
    ]
}

pub fn submission() -> impl Strategy<Value = Vec<u8>> {
    prop_oneof![
        // Random parts.
        prop::collection::vec(
            (field_name(), prop_oneof![image_bytes(), near_valid_spec(), "[ -~]{0,20}".prop_map(String::into_bytes)]),
            0..5
        )
        .prop_map(|parts| {
            let parts: Vec<(&str, Vec<u8>)> = parts.iter().map(|(n, b)| (n.as_str(), b.clone())).collect();
            multipart(&parts)
        }),
        // Well-formed structure with a broken spec or image.
        (image_bytes(), near_valid_spec()).prop_map(|(img, spec)| multipart(&[("image", img), ("spec", spec)])),
        // Not multipart at all, or truncated.
        prop::collection::vec(any::<u8>(), 0..200),
        (near_valid_spec(), 0usize..200).prop_map(|(spec, cut)| {
            let body = multipart(&[("image", fixture_png("face-a", 32)), ("spec", spec)]);
            body[..cut.min(body.len())].to_vec()
        }),
    ]
}

pub fn content_type() -> impl Strategy<Value = Option<String>> {
    prop_oneof![
        4 => Just(Some(format!("multipart/form-data; boundary={BOUNDARY}"))),
        1 => Just(None),
        1 => Just(Some("application/json".to_string())),
        1 => Just(Some("multipart/form-data".to_string())),
    ]
}

/// Posts `cases` generated submissions and checks that none gets a 5xx and
/// every rejection carries a well-formed error body. Accepted jobs are
/// cancelled right away. Returns the number of accepted submissions.
pub fn fuzz_submissions(rt: &tokio::runtime::Runtime, h: &Harness, cases: u32) -> Result<usize, String> {
    let mut runner = proptest::test_runner::TestRunner::new(ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let accepted = std::cell::Cell::new(0);
    runner
        .run(&(submission(), content_type()), |(body, ctype)| {
            let (status, value) = rt.block_on(async {
                let mut req = Request::post("/api/jobs");
                if let Some(c) = &ctype {
                    req = req.header("content-type", c);
                }
                let (s, b, _) = h.send(req.body(Body::from(body)).unwrap()).await;
                (s, serde_json::from_slice::<Value>(&b).unwrap_or(Value::Null))
            });
            prop_assert!(!status.is_server_error(), "{status}: {value}");
            if status == StatusCode::ACCEPTED {
                prop_assert!(value["id"].is_string());
                accepted.set(accepted.get() + 1);
                let _ = h.svc.cancel(value["id"].as_str().unwrap());
            } else {
                prop_assert!(status.is_client_error(), "{status}");
                assert_error_body(&value);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(accepted.get())
}
