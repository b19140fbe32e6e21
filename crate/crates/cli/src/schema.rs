//! Versioned JSON schema of every report and a validator for the subset of
//! JSON Schema it uses: `type`, `properties`, `required`,
//! `additionalProperties: false`, `items`, `enum`, `const`, `anyOf`,
//! `minimum` and local `$ref`s into `$defs`.
//!
//! Every object in the schema sets `additionalProperties: false`, so a report
//! carrying a field the schema does not list fails validation.

use serde_json::{json, Map, Value};

use crate::report::SCHEMA_VERSION;

fn num() -> Value {
    json!({ "type": "number" })
}

fn count() -> Value {
    json!({ "type": "integer", "minimum": 0 })
}

fn text() -> Value {
    json!({ "type": "string" })
}

fn boolean() -> Value {
    json!({ "type": "boolean" })
}

fn array(items: Value) -> Value {
    json!({ "type": "array", "items": items })
}

fn reference(name: &str) -> Value {
    json!({ "$ref": format!("#/$defs/{name}") })
}

fn nullable(v: Value) -> Value {
    json!({ "anyOf": [v, { "type": "null" }] })
}

fn one_of(values: &[&str]) -> Value {
    json!({ "enum": values })
}

/// Closed object; `optional` names may be absent.
fn object(fields: &[(&str, Value)], optional: &[&str]) -> Value {
    let properties: Map<String, Value> = fields
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    let required: Vec<&str> = fields
        .iter()
        .map(|(k, _)| *k)
        .filter(|k| !optional.contains(k))
        .collect();
    json!({
        "type": "object",
        "properties": properties,
        "required": required,
        "additionalProperties": false
    })
}

fn header(kind: &str) -> Vec<(&'static str, Value)> {
    vec![
        ("schema_version", json!({ "const": SCHEMA_VERSION })),
        ("kind", json!({ "const": kind })),
    ]
}

fn report(kind: &str, rest: Vec<(&'static str, Value)>) -> Value {
    let mut fields = header(kind);
    fields.extend(rest);
    object(&fields, &[])
}

/// The schema document shared by all commands.
pub fn report_schema() -> Value {
    let matrix = array(array(num()));
    let defs = json!({
        "matrix": matrix,
        "theta": object(&[("sigma2", num()), ("kappa", array(num())), ("n_gamma", count())], &[]),
        "likelihood": object(&[
            ("value", num()),
            ("route", one_of(&["contrast", "dense_v", "factorized_c"])),
            ("components", object(&[
                ("constant", num()),
                ("logdet_l2vl2", num()),
                ("contrast_volume", num()),
                ("logdet_v", num()),
                ("logdet_xvx", num()),
                ("logdet_r", num()),
                ("logdet_g", num()),
                ("logdet_c", num()),
                ("quadratic", num()),
            ], &["logdet_l2vl2", "contrast_volume", "logdet_v", "logdet_xvx", "logdet_r", "logdet_g", "logdet_c"])),
        ], &[]),
        "iteration": object(&[
            ("iteration", count()),
            ("theta", array(num())),
            ("loglik", num()),
            ("score_norm", num()),
            ("step_scale", num()),
            ("halvings", count()),
            ("levenberg_shift", num()),
            ("fixed", array(count())),
        ], &[]),
        "model": object(&[
            ("n", count()),
            ("p", count()),
            ("b", count()),
            ("response", text()),
            ("fixed_columns", array(text())),
            ("random_factors", array(object(&[("name", text()), ("levels", array(text()))], &[]))),
            ("residual", one_of(&["identity", "ar1", "explicit"])),
            ("parameterization", one_of(&["ratio", "components"])),
            ("names", array(text())),
        ], &[]),
        "fit": object(&[
            ("algorithm", one_of(&["newton", "fisher", "ai"])),
            ("parameterization", one_of(&["ratio", "components"])),
            ("names", array(text())),
            ("theta", reference("theta")),
            ("estimates", array(num())),
            ("standard_errors", array(nullable(num()))),
            ("loglik", reference("likelihood")),
            ("score", array(num())),
            ("information_kind", one_of(&["observed", "fisher", "average"])),
            ("information", reference("matrix")),
            ("iterations", count()),
            ("converged", boolean()),
            ("reason", one_of(&["converged", "max_iterations", "boundary_stall", "step_failure"])),
            ("fixed", array(text())),
            ("trace", array(reference("iteration"))),
        ], &[]),
        "derivatives": object(&[
            ("score", array(num())),
            ("observed", reference("matrix")),
            ("fisher", reference("matrix")),
            ("average", reference("matrix")),
            ("splitting", reference("matrix")),
        ], &[]),
        "fit_report": report("fit", vec![
            ("model", reference("model")),
            ("fit", reference("fit")),
            ("fixed_effects", array(object(&[
                ("name", text()),
                ("estimate", num()),
                ("standard_error", nullable(num())),
            ], &[]))),
            ("timing", object(&[("elapsed_seconds", num())], &[])),
        ]),
        "loglik_report": report("loglik", vec![
            ("model", reference("model")),
            ("theta", array(num())),
            ("routes", array(reference("likelihood"))),
            ("max_route_difference", num()),
        ]),
        "info_report": report("info", vec![
            ("model", reference("model")),
            ("theta", array(num())),
            ("loglik", num()),
            ("score", array(num())),
            ("average", reference("matrix")),
            ("dense", nullable(reference("derivatives"))),
        ]),
        "verify_report": report("verify", vec![
            ("n", count()),
            ("p", count()),
            ("b", count()),
            ("names", array(text())),
            ("theta", array(num())),
            ("linear", boolean()),
            ("splitting_max_abs", num()),
            ("checks", array(object(&[
                ("name", text()),
                ("residual", num()),
                ("tolerance", num()),
                ("pass", boolean()),
            ], &[]))),
            ("passed", boolean()),
        ]),
        "simulate_report": report("simulate", vec![
            ("model", reference("model")),
            ("theta", array(num())),
            ("tau", array(num())),
            ("replicates", count()),
            ("seed", count()),
            ("files", array(text())),
        ]),
        "error": object(&[("error", text()), ("message", text())], &[]),
    });
    let reports: Vec<Value> = ["fit_report", "loglik_report", "info_report", "verify_report", "simulate_report"]
        .iter()
        .map(|d| reference(d))
        .collect();
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": SCHEMA_VERSION,
        "schema_version": SCHEMA_VERSION,
        "title": "reml command reports",
        "description": "Reports written by the reml command-line tool. Objects are closed: unknown fields are rejected. The fit report's timing block is excluded from determinism comparisons. Trace files hold one `iteration` object per line.",
        "$defs": defs,
        "anyOf": reports
    })
}

/// Validates `value` against `#/$defs/{def}` of `schema`; an empty result means valid.
pub fn validate_def(schema: &Value, def: &str, value: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    match schema.pointer(&format!("/$defs/{def}")) {
        Some(s) => check(schema, s, value, "", &mut errors),
        None => errors.push(format!("schema has no definition `{def}`")),
    }
    errors
}

/// Validates a report against the definition selected by its `kind`.
pub fn validate_report(schema: &Value, value: &Value) -> Vec<String> {
    match value.get("kind").and_then(Value::as_str) {
        Some(kind) => validate_def(schema, &format!("{kind}_report"), value),
        None => vec!["report has no string `kind`".into()],
    }
}

fn type_matches(name: &str, v: &Value) -> bool {
    match name {
        "null" => v.is_null(),
        "boolean" => v.is_boolean(),
        "number" => v.is_number(),
        "integer" => v.as_i64().is_some() || v.as_u64().is_some(),
        "string" => v.is_string(),
        "array" => v.is_array(),
        "object" => v.is_object(),
        _ => false,
    }
}

fn check(root: &Value, schema: &Value, v: &Value, path: &str, errors: &mut Vec<String>) {
    let at = if path.is_empty() { "/" } else { path };
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        match r.strip_prefix('#').and_then(|p| root.pointer(p)) {
            Some(target) => check(root, target, v, path, errors),
            None => errors.push(format!("{at}: unresolved reference {r}")),
        }
        return;
    }
    if let Some(options) = schema.get("anyOf").and_then(Value::as_array) {
        let ok = options.iter().any(|o| {
            let mut sub = Vec::new();
            check(root, o, v, path, &mut sub);
            sub.is_empty()
        });
        if !ok {
            errors.push(format!("{at}: matches none of the alternatives"));
        }
    }
    if let Some(c) = schema.get("const") {
        if c != v {
            errors.push(format!("{at}: expected {c}, found {v}"));
        }
    }
    if let Some(e) = schema.get("enum").and_then(Value::as_array) {
        if !e.contains(v) {
            errors.push(format!("{at}: {v} is not one of {}", Value::Array(e.clone())));
        }
    }
    if let Some(t) = schema.get("type") {
        let ok = match t {
            Value::String(name) => type_matches(name, v),
            Value::Array(names) => names.iter().filter_map(Value::as_str).any(|n| type_matches(n, v)),
            _ => false,
        };
        if !ok {
            errors.push(format!("{at}: expected type {t}, found {v}"));
            return;
        }
    }
    if let (Some(min), Some(x)) = (schema.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            errors.push(format!("{at}: {x} is below the minimum {min}"));
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), v.as_array()) {
        for (i, item) in arr.iter().enumerate() {
            check(root, items, item, &format!("{path}/{i}"), errors);
        }
    }
    if let Some(obj) = v.as_object() {
        let props = schema.get("properties").and_then(Value::as_object);
        if let Some(required) = schema.get("required").and_then(Value::as_array) {
            for name in required.iter().filter_map(Value::as_str) {
                if !obj.contains_key(name) {
                    errors.push(format!("{at}: missing required field `{name}`"));
                }
            }
        }
        let closed = schema.get("additionalProperties") == Some(&Value::Bool(false));
        for (k, child) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(s) => check(root, s, child, &format!("{path}/{k}"), errors),
                None if closed => errors.push(format!("{at}: unknown field `{k}`")),
                None => {}
            }
        }
    }
}
