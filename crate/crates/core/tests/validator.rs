use std::path::Path;

use fedlab_core::experiment::{parse_experiment, validate_layers, Layer, ParseError, Severity};
use fedlab_core::scenarios;
use serde::Deserialize;
use serde_json::Value;

#[derive(Deserialize)]
struct Tag {
    layer: Layer,
    code: String,
    severity: Severity,
}

#[derive(Deserialize)]
struct Case {
    document: String,
    seeded: Tag,
    expected: Vec<Tag>,
}

fn fixtures() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/validator"))
}

#[test]
fn corpus_issues_match_exactly() {
    let reg = scenarios::sites();
    let cases: Vec<Case> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("expected.json")).unwrap()).unwrap();
    assert_eq!(cases.len(), 10);
    for case in cases {
        let text = std::fs::read_to_string(fixtures().join(&case.document)).unwrap();
        let report = validate_layers(&parse_experiment(&text).unwrap(), &reg);
        let mut got: Vec<(Layer, String, Severity)> =
            report.issues().map(|(l, i)| (l, i.code.clone(), i.severity)).collect();
        let mut want: Vec<(Layer, String, Severity)> =
            case.expected.iter().map(|t| (t.layer, t.code.clone(), t.severity)).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want, "{}", case.document);
        let (layer, issue) = report.find(&case.seeded.code).unwrap();
        assert_eq!((layer, issue.severity), (case.seeded.layer, case.seeded.severity), "{}", case.document);
    }
}

#[test]
fn bundled_scenarios_are_clean() {
    let reg = scenarios::sites();
    for exp in [scenarios::demo(), scenarios::wr_coupled(), scenarios::wr_uncoupled()] {
        let report = validate_layers(&exp, &reg);
        assert_eq!(report.issues().count(), 0, "{}:\n{}", exp.id, report.to_text());
    }
}

#[test]
fn report_text_lists_every_layer() {
    let text = validate_layers(&scenarios::demo(), &scenarios::sites()).to_text();
    for l in Layer::ALL {
        assert!(text.contains(&format!("{:<11} ok", l.as_str())), "{text}");
    }
    assert!(text.ends_with("0 error(s), 0 warning(s)\n"));
}

fn demo_value() -> Value {
    serde_json::from_str(scenarios::DEMO_JSON).unwrap()
}

#[test]
fn syntax_errors_carry_a_position() {
    let err = parse_experiment("{\n  \"id\": \"x\",\n  oops\n}").unwrap_err();
    let ParseError::Syntax { line, .. } = err else { panic!("{err:?}") };
    assert_eq!(line, 3);
}

#[test]
fn schema_errors_have_stable_codes() {
    let mut v = demo_value();
    v.as_object_mut().unwrap().remove("participants");
    assert_eq!(parse_experiment(&v.to_string()).unwrap_err().code(), "missing-field");

    let mut v = demo_value();
    v["colour"] = "blue".into();
    assert_eq!(parse_experiment(&v.to_string()).unwrap_err().code(), "unknown-field");

    let mut v = demo_value();
    v["sync"] = "optimistic".into();
    assert_eq!(parse_experiment(&v.to_string()).unwrap_err().code(), "unknown-variant");

    let mut v = demo_value();
    let p = v["participants"][0].clone();
    v["participants"].as_array_mut().unwrap().push(p);
    assert_eq!(parse_experiment(&v.to_string()).unwrap_err().code(), "duplicate-participant");

    let mut v = demo_value();
    v["duration_ns"] = 1_000_000_001u64.into();
    assert_eq!(parse_experiment(&v.to_string()).unwrap_err().code(), "duration-not-multiple");
}

#[test]
fn errors_and_warnings_are_counted_separately() {
    let mut exp = scenarios::demo();
    exp.routes.retain(|r| r.to.participant != "der");
    let report = validate_layers(&exp, &scenarios::sites());
    assert!(report.is_valid(), "an unrouted input with a default only warns");
    assert_eq!(report.errors(), 0);
    assert_eq!(report.warnings(), 1);
    assert_eq!(report.find("unrouted-input").unwrap().0, Layer::Semantical);
}
