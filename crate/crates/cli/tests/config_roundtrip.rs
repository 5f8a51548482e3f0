use std::collections::BTreeMap;

use mvbismut_cli::config::{
    EstimatorKind, FSpec, GChoice, GridConfig, LawSpec, ModelConfig, PhiSpec, ScenarioConfig, SCHEMA_VERSION,
};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6f64..1e6, any::<f64>().prop_filter("finite", |x| x.is_finite())]
}

fn law() -> impl Strategy<Value = LawSpec> {
    prop_oneof![
        (prop::collection::vec(finite(), 1..4), prop::collection::vec(0.0f64..10.0, 1..4))
            .prop_map(|(mean, std)| LawSpec::Gaussian { mean, std }),
        prop::collection::vec(finite(), 1..4).prop_map(|point| LawSpec::Dirac { point }),
    ]
}

fn phi() -> impl Strategy<Value = PhiSpec> {
    prop_oneof![
        prop::collection::vec(finite(), 1..4).prop_map(|value| PhiSpec::Constant { value }),
        (prop::collection::vec(prop::collection::vec(finite(), 2), 2), prop::collection::vec(finite(), 2))
            .prop_map(|(matrix, offset)| PhiSpec::Linear { matrix, offset }),
        "[a-z_]{1,12}".prop_map(|name| PhiSpec::Named { name }),
    ]
}

fn f_spec() -> impl Strategy<Value = FSpec> {
    prop_oneof![
        finite().prop_map(|value| FSpec::Constant { value }),
        (0usize..4).prop_map(|index| FSpec::Coordinate { index }),
        (0usize..4, prop::collection::vec(finite(), 1..5))
            .prop_map(|(index, coefficients)| FSpec::Polynomial { index, coefficients }),
        (0usize..4, finite()).prop_map(|(index, threshold)| FSpec::Indicator { index, threshold }),
        "[a-z_]{1,12}".prop_map(|name| FSpec::Named { name }),
    ]
}

fn config() -> impl Strategy<Value = ScenarioConfig> {
    let kinds = prop::sample::subsequence(
        vec![
            EstimatorKind::Bismut,
            EstimatorKind::Degenerate,
            EstimatorKind::Pathwise,
            EstimatorKind::FiniteDifference,
        ],
        0..=4,
    );
    (
        ("[a-z0-9_]{1,16}", "[a-z0-9_]{1,16}", prop::collection::btree_map("[a-z]{1,6}", finite(), 0..4)),
        (1e-3f64..100.0, 1usize..10_000, 2usize..1_000_000, any::<u64>()),
        (prop::option::of(law()), prop::option::of(law()), phi(), f_spec()),
        (kinds, 1e-8f64..1.0, any::<bool>(), any::<bool>(), prop::option::of("[a-z/._]{1,20}")),
    )
        .prop_map(
            |((id, model_id, params), (horizon, n_steps, particles, seed), (initial, comparison, phi, f), rest)| {
                let (estimators, epsilon, smooth, centered, output) = rest;
                ScenarioConfig {
                    version: SCHEMA_VERSION,
                    id,
                    model: ModelConfig { id: model_id, params: params.into_iter().collect::<BTreeMap<_, _>>() },
                    grid: GridConfig { horizon, n_steps },
                    particles,
                    seed,
                    initial,
                    comparison,
                    phi,
                    f,
                    estimators,
                    epsilon,
                    g: if smooth { GChoice::Smoothstep } else { GChoice::Linear },
                    centered,
                    output: output.map(Into::into),
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    // Round-trip holds for any well-formed document, valid for a run or not.
    #[test]
    fn parse_serialize_parse_is_identity(cfg in config()) {
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let once: ScenarioConfig = serde_json::from_str(&text).unwrap();
        let again: ScenarioConfig = serde_json::from_str(&serde_json::to_string(&once).unwrap()).unwrap();
        prop_assert_eq!(&once, &cfg);
        prop_assert_eq!(once, again);
    }
}

#[test]
fn unknown_fields_are_rejected() {
    let mut v: serde_json::Value = serde_json::from_str(&ScenarioConfig::mean_field_ou().to_json()).unwrap();
    v["particels"] = 10.into();
    let err = ScenarioConfig::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("particels"), "{err}");
}

#[test]
fn version_mismatch_is_a_field_error() {
    let mut cfg = ScenarioConfig::mean_field_ou();
    cfg.version = 2;
    let err = ScenarioConfig::from_json(&cfg.to_json()).unwrap_err().to_string();
    assert!(err.contains("version: unsupported schema version 2"), "{err}");
}
