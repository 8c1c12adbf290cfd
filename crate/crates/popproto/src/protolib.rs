//! Built-in protocols and specifications used throughout the test suites and
//! reachable from the CLI as `builtin:<key>`.

use thiserror::Error;

use crate::model::{Mode, Protocol, RawProtocol, RawState, BOT_TOKEN};
use crate::specs::{parse_formula, Spec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtolibError {
    #[error("unknown builtin key `{0}` (known: {1})")]
    UnknownKey(String, String),
}

#[derive(Debug, Clone)]
pub enum ArtifactValue {
    Protocol(Protocol),
    Spec(Spec),
}

/// A built-in artifact with a short description of what it is for.
#[derive(Debug, Clone)]
pub struct NamedArtifact {
    pub key: String,
    pub value: ArtifactValue,
    pub provenance: String,
}

pub const BUILTIN_KEYS: &[&str] = &[
    "threshold3",
    "parity",
    "identity3",
    "spec:threshold3",
    "spec:parity",
    "spec:identity3",
];

/// Looks up a built-in protocol or specification by key.
pub fn builtin(key: &str) -> Result<NamedArtifact, ProtolibError> {
    let artifact = match key {
        "threshold3" => NamedArtifact {
            key: key.into(),
            value: ArtifactValue::Protocol(threshold3()),
            provenance: "four-state protocol reaching consensus on whether at least three agents started in q1".into(),
        },
        "parity" => NamedArtifact {
            key: key.into(),
            value: ArtifactValue::Protocol(parity()),
            provenance: "six-state protocol with shutdown requests that keeps one ODD witness iff the surviving population is odd".into(),
        },
        "identity3" => NamedArtifact {
            key: key.into(),
            value: ArtifactValue::Protocol(identity3()),
            provenance: "transition-free protocol whose agents report their input unchanged; neutral element for composition".into(),
        },
        "spec:threshold3" => NamedArtifact {
            key: key.into(),
            value: ArtifactValue::Spec(spec_threshold3()),
            provenance: "predicate: at least three agents started in q1".into(),
        },
        "spec:parity" => NamedArtifact {
            key: key.into(),
            value: ArtifactValue::Spec(spec_parity()),
            provenance: "odd population keeps exactly one ODD output and the rest odd; even population is all even".into(),
        },
        "spec:identity3" => NamedArtifact {
            key: key.into(),
            value: ArtifactValue::Spec(spec_identity3()),
            provenance: "every agent's output equals its input, over ODD/odd/even".into(),
        },
        _ => {
            return Err(ProtolibError::UnknownKey(
                key.to_string(),
                BUILTIN_KEYS.join(", "),
            ))
        }
    };
    Ok(artifact)
}

pub fn builtin_protocol(key: &str) -> Result<Protocol, ProtolibError> {
    match builtin(key)?.value {
        ArtifactValue::Protocol(p) => Ok(p),
        ArtifactValue::Spec(_) => Err(ProtolibError::UnknownKey(
            key.to_string(),
            "a protocol key".into(),
        )),
    }
}

pub fn builtin_spec(key: &str) -> Result<Spec, ProtolibError> {
    match builtin(key)?.value {
        ArtifactValue::Spec(s) => Ok(s),
        ArtifactValue::Protocol(_) => Err(ProtolibError::UnknownKey(
            key.to_string(),
            "a spec key".into(),
        )),
    }
}

fn threshold3() -> Protocol {
    RawProtocol::new("threshold3", Mode::Plain)
        .state(RawState::new("q0", "false"))
        .state(RawState::new("q1", "false").input())
        .state(RawState::new("q2", "false"))
        .state(RawState::new("q3", "true"))
        .trans("q1", "q1", "q0", "q2")
        .trans("q2", "q1", "q0", "q3")
        .trans("q2", "q2", "q1", "q3")
        .trans("q0", "q3", "q3", "q3")
        .trans("q1", "q3", "q3", "q3")
        .trans("q2", "q3", "q3", "q3")
        .validate()
        .expect("threshold3 builtin is valid")
}

/// The primed states mark agents that have received a shutdown request; they
/// report the unprimed output value, which is all the surviving population
/// ever stabilizes to.
fn parity() -> Protocol {
    RawProtocol::new("parity", Mode::Shutdown)
        .state(RawState::new("ODD", "ODD").input().shutdown("even'"))
        .state(RawState::new("odd", "odd").shutdown("ODD'"))
        .state(RawState::new("ODD'", "ODD").shutdown("ODD'"))
        .state(RawState::new("even", "even").shutdown("ODD'"))
        .state(RawState::new("even'", "even").shutdown("even'"))
        .state(RawState::new(BOT_TOKEN, BOT_TOKEN).input().shutdown(BOT_TOKEN))
        .bot(BOT_TOKEN)
        .trans("ODD", "ODD", "even", "even")
        .trans("ODD", "even", "ODD", "odd")
        .trans("odd", "even", "even", "even")
        .trans("ODD'", "ODD", BOT_TOKEN, "even")
        .trans("ODD'", "odd", BOT_TOKEN, "even")
        .trans("ODD'", "even", BOT_TOKEN, "ODD")
        .trans("ODD'", "ODD'", BOT_TOKEN, "even'")
        .trans("ODD'", "even'", BOT_TOKEN, "ODD'")
        .trans("even'", "ODD", BOT_TOKEN, "ODD")
        .trans("even'", "odd", BOT_TOKEN, "even")
        .trans("even'", "even", BOT_TOKEN, "even")
        .trans("even'", "ODD'", BOT_TOKEN, "ODD'")
        .trans("even'", "even'", BOT_TOKEN, "even'")
        .validate()
        .expect("parity builtin is valid")
}

/// Smallest correct shutdown-aware protocol: no interactions, identity
/// outputs, and a request sends an agent straight to the shutdown state.
fn identity3() -> Protocol {
    RawProtocol::new("identity3", Mode::Shutdown)
        .state(RawState::new("ODD", "ODD").input().shutdown(BOT_TOKEN))
        .state(RawState::new("odd", "odd").input().shutdown(BOT_TOKEN))
        .state(RawState::new("even", "even").input().shutdown(BOT_TOKEN))
        .state(RawState::new(BOT_TOKEN, BOT_TOKEN).input().shutdown(BOT_TOKEN))
        .bot(BOT_TOKEN)
        .validate()
        .expect("identity3 builtin is valid")
}

fn spec_threshold3() -> Spec {
    Spec::new(
        "threshold3",
        [crate::model::StateId::new("q1").unwrap()],
        [
            crate::model::OutputValue::new("true").unwrap(),
            crate::model::OutputValue::new("false").unwrap(),
        ],
        parse_formula("n(q1) >= 3").unwrap(),
    )
    .expect("threshold3 spec is valid")
}

fn spec_parity() -> Spec {
    Spec::new(
        "parity",
        [crate::model::StateId::new("ODD").unwrap()],
        ["ODD", "odd", "even"].map(|s| crate::model::OutputValue::new(s).unwrap()),
        parse_formula(
            "(N mod 2 = 1 && n(ODD,ODD) = 1 && n(ODD,odd) = N - 1) || (N mod 2 = 0 && n(ODD,even) = N)",
        )
        .unwrap(),
    )
    .expect("parity spec is valid")
}

fn spec_identity3() -> Spec {
    Spec::identity("identity3", ["ODD", "odd", "even"].map(String::from))
        .expect("identity3 spec is valid")
}
