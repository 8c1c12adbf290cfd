//! Step-by-step execution: protocol steps, shutdown requests, agent removal,
//! randomized fair-like scheduling, request scripts, and traces.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{AgentConfiguration, AgentId, Configuration, Mode, Protocol, StateId, Transition};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SemanticsError {
    #[error("agents of a protocol step must differ, got `{0}` twice")]
    SameAgent(AgentId),
    #[error("agent `{agent}` is in state `{found}`, expected `{expected}`")]
    StateMismatch { agent: AgentId, expected: StateId, found: StateId },
    #[error("unknown agent `{0}`")]
    UnknownAgent(AgentId),
    #[error("plain protocols have no shutdown requests")]
    PlainModeNoRequests,
    #[error("plain protocols have no agent removal")]
    PlainModeNoRemoval,
    #[error("agent `{agent}` is in state `{state}`, not in the shutdown state")]
    NotInBot { agent: AgentId, state: StateId },
    #[error("bad request script: {0}")]
    BadScript(String),
    #[error("agent `{agent}` starts in `{state}`, which is not an input state (pass allow_arbitrary_start to permit)")]
    InitNotInputStates { agent: AgentId, state: StateId },
    #[error("trace does not replay at step {step}: {detail}")]
    ReplayMismatch { step: usize, detail: String },
}

/// One scheduler move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    /// Two distinct agents interact; `first` takes the left role of the
    /// transition, `second` the right role.
    Protocol { first: AgentId, second: AgentId, transition: Transition },
    /// The agent's state is replaced by its shutdown-request image.
    Request { agent: AgentId },
    /// An agent in the shutdown state leaves the population.
    Remove { agent: AgentId },
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Step::Protocol { first, second, transition } => {
                write!(f, "PROTOCOL {first} {second} {transition}")
            }
            Step::Request { agent } => write!(f, "REQUEST {agent}"),
            Step::Remove { agent } => write!(f, "REMOVE {agent}"),
        }
    }
}

/// A finished execution: the initial assignment plus every step taken, each
/// with the configuration it produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub initial: AgentConfiguration,
    pub steps: Vec<(Step, AgentConfiguration)>,
    /// Earliest configuration index from which every surviving agent's
    /// output stayed constant, when observed. Heuristic: a finite trace
    /// cannot prove stability.
    pub stabilization_index: Option<usize>,
    /// True when the run stopped because nothing but do-nothing steps was
    /// enabled and no request or removal was outstanding.
    pub deadlocked: bool,
}

impl Trace {
    pub fn final_config(&self) -> &AgentConfiguration {
        self.steps.last().map(|(_, c)| c).unwrap_or(&self.initial)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of request steps taken.
    pub fn requests_used(&self) -> usize {
        self.steps.iter().filter(|(s, _)| matches!(s, Step::Request { .. })).count()
    }

    /// Agents that received at least one shutdown request.
    pub fn requested_agents(&self) -> Vec<AgentId> {
        let mut out: Vec<AgentId> = self
            .steps
            .iter()
            .filter_map(|(s, _)| match s {
                Step::Request { agent } => Some(agent.clone()),
                _ => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

/// When a scripted request fires and whom it targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub after_step: usize,
    pub target: ScriptTarget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptTarget {
    Agent(AgentId),
    Any,
}

/// A schedule of shutdown requests, ordered by step count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestScript {
    entries: Vec<ScriptEntry>,
}

impl RequestScript {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, SemanticsError> {
        for w in entries.windows(2) {
            if w[1].after_step < w[0].after_step {
                return Err(SemanticsError::BadScript(
                    "request steps must be non-decreasing".into(),
                ));
            }
        }
        Ok(RequestScript { entries })
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum SchedulerKind {
    /// Uniformly random choice among enabled state-changing steps. Almost
    /// surely fair on finite configuration spaces; exact fairness is the
    /// verifier's job, never the simulator's claim.
    #[default]
    Uniform,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub scheduler: SchedulerKind,
    pub seed: u64,
    pub max_steps: usize,
    /// An agent reaching the shutdown state is removed within this many
    /// steps. 1 makes removal immediate; larger values let other steps
    /// interleave before the forced removal.
    pub removal_delay: usize,
    pub allow_arbitrary_start: bool,
    /// Steps that must follow a candidate stabilization point before it is
    /// reported; waived when the run deadlocks.
    pub stabilization_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scheduler: SchedulerKind::Uniform,
            seed: 0,
            max_steps: 10_000,
            removal_delay: 1,
            allow_arbitrary_start: false,
            stabilization_window: 100,
        }
    }
}

/// Applies transition `t` to the distinct agents `a1` (left role) and `a2`
/// (right role).
pub fn apply_protocol_step(
    c: &AgentConfiguration,
    a1: &AgentId,
    a2: &AgentId,
    t: &Transition,
) -> Result<AgentConfiguration, SemanticsError> {
    if a1 == a2 {
        return Err(SemanticsError::SameAgent(a1.clone()));
    }
    let q1 = c.get(a1).ok_or_else(|| SemanticsError::UnknownAgent(a1.clone()))?;
    let q2 = c.get(a2).ok_or_else(|| SemanticsError::UnknownAgent(a2.clone()))?;
    if q1 != &t.lhs.0 {
        return Err(SemanticsError::StateMismatch {
            agent: a1.clone(),
            expected: t.lhs.0.clone(),
            found: q1.clone(),
        });
    }
    if q2 != &t.lhs.1 {
        return Err(SemanticsError::StateMismatch {
            agent: a2.clone(),
            expected: t.lhs.1.clone(),
            found: q2.clone(),
        });
    }
    let mut out = c.clone();
    out.insert(a1.clone(), t.rhs.0.clone());
    out.insert(a2.clone(), t.rhs.1.clone());
    Ok(out)
}

/// Replaces the agent's state by its image under the shutdown request
/// function.
pub fn apply_request(
    c: &AgentConfiguration,
    a: &AgentId,
    p: &Protocol,
) -> Result<AgentConfiguration, SemanticsError> {
    if p.mode() != Mode::Shutdown {
        return Err(SemanticsError::PlainModeNoRequests);
    }
    let q = c.get(a).ok_or_else(|| SemanticsError::UnknownAgent(a.clone()))?;
    let target = p.shutdown_of(q).expect("total shutdown map").clone();
    let mut out = c.clone();
    out.insert(a.clone(), target);
    Ok(out)
}

/// Removes an agent currently in the shutdown state.
pub fn apply_removal(
    c: &AgentConfiguration,
    a: &AgentId,
    p: &Protocol,
) -> Result<AgentConfiguration, SemanticsError> {
    if p.mode() != Mode::Shutdown {
        return Err(SemanticsError::PlainModeNoRemoval);
    }
    let q = c.get(a).ok_or_else(|| SemanticsError::UnknownAgent(a.clone()))?;
    if !p.is_bot(q) {
        return Err(SemanticsError::NotInBot { agent: a.clone(), state: q.clone() });
    }
    let mut out = c.clone();
    out.remove(a);
    Ok(out)
}

/// All transition instances enabled in a configuration, as (left state pair,
/// transition). A pair (q, q) needs at least two agents in q.
pub fn enabled_protocol_steps(
    c: &Configuration,
    p: &Protocol,
) -> Vec<((StateId, StateId), Transition)> {
    let mut out = Vec::new();
    for t in p.transitions() {
        let (a, b) = (&t.lhs.0, &t.lhs.1);
        let enabled = if a == b { c.count(a) >= 2 } else { c.count(a) >= 1 && c.count(b) >= 1 };
        if enabled {
            out.push(((a.clone(), b.clone()), t.clone()));
        }
    }
    out
}

/// Runs the protocol from `init` under a seeded random scheduler, applying
/// scripted shutdown requests, removing shutdown-state agents promptly, and
/// stopping early on deadlock.
pub fn run(
    p: &Protocol,
    init: &AgentConfiguration,
    script: &RequestScript,
    cfg: &RunConfig,
) -> Result<Trace, SemanticsError> {
    if p.mode() == Mode::Plain && !script.is_empty() {
        return Err(SemanticsError::PlainModeNoRequests);
    }
    for (a, q) in init.iter() {
        if !p.has_state(q) {
            return Err(SemanticsError::StateMismatch {
                agent: a.clone(),
                expected: q.clone(),
                found: q.clone(),
            });
        }
        if !cfg.allow_arbitrary_start && !p.is_input(q) {
            return Err(SemanticsError::InitNotInputStates { agent: a.clone(), state: q.clone() });
        }
    }
    for e in script.entries() {
        if let ScriptTarget::Agent(a) = &e.target {
            if !init.contains(a) {
                return Err(SemanticsError::BadScript(format!("unknown agent `{a}`")));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = init.clone();
    let mut steps: Vec<(Step, AgentConfiguration)> = Vec::new();
    let mut entered_bot: BTreeMap<AgentId, usize> = BTreeMap::new();
    for (a, q) in init.iter() {
        if p.is_bot(q) {
            entered_bot.insert(a.clone(), 0);
        }
    }
    let mut cursor = 0usize;
    let mut deadlocked = false;
    let delay = cfg.removal_delay.max(1);

    while steps.len() < cfg.max_steps {
        let now = steps.len();

        // Scripted requests whose time has come fire before anything else.
        if cursor < script.entries().len() && script.entries()[cursor].after_step <= now {
            let entry = script.entries()[cursor].clone();
            cursor += 1;
            if let Some(step) = fire_request(&entry, &current, p, &mut rng, &mut entered_bot, now)? {
                let (s, next) = step;
                steps.push((s, next.clone()));
                current = next;
            }
            continue;
        }

        // Forced removal of agents that have waited out the delay.
        let forced = entered_bot
            .iter()
            .filter(|(_, &at)| now.saturating_sub(at) >= delay)
            .min_by_key(|(a, &at)| (at, (*a).clone()))
            .map(|(a, _)| a.clone());
        if let Some(a) = forced {
            let next = apply_removal(&current, &a, p)?;
            entered_bot.remove(&a);
            steps.push((Step::Remove { agent: a }, next.clone()));
            current = next;
            continue;
        }

        // Otherwise pick uniformly among enabled state-changing moves.
        let mut candidates: Vec<Step> = Vec::new();
        let mut by_state: BTreeMap<&StateId, Vec<&AgentId>> = BTreeMap::new();
        for (a, q) in current.iter() {
            by_state.entry(q).or_default().push(a);
        }
        for t in p.transitions() {
            if t.is_silent() {
                continue;
            }
            let firsts = by_state.get(&t.lhs.0).map(Vec::as_slice).unwrap_or(&[]);
            let seconds = by_state.get(&t.lhs.1).map(Vec::as_slice).unwrap_or(&[]);
            for &a1 in firsts {
                for &a2 in seconds {
                    if a1 != a2 {
                        candidates.push(Step::Protocol {
                            first: a1.clone(),
                            second: a2.clone(),
                            transition: t.clone(),
                        });
                    }
                }
            }
        }
        for a in entered_bot.keys() {
            candidates.push(Step::Remove { agent: a.clone() });
        }

        if let Some(step) = candidates.choose(&mut rng).cloned() {
            let next = match &step {
                Step::Protocol { first, second, transition } => {
                    let next = apply_protocol_step(&current, first, second, transition)?;
                    note_bot_entries(p, &next, &[first, second], &mut entered_bot, now + 1);
                    next
                }
                Step::Remove { agent } => {
                    let next = apply_removal(&current, agent, p)?;
                    entered_bot.remove(agent);
                    next
                }
                Step::Request { .. } => unreachable!("requests are script-driven"),
            };
            steps.push((step, next.clone()));
            current = next;
            continue;
        }

        // Nothing enabled: pull a future script entry forward, else stop.
        if cursor < script.entries().len() {
            let entry = script.entries()[cursor].clone();
            cursor += 1;
            if let Some((s, next)) =
                fire_request(&entry, &current, p, &mut rng, &mut entered_bot, now)?
            {
                steps.push((s, next.clone()));
                current = next;
            }
            continue;
        }
        deadlocked = true;
        break;
    }

    let mut trace = Trace { initial: init.clone(), steps, stabilization_index: None, deadlocked };
    trace.stabilization_index = detect_stabilization(&trace, p, cfg.stabilization_window);
    Ok(trace)
}

fn fire_request(
    entry: &ScriptEntry,
    current: &AgentConfiguration,
    p: &Protocol,
    rng: &mut ChaCha8Rng,
    entered_bot: &mut BTreeMap<AgentId, usize>,
    now: usize,
) -> Result<Option<(Step, AgentConfiguration)>, SemanticsError> {
    let target = match &entry.target {
        ScriptTarget::Agent(a) => {
            if !current.contains(a) {
                // the named agent has already been removed; the request lapses
                return Ok(None);
            }
            a.clone()
        }
        ScriptTarget::Any => {
            let alive: Vec<&AgentId> = current.agents().collect();
            match alive.choose(rng) {
                Some(a) => (*a).clone(),
                None => return Ok(None),
            }
        }
    };
    let next = apply_request(current, &target, p)?;
    note_bot_entries(p, &next, &[&target], entered_bot, now + 1);
    Ok(Some((Step::Request { agent: target }, next)))
}

fn note_bot_entries(
    p: &Protocol,
    config: &AgentConfiguration,
    touched: &[&AgentId],
    entered_bot: &mut BTreeMap<AgentId, usize>,
    at: usize,
) {
    for &a in touched {
        match config.get(a) {
            Some(q) if p.is_bot(q) => {
                entered_bot.entry(a.clone()).or_insert(at);
            }
            _ => {
                entered_bot.remove(a);
            }
        }
    }
}

/// Smallest configuration index from which every surviving agent's output
/// is constant to the end of the trace, provided at least `window` further
/// steps were observed (waived on deadlock). Reports observation only: a
/// truncated trace cannot prove stability.
pub fn detect_stabilization(tr: &Trace, p: &Protocol, window: usize) -> Option<usize> {
    let last = tr.len();
    let survivors: Vec<AgentId> = tr.final_config().agents().cloned().collect();
    let output_at = |idx: usize, a: &AgentId| {
        let config = if idx == 0 { &tr.initial } else { &tr.steps[idx - 1].1 };
        config.get(a).and_then(|q| p.output_of(q))
    };
    let mut n0 = 0usize;
    for a in &survivors {
        let final_out = output_at(last, a)?;
        let mut first_stable = last;
        while first_stable > 0 && output_at(first_stable - 1, a) == Some(final_out) {
            first_stable -= 1;
        }
        n0 = n0.max(first_stable);
    }
    if tr.deadlocked || last - n0 >= window {
        Some(n0)
    } else {
        None
    }
}

/// Re-applies every step of the trace and checks each recorded configuration,
/// including that protocol steps use transitions of `p` and preserve the
/// agent set while removals shrink it by one.
pub fn replay(tr: &Trace, p: &Protocol) -> Result<(), SemanticsError> {
    let mut current = tr.initial.clone();
    for (i, (step, recorded)) in tr.steps.iter().enumerate() {
        let mismatch = |detail: String| SemanticsError::ReplayMismatch { step: i, detail };
        let next = match step {
            Step::Protocol { first, second, transition } => {
                if !p.transitions().contains(transition) {
                    return Err(mismatch(format!("transition `{transition}` is not in the protocol")));
                }
                let next = apply_protocol_step(&current, first, second, transition)?;
                if next.len() != current.len() {
                    return Err(mismatch("protocol step changed the agent set".into()));
                }
                next
            }
            Step::Request { agent } => {
                let next = apply_request(&current, agent, p)?;
                if next.len() != current.len() {
                    return Err(mismatch("request step changed the agent set".into()));
                }
                next
            }
            Step::Remove { agent } => {
                let next = apply_removal(&current, agent, p)?;
                if next.len() + 1 != current.len() {
                    return Err(mismatch("removal did not shrink the agent set by one".into()));
                }
                next
            }
        };
        if &next != recorded {
            return Err(mismatch(format!("expected `{recorded}`, got `{next}`")));
        }
        current = next;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RawProtocol, RawState};
    use crate::protolib;
    use proptest::prelude::*;

    fn threshold3() -> Protocol {
        protolib::builtin_protocol("threshold3").unwrap()
    }

    fn parity() -> Protocol {
        protolib::builtin_protocol("parity").unwrap()
    }

    fn agent(s: &str) -> AgentId {
        AgentId::new(s).unwrap()
    }

    fn state(s: &str) -> StateId {
        StateId::new(s).unwrap()
    }

    fn config(pairs: &[(&str, &str)]) -> AgentConfiguration {
        let mut c = AgentConfiguration::new();
        for (a, q) in pairs {
            c.insert(agent(a), state(q));
        }
        c
    }

    #[test]
    fn protocol_step_in_swapped_role_order() {
        // agents (1,2,3) all in q1; agent 3 takes the left role
        let c = config(&[("1", "q1"), ("2", "q1"), ("3", "q1")]);
        let t = Transition::new(state("q1"), state("q1"), state("q0"), state("q2"));
        let next = apply_protocol_step(&c, &agent("3"), &agent("1"), &t).unwrap();
        assert_eq!(next, config(&[("1", "q2"), ("2", "q1"), ("3", "q0")]));
    }

    #[test]
    fn protocol_step_fourth_rule() {
        let c = config(&[("1", "q3"), ("2", "q0"), ("3", "q0")]);
        let t = Transition::new(state("q0"), state("q3"), state("q3"), state("q3"));
        let next = apply_protocol_step(&c, &agent("2"), &agent("1"), &t).unwrap();
        assert_eq!(next, config(&[("1", "q3"), ("2", "q3"), ("3", "q0")]));
    }

    #[test]
    fn do_nothing_step_changes_nothing() {
        let c = config(&[("1", "q1"), ("2", "q1")]);
        let t = Transition::new(state("q1"), state("q1"), state("q1"), state("q1"));
        assert_eq!(apply_protocol_step(&c, &agent("1"), &agent("2"), &t).unwrap(), c);
    }

    #[test]
    fn protocol_step_rejects_same_agent_and_mismatch() {
        let c = config(&[("1", "q1"), ("2", "q0")]);
        let t = Transition::new(state("q1"), state("q1"), state("q0"), state("q2"));
        assert!(matches!(
            apply_protocol_step(&c, &agent("1"), &agent("1"), &t),
            Err(SemanticsError::SameAgent(_))
        ));
        assert!(matches!(
            apply_protocol_step(&c, &agent("1"), &agent("2"), &t),
            Err(SemanticsError::StateMismatch { .. })
        ));
    }

    #[test]
    fn request_follows_shutdown_map() {
        let p = parity();
        let c = config(&[("1", "ODD"), ("2", "odd"), ("3", "_BOT_")]);
        let after = apply_request(&c, &agent("1"), &p).unwrap();
        assert_eq!(after.get(&agent("1")), Some(&state("even'")));
        let after = apply_request(&c, &agent("2"), &p).unwrap();
        assert_eq!(after.get(&agent("2")), Some(&state("ODD'")));
        let after = apply_request(&c, &agent("3"), &p).unwrap();
        assert_eq!(after.get(&agent("3")), Some(&state("_BOT_")));
    }

    #[test]
    fn request_rejected_in_plain_mode() {
        let p = threshold3();
        let c = config(&[("1", "q1")]);
        assert_eq!(
            apply_request(&c, &agent("1"), &p),
            Err(SemanticsError::PlainModeNoRequests)
        );
    }

    #[test]
    fn removal_semantics() {
        let p = parity();
        let c = config(&[("1", "_BOT_"), ("2", "even"), ("3", "even")]);
        let after = apply_removal(&c, &agent("1"), &p).unwrap();
        assert_eq!(after, config(&[("2", "even"), ("3", "even")]));

        assert!(matches!(
            apply_removal(&c, &agent("2"), &p),
            Err(SemanticsError::NotInBot { .. })
        ));

        // removing the last agent leaves the empty configuration
        let c = config(&[("1", "_BOT_")]);
        let after = apply_removal(&c, &agent("1"), &p).unwrap();
        assert!(after.is_empty());
    }

    #[test]
    fn enabled_steps_examples() {
        let p = threshold3();
        let c = Configuration::from_counts([(state("q0"), 1), (state("q2"), 1)]);
        assert!(enabled_protocol_steps(&c, &p).is_empty());

        let c = Configuration::from_counts([(state("q1"), 1)]);
        assert!(enabled_protocol_steps(&c, &p).is_empty());

        let c = Configuration::from_counts([(state("q1"), 2)]);
        let steps = enabled_protocol_steps(&c, &p);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].1, Transition::new(state("q1"), state("q1"), state("q0"), state("q2")));
    }

    #[test]
    fn run_size_one_deadlocks_immediately() {
        let p = threshold3();
        let init = AgentConfiguration::numbered(&[state("q1")]);
        let tr = run(&p, &init, &RequestScript::empty(), &RunConfig::default()).unwrap();
        assert_eq!(tr.len(), 0);
        assert!(tr.deadlocked);
        assert_eq!(tr.stabilization_index, Some(0));
    }

    #[test]
    fn run_threshold3_reaches_all_q3() {
        let p = threshold3();
        let init = AgentConfiguration::numbered(&[state("q1"), state("q1"), state("q1")]);
        for seed in 0..20 {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let tr = run(&p, &init, &RequestScript::empty(), &cfg).unwrap();
            assert!(tr.deadlocked, "seed {seed} did not deadlock");
            let final_counts = tr.final_config().to_configuration();
            assert_eq!(final_counts, Configuration::uniform(state("q3"), 3), "seed {seed}");
            replay(&tr, &p).unwrap();
        }
    }

    #[test]
    fn run_with_request_removes_agent() {
        let p = parity();
        let init = AgentConfiguration::numbered(&[state("ODD"), state("ODD"), state("ODD")]);
        let script = RequestScript::new(vec![ScriptEntry {
            after_step: 0,
            target: ScriptTarget::Agent(agent("1")),
        }])
        .unwrap();
        for seed in 0..20 {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let tr = run(&p, &init, &script, &cfg).unwrap();
            assert!(tr.deadlocked, "seed {seed}");
            let fin = tr.final_config();
            assert!(!fin.contains(&agent("1")), "seed {seed}: agent 1 still present");
            assert_eq!(fin.len(), 2);
            for (_, q) in fin.iter() {
                assert_eq!(p.output_of(q).unwrap().as_str(), "even", "seed {seed}");
            }
            replay(&tr, &p).unwrap();
        }
    }

    #[test]
    fn run_rejects_non_input_start() {
        let p = threshold3();
        let init = AgentConfiguration::numbered(&[state("q0")]);
        assert!(matches!(
            run(&p, &init, &RequestScript::empty(), &RunConfig::default()),
            Err(SemanticsError::InitNotInputStates { .. })
        ));
        let cfg = RunConfig { allow_arbitrary_start: true, ..RunConfig::default() };
        run(&p, &init, &RequestScript::empty(), &cfg).unwrap();
    }

    #[test]
    fn run_rejects_script_with_unknown_agent() {
        let p = parity();
        let init = AgentConfiguration::numbered(&[state("ODD")]);
        let script = RequestScript::new(vec![ScriptEntry {
            after_step: 0,
            target: ScriptTarget::Agent(agent("9")),
        }])
        .unwrap();
        assert!(matches!(
            run(&p, &init, &script, &RunConfig::default()),
            Err(SemanticsError::BadScript(_))
        ));
    }

    #[test]
    fn plain_run_never_contains_request_or_removal() {
        let p = threshold3();
        let init = AgentConfiguration::numbered(&[state("q1"); 4]);
        for seed in 0..10 {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let tr = run(&p, &init, &RequestScript::empty(), &cfg).unwrap();
            assert!(tr
                .steps
                .iter()
                .all(|(s, _)| matches!(s, Step::Protocol { .. })));
        }
    }

    #[test]
    fn detect_stabilization_on_printed_execution() {
        // the four-step run ending in all q3, checked against the
        // true/false output map
        let p = threshold3();
        let q = |s: &str| state(s);
        let configs = [
            vec![q("q1"), q("q1"), q("q1")],
            vec![q("q2"), q("q1"), q("q0")],
            vec![q("q3"), q("q0"), q("q0")],
            vec![q("q3"), q("q3"), q("q0")],
            vec![q("q3"), q("q3"), q("q3")],
        ];
        let steps = vec![
            (
                Step::Protocol {
                    first: agent("3"),
                    second: agent("1"),
                    transition: Transition::new(q("q1"), q("q1"), q("q0"), q("q2")),
                },
                AgentConfiguration::numbered(&configs[1]),
            ),
            (
                Step::Protocol {
                    first: agent("1"),
                    second: agent("2"),
                    transition: Transition::new(q("q2"), q("q1"), q("q0"), q("q3")),
                },
                AgentConfiguration::numbered(&configs[2]),
            ),
            (
                Step::Protocol {
                    first: agent("3"),
                    second: agent("1"),
                    transition: Transition::new(q("q0"), q("q3"), q("q3"), q("q3")),
                },
                AgentConfiguration::numbered(&configs[3]),
            ),
            (
                Step::Protocol {
                    first: agent("2"),
                    second: agent("1"),
                    transition: Transition::new(q("q0"), q("q3"), q("q3"), q("q3")),
                },
                AgentConfiguration::numbered(&configs[4]),
            ),
        ];
        let tr = Trace {
            initial: AgentConfiguration::numbered(&configs[0]),
            steps,
            stabilization_index: None,
            deadlocked: true,
        };
        replay(&tr, &p).unwrap();
        assert_eq!(detect_stabilization(&tr, &p, 100), Some(4));
    }

    #[test]
    fn detect_stabilization_constant_trace() {
        let p = threshold3();
        let init = AgentConfiguration::numbered(&[state("q1")]);
        let tr = Trace { initial: init, steps: vec![], stabilization_index: None, deadlocked: true };
        assert_eq!(detect_stabilization(&tr, &p, 100), Some(0));
    }

    #[test]
    fn detect_stabilization_absent_on_flapping_truncated_trace() {
        // two states with distinct outputs swapping forever
        let p = RawProtocol::new("swap", Mode::Plain)
            .state(RawState::new("a", "x").input())
            .state(RawState::new("b", "y").input())
            .trans("a", "b", "b", "a")
            .validate()
            .unwrap();
        let init = AgentConfiguration::numbered(&[state("a"), state("b")]);
        let cfg = RunConfig { max_steps: 50, stabilization_window: 5, ..RunConfig::default() };
        let tr = run(&p, &init, &RequestScript::empty(), &cfg).unwrap();
        assert!(!tr.deadlocked);
        assert_eq!(tr.len(), 50);
        assert_eq!(detect_stabilization(&tr, &p, 5), None);
    }

    #[test]
    fn statistical_fairness_threshold3_n3() {
        let p = threshold3();
        let init = AgentConfiguration::numbered(&[state("q1"), state("q1"), state("q1")]);
        let expected = Configuration::uniform(state("q3"), 3);
        for seed in 0..100 {
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let tr = run(&p, &init, &RequestScript::empty(), &cfg).unwrap();
            assert_eq!(tr.final_config().to_configuration(), expected, "seed {seed}");
        }
    }

    proptest! {
        #[test]
        fn traces_replay_and_preserve_sizes(seed in 0u64..200, n in 1u64..5) {
            let p = parity();
            let states: Vec<StateId> = (0..n).map(|_| state("ODD")).collect();
            let init = AgentConfiguration::numbered(&states);
            let script = RequestScript::new(vec![ScriptEntry { after_step: 3, target: ScriptTarget::Any }]).unwrap();
            let cfg = RunConfig { seed, max_steps: 500, ..RunConfig::default() };
            let tr = run(&p, &init, &script, &cfg).unwrap();
            replay(&tr, &p).unwrap();
            let mut size = init.len();
            for (s, c) in &tr.steps {
                match s {
                    Step::Remove { .. } => size -= 1,
                    _ => {}
                }
                prop_assert_eq!(c.len(), size);
            }
        }

        #[test]
        fn prompt_removal_keeps_bot_transient(seed in 0u64..100) {
            let p = parity();
            let init = AgentConfiguration::numbered(&[state("ODD"), state("ODD"), state("ODD")]);
            let script = RequestScript::new(vec![ScriptEntry { after_step: 0, target: ScriptTarget::Any }]).unwrap();
            let cfg = RunConfig { seed, ..RunConfig::default() };
            let tr = run(&p, &init, &script, &cfg).unwrap();
            // with removal_delay 1, a configuration containing a bot agent is
            // followed immediately by its removal
            let bot = state("_BOT_");
            let configs: Vec<&AgentConfiguration> = std::iter::once(&tr.initial)
                .chain(tr.steps.iter().map(|(_, c)| c))
                .collect();
            for (i, c) in configs.iter().enumerate() {
                let bots: Vec<&AgentId> =
                    c.iter().filter(|(_, q)| **q == bot).map(|(a, _)| a).collect();
                if let Some(a) = bots.first() {
                    prop_assert!(i < tr.steps.len(), "trace may not end with a bot agent alive");
                    // pending scripted requests fire first; otherwise the
                    // very next step removes the waiting agent
                    let (next_step, _) = &tr.steps[i];
                    match next_step {
                        Step::Request { .. } => {}
                        other => prop_assert_eq!(other, &Step::Remove { agent: (*a).clone() }),
                    }
                }
            }
        }
    }
}
