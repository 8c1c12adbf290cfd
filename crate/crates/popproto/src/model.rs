//! Core domain types: protocols (plain and with shutdown requests),
//! configurations, and the initial-input augmentation used by the verifier.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// Reserved token naming the shutdown state and its output value.
///
/// Protocols in shutdown mode must map their shutdown state to this output
/// token; specification formulas may not mention it.
pub const BOT_TOKEN: &str = "_BOT_";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid token `{0}`: tokens are non-empty, contain no whitespace or '#', and are not \"->\"")]
    InvalidToken(String),
    #[error("duplicate state `{0}`")]
    DuplicateState(String),
    #[error("unknown state `{name}` in {context}")]
    UnknownState { name: String, context: String },
    #[error("protocol has no input states")]
    EmptyInputs,
    #[error("shutdown state takes part in state-changing transition `{transition}`")]
    BotNotSilent { transition: String },
    #[error("bad shutdown-state bookkeeping: {0}")]
    BotBadMaps(String),
    #[error("plain protocol declares {0}")]
    PlainModeField(&'static str),
    #[error("shutdown protocol is missing {0}")]
    MissingShutdownField(String),
}

fn check_token(s: &str) -> Result<(), ModelError> {
    if s.is_empty() || s == "->" || s.contains('#') || s.chars().any(char::is_whitespace) {
        return Err(ModelError::InvalidToken(s.to_string()));
    }
    Ok(())
}

macro_rules! token_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(Arc<str>);

        impl $name {
            pub fn new(name: impl AsRef<str>) -> Result<Self, ModelError> {
                let name = name.as_ref();
                check_token(name)?;
                Ok(Self(Arc::from(name)))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl std::str::FromStr for $name {
            type Err = ModelError;
            fn from_str(s: &str) -> Result<Self, ModelError> {
                Self::new(s)
            }
        }
    };
}

token_type! {
    /// Name of a protocol state.
    StateId
}
token_type! {
    /// A value of the output alphabet.
    OutputValue
}
token_type! {
    /// Identity of an agent in a trace.
    AgentId
}

impl StateId {
    /// The same token read as an output value.
    pub fn to_output(&self) -> OutputValue {
        OutputValue(self.0.clone())
    }
}

impl OutputValue {
    /// The same token read as a state name.
    pub fn to_state(&self) -> StateId {
        StateId(self.0.clone())
    }
}

/// An ordered interaction rule: the left pair of states is replaced by the
/// right pair, first position with first position.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Transition {
    pub lhs: (StateId, StateId),
    pub rhs: (StateId, StateId),
}

impl Transition {
    pub fn new(q1: StateId, q2: StateId, r1: StateId, r2: StateId) -> Self {
        Transition { lhs: (q1, q2), rhs: (r1, r2) }
    }

    /// A do-nothing transition leaves both participants unchanged.
    pub fn is_silent(&self) -> bool {
        self.lhs == self.rhs
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} -> {} {}", self.lhs.0, self.lhs.1, self.rhs.0, self.rhs.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Plain,
    Shutdown,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Plain => f.write_str("plain"),
            Mode::Shutdown => f.write_str("shutdown"),
        }
    }
}

/// One state declaration of an unvalidated protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawState {
    pub name: String,
    pub output: String,
    pub shutdown: Option<String>,
    pub input: bool,
}

impl RawState {
    pub fn new(name: impl Into<String>, output: impl Into<String>) -> Self {
        RawState { name: name.into(), output: output.into(), shutdown: None, input: false }
    }

    pub fn input(mut self) -> Self {
        self.input = true;
        self
    }

    pub fn shutdown(mut self, target: impl Into<String>) -> Self {
        self.shutdown = Some(target.into());
        self
    }
}

/// An unvalidated protocol description, as parsed from a file or built
/// programmatically. `validate` turns it into a [`Protocol`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawProtocol {
    pub name: String,
    pub mode: Option<Mode>,
    pub states: Vec<RawState>,
    pub bot: Option<String>,
    pub transitions: Vec<[String; 4]>,
}

impl RawProtocol {
    pub fn new(name: impl Into<String>, mode: Mode) -> Self {
        RawProtocol { name: name.into(), mode: Some(mode), ..Default::default() }
    }

    pub fn state(mut self, s: RawState) -> Self {
        self.states.push(s);
        self
    }

    pub fn trans(mut self, q1: &str, q2: &str, r1: &str, r2: &str) -> Self {
        self.transitions.push([q1.into(), q2.into(), r1.into(), r2.into()]);
        self
    }

    pub fn bot(mut self, name: impl Into<String>) -> Self {
        self.bot = Some(name.into());
        self
    }

    pub fn validate(self) -> Result<Protocol, ModelError> {
        validate_protocol(self)
    }
}

/// Checks every protocol invariant and produces an immutable [`Protocol`],
/// or reports the first violated invariant.
pub fn validate_protocol(raw: RawProtocol) -> Result<Protocol, ModelError> {
    check_token(&raw.name)?;
    let mode = raw.mode.unwrap_or(Mode::Plain);

    let mut states = Vec::with_capacity(raw.states.len());
    let mut seen = BTreeSet::new();
    for s in &raw.states {
        let id = StateId::new(&s.name)?;
        if !seen.insert(id.clone()) {
            return Err(ModelError::DuplicateState(s.name.clone()));
        }
        states.push(id);
    }

    let lookup = |name: &str, context: &str| -> Result<StateId, ModelError> {
        let id = StateId::new(name)?;
        if seen.contains(&id) {
            Ok(id)
        } else {
            Err(ModelError::UnknownState { name: name.to_string(), context: context.to_string() })
        }
    };

    let mut output = BTreeMap::new();
    let mut inputs = BTreeSet::new();
    for s in &raw.states {
        let id = StateId::new(&s.name)?;
        output.insert(id.clone(), OutputValue::new(&s.output)?);
        if s.input {
            inputs.insert(id);
        }
    }
    if inputs.is_empty() {
        return Err(ModelError::EmptyInputs);
    }

    let mut transitions = Vec::with_capacity(raw.transitions.len());
    for t in &raw.transitions {
        let q1 = lookup(&t[0], "transition")?;
        let q2 = lookup(&t[1], "transition")?;
        let r1 = lookup(&t[2], "transition")?;
        let r2 = lookup(&t[3], "transition")?;
        transitions.push(Transition::new(q1, q2, r1, r2));
    }
    transitions.sort();
    transitions.dedup();

    let (bot, shutdown_map) = match mode {
        Mode::Plain => {
            if raw.bot.is_some() {
                return Err(ModelError::PlainModeField("a bot state"));
            }
            if let Some(s) = raw.states.iter().find(|s| s.shutdown.is_some()) {
                let _ = s;
                return Err(ModelError::PlainModeField("shutdown targets"));
            }
            (None, None)
        }
        Mode::Shutdown => {
            let bot_name = raw
                .bot
                .as_deref()
                .ok_or_else(|| ModelError::MissingShutdownField("a bot declaration".into()))?;
            let bot = lookup(bot_name, "bot declaration")?;
            let mut map = BTreeMap::new();
            for s in &raw.states {
                let target = s.shutdown.as_deref().ok_or_else(|| {
                    ModelError::MissingShutdownField(format!("a shutdown target on state `{}`", s.name))
                })?;
                let from = StateId::new(&s.name)?;
                map.insert(from, lookup(target, "shutdown target")?);
            }
            if !inputs.contains(&bot) {
                return Err(ModelError::BotBadMaps(format!(
                    "shutdown state `{bot}` must be an input state"
                )));
            }
            if output.get(&bot).map(OutputValue::as_str) != Some(BOT_TOKEN) {
                return Err(ModelError::BotBadMaps(format!(
                    "shutdown state `{bot}` must have output `{BOT_TOKEN}`"
                )));
            }
            if map.get(&bot) != Some(&bot) {
                return Err(ModelError::BotBadMaps(format!(
                    "shutdown request must map `{bot}` to itself"
                )));
            }
            for t in &transitions {
                if (t.lhs.0 == bot || t.lhs.1 == bot) && !t.is_silent() {
                    return Err(ModelError::BotNotSilent { transition: t.to_string() });
                }
            }
            (Some(bot), Some(map))
        }
    };

    let output_alphabet = output.values().cloned().collect();

    Ok(Protocol {
        name: raw.name,
        states,
        transitions,
        inputs,
        output_alphabet,
        output,
        mode,
        shutdown_map,
        bot,
    })
}

/// A validated population protocol. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocol {
    name: String,
    states: Vec<StateId>,
    transitions: Vec<Transition>,
    inputs: BTreeSet<StateId>,
    output_alphabet: BTreeSet<OutputValue>,
    output: BTreeMap<StateId, OutputValue>,
    mode: Mode,
    shutdown_map: Option<BTreeMap<StateId, StateId>>,
    bot: Option<StateId>,
}

impl Protocol {
    pub fn name(&self) -> &str {
        &self.name
    }

    /// States in declaration order.
    pub fn states(&self) -> &[StateId] {
        &self.states
    }

    /// Transitions in sorted order, deduplicated.
    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn inputs(&self) -> &BTreeSet<StateId> {
        &self.inputs
    }

    pub fn output_alphabet(&self) -> &BTreeSet<OutputValue> {
        &self.output_alphabet
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn bot(&self) -> Option<&StateId> {
        self.bot.as_ref()
    }

    pub fn is_bot(&self, q: &StateId) -> bool {
        self.bot.as_ref() == Some(q)
    }

    pub fn has_state(&self, q: &StateId) -> bool {
        self.output.contains_key(q)
    }

    pub fn is_input(&self, q: &StateId) -> bool {
        self.inputs.contains(q)
    }

    pub fn output_of(&self, q: &StateId) -> Option<&OutputValue> {
        self.output.get(q)
    }

    pub fn shutdown_of(&self, q: &StateId) -> Option<&StateId> {
        self.shutdown_map.as_ref().and_then(|m| m.get(q))
    }

    /// Input states without the shutdown state; these are the states an
    /// input configuration may populate.
    pub fn non_bot_inputs(&self) -> Vec<&StateId> {
        self.inputs.iter().filter(|q| !self.is_bot(q)).collect()
    }

    /// Back to a raw description, e.g. for mutation or renaming.
    pub fn to_raw(&self) -> RawProtocol {
        RawProtocol {
            name: self.name.clone(),
            mode: Some(self.mode),
            states: self
                .states
                .iter()
                .map(|q| RawState {
                    name: q.as_str().to_string(),
                    output: self.output[q].as_str().to_string(),
                    shutdown: self
                        .shutdown_map
                        .as_ref()
                        .map(|m| m[q].as_str().to_string()),
                    input: self.inputs.contains(q),
                })
                .collect(),
            bot: self.bot.as_ref().map(|b| b.as_str().to_string()),
            transitions: self
                .transitions
                .iter()
                .map(|t| {
                    [
                        t.lhs.0.as_str().into(),
                        t.lhs.1.as_str().into(),
                        t.rhs.0.as_str().into(),
                        t.rhs.1.as_str().into(),
                    ]
                })
                .collect(),
        }
    }

    /// Adds a do-nothing transition for every ordered pair of states.
    /// Idempotent; never removes transitions.
    pub fn normalize_silent(&self) -> Protocol {
        let mut out = self.clone();
        for q1 in &self.states {
            for q2 in &self.states {
                out.transitions
                    .push(Transition::new(q1.clone(), q2.clone(), q1.clone(), q2.clone()));
            }
        }
        out.transitions.sort();
        out.transitions.dedup();
        out
    }

    /// True when every ordered pair has its do-nothing transition.
    pub fn is_normalized(&self) -> bool {
        let set: BTreeSet<&Transition> = self.transitions.iter().collect();
        self.states.iter().all(|q1| {
            self.states.iter().all(|q2| {
                set.contains(&Transition::new(q1.clone(), q2.clone(), q1.clone(), q2.clone()))
            })
        })
    }
}

/// A multiset of states: the verifier's (unaugmented) notion of a
/// configuration. Zero counts are not stored.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Configuration {
    counts: BTreeMap<StateId, u64>,
}

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (StateId, u64)>) -> Self {
        let mut c = Configuration::new();
        for (q, k) in counts {
            c.add(q, k);
        }
        c
    }

    /// `n` agents all in state `q`.
    pub fn uniform(q: StateId, n: u64) -> Self {
        Self::from_counts([(q, n)])
    }

    pub fn add(&mut self, q: StateId, k: u64) {
        if k > 0 {
            *self.counts.entry(q).or_insert(0) += k;
        }
    }

    pub fn count(&self, q: &StateId) -> u64 {
        self.counts.get(q).copied().unwrap_or(0)
    }

    pub fn size(&self) -> u64 {
        self.counts.values().sum()
    }

    /// States with nonzero count.
    pub fn support(&self) -> impl Iterator<Item = &StateId> {
        self.counts.keys()
    }

    pub fn counts(&self) -> &BTreeMap<StateId, u64> {
        &self.counts
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.counts.is_empty() {
            return f.write_str("(empty)");
        }
        let mut first = true;
        for (q, k) in &self.counts {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{q}:{k}")?;
            first = false;
        }
        Ok(())
    }
}

/// States assigned to named agents; used by traces, where agent identity
/// matters. Projects onto a [`Configuration`] of the same size.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AgentConfiguration {
    assignment: BTreeMap<AgentId, StateId>,
}

impl AgentConfiguration {
    pub fn new() -> Self {
        Self::default()
    }

    /// Agents named "1".."n", one per entry of `states`.
    pub fn numbered(states: &[StateId]) -> Self {
        let mut c = AgentConfiguration::new();
        for (i, q) in states.iter().enumerate() {
            c.insert(AgentId::new((i + 1).to_string()).expect("numeric id"), q.clone());
        }
        c
    }

    pub fn insert(&mut self, a: AgentId, q: StateId) {
        self.assignment.insert(a, q);
    }

    pub fn get(&self, a: &AgentId) -> Option<&StateId> {
        self.assignment.get(a)
    }

    pub fn remove(&mut self, a: &AgentId) -> Option<StateId> {
        self.assignment.remove(a)
    }

    pub fn contains(&self, a: &AgentId) -> bool {
        self.assignment.contains_key(a)
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        self.assignment.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&AgentId, &StateId)> {
        self.assignment.iter()
    }

    pub fn to_configuration(&self) -> Configuration {
        let mut c = Configuration::new();
        for q in self.assignment.values() {
            c.add(q.clone(), 1);
        }
        c
    }
}

impl fmt::Display for AgentConfiguration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.assignment.is_empty() {
            return f.write_str("(empty)");
        }
        let mut first = true;
        for (a, q) in &self.assignment {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{a}:{q}")?;
            first = false;
        }
        Ok(())
    }
}

/// Index of an agent class of an [`AugmentedProtocol`]: one value per
/// (initial state, current state, requested flag) combination.
pub type ClassId = u32;

/// View of one agent class. `initial` is `None` for agents whose starting
/// state was not recorded (starts outside the input states).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugClass<'a> {
    pub initial: Option<&'a StateId>,
    pub current: &'a StateId,
    pub requested: bool,
}

/// A protocol lifted to agent classes that remember each agent's initial
/// input state and whether it has received a shutdown request. Transitions
/// act on the current component only; the other components are bookkeeping
/// that protocol steps never change.
#[derive(Debug, Clone)]
pub struct AugmentedProtocol {
    base: Protocol,
    state_ix: HashMap<StateId, u16>,
    // indices into base.transitions, as state-index quadruples
    transitions_ix: Vec<[u16; 4]>,
    // non-silent transition indices grouped by left state pair
    by_lhs: HashMap<(u16, u16), Vec<u32>>,
    shutdown_ix: Vec<u16>,
    bot_ix: Option<u16>,
}

/// Lifts `p` to its input-tracking form. See [`AugmentedProtocol`].
pub fn augment_with_inputs(p: &Protocol) -> AugmentedProtocol {
    AugmentedProtocol::new(p)
}

impl AugmentedProtocol {
    pub fn new(p: &Protocol) -> Self {
        let state_ix: HashMap<StateId, u16> = p
            .states()
            .iter()
            .enumerate()
            .map(|(i, q)| (q.clone(), i as u16))
            .collect();
        let transitions_ix: Vec<[u16; 4]> = p
            .transitions()
            .iter()
            .map(|t| {
                [
                    state_ix[&t.lhs.0],
                    state_ix[&t.lhs.1],
                    state_ix[&t.rhs.0],
                    state_ix[&t.rhs.1],
                ]
            })
            .collect();
        let mut by_lhs: HashMap<(u16, u16), Vec<u32>> = HashMap::new();
        for (i, (t, ix)) in p.transitions().iter().zip(&transitions_ix).enumerate() {
            if !t.is_silent() {
                by_lhs.entry((ix[0], ix[1])).or_default().push(i as u32);
            }
        }
        let shutdown_ix = p
            .states()
            .iter()
            .map(|q| p.shutdown_of(q).map(|t| state_ix[t]).unwrap_or(0))
            .collect();
        let bot_ix = p.bot().map(|b| state_ix[b]);
        AugmentedProtocol { base: p.clone(), state_ix, transitions_ix, by_lhs, shutdown_ix, bot_ix }
    }

    pub fn base(&self) -> &Protocol {
        &self.base
    }

    fn state_count(&self) -> u32 {
        self.base.states().len() as u32
    }

    /// Total number of representable agent classes.
    pub fn class_count(&self) -> u32 {
        (self.state_count() + 1) * self.state_count() * 2
    }

    fn encode(&self, initial_code: u32, current: u32, requested: bool) -> ClassId {
        (initial_code * self.state_count() + current) * 2 + requested as u32
    }

    fn decode(&self, c: ClassId) -> (u32, u32, bool) {
        let requested = c % 2 == 1;
        let rest = c / 2;
        (rest / self.state_count(), rest % self.state_count(), requested)
    }

    pub fn class(&self, c: ClassId) -> AugClass<'_> {
        let (init, cur, requested) = self.decode(c);
        AugClass {
            initial: if init == 0 { None } else { Some(&self.base.states()[(init - 1) as usize]) },
            current: &self.base.states()[cur as usize],
            requested,
        }
    }

    /// Class of an agent at construction time.
    pub fn agent_class(
        &self,
        initial: Option<&StateId>,
        current: &StateId,
        requested: bool,
    ) -> Option<ClassId> {
        let cur = *self.state_ix.get(current)? as u32;
        let init = match initial {
            None => 0,
            Some(q) => *self.state_ix.get(q)? as u32 + 1,
        };
        Some(self.encode(init, cur, requested))
    }

    /// Class of a fresh agent starting in input state `q`.
    pub fn input_class(&self, q: &StateId) -> Option<ClassId> {
        if !self.base.is_input(q) {
            return None;
        }
        self.agent_class(Some(q), q, false)
    }

    /// Classes usable in input configurations: one per non-bot input state.
    pub fn input_classes(&self) -> Vec<ClassId> {
        self.base
            .non_bot_inputs()
            .into_iter()
            .map(|q| self.input_class(q).expect("input state"))
            .collect()
    }

    pub fn current_of(&self, c: ClassId) -> &StateId {
        let (_, cur, _) = self.decode(c);
        &self.base.states()[cur as usize]
    }

    pub fn output_of_class(&self, c: ClassId) -> &OutputValue {
        self.base.output_of(self.current_of(c)).expect("total output map")
    }

    pub fn is_bot_current(&self, c: ClassId) -> bool {
        let (_, cur, _) = self.decode(c);
        Some(cur as u16) == self.bot_ix
    }

    pub fn is_requested(&self, c: ClassId) -> bool {
        c % 2 == 1
    }

    /// Non-silent base transitions whose left pair matches the current
    /// components of `(c1, c2)`.
    pub fn matching_transitions(&self, c1: ClassId, c2: ClassId) -> &[u32] {
        let (_, cur1, _) = self.decode(c1);
        let (_, cur2, _) = self.decode(c2);
        self.by_lhs
            .get(&(cur1 as u16, cur2 as u16))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn transition(&self, idx: u32) -> &Transition {
        &self.base.transitions()[idx as usize]
    }

    /// Applies base transition `idx` to the pair of classes, updating only
    /// the current components.
    pub fn apply_transition(&self, c1: ClassId, c2: ClassId, idx: u32) -> (ClassId, ClassId) {
        let t = self.transitions_ix[idx as usize];
        let (i1, cur1, r1) = self.decode(c1);
        let (i2, cur2, r2) = self.decode(c2);
        debug_assert_eq!(cur1 as u16, t[0]);
        debug_assert_eq!(cur2 as u16, t[1]);
        (
            self.encode(i1, t[2] as u32, r1),
            self.encode(i2, t[3] as u32, r2),
        )
    }

    /// Applies the shutdown request function to the current component and
    /// marks the class requested. Shutdown mode only.
    pub fn request_class(&self, c: ClassId) -> ClassId {
        let (init, cur, _) = self.decode(c);
        let target = self.shutdown_ix[cur as usize] as u32;
        self.encode(init, target, true)
    }
}
