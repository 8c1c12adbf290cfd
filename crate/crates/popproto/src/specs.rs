//! Specification expressions over multisets of (input state, output value)
//! pairs: boolean combinations of linear and modular count constraints, plus
//! relational composition of two specifications.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::model::{AgentConfiguration, Configuration, OutputValue, Protocol, StateId, BOT_TOKEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpecError {
    #[error("formula syntax error: {0}")]
    Syntax(String),
    #[error("atom references pair ({input}, {output}) outside the declared alphabets")]
    UnknownPairAtom { input: String, output: String },
    #[error("the reserved token `{BOT_TOKEN}` may not appear in a specification")]
    ReservedToken,
    #[error("modulus must be >= 1 and residue in 0..modulus, got mod {modulus} = {residue}")]
    BadModulus { modulus: i64, residue: i64 },
    #[error("products must have an integer literal factor")]
    NonLinearProduct,
    #[error("pair atom n(i,o) cannot be evaluated on a bare input configuration")]
    PairAtomOnInputs,
    #[error("specification alphabets do not line up: {0}")]
    AlphabetMismatch(String),
    #[error("final configuration has agents missing from the initial one: {0}")]
    DomainMismatch(String),
    #[error("state `{0}` has no output under this protocol")]
    UnknownState(String),
    #[error("composition witness search would enumerate {candidates} multisets, above the cap of {cap}")]
    BudgetExceeded { candidates: u128, cap: u64 },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

/// Multiset of (initial input state, final output value) pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairMultiset {
    counts: BTreeMap<(StateId, OutputValue), u64>,
}

impl PairMultiset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = ((StateId, OutputValue), u64)>) -> Self {
        let mut m = PairMultiset::new();
        for ((i, o), k) in pairs {
            m.add(i, o, k);
        }
        m
    }

    pub fn add(&mut self, input: StateId, output: OutputValue, k: u64) {
        if k > 0 {
            *self.counts.entry((input, output)).or_insert(0) += k;
        }
    }

    pub fn count(&self, input: &StateId, output: &OutputValue) -> u64 {
        self.counts.get(&(input.clone(), output.clone())).copied().unwrap_or(0)
    }

    pub fn input_count(&self, input: &StateId) -> u64 {
        self.counts.iter().filter(|((i, _), _)| i == input).map(|(_, k)| k).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(StateId, OutputValue), &u64)> {
        self.counts.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

impl fmt::Display for PairMultiset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.counts.is_empty() {
            return f.write_str("{}");
        }
        f.write_str("{")?;
        let mut first = true;
        for ((i, o), k) in &self.counts {
            if !first {
                f.write_str(", ")?;
            }
            write!(f, "({i},{o}):{k}")?;
            first = false;
        }
        f.write_str("}")
    }
}

/// For each surviving agent, pairs its state in `initial` with the output of
/// its state in `final_`. Agents absent from `final_` contribute nothing.
pub fn pairs_multiset(
    initial: &AgentConfiguration,
    final_: &AgentConfiguration,
    p: &Protocol,
) -> Result<PairMultiset, SpecError> {
    let mut m = PairMultiset::new();
    for (a, qf) in final_.iter() {
        let qi = initial
            .get(a)
            .ok_or_else(|| SpecError::DomainMismatch(a.to_string()))?;
        let out = p
            .output_of(qf)
            .ok_or_else(|| SpecError::UnknownState(qf.to_string()))?;
        m.add(qi.clone(), out.clone(), 1);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CmpOp {
    Eq,
    Ne,
    Le,
    Lt,
    Ge,
    Gt,
}

impl CmpOp {
    fn apply(self, a: i128, b: i128) -> bool {
        match self {
            CmpOp::Eq => a == b,
            CmpOp::Ne => a != b,
            CmpOp::Le => a <= b,
            CmpOp::Lt => a < b,
            CmpOp::Ge => a >= b,
            CmpOp::Gt => a > b,
        }
    }

    fn token(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Le => "<=",
            CmpOp::Lt => "<",
            CmpOp::Ge => ">=",
            CmpOp::Gt => ">",
        }
    }
}

/// Integer-valued term over pair counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntExpr {
    /// n(i, o): count of one (input, output) pair.
    Pair(StateId, OutputValue),
    /// n(i): count of agents with initial input i, any output.
    Input(StateId),
    /// N: total number of pairs.
    Total,
    Lit(i64),
    Add(Box<IntExpr>, Box<IntExpr>),
    Sub(Box<IntExpr>, Box<IntExpr>),
    /// Multiplication by an integer literal.
    Scale(i64, Box<IntExpr>),
}

/// Boolean specification formula.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SpecExpr {
    True,
    False,
    Cmp(CmpOp, IntExpr, IntExpr),
    /// term mod modulus = residue
    Mod { term: IntExpr, modulus: i64, residue: i64 },
    Not(Box<SpecExpr>),
    And(Box<SpecExpr>, Box<SpecExpr>),
    Or(Box<SpecExpr>, Box<SpecExpr>),
}

enum EvalCtx<'a> {
    Pairs(&'a PairMultiset),
    Inputs(&'a Configuration),
}

fn eval_int(e: &IntExpr, ctx: &EvalCtx<'_>) -> Result<i128, SpecError> {
    Ok(match e {
        IntExpr::Pair(i, o) => match ctx {
            EvalCtx::Pairs(m) => m.count(i, o) as i128,
            EvalCtx::Inputs(_) => return Err(SpecError::PairAtomOnInputs),
        },
        IntExpr::Input(i) => match ctx {
            EvalCtx::Pairs(m) => m.input_count(i) as i128,
            EvalCtx::Inputs(c) => c.count(i) as i128,
        },
        IntExpr::Total => match ctx {
            EvalCtx::Pairs(m) => m.total() as i128,
            EvalCtx::Inputs(c) => c.size() as i128,
        },
        IntExpr::Lit(v) => *v as i128,
        IntExpr::Add(a, b) => eval_int(a, ctx)? + eval_int(b, ctx)?,
        IntExpr::Sub(a, b) => eval_int(a, ctx)? - eval_int(b, ctx)?,
        IntExpr::Scale(k, a) => (*k as i128) * eval_int(a, ctx)?,
    })
}

fn eval_bool(e: &SpecExpr, ctx: &EvalCtx<'_>) -> Result<bool, SpecError> {
    Ok(match e {
        SpecExpr::True => true,
        SpecExpr::False => false,
        SpecExpr::Cmp(op, a, b) => op.apply(eval_int(a, ctx)?, eval_int(b, ctx)?),
        SpecExpr::Mod { term, modulus, residue } => {
            let v = eval_int(term, ctx)?;
            let m = *modulus as i128;
            (v % m + m) % m == *residue as i128
        }
        SpecExpr::Not(a) => !eval_bool(a, ctx)?,
        SpecExpr::And(a, b) => eval_bool(a, ctx)? && eval_bool(b, ctx)?,
        SpecExpr::Or(a, b) => eval_bool(a, ctx)? || eval_bool(b, ctx)?,
    })
}

fn fmt_int(e: &IntExpr, f: &mut String) {
    match e {
        IntExpr::Pair(i, o) => {
            f.push_str(&format!("n({i},{o})"));
        }
        IntExpr::Input(i) => {
            f.push_str(&format!("n({i})"));
        }
        IntExpr::Total => f.push('N'),
        IntExpr::Lit(v) => f.push_str(&v.to_string()),
        IntExpr::Add(a, b) => {
            f.push('(');
            fmt_int(a, f);
            f.push_str(" + ");
            fmt_int(b, f);
            f.push(')');
        }
        IntExpr::Sub(a, b) => {
            f.push('(');
            fmt_int(a, f);
            f.push_str(" - ");
            fmt_int(b, f);
            f.push(')');
        }
        IntExpr::Scale(k, a) => {
            f.push('(');
            f.push_str(&k.to_string());
            f.push_str(" * ");
            fmt_int(a, f);
            f.push(')');
        }
    }
}

fn fmt_bool(e: &SpecExpr, f: &mut String) {
    match e {
        SpecExpr::True => f.push_str("true"),
        SpecExpr::False => f.push_str("false"),
        SpecExpr::Cmp(op, a, b) => {
            fmt_int(a, f);
            f.push(' ');
            f.push_str(op.token());
            f.push(' ');
            fmt_int(b, f);
        }
        SpecExpr::Mod { term, modulus, residue } => {
            fmt_int(term, f);
            f.push_str(&format!(" mod {modulus} = {residue}"));
        }
        SpecExpr::Not(a) => {
            f.push_str("!(");
            fmt_bool(a, f);
            f.push(')');
        }
        SpecExpr::And(a, b) => {
            f.push('(');
            fmt_bool(a, f);
            f.push_str(" && ");
            fmt_bool(b, f);
            f.push(')');
        }
        SpecExpr::Or(a, b) => {
            f.push('(');
            fmt_bool(a, f);
            f.push_str(" || ");
            fmt_bool(b, f);
            f.push(')');
        }
    }
}

impl fmt::Display for SpecExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        fmt_bool(self, &mut s);
        f.write_str(&s)
    }
}

/// A named specification: a formula together with the input and output
/// alphabets its atoms may mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spec {
    name: String,
    inputs: std::collections::BTreeSet<StateId>,
    outputs: std::collections::BTreeSet<OutputValue>,
    formula: SpecExpr,
}

impl Spec {
    pub fn new(
        name: impl Into<String>,
        inputs: impl IntoIterator<Item = StateId>,
        outputs: impl IntoIterator<Item = OutputValue>,
        formula: SpecExpr,
    ) -> Result<Self, SpecError> {
        let inputs: std::collections::BTreeSet<StateId> = inputs.into_iter().collect();
        let outputs: std::collections::BTreeSet<OutputValue> = outputs.into_iter().collect();
        if inputs.iter().any(|i| i.as_str() == BOT_TOKEN)
            || outputs.iter().any(|o| o.as_str() == BOT_TOKEN)
        {
            return Err(SpecError::ReservedToken);
        }
        let spec = Spec { name: name.into(), inputs, outputs, formula };
        spec.check_formula(&spec.formula)?;
        Ok(spec)
    }

    fn check_int(&self, e: &IntExpr) -> Result<(), SpecError> {
        match e {
            IntExpr::Pair(i, o) => {
                if i.as_str() == BOT_TOKEN || o.as_str() == BOT_TOKEN {
                    return Err(SpecError::ReservedToken);
                }
                if !self.inputs.contains(i) || !self.outputs.contains(o) {
                    return Err(SpecError::UnknownPairAtom {
                        input: i.to_string(),
                        output: o.to_string(),
                    });
                }
            }
            IntExpr::Input(i) => {
                if i.as_str() == BOT_TOKEN {
                    return Err(SpecError::ReservedToken);
                }
                if !self.inputs.contains(i) {
                    return Err(SpecError::UnknownPairAtom {
                        input: i.to_string(),
                        output: "*".into(),
                    });
                }
            }
            IntExpr::Total | IntExpr::Lit(_) => {}
            IntExpr::Add(a, b) | IntExpr::Sub(a, b) => {
                self.check_int(a)?;
                self.check_int(b)?;
            }
            IntExpr::Scale(_, a) => self.check_int(a)?,
        }
        Ok(())
    }

    fn check_formula(&self, e: &SpecExpr) -> Result<(), SpecError> {
        match e {
            SpecExpr::True | SpecExpr::False => Ok(()),
            SpecExpr::Cmp(_, a, b) => {
                self.check_int(a)?;
                self.check_int(b)
            }
            SpecExpr::Mod { term, modulus, residue } => {
                if *modulus < 1 || *residue < 0 || residue >= modulus {
                    return Err(SpecError::BadModulus { modulus: *modulus, residue: *residue });
                }
                self.check_int(term)
            }
            SpecExpr::Not(a) => self.check_formula(a),
            SpecExpr::And(a, b) | SpecExpr::Or(a, b) => {
                self.check_formula(a)?;
                self.check_formula(b)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &std::collections::BTreeSet<StateId> {
        &self.inputs
    }

    pub fn outputs(&self) -> &std::collections::BTreeSet<OutputValue> {
        &self.outputs
    }

    pub fn formula(&self) -> &SpecExpr {
        &self.formula
    }

    /// Evaluates the formula on a pair multiset. Pairs outside the declared
    /// alphabets are rejected.
    pub fn eval(&self, m: &PairMultiset) -> Result<bool, SpecError> {
        for ((i, o), &k) in m.iter() {
            if k > 0 && (!self.inputs.contains(i) || !self.outputs.contains(o)) {
                return Err(SpecError::UnknownPairAtom {
                    input: i.to_string(),
                    output: o.to_string(),
                });
            }
        }
        eval_bool(&self.formula, &EvalCtx::Pairs(m))
    }

    /// Evaluates the formula as a predicate on a bare input configuration;
    /// only n(i) and N atoms are meaningful here.
    pub fn eval_on_inputs(&self, c: &Configuration) -> Result<bool, SpecError> {
        for q in c.support() {
            if !self.inputs.contains(q) {
                return Err(SpecError::UnknownPairAtom {
                    input: q.to_string(),
                    output: "*".into(),
                });
            }
        }
        eval_bool(&self.formula, &EvalCtx::Inputs(c))
    }

    /// The specification "every agent's output equals its input": the
    /// conjunction over all a != b of n(a, b) = 0.
    pub fn identity(
        name: impl Into<String>,
        alphabet: impl IntoIterator<Item = String>,
    ) -> Result<Self, SpecError> {
        let tokens: Vec<String> = alphabet.into_iter().collect();
        let mut formula = SpecExpr::True;
        for a in &tokens {
            for b in &tokens {
                if a != b {
                    let atom = SpecExpr::Cmp(
                        CmpOp::Eq,
                        IntExpr::Pair(StateId::new(a)?, OutputValue::new(b)?),
                        IntExpr::Lit(0),
                    );
                    formula = match formula {
                        SpecExpr::True => atom,
                        f => SpecExpr::And(Box::new(f), Box::new(atom)),
                    };
                }
            }
        }
        let inputs: Result<Vec<StateId>, _> = tokens.iter().map(StateId::new).collect();
        let outputs: Result<Vec<OutputValue>, _> = tokens.iter().map(OutputValue::new).collect();
        Spec::new(name, inputs?, outputs?, formula)
    }
}

/// Relational composition of two specifications: the first maps A-inputs to
/// B-values, the second consumes B-values as its inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComposedSpec {
    pub first: Spec,
    pub second: Spec,
    /// Cap on the number of candidate intermediate multisets the witness
    /// search may enumerate.
    pub enum_cap: u64,
}

pub const DEFAULT_COMPOSE_ENUM_CAP: u64 = 10_000_000;

impl ComposedSpec {
    pub fn new(first: Spec, second: Spec) -> Result<Self, SpecError> {
        let first_out: std::collections::BTreeSet<&str> =
            first.outputs().iter().map(OutputValue::as_str).collect();
        let second_in: std::collections::BTreeSet<&str> =
            second.inputs().iter().map(StateId::as_str).collect();
        if first_out != second_in {
            return Err(SpecError::AlphabetMismatch(format!(
                "first outputs {{{}}} vs second inputs {{{}}}",
                first_out.into_iter().collect::<Vec<_>>().join(", "),
                second_in.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(ComposedSpec { first, second, enum_cap: DEFAULT_COMPOSE_ENUM_CAP })
    }

    pub fn name(&self) -> String {
        format!("{}.then.{}", self.first.name(), self.second.name())
    }

    /// True iff some multiset of (a, b, c) triples projects onto `m` on
    /// (a, c), satisfies the first spec on (a, b), and the second on (b, c).
    /// Decided by exhaustive enumeration of intermediate assignments.
    pub fn eval(&self, m: &PairMultiset) -> Result<bool, SpecError> {
        for ((i, o), &k) in m.iter() {
            if k > 0 && (!self.first.inputs().contains(i) || !self.second.outputs().contains(o)) {
                return Err(SpecError::UnknownPairAtom {
                    input: i.to_string(),
                    output: o.to_string(),
                });
            }
        }
        // intermediate alphabet, as both an output value and an input state
        let mids: Vec<(OutputValue, StateId)> = self
            .first
            .outputs()
            .iter()
            .map(|o| (o.clone(), o.to_state()))
            .collect();
        let pairs: Vec<(&(StateId, OutputValue), u64)> =
            m.iter().map(|(p, &k)| (p, k)).collect();

        let mut candidates: u128 = 1;
        for (_, k) in &pairs {
            candidates = candidates.saturating_mul(compositions(*k, mids.len() as u64));
            if candidates > self.enum_cap as u128 {
                return Err(SpecError::BudgetExceeded { candidates, cap: self.enum_cap });
            }
        }

        let mut ab = PairMultiset::new();
        let mut bc = PairMultiset::new();
        self.search(&pairs, 0, &mids, &mut ab, &mut bc)
    }

    fn search(
        &self,
        pairs: &[(&(StateId, OutputValue), u64)],
        idx: usize,
        mids: &[(OutputValue, StateId)],
        ab: &mut PairMultiset,
        bc: &mut PairMultiset,
    ) -> Result<bool, SpecError> {
        if idx == pairs.len() {
            return Ok(self.first.eval(ab)? && self.second.eval(bc)?);
        }
        if mids.is_empty() {
            // nonempty multiset but no intermediate values to route through
            return Ok(false);
        }
        let ((a, c), k) = (pairs[idx].0, pairs[idx].1);
        let mut split = vec![0u64; mids.len()];
        self.distribute(pairs, idx, mids, ab, bc, a, c, k, 0, &mut split)
    }

    #[allow(clippy::too_many_arguments)]
    fn distribute(
        &self,
        pairs: &[(&(StateId, OutputValue), u64)],
        idx: usize,
        mids: &[(OutputValue, StateId)],
        ab: &mut PairMultiset,
        bc: &mut PairMultiset,
        a: &StateId,
        c: &OutputValue,
        remaining: u64,
        mid_idx: usize,
        split: &mut Vec<u64>,
    ) -> Result<bool, SpecError> {
        if mid_idx == mids.len() - 1 {
            split[mid_idx] = remaining;
            let mut ab2 = ab.clone();
            let mut bc2 = bc.clone();
            for (j, (b_out, b_state)) in mids.iter().enumerate() {
                ab2.add(a.clone(), b_out.clone(), split[j]);
                bc2.add(b_state.clone(), c.clone(), split[j]);
            }
            return self.search(pairs, idx + 1, mids, &mut ab2, &mut bc2);
        }
        for take in 0..=remaining {
            split[mid_idx] = take;
            if self.distribute(pairs, idx, mids, ab, bc, a, c, remaining - take, mid_idx + 1, split)? {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Number of ways to write `k` as an ordered sum of `bins` non-negative
/// integers.
fn compositions(k: u64, bins: u64) -> u128 {
    if bins == 0 {
        return if k == 0 { 1 } else { 0 };
    }
    // C(k + bins - 1, bins - 1)
    let n = (k + bins - 1) as u128;
    let r = (bins - 1) as u128;
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

// ---------------------------------------------------------------------------
// Formula parsing

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    LParen,
    RParen,
    Comma,
    Plus,
    Minus,
    Star,
    Eq,
    Ne,
    Le,
    Lt,
    Ge,
    Gt,
    AndAnd,
    OrOr,
    Bang,
}

fn tokenize(text: &str) -> Result<Vec<Tok>, SpecError> {
    let mut out = Vec::new();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    let is_ident_char =
        |c: char| !c.is_whitespace() && !"(),+-*=!<>&|#".contains(c);
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
        match two.as_str() {
            "!=" => {
                out.push(Tok::Ne);
                i += 2;
                continue;
            }
            "<=" => {
                out.push(Tok::Le);
                i += 2;
                continue;
            }
            ">=" => {
                out.push(Tok::Ge);
                i += 2;
                continue;
            }
            "&&" => {
                out.push(Tok::AndAnd);
                i += 2;
                continue;
            }
            "||" => {
                out.push(Tok::OrOr);
                i += 2;
                continue;
            }
            _ => {}
        }
        match c {
            '(' => out.push(Tok::LParen),
            ')' => out.push(Tok::RParen),
            ',' => out.push(Tok::Comma),
            '+' => out.push(Tok::Plus),
            '-' => out.push(Tok::Minus),
            '*' => out.push(Tok::Star),
            '=' => out.push(Tok::Eq),
            '<' => out.push(Tok::Lt),
            '>' => out.push(Tok::Gt),
            '!' => out.push(Tok::Bang),
            '&' | '|' => {
                return Err(SpecError::Syntax(format!("stray `{c}` (use && / ||)")));
            }
            _ if is_ident_char(c) => {
                let start = i;
                while i < chars.len() && is_ident_char(chars[i]) {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                if let Ok(v) = word.parse::<i64>() {
                    out.push(Tok::Int(v));
                } else {
                    out.push(Tok::Ident(word));
                }
                continue;
            }
            _ => return Err(SpecError::Syntax(format!("unexpected character `{c}`"))),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, t: &Tok) -> Result<(), SpecError> {
        match self.next() {
            Some(got) if &got == t => Ok(()),
            got => Err(SpecError::Syntax(format!("expected {t:?}, got {got:?}"))),
        }
    }

    fn parse_or(&mut self) -> Result<SpecExpr, SpecError> {
        let mut lhs = self.parse_and()?;
        while matches!(self.peek(), Some(Tok::OrOr))
            || matches!(self.peek(), Some(Tok::Ident(w)) if w == "or")
        {
            self.next();
            let rhs = self.parse_and()?;
            lhs = SpecExpr::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<SpecExpr, SpecError> {
        let mut lhs = self.parse_not()?;
        while matches!(self.peek(), Some(Tok::AndAnd))
            || matches!(self.peek(), Some(Tok::Ident(w)) if w == "and")
        {
            self.next();
            let rhs = self.parse_not()?;
            lhs = SpecExpr::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn parse_not(&mut self) -> Result<SpecExpr, SpecError> {
        if matches!(self.peek(), Some(Tok::Bang))
            || matches!(self.peek(), Some(Tok::Ident(w)) if w == "not")
        {
            self.next();
            let inner = self.parse_not()?;
            return Ok(SpecExpr::Not(Box::new(inner)));
        }
        self.parse_atom()
    }

    fn parse_atom(&mut self) -> Result<SpecExpr, SpecError> {
        match self.peek() {
            Some(Tok::Ident(w)) if w == "true" => {
                self.next();
                return Ok(SpecExpr::True);
            }
            Some(Tok::Ident(w)) if w == "false" => {
                self.next();
                return Ok(SpecExpr::False);
            }
            _ => {}
        }
        // `(` may open either a parenthesized boolean or an integer term;
        // try the comparison reading first and fall back
        let saved = self.pos;
        match self.parse_comparison() {
            Ok(e) => Ok(e),
            Err(cmp_err) => {
                self.pos = saved;
                if matches!(self.peek(), Some(Tok::LParen)) {
                    self.next();
                    let inner = self.parse_or()?;
                    self.expect(&Tok::RParen)?;
                    Ok(inner)
                } else {
                    Err(cmp_err)
                }
            }
        }
    }

    fn parse_comparison(&mut self) -> Result<SpecExpr, SpecError> {
        let lhs = self.parse_int()?;
        match self.next() {
            Some(Tok::Ident(w)) if w == "mod" => {
                let modulus = match self.next() {
                    Some(Tok::Int(v)) => v,
                    got => return Err(SpecError::Syntax(format!("expected modulus, got {got:?}"))),
                };
                self.expect(&Tok::Eq)?;
                let residue = match self.next() {
                    Some(Tok::Int(v)) => v,
                    got => return Err(SpecError::Syntax(format!("expected residue, got {got:?}"))),
                };
                Ok(SpecExpr::Mod { term: lhs, modulus, residue })
            }
            Some(tok) => {
                let op = match tok {
                    Tok::Eq => CmpOp::Eq,
                    Tok::Ne => CmpOp::Ne,
                    Tok::Le => CmpOp::Le,
                    Tok::Lt => CmpOp::Lt,
                    Tok::Ge => CmpOp::Ge,
                    Tok::Gt => CmpOp::Gt,
                    got => {
                        return Err(SpecError::Syntax(format!(
                            "expected comparison operator, got {got:?}"
                        )))
                    }
                };
                let rhs = self.parse_int()?;
                Ok(SpecExpr::Cmp(op, lhs, rhs))
            }
            None => Err(SpecError::Syntax("formula ends in the middle of a comparison".into())),
        }
    }

    fn parse_int(&mut self) -> Result<IntExpr, SpecError> {
        let mut lhs = self.parse_term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.next();
                    let rhs = self.parse_term()?;
                    lhs = IntExpr::Add(Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.next();
                    let rhs = self.parse_term()?;
                    lhs = IntExpr::Sub(Box::new(lhs), Box::new(rhs));
                }
                _ => break,
            }
        }
        Ok(lhs)
    }

    fn parse_term(&mut self) -> Result<IntExpr, SpecError> {
        let mut lhs = self.parse_factor()?;
        while matches!(self.peek(), Some(Tok::Star)) {
            self.next();
            let rhs = self.parse_factor()?;
            lhs = match (lhs, rhs) {
                (IntExpr::Lit(k), e) | (e, IntExpr::Lit(k)) => IntExpr::Scale(k, Box::new(e)),
                _ => return Err(SpecError::NonLinearProduct),
            };
        }
        Ok(lhs)
    }

    fn parse_factor(&mut self) -> Result<IntExpr, SpecError> {
        match self.next() {
            Some(Tok::Int(v)) => Ok(IntExpr::Lit(v)),
            Some(Tok::Minus) => {
                let inner = self.parse_factor()?;
                Ok(match inner {
                    IntExpr::Lit(v) => IntExpr::Lit(-v),
                    e => IntExpr::Scale(-1, Box::new(e)),
                })
            }
            Some(Tok::LParen) => {
                let inner = self.parse_int()?;
                self.expect(&Tok::RParen)?;
                Ok(inner)
            }
            Some(Tok::Ident(w)) if w == "N" => Ok(IntExpr::Total),
            Some(Tok::Ident(w)) if w == "n" => {
                self.expect(&Tok::LParen)?;
                let first = match self.next() {
                    Some(Tok::Ident(name)) => name,
                    Some(Tok::Int(v)) => v.to_string(),
                    got => {
                        return Err(SpecError::Syntax(format!("expected state name, got {got:?}")))
                    }
                };
                match self.next() {
                    Some(Tok::RParen) => Ok(IntExpr::Input(StateId::new(&first)?)),
                    Some(Tok::Comma) => {
                        let second = match self.next() {
                            Some(Tok::Ident(name)) => name,
                            Some(Tok::Int(v)) => v.to_string(),
                            got => {
                                return Err(SpecError::Syntax(format!(
                                    "expected output token, got {got:?}"
                                )))
                            }
                        };
                        self.expect(&Tok::RParen)?;
                        Ok(IntExpr::Pair(StateId::new(&first)?, OutputValue::new(&second)?))
                    }
                    got => Err(SpecError::Syntax(format!("expected `,` or `)`, got {got:?}"))),
                }
            }
            got => Err(SpecError::Syntax(format!("expected an integer term, got {got:?}"))),
        }
    }
}

/// Parses a formula in the spec-file grammar: atoms `n(i,o)`, `n(i)`, `N`,
/// integer arithmetic `+ - *`, comparisons `= != <= < >= >`, modular atoms
/// `term mod k = r`, and boolean `! && ||` (also `not and or`).
pub fn parse_formula(text: &str) -> Result<SpecExpr, SpecError> {
    let toks = tokenize(text)?;
    let mut p = Parser { toks, pos: 0 };
    let e = p.parse_or()?;
    if p.pos != p.toks.len() {
        return Err(SpecError::Syntax(format!(
            "trailing input after formula: {:?}",
            &p.toks[p.pos..]
        )));
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AgentId;
    use crate::protolib;

    fn st(s: &str) -> StateId {
        StateId::new(s).unwrap()
    }

    fn ov(s: &str) -> OutputValue {
        OutputValue::new(s).unwrap()
    }

    fn parity_spec() -> Spec {
        protolib::builtin_spec("spec:parity").unwrap()
    }

    fn pm(pairs: &[(&str, &str, u64)]) -> PairMultiset {
        PairMultiset::from_pairs(pairs.iter().map(|(i, o, k)| ((st(i), ov(o)), *k)))
    }

    #[test]
    fn pairs_multiset_examples() {
        let p = protolib::builtin_protocol("parity").unwrap();
        let mut initial = AgentConfiguration::new();
        let mut final_ = AgentConfiguration::new();
        for (i, q) in [("1", "ODD"), ("2", "ODD"), ("3", "ODD")] {
            initial.insert(AgentId::new(i).unwrap(), st(q));
        }
        for (i, q) in [("1", "ODD"), ("2", "odd"), ("3", "odd")] {
            final_.insert(AgentId::new(i).unwrap(), st(q));
        }
        let m = pairs_multiset(&initial, &final_, &p).unwrap();
        assert_eq!(m, pm(&[("ODD", "ODD", 1), ("ODD", "odd", 2)]));

        // removed agent contributes nothing
        let mut survivors = AgentConfiguration::new();
        for (i, q) in [("2", "even"), ("3", "even")] {
            survivors.insert(AgentId::new(i).unwrap(), st(q));
        }
        let m = pairs_multiset(&initial, &survivors, &p).unwrap();
        assert_eq!(m, pm(&[("ODD", "even", 2)]));

        // extra agent in the final configuration is rejected
        let mut widened = survivors.clone();
        widened.insert(AgentId::new("9").unwrap(), st("even"));
        assert!(matches!(
            pairs_multiset(&initial, &widened, &p),
            Err(SpecError::DomainMismatch(_))
        ));
    }

    #[test]
    fn parity_spec_eval() {
        let spec = parity_spec();
        assert!(spec.eval(&pm(&[("ODD", "ODD", 1), ("ODD", "odd", 2)])).unwrap());
        assert!(spec.eval(&pm(&[("ODD", "even", 2)])).unwrap());
        assert!(!spec.eval(&pm(&[("ODD", "ODD", 2)])).unwrap());
    }

    #[test]
    fn eval_rejects_pairs_outside_alphabets() {
        let spec = parity_spec();
        let m = pm(&[("stranger", "odd", 1)]);
        assert!(matches!(spec.eval(&m), Err(SpecError::UnknownPairAtom { .. })));
    }

    #[test]
    fn formula_round_trips_through_printer() {
        let texts = [
            "(N mod 2 = 1 && n(ODD,ODD) = 1 && n(ODD,odd) = N - 1) || (N mod 2 = 0 && n(ODD,even) = N)",
            "n(q1) >= 3",
            "!(n(a,b) != 0) || 2 * N < 7",
            "true",
            "n(a) + n(b) - 2 mod 3 = 1",
        ];
        for t in texts {
            let ast = parse_formula(t).unwrap();
            let printed = ast.to_string();
            let reparsed = parse_formula(&printed).unwrap();
            assert_eq!(ast, reparsed, "formula `{t}` printed as `{printed}`");
        }
    }

    #[test]
    fn formula_rejects_nonlinear_products() {
        assert!(matches!(
            parse_formula("n(a) * n(b) = 1"),
            Err(SpecError::NonLinearProduct)
        ));
    }

    #[test]
    fn spec_rejects_bad_modulus_and_reserved_token() {
        let f = SpecExpr::Mod { term: IntExpr::Total, modulus: 0, residue: 0 };
        assert!(matches!(
            Spec::new("bad", [st("a")], [ov("x")], f),
            Err(SpecError::BadModulus { .. })
        ));
        let f = parse_formula(&format!("n(a,{BOT_TOKEN}) = 0")).unwrap();
        assert!(matches!(
            Spec::new("bad", [st("a")], [ov("x")], f),
            Err(SpecError::ReservedToken)
        ));
    }

    #[test]
    fn composed_identity_is_neutral() {
        let spec = parity_spec();
        let id = Spec::identity("id3", ["ODD", "odd", "even"].map(String::from)).unwrap();
        let composed = ComposedSpec::new(spec.clone(), id).unwrap();
        let m = pm(&[("ODD", "ODD", 1), ("ODD", "odd", 2)]);
        assert!(composed.eval(&m).unwrap());
        assert_eq!(composed.eval(&m).unwrap(), spec.eval(&m).unwrap());
    }

    #[test]
    fn composed_with_constant_false_is_false() {
        let spec = parity_spec();
        let never = Spec::new(
            "never",
            ["ODD", "odd", "even"].map(|s| st(s)),
            ["ODD", "odd", "even"].map(|s| ov(s)),
            SpecExpr::False,
        )
        .unwrap();
        let composed = ComposedSpec::new(spec, never).unwrap();
        assert!(!composed.eval(&pm(&[("ODD", "even", 2)])).unwrap());
    }

    #[test]
    fn identity_composed_with_identity_is_identity() {
        let id = || Spec::identity("id", ["a", "b"].map(String::from)).unwrap();
        let composed = ComposedSpec::new(id(), id()).unwrap();
        assert!(!composed.eval(&pm(&[("a", "b", 1)])).unwrap());
        assert!(composed.eval(&pm(&[("a", "a", 2), ("b", "b", 1)])).unwrap());
    }

    #[test]
    fn composed_alphabet_mismatch_is_rejected() {
        let spec = parity_spec();
        let other = Spec::identity("id2", ["x", "y"].map(String::from)).unwrap();
        assert!(matches!(
            ComposedSpec::new(spec, other),
            Err(SpecError::AlphabetMismatch(_))
        ));
    }

    #[test]
    fn budget_cap_is_enforced() {
        let spec = parity_spec();
        let id = Spec::identity("id3", ["ODD", "odd", "even"].map(String::from)).unwrap();
        let mut composed = ComposedSpec::new(spec, id).unwrap();
        composed.enum_cap = 1;
        let m = pm(&[("ODD", "ODD", 1), ("ODD", "odd", 2)]);
        assert!(matches!(composed.eval(&m), Err(SpecError::BudgetExceeded { .. })));
    }

    /// Assigns an intermediate value to each individual agent instead of
    /// distributing counts; an independent route to the same existential.
    fn brute_force_composed(cs: &ComposedSpec, m: &PairMultiset) -> bool {
        let agents: Vec<(StateId, OutputValue)> = m
            .iter()
            .flat_map(|((i, o), &k)| std::iter::repeat((i.clone(), o.clone())).take(k as usize))
            .collect();
        let mids: Vec<OutputValue> = cs.first.outputs().iter().cloned().collect();
        let total = agents.len();
        let combos = (mids.len() as u64).pow(total as u32);
        for mask in 0..combos {
            let mut ab = PairMultiset::new();
            let mut bc = PairMultiset::new();
            let mut rest = mask;
            for (a, c) in &agents {
                let b = &mids[(rest % mids.len() as u64) as usize];
                rest /= mids.len() as u64;
                ab.add(a.clone(), b.clone(), 1);
                bc.add(b.to_state(), c.clone(), 1);
            }
            if cs.first.eval(&ab).unwrap_or(false) && cs.second.eval(&bc).unwrap_or(false) {
                return true;
            }
        }
        false
    }

    #[test]
    fn enumeration_matches_recursive_brute_force() {
        let spec = parity_spec();
        let id = Spec::identity("id3", ["ODD", "odd", "even"].map(String::from)).unwrap();
        let composed = ComposedSpec::new(spec, id).unwrap();
        // all multisets over {ODD} x {ODD, odd, even} with total <= 4
        let outs = ["ODD", "odd", "even"];
        for a in 0..=4u64 {
            for b in 0..=(4 - a) {
                for c in 0..=(4 - a - b) {
                    let m = pm(&[("ODD", outs[0], a), ("ODD", outs[1], b), ("ODD", outs[2], c)]);
                    assert_eq!(
                        composed.eval(&m).unwrap(),
                        brute_force_composed(&composed, &m),
                        "mismatch on {m}"
                    );
                }
            }
        }
    }

    #[test]
    fn eval_is_a_pure_function_of_the_multiset() {
        let spec = parity_spec();
        let m1 = pm(&[("ODD", "ODD", 1), ("ODD", "odd", 2)]);
        let m2 = PairMultiset::from_pairs([
            ((st("ODD"), ov("odd")), 1),
            ((st("ODD"), ov("ODD")), 1),
            ((st("ODD"), ov("odd")), 1),
        ]);
        assert_eq!(m1, m2);
        assert_eq!(spec.eval(&m1).unwrap(), spec.eval(&m2).unwrap());
    }
}
