//! First-match bypass rules over `<op-name, op-kind, input-placement, custom-meta>`.

use std::fmt;
use std::str::FromStr;

use crate::placement::Placement;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RuleAction {
    /// Compare locals in place and return a plain boolean.
    LocalCompare,
    /// Take the output metadata from the given output tensor.
    ReuseOut,
    /// Use the strategy entry matching the current placements when it yields
    /// Partial, without redistribution or inference.
    HalfwayPartial,
    /// Partial plus Replicate without communication.
    CommFreeAdd,
}

impl RuleAction {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleAction::LocalCompare => "local-compare",
            RuleAction::ReuseOut => "reuse-out",
            RuleAction::HalfwayPartial => "halfway-partial",
            RuleAction::CommFreeAdd => "comm-free-add",
        }
    }
}

impl fmt::Display for RuleAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A literal or `*`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pattern {
    Any,
    Lit(String),
}

impl Pattern {
    pub fn matches(&self, s: &str) -> bool {
        match self {
            Pattern::Any => true,
            Pattern::Lit(l) => l == s,
        }
    }
}

impl FromStr for Pattern {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(if s == "*" { Pattern::Any } else { Pattern::Lit(s.to_string()) })
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Any => f.write_str("*"),
            Pattern::Lit(l) => f.write_str(l),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DispatchRule {
    pub op_name: Pattern,
    pub op_kind: Pattern,
    pub inputs: Pattern,
    pub custom_meta: Pattern,
    pub action: RuleAction,
}

impl DispatchRule {
    /// `fields` is `<op-name,op-kind,input-placement,custom-meta>`.
    pub fn new(fields: &str, action: RuleAction) -> Self {
        let parts: Vec<Pattern> = fields
            .trim_matches(|c| c == '<' || c == '>')
            .split(',')
            .map(|p| p.trim().parse().expect("infallible"))
            .collect();
        let get = |i: usize| parts.get(i).cloned().unwrap_or(Pattern::Any);
        Self {
            op_name: get(0),
            op_kind: get(1),
            inputs: get(2),
            custom_meta: get(3),
            action,
        }
    }

    pub fn matches(&self, site: &Signature<'_>) -> bool {
        self.op_name.matches(site.op_name)
            && self.op_kind.matches(site.op_kind)
            && self.inputs.matches(&site.inputs)
            && self.custom_meta.matches(site.custom_meta)
    }
}

impl fmt::Display for DispatchRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{},{},{}> -> {}", self.op_name, self.op_kind, self.inputs, self.custom_meta, self.action)
    }
}

/// What the rules look at.
#[derive(Clone, Debug)]
pub struct Signature<'a> {
    pub op_name: &'a str,
    /// `out-given` when an output tensor was supplied, else the op's kind.
    pub op_kind: &'a str,
    /// Per-operand class joined by `-`.
    pub inputs: String,
    /// Empty when no custom metadata was supplied.
    pub custom_meta: &'a str,
}

/// `replicate`, `shard`, `partial` or `mixed` for one operand.
pub fn placement_class(placements: &[Placement]) -> &'static str {
    let any_p = placements.iter().any(Placement::is_partial);
    let any_s = placements.iter().any(Placement::is_shard);
    match (any_p, any_s) {
        (false, false) => "replicate",
        (false, true) => "shard",
        (true, false) => "partial",
        (true, true) => "mixed",
    }
}

pub fn input_classes<'p>(operands: impl IntoIterator<Item = &'p [Placement]>) -> String {
    operands.into_iter().map(placement_class).collect::<Vec<_>>().join("-")
}

pub fn default_rules() -> Vec<DispatchRule> {
    vec![
        DispatchRule::new("<equal,*,*,*>", RuleAction::LocalCompare),
        DispatchRule::new("<*,out-given,*,*>", RuleAction::ReuseOut),
        DispatchRule::new("<*,*,*,out-partial>", RuleAction::HalfwayPartial),
        DispatchRule::new("<add,*,partial-replicate,*>", RuleAction::CommFreeAdd),
    ]
}

pub fn match_rule<'r>(rules: &'r [DispatchRule], sig: &Signature<'_>) -> Option<&'r DispatchRule> {
    rules.iter().find(|r| r.matches(sig))
}
