//! Line-oriented plan DSL: which tensor gets which placement, when.
//!
//! ```text
//! shard <path-pattern> <placement> @<mesh> [init|run]
//! redistribute <path> <src>-><dst> @<mesh> [grad <gsrc>-><gdst>]
//! annotate <path> <placement> @<mesh>
//! factory <path> <placement> @<mesh>
//! ```
//!
//! `@<mesh>` names either the whole mesh (placements for every dim) or one
//! mesh dim (a single placement). It may be omitted to mean the whole mesh.

pub mod ir;
pub mod model;
pub mod runtime;

use std::fmt;
use std::str::FromStr;

use regex::Regex;

use crate::placement::{format_placements, parse_placements, Placement, PlacementError};

pub use ir::{lower, Action, HookPoint, IrAction, IrRecord, PlanIr};
pub use model::{Layer, LayerKind, Model, ModelExec, TensorPath, TensorRole};
pub use runtime::{AllocStats, DistExec, GradReduce};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: bad pattern `{pattern}`: {msg}")]
    Pattern { line: usize, pattern: String, msg: String },
    #[error("line {line}: {source}")]
    Placement { line: usize, source: PlacementError },
    #[error("line {line}: `{pattern}` matches no tensor")]
    Unresolved { line: usize, pattern: String },
    #[error("conflicting placements for `{path}` in phase {phase}: {a} vs {b}")]
    Conflict { path: String, phase: Phase, a: String, b: String },
    #[error("unknown mesh `{0}`")]
    UnknownMesh(String),
    #[error("`{path}` needs {expected} placements for `{mesh}`, got {actual}")]
    PlacementCount { path: String, mesh: String, expected: usize, actual: usize },
    #[error("`{0}` is not a tensor the plan can address")]
    UnknownPath(String),
    #[error("`{path}` expected {expected} before redistribution, found {actual}")]
    SourceMismatch { path: String, expected: String, actual: String },
    #[error("IR line {line}: {msg}")]
    Ir { line: usize, msg: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    #[default]
    Init,
    Run,
}

impl FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "init" => Ok(Phase::Init),
            "run" => Ok(Phase::Run),
            _ => Err(format!("unknown phase `{s}`")),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "INIT",
            Phase::Run => "RUN",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DirectiveKind {
    Shard,
    Redistribute,
    Annotate,
    Factory,
}

impl DirectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DirectiveKind::Shard => "shard",
            DirectiveKind::Redistribute => "redistribute",
            DirectiveKind::Annotate => "annotate",
            DirectiveKind::Factory => "factory",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Directive {
    pub kind: DirectiveKind,
    pub pattern: String,
    pub placements: Vec<Placement>,
    /// Expected placements before a redistribution.
    pub src: Option<Vec<Placement>>,
    pub mesh: Option<String>,
    pub phase: Phase,
    /// Gradient redistribution `(src, dst)` attached to a redistribution.
    pub grad: Option<(Vec<Placement>, Vec<Placement>)>,
    /// 1-based source line, 0 for directives built in code.
    pub line: usize,
}

impl Directive {
    fn new(kind: DirectiveKind, pattern: &str, placements: Vec<Placement>, mesh: Option<&str>) -> Self {
        Self {
            kind,
            pattern: pattern.to_string(),
            placements,
            src: None,
            mesh: mesh.map(str::to_string),
            phase: Phase::Init,
            grad: None,
            line: 0,
        }
    }

    /// The pattern anchored at both ends.
    pub fn regex(&self) -> Result<Regex, PlanError> {
        compile(&self.pattern, self.line)
    }
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} ", self.kind.as_str(), self.pattern)?;
        match &self.src {
            Some(src) => write!(f, "{}->{}", format_placements(src), format_placements(&self.placements))?,
            None => f.write_str(&format_placements(&self.placements))?,
        }
        if let Some(m) = &self.mesh {
            write!(f, " @{m}")?;
        }
        if self.kind == DirectiveKind::Shard && self.phase == Phase::Run {
            f.write_str(" run")?;
        }
        if let Some((gs, gd)) = &self.grad {
            write!(f, " grad {}->{}", format_placements(gs), format_placements(gd))?;
        }
        Ok(())
    }
}

fn compile(pattern: &str, line: usize) -> Result<Regex, PlanError> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|e| PlanError::Pattern {
        line,
        pattern: pattern.to_string(),
        msg: e.to_string(),
    })
}

fn placements_at(s: &str, line: usize) -> Result<Vec<Placement>, PlanError> {
    parse_placements(s).map_err(|source| PlanError::Placement { line, source })
}

fn transition(s: &str, line: usize) -> Result<(Option<Vec<Placement>>, Vec<Placement>), PlanError> {
    let (src, dst) = s.split_once("->").ok_or_else(|| PlanError::Syntax {
        line,
        msg: format!("expected <src>-><dst>, got `{s}`"),
    })?;
    let src = if src.is_empty() { None } else { Some(placements_at(src, line)?) };
    Ok((src, placements_at(dst, line)?))
}

/// An ordered list of directives. Nothing touches a model until lowering.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Plan {
    pub directives: Vec<Directive>,
}

impl Plan {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, d: Directive) -> Result<&mut Self, PlanError> {
        d.regex()?;
        self.directives.push(d);
        Ok(self)
    }

    pub fn shard(&mut self, path: &str, placements: Vec<Placement>, mesh: Option<&str>, phase: Phase) -> Result<&mut Self, PlanError> {
        let mut d = Directive::new(DirectiveKind::Shard, path, placements, mesh);
        d.phase = phase;
        self.push(d)
    }

    pub fn redistribute(&mut self, path: &str, src: Vec<Placement>, dst: Vec<Placement>, mesh: Option<&str>) -> Result<&mut Self, PlanError> {
        let mut d = Directive::new(DirectiveKind::Redistribute, path, dst, mesh);
        d.src = Some(src);
        self.push(d)
    }

    pub fn annotate(&mut self, path: &str, placements: Vec<Placement>, mesh: Option<&str>) -> Result<&mut Self, PlanError> {
        self.push(Directive::new(DirectiveKind::Annotate, path, placements, mesh))
    }

    pub fn factory(&mut self, path: &str, placements: Vec<Placement>, mesh: Option<&str>) -> Result<&mut Self, PlanError> {
        self.push(Directive::new(DirectiveKind::Factory, path, placements, mesh))
    }

    /// Appends every directive of `other`.
    pub fn extend(&mut self, other: &Plan) {
        self.directives.extend(other.directives.iter().cloned());
    }

    pub fn parse(text: &str) -> Result<Plan, PlanError> {
        let mut plan = Plan::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let toks: Vec<&str> = content.split_whitespace().collect();
            let syntax = |msg: String| PlanError::Syntax { line, msg };
            if toks.len() < 3 {
                return Err(syntax(format!("expected `<kind> <path> <placement>`, got `{content}`")));
            }
            let kind = match toks[0] {
                "shard" => DirectiveKind::Shard,
                "redistribute" => DirectiveKind::Redistribute,
                "annotate" => DirectiveKind::Annotate,
                "factory" => DirectiveKind::Factory,
                other => return Err(syntax(format!("unknown directive `{other}`"))),
            };
            let mut d = Directive::new(kind, toks[1], Vec::new(), None);
            d.line = line;
            if kind == DirectiveKind::Redistribute {
                let (src, dst) = transition(toks[2], line)?;
                d.src = src;
                d.placements = dst;
            } else {
                d.placements = placements_at(toks[2], line)?;
            }
            let mut rest = toks[3..].iter().copied().peekable();
            if let Some(m) = rest.peek().and_then(|t| t.strip_prefix('@')) {
                if m.is_empty() {
                    return Err(syntax("empty mesh name".into()));
                }
                d.mesh = Some(m.to_string());
                rest.next();
            }
            while let Some(tok) = rest.next() {
                match (kind, tok) {
                    (DirectiveKind::Shard, t) if t.parse::<Phase>().is_ok() => d.phase = t.parse().expect("checked"),
                    (DirectiveKind::Redistribute, "grad") => {
                        let t = rest.next().ok_or_else(|| syntax("`grad` needs <src>-><dst>".into()))?;
                        let (gs, gd) = transition(t, line)?;
                        let gs = gs.ok_or_else(|| syntax("`grad` needs an explicit source".into()))?;
                        d.grad = Some((gs, gd));
                    }
                    (_, t) => return Err(syntax(format!("unexpected `{t}`"))),
                }
            }
            plan.push(d)?;
        }
        Ok(plan)
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.directives {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_every_form() {
        let text = "\
# tensor parallel
shard blk\\d+.fc1.weight S(1) @TP init
shard fc.weight R @DP run
redistribute matmul.<in> S(0)->R
redistribute fc1.<in> S(0)->R @TP grad P->S(0)
annotate fc.weight.grad P @DP
factory input.<out> S(0) @DP
";
        let plan = Plan::parse(text).unwrap();
        assert_eq!(plan.directives.len(), 6);
        let d = &plan.directives[0];
        assert_eq!(d.placements, vec![Placement::Shard(1)]);
        assert_eq!(d.mesh.as_deref(), Some("TP"));
        assert_eq!(d.line, 2);
        assert!(d.regex().unwrap().is_match("blk12.fc1.weight"));
        assert!(!d.regex().unwrap().is_match("blk.fc1.weight"));
        assert_eq!(plan.directives[1].phase, Phase::Run);
        assert_eq!(plan.directives[2].src, Some(vec![Placement::Shard(0)]));
        assert_eq!(plan.directives[3].grad, Some((vec![Placement::P], vec![Placement::Shard(0)])));
        assert_eq!(Plan::parse(&plan.to_string()).unwrap().directives.len(), 6);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = Plan::parse("shard a R\nshard b Q(1)\n").unwrap_err();
        assert!(matches!(err, PlanError::Placement { line: 2, .. }));
        let err = Plan::parse("\n\nshard (a R\n").unwrap_err();
        assert!(matches!(err, PlanError::Pattern { line: 3, .. }));
        let err = Plan::parse("move a R\n").unwrap_err();
        assert_eq!(err.to_string(), "line 1: unknown directive `move`");
    }
}
