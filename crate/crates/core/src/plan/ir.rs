//! Plan IR: `path.hook:tensor:operand:action(args)` records, one per
//! `(path, hook)` after fusion.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::mesh::DeviceMesh;
use crate::placement::{format_placements, parse_placements, Placement};

use super::model::{TensorPath, TensorRole};
use super::{DirectiveKind, Phase, Plan, PlanError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HookPoint {
    Init,
    ForwardPre,
    ForwardPost,
    BackwardPost,
}

impl HookPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            HookPoint::Init => "init",
            HookPoint::ForwardPre => "forward_pre",
            HookPoint::ForwardPost => "forward_post",
            HookPoint::BackwardPost => "backward_post",
        }
    }
}

impl FromStr for HookPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "init" => Ok(HookPoint::Init),
            "forward_pre" => Ok(HookPoint::ForwardPre),
            "forward_post" => Ok(HookPoint::ForwardPost),
            "backward_post" => Ok(HookPoint::BackwardPost),
            _ => Err(format!("unknown hook `{s}`")),
        }
    }
}

impl fmt::Display for HookPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    /// Initial placement of a parameter.
    Shard { placements: Vec<Placement>, mesh: Option<String> },
    Redist { src: Option<Vec<Placement>>, dst: Vec<Placement>, mesh: Option<String> },
    /// Metadata only.
    Annotate { placements: Vec<Placement>, mesh: Option<String> },
    /// Host tensor to distributed tensor.
    Factory { placements: Vec<Placement>, mesh: Option<String> },
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::Shard { .. } => "shard",
            Action::Redist { .. } => "redist",
            Action::Annotate { .. } => "annotate",
            Action::Factory { .. } => "factory",
        }
    }

    pub fn mesh(&self) -> Option<&str> {
        match self {
            Action::Shard { mesh, .. } | Action::Redist { mesh, .. } | Action::Annotate { mesh, .. } | Action::Factory { mesh, .. } => mesh.as_deref(),
        }
    }

    fn is_annotate(&self) -> bool {
        matches!(self, Action::Annotate { .. })
    }

    /// Target placements.
    pub fn placements(&self) -> &[Placement] {
        match self {
            Action::Shard { placements, .. } | Action::Annotate { placements, .. } | Action::Factory { placements, .. } => placements,
            Action::Redist { dst, .. } => dst,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = match self {
            Action::Redist { src, dst, .. } => {
                format!("{}->{}", src.as_deref().map(format_placements).unwrap_or_default(), format_placements(dst))
            }
            other => format_placements(other.placements()),
        };
        match self.mesh() {
            Some(m) => write!(f, "{}({body},{m})", self.name()),
            None => write!(f, "{}({body})", self.name()),
        }
    }
}

/// Placements optionally followed by `,<mesh>`.
fn placements_and_mesh(s: &str) -> Result<(Vec<Placement>, Option<String>), String> {
    if let Ok(p) = parse_placements(s) {
        return Ok((p, None));
    }
    let (head, mesh) = s.rsplit_once(',').ok_or_else(|| format!("bad placements `{s}`"))?;
    let p = parse_placements(head).map_err(|e| e.to_string())?;
    Ok((p, Some(mesh.to_string())))
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, rest) = s.split_once('(').ok_or_else(|| format!("bad action `{s}`"))?;
        let args = rest.strip_suffix(')').ok_or_else(|| format!("bad action `{s}`"))?;
        if name == "redist" {
            let (src, dst) = args.split_once("->").ok_or_else(|| format!("bad redist `{s}`"))?;
            let src = if src.is_empty() { None } else { Some(parse_placements(src).map_err(|e| e.to_string())?) };
            let (dst, mesh) = placements_and_mesh(dst)?;
            return Ok(Action::Redist { src, dst, mesh });
        }
        let (placements, mesh) = placements_and_mesh(args)?;
        match name {
            "shard" => Ok(Action::Shard { placements, mesh }),
            "annotate" => Ok(Action::Annotate { placements, mesh }),
            "factory" => Ok(Action::Factory { placements, mesh }),
            _ => Err(format!("unknown action `{name}`")),
        }
    }
}

/// One action on one operand of a record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrAction {
    /// `<in>`, `<out>`, a parameter name or `<name>.grad`.
    pub tensor: String,
    pub operand: usize,
    pub action: Action,
}

impl fmt::Display for IrAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.tensor, self.operand, self.action)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrRecord {
    pub path: String,
    pub hook: HookPoint,
    pub actions: Vec<IrAction>,
}

impl fmt::Display for IrRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let acts: Vec<String> = self.actions.iter().map(|a| a.to_string()).collect();
        write!(f, "{}.{}:{}", self.path, self.hook, acts.join(";"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PlanIr {
    records: Vec<IrRecord>,
    index: HashMap<(String, HookPoint), usize>,
}

impl PlanIr {
    /// Fuses records sharing `(path, hook)`, drops duplicate actions, and
    /// orders each record's actions by operand. On one operand,
    /// redistributions precede annotations; otherwise order is kept.
    pub fn new(records: Vec<IrRecord>) -> Self {
        let mut out: Vec<IrRecord> = Vec::new();
        let mut index: HashMap<(String, HookPoint), usize> = HashMap::new();
        for r in records {
            let key = (r.path.clone(), r.hook);
            let i = *index.entry(key).or_insert_with(|| {
                out.push(IrRecord {
                    path: r.path.clone(),
                    hook: r.hook,
                    actions: Vec::new(),
                });
                out.len() - 1
            });
            for a in r.actions {
                if !out[i].actions.contains(&a) {
                    out[i].actions.push(a);
                }
            }
        }
        for r in &mut out {
            r.actions.sort_by(|a, b| (&a.tensor, a.operand, a.action.is_annotate()).cmp(&(&b.tensor, b.operand, b.action.is_annotate())));
        }
        Self { records: out, index }
    }

    pub fn records(&self) -> &[IrRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, path: &str, hook: HookPoint) -> Option<&IrRecord> {
        self.index.get(&(path.to_string(), hook)).map(|&i| &self.records[i])
    }

    /// Actions at `(path, hook)` on `tensor`/`operand`, in record order.
    pub fn actions_for<'a>(&'a self, path: &str, hook: HookPoint, tensor: &'a str, operand: usize) -> impl Iterator<Item = &'a Action> + 'a {
        self.record(path, hook)
            .into_iter()
            .flat_map(|r| r.actions.iter())
            .filter(move |a| a.tensor == tensor && a.operand == operand)
            .map(|a| &a.action)
    }

    /// Runs the optimizer again; a no-op on its own output.
    pub fn optimize(&self) -> Self {
        Self::new(self.records.clone())
    }

    pub fn dump(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, PlanError> {
        let mut records = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.trim();
            if l.is_empty() {
                continue;
            }
            let err = |msg: String| PlanError::Ir { line, msg };
            let (head, rest) = l.split_once(':').ok_or_else(|| err("missing `:`".into()))?;
            let (path, hook) = head.rsplit_once('.').ok_or_else(|| err("missing hook".into()))?;
            let hook: HookPoint = hook.parse().map_err(err)?;
            let mut actions = Vec::new();
            for a in rest.split(';') {
                let mut it = a.splitn(3, ':');
                let (Some(tensor), Some(operand), Some(action)) = (it.next(), it.next(), it.next()) else {
                    return Err(err(format!("bad action `{a}`")));
                };
                actions.push(IrAction {
                    tensor: tensor.to_string(),
                    operand: operand.parse().map_err(|_| err(format!("bad operand `{operand}`")))?,
                    action: action.parse().map_err(err)?,
                });
            }
            records.push(IrRecord {
                path: path.to_string(),
                hook,
                actions,
            });
        }
        Ok(Self::new(records))
    }
}

impl fmt::Display for PlanIr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

/// Which mesh dims a placement list covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Full,
    Dim(usize),
}

/// Resolves `@mesh` against the run mesh and checks the placement count.
pub fn scope(path: &str, placements: &[Placement], mesh: Option<&str>, run: &DeviceMesh) -> Result<Scope, PlanError> {
    let (scope, expected, name) = match mesh {
        None => (Scope::Full, run.ndim(), run.name()),
        Some(m) if m == run.name() => (Scope::Full, run.ndim(), m),
        Some(m) => match run.dim_index(m) {
            Ok(d) => (Scope::Dim(d), 1, m),
            Err(_) => return Err(PlanError::UnknownMesh(m.to_string())),
        },
    };
    if placements.len() != expected {
        return Err(PlanError::PlacementCount {
            path: path.to_string(),
            mesh: name.to_string(),
            expected,
            actual: placements.len(),
        });
    }
    Ok(scope)
}

/// `current` with the dims covered by `scope` replaced by `new`.
pub fn apply_scoped(current: &[Placement], new: &[Placement], scope: Scope) -> Vec<Placement> {
    match scope {
        Scope::Full => new.to_vec(),
        Scope::Dim(d) => {
            let mut v = current.to_vec();
            v[d] = new[0];
            v
        }
    }
}

/// `current` restricted to the dims covered by `scope`.
pub fn restrict(current: &[Placement], scope: Scope) -> Vec<Placement> {
    match scope {
        Scope::Full => current.to_vec(),
        Scope::Dim(d) => vec![current[d]],
    }
}

struct Builder {
    records: Vec<IrRecord>,
}

impl Builder {
    fn push(&mut self, path: &str, hook: HookPoint, tensor: String, operand: usize, action: Action) {
        self.records.push(IrRecord {
            path: path.to_string(),
            hook,
            actions: vec![IrAction { tensor, operand, action }],
        });
    }
}

/// Per-dim placements a parameter takes in one phase, with the directive
/// text that set each dim.
type PhaseMap = BTreeMap<(String, Phase), Vec<Option<(Placement, String)>>>;

fn set_phase(map: &mut PhaseMap, path: &str, phase: Phase, pl: &[Placement], scope: Scope, ndim: usize, text: &str) -> Result<(), PlanError> {
    let slot = map.entry((path.to_string(), phase)).or_insert_with(|| vec![None; ndim]);
    let dims: Vec<usize> = match scope {
        Scope::Full => (0..ndim).collect(),
        Scope::Dim(d) => vec![d],
    };
    for (k, d) in dims.into_iter().enumerate() {
        match &slot[d] {
            Some((old, prev)) if *old != pl[k] => {
                return Err(PlanError::Conflict {
                    path: path.to_string(),
                    phase,
                    a: prev.clone(),
                    b: text.to_string(),
                })
            }
            _ => slot[d] = Some((pl[k], text.to_string())),
        }
    }
    Ok(())
}

/// Resolves patterns against `paths` and translates directives to IR.
/// With `strict`, a pattern matching nothing is an error; otherwise it is
/// skipped with a warning.
pub fn lower(plan: &Plan, paths: &[TensorPath], mesh: &DeviceMesh, strict: bool) -> Result<PlanIr, PlanError> {
    let mut b = Builder { records: Vec::new() };
    let mut init = Builder { records: Vec::new() };
    let mut phases: PhaseMap = BTreeMap::new();
    let mut annotations: HashMap<(String, HookPoint, String, usize), (Vec<Placement>, String)> = HashMap::new();
    for d in &plan.directives {
        let re = d.regex()?;
        let hits: Vec<&TensorPath> = paths.iter().filter(|p| re.is_match(&p.path)).collect();
        if hits.is_empty() {
            if strict {
                return Err(PlanError::Unresolved {
                    line: d.line,
                    pattern: d.pattern.clone(),
                });
            }
            log::warn!("plan pattern `{}` matches no tensor", d.pattern);
            continue;
        }
        let text = d.to_string();
        let sc = scope(&d.pattern, &d.placements, d.mesh.as_deref(), mesh)?;
        if let Some(src) = &d.src {
            scope(&d.pattern, src, d.mesh.as_deref(), mesh)?;
        }
        if let Some((gs, gd)) = &d.grad {
            scope(&d.pattern, gs, d.mesh.as_deref(), mesh)?;
            scope(&d.pattern, gd, d.mesh.as_deref(), mesh)?;
        }
        let m = d.mesh.clone();
        for tp in hits {
            let (hook, tensor, operand) = match &tp.role {
                TensorRole::In(k) => (HookPoint::ForwardPre, "<in>".to_string(), *k),
                TensorRole::Out => (HookPoint::ForwardPost, "<out>".to_string(), 0),
                TensorRole::Param { name, index } => (HookPoint::ForwardPre, name.clone(), *index),
                TensorRole::Grad { name, index } => (HookPoint::BackwardPost, format!("{name}.grad"), *index),
            };
            let redist = |src: Option<Vec<Placement>>, dst: Vec<Placement>| Action::Redist { src, dst, mesh: m.clone() };
            match d.kind {
                DirectiveKind::Shard => {
                    if let TensorRole::Param { name, index } = &tp.role {
                        set_phase(&mut phases, &tp.path, d.phase, &d.placements, sc, mesh.ndim(), &text)?;
                        if d.phase == Phase::Init {
                            let action = Action::Shard {
                                placements: d.placements.clone(),
                                mesh: m.clone(),
                            };
                            init.push(&tp.module, HookPoint::Init, name.clone(), *index, action);
                        }
                    } else {
                        b.push(&tp.module, hook, tensor, operand, redist(None, d.placements.clone()));
                    }
                }
                DirectiveKind::Redistribute => {
                    b.push(&tp.module, hook, tensor.clone(), operand, redist(d.src.clone(), d.placements.clone()));
                    if let Some((gs, gd)) = &d.grad {
                        let gt = if tensor.ends_with(".grad") { tensor } else { format!("{tensor}.grad") };
                        b.push(&tp.module, HookPoint::BackwardPost, gt, operand, redist(Some(gs.clone()), gd.clone()));
                    }
                }
                DirectiveKind::Annotate => {
                    let key = (tp.module.clone(), hook, tensor.clone(), operand);
                    if let Some((old, prev)) = annotations.get(&key) {
                        if *old != d.placements {
                            return Err(PlanError::Conflict {
                                path: tp.path.clone(),
                                phase: Phase::Run,
                                a: prev.clone(),
                                b: text,
                            });
                        }
                    }
                    annotations.insert(key, (d.placements.clone(), text.clone()));
                    b.push(
                        &tp.module,
                        hook,
                        tensor,
                        operand,
                        Action::Annotate {
                            placements: d.placements.clone(),
                            mesh: m.clone(),
                        },
                    );
                }
                DirectiveKind::Factory => b.push(
                    &tp.module,
                    hook,
                    tensor,
                    operand,
                    Action::Factory {
                        placements: d.placements.clone(),
                        mesh: m.clone(),
                    },
                ),
            }
        }
    }

    for tp in paths {
        let TensorRole::Param { name, index } = &tp.role else { continue };
        let get = |phase| phases.get(&(tp.path.clone(), phase));
        let init_pl: Vec<Placement> = (0..mesh.ndim())
            .map(|d| get(Phase::Init).and_then(|v| v[d].as_ref()).map_or(Placement::Replicate, |(p, _)| *p))
            .collect();
        let Some(run) = get(Phase::Run) else { continue };
        for (d, slot) in run.iter().enumerate() {
            let Some((run_p, _)) = slot else { continue };
            if *run_p == init_pl[d] {
                continue;
            }
            let dim = Some(mesh.dims()[d].name.clone());
            init.push(
                &tp.module,
                HookPoint::ForwardPre,
                name.clone(),
                *index,
                Action::Redist {
                    src: None,
                    dst: vec![*run_p],
                    mesh: dim.clone(),
                },
            );
            init.push(
                &tp.module,
                HookPoint::BackwardPost,
                format!("{name}.grad"),
                *index,
                Action::Redist {
                    src: None,
                    dst: vec![init_pl[d]],
                    mesh: dim,
                },
            );
        }
    }
    let mut records = init.records;
    records.extend(b.records);
    Ok(PlanIr::new(records))
}
