//! `key = value` scenario files.
//!
//! ```text
//! # two-way tensor parallel
//! mesh = TP:2
//! layers = 8,16,8
//! plan = tp.plan
//! steps = 50
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use dtsim::dispatch::Mode;
use dtsim::mesh::DeviceMesh;
use dtsim::plan::GradReduce;
use dtsim::train::{DistConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("bad mesh `{0}`: expected [name=]dim:size,dim:size")]
    Mesh(String),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// `[name=]dim:size,...`; an unnamed mesh takes its dim name when it has one
/// dim and `mesh` otherwise.
pub fn parse_mesh(s: &str) -> Result<DeviceMesh, ScenarioError> {
    let bad = || ScenarioError::Mesh(s.to_string());
    let (name, dims) = match s.split_once('=') {
        Some((n, d)) => (Some(n.trim()), d),
        None => (None, s),
    };
    let dims: Vec<(String, usize)> = dims
        .split(',')
        .map(|d| {
            let (n, k) = d.trim().split_once(':').ok_or_else(bad)?;
            Ok((n.trim().to_string(), k.trim().parse().map_err(|_| bad())?))
        })
        .collect::<Result<_, ScenarioError>>()?;
    let name = match name {
        Some(n) => n.to_string(),
        None if dims.len() == 1 => dims[0].0.clone(),
        None => "mesh".to_string(),
    };
    let named: Vec<(&str, usize)> = dims.iter().map(|(n, k)| (n.as_str(), *k)).collect();
    DeviceMesh::from_shape(name, &named).map_err(|_| bad())
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub train: TrainConfig,
    pub mesh: DeviceMesh,
    pub plan: Option<PathBuf>,
    /// Plan lines given inline with repeated `directive = ...` keys.
    pub inline_plan: Vec<String>,
    pub mode: Mode,
    pub reduce: GradReduce,
    pub bucket_bytes: usize,
    pub deferred: bool,
    pub cache: bool,
    pub strict: bool,
    pub out: PathBuf,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            train: TrainConfig::mlp_f64(),
            mesh: DeviceMesh::from_shape("TP", &[("TP", 1)]).expect("valid mesh"),
            plan: None,
            inline_plan: Vec::new(),
            mode: Mode::Dynamic,
            reduce: GradReduce::Bucketed,
            bucket_bytes: 1 << 16,
            deferred: true,
            cache: true,
            strict: true,
            out: PathBuf::from("out"),
        }
    }
}

fn value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T, ScenarioError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| ScenarioError::Line {
        line,
        msg: format!("bad value `{v}` for `{key}`: {e}"),
    })
}

fn list(line: usize, key: &str, v: &str) -> Result<Vec<usize>, ScenarioError> {
    v.split(',').map(|x| value(line, key, x.trim())).collect()
}

impl Scenario {
    /// Parses `text`; relative `plan` and `out` paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, ScenarioError> {
        let mut s = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, v) = content.split_once('=').ok_or_else(|| ScenarioError::Line {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, v) = (key.trim(), v.trim());
            let t = &mut s.train;
            match key {
                "mesh" => s.mesh = parse_mesh(v).map_err(|e| ScenarioError::Line { line, msg: e.to_string() })?,
                "layers" => t.dims = list(line, key, v)?,
                "batch" => t.batch = value(line, key, v)?,
                "dropout" => t.dropout = value(line, key, v)?,
                "dtype" => t.dtype = value(line, key, v)?,
                "lr" => t.lr = value(line, key, v)?,
                "steps" => t.steps = value(line, key, v)?,
                "seed" => t.seed = value(line, key, v)?,
                "offset" => t.offset = value(line, key, v)?,
                "theta" => t.theta = value(line, key, v)?,
                "plan" => s.plan = Some(base.join(v)),
                "directive" => s.inline_plan.push(v.to_string()),
                "mode" => s.mode = value(line, key, v)?,
                "grad_reduce" => s.reduce = value(line, key, v)?,
                "bucket_bytes" => s.bucket_bytes = value(line, key, v)?,
                "deferred" => s.deferred = value(line, key, v)?,
                "cache" => s.cache = value(line, key, v)?,
                "strict" => s.strict = value(line, key, v)?,
                "out" => s.out = base.join(v),
                _ => {
                    return Err(ScenarioError::Line {
                        line,
                        msg: format!("unknown key `{key}`"),
                    })
                }
            }
        }
        if s.train.dims.len() < 2 {
            return Err(ScenarioError::Line {
                line: 0,
                msg: "`layers` needs at least an input and an output size".into(),
            });
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Plan file contents followed by inline directives.
    pub fn plan_text(&self) -> Result<String, ScenarioError> {
        let mut text = match &self.plan {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ScenarioError::Io { path: p.clone(), source })?,
            None => String::new(),
        };
        for d in &self.inline_plan {
            text.push_str(d);
            text.push('\n');
        }
        Ok(text)
    }

    pub fn dist(&self, plan: dtsim::plan::Plan) -> DistConfig {
        DistConfig {
            mesh: self.mesh.clone(),
            plan,
            mode: self.mode,
            reduce: self.reduce,
            bucket_bytes: self.bucket_bytes,
            deferred: self.deferred,
            cache: self.cache,
            strict: self.strict,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dtsim::engine::DType;

    #[test]
    fn parse_full_scenario() {
        let text = "\
# comment
mesh = M=DP:2,TP:2
layers = 4, 8, 2
dtype = i64
steps = 3
mode = static
grad_reduce = fused
directive = shard fc1.weight S(1) @TP
plan = p.plan
out = r
";
        let s = Scenario::parse(text, Path::new("/base")).unwrap();
        assert_eq!(s.mesh.name(), "M");
        assert_eq!(s.mesh.shape(), [2, 2]);
        assert_eq!(s.train.dims, [4, 8, 2]);
        assert_eq!(s.train.dtype, DType::I64);
        assert_eq!(s.mode, Mode::StaticEager);
        assert_eq!(s.reduce, GradReduce::Fused);
        assert_eq!(s.plan.as_deref(), Some(Path::new("/base/p.plan")));
        assert_eq!(s.out, Path::new("/base/r"));
        assert_eq!(s.inline_plan, ["shard fc1.weight S(1) @TP"]);
    }

    #[test]
    fn errors_name_the_line() {
        let e = Scenario::parse("steps = 2\nsteps = many\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().starts_with("line 2: bad value `many` for `steps`"), "{e}");
        let e = Scenario::parse("\nbogus = 1\n", Path::new(".")).unwrap_err();
        assert_eq!(e.to_string(), "line 2: unknown key `bogus`");
        let e = Scenario::parse("mesh = DP\n", Path::new(".")).unwrap_err();
        assert!(e.to_string().starts_with("line 1: bad mesh"), "{e}");
    }

    #[test]
    fn mesh_names() {
        assert_eq!(parse_mesh("DP:4").unwrap().name(), "DP");
        assert_eq!(parse_mesh("DP:2,TP:2").unwrap().name(), "mesh");
        assert!(parse_mesh("DP:0").is_err());
    }
}
