//! Run reports: JSON summary, CSV tables and canonical weight digests.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::comm::cost::{cost_model_eval, CostParams};
use crate::comm::Ledger;
use crate::dispatch::Counters;
use crate::engine::Tensor;
use crate::train::RunResult;

/// SHA-256 over each tensor's path, dtype, shape and little-endian data, in
/// order.
pub fn weight_digest(weights: &[(String, Tensor)]) -> String {
    let mut h = Sha256::new();
    for (path, t) in weights {
        h.update((path.len() as u64).to_le_bytes());
        h.update(path.as_bytes());
        h.update(t.dtype().to_string().as_bytes());
        h.update((t.ndim() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        h.update(t.data().to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCheck {
    pub name: String,
    pub cells: usize,
    pub matched: usize,
}

impl RngCheck {
    pub fn ok(&self) -> bool {
        self.cells == self.matched
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub losses: Vec<f64>,
    pub weight_digest: String,
    pub rng_checks: Vec<RngCheck>,
    pub dispatch_counters: Counters,
    pub ledger: Ledger,
}

impl Report {
    pub fn from_run(run: &RunResult, rng_checks: Vec<RngCheck>) -> Self {
        Self {
            losses: run.losses.clone(),
            weight_digest: weight_digest(&run.weights),
            rng_checks,
            dispatch_counters: run.counters.clone(),
            ledger: run.ledger.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report fields serialize");
        s.push('\n');
        s
    }

    pub fn losses_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:e}");
        }
        s
    }

    /// Writes `report.json`, `losses.csv` and `ledger.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<Vec<PathBuf>> {
        write_files(dir, &[("report.json", self.to_json()), ("losses.csv", self.losses_csv()), ("ledger.csv", self.ledger.to_csv())])
    }
}

pub fn write_files(dir: &Path, files: &[(&str, String)]) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    files
        .iter()
        .map(|(name, body)| {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            Ok(p)
        })
        .collect()
}

/// Modeled vanilla and fused reduce times for each mesh shape, with
/// `S·B = sb`.
pub fn cost_table(meshes: &[Vec<usize>], sb: f64) -> String {
    let mut s = String::from("P,N,T_vanilla,T_fused,ratio\n");
    for p in meshes {
        let r = cost_model_eval(&CostParams { s: sb, b: 1.0, p: p.clone() });
        let shape = p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
        let _ = writeln!(s, "{shape},{},{},{},{}", p.len(), r.t_vanilla, r.t_fused, r.ratio);
    }
    s
}
