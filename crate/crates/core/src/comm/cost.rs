//! Bandwidth-only cost of reducing gradients over several mesh dims, either
//! one dim after another or once over the flattened group.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Payload bytes.
    pub s: f64,
    /// Transfer time per byte.
    pub b: f64,
    /// Device count of each reduced mesh dim; `N` is its length.
    pub p: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub t_vanilla: f64,
    pub t_fused: f64,
    pub ratio: f64,
}

/// `T_vanilla = 2SB·Σ(P_i − 1)/P_i` and `T_fused = 2SB·(∏P_i − 1)/∏P_i`.
pub fn cost_model_eval(params: &CostParams) -> CostReport {
    let sb2 = 2.0 * params.s * params.b;
    let sum: f64 = params.p.iter().map(|&p| (p - 1) as f64 / p as f64).sum();
    let prod: u128 = params.p.iter().map(|&p| p as u128).product();
    let t_vanilla = sb2 * sum;
    let t_fused = sb2 * ((prod - 1) as f64 / prod as f64);
    let ratio = if t_fused == 0.0 { 1.0 } else { t_vanilla / t_fused };
    CostReport { t_vanilla, t_fused, ratio }
}
