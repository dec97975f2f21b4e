//! Inter-round discrepancy check.
//!
//! For a client active at `t_prev` and again at `t`, the start state
//! `S = W_c^t - s W_ga_hat^t + s B_init A_init` and the previous end state
//! `E = W_c^{t_prev} - s W_ga_hat^{t_prev} + s B~ A~` satisfy
//!
//! ```text
//! S - E = s (1 - zeta) (sum B_s A_s - B_c A_c) + s eps_init + s eps_end
//! ```
//!
//! where the sum runs over the server broadcasts merged in between and
//! `B_c A_c` is the previous upload. Both sides are assembled from the
//! recorded matrices and compared.

use std::fmt::Write as _;
use std::path::Path;

use crate::client::ClientRoundContext;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const REPORT_HEADER: &str = "round,client_id,layer,lhs_norm,rhs_norm,residual,bound_slack";

/// One `(round, client, layer)` entry of the report.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyRow {
    pub round: usize,
    pub client_id: usize,
    pub layer: usize,
    /// `||S - E||_F`.
    pub lhs_norm: f64,
    /// Norm of the assembled right-hand side.
    pub rhs_norm: f64,
    /// `||(S - E) - rhs||_F`.
    pub residual: f64,
    /// Triangle bound minus `||S - E||_F`; non-negative up to rounding.
    pub bound_slack: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiscrepancyReport {
    pub rows: Vec<DiscrepancyRow>,
}

impl DiscrepancyReport {
    pub fn max_residual(&self) -> f64 {
        self.rows.iter().map(|r| r.residual).fold(0.0, f64::max)
    }

    pub fn max_lhs(&self) -> f64 {
        self.rows.iter().map(|r| r.lhs_norm).fold(0.0, f64::max)
    }

    pub fn min_slack(&self) -> f64 {
        self.rows.iter().map(|r| r.bound_slack).fold(f64::INFINITY, f64::min)
    }

    /// Every residual below `tolerance` and every bound slack above `-slack_tolerance`.
    pub fn holds(&self, tolerance: f64, slack_tolerance: f64) -> bool {
        self.rows
            .iter()
            .all(|r| r.residual < tolerance && r.bound_slack >= -slack_tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.round, r.client_id, r.layer, r.lhs_norm, r.rhs_norm, r.residual, r.bound_slack
            )
            .unwrap();
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// A client's context at two consecutive participations.
#[derive(Debug, Clone)]
pub struct RoundTransition {
    pub previous: ClientRoundContext,
    pub current: ClientRoundContext,
}

fn missing(what: &str, t: &RoundTransition) -> Error {
    Error::Verification(format!(
        "client {} round {}: trace is missing {what}",
        t.current.client_id, t.current.round
    ))
}

/// Checks one transition layer by layer.
pub fn verify_transition(tr: &RoundTransition, scale: f64) -> Result<Vec<DiscrepancyRow>> {
    let (prev, cur) = (&tr.previous, &tr.current);
    if prev.client_id != cur.client_id || prev.round >= cur.round {
        return Err(Error::Verification(format!(
            "transition pairs client {} round {} with client {} round {}",
            prev.client_id, prev.round, cur.client_id, cur.round
        )));
    }
    let layers = cur.backbone.len();
    let server_sum = cur
        .server_sum
        .as_ref()
        .ok_or_else(|| missing("the merged server sum", tr))?;
    for (what, n) in [
        ("previous backbones", prev.backbone.len()),
        ("previous trained factors", prev.trained_factors.len()),
        ("previous uploads", prev.upload.len()),
        ("previous eps_end", prev.eps_end.len()),
        ("server sums", server_sum.len()),
        ("eps_init", cur.eps_init.len()),
        ("init factors", cur.init_factors.len()),
    ] {
        if n != layers {
            return Err(missing(what, tr));
        }
    }
    let s = scale;
    let zeta = cur.zeta;
    let mut rows = Vec::with_capacity(layers);
    for l in 0..layers {
        let start = cur.backbone[l]
            .add_scaled(-s, &cur.w_ga_hat[l])?
            .add_scaled(s, &cur.init_factors[l].product()?)?;
        let end = prev.backbone[l]
            .add_scaled(-s, &prev.w_ga_hat[l])?
            .add_scaled(s, &prev.trained_factors[l].product()?)?;
        let lhs = start.sub(&end)?;

        let drift = server_sum[l].sub(&prev.upload[l].product()?)?;
        let rhs = drift
            .scaled(s * (1.0 - zeta))?
            .add_scaled(s, &cur.eps_init[l])?
            .add_scaled(s, &prev.eps_end[l])?;
        let bound = s * (1.0 - zeta) * drift.frobenius_norm()
            + s * cur.eps_init[l].frobenius_norm()
            + s * prev.eps_end[l].frobenius_norm();
        let lhs_norm = lhs.frobenius_norm();
        rows.push(DiscrepancyRow {
            round: cur.round,
            client_id: cur.client_id,
            layer: l,
            lhs_norm,
            rhs_norm: rhs.frobenius_norm(),
            residual: lhs.sub(&rhs)?.frobenius_norm(),
            bound_slack: bound - lhs_norm,
        });
    }
    Ok(rows)
}

/// Checks every transition of a run.
pub fn verify_proposition(trace: &[RoundTransition], scale: f64) -> Result<DiscrepancyReport> {
    let mut rows = Vec::new();
    for tr in trace {
        rows.extend(verify_transition(tr, scale)?);
    }
    Ok(DiscrepancyReport { rows })
}

/// Test hook: perturbs the recorded `eps_init` of the first transition so
/// the identity no longer holds.
pub fn corrupt(trace: &mut [RoundTransition]) {
    if let Some(tr) = trace.first_mut() {
        if let Some(e) = tr.current.eps_init.first_mut() {
            let (rows, cols) = e.shape();
            let mut data = e.data().to_vec();
            data[0] += 1.0;
            *e = Matrix::new(rows, cols, data).expect("finite perturbation");
        }
    }
}
