use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "round,client_id,step,train_loss,zeta,eps_init,eps_end,eps_server,eval_acc,boundary_jump";

/// What one participating client reported in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRoundRecord {
    pub client_id: usize,
    pub losses: Vec<f64>,
    /// Per-layer `||eps_init||_F`; empty for the baselines.
    pub eps_init: Vec<f64>,
    pub eps_end: Vec<f64>,
    /// `|first loss this round - last loss at the previous participation|`.
    pub boundary_jump: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    /// Sorted ascending.
    pub participants: Vec<usize>,
    pub clients: Vec<ClientRoundRecord>,
    pub eval_acc: f64,
    pub eps_server: Vec<f64>,
    pub zeta: Option<f64>,
    pub wall_time_secs: f64,
}

impl RoundMetrics {
    /// Mean over clients that have a previous participation to compare with.
    pub fn mean_boundary_jump(&self) -> Option<f64> {
        let jumps: Vec<f64> = self.clients.iter().filter_map(|c| c.boundary_jump).collect();
        if jumps.is_empty() {
            None
        } else {
            Some(jumps.iter().sum::<f64>() / jumps.len() as f64)
        }
    }
}

/// Root-sum-square over layers, so one CSV cell holds the whole model.
pub fn combined_norm(per_layer: &[f64]) -> Option<f64> {
    if per_layer.is_empty() {
        None
    } else {
        Some(per_layer.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Renders the metrics table: one row per client step, then a summary row
/// with `client_id = -1`.
pub fn metrics_csv(rounds: &[RoundMetrics]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in rounds {
        for c in &m.clients {
            let eps_init = cell(combined_norm(&c.eps_init));
            let eps_end = cell(combined_norm(&c.eps_end));
            for (step, loss) in c.losses.iter().enumerate() {
                let jump = if step == 0 {
                    cell(c.boundary_jump)
                } else {
                    String::new()
                };
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},,,{}",
                    m.round,
                    c.client_id,
                    step,
                    cell(Some(*loss)),
                    cell(m.zeta),
                    eps_init,
                    eps_end,
                    jump
                )
                .unwrap();
            }
        }
        writeln!(
            out,
            "{},-1,,,{},,,{},{},{}",
            m.round,
            cell(m.zeta),
            cell(combined_norm(&m.eps_server)),
            cell(Some(m.eval_acc)),
            cell(m.mean_boundary_jump())
        )
        .unwrap();
    }
    out
}

pub fn write_metrics(rounds: &[RoundMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rounds)).map_err(|e| Error::io(path, e))
}

/// Mean absolute loss discontinuity at round boundaries: per client, the
/// average of `|first loss of a round - last loss of its previous round|`,
/// then averaged over clients.
pub fn boundary_jump(rounds: &[RoundMetrics]) -> Result<f64> {
    if rounds.len() < 2 {
        return Err(Error::Data(format!(
            "boundary jump needs at least 2 rounds, got {}",
            rounds.len()
        )));
    }
    let mut per_client: std::collections::BTreeMap<usize, (Option<f64>, Vec<f64>)> = Default::default();
    for m in rounds {
        for c in &m.clients {
            let (Some(first), Some(last)) = (c.losses.first(), c.losses.last()) else {
                continue;
            };
            let entry = per_client.entry(c.client_id).or_default();
            if let Some(prev) = entry.0 {
                entry.1.push((first - prev).abs());
            }
            entry.0 = Some(*last);
        }
    }
    let means: Vec<f64> = per_client
        .values()
        .filter(|(_, j)| !j.is_empty())
        .map(|(_, j)| j.iter().sum::<f64>() / j.len() as f64)
        .collect();
    if means.is_empty() {
        return Err(Error::Data("no client trained in two different rounds".into()));
    }
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round(t: usize, losses: Vec<f64>) -> RoundMetrics {
        RoundMetrics {
            round: t,
            participants: vec![0],
            clients: vec![ClientRoundRecord {
                client_id: 0,
                losses,
                eps_init: vec![],
                eps_end: vec![],
                boundary_jump: None,
            }],
            eval_acc: 0.5,
            eps_server: vec![],
            zeta: None,
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn continuous_trajectory_has_no_jump() {
        let r = vec![
            round(0, vec![3.0, 2.0]),
            round(1, vec![2.0, 1.5]),
            round(2, vec![1.5, 1.0]),
        ];
        assert_eq!(boundary_jump(&r).unwrap(), 0.0);
    }

    #[test]
    fn injected_jump_is_recovered() {
        let r = vec![
            round(0, vec![3.0, 2.0]),
            round(1, vec![2.5, 1.5]),
            round(2, vec![1.0, 0.7]),
        ];
        assert_eq!(boundary_jump(&r).unwrap(), 0.5);
    }

    #[test]
    fn one_round_is_an_error() {
        assert!(boundary_jump(&[round(0, vec![1.0])]).is_err());
    }

    #[test]
    fn empty_run_is_header_only() {
        assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
    }

    #[test]
    fn csv_layout() {
        let csv = metrics_csv(&[round(0, vec![1.0, 0.5])]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,0,0,1.0000000000000000e0,,,,,,");
        assert_eq!(lines[3], "0,-1,,,,,,,5.0000000000000000e-1,");
        assert!(lines.iter().all(|l| l.split(',').count() == 10));
    }
}
