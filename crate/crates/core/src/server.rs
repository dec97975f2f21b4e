//! Server-side aggregation and backbone merge.

use crate::client::round_kaiming_a;
use crate::error::{Error, Result};
use crate::linalg::{svd_approx, FactorPair, Matrix, SvdMode};
use crate::lora::rslora_scale;

/// Global backbone `W_s` and the most recent server factors `(B_s, A_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub backbones: Vec<Matrix>,
    pub factors: Vec<FactorPair>,
    pub round: usize,
    pub total_rounds: usize,
    pub scale: f64,
}

impl ServerState {
    /// `B_s = 0`, `A_s` Kaiming-uniform (the round-0 shared draw).
    pub fn new(backbones: Vec<Matrix>, rank: usize, alpha: f64, total_rounds: usize, seed: u64) -> Result<Self> {
        let factors = backbones
            .iter()
            .enumerate()
            .map(|(l, w)| {
                FactorPair::new(
                    Matrix::zeros(w.rows(), rank)?,
                    round_kaiming_a(seed, 0, l, rank, w.cols())?,
                )
            })
            .collect::<Result<_>>()?;
        Ok(ServerState {
            backbones,
            factors,
            round: 0,
            total_rounds,
            scale: rslora_scale(alpha, rank),
        })
    }

    /// Model used for evaluation: the backbone, plus the live adapter when
    /// the protocol never merges it.
    pub fn global_weights(&self, include_adapter: bool) -> Result<Vec<Matrix>> {
        if !include_adapter {
            return Ok(self.backbones.clone());
        }
        self.backbones
            .iter()
            .zip(&self.factors)
            .map(|(w, f)| w.add_scaled(self.scale, &f.product()?))
            .collect()
    }
}

/// Factors uploaded by one client, with its sample count `n_c`.
#[derive(Debug, Clone)]
pub struct ClientUpload {
    pub client_id: usize,
    pub size: usize,
    pub factors: Vec<FactorPair>,
}

fn sorted_and_checked(uploads: &[ClientUpload]) -> Result<(Vec<&ClientUpload>, Vec<f64>)> {
    if uploads.is_empty() {
        return Err(Error::Data("aggregation needs at least one client update".into()));
    }
    let mut ordered: Vec<&ClientUpload> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let layers = ordered[0].factors.len();
    for u in &ordered {
        if u.size == 0 {
            return Err(Error::Data(format!("client {} reported zero samples", u.client_id)));
        }
        if u.factors.len() != layers {
            return Err(Error::Shape {
                op: "aggregate",
                lhs: (u.factors.len(), 0),
                rhs: (layers, 0),
            });
        }
    }
    let total: usize = ordered.iter().map(|u| u.size).sum();
    let weights = ordered.iter().map(|u| u.size as f64 / total as f64).collect();
    Ok((ordered, weights))
}

/// `sum_c (n_c / N) B_c A_c` per layer, summed in client-id order.
pub fn aggregate_full_rank(uploads: &[ClientUpload]) -> Result<Vec<Matrix>> {
    let (ordered, weights) = sorted_and_checked(uploads)?;
    let layers = ordered[0].factors.len();
    (0..layers)
        .map(|l| {
            let mut acc = ordered[0].factors[l].product()?.scaled(weights[0])?;
            for (u, &w) in ordered.iter().zip(&weights).skip(1) {
                acc = acc.add_scaled(w, &u.factors[l].product()?)?;
            }
            Ok(acc)
        })
        .collect()
}

/// Factor-wise weighted mean `(sum w_c B_c, sum w_c A_c)`.
pub fn aggregate_factor_average(uploads: &[ClientUpload]) -> Result<Vec<FactorPair>> {
    let (ordered, weights) = sorted_and_checked(uploads)?;
    let layers = ordered[0].factors.len();
    (0..layers)
        .map(|l| {
            let first = &ordered[0].factors[l];
            for u in &ordered {
                let f = &u.factors[l];
                if f.b.shape() != first.b.shape() || f.a.shape() != first.a.shape() {
                    return Err(Error::Rank {
                        rank: f.rank(),
                        rows: f.b.rows(),
                        cols: f.a.cols(),
                        max: first.rank(),
                    });
                }
            }
            let mut b = first.b.scaled(weights[0])?;
            let mut a = first.a.scaled(weights[0])?;
            for (u, &w) in ordered.iter().zip(&weights).skip(1) {
                b = b.add_scaled(w, &u.factors[l].b)?;
                a = a.add_scaled(w, &u.factors[l].a)?;
            }
            FactorPair::new(b, a)
        })
        .collect()
}

/// Rank-`r` projection of the aggregated update.
#[derive(Debug, Clone)]
pub struct Projection {
    pub factors: Vec<FactorPair>,
    /// `||dW - B A||_F` per layer.
    pub eps_server: Vec<f64>,
}

pub fn project_rank_r(delta: &[Matrix], r: usize, mode: &SvdMode) -> Result<Projection> {
    let mut factors = Vec::with_capacity(delta.len());
    let mut eps_server = Vec::with_capacity(delta.len());
    for d in delta {
        let f = svd_approx(d, r, mode)?;
        eps_server.push(d.sub(&f.product()?)?.frobenius_norm());
        factors.push(f);
    }
    Ok(Projection { factors, eps_server })
}

/// `W_s += s B A`, replace the server factors, advance the round.
pub fn merge_backbone(state: &mut ServerState, factors: Vec<FactorPair>) -> Result<()> {
    if factors.len() != state.backbones.len() {
        return Err(Error::Shape {
            op: "merge_backbone",
            lhs: (factors.len(), 0),
            rhs: (state.backbones.len(), 0),
        });
    }
    for (w, f) in state.backbones.iter_mut().zip(&factors) {
        w.add_scaled_assign(state.scale, &f.product()?)?;
    }
    state.factors = factors;
    state.round += 1;
    Ok(())
}

/// Replace the server factors without touching the backbone.
pub fn replace_factors(state: &mut ServerState, factors: Vec<FactorPair>) -> Result<()> {
    if factors.len() != state.backbones.len() {
        return Err(Error::Shape {
            op: "replace_factors",
            lhs: (factors.len(), 0),
            rhs: (state.backbones.len(), 0),
        });
    }
    state.factors = factors;
    state.round += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(b: &[[f64; 1]], a: &[[f64; 2]]) -> FactorPair {
        FactorPair::new(Matrix::from_rows(b).unwrap(), Matrix::from_rows(a).unwrap()).unwrap()
    }

    fn upload(id: usize, size: usize, f: FactorPair) -> ClientUpload {
        ClientUpload {
            client_id: id,
            size,
            factors: vec![f],
        }
    }

    #[test]
    fn single_client_is_exact() {
        let f = pair(&[[0.3], [-1.7]], &[[2.1, 0.9]]);
        let out = aggregate_full_rank(&[upload(4, 13, f.clone())]).unwrap();
        assert_eq!(out[0], f.product().unwrap());
    }

    #[test]
    fn opposite_b_cancels() {
        let f = pair(&[[1.0], [2.0]], &[[3.0, -1.0]]);
        let g = FactorPair::new(f.b.scaled(-1.0).unwrap(), f.a.clone()).unwrap();
        let out = aggregate_full_rank(&[upload(0, 5, f), upload(1, 5, g)]).unwrap();
        assert!(out[0].is_zero());
    }

    #[test]
    fn empty_updates_rejected() {
        assert!(aggregate_full_rank(&[]).is_err());
        assert!(aggregate_factor_average(&[]).is_err());
    }

    #[test]
    fn identical_updates_average_to_themselves() {
        let f = pair(&[[1.5], [2.0]], &[[3.0, -1.0]]);
        let out = aggregate_factor_average(&[upload(0, 2, f.clone()), upload(1, 2, f.clone())]).unwrap();
        assert_eq!(out[0], f);
    }

    #[test]
    fn factor_average_rejects_rank_mismatch() {
        let f = pair(&[[1.0], [2.0]], &[[3.0, -1.0]]);
        let g = FactorPair::zeros(2, 2, 2).unwrap();
        assert!(matches!(
            aggregate_factor_average(&[upload(0, 1, f), upload(1, 1, g)]),
            Err(Error::Rank { .. })
        ));
    }

    #[test]
    fn zero_merge_still_advances_round() {
        let w = Matrix::from_fn(2, 2, |i, j| (i + j) as f64).unwrap();
        let mut s = ServerState::new(vec![w.clone()], 1, 2.0, 3, 0).unwrap();
        merge_backbone(&mut s, vec![FactorPair::zeros(2, 2, 1).unwrap()]).unwrap();
        assert_eq!(s.backbones[0], w);
        assert_eq!(s.round, 1);
    }

    #[test]
    fn initial_factors_are_neutral() {
        let w = Matrix::from_fn(3, 4, |i, j| (i * j) as f64).unwrap();
        let s = ServerState::new(vec![w.clone()], 2, 4.0, 3, 11).unwrap();
        assert!(s.factors[0].b.is_zero());
        assert!(!s.factors[0].a.is_zero());
        assert_eq!(s.global_weights(true).unwrap()[0], w);
    }
}
