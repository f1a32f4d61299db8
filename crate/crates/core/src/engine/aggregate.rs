use crate::constraints::ValidityReport;
use crate::error::{Error, Result};
use crate::model::ParamVector;

use super::{AlgorithmVariant, ClientUpdate, ControlVariates};

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    /// Weights aligned with the input updates.
    pub weights: Vec<f64>,
    pub delta: Vec<f64>,
}

/// `alpha_k = n_k s_k / sum_j n_j s_j`, or `n_k / sum_j n_j` when
/// `use_validity` is false.
pub fn aggregation_weights(updates: &[ClientUpdate], reports: &[ValidityReport], use_validity: bool) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::config("updates", "aggregation needs at least one participant"));
    }
    if reports.len() != updates.len() {
        return Err(Error::DimensionMismatch { context: "validity reports", expected: updates.len(), found: reports.len() });
    }
    let raw: Vec<f64> = updates
        .iter()
        .zip(reports)
        .map(|(u, r)| {
            let s = if use_validity { r.score } else { 1.0 };
            u.n_k as f64 * s
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateRound);
    }
    Ok(raw.into_iter().map(|r| r / total).collect())
}

/// Weighted sum of deltas, accumulated in ascending client-id order.
///
/// For FedAdam this is the plain sample-size-weighted delta; the adaptive
/// step is taken by [`ServerState::apply`].
pub fn aggregate(updates: &[ClientUpdate], reports: &[ValidityReport], variant: &AlgorithmVariant) -> Result<Aggregate> {
    let weights = aggregation_weights(updates, reports, variant.uses_validity())?;
    let d = updates[0].delta.len();
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let mut delta = vec![0.0; d];
    for i in order {
        let u = &updates[i];
        if u.delta.len() != d {
            return Err(Error::DimensionMismatch { context: "client delta", expected: d, found: u.delta.len() });
        }
        let a = weights[i];
        delta.iter_mut().zip(&u.delta).for_each(|(acc, v)| *acc += a * v);
    }
    Ok(Aggregate { weights, delta })
}

/// Server-side optimizer state carried across rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    num_clients: usize,
    scaffold: Option<(Vec<f64>, Vec<Vec<f64>>)>,
    adam: Option<(Vec<f64>, Vec<f64>)>,
}

impl ServerState {
    pub fn new(variant: &AlgorithmVariant, num_clients: usize, d: usize) -> Self {
        Self {
            num_clients,
            scaffold: matches!(variant, AlgorithmVariant::Scaffold).then(|| (vec![0.0; d], vec![vec![0.0; d]; num_clients])),
            adam: matches!(variant, AlgorithmVariant::FedAdam { .. }).then(|| (vec![0.0; d], vec![0.0; d])),
        }
    }

    pub fn control_variates(&self, client: usize) -> Option<ControlVariates<'_>> {
        self.scaffold.as_ref().map(|(c, ck)| ControlVariates { client: &ck[client], server: c })
    }

    pub fn server_variate(&self) -> Option<&[f64]> {
        self.scaffold.as_ref().map(|(c, _)| c.as_slice())
    }

    pub fn client_variates(&self) -> Option<&[Vec<f64>]> {
        self.scaffold.as_ref().map(|(_, ck)| ck.as_slice())
    }

    /// `c_k <- c_k - c - delta_k / (E eta)`, then
    /// `c <- c + (1/K) sum_k (c_k_new - c_k_old)`.
    pub fn update_client_variates(&mut self, updates: &[ClientUpdate], local_steps: usize, learning_rate: f64) {
        let Some((c, ck)) = self.scaffold.as_mut() else { return };
        if learning_rate <= 0.0 || local_steps == 0 || updates.is_empty() {
            return;
        }
        let scale = 1.0 / (local_steps as f64 * learning_rate);
        let mut shift = vec![0.0; c.len()];
        let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
        sorted.sort_by_key(|u| u.client_id);
        for u in sorted {
            let old = &mut ck[u.client_id];
            for j in 0..c.len() {
                let new = old[j] - c[j] - u.delta[j] * scale;
                shift[j] += new - old[j];
                old[j] = new;
            }
        }
        let inv_k = 1.0 / self.num_clients as f64;
        c.iter_mut().zip(&shift).for_each(|(cj, s)| *cj += inv_k * s);
    }

    /// Applies an aggregated delta to the global model.
    pub fn apply(&mut self, variant: &AlgorithmVariant, w: &ParamVector, agg: &Aggregate) -> Result<ParamVector> {
        match (variant, self.adam.as_mut()) {
            (AlgorithmVariant::FedAdam { server_lr, beta1, beta2, epsilon }, Some((m, v))) => {
                let step: Vec<f64> = agg
                    .delta
                    .iter()
                    .zip(m.iter_mut().zip(v.iter_mut()))
                    .map(|(g, (mj, vj))| {
                        *mj = beta1 * *mj + (1.0 - beta1) * g;
                        *vj = beta2 * *vj + (1.0 - beta2) * g * g;
                        server_lr * *mj / (vj.sqrt() + epsilon)
                    })
                    .collect();
                w.offset(&step)
            }
            _ => w.offset(&agg.delta),
        }
    }
}
