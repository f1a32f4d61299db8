use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::rng::Stream;

use super::{AlgorithmVariant, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub delta: Vec<f64>,
    pub n_k: usize,
    pub local_loss_after: f64,
}

/// SCAFFOLD control variates seen by one client.
#[derive(Debug, Clone, Copy)]
pub struct ControlVariates<'a> {
    pub client: &'a [f64],
    pub server: &'a [f64],
}

/// `E` local SGD steps from `start`, one minibatch of size
/// `min(b, n_k)` per step, drawn without replacement from `stream`.
///
/// FedProx adds `mu (w - start)` to every gradient; SCAFFOLD adds `c - c_k`.
/// A non-finite iterate yields `Error::Diverged`.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    client: &ClientDataset,
    start: &ParamVector,
    cfg: &TrainConfig,
    learning_rate: f64,
    variant: &AlgorithmVariant,
    control: Option<ControlVariates<'_>>,
    stream: &mut Stream,
) -> Result<ClientUpdate> {
    let d = spec.param_count();
    if start.len() != d {
        return Err(Error::DimensionMismatch { context: "local start", expected: d, found: start.len() });
    }
    if let Some(c) = control {
        if c.client.len() != d || c.server.len() != d {
            return Err(Error::DimensionMismatch { context: "control variates", expected: d, found: c.client.len() });
        }
    }
    let examples = client.examples();
    let n = examples.len();
    let b = cfg.batch_size.min(n);
    let mu = match variant {
        AlgorithmVariant::FedProx { mu } => *mu,
        _ => 0.0,
    };
    let s = start.as_slice();
    let mut w = s.to_vec();
    let mut scratch = Vec::new();
    let diverged = || Error::Diverged { client: client.id() };

    for _ in 0..cfg.local_epochs {
        let mut g = if b == n {
            model::gradient_of(spec, &w, examples.iter())?.values
        } else {
            let idx = stream.sample_indices(n, b, &mut scratch);
            model::gradient_of(spec, &w, idx.iter().map(|&i| &examples[i]))?.values
        };
        if mu != 0.0 {
            g.iter_mut().zip(w.iter().zip(s)).for_each(|(gi, (wi, si))| *gi += mu * (wi - si));
        }
        if let Some(c) = control {
            for ((gi, ck), cs) in g.iter_mut().zip(c.client).zip(c.server) {
                *gi += cs - ck;
            }
        }
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= learning_rate * gi);
        if w.iter().any(|v| !v.is_finite()) {
            return Err(diverged());
        }
    }

    let local_loss_after = model::accumulate(spec, &w, examples, None)?.0 / n as f64;
    if !local_loss_after.is_finite() {
        return Err(diverged());
    }
    let delta = w.iter().zip(s).map(|(a, b)| a - b).collect();
    Ok(ClientUpdate { client_id: client.id(), delta, n_k: n, local_loss_after })
}
