use rayon::prelude::*;

use super::{loss_and_grads, ModelError, ModelParams, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub params: ModelParams,
    /// Mean corpus loss before each step, plus the final loss.
    pub losses: Vec<f64>,
}

/// Full-batch gradient descent on the mean response loss of `corpus`.
///
/// Per-sample gradients are computed in parallel and summed in corpus order,
/// so the result does not depend on the thread count.
pub fn fit(
    params: &ModelParams,
    corpus: &[TokenSequence],
    config: FitConfig,
) -> Result<FitReport, ModelError> {
    let mut current = params.clone();
    let mut losses = Vec::with_capacity(config.steps + 1);
    if corpus.is_empty() {
        return Ok(FitReport {
            params: current,
            losses,
        });
    }
    let scale = 1.0 / corpus.len() as f64;
    for _ in 0..config.steps {
        let per_sample: Vec<(f64, ModelParams)> = corpus
            .par_iter()
            .map(|s| loss_and_grads(&current, s))
            .collect::<Result<_, _>>()?;
        let mut total = ModelParams::zeros(current.config);
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            total.axpy(1.0, g);
        }
        losses.push(loss * scale);
        current.axpy(-config.learning_rate * scale, &total);
        if !current.is_finite() {
            return Err(ModelError::NonFiniteParams);
        }
    }
    let final_loss: f64 = corpus
        .par_iter()
        .map(|s| super::forward_loss(&current, s))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum();
    losses.push(final_loss * scale);
    Ok(FitReport {
        params: current,
        losses,
    })
}
