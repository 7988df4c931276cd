//! Analytic completion-time models. In liquid mode a task consumes a batch of
//! n then processes them in order, so message i completes n*t_c + i*t_p after
//! the batch starts. In reactive mode the consumed message waits t_w in the
//! task queue instead: n*t_c + t_w + t_p.

use thiserror::Error;

use crate::time::Micros;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("batch index {i} outside 1..={n}")]
    IndexOutOfRange { i: u64, n: u64 },
}

pub fn model_completion_liquid(
    n: u64,
    t_c: Micros,
    t_p: Micros,
    i: u64,
) -> Result<Micros, ModelError> {
    if i < 1 || i > n {
        return Err(ModelError::IndexOutOfRange { i, n });
    }
    Ok(n * t_c + i * t_p)
}

pub fn model_completion_reactive(n: u64, t_c: Micros, t_w_i: Micros, t_p: Micros) -> Micros {
    n * t_c + t_w_i + t_p
}
