use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// One forward pass: a fresh tape, the parameters it reads, and the mode.
///
/// Dropout only fires in training mode and draws from the pass's own RNG,
/// so evaluation passes are deterministic.
pub struct Pass<'a> {
    pub tape: Tape,
    pub params: &'a ParamStore,
    train: bool,
    rng: ChaCha8Rng,
}

impl<'a> Pass<'a> {
    pub fn eval(params: &'a ParamStore) -> Self {
        Pass {
            tape: Tape::new(),
            params,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(params: &'a ParamStore, seed: u64) -> Self {
        Pass {
            tape: Tape::new(),
            params,
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Wraps an existing tape in evaluation mode.
    pub fn with_tape(tape: Tape, params: &'a ParamStore) -> Self {
        Pass {
            tape,
            params,
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.params.bind(&mut self.tape, id)
    }

    /// Inverted dropout in training mode, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.train || rate == 0.0 {
            return Ok(x);
        }
        self.tape.dropout(x, rate, &mut self.rng)
    }
}
