//! Counter-based random streams.
//!
//! Every path owns a ChaCha8 stream selected by `(seed, purpose, path)`. The
//! increments a path sees depend only on that key and the step count, never on
//! the worker that simulates it, so parallel runs are reproducible for any
//! thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Brownian = 0,
    InitialState = 1,
    Probe = 2,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Brownian increments `N(0, dt I)` for one path, produced step by step.
pub struct BrownianStream {
    rng: ChaCha8Rng,
    scale: f64,
}

impl BrownianStream {
    pub fn new(seed: u64, path: usize, dt: f64) -> Self {
        Self {
            rng: stream(seed, Purpose::Brownian, path as u64),
            scale: dt.sqrt(),
        }
    }

    pub fn fill<S: Scalar>(&mut self, out: &mut [S]) {
        for o in out.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *o = S::lit(z * self.scale);
        }
    }
}

/// The single uniform used to draw a path's initial state.
pub fn initial_uniform(seed: u64, path: usize) -> f64 {
    stream(seed, Purpose::InitialState, path as u64).random::<f64>()
}
