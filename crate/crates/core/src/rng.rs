//! Seed derivation. Every consumer of randomness draws from its own ChaCha
//! stream keyed by `(experiment seed, domain, index)`, so adding or
//! reordering consumers never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Domain {
    /// Synthetic samples of one client.
    ClientData = 1,
    /// Cue patterns of the synthetic generator.
    Patterns = 2,
    /// Per-client training stream (pairing, λ draws, batch order).
    ClientTrain = 3,
    /// Per-client personalized-parameter initialization.
    ClientInit = 4,
    /// Shared-parameter initialization on the server.
    ServerInit = 5,
    /// Client selection.
    Server = 6,
}

pub fn derive(seed: u64, domain: Domain, index: u32) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 32) | u64::from(index));
    rng
}

/// Serializable position of a [`Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, lowercase hex.
    pub seed: String,
    pub stream: u64,
    /// Word position as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<Rng> {
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(Error::format("rng.seed", "expected 64 hex digits"));
        }
        let mut key = [0u8; 32];
        for (i, byte) in key.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::format("rng.seed", e.to_string()))?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e: std::num::ParseIntError| Error::format("rng.word_pos", e.to_string()))?;
        let mut rng = Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}
