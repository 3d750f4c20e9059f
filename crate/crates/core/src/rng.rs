//! Seeded random streams: one independent ChaCha stream per (seed, role, index).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a random stream is used for; distinct roles never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Validation,
    Test,
    TruthPool,
    Unlabeled,
    SolutionInit,
    SolutionShuffle,
    RieszInit,
    RieszShuffle,
    Folds,
    MonteCarlo,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Train => 1,
            Role::Validation => 2,
            Role::Test => 3,
            Role::TruthPool => 4,
            Role::Unlabeled => 5,
            Role::SolutionInit => 6,
            Role::SolutionShuffle => 7,
            Role::RieszInit => 8,
            Role::RieszShuffle => 9,
            Role::Folds => 10,
            Role::MonteCarlo => 11,
        }
    }
}

/// Generator for `(seed, role, index)`; `index` typically enumerates repeats,
/// folds or samples.
pub fn stream(seed: u64, role: Role, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((role.tag() << 48) ^ index);
    rng
}
