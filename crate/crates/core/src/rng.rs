//! Named, independently seeded random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from the run seed,
//! a [`Stream`] tag and an index (usually the training step). Changing how
//! much randomness one consumer uses never shifts another's draws, which
//! keeps ablation arms on identical data streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Spec = 1,
    InitGenerator = 2,
    InitDiscriminator = 3,
    InitEmbedding = 4,
    Pretrain = 5,
    Data = 6,
    Targets = 7,
    Intermediates = 8,
    EvalSource = 9,
    EvalTargets = 10,
    EvalReal = 11,
    Check = 12,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream as u64)));
    rng.set_stream(index);
    rng
}
