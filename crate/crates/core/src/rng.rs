//! Keyed random substreams.
//!
//! Every random draw in a simulation comes from a stream identified by
//! `(master seed, purpose, a, b)`, typically `a` = device and `b` = round.
//! Results therefore do not depend on execution order or on how many
//! workers run in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a substream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Fading = 1,
    Noise = 2,
    Dataset = 3,
    Placement = 4,
    InitialModel = 5,
    Vote = 6,
    MonteCarlo = 7,
    Partition = 8,
    Batch = 9,
    Correlation = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Substreams {
    master: u64,
}

impl Substreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, purpose: Purpose, a: u64, b: u64) -> SimRng {
        let key = splitmix64(self.master ^ splitmix64(purpose as u64));
        let mut rng = SimRng::seed_from_u64(key);
        rng.set_stream(splitmix64(splitmix64(a) ^ b.rotate_left(29)));
        rng
    }
}
