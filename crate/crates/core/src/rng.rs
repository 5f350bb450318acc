//! Portable pseudo-random streams.
//!
//! Every random draw in the library goes through [`Rng`], a xoshiro256**
//! generator whose 256-bit state is filled by four consecutive splitmix64
//! outputs of the seed. The derived draws are fixed so any implementation
//! can reproduce them:
//!
//! - `uniform()`   = `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! - `below(n)`    = `floor(uniform() * n)`
//! - `normal()`    = Box-Muller cosine branch on two uniforms `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2π u2)`
//! - `shuffle(v)`  = Fisher-Yates from the back, `j = below(i + 1)`
//!
//! Independent streams for one run come from [`derive_seed`].

use serde::{Deserialize, Serialize};

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// One step of splitmix64; advances `state` and returns the mixed output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Named sub-streams split off a single root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Mask,
    Init,
    Train,
    Synth,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Mask => 0x6d61_736b,  // "mask"
            Stream::Init => 0x696e_6974,  // "init"
            Stream::Train => 0x7472_6e00, // "trn"
            Stream::Synth => 0x7379_6e74, // "synt"
        }
    }
}

/// Seed for `stream`: the first splitmix64 output of `root ^ tag`.
pub fn derive_seed(root: u64, stream: Stream) -> u64 {
    let mut s = root ^ stream.tag();
    splitmix64(&mut s)
}

/// xoshiro256** generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    pub fn from_state(s: [u64; 4]) -> Self {
        Rng { s }
    }

    pub fn state(&self) -> [u64; 4] {
        self.s
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let k = (self.uniform() * n as f64) as usize;
        k.min(n - 1)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
    }
}
