//! Deterministic random-number streams for reproducible studies.
//!
//! Each replication owns an independent substream: the study seed and the
//! replication index are mixed into a fresh generator state, so results are
//! identical for any worker count and any evaluation order.
//!
//! The uniform generator is xoshiro256++ (4×64-bit state) seeded through a
//! splitmix64 cascade; normals come from the Marsaglia polar method. Both
//! use only integer and double arithmetic with a fixed consumption order, so
//! streams reproduce bit-for-bit across platforms.

/// Weyl-sequence increment used by splitmix64 (the golden-ratio constant).
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The 64-bit splitmix generator: a Weyl sequence fed through a two-round
/// multiply-xorshift finalizer. Used for seeding and seed mixing.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    /// Start a stream at the given seed.
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next 64 uniform bits.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Derive the seed of replication `replication`'s private stream.
///
/// One Weyl step per index keeps distinct indices on well-separated splitmix
/// trajectories; the xoshiro seeding cascade then decorrelates the states.
pub fn substream_seed(seed: u64, replication: u64) -> u64 {
    seed.wrapping_add(replication.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA))
}

/// The xoshiro256++ uniform generator.
#[derive(Debug, Clone)]
pub struct Xoshiro256PlusPlus {
    s: [u64; 4],
}

impl Xoshiro256PlusPlus {
    /// Seed the 256-bit state with four consecutive splitmix64 outputs.
    pub fn from_seed(seed: u64) -> Self {
        let mut mixer = SplitMix64::new(seed);
        Self {
            s: [mixer.next_u64(), mixer.next_u64(), mixer.next_u64(), mixer.next_u64()],
        }
    }

    /// Raw state constructor (test vectors only).
    #[cfg(test)]
    fn from_state(s: [u64; 4]) -> Self {
        Self { s }
    }

    /// Next 64 uniform bits.
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform double in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Standard-normal stream over a xoshiro256++ source.
///
/// Uses the Marsaglia polar method. Consumption order per accepted pair: the
/// candidate `a` is drawn before `b`, each as one `next_f64` call mapped to
/// `(−1, 1)`; rejected pairs consume their two draws and are discarded; an
/// accepted pair yields `a·f` first and caches `b·f` as the spare returned
/// by the following call.
#[derive(Debug, Clone)]
pub struct NormalSource {
    rng: Xoshiro256PlusPlus,
    spare: Option<f64>,
}

impl NormalSource {
    /// Seed a fresh stream.
    pub fn from_seed(seed: u64) -> Self {
        Self { rng: Xoshiro256PlusPlus::from_seed(seed), spare: None }
    }

    /// Uniform double in `[0, 1)` (shares the underlying stream).
    pub fn next_uniform(&mut self) -> f64 {
        self.rng.next_f64()
    }

    /// Next standard-normal draw.
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let a = 2.0 * self.rng.next_f64() - 1.0;
            let b = 2.0 * self.rng.next_f64() - 1.0;
            let s = a * a + b * b;
            if s >= 1.0 || s == 0.0 {
                continue;
            }
            let f = (-2.0 * s.ln() / s).sqrt();
            self.spare = Some(b * f);
            return a * f;
        }
    }
}
