//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, index)`, so any element of a
//! stream can be produced independently of the others. That is what makes
//! dropout masks identical regardless of how work is split across threads.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A keyed, random-access stream of 64-bit values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterStream {
    key: u64,
}

impl CounterStream {
    pub fn new(seed: u64) -> Self {
        Self { key: seed }
    }

    /// Independent sub-stream; different `stream` ids never share a key.
    pub fn substream(&self, stream: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(stream.wrapping_add(GOLDEN_GAMMA))),
        }
    }

    /// Element `index` of the stream. Identical to the `index + 1`-th output
    /// of a sequential SplitMix64 generator seeded with the key.
    #[inline]
    pub fn u64_at(&self, index: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    /// Uniform in [0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform_at(&self, index: u64) -> f64 {
        (self.u64_at(index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Sequential cursor over a [`CounterStream`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRng {
    stream: CounterStream,
    counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self {
            stream: CounterStream::new(seed),
            counter: 0,
        }
    }

    pub fn from_stream(stream: CounterStream) -> Self {
        Self { stream, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.stream.u64_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn next_f64(&mut self) -> f64 {
        let v = self.stream.uniform_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller (one value per call, two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Draws consumed so far.
    pub fn position(&self) -> u64 {
        self.counter
    }
}
