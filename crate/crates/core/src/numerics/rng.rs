//! Named, seedable, counter-based random generator.
//!
//! Every draw is a pure function of (seed, stream name, counter), so
//! independent streams can be carved out of one run seed without any
//! ordering coupling between them.

use super::Real;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Counter-based generator: `value(i) = mix(key, i)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: &str) -> Self {
        CounterRng {
            key: splitmix64(seed ^ fnv1a(stream.as_bytes())),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> Real {
        // 53 mantissa bits; exact in both element modes.
        (self.next_u64() >> 11) as Real / (1u64 << 53) as Real
    }

    /// Standard normal via Box-Muller. The second value of each pair is
    /// discarded to keep the draw a pure function of the counter.
    pub fn normal(&mut self) -> Real {
        let u1 = (((self.next_u64() >> 11) + 1) as f64) / ((1u64 << 53) as f64 + 1.0);
        let u2 = ((self.next_u64() >> 11) as f64) / (1u64 << 53) as f64;
        let r = (-2.0 * u1.ln()).sqrt();
        (r * (2.0 * std::f64::consts::PI * u2).cos()) as Real
    }

    /// Uniform integer in [0, n) via widening multiply.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn choice<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len() as u64) as usize]
    }
}
