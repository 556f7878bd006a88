//! SplitMix64 streams.
//!
//! Every random draw in the crate goes through [`RngStream`], so results are
//! reproducible bit-for-bit on any platform and in any language that
//! implements the same recurrence. Independent streams for parallel work come
//! from [`derive_stream`] rather than from sharing one generator.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A single-owner SplitMix64 generator tagged with the stream it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    state: u64,
    stream_id: u64,
}

/// Build the generator for `(seed, stream_id)`. Pure; no global state.
pub fn derive_stream(seed: u64, stream_id: u64) -> RngStream {
    // Two rounds of mixing so that neighbouring seeds and neighbouring stream
    // ids land far apart in state space.
    let state = mix64(seed ^ mix64(stream_id.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)));
    RngStream { state, stream_id }
}

impl RngStream {
    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer on `0..n` (multiply-shift reduction). `n` must be > 0.
    #[inline]
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; consumes exactly two uniforms.
    pub fn next_normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn first(seed: u64, stream: u64, n: usize) -> Vec<u64> {
        let mut r = derive_stream(seed, stream);
        (0..n).map(|_| r.next_u64()).collect()
    }

    #[test]
    fn same_seed_and_stream_repeat() {
        assert_eq!(first(42, 0, 100), first(42, 0, 100));
    }

    #[test]
    fn distinct_streams_differ() {
        let a = first(42, 0, 100);
        let b = first(42, 1, 100);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn frozen_sequence_for_portability() {
        // Pinned values, cross-checked against a Python rendition of the
        // same recurrence. Changing them breaks every stored curve.
        let got = first(42, 7, 3);
        assert_eq!(got, FROZEN_42_7.to_vec());
    }

    const FROZEN_42_7: [u64; 3] = [
        11_502_557_710_909_691_973,
        5_569_470_733_391_058_500,
        430_789_934_669_839_741,
    ];

    #[test]
    fn splitmix_reference_vector() {
        // Reference SplitMix64 output for initial state 0 (Vigna's
        // splitmix64.c): first output is 0xE220A8397B1DCDAF.
        let mut r = RngStream {
            state: 0,
            stream_id: 0,
        };
        assert_eq!(r.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(r.next_u64(), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn uniform_range_and_mean() {
        let mut r = derive_stream(1, 2);
        let n = 100_000;
        let mut s = 0.0;
        for _ in 0..n {
            let u = r.next_f64();
            assert!((0.0..1.0).contains(&u));
            s += u;
        }
        assert!((s / n as f64 - 0.5).abs() < 0.005);
    }

    #[test]
    fn normal_moments() {
        let mut r = derive_stream(3, 4);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.next_normal()).collect();
        let m = xs.iter().sum::<f64>() / n as f64;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((v - 1.0).abs() < 0.02, "var {v}");
    }

    #[test]
    fn next_below_in_range() {
        let mut r = derive_stream(9, 9);
        let mut seen = [0usize; 7];
        for _ in 0..7000 {
            seen[r.next_below(7)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 800));
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut v: Vec<usize> = (0..50).collect();
        derive_stream(5, 0).shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
