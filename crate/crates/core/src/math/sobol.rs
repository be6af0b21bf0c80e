//! Sobol low-discrepancy sequence with Joe-Kuo direction numbers.
//!
//! Points are generated in Gray-code order with 32-bit direction integers, so
//! the first `2^32 - 1` indices are available. Index 0 is the origin; a
//! [`SobolSequence`] starts after it unless asked otherwise.

use super::sobol_table::{DIRECTION_TABLE, MAX_DIMENSION};
use crate::{Error, Result};

pub const MAX_SOBOL_DIMENSION: usize = MAX_DIMENSION;

const BITS: usize = 32;
const SCALE: f64 = 1.0 / 4_294_967_296.0;

fn direction_numbers(dim_index: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim_index == 0 {
        for (k, v) in v.iter_mut().enumerate() {
            *v = 1 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = DIRECTION_TABLE[dim_index - 1];
    let s = s as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        v[k] = v[k - s] ^ (v[k - s] >> s);
        for j in 1..s {
            if (a >> (s - 1 - j)) & 1 == 1 {
                v[k] ^= v[k - j];
            }
        }
    }
    v
}

/// Stateful Sobol generator over `[0, 1)^dimension`.
#[derive(Debug, Clone)]
pub struct SobolSequence {
    dimension: usize,
    next_index: u64,
    directions: Vec<[u32; BITS]>,
    state: Vec<u32>,
}

impl SobolSequence {
    /// A sequence positioned after the all-zeros point.
    pub fn new(dimension: usize) -> Result<Self> {
        Self::with_skip(dimension, 1)
    }

    /// A sequence whose first emitted point is the one at index `skip`.
    pub fn with_skip(dimension: usize, skip: u64) -> Result<Self> {
        if dimension == 0 || dimension > MAX_DIMENSION {
            return Err(Error::UnsupportedDimension {
                requested: dimension,
                max: MAX_DIMENSION,
            });
        }
        if skip >= 1 << BITS {
            return Err(Error::Validation(format!("sobol index {skip} out of range")));
        }
        let directions: Vec<_> = (0..dimension).map(direction_numbers).collect();
        let gray = skip ^ (skip >> 1);
        let state = directions
            .iter()
            .map(|v| {
                (0..BITS)
                    .filter(|b| (gray >> b) & 1 == 1)
                    .fold(0u32, |acc, b| acc ^ v[b])
            })
            .collect();
        Ok(Self {
            dimension,
            next_index: skip,
            directions,
            state,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of indices consumed so far, including any skipped prefix.
    pub fn next_index(&self) -> u64 {
        self.next_index
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        assert!(self.next_index < 1 << BITS, "sobol sequence exhausted");
        let point = self.state.iter().map(|&x| x as f64 * SCALE).collect();
        // Gray-code step: flip the direction number of the lowest zero bit.
        let c = self.next_index.trailing_ones() as usize;
        if c < BITS {
            for (x, v) in self.state.iter_mut().zip(&self.directions) {
                *x ^= v[c];
            }
        }
        self.next_index += 1;
        point
    }
}

impl Iterator for SobolSequence {
    type Item = Vec<f64>;

    fn next(&mut self) -> Option<Vec<f64>> {
        (self.next_index < 1 << BITS).then(|| self.next_point())
    }
}

/// `count` consecutive points starting at sequence index `skip`.
pub fn sobol_points(dimension: usize, count: usize, skip: u64) -> Result<Vec<Vec<f64>>> {
    let seq = SobolSequence::with_skip(dimension, skip)?;
    Ok(seq.take(count).collect())
}
