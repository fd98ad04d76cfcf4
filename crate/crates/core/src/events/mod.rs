//! Event streams and their accumulation into normalized pseudo-frames.

mod accumulate;
mod augment;
mod io;
mod normalize;

pub use accumulate::{accumulate, accumulate_bins, accumulate_windows, accumulate_windows_with};
pub use augment::{augment, AugPolicy, AugSpec, Crop};
pub use io::{read_events, read_events_file, write_events, write_events_file, EventFile};
pub use normalize::{nearest_rank, normalize, DEFAULT_PERCENTILE};

use crate::error::{GepError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_sign(p: i8) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }
}

/// One brightness change at pixel `(x, y)` and time `t` (nanoseconds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: i64,
    pub p: Polarity,
}

impl Event {
    pub fn new(x: u16, y: u16, t: i64, p: Polarity) -> Self {
        Self { x, y, t, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// Half-open interval `[start, start + duration)` in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    pub start: i64,
    pub duration: i64,
}

impl TimeWindow {
    pub fn new(start: i64, duration: i64) -> Result<Self> {
        if duration <= 0 {
            return Err(GepError::Parameter(format!(
                "window duration must be positive, got {duration}"
            )));
        }
        Ok(Self { start, duration })
    }

    pub fn end(&self) -> i64 {
        self.start + self.duration
    }

    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end()
    }

    /// Splits into `n` adjacent sub-windows; the last one absorbs the remainder.
    pub fn split(&self, n: usize) -> Result<Vec<TimeWindow>> {
        if n == 0 || n as i64 > self.duration {
            return Err(GepError::Parameter(format!(
                "cannot split a {} ns window into {n} bins",
                self.duration
            )));
        }
        let step = self.duration / n as i64;
        Ok((0..n)
            .map(|i| {
                let start = self.start + i as i64 * step;
                let end = if i + 1 == n { self.end() } else { start + step };
                TimeWindow {
                    start,
                    duration: end - start,
                }
            })
            .collect())
    }
}

/// Per-pixel polarity counts and activity mask of one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCounts {
    pub resolution: Resolution,
    pub window: TimeWindow,
    /// Positive-polarity counts, row-major.
    pub m_r: Vec<u32>,
    /// Negative-polarity counts, row-major.
    pub m_b: Vec<u32>,
    pub mask: Vec<u8>,
}

impl RawCounts {
    pub fn empty(resolution: Resolution, window: TimeWindow) -> Self {
        let n = resolution.pixels();
        Self {
            resolution,
            window,
            m_r: vec![0; n],
            m_b: vec![0; n],
            mask: vec![0; n],
        }
    }

    /// Sums the counts of an adjacent window; the result spans both.
    pub fn merge(&self, other: &RawCounts) -> Result<RawCounts> {
        if self.resolution != other.resolution {
            return Err(GepError::Shape("merging counts of different resolutions".into()));
        }
        let (a, b) = if self.window.start <= other.window.start {
            (self.window, other.window)
        } else {
            (other.window, self.window)
        };
        if a.end() != b.start {
            return Err(GepError::Range("merged windows must be adjacent".into()));
        }
        let m_r: Vec<u32> = self.m_r.iter().zip(&other.m_r).map(|(x, y)| x + y).collect();
        let m_b: Vec<u32> = self.m_b.iter().zip(&other.m_b).map(|(x, y)| x + y).collect();
        let mask = m_r.iter().zip(&m_b).map(|(r, b)| (r + b > 0) as u8).collect();
        Ok(RawCounts {
            resolution: self.resolution,
            window: TimeWindow {
                start: a.start,
                duration: b.end() - a.start,
            },
            m_r,
            m_b,
            mask,
        })
    }
}

/// Channel order of a [`PseudoFrame`].
pub const CH_R: usize = 0;
pub const CH_MASK: usize = 1;
pub const CH_B: usize = 2;

/// Normalized `H×W×3` accumulation with channels `(r, mask, b)`, stored
/// height-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoFrame {
    pub resolution: Resolution,
    pub data: Vec<f64>,
    pub percentile: u32,
}

impl PseudoFrame {
    pub fn zeros(resolution: Resolution, percentile: u32) -> Self {
        Self {
            resolution,
            data: vec![0.0; resolution.pixels() * 3],
            percentile,
        }
    }

    pub fn height(&self) -> usize {
        self.resolution.height
    }

    pub fn width(&self) -> usize {
        self.resolution.width
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.resolution.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let w = self.resolution.width;
        self.data[(y * w + x) * 3 + c] = v;
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}
