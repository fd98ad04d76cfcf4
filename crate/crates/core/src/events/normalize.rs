use super::{PseudoFrame, RawCounts, CH_B, CH_MASK, CH_R};
use crate::error::{GepError, Result};

pub const DEFAULT_PERCENTILE: u32 = 99;

/// Nearest-rank `n`-th percentile of `values`: the smallest value such that at
/// least `n` percent of the multiset is ≤ it. `values` must be non-empty.
pub fn nearest_rank(values: &[u32], n: u32) -> u32 {
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let len = sorted.len();
    let rank = (n as usize * len).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// Clips both count channels at the pooled `n`-th percentile and divides by
/// it. The mask channel is copied. When the percentile is zero the maximum
/// count is used instead; an all-zero window yields an all-zero frame.
pub fn normalize(counts: &RawCounts, n: u32) -> Result<PseudoFrame> {
    if n == 0 || n > 100 {
        return Err(GepError::Parameter(format!("percentile must be in 1..=100, got {n}")));
    }
    let res = counts.resolution;
    let mut frame = PseudoFrame::zeros(res, n);
    if res.pixels() == 0 {
        return Ok(frame);
    }
    let pooled: Vec<u32> = counts.m_r.iter().chain(&counts.m_b).copied().collect();
    let mut alpha = nearest_rank(&pooled, n);
    if alpha == 0 {
        alpha = pooled.iter().copied().max().unwrap_or(0);
    }
    let a = alpha as f64;
    for i in 0..res.pixels() {
        let px = &mut frame.data[i * 3..i * 3 + 3];
        if alpha > 0 {
            px[CH_R] = counts.m_r[i].min(alpha) as f64 / a;
            px[CH_B] = counts.m_b[i].min(alpha) as f64 / a;
        }
        px[CH_MASK] = counts.mask[i] as f64;
    }
    Ok(frame)
}
