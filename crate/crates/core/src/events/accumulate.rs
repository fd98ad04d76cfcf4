use super::{Event, Polarity, RawCounts, Resolution, TimeWindow};
use crate::error::{GepError, Result};
use crate::par::{self, Exec};

fn check_coords(events: &[Event], res: Resolution) -> Result<()> {
    match events
        .iter()
        .find(|e| e.x as usize >= res.width || e.y as usize >= res.height)
    {
        Some(e) => Err(GepError::CoordinateRange {
            x: e.x as u32,
            y: e.y as u32,
            width: res.width,
            height: res.height,
        }),
        None => Ok(()),
    }
}

/// Counts the events of `window` per pixel and polarity. Events outside the
/// half-open window are ignored; every event must lie on the sensor.
pub fn accumulate(events: &[Event], window: TimeWindow, res: Resolution) -> Result<RawCounts> {
    check_coords(events, res)?;
    let mut counts = RawCounts::empty(res, window);
    for e in events.iter().filter(|e| window.contains(e.t)) {
        let i = e.y as usize * res.width + e.x as usize;
        match e.p {
            Polarity::Positive => counts.m_r[i] += 1,
            Polarity::Negative => counts.m_b[i] += 1,
        }
        counts.mask[i] = 1;
    }
    Ok(counts)
}

/// One accumulation per window.
pub fn accumulate_windows(
    events: &[Event],
    windows: &[TimeWindow],
    res: Resolution,
) -> Result<Vec<RawCounts>> {
    accumulate_windows_with(Exec::default(), events, windows, res)
}

pub fn accumulate_windows_with(
    exec: Exec,
    events: &[Event],
    windows: &[TimeWindow],
    res: Resolution,
) -> Result<Vec<RawCounts>> {
    check_coords(events, res)?;
    // Events are sorted by time, so each window maps to a contiguous run.
    let sorted = events.windows(2).all(|w| w[0].t <= w[1].t);
    par::try_map_range(exec, windows.len(), |i| {
        let w = windows[i];
        let slice = if sorted {
            let lo = events.partition_point(|e| e.t < w.start);
            let hi = events.partition_point(|e| e.t < w.end());
            &events[lo..hi]
        } else {
            events
        };
        accumulate(slice, w, res)
    })
}

/// Splits `window` into `bins` equal sub-windows and accumulates each.
pub fn accumulate_bins(
    events: &[Event],
    window: TimeWindow,
    res: Resolution,
    bins: usize,
) -> Result<Vec<RawCounts>> {
    accumulate_windows(events, &window.split(bins)?, res)
}
