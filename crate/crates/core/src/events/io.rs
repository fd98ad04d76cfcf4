//! `EVT1` binary event files.
//!
//! Layout (little-endian): a 16-byte header `"EVT1"`, `u16` width, `u16`
//! height, `u64` event count; then 16-byte records `u16 x`, `u16 y`,
//! `i64 t_ns`, `i8 p`, three zero pad bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Event, Polarity, Resolution};
use crate::error::{GepError, Result};

const MAGIC: &[u8; 4] = b"EVT1";
const RECORD: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EventFile {
    pub resolution: Resolution,
    pub events: Vec<Event>,
}

pub fn write_events<W: Write>(mut w: W, resolution: Resolution, events: &[Event]) -> Result<()> {
    let (width, height) = (resolution.width, resolution.height);
    if width > u16::MAX as usize || height > u16::MAX as usize {
        return Err(GepError::Format(format!("{width}x{height} exceeds the u16 header fields")));
    }
    let mut header = [0u8; 16];
    header[..4].copy_from_slice(MAGIC);
    header[4..6].copy_from_slice(&(width as u16).to_le_bytes());
    header[6..8].copy_from_slice(&(height as u16).to_le_bytes());
    header[8..16].copy_from_slice(&(events.len() as u64).to_le_bytes());
    w.write_all(&header)?;
    for e in events {
        if e.x as usize >= width || e.y as usize >= height {
            return Err(GepError::CoordinateRange {
                x: e.x as u32,
                y: e.y as u32,
                width,
                height,
            });
        }
        let mut rec = [0u8; RECORD];
        rec[0..2].copy_from_slice(&e.x.to_le_bytes());
        rec[2..4].copy_from_slice(&e.y.to_le_bytes());
        rec[4..12].copy_from_slice(&e.t.to_le_bytes());
        rec[12] = e.p.sign() as u8;
        w.write_all(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_events<R: Read>(mut r: R) -> Result<EventFile> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| GepError::Format("truncated EVT1 header".into()))?;
    if &header[..4] != MAGIC {
        return Err(GepError::Format(format!("bad magic {:?}", &header[..4])));
    }
    let width = u16::from_le_bytes([header[4], header[5]]) as usize;
    let height = u16::from_le_bytes([header[6], header[7]]) as usize;
    let count = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let mut events = Vec::with_capacity(count.min(1 << 24) as usize);
    let mut rec = [0u8; RECORD];
    for i in 0..count {
        r.read_exact(&mut rec)
            .map_err(|_| GepError::Format(format!("truncated at record {i} of {count}")))?;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = i64::from_le_bytes(rec[4..12].try_into().expect("8 bytes"));
        let p = Polarity::from_sign(rec[12] as i8)
            .ok_or_else(|| GepError::Format(format!("record {i}: polarity byte {}", rec[12] as i8)))?;
        if x as usize >= width || y as usize >= height {
            return Err(GepError::CoordinateRange {
                x: x as u32,
                y: y as u32,
                width,
                height,
            });
        }
        events.push(Event { x, y, t, p });
    }
    Ok(EventFile {
        resolution: Resolution::new(height, width),
        events,
    })
}

pub fn write_events_file(path: &Path, resolution: Resolution, events: &[Event]) -> Result<()> {
    write_events(BufWriter::new(File::create(path)?), resolution, events)
}

pub fn read_events_file(path: &Path) -> Result<EventFile> {
    read_events(BufReader::new(File::open(path)?))
}
