//! Picosecond event streams.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Timing resolution of the counting card, in picoseconds.
pub const TICK_PS: u64 = 4;

pub const PS_PER_S: f64 = 1e12;

/// Rounds a non-negative time to the nearest card tick.
pub fn quantize(t_ps: f64) -> u64 {
    let t = t_ps.max(0.0);
    ((t / TICK_PS as f64).round() as u64) * TICK_PS
}

pub fn seconds_to_ps(s: f64) -> u64 {
    (s * PS_PER_S).round() as u64
}

/// Ordered event times in integer picoseconds on one channel.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampStream {
    pub channel: String,
    times: Vec<u64>,
}

impl TimestampStream {
    /// Builds a stream, rejecting times that are not in ascending order.
    pub fn new(channel: impl Into<String>, times: Vec<u64>) -> Result<Self> {
        if let Some(w) = times.windows(2).position(|w| w[1] < w[0]) {
            return domain(format!("timestamps not sorted at index {}", w + 1));
        }
        Ok(TimestampStream {
            channel: channel.into(),
            times,
        })
    }

    pub(crate) fn from_sorted(channel: impl Into<String>, times: Vec<u64>) -> Self {
        debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
        TimestampStream {
            channel: channel.into(),
            times,
        }
    }

    pub fn empty(channel: impl Into<String>) -> Self {
        Self::from_sorted(channel, Vec::new())
    }

    pub fn times(&self) -> &[u64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn into_times(self) -> Vec<u64> {
        self.times
    }

    /// Sorted union of two streams; the result takes `self`'s channel label.
    pub fn merge(&self, other: &TimestampStream) -> TimestampStream {
        TimestampStream::from_sorted(
            self.channel.clone(),
            merge_sorted(&self.times, &other.times),
        )
    }

    /// Little-endian u64 records, one per event.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        for t in &self.times {
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(channel: impl Into<String>, mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() % 8 != 0 {
            return domain(format!(
                "binary stream length {} is not a multiple of 8",
                buf.len()
            ));
        }
        let times = buf
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Self::new(channel, times)
    }

    /// CSV with a single `time_ps` column.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time_ps"])?;
        for t in &self.times {
            out.write_record([t.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn merge_sorted(a: &[u64], b: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}
