//! Event records, CSV / `EVG1` binary I/O and slicing into the bin/frame grid.
//!
//! `EVG1` layout (little-endian): 4-byte magic, `u16` width, `u16` height,
//! then 16-byte records `{u64 t_us, u16 x, u16 y, i8 p, 3 zero bytes}`.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVG1";
pub const HEADER_LEN: usize = 8;
pub const RECORD_LEN: usize = 16;
pub const CSV_HEADER: &str = "t_us,x,y,p";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub width: u16,
    pub height: u16,
}

impl Geometry {
    pub fn new(width: u16, height: u16) -> Self {
        Geometry { width, height }
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, x: u64, y: u64) -> bool {
        x < self.width as u64 && y < self.height as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// LNES channel: 0 for positive, 1 for negative.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: Polarity) -> Self {
        Event { t, x, y, p }
    }
}

/// A time-ordered stream of events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    geometry: Geometry,
    events: Vec<Event>,
}

impl EventStream {
    /// Validates bounds and ordering.
    pub fn new(geometry: Geometry, events: Vec<Event>) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if !geometry.contains(e.x as u64, e.y as u64) {
                return Err(out_of_bounds(geometry, e.x as u64, e.y as u64));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::NonMonotonic(format!("event {i}")));
            }
        }
        Ok(EventStream { geometry, events })
    }

    pub fn empty(geometry: Geometry) -> Self {
        EventStream {
            geometry,
            events: Vec::new(),
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn first_t(&self) -> Option<u64> {
        self.events.first().map(|e| e.t)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.events.last().map(|e| e.t)
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

fn out_of_bounds(g: Geometry, x: u64, y: u64) -> Error {
    Error::OutOfBounds {
        x,
        y,
        width: g.width,
        height: g.height,
    }
}

/// Reads `t_us,x,y,p` CSV. Polarity `0` is accepted as negative.
pub fn read_csv<R: BufRead>(reader: R, geometry: Geometry) -> Result<EventStream> {
    let mut lines = reader.lines();
    match lines.next() {
        Some(header) => {
            let header = header?;
            if header.trim() != CSV_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{CSV_HEADER}`, got `{}`", header.trim()),
                });
            }
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "missing header".into(),
            })
        }
    }

    let mut events = Vec::new();
    let mut last_t = 0u64;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", fields.len())));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp `{}`", fields[0])))?;
        let x: u64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad x `{}`", fields[1])))?;
        let y: u64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad y `{}`", fields[2])))?;
        let p = match fields[3] {
            "1" | "+1" => Polarity::Positive,
            "-1" | "0" => Polarity::Negative,
            other => return Err(parse_err(format!("bad polarity `{other}`"))),
        };
        if !geometry.contains(x, y) {
            return Err(out_of_bounds(geometry, x, y));
        }
        if !events.is_empty() && t < last_t {
            return Err(Error::NonMonotonic(format!("line {line_no}")));
        }
        last_t = t;
        events.push(Event::new(t, x as u16, y as u16, p));
    }
    Ok(EventStream { geometry, events })
}

pub fn write_csv<W: Write>(stream: &EventStream, mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for e in &stream.events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p.sign())?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&stream.geometry.width.to_le_bytes());
    out.extend_from_slice(&stream.geometry.height.to_le_bytes());
    for e in &stream.events {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.sign() as u8);
        out.extend_from_slice(&[0, 0, 0]);
    }
    out
}

pub fn write_binary<W: Write>(stream: &EventStream, mut w: W) -> Result<()> {
    w.write_all(&to_binary(stream))?;
    w.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<EventStream> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_binary(&buf)
}

pub fn from_binary(buf: &[u8]) -> Result<EventStream> {
    if buf.len() < MAGIC.len() || &buf[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if buf.len() < HEADER_LEN {
        return Err(Error::Truncated);
    }
    let width = u16::from_le_bytes([buf[4], buf[5]]);
    let height = u16::from_le_bytes([buf[6], buf[7]]);
    let geometry = Geometry::new(width, height);
    let body = &buf[HEADER_LEN..];
    if !body.len().is_multiple_of(RECORD_LEN) {
        return Err(Error::Truncated);
    }

    let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, rec) in body.chunks_exact(RECORD_LEN).enumerate() {
        let t = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes([rec[8], rec[9]]);
        let y = u16::from_le_bytes([rec[10], rec[11]]);
        let p = match rec[12] as i8 {
            1 => Polarity::Positive,
            -1 => Polarity::Negative,
            v => return Err(Error::Format(format!("record {i}: polarity {v}"))),
        };
        if rec[13..16] != [0, 0, 0] {
            return Err(Error::Format(format!("record {i}: non-zero padding")));
        }
        if !geometry.contains(x as u64, y as u64) {
            return Err(out_of_bounds(geometry, x as u64, y as u64));
        }
        if let Some(prev) = events.last() {
            let prev: &Event = prev;
            if prev.t > t {
                return Err(Error::NonMonotonic(format!("record {i}")));
            }
        }
        events.push(Event::new(t, x, y, p));
    }
    Ok(EventStream { geometry, events })
}

/// Bin length and frames-per-bin. Frame boundaries inside a bin sit at
/// `floor(k * bin_len / frames_per_bin)`, so the bin stays exact even when
/// it does not divide evenly into frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    pub bin_len: u64,
    pub frames_per_bin: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        WindowParams {
            bin_len: 200_000,
            frames_per_bin: 6,
        }
    }
}

impl WindowParams {
    pub fn new(bin_len: u64, frames_per_bin: usize) -> Result<Self> {
        if bin_len == 0 || frames_per_bin == 0 {
            return Err(Error::config("bin_len and frames_per_bin must be positive"));
        }
        if frames_per_bin as u64 > bin_len {
            return Err(Error::config("more frames than microseconds in a bin"));
        }
        Ok(WindowParams {
            bin_len,
            frames_per_bin,
        })
    }

    /// Requires `bin_len` to be a multiple of `frame_len`.
    pub fn from_frame_len(bin_len: u64, frame_len: u64) -> Result<Self> {
        if frame_len == 0 || !bin_len.is_multiple_of(frame_len) {
            return Err(Error::config(format!(
                "bin_len {bin_len} is not divisible by frame_len {frame_len}"
            )));
        }
        Self::new(bin_len, (bin_len / frame_len) as usize)
    }

    pub fn nominal_frame_len(&self) -> f64 {
        self.bin_len as f64 / self.frames_per_bin as f64
    }
}

/// Rectangular grid of `bins` coarse bins, each split into
/// `params.frames_per_bin` frames, starting at `t0`. Intervals are half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub t0: u64,
    pub params: WindowParams,
    pub bins: usize,
}

impl WindowGrid {
    pub fn new(t0: u64, params: WindowParams, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::config("grid needs at least one bin"));
        }
        Ok(WindowGrid { t0, params, bins })
    }

    pub fn frames_per_bin(&self) -> usize {
        self.params.frames_per_bin
    }

    pub fn frame_count(&self) -> usize {
        self.bins * self.params.frames_per_bin
    }

    pub fn end(&self) -> u64 {
        self.t0 + self.bins as u64 * self.params.bin_len
    }

    /// `[start, end)` of a global frame index (bin-major).
    pub fn frame_bounds(&self, frame: usize) -> (u64, u64) {
        let bn = self.params.frames_per_bin;
        (self.frame_start(frame / bn, frame % bn), {
            let next = frame + 1;
            self.frame_start(next / bn, next % bn)
        })
    }

    fn frame_start(&self, bin: usize, sub: usize) -> u64 {
        let l = self.params.bin_len;
        self.t0 + bin as u64 * l + sub as u64 * l / self.params.frames_per_bin as u64
    }

    /// Global frame index of a timestamp, or `None` outside the grid.
    pub fn frame_index(&self, t: u64) -> Option<usize> {
        if t < self.t0 || t >= self.end() {
            return None;
        }
        let l = self.params.bin_len;
        let bn = self.params.frames_per_bin as u64;
        let off = t - self.t0;
        let bin = off / l;
        let rem = off - bin * l;
        let sub = ((rem + 1) * bn - 1) / l;
        Some((bin * bn + sub) as usize)
    }
}

/// Per-frame views into a stream, laid out bin-major.
#[derive(Debug, Clone)]
pub struct FrameSlices<'a> {
    pub grid: WindowGrid,
    pub geometry: Geometry,
    pub frames: Vec<&'a [Event]>,
}

impl FrameSlices<'_> {
    pub fn frame(&self, bin: usize, sub: usize) -> &[Event] {
        self.frames[bin * self.grid.frames_per_bin() + sub]
    }
}

/// Slices a stream on a grid anchored at its first event, with enough bins
/// to cover the last event.
pub fn slice_windows(stream: &EventStream, params: WindowParams) -> Result<FrameSlices<'_>> {
    let (first, last) = match (stream.first_t(), stream.last_t()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyStream),
    };
    let bins = ((last - first) / params.bin_len) as usize + 1;
    let grid = WindowGrid::new(first, params, bins)?;
    Ok(slice_with_grid(stream, grid))
}

/// Slices a stream on an explicit grid. Events outside the grid are dropped.
pub fn slice_with_grid(stream: &EventStream, grid: WindowGrid) -> FrameSlices<'_> {
    let events = stream.events();
    let mut frames = Vec::with_capacity(grid.frame_count());
    for f in 0..grid.frame_count() {
        let (start, end) = grid.frame_bounds(f);
        let lo = events.partition_point(|e| e.t < start);
        let hi = events.partition_point(|e| e.t < end);
        frames.push(&events[lo..hi]);
    }
    FrameSlices {
        grid,
        geometry: stream.geometry(),
        frames,
    }
}
