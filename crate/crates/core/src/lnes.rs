//! Locally normalized event surfaces.
//!
//! Each frame becomes a 2-channel image (positive, negative polarity) whose
//! cells hold the normalized timestamp of the most recent event at that
//! pixel: `(t_latest - frame_start + 1) / frame_len`, or 0 when the pixel saw
//! no event of that polarity.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, FrameSlices, Geometry, WindowGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct LnesSurface {
    geometry: Geometry,
    data: Vec<f32>,
}

impl LnesSurface {
    pub fn zeros(geometry: Geometry) -> Self {
        LnesSurface {
            geometry,
            data: vec![0.0; 2 * geometry.pixels()],
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    /// Planar `[channel][row][col]` values.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        let w = self.geometry.width as usize;
        let h = self.geometry.height as usize;
        self.data[channel * h * w + y * w + x]
    }
}

pub fn build_lnes(
    events: &[Event],
    frame_start: u64,
    frame_len: u64,
    geometry: Geometry,
) -> Result<LnesSurface> {
    let mut surface = LnesSurface::zeros(geometry);
    fill_lnes(&mut surface.data, events, frame_start, frame_len, geometry)?;
    Ok(surface)
}

fn fill_lnes(
    out: &mut [f32],
    events: &[Event],
    frame_start: u64,
    frame_len: u64,
    geometry: Geometry,
) -> Result<()> {
    if frame_len == 0 {
        return Err(Error::config("frame_len must be positive"));
    }
    let w = geometry.width as usize;
    let plane = geometry.pixels();
    let frame_end = frame_start + frame_len;
    for e in events {
        if e.t < frame_start || e.t >= frame_end {
            return Err(Error::Format(format!(
                "event at t={} outside frame [{frame_start}, {frame_end})",
                e.t
            )));
        }
        if !geometry.contains(e.x as u64, e.y as u64) {
            return Err(Error::OutOfBounds {
                x: e.x as u64,
                y: e.y as u64,
                width: geometry.width,
                height: geometry.height,
            });
        }
        let v = ((e.t - frame_start + 1) as f64 / frame_len as f64) as f32;
        let cell = &mut out[e.p.channel() * plane + e.y as usize * w + e.x as usize];
        if v > *cell {
            *cell = v;
        }
    }
    Ok(())
}

/// Stacked surfaces, shape `[T, Bn, 2, H, W]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LnesVolume {
    pub bins: usize,
    pub frames_per_bin: usize,
    pub geometry: Geometry,
    data: Vec<f32>,
}

impl LnesVolume {
    pub fn new(bins: usize, frames_per_bin: usize, geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        let expected = bins * frames_per_bin * 2 * geometry.pixels();
        if data.len() != expected {
            return Err(Error::shape(format!(
                "volume payload has {} values, expected {expected}",
                data.len()
            )));
        }
        Ok(LnesVolume {
            bins,
            frames_per_bin,
            geometry,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 5] {
        [
            self.bins,
            self.frames_per_bin,
            2,
            self.geometry.height as usize,
            self.geometry.width as usize,
        ]
    }

    pub fn frame_count(&self) -> usize {
        self.bins * self.frames_per_bin
    }

    pub fn frame_len(&self) -> usize {
        2 * self.geometry.pixels()
    }

    /// Planar surface of global frame `index` (bin-major).
    pub fn frame(&self, index: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[index * n..(index + 1) * n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

pub fn stack_lnes(grid: &WindowGrid, geometry: Geometry, slices: &[&[Event]]) -> Result<LnesVolume> {
    if slices.len() != grid.frame_count() {
        return Err(Error::shape(format!(
            "{} slices for a {}x{} grid",
            slices.len(),
            grid.bins,
            grid.frames_per_bin()
        )));
    }
    let n = 2 * geometry.pixels();
    let mut data = vec![0.0f32; n * slices.len()];
    for (i, (frame, out)) in slices.iter().zip(data.chunks_exact_mut(n)).enumerate() {
        let (start, end) = grid.frame_bounds(i);
        fill_lnes(out, frame, start, end - start, geometry)?;
    }
    LnesVolume::new(grid.bins, grid.frames_per_bin(), geometry, data)
}

pub fn volume_from_slices(slices: &FrameSlices<'_>) -> Result<LnesVolume> {
    stack_lnes(&slices.grid, slices.geometry, &slices.frames)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub frame_len: f64,
    pub bin_len: u64,
}

/// One JSON header line, then the little-endian `f32` payload.
pub fn write_volume<W: Write>(volume: &LnesVolume, bin_len: u64, mut w: W) -> Result<()> {
    let header = VolumeHeader {
        shape: volume.shape().to_vec(),
        dtype: "f32le".into(),
        frame_len: bin_len as f64 / volume.frames_per_bin as f64,
        bin_len,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn read_volume<R: BufRead>(mut r: R) -> Result<(VolumeHeader, LnesVolume)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: VolumeHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let [bins, bn, c, h, w] = header.shape[..] else {
        return Err(Error::Format("volume shape must have rank 5".into()));
    };
    if c != 2 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Format(format!("bad volume shape {:?}", header.shape)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Truncated);
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let volume = LnesVolume::new(bins, bn, Geometry::new(w as u16, h as u16), data)?;
    Ok((header, volume))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::{slice_windows, EventStream, Polarity, WindowParams};
    use proptest::prelude::*;

    fn geo() -> Geometry {
        Geometry::new(8, 8)
    }

    #[test]
    fn empty_slice_is_zero() {
        let s = build_lnes(&[], 0, 100, geo()).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn midpoint_event() {
        let fl = 33_333;
        let e = Event::new(fl / 2 - 1, 1, 2, Polarity::Positive);
        let s = build_lnes(&[e], 0, fl, geo()).unwrap();
        assert!((s.get(0, 2, 1) - 0.5).abs() < 1e-4);
        let nonzero = s.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn later_event_wins() {
        let evs = [
            Event::new(10_000, 3, 3, Polarity::Positive),
            Event::new(20_000, 3, 3, Polarity::Positive),
        ];
        let s = build_lnes(&evs, 0, 33_333, geo()).unwrap();
        assert_eq!(s.get(0, 3, 3), (20_001.0f64 / 33_333.0) as f32);
        let rev = [evs[1], evs[0]];
        assert_eq!(build_lnes(&rev, 0, 33_333, geo()).unwrap(), s);
    }

    #[test]
    fn event_at_frame_start_is_not_zero() {
        let s = build_lnes(&[Event::new(500, 0, 0, Polarity::Negative)], 500, 1000, geo()).unwrap();
        assert!(s.get(1, 0, 0) > 0.0);
        assert_eq!(s.get(0, 0, 0), 0.0);
    }

    #[test]
    fn out_of_frame_event_errors() {
        let e = Event::new(1000, 0, 0, Polarity::Positive);
        assert!(build_lnes(&[e], 0, 1000, geo()).is_err());
        assert!(build_lnes(&[e], 1001, 1000, geo()).is_err());
    }

    #[test]
    fn stack_shape_and_errors() {
        let s = EventStream::new(
            geo(),
            vec![
                Event::new(0, 0, 0, Polarity::Positive),
                Event::new(399_999, 1, 1, Polarity::Negative),
            ],
        )
        .unwrap();
        let sl = slice_windows(&s, WindowParams::default()).unwrap();
        let vol = volume_from_slices(&sl).unwrap();
        assert_eq!(vol.shape(), [2, 6, 2, 8, 8]);
        assert!(stack_lnes(&sl.grid, geo(), &sl.frames[..11]).is_err());

        let one = WindowGrid::new(0, WindowParams::new(1000, 1).unwrap(), 1).unwrap();
        let vol = stack_lnes(&one, geo(), &[&[]]).unwrap();
        assert_eq!(vol.shape(), [1, 1, 2, 8, 8]);
        assert!(vol.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn volume_file_round_trip() {
        let s = EventStream::new(geo(), vec![Event::new(10, 2, 3, Polarity::Positive)]).unwrap();
        let sl = slice_windows(&s, WindowParams::default()).unwrap();
        let vol = volume_from_slices(&sl).unwrap();
        let mut buf = Vec::new();
        write_volume(&vol, 200_000, &mut buf).unwrap();
        let (header, back) = read_volume(buf.as_slice()).unwrap();
        assert_eq!(header.shape, vec![1, 6, 2, 8, 8]);
        assert_eq!(header.dtype, "f32le");
        assert_eq!(back, vol);
    }

    proptest! {
        #[test]
        fn stacked_frame_equals_direct_build(raw in proptest::collection::vec((0u64..500_000, 0u16..8, 0u16..8, any::<bool>()), 1..80)) {
            let mut raw = raw;
            raw.sort_by_key(|r| r.0);
            let events: Vec<Event> = raw.into_iter().map(|(t, x, y, p)| Event::new(t, x, y, if p { Polarity::Positive } else { Polarity::Negative })).collect();
            let s = EventStream::new(geo(), events).unwrap();
            let sl = slice_windows(&s, WindowParams::default()).unwrap();
            let vol = volume_from_slices(&sl).unwrap();
            for i in 0..sl.frames.len() {
                let (a, b) = sl.grid.frame_bounds(i);
                let direct = build_lnes(sl.frames[i], a, b - a, geo()).unwrap();
                prop_assert_eq!(vol.frame(i), direct.data());
            }
        }

        #[test]
        fn later_event_never_decreases(t1 in 0u64..1000, dt in 0u64..1000, x in 0u16..8, y in 0u16..8) {
            let a = Event::new(t1, x, y, Polarity::Positive);
            let before = build_lnes(&[a], 0, 2000, geo()).unwrap();
            let b = Event::new(t1 + dt, x, y, Polarity::Positive);
            let after = build_lnes(&[a, b], 0, 2000, geo()).unwrap();
            prop_assert!(after.get(0, y as usize, x as usize) >= before.get(0, y as usize, x as usize));
        }
    }
}
