//! On-disk corpora: a JSON manifest next to one EVG1 file per sample.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{read_binary, slice_with_grid, write_binary, EventStream, Geometry, WindowGrid, WindowParams};
use crate::lnes::{volume_from_slices, LnesVolume};
use crate::synth::{gen_dataset, Handedness, LabeledStream, Split, StyleParams, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest's directory.
    pub path: String,
    pub class: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hands: Option<Handedness>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub geometry: Geometry,
    pub duration_us: u64,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if let Some(e) = m.entries.iter().find(|e| e.class >= m.classes.len()) {
            return Err(Error::Format(format!("{}: class {} out of range", e.path, e.class)));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Grid covering `[0, duration)` in whole bins.
    pub fn grid(&self, params: WindowParams) -> Result<WindowGrid> {
        let bins = self.duration_us.div_ceil(params.bin_len).max(1) as usize;
        WindowGrid::new(0, params, bins)
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: LnesVolume,
    pub label: usize,
}

/// LNES volume of a stream on a fixed grid; events outside it are dropped.
pub fn stream_to_volume(stream: &EventStream, grid: WindowGrid) -> Result<LnesVolume> {
    volume_from_slices(&slice_with_grid(stream, grid))
}

pub fn read_stream(path: &Path) -> Result<EventStream> {
    read_binary(BufReader::new(File::open(path)?))
}

/// Writes every stream as `<split>/<class>_<index>.evg` plus the manifest.
pub fn write_corpus(dir: &Path, cfg: &SynthConfig, streams: &[LabeledStream]) -> Result<Manifest> {
    for split in [Split::Train, Split::Val, Split::Test] {
        fs::create_dir_all(dir.join(split.name()))?;
    }
    let mut entries = Vec::with_capacity(streams.len());
    for s in streams {
        let program = cfg.classes[s.class];
        let rel = format!("{}/{}_{:04}.evg", s.split.name(), program.name(), s.index);
        write_binary(&s.stream, BufWriter::new(File::create(dir.join(&rel))?))?;
        entries.push(ManifestEntry {
            path: rel,
            class: s.class,
            split: s.split,
            subject: Some(s.subject),
            hands: Some(program.hands()),
            style: Some(s.style),
        });
    }
    let manifest = Manifest {
        geometry: cfg.geometry(),
        duration_us: cfg.duration_us,
        classes: cfg.classes.iter().map(|c| c.name().to_string()).collect(),
        entries,
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Generates and writes a synthetic corpus.
pub fn synth_corpus(dir: &Path, cfg: &SynthConfig, per_class: usize) -> Result<Manifest> {
    let streams = gen_dataset(cfg, per_class)?;
    write_corpus(dir, cfg, &streams)
}

/// Resolves the manifest file from either the file itself or its directory.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads one split as LNES samples on the manifest's fixed grid.
pub fn load_split(manifest_file: &Path, split: Split, params: WindowParams) -> Result<(Manifest, Vec<Sample>)> {
    let manifest = Manifest::read(manifest_file)?;
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    let grid = manifest.grid(params)?;
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    let samples = entries
        .par_iter()
        .map(|e| {
            let stream = read_stream(&base.join(&e.path))?;
            if stream.geometry() != manifest.geometry {
                return Err(Error::Format(format!("{}: geometry differs from manifest", e.path)));
            }
            Ok(Sample {
                volume: stream_to_volume(&stream, grid)?,
                label: e.class,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// In-memory samples straight from generated streams.
pub fn samples_from_streams(streams: &[LabeledStream], split: Split, grid: WindowGrid) -> Result<Vec<Sample>> {
    streams
        .par_iter()
        .filter(|s| s.split == split)
        .map(|s| {
            Ok(Sample {
                volume: stream_to_volume(&s.stream, grid)?,
                label: s.class,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_round_trip() {
        let dir = std::env::temp_dir().join(format!("egoev-ds-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let cfg = SynthConfig {
            width: 16,
            height: 16,
            duration_us: 40_000,
            ..SynthConfig::default()
        };
        let streams = gen_dataset(&cfg, 6).unwrap();
        let m = write_corpus(&dir, &cfg, &streams).unwrap();
        assert_eq!(m.entries.len(), 30);
        let params = WindowParams::new(20_000, 2).unwrap();
        let (m2, test) = load_split(&manifest_path(&dir), Split::Test, params).unwrap();
        assert_eq!(m, m2);
        let grid = m.grid(params).unwrap();
        assert_eq!(grid.bins, 2);
        assert_eq!(test, samples_from_streams(&streams, Split::Test, grid).unwrap());
        assert_eq!(test.len(), 5);
        fs::remove_dir_all(&dir).unwrap();
    }
}
