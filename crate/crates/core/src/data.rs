//! Clip records, the JSON-lines manifest and on-disk clip storage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::PixelVideo;
use crate::conditions::audio::Waveform;
use crate::conditions::skeleton::SkeletonSequence;
use crate::error::{Error, Result};
use crate::io;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub lipsync_ok: bool,
    pub pose_visible: bool,
    pub aesthetic_ok: bool,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub frames: String,
    pub waveform: String,
    pub skeleton: String,
    #[serde(default)]
    pub caption: String,
    pub flags: Flags,
    /// Frame height of the stacked frame image.
    pub height: usize,
}

/// A clip held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub id: String,
    pub video: PixelVideo,
    pub wave: Waveform,
    pub skeleton: SkeletonSequence,
    pub caption: String,
    pub flags: Flags,
}

impl Clip {
    pub fn record(&self) -> ClipRecord {
        ClipRecord {
            id: self.id.clone(),
            frames: format!("{}.png", self.id),
            waveform: format!("{}.wav", self.id),
            skeleton: format!("{}.skel.jsonl", self.id),
            caption: self.caption.clone(),
            flags: self.flags,
            height: self.video.height(),
        }
    }

    /// Writes the clip's three files into `dir` and returns its record.
    pub fn save(&self, dir: &Path) -> Result<ClipRecord> {
        let rec = self.record();
        io::write_strip(&dir.join(&rec.frames), &self.video)?;
        self.wave.write_wav(&dir.join(&rec.waveform))?;
        let f = BufWriter::new(File::create(dir.join(&rec.skeleton))?);
        self.skeleton.write_jsonl(f)?;
        Ok(rec)
    }

    pub fn load(dir: &Path, rec: &ClipRecord) -> Result<Self> {
        let inner = || -> Result<Self> {
            let video = io::read_strip(&dir.join(&rec.frames), rec.height)?;
            let wave = Waveform::read_wav(&dir.join(&rec.waveform))?;
            let skeleton =
                SkeletonSequence::read_jsonl(BufReader::new(File::open(dir.join(&rec.skeleton))?))?;
            if skeleton.len() != video.frames() {
                return Err(Error::DimensionMismatch(format!(
                    "{} skeleton frames for {} video frames",
                    skeleton.len(),
                    video.frames()
                )));
            }
            Ok(Self {
                id: rec.id.clone(),
                video,
                wave,
                skeleton,
                caption: rec.caption.clone(),
                flags: rec.flags,
            })
        };
        inner().map_err(|e| e.in_clip(&rec.id))
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ClipRecord>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ClipRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Dataset directory with its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<ClipRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let records = read_manifest(&dir.join(MANIFEST))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records,
        })
    }

    pub fn load_all(&self) -> Result<Vec<Clip>> {
        crate::exec::map(&self.records, |r| Clip::load(&self.dir, r))
            .into_iter()
            .collect()
    }
}
