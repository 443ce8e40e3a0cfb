use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::raster::Raster;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Which modality rasters to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modalities {
    Both,
    M1Only,
    M2Only,
}

impl Modalities {
    pub fn wants_m1(self) -> bool {
        matches!(self, Modalities::Both | Modalities::M1Only)
    }

    pub fn wants_m2(self) -> bool {
        matches!(self, Modalities::Both | Modalities::M2Only)
    }
}

impl std::str::FromStr for Modalities {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modalities::Both),
            "m1_only" => Ok(Modalities::M1Only),
            "m2_only" => Ok(Modalities::M2Only),
            other => Err(Error::Config(format!("unknown mode {other:?} (both, m1_only, m2_only)"))),
        }
    }
}

/// One co-registered scene. A modality is `None` when it was not requested.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub modality1: Option<Raster<f32>>,
    pub modality2: Option<Raster<f32>>,
    pub label: Raster<u8>,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }

    pub fn validate(&self, num_classes: usize, ignore: u8) -> Result<()> {
        let (h, w) = (self.label.height, self.label.width);
        if self.label.channels != 1 {
            return Err(Error::Dataset(format!("{}: label must have one channel", self.id)));
        }
        for r in [&self.modality1, &self.modality2].into_iter().flatten() {
            if (r.height, r.width) != (h, w) {
                return Err(Error::Dataset(format!(
                    "{}: modality is {}x{}, label is {h}x{w}",
                    self.id, r.height, r.width
                )));
            }
        }
        if let Some(bad) = self.label.data.iter().find(|&&v| v != ignore && v as usize >= num_classes) {
            return Err(Error::Dataset(format!(
                "{}: label value {bad} outside 0..{num_classes}",
                self.id
            )));
        }
        Ok(())
    }
}

/// Directory of record triplets plus a `manifest.txt` index.
///
/// The manifest's first line is `K=<int> IGNORE=<int>`, followed by one
/// record id per line. Each id resolves to `<id>.m1.srs`, `<id>.m2.srs` and
/// `<id>.label.srs` next to the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub num_classes: usize,
    pub ignore_value: u8,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn m1_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.m1.srs"))
    }

    pub fn m2_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.m2.srs"))
    }

    pub fn label_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.label.srs"))
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("K={} IGNORE={}\n", self.num_classes, self.ignore_value);
        for id in &self.ids {
            s.push_str(id);
            s.push('\n');
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Dataset("manifest is empty".into()))?;
        let mut k = None;
        let mut ignore = None;
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("K", v)) => k = v.parse::<usize>().ok(),
                Some(("IGNORE", v)) => ignore = v.parse::<u8>().ok(),
                _ => return Err(Error::Dataset(format!("bad manifest header token {tok:?}"))),
            }
        }
        let (num_classes, ignore_value) = match (k, ignore) {
            (Some(k), Some(i)) if k >= 1 => (k, i),
            _ => return Err(Error::Dataset(format!("bad manifest header {header:?}"))),
        };
        let ids = lines
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Ok(Self {
            root: root.to_path_buf(),
            ids,
            num_classes,
            ignore_value,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(dir, &text)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    /// Reads record `index`. Unrequested modality files are never opened.
    pub fn load_record(&self, index: usize, which: Modalities) -> Result<SampleRecord> {
        let id = self
            .ids
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("record index {index} out of range")))?;
        let label = Raster::<u8>::read(&self.label_path(id))?;
        let modality1 = if which.wants_m1() {
            Some(Raster::<f32>::read(&self.m1_path(id))?)
        } else {
            None
        };
        let modality2 = if which.wants_m2() {
            Some(Raster::<f32>::read(&self.m2_path(id))?)
        } else {
            None
        };
        let rec = SampleRecord {
            id: id.clone(),
            modality1,
            modality2,
            label,
        };
        rec.validate(self.num_classes, self.ignore_value)?;
        Ok(rec)
    }

    pub fn load_label(&self, index: usize) -> Result<Raster<u8>> {
        let id = self
            .ids
            .get(index)
            .ok_or_else(|| Error::Dataset(format!("record index {index} out of range")))?;
        Raster::<u8>::read(&self.label_path(id))
    }
}

/// Pixel counts per class over all labels; ignore pixels excluded.
pub fn class_histogram(manifest: &DatasetManifest) -> Result<Vec<u64>> {
    if manifest.is_empty() {
        return Err(Error::Dataset("manifest has no records".into()));
    }
    let mut hist = vec![0u64; manifest.num_classes];
    for i in 0..manifest.len() {
        accumulate_histogram(&manifest.load_label(i)?, manifest.ignore_value, &mut hist);
    }
    Ok(hist)
}

pub(crate) fn accumulate_histogram(label: &Raster<u8>, ignore: u8, hist: &mut [u64]) {
    for &v in &label.data {
        if v != ignore {
            if let Some(slot) = hist.get_mut(v as usize) {
                *slot += 1;
            }
        }
    }
}

/// Records held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub num_classes: usize,
    pub ignore_value: u8,
    pub modalities: Modalities,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, which: Modalities) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Dataset("manifest has no records".into()));
        }
        let records = (0..manifest.len())
            .map(|i| manifest.load_record(i, which))
            .collect::<Result<_>>()?;
        Ok(Self {
            records,
            num_classes: manifest.num_classes,
            ignore_value: manifest.ignore_value,
            modalities: which,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.num_classes];
        for r in &self.records {
            accumulate_histogram(&r.label, self.ignore_value, &mut hist);
        }
        hist
    }
}
