//! Batches as `(B, C, H, W)` tensors plus integer label maps.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{Dataset, SampleRecord};
use super::raster::Raster;
use crate::error::{Error, Result};

/// Row-major `(B, H, W)` label maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub data: Vec<u8>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl LabelBatch {
    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub m1: Option<Tensor>,
    pub m2: Option<Tensor>,
    pub labels: LabelBatch,
    pub ids: Vec<String>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.batch
    }
}

#[derive(Debug, Clone, Copy)]
struct Window {
    y: usize,
    x: usize,
    side_h: usize,
    side_w: usize,
}

fn stack_rasters(rasters: &[&Raster<f32>], win: &[Window], dtype: DType) -> Result<Tensor> {
    let c = rasters[0].channels;
    let (h, w) = (win[0].side_h, win[0].side_w);
    let mut out = Vec::with_capacity(rasters.len() * c * h * w);
    for (r, wd) in rasters.iter().zip(win) {
        if r.channels != c {
            return Err(Error::Dataset(format!("channel count {} differs from {c} within batch", r.channels)));
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(r.get(wd.y + y, wd.x + x, ch));
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (rasters.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

fn assemble(records: &[&SampleRecord], win: &[Window], dtype: DType) -> Result<Batch> {
    let (h, w) = (win[0].side_h, win[0].side_w);
    let mut labels = Vec::with_capacity(records.len() * h * w);
    for (r, wd) in records.iter().zip(win) {
        for y in 0..h {
            for x in 0..w {
                labels.push(r.label.get(wd.y + y, wd.x + x, 0));
            }
        }
    }
    let gather = |pick: fn(&SampleRecord) -> Option<&Raster<f32>>| -> Result<Option<Tensor>> {
        let found: Option<Vec<&Raster<f32>>> = records.iter().map(|r| pick(r)).collect();
        match found {
            Some(rs) => Ok(Some(stack_rasters(&rs, win, dtype)?)),
            None => Ok(None),
        }
    };
    Ok(Batch {
        m1: gather(|r| r.modality1.as_ref())?,
        m2: gather(|r| r.modality2.as_ref())?,
        labels: LabelBatch {
            data: labels,
            batch: records.len(),
            height: h,
            width: w,
        },
        ids: records.iter().map(|r| r.id.clone()).collect(),
    })
}

/// Deterministic training batches: batch `k` depends only on `(seed, k)`.
///
/// Each epoch visits a fresh permutation of the records and drops the
/// trailing partial batch. With `crop = Some(s)` a random `s × s` window is
/// cut from every record.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    crop: Option<usize>,
    seed: u64,
    dtype: DType,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, crop: Option<usize>, seed: u64, dtype: DType) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Dataset("cannot sample batches from an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if batch_size > dataset.len() {
            return Err(Error::Config(format!(
                "batch_size {batch_size} exceeds dataset size {}",
                dataset.len()
            )));
        }
        check_crop(dataset, crop)?;
        Ok(Self {
            dataset,
            batch_size,
            crop,
            seed,
            dtype,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.dataset.len() / self.batch_size
    }

    /// Record indices of batch `step`.
    pub fn indices_at(&self, step: usize) -> Vec<usize> {
        let per_epoch = self.batches_per_epoch();
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order[k * self.batch_size..(k + 1) * self.batch_size].to_vec()
    }

    pub fn batch_at(&self, step: usize) -> Result<Batch> {
        let idx = self.indices_at(step);
        let records: Vec<&SampleRecord> = idx.iter().map(|&i| &self.dataset.records[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(step as u64);
        let win: Vec<Window> = records.iter().map(|r| window(r, self.crop, &mut rng)).collect();
        if win.iter().any(|w| (w.side_h, w.side_w) != (win[0].side_h, win[0].side_w)) {
            return Err(Error::Dataset("records of different sizes need a crop".into()));
        }
        assemble(&records, &win, self.dtype)
    }
}

/// One pass over a dataset. With a shuffle seed the record order is a seeded
/// permutation; with a crop every record gets a seeded random window shared by
/// both modalities and the label. The last batch may be short.
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    crop: Option<usize>,
    seed: u64,
    dtype: DType,
    next: usize,
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let k = self.next / self.batch_size;
        let end = (self.next + self.batch_size).min(self.order.len());
        let records: Vec<&SampleRecord> = self.order[self.next..end]
            .iter()
            .map(|&i| &self.dataset.records[i])
            .collect();
        self.next = end;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5851_f42d_4c95_7f2d);
        rng.set_stream(k as u64);
        let win: Vec<Window> = records.iter().map(|r| window(r, self.crop, &mut rng)).collect();
        if win.iter().any(|w| (w.side_h, w.side_w) != (win[0].side_h, win[0].side_w)) {
            return Some(Err(Error::Dataset("records in one batch differ in size".into())));
        }
        Some(assemble(&records, &win, self.dtype))
    }
}

fn window(r: &SampleRecord, crop: Option<usize>, rng: &mut ChaCha8Rng) -> Window {
    match crop {
        Some(s) => Window {
            y: rng.random_range(0..=r.height() - s),
            x: rng.random_range(0..=r.width() - s),
            side_h: s,
            side_w: s,
        },
        None => Window {
            y: 0,
            x: 0,
            side_h: r.height(),
            side_w: r.width(),
        },
    }
}

fn check_crop(dataset: &Dataset, crop: Option<usize>) -> Result<()> {
    if let Some(s) = crop {
        let smallest = dataset
            .records
            .iter()
            .map(|r| r.height().min(r.width()))
            .min()
            .unwrap_or(0);
        if s == 0 || s > smallest {
            return Err(Error::Config(format!("crop {s} does not fit records of side {smallest}")));
        }
    }
    Ok(())
}

/// Batches over one pass of `dataset`; dataset order when `shuffle_seed` is `None`.
pub fn iterate_batches(
    dataset: &Dataset,
    batch_size: usize,
    crop: Option<usize>,
    shuffle_seed: Option<u64>,
    dtype: DType,
) -> Result<BatchStream<'_>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot iterate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    check_crop(dataset, crop)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchStream {
        dataset,
        order,
        batch_size,
        crop,
        seed: shuffle_seed.unwrap_or(0),
        dtype,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, Modalities, SyntheticSceneConfig};

    fn dataset(n: usize, which: Modalities) -> Dataset {
        let cfg = SyntheticSceneConfig {
            image_size: 32,
            ..Default::default()
        };
        let mut records: Vec<SampleRecord> = (0..n).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        for r in &mut records {
            if !which.wants_m1() {
                r.modality1 = None;
            }
            if !which.wants_m2() {
                r.modality2 = None;
            }
        }
        Dataset {
            records,
            num_classes: 4,
            ignore_value: 255,
            modalities: which,
        }
    }

    #[test]
    fn batches_have_nchw_layout() {
        let ds = dataset(5, Modalities::Both);
        let s = BatchSampler::new(&ds, 2, Some(16), 7, DType::F32).unwrap();
        let b = s.batch_at(0).unwrap();
        assert_eq!(b.m1.as_ref().unwrap().dims(), &[2, 1, 16, 16]);
        assert_eq!(b.m2.as_ref().unwrap().dims(), &[2, 3, 16, 16]);
        assert_eq!((b.labels.batch, b.labels.height, b.labels.width), (2, 16, 16));
    }

    #[test]
    fn epochs_cover_each_record_once_and_drop_the_tail() {
        let ds = dataset(5, Modalities::Both);
        let s = BatchSampler::new(&ds, 2, None, 3, DType::F32).unwrap();
        assert_eq!(s.batches_per_epoch(), 2);
        let mut seen: Vec<usize> = (0..2).flat_map(|k| s.indices_at(k)).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        assert_eq!(s.batch_at(3).unwrap().ids, s.batch_at(3).unwrap().ids);
    }

    #[test]
    fn crop_contents_match_the_source() {
        let ds = dataset(2, Modalities::Both);
        let s = BatchSampler::new(&ds, 1, Some(8), 11, DType::F32).unwrap();
        let b = s.batch_at(0).unwrap();
        let rec = ds.records.iter().find(|r| r.id == b.ids[0]).unwrap();
        let m1: Vec<f32> = b.m1.unwrap().flatten_all().unwrap().to_vec1().unwrap();
        // Locate the crop by its label window, then compare the image values.
        let mut found = false;
        'outer: for y0 in 0..=24 {
            for x0 in 0..=24 {
                let matches = (0..8).all(|y| (0..8).all(|x| rec.label.get(y0 + y, x0 + x, 0) == b.labels.get(0, y, x)))
                    && (0..8).all(|y| (0..8).all(|x| m1[y * 8 + x] == rec.modality1.as_ref().unwrap().get(y0 + y, x0 + x, 0)));
                if matches {
                    found = true;
                    break 'outer;
                }
            }
        }
        assert!(found);
    }

    #[test]
    fn missing_modality_yields_none() {
        let ds = dataset(3, Modalities::M1Only);
        let batches: Vec<Batch> = iterate_batches(&ds, 2, None, None, DType::F32)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[1].size(), 1);
        assert!(batches[0].m2.is_none() && batches[0].m1.is_some());
    }

    #[test]
    fn shuffled_iteration_is_reproducible_and_full_crop_is_identity() {
        let ds = dataset(5, Modalities::Both);
        let ids = |seed| -> Vec<String> {
            iterate_batches(&ds, 2, Some(16), Some(seed), DType::F32)
                .unwrap()
                .flat_map(|b| b.unwrap().ids)
                .collect()
        };
        assert_eq!(ids(4), ids(4));
        assert_eq!(ids(4).len(), 5);
        let full: Vec<Batch> = iterate_batches(&ds, 5, Some(32), Some(1), DType::F32)
            .unwrap()
            .map(|b| b.unwrap())
            .collect();
        for (i, id) in full[0].ids.iter().enumerate() {
            let rec = ds.records.iter().find(|r| &r.id == id).unwrap();
            assert_eq!(&full[0].labels.data[i * 1024..(i + 1) * 1024], &rec.label.data[..]);
        }
        assert!(iterate_batches(&ds, 0, None, None, DType::F32).is_err());
    }

    #[test]
    fn invalid_sampler_settings_are_rejected() {
        let ds = dataset(2, Modalities::Both);
        assert!(BatchSampler::new(&ds, 0, None, 0, DType::F32).is_err());
        assert!(BatchSampler::new(&ds, 3, None, 0, DType::F32).is_err());
        assert!(BatchSampler::new(&ds, 1, Some(64), 0, DType::F32).is_err());
        let empty = dataset(0, Modalities::Both);
        assert!(matches!(BatchSampler::new(&empty, 1, None, 0, DType::F32), Err(Error::Dataset(_))));
    }
}
