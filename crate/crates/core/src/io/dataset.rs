//! Image datasets and deterministic batch streams.

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dequant::quantize;
use crate::error::{Error, Result};
use crate::io::image::read_pnm;
use crate::tensor::{mcwt, Shape, Tensor};

/// All images of a dataset, quantized to `n_bits`, as `[N, h, w, c]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    images: Tensor<u8>,
    n_bits: u32,
}

impl Dataset {
    /// Wraps 8-bit images, reducing them to `n_bits`.
    pub fn from_u8(images: Tensor<u8>, n_bits: u32) -> Result<Self> {
        if images.shape().n() == 0 {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(Dataset {
            images: quantize(&images, n_bits)?,
            n_bits,
        })
    }

    /// Reads an MCWT u8 tensor file or a directory of PGM/PPM images.
    pub fn load(path: &Path, n_bits: u32) -> Result<Self> {
        if path.is_dir() {
            Dataset::from_u8(load_pnm_dir(path)?, n_bits)
        } else {
            let t = mcwt::load(path)?.into_u8()?;
            Dataset::from_u8(t, n_bits)
        }
    }

    pub fn len(&self) -> usize {
        self.images.shape().n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_bits(&self) -> u32 {
        self.n_bits
    }

    /// `(h, w, c)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s.h(), s.w(), s.c())
    }

    pub fn images(&self) -> &Tensor<u8> {
        &self.images
    }

    pub fn batches_per_epoch(&self, batch: usize) -> usize {
        self.len().div_ceil(batch)
    }

    /// Item order of `epoch`, a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        idx
    }

    /// Batch consumed by training step `step` (0-based). Epochs are walked in
    /// order; the last batch of an epoch may be short.
    pub fn batch_for_step(&self, step: u64, batch: usize, seed: u64) -> Result<Tensor<u8>> {
        if batch == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        let per_epoch = self.batches_per_epoch(batch) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        let order = self.epoch_order(seed, epoch);
        let end = ((k + 1) * batch).min(self.len());
        Ok(self.images.gather_batch(&order[k * batch..end]))
    }

    /// Unshuffled consecutive batches covering the dataset once.
    pub fn sequential_batches(&self, batch: usize) -> Result<Vec<Tensor<u8>>> {
        if batch == 0 {
            return Err(Error::Validation("batch size must be at least 1".into()));
        }
        (0..self.len())
            .step_by(batch)
            .map(|start| {
                self.images
                    .batch_slice(start, batch.min(self.len() - start))
            })
            .collect()
    }

    /// Batches for steps `start..end`, produced by a background thread
    /// through a bounded queue when `prefetch` is set.
    pub fn stream(
        &self,
        start: u64,
        end: u64,
        batch: usize,
        seed: u64,
        prefetch: bool,
    ) -> BatchStream {
        if prefetch {
            let ds = self.clone();
            let (tx, rx) = sync_channel(4);
            let handle = std::thread::spawn(move || {
                for step in start..end {
                    if tx.send(ds.batch_for_step(step, batch, seed)).is_err() {
                        break;
                    }
                }
            });
            BatchStream::Prefetch {
                rx,
                handle: Some(handle),
            }
        } else {
            BatchStream::Inline {
                ds: self.clone(),
                next: start,
                end,
                batch,
                seed,
            }
        }
    }
}

/// Iterator over training batches.
pub enum BatchStream {
    Inline {
        ds: Dataset,
        next: u64,
        end: u64,
        batch: usize,
        seed: u64,
    },
    Prefetch {
        rx: Receiver<Result<Tensor<u8>>>,
        handle: Option<JoinHandle<()>>,
    },
}

impl Iterator for BatchStream {
    type Item = Result<Tensor<u8>>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            BatchStream::Inline {
                ds,
                next,
                end,
                batch,
                seed,
            } => {
                if *next >= *end {
                    return None;
                }
                let b = ds.batch_for_step(*next, *batch, *seed);
                *next += 1;
                Some(b)
            }
            BatchStream::Prefetch { rx, handle } => match rx.recv() {
                Ok(b) => Some(b),
                Err(_) => {
                    if let Some(h) = handle.take() {
                        let _ = h.join();
                    }
                    None
                }
            },
        }
    }
}

fn load_pnm_dir(dir: &Path) -> Result<Tensor<u8>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase())
                    .as_deref(),
                Some("pgm" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!(
            "no PGM/PPM images in {}",
            dir.display()
        )));
    }
    let mut images = Vec::with_capacity(paths.len());
    for p in &paths {
        images.push(read_pnm(p)?);
    }
    let shape = images[0].shape();
    if let Some((p, img)) = paths.iter().zip(&images).find(|(_, i)| i.shape() != shape) {
        return Err(Error::Data(format!(
            "{} has shape {:?}, expected {:?}",
            p.display(),
            img.shape(),
            shape
        )));
    }
    let refs: Vec<&Tensor<u8>> = images.iter().collect();
    Tensor::concat_batch(&refs)
}

/// Order-sensitive FNV-1a checksum of a batch, for determinism checks.
pub fn checksum(t: &Tensor<u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for d in t.shape().0 {
        h = (h ^ d as u64).wrapping_mul(0x100_0000_01b3);
    }
    for &b in t.data() {
        h = (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3);
    }
    h
}

/// Shape of a batch of `n` items from a dataset of `(h, w, c)` images.
pub fn batch_shape(n: usize, image: (usize, usize, usize)) -> Shape {
    Shape::new(n, image.0, image.1, image.2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::image::encode_pnm;

    fn toy(n: usize) -> Dataset {
        let t = Tensor::<u8>::from_vec(
            Shape::new(n, 2, 2, 1),
            (0..n * 4).map(|i| (i % 256) as u8).collect(),
        )
        .unwrap();
        Dataset::from_u8(t, 8).unwrap()
    }

    #[test]
    fn batch_sizes_4_4_2() {
        let ds = toy(10);
        let sizes: Vec<usize> = (0..3)
            .map(|s| ds.batch_for_step(s, 4, 1).unwrap().shape().n())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let seq: Vec<usize> = ds
            .sequential_batches(4)
            .unwrap()
            .iter()
            .map(|b| b.shape().n())
            .collect();
        assert_eq!(seq, vec![4, 4, 2]);
    }

    #[test]
    fn epoch_covers_every_item_once() {
        let ds = toy(10);
        let mut seen: Vec<u8> = (0..3)
            .flat_map(|s| {
                let b = ds.batch_for_step(s, 4, 9).unwrap();
                (0..b.shape().n())
                    .map(move |i| b.at(i, 0, 0, 0))
                    .collect::<Vec<_>>()
            })
            .collect();
        seen.sort();
        assert_eq!(seen, (0..10).map(|i| (i * 4) as u8).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_order_and_prefetch_agrees() {
        let ds = toy(10);
        let a: Vec<u64> = ds
            .stream(0, 7, 3, 5, false)
            .map(|b| checksum(&b.unwrap()))
            .collect();
        let b: Vec<u64> = ds
            .stream(0, 7, 3, 5, true)
            .map(|b| checksum(&b.unwrap()))
            .collect();
        assert_eq!(a, b);
        let c: Vec<u64> = ds
            .stream(0, 7, 3, 6, false)
            .map(|b| checksum(&b.unwrap()))
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn quantizes_on_load() {
        let t = Tensor::<u8>::from_vec(Shape::new(1, 1, 1, 2), vec![255, 8]).unwrap();
        let ds = Dataset::from_u8(t, 5).unwrap();
        assert_eq!(ds.images().data(), &[31, 1]);
    }

    #[test]
    fn pgm_directory() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3u8 {
            let img = Tensor::<u8>::full(Shape::new(1, 8, 8, 1), i);
            std::fs::write(
                dir.path().join(format!("{i}.pgm")),
                encode_pnm(&img).unwrap(),
            )
            .unwrap();
        }
        let ds = Dataset::load(dir.path(), 8).unwrap();
        assert_eq!(ds.images().shape(), Shape::new(3, 8, 8, 1));
        std::fs::write(
            dir.path().join("odd.pgm"),
            encode_pnm(&Tensor::<u8>::full(Shape::new(1, 4, 4, 1), 0)).unwrap(),
        )
        .unwrap();
        assert!(matches!(Dataset::load(dir.path(), 8), Err(Error::Data(_))));
    }

    #[test]
    fn empty_dataset_rejected() {
        let t = Tensor::<u8>::from_vec(Shape::new(0, 2, 2, 1), vec![]).unwrap();
        assert!(Dataset::from_u8(t, 8).is_err());
    }
}
