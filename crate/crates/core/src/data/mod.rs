//! Procedural datasets, on-disk formats and image output.

mod checkpoint;
mod codec;
mod dataset_file;
mod ppm;
mod shapes;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use dataset_file::{load_dataset, save_dataset};
pub use ppm::{encode_ppm, write_ppm};
pub use shapes::{class_name, gen_shapes_dataset, MAX_CLASSES, RESOLUTIONS};

use crate::error::{Error, Result};
use crate::image::Image;

/// Labelled images in [-1, 1] sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    class_names: Vec<String>,
    seed: u64,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_names: Vec<String>, seed: u64) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "dataset: {} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if class_names.is_empty() || class_names.len() > u16::MAX as usize {
            return Err(Error::invalid("dataset: class count must be in 1..=65535"));
        }
        if let Some(first) = images.first() {
            for (i, img) in images.iter().enumerate() {
                if img.dims() != first.dims() {
                    return Err(Error::invalid(format!(
                        "dataset: image {i} has dims {:?}, expected {:?}",
                        img.dims(),
                        first.dims()
                    )));
                }
                if img.values().iter().any(|v| !(-1.0..=1.0).contains(v)) {
                    return Err(Error::invalid(format!("dataset: image {i} has values outside [-1, 1]")));
                }
            }
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_names.len()) {
            return Err(Error::invalid(format!(
                "dataset: label {l} of item {i} exceeds class count {}",
                class_names.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            class_names,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `(channels, height, width)` of every item, or `None` when empty.
    pub fn dims(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(Image::dims)
    }

    /// Per-class item counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}
