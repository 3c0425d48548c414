//! Sequence packing: token sequences of different resolutions concatenated
//! along the sequence axis, with attention confined to each sequence.

use std::rc::Rc;

use super::patch::{patchify, unpatchify};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Tensor;

/// One image to be packed together with its conditioning.
#[derive(Clone, Copy, Debug)]
pub struct PackItem<'a> {
    pub image: &'a Image,
    /// Global flow time.
    pub t: f64,
    /// `None` selects the null (unconditional) class embedding.
    pub class: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceMeta {
    pub offset: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub t: f64,
    pub class: Option<usize>,
    pub resolution: usize,
}

impl SequenceMeta {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct PackedBatch {
    patches: Tensor,
    seqs: Vec<SequenceMeta>,
    lens: Rc<[usize]>,
    patch_size: usize,
    channels: usize,
}

pub fn pack(items: &[PackItem<'_>], patch_size: usize) -> Result<PackedBatch> {
    let first = items.first().ok_or_else(|| Error::invalid("pack: empty sequence list"))?;
    let channels = first.image.channels();
    let mut rows = Vec::new();
    let mut seqs = Vec::with_capacity(items.len());
    let mut offset = 0;
    for item in items {
        let img = item.image;
        if img.channels() != channels {
            return Err(Error::invalid(format!(
                "pack: mixed channel counts {channels} and {}",
                img.channels()
            )));
        }
        if img.height() != img.width() {
            return Err(Error::invalid(format!(
                "pack: non-square image {}x{}",
                img.height(),
                img.width()
            )));
        }
        let p = patchify(img, patch_size)?;
        let meta = SequenceMeta {
            offset,
            grid_h: img.height() / patch_size,
            grid_w: img.width() / patch_size,
            t: item.t,
            class: item.class,
            resolution: img.height(),
        };
        offset += meta.len();
        rows.extend_from_slice(p.data());
        seqs.push(meta);
    }
    let dim = patch_size * patch_size * channels;
    let lens: Rc<[usize]> = seqs.iter().map(SequenceMeta::len).collect();
    Ok(PackedBatch {
        patches: Tensor::new(vec![offset, dim], rows)?,
        seqs,
        lens,
        patch_size,
        channels,
    })
}

impl PackedBatch {
    pub fn patches(&self) -> &Tensor {
        &self.patches
    }

    pub fn sequences(&self) -> &[SequenceMeta] {
        &self.seqs
    }

    pub fn lens(&self) -> Rc<[usize]> {
        self.lens.clone()
    }

    pub fn total_len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Grid coordinates of every packed token.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.seqs
            .iter()
            .flat_map(|s| (0..s.grid_h).flat_map(move |r| (0..s.grid_w).map(move |c| (r, c))))
            .collect()
    }

    /// Whether token `i` may attend to token `j`.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        let seq_of = |k: usize| self.seqs.iter().rposition(|s| s.offset <= k);
        i < self.total_len() && j < self.total_len() && seq_of(i) == seq_of(j)
    }

    /// Dense row-major `N x N` block-diagonal attention mask.
    pub fn block_mask(&self) -> Vec<bool> {
        let n = self.total_len();
        let mut mask = vec![false; n * n];
        for s in &self.seqs {
            for i in s.offset..s.offset + s.len() {
                mask[i * n + s.offset..i * n + s.offset + s.len()].fill(true);
            }
        }
        mask
    }

    /// Patch-space rows for per-sequence images (e.g. regression targets).
    pub fn pack_images(&self, images: &[&Image]) -> Result<Tensor> {
        if images.len() != self.seqs.len() {
            return Err(Error::invalid(format!(
                "pack_images: {} images for {} sequences",
                images.len(),
                self.seqs.len()
            )));
        }
        let mut rows = Vec::with_capacity(self.patches.numel());
        for (img, s) in images.iter().zip(&self.seqs) {
            if img.dims() != (self.channels, s.resolution, s.resolution) {
                return Err(Error::invalid(format!(
                    "pack_images: image {:?} does not match sequence resolution {}",
                    img.dims(),
                    s.resolution
                )));
            }
            rows.extend_from_slice(patchify(img, self.patch_size)?.data());
        }
        Tensor::new(self.patches.shape().to_vec(), rows)
    }

    /// Splits `[N, p*p*C]` rows back into one image per sequence.
    pub fn unpack(&self, rows: &Tensor) -> Result<Vec<Image>> {
        if rows.shape() != self.patches.shape() {
            return Err(Error::Shape {
                op: "unpack",
                lhs: self.patches.shape().to_vec(),
                rhs: rows.shape().to_vec(),
            });
        }
        let dim = self.patches.cols();
        self.seqs
            .iter()
            .map(|s| {
                let data = &rows.data()[s.offset * dim..(s.offset + s.len()) * dim];
                unpatchify(data, self.patch_size, self.channels, s.resolution)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_pack_is_an_error() {
        assert!(pack(&[], 2).is_err());
    }

    #[test]
    fn single_sequence_mask_is_full() {
        let img = Image::filled(3, 4, 4, 0.0);
        let b = pack(&[PackItem { image: &img, t: 0.5, class: Some(0) }], 2).unwrap();
        assert!(b.block_mask().iter().all(|&m| m));
    }

    #[test]
    fn two_sequences_give_two_blocks() {
        let a = Image::filled(1, 4, 4, 0.0);
        let b = Image::filled(1, 6, 6, 0.0);
        let items = [
            PackItem { image: &a, t: 0.1, class: None },
            PackItem { image: &b, t: 0.9, class: Some(1) },
        ];
        let batch = pack(&items, 2).unwrap();
        assert_eq!(batch.total_len(), 13);
        assert_eq!(&*batch.lens(), &[4, 9]);
        let mask = batch.block_mask();
        let n = 13;
        for i in 0..n {
            for j in 0..n {
                assert_eq!(mask[i * n + j], (i < 4) == (j < 4), "({i}, {j})");
                assert_eq!(batch.allows(i, j), mask[i * n + j]);
            }
        }
        assert_eq!(batch.positions()[4..7], [(0, 0), (0, 1), (0, 2)]);
    }
}
