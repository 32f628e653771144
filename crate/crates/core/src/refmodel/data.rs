//! Synthetic global-local records for the reference model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RefModelConfig, RefModelError, FIRST_CHAR};
use crate::imaging::{crop_region, downsample_global, Image};
use crate::regions::BoundingBox;

/// Side of the rendered source image.
pub const TOY_SOURCE_SIDE: u32 = 64;
/// Resolution of the global view.
pub const TOY_GLOBAL_RES: u32 = 32;
const CELL_W: u32 = 32;
const CELL_H: u32 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySlice {
    pub image: Image,
    pub bbox: BoundingBox,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRecord {
    pub global: Image,
    pub source_dims: (u32, u32),
    pub slices: Vec<ToySlice>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ToyDataset {
    pub records: Vec<ToyRecord>,
}

impl ToyDataset {
    /// `n` records, each a 64×64 source with two or three textured 32×16
    /// slices in reading order and a random 2-4 token target per slice.
    pub fn generate(n: usize, cfg: &RefModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cells: Vec<(u32, u32)> = (0..TOY_SOURCE_SIDE / CELL_H)
            .flat_map(|r| (0..TOY_SOURCE_SIDE / CELL_W).map(move |c| (r, c)))
            .collect();
        let records = (0..n)
            .map(|_| {
                let mut src = Image::filled(TOY_SOURCE_SIDE, TOY_SOURCE_SIDE, [128, 128, 128]);
                let k = rng.gen_range(2..=3);
                let mut chosen: Vec<(u32, u32)> = cells.choose_multiple(&mut rng, k).copied().collect();
                chosen.sort();
                let boxes: Vec<BoundingBox> = chosen
                    .iter()
                    .map(|&(r, c)| {
                        let (x0, y0) = (c * CELL_W, r * CELL_H);
                        for y in y0..y0 + CELL_H {
                            for x in x0..x0 + CELL_W {
                                src.put_pixel(x, y, [rng.gen(), rng.gen(), rng.gen()]);
                            }
                        }
                        BoundingBox::new(x0 as f64, y0 as f64, (x0 + CELL_W) as f64, (y0 + CELL_H) as f64)
                    })
                    .collect();
                let global = downsample_global(&src, TOY_GLOBAL_RES).expect("toy resolution is valid").image;
                let slices = boxes
                    .into_iter()
                    .map(|bbox| {
                        let len = rng.gen_range(2..=4);
                        ToySlice {
                            image: crop_region(&src, &bbox, TOY_SOURCE_SIDE).expect("toy box is inside").image,
                            bbox,
                            target: (0..len).map(|_| rng.gen_range(FIRST_CHAR..cfg.vocab_size)).collect(),
                        }
                    })
                    .collect();
                ToyRecord {
                    global,
                    source_dims: (TOY_SOURCE_SIDE, TOY_SOURCE_SIDE),
                    slices,
                }
            })
            .collect();
        Self { records }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), RefModelError> {
        for (r, rec) in self.records.iter().enumerate() {
            for (i, s) in rec.slices.iter().enumerate() {
                if s.target.is_empty() {
                    return Err(RefModelError::InvalidDataset(format!("record {r} slice {i}: empty target")));
                }
                if let Some(t) = s.target.iter().find(|&&t| t >= vocab_size || t < FIRST_CHAR) {
                    return Err(RefModelError::InvalidDataset(format!("record {r} slice {i}: token {t} out of range")));
                }
            }
        }
        Ok(())
    }

    pub fn slice_count(&self) -> usize {
        self.records.iter().map(|r| r.slices.len()).sum()
    }
}
