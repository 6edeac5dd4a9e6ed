//! Synthetic tasks with known ground-truth saliency.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::argmax;
use super::{ForwardOptions, Topology, ToyInputs, ToyModel};

/// A rectangular patch block carrying one class pattern.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub class: usize,
    /// `(row, col, height, width)` in patch units.
    pub block: (usize, usize, usize, usize),
    /// Row-major over the patch grid.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTask {
    pub inputs: ToyInputs,
    pub label: usize,
    pub objects: Vec<PlantedObject>,
}

impl PlantedTask {
    /// Union of all object masks.
    pub fn truth_mask(&self) -> Vec<bool> {
        let n = self.objects.first().map_or(0, |o| o.mask.len());
        (0..n)
            .map(|i| self.objects.iter().any(|o| o.mask[i]))
            .collect()
    }
}

fn block_mask(grid: (usize, usize), block: (usize, usize, usize, usize)) -> Vec<bool> {
    let (r0, c0, h, w) = block;
    (0..grid.0 * grid.1)
        .map(|i| {
            let (r, c) = (i / grid.1, i % grid.1);
            (r0..r0 + h).contains(&r) && (c0..c0 + w).contains(&c)
        })
        .collect()
}

impl ToyModel {
    fn plant_rng(&self, seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ self.config.seed)
    }

    fn background(&self, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<usize>) {
        let cfg = &self.config;
        let normal = Normal::new(0.0, cfg.wiring.background_sigma).expect("finite sigma");
        let patches =
            Array2::from_shape_simple_fn((cfg.image_tokens(), cfg.d_model), || normal.sample(rng));
        let text = match cfg.topology {
            Topology::LxmertMini { .. } => std::iter::once(0)
                .chain((1..cfg.text_len).map(|_| rng.random_range(1..cfg.vocab)))
                .collect(),
            Topology::DetrMini { .. } => Vec::new(),
        };
        (patches, text)
    }

    fn random_block(&self, rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
        let (rows, cols) = self.config.grid;
        let h = rng.random_range(1..=(rows / 2).max(1));
        let w = rng.random_range(1..=(cols / 2).max(1));
        let r0 = rng.random_range(0..=rows - h);
        let c0 = rng.random_range(0..=cols - w);
        (r0, c0, h, w)
    }

    fn stamp(
        &self,
        patches: &mut Array2<f64>,
        class: usize,
        block: (usize, usize, usize, usize),
    ) -> PlantedObject {
        let mask = block_mask(self.config.grid, block);
        for (i, &on) in mask.iter().enumerate() {
            if on {
                let mut row = patches.row_mut(i);
                row += &self.pattern(class);
            }
        }
        PlantedObject { class, block, mask }
    }

    /// Stamps the pattern of `class` on `block`; background and text come from `seed`.
    pub fn plant_block(
        &self,
        seed: u64,
        class: usize,
        block: (usize, usize, usize, usize),
    ) -> PlantedTask {
        let mut rng = self.plant_rng(seed);
        let (mut patches, text) = self.background(&mut rng);
        let object = self.stamp(&mut patches, class, block);
        self.finish(patches, text, class, vec![object])
    }

    /// One object of a random class on a random block.
    pub fn plant_task(&self, seed: u64) -> PlantedTask {
        let mut rng = self.plant_rng(seed);
        let (mut patches, text) = self.background(&mut rng);
        let class = rng.random_range(0..self.config.num_classes);
        let block = self.random_block(&mut rng);
        let object = self.stamp(&mut patches, class, block);
        self.finish(patches, text, class, vec![object])
    }

    /// Two objects of distinct classes on disjoint blocks. The label is the
    /// first object's class.
    pub fn plant_pair(&self, seed: u64) -> PlantedTask {
        let mut rng = self.plant_rng(seed);
        let (mut patches, text) = self.background(&mut rng);
        let first = rng.random_range(0..self.config.num_classes);
        let second =
            (first + rng.random_range(1..self.config.num_classes)) % self.config.num_classes;
        let a = self.random_block(&mut rng);
        let mut b = self.random_block(&mut rng);
        let ma = block_mask(self.config.grid, a);
        while block_mask(self.config.grid, b)
            .iter()
            .zip(&ma)
            .any(|(&x, &y)| x && y)
        {
            b = self.random_block(&mut rng);
        }
        let oa = self.stamp(&mut patches, first, a);
        let ob = self.stamp(&mut patches, second, b);
        self.finish(patches, text, first, vec![oa, ob])
    }

    fn finish(
        &self,
        patches: Array2<f64>,
        text: Vec<usize>,
        label: usize,
        objects: Vec<PlantedObject>,
    ) -> PlantedTask {
        let mut inputs = ToyInputs {
            patches,
            text,
            focus: 0,
        };
        if let Topology::DetrMini { .. } = self.config.topology {
            inputs.focus = self.best_query(&inputs, label);
        }
        PlantedTask {
            inputs,
            label,
            objects,
        }
    }

    /// Query with the highest probability for `class`.
    pub fn best_query(&self, inputs: &ToyInputs, class: usize) -> usize {
        let out = self
            .forward(inputs, &ForwardOptions::default())
            .expect("planted inputs match the config");
        argmax((0..out.logits.nrows()).map(|r| out.probabilities(r)[class]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::ToyConfig;

    #[test]
    fn two_by_two_block_in_four_by_four() {
        let mut cfg = ToyConfig::lxmert_mini(1);
        cfg.grid = (4, 4);
        let m = ToyModel::new(cfg).unwrap();
        let t = m.plant_block(0, 2, (1, 1, 2, 2));
        assert_eq!(t.truth_mask().iter().filter(|&&b| b).count(), 4);
        assert!(t.truth_mask()[5] && t.truth_mask()[10] && !t.truth_mask()[0]);
        assert_eq!(t.label, 2);
    }

    #[test]
    fn pair_objects_are_disjoint_and_distinct() {
        let m = ToyModel::new(ToyConfig::lxmert_mini(3)).unwrap();
        for seed in 0..20 {
            let t = m.plant_pair(seed);
            let (a, b) = (&t.objects[0], &t.objects[1]);
            assert_ne!(a.class, b.class);
            assert!(a.mask.iter().zip(&b.mask).all(|(&x, &y)| !(x && y)));
        }
    }

    #[test]
    fn planted_class_is_usually_predicted() {
        for cfg in [ToyConfig::lxmert_mini(21), ToyConfig::detr_mini(21)] {
            let m = ToyModel::new(cfg).unwrap();
            let hits = (0..20)
                .filter(|&s| {
                    let t = m.plant_task(s);
                    let out = m.forward(&t.inputs, &ForwardOptions::default()).unwrap();
                    out.prediction(t.inputs.focus) == t.label
                })
                .count();
            assert!(hits >= 15, "{hits}/20");
        }
    }

    #[test]
    fn planting_is_deterministic() {
        let m = ToyModel::new(ToyConfig::detr_mini(2)).unwrap();
        assert_eq!(m.plant_task(9), m.plant_task(9));
        assert_ne!(
            m.plant_task(9).inputs.patches,
            m.plant_task(10).inputs.patches
        );
    }
}
