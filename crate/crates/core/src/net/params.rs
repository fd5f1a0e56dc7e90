//! Flat parameter storage with a named registry.
//!
//! Every learnable tensor lives in one contiguous `Vec<f64>`; layers hold
//! offsets into it. Gradients and optimizer moments share the same layout.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamRegistry {
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, decay: bool) -> usize {
        let offset = self.len;
        let entry = ParamEntry {
            name: name.into(),
            offset,
            shape: shape.to_vec(),
            init,
            decay,
        };
        self.len += entry.len();
        self.entries.push(entry);
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Fresh parameter vector drawn according to each entry's init rule.
    pub fn initialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut values = vec![0.0; self.len];
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        for e in &self.entries {
            let slot = &mut values[e.range()];
            match e.init {
                Init::Zeros => slot.fill(0.0),
                Init::Ones => slot.fill(1.0),
                Init::TruncNormal(std) => {
                    for v in slot.iter_mut() {
                        let mut z: f64 = unit.sample(rng);
                        while z.abs() > 2.0 {
                            z = unit.sample(rng);
                        }
                        *v = z * std;
                    }
                }
            }
        }
        values
    }

    /// Per-element weight-decay flags.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for e in &self.entries {
            mask[e.range()].fill(e.decay);
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn offsets_are_contiguous() {
        let mut r = ParamRegistry::default();
        let a = r.add("a", &[3, 4], Init::TruncNormal(0.02), true);
        let b = r.add("b", &[4], Init::Zeros, false);
        let c = r.add("c", &[2], Init::Ones, false);
        assert_eq!((a, b, c), (0, 12, 16));
        assert_eq!(r.len(), 18);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let v = r.initialize(&mut rng);
        assert!(v[..12].iter().all(|x| x.abs() <= 0.04 && *x != 0.0));
        assert!(v[12..16].iter().all(|&x| x == 0.0));
        assert!(v[16..].iter().all(|&x| x == 1.0));
        assert_eq!(r.decay_mask().iter().filter(|&&d| d).count(), 12);
    }
}
