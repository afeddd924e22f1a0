use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{get_sample, DatasetIndex};
use super::synth::{generate_scene, SynthSceneSpec};
use crate::depth::Sample;
use crate::error::{FdctError, Result};

/// Random-access collection of samples.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn sample(&self, i: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [Sample] {
    fn len(&self) -> usize {
        <[Sample]>::len(self)
    }

    fn sample(&self, i: usize) -> Result<Sample> {
        self.get(i)
            .cloned()
            .ok_or_else(|| FdctError::Input(format!("sample {i} out of range")))
    }
}

impl SampleSource for Vec<Sample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, i: usize) -> Result<Sample> {
        self.as_slice().sample(i)
    }
}

/// A dataset on disk read at a fixed size.
pub struct SizedIndex<'a> {
    pub index: &'a DatasetIndex,
    pub size: (usize, usize),
}

impl SampleSource for SizedIndex<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }

    fn sample(&self, i: usize) -> Result<Sample> {
        get_sample(self.index, i, self.size)
    }
}

/// Scenes generated on demand from `base.for_scene(i)`.
pub struct SynthSource {
    pub base: SynthSceneSpec,
    pub scenes: usize,
}

impl SampleSource for SynthSource {
    fn len(&self) -> usize {
        self.scenes
    }

    fn sample(&self, i: usize) -> Result<Sample> {
        if i >= self.scenes {
            return Err(FdctError::Input(format!("scene {i} out of range")));
        }
        generate_scene(&self.base.for_scene(i))
    }
}

/// Sample order of one epoch, a function of `(shuffle_seed, epoch)` only.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Index batches of one epoch; the last batch may be partial.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(FdctError::Config("batch_size must be >= 1".into()));
    }
    Ok(epoch_order(n, shuffle_seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Stream of sample batches for one epoch.
pub struct BatchIter<'a, S: SampleSource + ?Sized> {
    source: &'a S,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<S: SampleSource + ?Sized> Iterator for BatchIter<'_, S> {
    type Item = Result<Vec<Sample>>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.batches.next()?;
        Some(idx.into_iter().map(|i| self.source.sample(i)).collect())
    }
}

pub fn batch_iterator<S: SampleSource + ?Sized>(
    source: &S,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
) -> Result<BatchIter<'_, S>> {
    Ok(BatchIter {
        source,
        batches: epoch_batches(source.len(), batch_size, shuffle_seed, epoch)?.into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_keeps_partial_batch() {
        let sizes: Vec<usize> = epoch_batches(10, 4, 1, 0)
            .unwrap()
            .iter()
            .map(Vec::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(epoch_batches(3, 0, 1, 0).is_err());
        assert!(epoch_batches(0, 2, 1, 0).unwrap().is_empty());
    }

    #[test]
    fn order_depends_only_on_seed_and_epoch() {
        assert_eq!(epoch_order(20, 5, 3), epoch_order(20, 5, 3));
        let mut sorted = epoch_order(20, 5, 3);
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        let first = epoch_order(20, 5, 0);
        for e in 1..100 {
            assert_ne!(epoch_order(20, 5, e), first, "epoch {e}");
        }
    }

    #[test]
    fn iterator_emits_samples() {
        let src = SynthSource {
            base: SynthSceneSpec {
                height: 16,
                width: 16,
                ..SynthSceneSpec::default()
            },
            scenes: 5,
        };
        let batches: Vec<Vec<Sample>> = batch_iterator(&src, 2, 0, 0)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(
            batches.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
        assert!(src.sample(5).is_err());
    }
}
