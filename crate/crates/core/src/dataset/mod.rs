//! Synthetic point-machine sound corpus with a deterministic stratified split.

pub mod io;
pub mod recipe;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

pub use io::{load, save};
pub use recipe::{recipe, ClassRecipe, CLASS_COUNTS, NUM_CLASSES, SAMPLE_RATE};

pub const MIN_INPUT_LENGTH: usize = 1024;
const SPLIT_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// 1-based class id.
    pub class: u8,
    pub split: Option<Split>,
    /// Stored at the on-disk precision so save/load is lossless.
    pub waveform: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_length(&self) -> Option<usize> {
        self.samples.first().map(|s| s.waveform.len())
    }

    /// Samples per class, index 0 holding class 1.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.class as usize - 1] += 1;
        }
        counts
    }

    /// Sample indices assigned to `split`, in id order.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == Some(split)).collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = |s| self.indices(s).len();
        (n(Split::Train), n(Split::Val), n(Split::Test))
    }

    /// Stacks the given samples into `[B, 1, L]`, promoting to f64.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let len = self.input_length().ok_or_else(|| Error::Input("empty sample set".into()))?;
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            let w = &self.samples[i].waveform;
            if w.len() != len {
                return Err(Error::Validation(format!("sample {i} has length {}, expected {len}", w.len())));
            }
            data.extend(w.iter().map(|&v| v as f64));
        }
        Tensor::new(&[indices.len(), 1, len], data)
    }

    /// 1-based labels of the given samples.
    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].class as usize).collect()
    }
}

/// Class sequence for the corpus: `CLASS_COUNTS[c]` copies of class `c + 1`.
fn class_sequence() -> Vec<u8> {
    CLASS_COUNTS.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c as u8 + 1, n)).collect()
}

/// Sample `id` of the corpus, independent of every other sample.
pub fn generate_sample(seed: u64, id: usize, class: u8, input_length: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let wave = recipe::synthesize(&recipe::recipe(class), input_length, &mut rng);
    Sample { id, class, split: None, waveform: wave.into_iter().map(|v| v as f32).collect() }
}

/// The full 1212-sample corpus, unsplit.
pub fn generate(seed: u64, input_length: usize) -> Result<SampleSet> {
    if input_length < MIN_INPUT_LENGTH {
        return Err(Error::Config(format!("input_length {input_length} is below the minimum {MIN_INPUT_LENGTH}")));
    }
    let classes = class_sequence();
    let samples = par::map_range(classes.len(), |i| generate_sample(seed, i, classes[i], input_length));
    Ok(SampleSet { samples })
}

/// Per-class `(train, val, test)` counts.
///
/// Train takes `floor(0.7 n)` of each class. The remainder is shared 2:1
/// between validation and test; the global test size is
/// `round(remainder / 3)`, apportioned across classes by largest remainder
/// with at least one sample in every split.
pub fn split_counts(counts: &[usize]) -> Result<Vec<(usize, usize, usize)>> {
    if let Some((c, &n)) = counts.iter().enumerate().find(|(_, &n)| n < 3) {
        return Err(Error::Stratification(format!("class {} has {n} samples, at least 3 are needed", c + 1)));
    }
    let train: Vec<usize> = counts.iter().map(|&n| (n * 7 / 10).clamp(1, n - 2)).collect();
    let rest: Vec<usize> = counts.iter().zip(&train).map(|(n, t)| n - t).collect();
    let total_rest: usize = rest.iter().sum();
    let test_total = ((total_rest + 1) / 3).max(counts.len());
    let mut test: Vec<usize> = rest.iter().map(|&r| (r / 3).clamp(1, r - 1)).collect();
    let mut assigned: usize = test.iter().sum();
    // largest fractional remainder first, ties by class order
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&c| std::cmp::Reverse(rest[c] % 3));
    while assigned < test_total {
        let before = assigned;
        for &c in &order {
            if assigned < test_total && test[c] + 1 < rest[c] {
                test[c] += 1;
                assigned += 1;
            }
        }
        if assigned == before {
            break;
        }
    }
    while assigned > test_total {
        let c = (0..counts.len()).filter(|&c| test[c] > 1).max_by_key(|&c| test[c]).expect("test shrinkable");
        test[c] -= 1;
        assigned -= 1;
    }
    Ok((0..counts.len()).map(|c| (train[c], rest[c] - test[c], test[c])).collect())
}

/// Assigns every sample to train, validation or test, stratified by class.
pub fn split(mut set: SampleSet, seed: u64) -> Result<SampleSet> {
    if set.is_empty() {
        return Err(Error::Stratification("empty sample set".into()));
    }
    let counts = set.class_counts();
    if let Some(c) = (0..NUM_CLASSES).find(|&c| counts[c] > 0 && counts[c] < 3) {
        return Err(Error::Stratification(format!("class {} has {} samples, at least 3 are needed", c + 1, counts[c])));
    }
    let present: Vec<usize> = counts.into_iter().filter(|&n| n > 0).collect();
    let plan = split_counts(&present)?;
    let mut p = plan.iter();
    for class in 1..=NUM_CLASSES as u8 {
        let mut members: Vec<usize> = (0..set.len()).filter(|&i| set.samples[i].class == class).collect();
        if members.is_empty() {
            continue;
        }
        let &(train, val, _) = p.next().expect("plan per present class");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(SPLIT_STREAM + class as u64);
        members.shuffle(&mut rng);
        for (k, &i) in members.iter().enumerate() {
            set.samples[i].split = Some(if k < train {
                Split::Train
            } else if k < train + val {
                Split::Val
            } else {
                Split::Test
            });
        }
    }
    Ok(set)
}

pub fn rms(w: &[f32]) -> f64 {
    (w.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / w.len().max(1) as f64).sqrt()
}

/// Test accuracy of a nearest-centroid classifier on per-sample RMS,
/// with centroids fitted on the training split.
pub fn rms_floor_accuracy(set: &SampleSet) -> Result<f64> {
    let mut sum = [0.0; NUM_CLASSES];
    let mut n = [0usize; NUM_CLASSES];
    for &i in &set.indices(Split::Train) {
        let s = &set.samples[i];
        sum[s.class as usize - 1] += rms(&s.waveform);
        n[s.class as usize - 1] += 1;
    }
    let centroids: Vec<(usize, f64)> =
        (0..NUM_CLASSES).filter(|&c| n[c] > 0).map(|c| (c + 1, sum[c] / n[c] as f64)).collect();
    let test = set.indices(Split::Test);
    if test.is_empty() || centroids.is_empty() {
        return Err(Error::Input("floor classifier needs non-empty train and test splits".into()));
    }
    let correct = test
        .iter()
        .filter(|&&i| {
            let r = rms(&set.samples[i].waveform);
            let (best, _) = centroids
                .iter()
                .copied()
                .min_by(|a, b| (a.1 - r).abs().total_cmp(&(b.1 - r).abs()))
                .expect("centroids");
            best == set.samples[i].class as usize
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_plan_for_corpus() {
        let plan = split_counts(&CLASS_COUNTS).unwrap();
        let sum = |f: fn(&(usize, usize, usize)) -> usize| plan.iter().map(f).sum::<usize>();
        assert_eq!((sum(|p| p.0), sum(|p| p.1), sum(|p| p.2)), (845, 245, 122));
        let test: Vec<usize> = plan.iter().map(|p| p.2).collect();
        assert_eq!(test, vec![12, 18, 16, 12, 13, 9, 8, 11, 11, 12]);
        for (p, &n) in plan.iter().zip(&CLASS_COUNTS) {
            assert!(p.0 >= 1 && p.1 >= 1 && p.2 >= 1);
            assert!((p.2 as f64 - n as f64 / 10.0).abs() <= 3.0);
        }
    }

    #[test]
    fn small_classes() {
        assert_eq!(split_counts(&[3]).unwrap(), vec![(1, 1, 1)]);
        assert!(matches!(split_counts(&[5, 2]), Err(Error::Stratification(_))));
        for n in 3..40 {
            let plan = split_counts(&[n, n + 1, 2 * n]).unwrap();
            for (p, m) in plan.iter().zip([n, n + 1, 2 * n]) {
                assert_eq!(p.0 + p.1 + p.2, m);
                assert!(p.0 >= 1 && p.1 >= 1 && p.2 >= 1, "{n}: {p:?}");
            }
        }
    }

    #[test]
    fn samples_are_order_independent() {
        let a = generate_sample(11, 500, 3, 1024);
        let b = generate_sample(11, 500, 3, 1024);
        let c = generate_sample(11, 501, 3, 1024);
        assert_eq!(a, b);
        assert_ne!(a.waveform, c.waveform);
    }

    #[test]
    fn short_input_rejected() {
        assert!(matches!(generate(0, 512), Err(Error::Config(_))));
    }
}
