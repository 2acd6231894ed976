use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SampleSource {
    Path(String),
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub source: SampleSource,
    pub label: usize,
    pub subject: u32,
    pub camera: u32,
    pub setup: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub num_classes: usize,
}

/// How samples are assigned to train and test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// Standard NTU training subjects.
    CrossSubject,
    /// Cameras 2 and 3 train, camera 1 tests.
    CrossView,
    /// Even setup ids train.
    CrossSetup,
    /// Class-stratified random hold-out.
    Random { test_fraction: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const NTU_TRAIN_SUBJECTS: [u32; 20] = [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38];

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.label >= self.num_classes) {
            return Err(Error::invalid(
                "DatasetManifest",
                format!("sample {} has label {} but there are {} classes", e.id, e.label, self.num_classes),
            ));
        }
        Ok(())
    }

    pub fn split(&self, rule: &SplitRule) -> Result<Split> {
        self.validate()?;
        let by = |is_train: &dyn Fn(&ManifestEntry) -> bool| {
            let (train, test): (Vec<usize>, Vec<usize>) = (0..self.entries.len()).partition(|&i| is_train(&self.entries[i]));
            Split { train, test }
        };
        Ok(match rule {
            SplitRule::CrossSubject => by(&|e| NTU_TRAIN_SUBJECTS.contains(&e.subject)),
            SplitRule::CrossView => by(&|e| e.camera == 2 || e.camera == 3),
            SplitRule::CrossSetup => by(&|e| e.setup % 2 == 0),
            SplitRule::Random { test_fraction, seed } => {
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(Error::invalid("split", format!("test fraction {test_fraction} not in [0, 1)")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut train = Vec::new();
                let mut test = Vec::new();
                for class in 0..self.num_classes {
                    let mut members: Vec<usize> = (0..self.entries.len()).filter(|&i| self.entries[i].label == class).collect();
                    members.shuffle(&mut rng);
                    let n_test = (members.len() as f64 * test_fraction).round() as usize;
                    test.extend_from_slice(&members[..n_test]);
                    train.extend_from_slice(&members[n_test..]);
                }
                train.sort_unstable();
                test.sort_unstable();
                Split { train, test }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(i: usize, label: usize, subject: u32, camera: u32, setup: u32) -> ManifestEntry {
        ManifestEntry {
            id: format!("s{i}"),
            source: SampleSource::Synthetic { seed: i as u64 },
            label,
            subject,
            camera,
            setup,
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let m = DatasetManifest {
            entries: (0..40)
                .map(|i| entry(i, i % 4, (i % 40) as u32 + 1, (i % 3) as u32 + 1, (i % 5) as u32 + 1))
                .collect(),
            num_classes: 4,
        };
        for rule in [
            SplitRule::CrossSubject,
            SplitRule::CrossView,
            SplitRule::CrossSetup,
            SplitRule::Random {
                test_fraction: 0.25,
                seed: 3,
            },
        ] {
            let s = m.split(&rule).unwrap();
            assert_eq!(s.train.len() + s.test.len(), 40);
            assert!(s.train.iter().all(|i| !s.test.contains(i)));
        }
        let s = m
            .split(&SplitRule::Random {
                test_fraction: 0.25,
                seed: 3,
            })
            .unwrap();
        for c in 0..4 {
            assert_eq!(s.test.iter().filter(|&&i| m.entries[i].label == c).count(), 3);
        }
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let m = DatasetManifest {
            entries: vec![entry(0, 5, 1, 1, 1)],
            num_classes: 2,
        };
        assert!(m.validate().is_err());
    }
}
