use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::DatasetManifest;

/// One action sample: coordinates indexed `[channel, frame, joint, body]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonClip {
    pub data: Tensor<f64>,
    pub label: usize,
    /// Frames before loop padding.
    pub valid_frames: usize,
}

impl SkeletonClip {
    pub fn new(data: Tensor<f64>, label: usize, valid_frames: usize) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::shape("SkeletonClip", "[C, T, V, M]", data.shape()));
        }
        if valid_frames > data.shape()[1] {
            return Err(Error::invalid(
                "SkeletonClip",
                format!("valid_frames {valid_frames} exceeds {} frames", data.shape()[1]),
            ));
        }
        if !data.all_finite() {
            return Err(Error::NonFinite { op: "SkeletonClip" });
        }
        Ok(SkeletonClip { data, label, valid_frames })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn bodies(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn at(&self, c: usize, t: usize, v: usize, m: usize) -> f64 {
        self.data.at(&[c, t, v, m])
    }
}

/// Clips together with their manifest; `clips[i]` belongs to `manifest.entries[i]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<SkeletonClip>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    /// Dimensions `(C, T, V, M)` shared by every clip, if consistent.
    pub fn dims(&self) -> Result<[usize; 4]> {
        let first = self.clips.first().ok_or_else(|| Error::invalid("Dataset", "empty dataset"))?;
        let d: [usize; 4] = first.data.shape().try_into().expect("4-d clip");
        if let Some(c) = self.clips.iter().find(|c| c.data.shape() != d) {
            return Err(Error::shape("Dataset", d, c.data.shape()));
        }
        Ok(d)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            manifest: DatasetManifest {
                entries: indices.iter().map(|&i| self.manifest.entries[i].clone()).collect(),
                num_classes: self.manifest.num_classes,
            },
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
        }
    }

    pub fn map_clips(&self, mut f: impl FnMut(&SkeletonClip) -> Result<SkeletonClip>) -> Result<Dataset> {
        Ok(Dataset {
            manifest: self.manifest.clone(),
            clips: self.clips.iter().map(&mut f).collect::<Result<_>>()?,
        })
    }
}
