//! Label maps, procedural datasets, splits and segmentation metrics.

pub mod disk;
pub mod metrics;
pub mod split;
pub mod synth;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::tensor::Tensor;

pub use metrics::{dice, miou, Confusion, MiouReport};
pub use split::{mean_std, one_shot_indices, one_shot_split, MeanStd};
pub use synth::{generate, ShapeKind, SynthSpec};

/// Integer class labels laid out `N×H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub ignore_index: Option<u32>,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(
        n: usize,
        h: usize,
        w: usize,
        classes: usize,
        ignore_index: Option<u32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        if labels.len() != n * h * w {
            return Err(Error::shape("label_map", format!("{} labels for {n}x{h}x{w}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes && Some(l) != ignore_index) {
            return Err(Error::Label { label: bad, classes });
        }
        Ok(LabelMap { n, h, w, classes, ignore_index, labels })
    }

    pub fn same_layout(&self, other: &LabelMap) -> Result<()> {
        if (self.n, self.h, self.w) != (other.n, other.h, other.w) {
            return Err(Error::shape(
                "label_map",
                format!("{}x{}x{} vs {}x{}x{}", self.n, self.h, self.w, other.n, other.h, other.w),
            ));
        }
        Ok(())
    }

    /// Concatenates maps along the batch axis.
    pub fn stack(items: &[&LabelMap]) -> Result<LabelMap> {
        let first = items.first().ok_or(Error::Empty("label stack"))?;
        let mut labels = Vec::new();
        let mut n = 0;
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("label_map", "spatial size differs within batch"));
            }
            labels.extend_from_slice(&m.labels);
            n += m.n;
        }
        LabelMap::new(n, first.h, first.w, first.classes, first.ignore_index, labels)
    }

    /// Per-pixel argmax of `N×K×H×W` scores.
    pub fn argmax(scores: &Tensor, ignore_index: Option<u32>) -> Result<LabelMap> {
        let (n, k, h, w) = scores.dims4()?;
        let plane = h * w;
        let d = scores.data();
        let mut labels = Vec::with_capacity(n * plane);
        for b in 0..n {
            for px in 0..plane {
                let mut best = 0;
                for c in 1..k {
                    if d[(b * k + c) * plane + px] > d[(b * k + best) * plane + px] {
                        best = c;
                    }
                }
                labels.push(best as u32);
            }
        }
        LabelMap::new(n, h, w, k, ignore_index, labels)
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `1×3×H×W` image.
    pub image: Tensor,
    /// `1×H×W` labels.
    pub label: LabelMap,
}

/// Generated samples; the first `spec.train` are the training split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.spec.train.min(self.samples.len())
    }

    pub fn val_indices(&self) -> std::ops::Range<usize> {
        self.spec.train.min(self.samples.len())..self.samples.len()
    }

    pub fn train_labels(&self) -> impl Iterator<Item = &LabelMap> {
        self.samples[self.train_indices()].iter().map(|s| &s.label)
    }

    /// Stacks the selected samples into an image batch and a label batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, LabelMap)> {
        let images: Vec<Tensor> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        let labels: Vec<&LabelMap> = indices.iter().map(|&i| &self.samples[i].label).collect();
        Ok((Tensor::stack_batch(&images)?, LabelMap::stack(&labels)?))
    }

    /// SHA-256 over every sample in the on-disk entry encoding.
    pub fn sha256(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            buf.clear();
            checkpoint::write_entry(&mut buf, &format!("img_{i:05}"), &s.image, checkpoint::DType::F64)?;
            checkpoint::write_entry(&mut buf, &format!("lab_{i:05}"), &disk::label_tensor(&s.label)?, checkpoint::DType::F32)?;
            hasher.update(&buf);
        }
        Ok(hex(&hasher.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(LabelMap::new(1, 1, 2, 3, None, vec![0, 3]).is_err());
        assert!(LabelMap::new(1, 1, 2, 3, Some(255), vec![0, 255]).is_ok());
        assert!(LabelMap::new(1, 1, 2, 3, None, vec![0]).is_err());
    }

    #[test]
    fn argmax_picks_first_max() {
        let s = Tensor::new(vec![1, 3, 1, 2], vec![0.2, 0.5, 0.7, 0.5, 0.1, 0.0]).unwrap();
        assert_eq!(LabelMap::argmax(&s, None).unwrap().labels, vec![1, 0]);
    }
}
