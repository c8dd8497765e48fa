use super::Utterance;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Target padding value.
pub const PAD_TARGET: usize = usize::MAX;

/// Padded group of utterances.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, T0_max, d_f]`, zero padded.
    pub features: Tensor,
    pub feat_lens: Vec<usize>,
    /// `B` rows of `U_max` ids padded with [`PAD_TARGET`].
    pub targets: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `true` on valid frames of member `i`.
    pub fn frame_mask(&self, i: usize) -> Vec<bool> {
        let t_max = self.features.shape()[1];
        (0..t_max).map(|t| t < self.feat_lens[i]).collect()
    }

    /// Valid features and targets of member `i`.
    pub fn member(&self, i: usize) -> (Tensor, Vec<usize>) {
        let s = self.features.shape();
        let (t_max, d) = (s[1], s[2]);
        let start = i * t_max * d;
        let data = self.features.data()[start..start + self.feat_lens[i] * d].to_vec();
        let feats = Tensor::new(vec![self.feat_lens[i], d], data).expect("valid slice");
        (feats, self.targets[i][..self.target_lens[i]].to_vec())
    }
}

/// Groups `data` into padded batches, optionally ordered by frame count
/// (stable, so ties keep corpus order).
pub fn batch(data: &[Utterance], batch_size: usize, sort_by_length: bool) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    if sort_by_length {
        order.sort_by_key(|&i| data[i].num_frames());
    }
    let d = data.iter().map(|u| u.features.shape()[1]).max().unwrap_or(0);
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let t_max = chunk.iter().map(|&i| data[i].num_frames()).max().unwrap_or(0);
        let u_max = chunk.iter().map(|&i| data[i].targets.len()).max().unwrap_or(0);
        let mut feats = vec![0.0; chunk.len() * t_max * d];
        let mut targets = Vec::with_capacity(chunk.len());
        for (b, &i) in chunk.iter().enumerate() {
            let u = &data[i];
            if u.num_frames() > 0 && u.features.shape()[1] != d {
                return Err(Error::Schema(format!(
                    "{}: feature width {} differs from {d}",
                    u.id,
                    u.features.shape()[1]
                )));
            }
            let dst = b * t_max * d;
            feats[dst..dst + u.features.numel()].copy_from_slice(u.features.data());
            let mut y = u.targets.clone();
            y.resize(u_max, PAD_TARGET);
            targets.push(y);
        }
        out.push(Batch {
            ids: chunk.iter().map(|&i| data[i].id.clone()).collect(),
            features: Tensor::new(vec![chunk.len(), t_max, d], feats)?,
            feat_lens: chunk.iter().map(|&i| data[i].num_frames()).collect(),
            targets,
            target_lens: chunk.iter().map(|&i| data[i].targets.len()).collect(),
        });
    }
    Ok(out)
}
