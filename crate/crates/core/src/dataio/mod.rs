//! Labeled video clips, the synthetic generator, the TPRV container and
//! observation-ratio clipping.

mod format;
mod synth;

pub use format::{manifest_path, read_dataset, write_dataset, MAGIC, VERSION};
pub use synth::{generate_synthetic, Motion, Shape, SynthConfig, MOTIONS, SHAPES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frame volume dimensions shared by every clip of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
}

impl ClipDims {
    pub fn frame_len(&self) -> usize {
        self.h * self.w * self.channels
    }

    pub fn clip_len(&self) -> usize {
        self.t * self.frame_len()
    }
}

/// One labeled video: a `T×H×W×C` volume with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub id: String,
    pub label: usize,
    pub dims: ClipDims,
    pub frames: Vec<f32>,
}

impl VideoClip {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.dims.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn mean_frame(&self) -> Vec<f64> {
        let n = self.dims.frame_len();
        let mut mean = vec![0.0; n];
        for t in 0..self.dims.t {
            for (m, &v) in mean.iter_mut().zip(self.frame(t)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.dims.t as f64);
        mean
    }
}

/// The first `t_rho` frames of a clip.
#[derive(Debug, Clone, Copy)]
pub struct ObservedPrefix<'a> {
    pub clip: &'a VideoClip,
    pub rho: f64,
    pub t_rho: usize,
}

impl ObservedPrefix<'_> {
    pub fn frames(&self) -> &[f32] {
        &self.clip.frames[..self.t_rho * self.clip.dims.frame_len()]
    }

    pub fn frame(&self, t: usize) -> Option<&[f32]> {
        (t < self.t_rho).then(|| self.clip.frame(t))
    }
}

/// `⌈ρ·T⌉`, robust to the representation error of decimal ratios such as 0.1.
pub fn observed_frames(rho: f64, t: usize) -> usize {
    let x = rho * t as f64;
    let nearest = x.round();
    let ceil = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (ceil as usize).clamp(1, t.max(1))
}

pub fn clip_to_ratio(clip: &VideoClip, rho: f64) -> Result<ObservedPrefix<'_>> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!(
            "observation ratio must lie strictly between 0 and 1, got {rho}"
        )));
    }
    Ok(ObservedPrefix {
        clip,
        rho,
        t_rho: observed_frames(rho, clip.dims.t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// JSON sidecar describing a TPRV payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub clip_count: usize,
    pub dims: ClipDims,
    pub seed: u64,
    pub clip_ids: Vec<String>,
    pub splits: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<VideoClip>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }

    pub fn dims(&self) -> ClipDims {
        self.manifest.dims
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .splits
            .iter()
            .enumerate()
            .filter_map(|(i, s)| (*s == split).then_some(i))
            .collect()
    }

    /// Keeps the listed clips, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let clips: Vec<_> = indices.iter().map(|&i| self.clips[i].clone()).collect();
        let manifest = DatasetManifest {
            clip_count: clips.len(),
            clip_ids: indices.iter().map(|&i| self.manifest.clip_ids[i].clone()).collect(),
            splits: indices.iter().map(|&i| self.manifest.splits[i]).collect(),
            ..self.manifest.clone()
        };
        Dataset { manifest, clips }
    }

    /// Checks the manifest against the clips it describes.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.clip_count != self.clips.len() || m.clip_ids.len() != self.clips.len() || m.splits.len() != self.clips.len() {
            return Err(Error::Format(format!(
                "manifest lists {} clips ({} ids, {} splits) but payload has {}",
                m.clip_count,
                m.clip_ids.len(),
                m.splits.len(),
                self.clips.len()
            )));
        }
        for clip in &self.clips {
            if clip.dims != m.dims || clip.frames.len() != m.dims.clip_len() {
                return Err(Error::Format(format!("clip {} does not match manifest dims", clip.id)));
            }
            if clip.label >= m.class_names.len() {
                return Err(Error::Format(format!(
                    "clip {} has label {} but only {} classes exist",
                    clip.id,
                    clip.label,
                    m.class_names.len()
                )));
            }
        }
        Ok(())
    }
}
