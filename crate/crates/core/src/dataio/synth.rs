//! Moving-shape videos whose class combines an early cue and a late cue.
//!
//! The object is drawn as one of several outlines during the first
//! `⌈T/4⌉` frames and as a plain disc afterwards, so the shape is only
//! visible early. All motions share the same opening drift; afterwards the
//! object either keeps sweeping right, sweeps out and back at double speed,
//! falls, or falls and bounces back. Sweep/return and fall/bounce visit the
//! same pixels with the same frequency, so the time-averaged frame does not
//! separate them.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClipDims, Dataset, DatasetManifest, Split, VideoClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Square,
    Plus,
    Ring,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Motion {
    Sweep,
    SweepReturn,
    Fall,
    FallBounce,
}

pub const SHAPES: [Shape; 4] = [Shape::Square, Shape::Plus, Shape::Ring, Shape::Cross];
pub const MOTIONS: [Motion; 4] = [Motion::Sweep, Motion::SweepReturn, Motion::Fall, Motion::FallBounce];

const NOISE_STD: f64 = 0.05;
const VAL_FRACTION: f64 = 0.2;

impl Shape {
    fn covers(self, dx: i64, dy: i64, r: i64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            Shape::Square => ax <= r && ay <= r,
            Shape::Plus => (ax <= r && ay == 0) || (ay <= r && ax == 0),
            Shape::Ring => ax.max(ay) == r,
            Shape::Cross => ax == ay && ax <= r,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Plus => "plus",
            Shape::Ring => "ring",
            Shape::Cross => "cross",
        }
    }
}

impl Motion {
    fn name(self) -> &'static str {
        match self {
            Motion::Sweep => "sweep",
            Motion::SweepReturn => "sweep-return",
            Motion::Fall => "fall",
            Motion::FallBounce => "fall-bounce",
        }
    }

    /// Normalized object centre at progress `s ∈ [0,1]` from start `(x0, y0)`.
    fn position(self, s: f64, x0: f64, y0: f64) -> (f64, f64) {
        const OPENING: f64 = 0.25;
        if s <= OPENING {
            return (x0 + 0.4 * s, y0);
        }
        let u = (s - OPENING) / (1.0 - OPENING);
        let tri = if u <= 0.5 { 2.0 * u } else { 2.0 - 2.0 * u };
        let (px, py) = (x0 + 0.1, y0);
        match self {
            Motion::Sweep => (px + 0.45 * u, py),
            Motion::SweepReturn => (px + 0.45 * tri, py),
            Motion::Fall => (px, py + 0.5 * u),
            Motion::FallBounce => (px, py + 0.5 * tri),
        }
    }
}

/// Class `c` pairs shape `c / 4` with motion `c % 4`.
pub fn class_factors(class: usize) -> (Shape, Motion) {
    (SHAPES[class / MOTIONS.len()], MOTIONS[class % MOTIONS.len()])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(num_classes: usize, clips_per_class: usize, t: usize, h: usize, w: usize, seed: u64) -> Self {
        SynthConfig {
            num_classes,
            clips_per_class,
            t,
            h,
            w,
            channels: 1,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let max_classes = SHAPES.len() * MOTIONS.len();
        if !(2..=max_classes).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={max_classes}, got {}",
                self.num_classes
            )));
        }
        if self.t < 8 {
            return Err(Error::Config(format!("T must be at least 8, got {}", self.t)));
        }
        if self.h < 8 || self.w < 8 || self.channels == 0 {
            return Err(Error::Config(format!(
                "frames must be at least 8x8 with a channel, got {}x{}x{}",
                self.h, self.w, self.channels
            )));
        }
        Ok(())
    }
}

fn render(
    cfg: &SynthConfig,
    shape: Shape,
    motion: Motion,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> Vec<f32> {
    let dims = ClipDims {
        t: cfg.t,
        h: cfg.h,
        w: cfg.w,
        channels: cfg.channels,
    };
    let x0 = rng.random_range(0.15..0.25);
    let y0 = rng.random_range(0.2..0.3);
    let radius = ((cfg.h.min(cfg.w) as f64 / 8.0).round() as i64).max(1);
    let early_frames = cfg.t.div_ceil(4);
    let mut frames = vec![0.0f32; dims.clip_len()];
    for t in 0..cfg.t {
        let s = t as f64 / (cfg.t - 1) as f64;
        let (px, py) = motion.position(s, x0, y0);
        let cx = (px * (cfg.w - 1) as f64).round() as i64;
        let cy = (py * (cfg.h - 1) as f64).round() as i64;
        for y in 0..cfg.h {
            for x in 0..cfg.w {
                let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                let on = if t < early_frames {
                    shape.covers(dx, dy, radius)
                } else {
                    dx * dx + dy * dy <= radius * radius
                };
                let base = if on { 1.0 } else { 0.0 };
                for c in 0..cfg.channels {
                    let v = (base + noise.sample(rng)).clamp(0.0, 1.0);
                    frames[((t * cfg.h + y) * cfg.w + x) * cfg.channels + c] = v as f32;
                }
            }
        }
    }
    frames
}

/// Renders `num_classes × clips_per_class` clips with an 80/20 stratified split.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let dims = ClipDims {
        t: cfg.t,
        h: cfg.h,
        w: cfg.w,
        channels: cfg.channels,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid noise");
    let mut clips = Vec::with_capacity(cfg.num_classes * cfg.clips_per_class);
    for class in 0..cfg.num_classes {
        let (shape, motion) = class_factors(class);
        for k in 0..cfg.clips_per_class {
            clips.push(VideoClip {
                id: format!("c{class:02}-{k:04}"),
                label: class,
                dims,
                frames: render(cfg, shape, motion, &mut rng, &noise),
            });
        }
    }

    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut splits = vec![Split::Train; clips.len()];
    let n_val = (cfg.clips_per_class as f64 * VAL_FRACTION).round() as usize;
    for class in 0..cfg.num_classes {
        let mut members: Vec<usize> = (0..cfg.clips_per_class).map(|k| class * cfg.clips_per_class + k).collect();
        members.shuffle(&mut split_rng);
        for &i in &members[..n_val] {
            splits[i] = Split::Val;
        }
    }

    let class_names = (0..cfg.num_classes)
        .map(|c| {
            let (s, m) = class_factors(c);
            format!("{}-{}", s.name(), m.name())
        })
        .collect();
    let manifest = DatasetManifest {
        version: super::VERSION,
        class_names,
        clip_count: clips.len(),
        dims,
        seed: cfg.seed,
        clip_ids: clips.iter().map(|c| c.id.clone()).collect(),
        splits,
    };
    Ok(Dataset { manifest, clips })
}
