//! Temporal scales over an observed prefix and per-scale frame sampling.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ObservedPrefix;
use crate::error::{Error, Result};
use crate::numkit::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Full,
    Equal,
    Random,
    Increasing,
    Decreasing,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Full,
        Strategy::Equal,
        Strategy::Random,
        Strategy::Increasing,
        Strategy::Decreasing,
    ];
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Full => "full",
            Strategy::Equal => "equal",
            Strategy::Random => "random",
            Strategy::Increasing => "increasing",
            Strategy::Decreasing => "decreasing",
        };
        f.write_str(s)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown scale strategy '{s}'")))
    }
}

/// Half-open frame range `[start, end)` inside the observed prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSet {
    pub strategy: Strategy,
    pub n: usize,
    pub t_rho: usize,
    pub windows: Vec<Window>,
    /// Per-scale sorted frame indices; empty until [`ScaleSet::sample`].
    pub sampled: Vec<Vec<usize>>,
}

/// `⌈(i/n)·T_ρ⌉` in exact integer arithmetic.
pub fn progressive_len(i: usize, n: usize, t_rho: usize) -> usize {
    (i * t_rho).div_ceil(n)
}

pub fn build_scales(t_rho: usize, n: usize, strategy: Strategy, rng: &mut impl Rng) -> Result<ScaleSet> {
    if t_rho == 0 || n == 0 {
        return Err(Error::Config(format!(
            "scales need T_rho >= 1 and n >= 1, got T_rho={t_rho}, n={n}"
        )));
    }
    let windows = match strategy {
        Strategy::Full => vec![Window { start: 0, end: t_rho }; n],
        Strategy::Increasing => (1..=n)
            .map(|i| Window {
                start: 0,
                end: progressive_len(i, n, t_rho),
            })
            .collect(),
        Strategy::Decreasing => (1..=n)
            .map(|i| Window {
                start: t_rho - progressive_len(i, n, t_rho),
                end: t_rho,
            })
            .collect(),
        Strategy::Equal => (0..n)
            .map(|i| {
                let start = progressive_len(i, n, t_rho);
                let end = progressive_len(i + 1, n, t_rho);
                if end > start {
                    Window { start, end }
                } else {
                    // more scales than frames: a single-frame window
                    let s = start.min(t_rho - 1);
                    Window { start: s, end: s + 1 }
                }
            })
            .collect(),
        Strategy::Random => (0..n)
            .map(|_| {
                let len = rng.random_range(1..=t_rho);
                let start = rng.random_range(0..=t_rho - len);
                Window { start, end: start + len }
            })
            .collect(),
    };
    Ok(ScaleSet {
        strategy,
        n,
        t_rho,
        windows,
        sampled: Vec::new(),
    })
}

/// Draws `f` sorted frame indices from `window`.
///
/// Windows at least `f` long are sampled without replacement. Shorter
/// windows repeat their frames round-robin until `f` indices exist.
pub fn sample_frames(window: Window, f: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if window.is_empty() || f == 0 {
        return Err(Error::Config(format!(
            "cannot sample {f} frames from window {}..{}",
            window.start, window.end
        )));
    }
    let len = window.len();
    let mut idx: Vec<usize> = if len >= f {
        index::sample(rng, len, f).into_iter().map(|k| window.start + k).collect()
    } else {
        (0..f).map(|k| window.start + k % len).collect()
    };
    idx.sort_unstable();
    Ok(idx)
}

impl ScaleSet {
    pub fn sample(&mut self, f: usize, rng: &mut impl Rng) -> Result<()> {
        self.sampled = self
            .windows
            .iter()
            .map(|&w| sample_frames(w, f, rng))
            .collect::<Result<_>>()?;
        Ok(())
    }
}

/// Stacks each scale's sampled frames into an `F×H×W×C` volume.
pub fn gather_inputs(prefix: &ObservedPrefix<'_>, scales: &ScaleSet) -> Result<Vec<Tensor>> {
    if scales.sampled.len() != scales.windows.len() {
        return Err(Error::Config("scale set has not been sampled".into()));
    }
    let d = prefix.clip.dims;
    scales
        .sampled
        .iter()
        .map(|indices| {
            let mut data = Vec::with_capacity(indices.len() * d.frame_len());
            for &t in indices {
                let frame = prefix.frame(t).ok_or_else(|| {
                    Error::Dimension(format!(
                        "internal: frame {t} outside the observed prefix of {} frames",
                        prefix.t_rho
                    ))
                })?;
                data.extend(frame.iter().map(|&v| v as f64));
            }
            Tensor::new(vec![indices.len(), d.h, d.w, d.channels], data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn lens(s: &ScaleSet) -> Vec<usize> {
        s.windows.iter().map(Window::len).collect()
    }

    #[test]
    fn increasing_example() {
        let s = build_scales(10, 4, Strategy::Increasing, &mut rng()).unwrap();
        assert_eq!(lens(&s), vec![3, 5, 8, 10]);
        assert!(s.windows.iter().all(|w| w.start == 0));
        let one = build_scales(10, 1, Strategy::Increasing, &mut rng()).unwrap();
        assert_eq!(one.windows, vec![Window { start: 0, end: 10 }]);
    }

    #[test]
    fn equal_partition() {
        let s = build_scales(7, 4, Strategy::Equal, &mut rng()).unwrap();
        assert_eq!(lens(&s), vec![2, 2, 2, 1]);
        assert_eq!(s.windows[0].start, 0);
        assert_eq!(s.windows[3].end, 7);
        // n > T_rho keeps every window sampleable
        let s = build_scales(2, 4, Strategy::Equal, &mut rng()).unwrap();
        assert!(s.windows.iter().all(|w| w.len() == 1 && w.end <= 2));
    }

    #[test]
    fn full_and_random() {
        let s = build_scales(9, 3, Strategy::Full, &mut rng()).unwrap();
        assert!(s.windows.iter().all(|w| *w == Window { start: 0, end: 9 }));
        let s = build_scales(9, 50, Strategy::Random, &mut rng()).unwrap();
        assert!(s.windows.iter().all(|w| w.len() >= 1 && w.end <= 9));
    }

    #[test]
    fn zero_sizes_rejected() {
        assert!(build_scales(0, 2, Strategy::Full, &mut rng()).is_err());
        assert!(build_scales(4, 0, Strategy::Full, &mut rng()).is_err());
    }

    #[test]
    fn short_window_round_robin() {
        let idx = sample_frames(Window { start: 0, end: 3 }, 16, &mut rng()).unwrap();
        assert_eq!(idx.len(), 16);
        let counts: Vec<_> = (0..3).map(|k| idx.iter().filter(|&&i| i == k).count()).collect();
        assert_eq!(counts, vec![6, 5, 5]);
        assert!(idx.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn exact_and_long_windows() {
        let idx = sample_frames(Window { start: 4, end: 20 }, 16, &mut rng()).unwrap();
        assert_eq!(idx, (4..20).collect::<Vec<_>>());
        let idx = sample_frames(Window { start: 0, end: 100 }, 16, &mut rng()).unwrap();
        assert_eq!(idx.len(), 16);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| i < 100));
    }
}
