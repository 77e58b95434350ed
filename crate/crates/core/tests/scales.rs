use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempr::dataio::{clip_to_ratio, generate_synthetic, SynthConfig};
use tempr::scales::{build_scales, gather_inputs, sample_frames, Strategy, Window};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lens(t_rho: usize, n: usize, s: Strategy) -> Vec<usize> {
    build_scales(t_rho, n, s, &mut rng(0)).unwrap().windows.iter().map(Window::len).collect()
}

/// Smallest `m` with `m·n ≥ i·T`, found by counting up.
fn ceil_by_search(i: usize, n: usize, t: usize) -> usize {
    let mut m = 0;
    while m * n < i * t {
        m += 1;
    }
    m
}

#[test]
fn increasing_matches_integer_oracle() {
    for t_rho in 1..=100 {
        for n in 1..=8 {
            let set = build_scales(t_rho, n, Strategy::Increasing, &mut rng(0)).unwrap();
            for (k, w) in set.windows.iter().enumerate() {
                assert_eq!(*w, Window { start: 0, end: ceil_by_search(k + 1, n, t_rho) });
            }
            let dec = build_scales(t_rho, n, Strategy::Decreasing, &mut rng(0)).unwrap();
            for (a, b) in set.windows.iter().zip(&dec.windows) {
                assert_eq!(a.len(), b.len());
                assert_eq!(b.end, t_rho);
                // time reversal t ↦ T_ρ − t maps one window onto the other
                assert_eq!((t_rho - b.end, t_rho - b.start), (a.start, a.end));
            }
        }
    }
}

#[test]
fn window_examples() {
    assert_eq!(lens(10, 4, Strategy::Increasing), vec![3, 5, 8, 10]);
    assert_eq!(lens(10, 1, Strategy::Increasing), vec![10]);
    let mut eq = lens(7, 4, Strategy::Equal);
    eq.sort_unstable();
    assert_eq!(eq, vec![1, 2, 2, 2]);
    assert_eq!(lens(6, 3, Strategy::Full), vec![6, 6, 6]);
}

/// Minimum over all compositions of `t` into `n` positive parts of `max − min`.
fn best_spread(t: usize, n: usize) -> usize {
    fn go(left: usize, parts: usize, lo: usize, hi: usize, best: &mut usize) {
        if parts == 0 {
            if left == 0 {
                *best = (*best).min(hi - lo);
            }
            return;
        }
        for p in 1..=left {
            go(left - p, parts - 1, lo.min(p), hi.max(p), best);
        }
    }
    let mut best = usize::MAX;
    go(t, n, usize::MAX, 0, &mut best);
    best
}

#[test]
fn equal_is_maximally_even() {
    for t in 1..=12 {
        for n in 1..=t.min(5) {
            let l = lens(t, n, Strategy::Equal);
            assert_eq!(l.iter().sum::<usize>(), t);
            let spread = l.iter().max().unwrap() - l.iter().min().unwrap();
            assert_eq!(spread, best_spread(t, n), "T={t} n={n}");
        }
    }
}

#[test]
fn equal_windows_are_contiguous() {
    let set = build_scales(23, 5, Strategy::Equal, &mut rng(0)).unwrap();
    assert_eq!(set.windows[0].start, 0);
    for w in set.windows.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    assert_eq!(set.windows.last().unwrap().end, 23);
}

#[test]
fn short_window_round_robin() {
    let idx = sample_frames(Window { start: 0, end: 3 }, 16, &mut rng(1)).unwrap();
    assert_eq!(idx.len(), 16);
    let mut counts = BTreeMap::new();
    for i in &idx {
        *counts.entry(*i).or_insert(0) += 1;
    }
    assert_eq!(counts.into_iter().collect::<Vec<_>>(), vec![(0, 6), (1, 5), (2, 5)]);
    assert!(idx.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn exact_and_long_windows() {
    let idx = sample_frames(Window { start: 4, end: 20 }, 16, &mut rng(2)).unwrap();
    assert_eq!(idx, (4..20).collect::<Vec<_>>());
    let idx = sample_frames(Window { start: 0, end: 100 }, 16, &mut rng(3)).unwrap();
    assert_eq!(idx.len(), 16);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert!(idx.iter().all(|&i| i < 100));
    assert!(sample_frames(Window { start: 2, end: 2 }, 4, &mut rng(0)).is_err());
}

#[test]
fn gather_examples() {
    let ds = generate_synthetic(&SynthConfig::new(2, 1, 32, 8, 8, 0)).unwrap();
    let mut zero = ds.clips[0].clone();
    zero.frames.iter_mut().for_each(|v| *v = 0.0);
    let prefix = clip_to_ratio(&zero, 0.5).unwrap();
    let mut set = build_scales(prefix.t_rho, 4, Strategy::Increasing, &mut rng(0)).unwrap();
    set.sample(16, &mut rng(0)).unwrap();
    let xs = gather_inputs(&prefix, &set).unwrap();
    assert_eq!(xs.len(), 4);
    for x in &xs {
        assert_eq!(x.shape, vec![16, 8, 8, 1]);
        assert!(x.data.iter().all(|&v| v == 0.0));
    }

    let clip = &ds.clips[1];
    let prefix = clip_to_ratio(clip, 0.1).unwrap();
    let mut set = build_scales(prefix.t_rho, 2, Strategy::Increasing, &mut rng(0)).unwrap();
    set.sample(8, &mut rng(0)).unwrap();
    let xs = gather_inputs(&prefix, &set).unwrap();
    let frame = 64;
    for (x, idx) in xs.iter().zip(&set.sampled) {
        for (slot, &t) in idx.iter().enumerate() {
            let got: Vec<f64> = x.data[slot * frame..(slot + 1) * frame].to_vec();
            let want: Vec<f64> = clip.frame(t).iter().map(|&v| f64::from(v)).collect();
            assert_eq!(got, want);
        }
        for pair in idx.windows(2).filter(|p| p[0] == p[1]) {
            let s = idx.iter().position(|&i| i == pair[0]).unwrap();
            assert_eq!(x.data[s * frame..(s + 1) * frame], x.data[(s + 1) * frame..(s + 2) * frame]);
        }
    }
}

#[test]
fn unsampled_set_rejected() {
    let ds = generate_synthetic(&SynthConfig::new(2, 1, 16, 8, 8, 0)).unwrap();
    let prefix = clip_to_ratio(&ds.clips[0], 0.5).unwrap();
    let set = build_scales(prefix.t_rho, 2, Strategy::Full, &mut rng(0)).unwrap();
    assert!(gather_inputs(&prefix, &set).is_err());
}

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop::sample::select(Strategy::ALL.to_vec())
}

proptest! {
    #[test]
    fn windows_inside_prefix(t_rho in 1usize..200, n in 1usize..10, s in strategy(), seed in 0u64..1000) {
        let set = build_scales(t_rho, n, s, &mut rng(seed)).unwrap();
        prop_assert_eq!(set.windows.len(), n);
        for w in &set.windows {
            prop_assert!(w.start < w.end && w.end <= t_rho);
        }
        if matches!(s, Strategy::Increasing | Strategy::Decreasing | Strategy::Full) {
            prop_assert_eq!(set.windows[n - 1], Window { start: 0, end: t_rho });
        }
        if matches!(s, Strategy::Increasing | Strategy::Decreasing) {
            prop_assert!(set.windows.windows(2).all(|p| p[0].len() <= p[1].len()));
        }
    }

    #[test]
    fn samples_sorted_inside_window(start in 0usize..50, len in 1usize..60, f in 1usize..20, seed in 0u64..1000) {
        let w = Window { start, end: start + len };
        let idx = sample_frames(w, f, &mut rng(seed)).unwrap();
        prop_assert_eq!(idx.len(), f);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(idx.iter().all(|&i| i >= w.start && i < w.end));
        if len >= f {
            prop_assert!(idx.windows(2).all(|p| p[0] < p[1]));
        } else {
            for k in w.start..w.end {
                let c = idx.iter().filter(|&&i| i == k).count();
                prop_assert!(c == f / len || c == f / len + 1);
            }
        }
    }

    #[test]
    fn sampling_deterministic_per_seed(t_rho in 1usize..64, n in 1usize..6, seed in 0u64..1000) {
        let mut a = build_scales(t_rho, n, Strategy::Random, &mut rng(seed)).unwrap();
        let mut b = build_scales(t_rho, n, Strategy::Random, &mut rng(seed)).unwrap();
        a.sample(8, &mut rng(seed + 1)).unwrap();
        b.sample(8, &mut rng(seed + 1)).unwrap();
        prop_assert_eq!(a, b);
    }
}
