//! Deterministic synthetic cohorts with planted, grade-dependent signal.
//!
//! Each grade `g` owns a cluster mean `μ_g = (separation / √2) · e_g`, where
//! `e_0..e_4` are random orthonormal directions, so every pair of means is
//! exactly `separation` apart. A grade-`g` slide with `N` tiles has
//! `round(signal_fraction[g] · N)` signal tiles at random positions drawn
//! from `μ_g + N(0, noise_std² I)`; the rest are pure `N(0, noise_std² I)`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{EmbeddingBag, NhiGrade, TileRef};
use crate::embedding::EmbeddingStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub cases_per_grade: [usize; 5],
    /// Inclusive range of slides per case.
    pub slides_per_case: (usize, usize),
    /// Inclusive range of tiles per slide.
    pub tiles_per_slide: (usize, usize),
    pub dim: usize,
    pub signal_fraction: [f64; 5],
    pub cluster_separation: f64,
    pub noise_std: f64,
    /// Center tags, assigned to cases round-robin.
    pub centers: Vec<String>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            cases_per_grade: [30; 5],
            slides_per_case: (1, 1),
            tiles_per_slide: (20, 40),
            dim: 64,
            signal_fraction: [0.2; 5],
            cluster_separation: 10.0,
            noise_std: 1.0,
            centers: vec!["synthetic".into()],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Invalid(format!("synthetic spec: {m}")));
        if self.dim < 5 {
            return fail(format!("dim {} cannot hold five orthogonal cluster means", self.dim));
        }
        if self.signal_fraction.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return fail("signal fractions must lie in [0, 1]".into());
        }
        if !(self.cluster_separation > 0.0) || !(self.noise_std >= 0.0) {
            return fail("separation must be positive and noise_std nonnegative".into());
        }
        let (a, b) = self.slides_per_case;
        let (c, d) = self.tiles_per_slide;
        if a == 0 || a > b || c == 0 || c > d {
            return fail("slide and tile ranges must be nonempty and positive".into());
        }
        if self.centers.is_empty() {
            return fail("at least one center tag is required".into());
        }
        Ok(())
    }
}

/// A generated store plus, per bag, which tiles carry planted signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub store: EmbeddingStore,
    pub signal: Vec<Vec<bool>>,
    pub means: Vec<Vec<f64>>,
}

impl SyntheticData {
    /// Sidecar table: `slide_id tile_index x y signal`.
    pub fn signal_tsv(&self) -> String {
        let mut out = String::from("slide_id\ttile_index\tx\ty\tsignal\n");
        for (bag, flags) in self.store.bags.iter().zip(&self.signal) {
            for (i, (t, &s)) in bag.tiles.iter().zip(flags).enumerate() {
                let _ = writeln!(out, "{}\t{i}\t{}\t{}\t{}", bag.slide_id, t.x, t.y, s as u8);
            }
        }
        out
    }
}

fn orthonormal_directions(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let scale = spec.cluster_separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = orthonormal_directions(&mut rng, 5, d)
        .into_iter()
        .map(|u| u.into_iter().map(|x| x * scale).collect())
        .collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;

    let mut store = EmbeddingStore::new(d);
    let mut signal = Vec::new();
    let mut case_index = 0usize;
    for (g, &n_cases) in spec.cases_per_grade.iter().enumerate() {
        let grade = NhiGrade::new(g as u8)?;
        for k in 0..n_cases {
            let case_id = format!("case-g{g}-{k:03}");
            let center = spec.centers[case_index % spec.centers.len()].clone();
            case_index += 1;
            let n_slides = rng.random_range(spec.slides_per_case.0..=spec.slides_per_case.1);
            for s in 0..n_slides {
                let slide_id = format!("{case_id}-s{s}");
                let n = rng.random_range(spec.tiles_per_slide.0..=spec.tiles_per_slide.1);
                let n_signal = (spec.signal_fraction[g] * n as f64).round() as usize;
                let mut flags = vec![false; n];
                flags[..n_signal].iter_mut().for_each(|f| *f = true);
                flags.shuffle(&mut rng);

                let cols = (n as f64).sqrt().ceil() as usize;
                let mut tiles = Vec::with_capacity(n);
                let mut embeddings = Vec::with_capacity(n * d);
                for (i, &is_signal) in flags.iter().enumerate() {
                    tiles.push(TileRef {
                        slide_id: slide_id.clone(),
                        level: 1,
                        x: (i % cols) as u32 * 224,
                        y: (i / cols) as u32 * 224,
                        width: 224,
                        height: 224,
                        microns_per_pixel: 0.52,
                    });
                    for j in 0..d {
                        let base = if is_signal { means[g][j] } else { 0.0 };
                        embeddings.push((base + noise.sample(&mut rng)) as f32);
                    }
                }
                store.push(EmbeddingBag {
                    slide_id,
                    case_id: case_id.clone(),
                    center: center.clone(),
                    label: grade,
                    profile: "T1".into(),
                    dim: d,
                    tiles,
                    embeddings,
                })?;
                signal.push(flags);
            }
        }
    }
    Ok(SyntheticData { store, signal, means })
}
