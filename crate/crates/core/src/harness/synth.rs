//! Synthetic tubular scenes: bright branching curves on a dark textured
//! background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::data::Sample;
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const NOISE_STD: f32 = 0.05;
const MIN_FOREGROUND: f64 = 0.006;
const MAX_FOREGROUND: f64 = 0.18;

type Point = (f64, f64);

fn bezier(p0: Point, p1: Point, p2: Point, t: f64) -> Point {
    let u = 1.0 - t;
    (
        u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
        u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
    )
}

/// Marks the `width x width` block around every pixel the curve passes.
fn rasterize(mask: &mut [bool], size: usize, p0: Point, p1: Point, p2: Point, width: usize) {
    let len = {
        let d = |a: Point, b: Point| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        d(p0, p1) + d(p1, p2)
    };
    let steps = (len * 4.0).ceil().max(1.0) as usize;
    let lo = -((width as isize - 1) / 2);
    let hi = lo + width as isize;
    for s in 0..=steps {
        let (r, c) = bezier(p0, p1, p2, s as f64 / steps as f64);
        let (ri, ci) = (r.round() as isize, c.round() as isize);
        for dr in lo..hi {
            for dc in lo..hi {
                let (y, x) = (ri + dr, ci + dc);
                if y >= 0 && x >= 0 && (y as usize) < size && (x as usize) < size {
                    mask[y as usize * size + x as usize] = true;
                }
            }
        }
    }
}

fn random_point(rng: &mut ChaCha8Rng, size: f64) -> Point {
    (rng.gen_range(0.0..size), rng.gen_range(0.0..size))
}

/// A point on the image border.
fn border_point(rng: &mut ChaCha8Rng, size: f64) -> Point {
    let t = rng.gen_range(0.0..size);
    match rng.gen_range(0..4) {
        0 => (0.0, t),
        1 => (size - 1.0, t),
        2 => (t, 0.0),
        _ => (t, size - 1.0),
    }
}

/// One vessel tree: a main curve and up to two thinner branches.
fn draw_tree(rng: &mut ChaCha8Rng, size: usize) -> Vec<bool> {
    let s = size as f64;
    let mut mask = vec![false; size * size];
    let width = rng.gen_range(1..=3usize);
    let p0 = border_point(rng, s);
    let p2 = random_point(rng, s);
    let p1 = random_point(rng, s);
    rasterize(&mut mask, size, p0, p1, p2, width);
    for _ in 0..rng.gen_range(0..=2) {
        let start = bezier(p0, p1, p2, rng.gen_range(0.3..0.8));
        let end = random_point(rng, s);
        let mid = random_point(rng, s);
        let mid = ((start.0 + end.0 + mid.0) / 3.0, (start.1 + end.1 + mid.1) / 3.0);
        rasterize(&mut mask, size, start, mid, end, width.saturating_sub(1).max(1));
    }
    mask
}

fn fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// Generates one scene from its own stream.
fn synth_one(seed: u64, index: u64, size: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let n = size * size;
    let wanted = rng.gen_range(2..=5usize);
    let mut mask = vec![false; n];
    let mut trees = 0;
    let mut attempts = 0;
    while (trees < wanted || fraction(&mask) < MIN_FOREGROUND) && attempts < 64 {
        attempts += 1;
        let tree = draw_tree(&mut rng, size);
        let merged: Vec<bool> = mask.iter().zip(&tree).map(|(&a, &b)| a || b).collect();
        if fraction(&merged) <= MAX_FOREGROUND {
            mask = merged;
            trees += 1;
        }
    }

    let s = size as f32;
    let base: f32 = rng.gen_range(0.12..0.22);
    let contrast: f32 = rng.gen_range(0.4..0.6);
    let tint = [1.0f32, rng.gen_range(0.75..0.95), rng.gen_range(0.55..0.8)];
    // low-frequency texture: a few random plane waves
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let k = rng.gen_range(1.0..4.0) * std::f32::consts::TAU / s;
            let th: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            (k * th.cos(), k * th.sin(), rng.gen_range(0.0..std::f32::consts::TAU), rng.gen_range(0.01..0.04))
        })
        .collect();
    let center = (s - 1.0) / 2.0;
    let mut intensity = vec![0.0f32; n];
    for (p, v) in intensity.iter_mut().enumerate() {
        let (i, j) = ((p / size) as f32, (p % size) as f32);
        let texture: f32 = waves.iter().map(|&(ky, kx, ph, a)| a * (ky * i + kx * j + ph).sin()).sum();
        let r2 = ((i - center).powi(2) + (j - center).powi(2)) / (center * center * 2.0);
        let vignette = 1.0 - 0.4 * r2;
        let signal = base + texture + if mask[p] { contrast } else { 0.0 };
        *v = signal * vignette;
    }
    let mut image = vec![0.0f32; 3 * n];
    for c in 0..3 {
        for p in 0..n {
            let z: f32 = rng.sample(StandardNormal);
            image[c * n + p] = (intensity[p] * tint[c] + NOISE_STD * z).clamp(0.0, 1.0);
        }
    }
    let mask: Vec<f32> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Sample {
        image: Tensor::from_parts(vec![3, size, size], image),
        mask: Tensor::from_parts(vec![1, size, size], mask),
        fov: None,
        id: format!("synth_{seed}_{index:04}"),
    }
}

/// `count` scenes of `size x size` pixels; deterministic for a seed.
pub fn synth_vessels(seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("synthetic size {size} must be a positive multiple of 32")));
    }
    Ok((0..count as u64).map(|i| synth_one(seed, i, size)).collect())
}
