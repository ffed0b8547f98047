//! Driving noise on a uniform time grid: two independent Brownian increment
//! streams (the system noise `W` and the observation noise `Y`, both Brownian
//! under the reference measure) plus per-mark Poisson jump counts.
//!
//! Every path is generated from its own sub-stream keyed by
//! `(seed, path, stream)`, so regenerating a single path reproduces it
//! bit-exactly no matter in which order paths are visited.

use std::io::{Read, Write};

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::problem::MarkSpace;

/// Uniform partition of `[0, T]` into `n_steps` intervals.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub horizon: f64,
    pub dt: f64,
    pub nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }
}

/// Build a uniform grid with `n_steps >= 1` steps over `[0, horizon]`.
pub fn make_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    if n_steps == 0 {
        return Err(Error::InvalidArgument(
            "grid needs at least one step".into(),
        ));
    }
    let n = n_steps as f64;
    let nodes = (0..=n_steps).map(|i| (i as f64) * horizon / n).collect();
    Ok(TimeGrid {
        n_steps,
        horizon,
        dt: horizon / n,
        nodes,
    })
}

/// Discretized driving noise for a batch of Monte-Carlo paths.
///
/// `dw` and `dy` hold `N(0, dt)` increments per `[path, step]`; `jump_counts`
/// holds Poisson(`nu_i * dt`) counts per `[path, step, mark]` (stored as f64,
/// the values are exact small integers).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub dw: Array2<f64>,
    pub dy: Array2<f64>,
    pub jump_counts: Array3<f64>,
    pub seed: u64,
    pub path_count: usize,
}

const STREAM_W: u64 = 0;
const STREAM_Y: u64 = 1;
const STREAM_JUMPS: u64 = 2;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Sub-stream generator keyed by `(seed, path, stream)`.
fn path_rng(seed: u64, path: u64, stream: u64) -> ChaCha12Rng {
    let mut state = seed ^ 0x6a09e667f3bcc908;
    let mut key = [0u8; 32];
    let words = [
        splitmix64(&mut state),
        splitmix64(&mut state) ^ path,
        splitmix64(&mut state) ^ stream,
        splitmix64(&mut state),
    ];
    // one extra mixing round so (path, stream) diffuse into all key bytes
    let mut mix = words[0] ^ words[1].rotate_left(17) ^ words[2].rotate_left(41) ^ words[3];
    for chunk in key.chunks_mut(8) {
        mix = splitmix64(&mut mix);
        chunk.copy_from_slice(&mix.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Fill one path's increments and jump counts.
fn fill_path(
    seed: u64,
    path: u64,
    n_steps: usize,
    dt: f64,
    marks: &[f64],
    dw: &mut [f64],
    dy: &mut [f64],
    counts: &mut [f64],
) {
    let sqrt_dt = dt.sqrt();
    let mut rng_w = path_rng(seed, path, STREAM_W);
    for v in dw.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng_w);
        *v = z * sqrt_dt;
    }
    let mut rng_y = path_rng(seed, path, STREAM_Y);
    for v in dy.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng_y);
        *v = z * sqrt_dt;
    }
    if !marks.is_empty() {
        let mut rng_j = path_rng(seed, path, STREAM_JUMPS);
        let dists: Vec<Option<Poisson<f64>>> = marks
            .iter()
            .map(|&nu| {
                if nu * dt > 0.0 {
                    Some(Poisson::new(nu * dt).expect("positive mean"))
                } else {
                    None
                }
            })
            .collect();
        let m = marks.len();
        for step in 0..n_steps {
            for (i, dist) in dists.iter().enumerate() {
                counts[step * m + i] = match dist {
                    Some(d) => d.sample(&mut rng_j),
                    None => 0.0,
                };
            }
        }
    }
}

/// Sample a full bundle of `paths` independent noise paths.
pub fn sample_noise(
    grid: &TimeGrid,
    mark_space: &MarkSpace,
    paths: usize,
    seed: u64,
) -> Result<NoiseBundle> {
    if paths == 0 {
        return Err(Error::InvalidArgument("need at least one path".into()));
    }
    let n = grid.n_steps;
    let m = mark_space.mark_count();
    let mut dw = Array2::zeros((paths, n));
    let mut dy = Array2::zeros((paths, n));
    let mut counts = Array3::zeros((paths, n, m));
    for p in 0..paths {
        fill_path(
            seed,
            p as u64,
            n,
            grid.dt,
            &mark_space.weights,
            dw.row_mut(p).as_slice_mut().unwrap(),
            dy.row_mut(p).as_slice_mut().unwrap(),
            counts
                .index_axis_mut(ndarray::Axis(0), p)
                .as_slice_mut()
                .unwrap(),
        );
    }
    Ok(NoiseBundle {
        dw,
        dy,
        jump_counts: counts,
        seed,
        path_count: paths,
    })
}

/// Regenerate a single path of the bundle keyed by `(seed, path)`.
///
/// Returns `(dw, dy, jump_counts)` with `jump_counts` flattened `[step, mark]`
/// row-major. Bit-identical to the corresponding slices of [`sample_noise`].
pub fn regenerate_path(
    grid: &TimeGrid,
    mark_space: &MarkSpace,
    seed: u64,
    path: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = grid.n_steps;
    let m = mark_space.mark_count();
    let mut dw = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut counts = vec![0.0; n * m];
    fill_path(
        seed,
        path as u64,
        n,
        grid.dt,
        &mark_space.weights,
        &mut dw,
        &mut dy,
        &mut counts,
    );
    (dw, dy, counts)
}

const DUMP_MAGIC: &[u8; 8] = b"FBNOISE1";

impl NoiseBundle {
    /// Binary dump with a versioned header `(seed, steps, paths, marks)`.
    pub fn dump<W: Write>(&self, out: &mut W) -> Result<()> {
        let (paths, n) = self.dw.dim();
        let m = self.jump_counts.dim().2;
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&(n as u64).to_le_bytes())?;
        out.write_all(&(paths as u64).to_le_bytes())?;
        out.write_all(&(m as u64).to_le_bytes())?;
        for v in self.dw.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.dy.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in self.jump_counts.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::CorruptDump("bad magic".into()));
        }
        let mut word = [0u8; 8];
        let mut read_u64 = |input: &mut R| -> Result<u64> {
            input.read_exact(&mut word)?;
            Ok(u64::from_le_bytes(word))
        };
        let seed = read_u64(input)?;
        let n = read_u64(input)? as usize;
        let paths = read_u64(input)? as usize;
        let m = read_u64(input)? as usize;
        let read_block = |input: &mut R, len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            input.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let dw = Array2::from_shape_vec((paths, n), read_block(input, paths * n)?)
            .map_err(|e| Error::CorruptDump(e.to_string()))?;
        let dy = Array2::from_shape_vec((paths, n), read_block(input, paths * n)?)
            .map_err(|e| Error::CorruptDump(e.to_string()))?;
        let jump_counts =
            Array3::from_shape_vec((paths, n, m), read_block(input, paths * n * m)?)
                .map_err(|e| Error::CorruptDump(e.to_string()))?;
        Ok(NoiseBundle {
            dw,
            dy,
            jump_counts,
            seed,
            path_count: paths,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::MarkSpace;

    fn marks(weights: &[f64]) -> MarkSpace {
        MarkSpace::new(weights.to_vec()).unwrap()
    }

    #[test]
    fn grid_quarters() {
        let g = make_grid(1.0, 4).unwrap();
        assert_eq!(g.dt, 0.25);
        assert_eq!(g.nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn grid_single_step() {
        let g = make_grid(2.0, 1).unwrap();
        assert_eq!(g.dt, 2.0);
        assert_eq!(g.nodes, vec![0.0, 2.0]);
    }

    #[test]
    fn grid_zero_steps_rejected() {
        assert!(make_grid(1.0, 0).is_err());
        assert!(make_grid(-1.0, 4).is_err());
        assert!(make_grid(0.0, 4).is_err());
    }

    #[test]
    fn no_marks_means_no_jump_slots() {
        let g = make_grid(1.0, 8).unwrap();
        let b = sample_noise(&g, &marks(&[]), 100, 7).unwrap();
        assert_eq!(b.jump_counts.dim(), (100, 8, 0));
    }

    #[test]
    fn gaussian_increment_mean_is_centered() {
        let g = make_grid(1.0, 1).unwrap();
        let paths = 100_000;
        let b = sample_noise(&g, &marks(&[]), paths, 11).unwrap();
        let mean = b.dw.column(0).sum() / paths as f64;
        let bound = 3.0 * (g.dt / paths as f64).sqrt();
        assert!(mean.abs() < bound, "mean {mean} vs bound {bound}");
    }

    #[test]
    fn poisson_counts_match_intensity() {
        let g = make_grid(1.0, 100).unwrap();
        let paths = 100_000;
        let b = sample_noise(&g, &marks(&[2.0]), paths, 13).unwrap();
        let target = 2.0 * g.dt; // 0.02
        let mean: f64 =
            b.jump_counts.slice(ndarray::s![.., 0, 0]).sum() / paths as f64;
        let bound = 3.0 * (target / paths as f64).sqrt();
        assert!(
            (mean - target).abs() < bound,
            "mean {mean} target {target} bound {bound}"
        );
    }

    #[test]
    fn same_seed_same_bundle() {
        let g = make_grid(0.5, 16).unwrap();
        let a = sample_noise(&g, &marks(&[1.0, 0.5]), 64, 99).unwrap();
        let b = sample_noise(&g, &marks(&[1.0, 0.5]), 64, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_distinct() {
        let g = make_grid(1.0, 32).unwrap();
        let b = sample_noise(&g, &marks(&[]), 4, 123).unwrap();
        assert_ne!(b.dw, b.dy);
    }

    #[test]
    fn path_regeneration_is_order_independent() {
        let g = make_grid(1.0, 10).unwrap();
        let ms = marks(&[0.7]);
        let bundle = sample_noise(&g, &ms, 37, 2024).unwrap();
        // visit in a scrambled order
        for &p in &[36usize, 0, 17, 5, 22, 1, 36, 9] {
            let (dw, dy, counts) = regenerate_path(&g, &ms, 2024, p);
            assert_eq!(bundle.dw.row(p).to_vec(), dw);
            assert_eq!(bundle.dy.row(p).to_vec(), dy);
            let stored: Vec<f64> = bundle
                .jump_counts
                .index_axis(ndarray::Axis(0), p)
                .iter()
                .copied()
                .collect();
            assert_eq!(stored, counts);
        }
    }

    #[test]
    fn increment_variance_and_cross_correlation() {
        // pooled over paths x steps: one million samples
        let g = make_grid(1.0, 100).unwrap();
        let b = sample_noise(&g, &marks(&[]), 10_000, 5).unwrap();
        let n = b.dw.len() as f64;
        let var_w = b.dw.iter().map(|v| v * v).sum::<f64>() / n;
        let var_y = b.dy.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var_w / g.dt - 1.0).abs() < 0.01, "var_w/dt = {}", var_w / g.dt);
        assert!((var_y / g.dt - 1.0).abs() < 0.01, "var_y/dt = {}", var_y / g.dt);
        let cov = b
            .dw
            .iter()
            .zip(b.dy.iter())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n;
        let corr = cov / (var_w.sqrt() * var_y.sqrt());
        assert!(corr.abs() < 3e-3, "corr = {corr}");
    }

    #[test]
    fn dump_load_roundtrip() {
        let g = make_grid(1.0, 12).unwrap();
        let b = sample_noise(&g, &marks(&[0.4]), 25, 77).unwrap();
        let mut buf = Vec::new();
        b.dump(&mut buf).unwrap();
        let back = NoiseBundle::load(&mut buf.as_slice()).unwrap();
        assert_eq!(b, back);
    }

    #[test]
    fn load_rejects_bad_magic() {
        let mut buf = b"NOTANOIS".to_vec();
        buf.extend_from_slice(&[0u8; 64]);
        assert!(NoiseBundle::load(&mut buf.as_slice()).is_err());
    }
}
