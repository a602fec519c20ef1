//! Gray-Scott reaction-diffusion model on a periodic 2-D grid:
//! `u_t = Du lap(u) - u v^2 + f (1-u)`, `v_t = Dv lap(v) + u v^2 - (f+k) v`,
//! advanced by forward Euler with the 5-point Laplacian.
//!
//! The Laplacian uses unit cell spacing: with the classical coefficient set
//! (Du=0.16, Dv=0.08, dt=1) the diffusion number is 0.16 < 0.25, which is
//! what makes the explicit scheme stable. `box_size` is recorded as metadata
//! for the physical extent but does not enter the stencil.

use crate::corpus::{
    CorpusMetadata, FieldSnapshot, Problem, SnapshotCorpus, CORPUS_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GSConfig {
    pub box_size: f64,
    pub mesh: (usize, usize),
    pub dt_solver: f64,
    pub n_steps: usize,
    pub save_every: usize,
    pub du: f64,
    pub dv: f64,
    pub f: f64,
    pub k: f64,
    /// Side length of the central square crop stored in the corpus.
    pub crop: usize,
    pub seed_radius_cells: usize,
    pub noise_sigma: f64,
    /// Instability guard bounds on both species.
    pub blowup_low: f64,
    pub blowup_high: f64,
}

impl Default for GSConfig {
    fn default() -> Self {
        GSConfig {
            box_size: 2.5,
            mesh: (256, 256),
            dt_solver: 1.0,
            n_steps: 3000,
            save_every: 25,
            du: 0.16,
            dv: 0.08,
            f: 0.035,
            k: 0.060,
            crop: 128,
            seed_radius_cells: 20,
            noise_sigma: 0.05,
            blowup_low: -0.5,
            blowup_high: 1.5,
        }
    }
}

impl GSConfig {
    pub fn dt_koopman(&self) -> f64 {
        self.dt_solver * self.save_every as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.du <= 0.0 || self.dv <= 0.0 {
            return Err(Error::InvalidConfig("diffusivities must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.f) || !(0.0..1.0).contains(&self.k) {
            return Err(Error::InvalidConfig(
                "reaction coefficients must lie in [0, 1)".into(),
            ));
        }
        if self.crop > self.mesh.0 || self.crop > self.mesh.1 {
            return Err(Error::InvalidConfig(
                "crop must not exceed the mesh extent".into(),
            ));
        }
        if self.save_every == 0 || self.n_steps % self.save_every != 0 {
            return Err(Error::InvalidConfig(
                "n_steps must be a positive multiple of save_every".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform `(u,v) = (1,0)` with a seeded disc at the grid center:
/// `(0.5, 0.25)` plus Gaussian noise on both species, clipped to `[0,1]`.
pub fn gs_initial_fields(config: &GSConfig, rng_seed: u64) -> (Array2<f64>, Array2<f64>) {
    let (nx, ny) = config.mesh;
    let mut u = Array2::from_elem((nx, ny), 1.0);
    let mut v = Array2::zeros((nx, ny));
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, config.noise_sigma.max(0.0)).unwrap();
    let cx = (nx as f64 - 1.0) / 2.0;
    let cy = (ny as f64 - 1.0) / 2.0;
    let r2 = (config.seed_radius_cells as f64).powi(2);
    for i in 0..nx {
        for j in 0..ny {
            let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2);
            if d2 <= r2 {
                let (nu, nv) = if config.noise_sigma > 0.0 {
                    (normal.sample(&mut rng), normal.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                u[[i, j]] = (0.5 + nu).clamp(0.0, 1.0);
                v[[i, j]] = (0.25 + nv).clamp(0.0, 1.0);
            }
        }
    }
    (u, v)
}

pub fn gs_initial_condition(config: &GSConfig, rng_seed: u64) -> FieldSnapshot {
    let (u, v) = gs_initial_fields(config, rng_seed);
    FieldSnapshot::from_f64(stack_uv(&u, &v), 0)
}

fn stack_uv(u: &Array2<f64>, v: &Array2<f64>) -> ArrayD<f64> {
    let (nx, ny) = u.dim();
    let mut out = ArrayD::zeros(IxDyn(&[nx, ny, 2]));
    for i in 0..nx {
        for j in 0..ny {
            out[[i, j, 0]] = u[[i, j]];
            out[[i, j, 1]] = v[[i, j]];
        }
    }
    out
}

#[inline]
fn lap_at(s: &Array2<f64>, i: usize, j: usize, nx: usize, ny: usize) -> f64 {
    let im = if i == 0 { nx - 1 } else { i - 1 };
    let ip = if i + 1 == nx { 0 } else { i + 1 };
    let jm = if j == 0 { ny - 1 } else { j - 1 };
    let jp = if j + 1 == ny { 0 } else { j + 1 };
    s[[im, j]] + s[[ip, j]] + s[[i, jm]] + s[[i, jp]] - 4.0 * s[[i, j]]
}

/// One forward-Euler step; fails if either species leaves the guard band.
pub fn gs_step(
    u: &Array2<f64>,
    v: &Array2<f64>,
    config: &GSConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let (nx, ny) = u.dim();
    assert_eq!(v.dim(), (nx, ny), "species grids must match");
    let dt = config.dt_solver;
    let mut u2 = Array2::zeros((nx, ny));
    let mut v2 = Array2::zeros((nx, ny));
    let mut ok = true;
    for i in 0..nx {
        for j in 0..ny {
            let uu = u[[i, j]];
            let vv = v[[i, j]];
            let uvv = uu * vv * vv;
            let un = uu + dt * (config.du * lap_at(u, i, j, nx, ny) - uvv + config.f * (1.0 - uu));
            let vn =
                v[[i, j]] + dt * (config.dv * lap_at(v, i, j, nx, ny) + uvv - (config.f + config.k) * vv);
            ok &= un.is_finite()
                && vn.is_finite()
                && un >= config.blowup_low
                && un <= config.blowup_high
                && vn >= config.blowup_low
                && vn <= config.blowup_high;
            u2[[i, j]] = un;
            v2[[i, j]] = vn;
        }
    }
    if !ok {
        let max = u2
            .iter()
            .chain(v2.iter())
            .fold(0.0_f64, |a, &x| a.max(x.abs()));
        return Err(Error::SolverBlowup {
            step: 0,
            max,
            bound: config.blowup_high,
        });
    }
    Ok((u2, v2))
}

fn crop_center(s: &Array2<f64>, crop: usize) -> Array2<f64> {
    let (nx, ny) = s.dim();
    let (sx, sy) = ((nx - crop) / 2, (ny - crop) / 2);
    s.slice(s![sx..sx + crop, sy..sy + crop]).to_owned()
}

/// Integrate the model and record the central `crop x crop` region of every
/// `save_every`-th state (two channels, starting with the initial condition).
pub fn generate_gs_corpus(config: &GSConfig, rng_seed: u64) -> Result<SnapshotCorpus> {
    config.validate()?;
    let (mut u, mut v) = gs_initial_fields(config, rng_seed);
    let mut snapshots = Vec::with_capacity(config.n_steps / config.save_every);
    for step in 0..config.n_steps {
        if step % config.save_every == 0 {
            let cu = crop_center(&u, config.crop);
            let cv = crop_center(&v, config.crop);
            snapshots.push(FieldSnapshot::from_f64(stack_uv(&cu, &cv), snapshots.len()));
        }
        match gs_step(&u, &v, config) {
            Ok((un, vn)) => {
                u = un;
                v = vn;
            }
            Err(Error::SolverBlowup { max, bound, .. }) => {
                return Err(Error::SolverBlowup { step, max, bound })
            }
            Err(e) => return Err(e),
        }
    }
    let metadata = CorpusMetadata {
        format_version: CORPUS_FORMAT_VERSION,
        problem: Problem::Gs,
        n_snapshots: snapshots.len(),
        shape: vec![config.crop, config.crop, 2],
        dt_solver: config.dt_solver,
        dt_koopman: config.dt_koopman(),
        save_every: config.save_every,
        rng_seed,
        dx: 1.0,
        config_echo: toml::to_string(config).map_err(|e| Error::Metadata(e.to_string()))?,
    };
    SnapshotCorpus::from_snapshots(snapshots, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn initial_condition_geometry() {
        let cfg = GSConfig::default();
        let (u, v) = gs_initial_fields(&cfg, 1);
        assert_eq!(u[[0, 0]], 1.0);
        assert_eq!(v[[0, 0]], 0.0);
        let quiet = GSConfig {
            noise_sigma: 0.0,
            ..GSConfig::default()
        };
        let (u0, v0) = gs_initial_fields(&quiet, 1);
        assert_abs_diff_eq!(u0[[128, 128]], 0.5, epsilon = 0.0);
        assert_abs_diff_eq!(v0[[128, 128]], 0.25, epsilon = 0.0);
    }

    #[test]
    fn initial_condition_is_reproducible() {
        let cfg = GSConfig::default();
        let a = gs_initial_fields(&cfg, 42);
        let b = gs_initial_fields(&cfg, 42);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        let c = gs_initial_fields(&cfg, 43);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn homogeneous_equilibrium_is_fixed() {
        let cfg = GSConfig {
            mesh: (32, 32),
            ..GSConfig::default()
        };
        let u = Array2::from_elem((32, 32), 1.0);
        let v = Array2::zeros((32, 32));
        let (u2, v2) = gs_step(&u, &v, &cfg).unwrap();
        assert_eq!(u2, u);
        assert_eq!(v2, v);
    }

    #[test]
    fn diffusion_conserves_the_mean() {
        let cfg = GSConfig {
            mesh: (64, 64),
            f: 0.0,
            k: 0.0,
            ..GSConfig::default()
        };
        let u = Array2::from_shape_fn((64, 64), |(i, j)| {
            0.5 + 0.3 * ((i as f64 * 0.37).sin() * (j as f64 * 0.61).cos())
        });
        let v = Array2::zeros((64, 64));
        let (u2, _) = gs_step(&u, &v, &cfg).unwrap();
        let drift = (u2.mean().unwrap() - u.mean().unwrap()).abs();
        assert!(drift <= 1e-10, "mean drift {drift:.2e}");
    }

    #[test]
    fn step_matches_direct_stencil_oracle() {
        // independent straightforward loop with modulo indexing
        let cfg = GSConfig {
            mesh: (16, 16),
            ..GSConfig::default()
        };
        let mut u = Array2::from_elem((16, 16), 0.9);
        let mut v = Array2::from_elem((16, 16), 0.1);
        u[[7, 4]] = 0.2;
        v[[3, 11]] = 0.6;
        let (u2, v2) = gs_step(&u, &v, &cfg).unwrap();
        for i in 0..16usize {
            for j in 0..16usize {
                let lap = |s: &Array2<f64>| {
                    s[[(i + 15) % 16, j]] + s[[(i + 1) % 16, j]] + s[[i, (j + 15) % 16]]
                        + s[[i, (j + 1) % 16]]
                        - 4.0 * s[[i, j]]
                };
                let uvv = u[[i, j]] * v[[i, j]] * v[[i, j]];
                let eu = u[[i, j]] + cfg.dt_solver * (cfg.du * lap(&u) - uvv + cfg.f * (1.0 - u[[i, j]]));
                let ev = v[[i, j]]
                    + cfg.dt_solver * (cfg.dv * lap(&v) + uvv - (cfg.f + cfg.k) * v[[i, j]]);
                assert_abs_diff_eq!(u2[[i, j]], eu, epsilon = 1e-13);
                assert_abs_diff_eq!(v2[[i, j]], ev, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn stepper_commutes_with_rotation() {
        let cfg = GSConfig {
            mesh: (24, 24),
            ..GSConfig::default()
        };
        let u = Array2::from_shape_fn((24, 24), |(i, j)| {
            0.6 + 0.3 * ((i as f64 * 0.9).sin() * (j as f64 * 0.4).cos())
        });
        let v = Array2::from_shape_fn((24, 24), |(i, j)| {
            0.3 + 0.2 * ((i as f64 * 0.3).cos() + (j as f64 * 0.8).sin()) / 2.0
        });
        let (si, sj) = (5usize, 17usize);
        let rot =
            |s: &Array2<f64>| Array2::from_shape_fn((24, 24), |(i, j)| s[[(i + si) % 24, (j + sj) % 24]]);
        let (u2, v2) = gs_step(&u, &v, &cfg).unwrap();
        let (u2r, v2r) = gs_step(&rot(&u), &rot(&v), &cfg).unwrap();
        let du = (&u2r - &rot(&u2)).iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
        let dv = (&v2r - &rot(&v2)).iter().fold(0.0_f64, |a, &x| a.max(x.abs()));
        assert!(du <= 1e-10 && dv <= 1e-10, "rotation equivariance {du:.2e} {dv:.2e}");
    }

    #[test]
    fn crop_semantics() {
        let cfg = GSConfig {
            mesh: (32, 32),
            crop: 16,
            n_steps: 50,
            save_every: 25,
            seed_radius_cells: 4,
            ..GSConfig::default()
        };
        let corpus = generate_gs_corpus(&cfg, 7).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.metadata.shape, vec![16, 16, 2]);
        assert_abs_diff_eq!(corpus.metadata.dt_koopman, 25.0, epsilon = 0.0);

        let full = GSConfig {
            crop: 32,
            ..cfg.clone()
        };
        let c2 = generate_gs_corpus(&full, 7).unwrap();
        assert_eq!(c2.metadata.shape, vec![32, 32, 2]);
        // the cropped corpus is the center of the uncropped one
        let a = corpus.snapshot(0).values;
        let b = c2.snapshot(0).values;
        for i in 0..16usize {
            for j in 0..16usize {
                for c in 0..2usize {
                    assert_eq!(a[[i, j, c]], b[[i + 8, j + 8, c]]);
                }
            }
        }
    }
}
