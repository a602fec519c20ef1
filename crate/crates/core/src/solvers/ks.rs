//! Kuramoto-Sivashinsky equation on a periodic 1-D domain,
//! `u_t + u u_x + u_xx + u_xxxx = 0`, integrated with CNAB2 timestepping:
//! the stiff linear terms advance by Crank-Nicolson, the advective term by
//! second-order Adams-Bashforth. The implicit solve is diagonal in Fourier
//! space, which is exact on a periodic grid.

use crate::corpus::{
    CorpusMetadata, FieldSnapshot, Problem, SnapshotCorpus, CORPUS_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use ndarray::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KSConfig {
    pub domain_length: f64,
    pub dx: f64,
    pub dt_solver: f64,
    pub n_steps: usize,
    pub save_every: usize,
    /// Instability guard: a step whose max |u| exceeds this fails.
    pub blowup_bound: f64,
}

impl Default for KSConfig {
    fn default() -> Self {
        KSConfig {
            domain_length: 128.0,
            dx: 0.125,
            dt_solver: 1.0 / 16.0,
            n_steps: 4800,
            save_every: 4,
            blowup_bound: 1e3,
        }
    }
}

impl KSConfig {
    pub fn n_points(&self) -> usize {
        (self.domain_length / self.dx).round() as usize
    }

    pub fn dt_koopman(&self) -> f64 {
        self.dt_solver * self.save_every as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.dx <= 0.0 || self.dt_solver <= 0.0 || self.domain_length <= 0.0 {
            return Err(Error::InvalidConfig(
                "KS grid and time step must be positive".into(),
            ));
        }
        let n = self.domain_length / self.dx;
        if (n - n.round()).abs() > 1e-9 || n.round() < 4.0 {
            return Err(Error::InvalidConfig(format!(
                "domain_length/dx = {n} is not an integer grid size"
            )));
        }
        if self.save_every == 0 || self.n_steps % self.save_every != 0 {
            return Err(Error::InvalidConfig(
                "n_steps must be a positive multiple of save_every".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form initial condition `cos(x) + 0.1 cos(x/16) (1 + 2 sin(x/16))`.
pub fn ks_initial_value(x: f64) -> f64 {
    x.cos() + 0.1 * (x / 16.0).cos() * (1.0 + 2.0 * (x / 16.0).sin())
}

/// Initial condition sampled at `x_i = i dx`.
pub fn ks_initial_profile(config: &KSConfig) -> Array1<f64> {
    Array1::from_shape_fn(config.n_points(), |i| ks_initial_value(i as f64 * config.dx))
}

pub fn ks_initial_condition(config: &KSConfig) -> FieldSnapshot {
    let u = ks_initial_profile(config);
    FieldSnapshot::from_f64(u.view().insert_axis(Axis(1)).to_owned().into_dyn(), 0)
}

/// Spectral CNAB2 stepper; holds FFT plans and the linear symbol.
pub struct KsStepper {
    n: usize,
    dt: f64,
    blowup_bound: f64,
    /// sigma(k) = k^2 - k^4, the symbol of -(d2 + d4).
    sigma: Vec<f64>,
    /// -0.5 i k (zeroed at Nyquist) for N(u) = -(u^2/2)_x.
    ik_half: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl KsStepper {
    pub fn new(config: &KSConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_points();
        let length = config.domain_length;
        let mut planner = FftPlanner::<f64>::new();
        let mut sigma = vec![0.0; n];
        let mut ik_half = vec![Complex::new(0.0, 0.0); n];
        for (j, s) in sigma.iter_mut().enumerate() {
            let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            let k = 2.0 * std::f64::consts::PI * m / length;
            *s = k * k - k.powi(4);
            // odd derivative: drop the unpaired Nyquist mode
            if n % 2 == 0 && j == n / 2 {
                ik_half[j] = Complex::new(0.0, 0.0);
            } else {
                ik_half[j] = Complex::new(0.0, -0.5 * k);
            }
        }
        Ok(KsStepper {
            n,
            dt: config.dt_solver,
            blowup_bound: config.blowup_bound,
            sigma,
            ik_half,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        })
    }

    fn fft(&self, x: &Array1<f64>) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.fwd.process(&mut buf);
        buf
    }

    fn ifft_re(&self, mut buf: Vec<Complex<f64>>) -> Array1<f64> {
        self.inv.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        Array1::from_iter(buf.iter().map(|c| c.re * scale))
    }

    /// Advective term `N(u) = -u u_x`, evaluated spectrally as `-(u^2/2)_x`.
    pub fn nonlinear(&self, u: &Array1<f64>) -> Array1<f64> {
        let mut w = self.fft(&(u * u));
        for (c, ik) in w.iter_mut().zip(&self.ik_half) {
            *c *= ik;
        }
        self.ifft_re(w)
    }

    /// One CNAB2 step. `prev_nonlinear` is `N(u)` from the previous step; for
    /// the first step pass `N(u0)` itself, which reduces the Adams-Bashforth
    /// combination to an explicit-Euler (CNAB1) bootstrap.
    pub fn step(
        &self,
        state: &Array1<f64>,
        prev_nonlinear: &Array1<f64>,
        step_index: usize,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        assert_eq!(state.len(), self.n, "state length");
        assert_eq!(prev_nonlinear.len(), self.n, "nonlinear history length");
        let n_now = self.nonlinear(state);
        let combined = 1.5 * &n_now - 0.5 * prev_nonlinear;
        let u_hat = self.fft(state);
        let c_hat = self.fft(&combined);
        let half_dt = 0.5 * self.dt;
        let mut out = vec![Complex::new(0.0, 0.0); self.n];
        for j in 0..self.n {
            let s = self.sigma[j];
            out[j] = ((1.0 + half_dt * s) * u_hat[j] + self.dt * c_hat[j]) / (1.0 - half_dt * s);
        }
        let u_new = self.ifft_re(out);
        let max = u_new.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
        if !max.is_finite() || max > self.blowup_bound {
            return Err(Error::SolverBlowup {
                step: step_index,
                max,
                bound: self.blowup_bound,
            });
        }
        Ok((u_new, n_now))
    }
}

/// One CNAB2 step as a standalone operation (plans FFTs on every call; use
/// [`KsStepper`] for long integrations).
pub fn ks_step(
    state: &Array1<f64>,
    prev_nonlinear: &Array1<f64>,
    config: &KSConfig,
) -> Result<(Array1<f64>, Array1<f64>)> {
    KsStepper::new(config)?.step(state, prev_nonlinear, 0)
}

/// Integrate the default-or-given configuration and record every
/// `save_every`-th state, starting with the initial condition. The produced
/// corpus has `n_steps / save_every` snapshots of shape `[n_points, 1]`.
pub fn generate_ks_corpus(config: &KSConfig) -> Result<SnapshotCorpus> {
    let stepper = KsStepper::new(config)?;
    let mut u = ks_initial_profile(config);
    let mut prev_n = stepper.nonlinear(&u);
    let mut snapshots: Vec<FieldSnapshot> = Vec::with_capacity(config.n_steps / config.save_every);
    for step in 0..config.n_steps {
        if step % config.save_every == 0 {
            snapshots.push(FieldSnapshot::from_f64(
                u.view().insert_axis(Axis(1)).to_owned().into_dyn(),
                snapshots.len(),
            ));
        }
        let (u_new, n_now) = stepper.step(&u, &prev_n, step)?;
        u = u_new;
        prev_n = n_now;
    }
    let metadata = CorpusMetadata {
        format_version: CORPUS_FORMAT_VERSION,
        problem: Problem::Ks,
        n_snapshots: snapshots.len(),
        shape: vec![config.n_points(), 1],
        dt_solver: config.dt_solver,
        dt_koopman: config.dt_koopman(),
        save_every: config.save_every,
        rng_seed: 0,
        dx: config.dx,
        config_echo: toml::to_string(config).map_err(|e| Error::Metadata(e.to_string()))?,
    };
    SnapshotCorpus::from_snapshots(snapshots, metadata)
}
