//! Spectral normalization by power iteration.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::bilinear;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Guard for the singular-value estimate and for vector normalization.
pub const SPECTRAL_EPS: f64 = 1e-12;

/// Power-iteration state for one weight matrix viewed as `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub iterations: u64,
}

impl<T: Real> SpectralState<T> {
    /// Random unit `u`, with `v` derived from the first iteration.
    pub fn new(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let mut u: Vec<T> = (0..rows)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        if !normalize(&mut u) {
            u = vec![T::zero(); rows];
            u[0] = T::one();
        }
        let mut v = vec![T::zero(); cols];
        if cols > 0 {
            v[0] = T::one();
        }
        SpectralState {
            u,
            v,
            iterations: 0,
        }
    }

    /// Runs `n_iters` rounds of `v ← Wᵀu/‖Wᵀu‖`, `u ← Wv/‖Wv‖` on `w`
    /// (row-major `rows × cols`). A vector whose norm falls below the guard
    /// keeps its previous value so that `‖u‖ = 1` holds throughout.
    pub fn iterate(&mut self, w: &[T], n_iters: usize) -> Result<()> {
        let (rows, cols) = (self.u.len(), self.v.len());
        if w.len() != rows * cols {
            return Err(Error::Shape(format!(
                "weight with {} entries is not {rows}×{cols}",
                w.len()
            )));
        }
        if n_iters == 0 {
            return Err(Error::Param("power iteration needs at least one step".into()));
        }
        let mut v_new = vec![T::zero(); cols];
        let mut u_new = vec![T::zero(); rows];
        for _ in 0..n_iters {
            T::gemm(1, rows, cols, &self.u, false, w, false, &mut v_new, false);
            if normalize(&mut v_new) {
                self.v.copy_from_slice(&v_new);
            }
            T::gemm(rows, cols, 1, w, false, &self.v, false, &mut u_new, false);
            if normalize(&mut u_new) {
                self.u.copy_from_slice(&u_new);
            }
            self.iterations += 1;
        }
        Ok(())
    }

    /// Current estimate `σ̂ = uᵀ W v`, floored at the guard.
    pub fn sigma(&self, w: &[T]) -> T {
        bilinear(w, &self.u, &self.v).max(T::lit(SPECTRAL_EPS))
    }
}

fn normalize<T: Real>(x: &mut [T]) -> bool {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    if !(norm > T::lit(SPECTRAL_EPS)) {
        return false;
    }
    x.iter_mut().for_each(|v| *v = *v / norm);
    true
}

/// Updates `state` with `n_iters` power iterations on `w` (first axis = rows)
/// and returns `w / σ̂`.
pub fn spectral_normalize<T: Real>(
    w: &Tensor<T>,
    state: &mut SpectralState<T>,
    n_iters: usize,
) -> Result<Tensor<T>> {
    state.iterate(w.data(), n_iters)?;
    let sigma = state.sigma(w.data());
    Ok(w.map(|x| x / sigma))
}
