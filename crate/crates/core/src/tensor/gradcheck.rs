//! Central finite-difference oracle for reverse-mode gradients.
//!
//! Only forward evaluations of the loss are used here, so the check is
//! independent of every backward rule in [`super::Graph`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Cap on perturbed entries per parameter tensor; `None` checks all.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Gradient pairs whose larger norm is below this are treated as both
    /// zero; finite differences cannot resolve smaller magnitudes.
    pub zero_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries: None,
            seed: 0,
            zero_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked
    /// entries; zero when both fall below the zero floor.
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn entries(&self) -> usize {
        self.params.iter().map(|p| p.entries).sum()
    }
}

/// Compares `analytic` against `(f(w+h) − f(w−h)) / 2h` for each parameter.
pub fn check_gradients<F>(
    store: &ParamStore,
    analytic: &Gradients,
    mut loss: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let idx: Vec<usize> = match opts.max_entries {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let a = analytic.get(id).data();
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for &j in &idx {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + opts.step;
            let fp = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig - opts.step;
            let fm = loss(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            let num = (fp - fm) / (2.0 * opts.step);
            diff += (a[j] - num).powi(2);
            an += a[j] * a[j];
            nn += num * num;
        }
        let (diff, an, nn) = (diff.sqrt(), an.sqrt(), nn.sqrt());
        let denom = an.max(nn);
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            entries: idx.len(),
            analytic_norm: an,
            numeric_norm: nn,
            rel_error: if denom < opts.zero_floor { 0.0 } else { diff / denom },
        });
    }
    Ok(GradCheckReport { params })
}
