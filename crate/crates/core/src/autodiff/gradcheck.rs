//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
    }

    fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.max_abs_error = self.max_abs_error.max((analytic - numeric).abs());
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(rel);
            self.worst = Some((input, index, analytic, numeric));
        }
        self.checked += 1;
    }
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences at step `h`. When `sample_per_input` is set, only that many
/// randomly chosen entries of each input are perturbed.
pub fn check_gradients<F, R>(inputs: &[Tensor], f: F, h: f64, sample_per_input: Option<usize>, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match sample_per_input {
            Some(s) if s < input.numel() => sample(rng, input.numel(), s).into_vec(),
            _ => (0..input.numel()).collect(),
        };
        for idx in entries {
            let x0 = input.data()[idx];
            work[k].data_mut()[idx] = x0 + h;
            let up = eval(&work)?;
            work[k].data_mut()[idx] = x0 - h;
            let down = eval(&work)?;
            work[k].data_mut()[idx] = x0;
            report.record(k, idx, analytic[k].data()[idx], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}
