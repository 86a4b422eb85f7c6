//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for everything the tape computes: it only
//! ever runs the forward pass (twice per probed coordinate), so it shares no
//! code path with [`Tape::backward`]. Block contributors should run their
//! forward rule through [`check_gradients`] before registering a block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{GradientMap, Result, Tape, Tensor};

/// Which coordinates of each parameter to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probe {
    /// Every coordinate of every parameter.
    All,
    /// A fixed number of randomly chosen coordinates per parameter.
    Sample(usize),
}

/// One gradient mismatch, reported with enough context to reproduce.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Checks `d loss / d params` against central finite differences.
///
/// `loss_fn` must rebuild the scalar loss from the given parameter tensors
/// every time it is called; the parameters keep their identity across calls,
/// so the analytic gradient from one recorded pass can be compared against
/// differences of perturbed forward passes.
pub fn check_gradients(
    params: &[Tensor],
    loss_fn: &mut dyn FnMut(&mut Tape, &[Tensor]) -> Result<Tensor>,
    h: f64,
    rel_tol: f64,
    probe: Probe,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    let grads: GradientMap = tape.backward(&loss)?;

    let mut report = GradCheckReport::default();
    for (pi, p) in params.iter().enumerate() {
        let pid = p.param_id().expect("check_gradients expects parameter tensors");
        let analytic = grads.get(pid).map(|t| t.values().to_vec()).unwrap_or_else(|| vec![0.0; p.numel()]);
        let coords: Vec<usize> = match probe {
            Probe::All => (0..p.numel()).collect(),
            Probe::Sample(n) => (0..n.min(p.numel())).map(|_| rng.random_range(0..p.numel())).collect(),
        };
        for coord in coords {
            let numeric = central_difference(params, pi, coord, h, loss_fn)?;
            let err = rel_err(analytic[coord], numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if err > rel_tol {
                report.failures.push(GradMismatch {
                    param: pi,
                    coord,
                    analytic: analytic[coord],
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

/// `(f(x + h e) - f(x - h e)) / 2h` for one parameter coordinate.
pub fn central_difference(
    params: &[Tensor],
    param: usize,
    coord: usize,
    h: f64,
    loss_fn: &mut dyn FnMut(&mut Tape, &[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let eval = |params: &[Tensor], delta: f64, loss_fn: &mut dyn FnMut(&mut Tape, &[Tensor]) -> Result<Tensor>| -> Result<f64> {
        let mut shifted: Vec<Tensor> = params.to_vec();
        let mut values = params[param].values().to_vec();
        values[coord] += delta;
        shifted[param] = params[param].with_values(values)?;
        let mut tape = Tape::disabled();
        loss_fn(&mut tape, &shifted)?.item()
    };
    let plus = eval(params, h, loss_fn)?;
    let minus = eval(params, -h, loss_fn)?;
    Ok((plus - minus) / (2.0 * h))
}
