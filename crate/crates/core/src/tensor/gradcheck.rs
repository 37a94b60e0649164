//! Central finite-difference verification of tape gradients.
//!
//! Runs at 64-bit with dropout disabled. For each checked coordinate the
//! analytic gradient is compared against `(f(t+eps) - f(t-eps)) / (2 eps)`
//! using the symmetric relative error
//! `|g - fd| / max(1e-8, |g| + |fd|)`.

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Cap on checked coordinates; everything is checked when the total
    /// parameter count is smaller. Sampling is stratified so every tensor
    /// contributes at least one coordinate.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            eps: 1e-4,
            max_coords: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorstCoord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoord>,
}

/// Check analytic gradients of a scalar function of named parameters.
///
/// `value` evaluates the function at an arbitrary parameter vector;
/// `analytic` returns the tape gradients at `params`, aligned with it.
/// Parameters whose entry in `skip` is true (e.g. frozen positional
/// tables) are excluded.
pub fn grad_check<V, G>(
    names: &[String],
    params: &[Tensor<f64>],
    skip: &[bool],
    mut value: V,
    mut analytic: G,
    opts: &GradCheckOpts,
) -> GradCheckReport
where
    V: FnMut(&[Tensor<f64>]) -> f64,
    G: FnMut(&[Tensor<f64>]) -> Vec<Tensor<f64>>,
{
    assert_eq!(names.len(), params.len());
    assert_eq!(skip.len(), params.len());

    let grads = analytic(params);
    assert_eq!(grads.len(), params.len());

    let coords = select_coords(params, skip, opts);
    let mut work: Vec<Tensor<f64>> = params.to_vec();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
    };

    for (pi, idx) in coords {
        let original = work[pi].data()[idx];
        work[pi].data_mut()[idx] = original + opts.eps;
        let f_plus = value(&work);
        work[pi].data_mut()[idx] = original - opts.eps;
        let f_minus = value(&work);
        work[pi].data_mut()[idx] = original;

        let fd = (f_plus - f_minus) / (2.0 * opts.eps);
        let g = grads[pi].data()[idx];
        let rel = (g - fd).abs() / f64::max(1e-8, g.abs() + fd.abs());

        report.coords_checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(WorstCoord {
                param: names[pi].clone(),
                index: idx,
                analytic: g,
                numeric: fd,
            });
        }
    }
    report
}

fn select_coords(
    params: &[Tensor<f64>],
    skip: &[bool],
    opts: &GradCheckOpts,
) -> Vec<(usize, usize)> {
    let total: usize = params
        .iter()
        .zip(skip)
        .filter(|(_, &s)| !s)
        .map(|(p, _)| p.numel())
        .sum();

    let mut coords = Vec::new();
    if total <= opts.max_coords {
        for (pi, p) in params.iter().enumerate() {
            if skip[pi] {
                continue;
            }
            coords.extend((0..p.numel()).map(|i| (pi, i)));
        }
        return coords;
    }

    let mut rng = Rng::derived(opts.seed, &[0x6772_6164]);
    for (pi, p) in params.iter().enumerate() {
        if skip[pi] {
            continue;
        }
        let n = p.numel();
        // proportional share, at least one coordinate per tensor; tiny
        // tensors (fusion weights) are checked exhaustively
        let quota = if n <= 4 {
            n
        } else {
            usize::max(1, opts.max_coords * n / total)
        };
        for idx in rng.sample_indices(n, quota) {
            coords.push((pi, idx));
        }
    }
    coords
}
