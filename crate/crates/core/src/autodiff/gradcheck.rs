use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{BoundParams, Graph, ParameterSet, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates per tensor (all when `None`).
    pub max_coords_per_tensor: Option<usize>,
    /// Denominator floor of the relative error, multiplied by
    /// `max(1, |loss|)` since rounding noise in the differences scales with
    /// the loss.
    pub abs_floor: f64,
    /// Skip coordinates whose perturbation changes a max-pooling, MFM or
    /// PReLU branch, where central differences straddle a kink.
    pub skip_kinks: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, max_coords_per_tensor: None, abs_floor: 1e-6, skip_kinks: true, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a kink.
    pub skipped: usize,
    pub per_tensor: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval_loss<F>(params: &ParameterSet, build: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let loss = build(&mut g, &bound)?;
    let v = g.value(loss);
    if v.len() != 1 {
        return Err(Error::NonScalarLoss(v.len()));
    }
    Ok((v.data()[0], g.branch_signature()))
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences for every parameter tensor; returns the worst
/// relative error.
pub fn grad_check<F>(params: &ParameterSet, opts: &GradCheckOptions, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &BoundParams) -> Result<Var> + Sync,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = build(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic = params.gradients(&g, &bound);
    let base_sig = g.branch_signature();
    let floor = opts.abs_floor * g.value(loss).data()[0].abs().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
    let mut jobs = Vec::new();
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                jobs.extend(c.into_iter().map(|i| (t, i)));
            }
            _ => jobs.extend((0..n).map(|i| (t, i))),
        }
    }
    // Each worker perturbs its own copy; results come back in job order.
    let numeric: Vec<Option<f64>> = jobs
        .par_iter()
        .map_init(
            || params.clone(),
            |probe, &(t, idx)| {
                let name = &names[t];
                let original = params.get(name).expect("bound name").value.data()[idx];
                let set = |p: &mut ParameterSet, v: f64| p.get_mut(name).expect("bound name").value.data_mut()[idx] = v;
                set(probe, original + opts.step);
                let (plus, sig_plus) = eval_loss(probe, &build)?;
                set(probe, original - opts.step);
                let (minus, sig_minus) = eval_loss(probe, &build)?;
                set(probe, original);
                if opts.skip_kinks && (sig_plus != base_sig || sig_minus != base_sig) {
                    return Ok(None);
                }
                Ok(Some((plus - minus) / (2.0 * opts.step)))
            },
        )
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped: 0, per_tensor: Vec::new() };
    let mut per_tensor = vec![0.0f64; names.len()];
    for (&(t, idx), num) in jobs.iter().zip(numeric) {
        let Some(num) = num else {
            report.skipped += 1;
            continue;
        };
        let err = relative_error(analytic[t][idx], num, floor);
        report.checked += 1;
        per_tensor[t] = per_tensor[t].max(err);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((names[t].clone(), idx));
        }
    }
    report.per_tensor = names.into_iter().zip(per_tensor).collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn kink_crossings_are_skipped() {
        // The first PReLU input sits closer to the kink than the step.
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::matrix(3, 1, vec![3e-6, 0.5, -0.7]).unwrap()).unwrap();
        p.insert("a", Tensor::vector(vec![0.25])).unwrap();
        let build = |g: &mut Graph, b: &BoundParams| {
            let y = g.prelu(b.get("x")?, b.get("a")?)?;
            g.weighted_sum(y, vec![1.0, -2.0, 3.0])
        };
        let rep = grad_check(&p, &GradCheckOptions::default(), build).unwrap();
        assert_eq!((rep.checked, rep.skipped), (3, 1));
        assert!(rep.max_rel_error < 1e-8, "{rep:?}");
        let all = grad_check(&p, &GradCheckOptions { skip_kinks: false, ..Default::default() }, build).unwrap();
        assert_eq!(all.checked, 4);
        assert!(all.max_rel_error > 1e-2);
    }

    #[test]
    fn floor_scales_with_loss() {
        // Loss near 1e6: differencing noise is about 2e-5 per coordinate,
        // large next to the 2e-4 gradient of the first entry.
        let mut p = ParameterSet::new();
        p.insert("v", Tensor::vector(vec![1e-4, 0.3, 1e3])).unwrap();
        let rep = grad_check(&p, &GradCheckOptions::default(), |g, b| Ok(g.sum_squares(b.get("v")?))).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
}
