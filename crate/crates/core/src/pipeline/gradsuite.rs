//! Finite-difference checks of every differentiable piece: graph
//! primitives, both classification losses, the CSML triplet loss and the
//! two full-width extractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, relative_error, BoundParams, GradCheckOptions, Graph, ParameterSet, Tensor, Var};
use crate::backend::{triplet_loss, triplet_loss_grad, CsmlTransform, Triplet};
use crate::error::Result;
use crate::frontend::FeatureMatrix;
use crate::models::{build_maxpool_net, build_res_net, ExtractorModel, STATS_EPS};
use crate::objectives::{asoftmax_node, softmax_ce_node, LossKind, MarginConfig};

#[derive(Debug, Clone)]
pub struct GradSuiteOptions {
    pub coords_per_tensor: usize,
    pub seed: u64,
    /// Segment length for the full-network cases.
    pub frames: usize,
    /// Residual blocks in the residual-network case.
    pub resnet_blocks: usize,
    pub n_speakers: usize,
    pub input_dim: usize,
    /// Skip the full-width networks.
    pub primitives_only: bool,
}

impl Default for GradSuiteOptions {
    fn default() -> Self {
        Self { coords_per_tensor: 12, seed: 0, frames: 64, resnet_blocks: 7, n_speakers: 10, input_dim: 23, primitives_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because the step crossed a kink.
    pub skipped: usize,
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape matches")
}

struct Ctx {
    rng: ChaCha8Rng,
    opts: GradCheckOptions,
    cases: Vec<GradCase>,
}

impl Ctx {
    fn run<F>(&mut self, name: &str, params: &ParameterSet, build: F) -> Result<()>
    where
        F: Fn(&mut Graph, &BoundParams) -> Result<Var> + Sync,
    {
        let rep = grad_check(params, &self.opts, build)?;
        log::info!("{name}: max relative error {:.3e} over {} coordinates ({} skipped)", rep.max_rel_error, rep.checked, rep.skipped);
        self.cases.push(GradCase { name: name.into(), max_rel_error: rep.max_rel_error, checked: rep.checked, skipped: rep.skipped });
        Ok(())
    }

    fn params(&mut self, shapes: &[(&str, Vec<usize>)]) -> ParameterSet {
        let mut p = ParameterSet::new();
        for (n, s) in shapes {
            p.insert(*n, rand_tensor(&mut self.rng, s.clone())).expect("unique names");
        }
        p
    }

    /// Checks `sum_i w_i f(params)_i` for fixed random weights `w`.
    fn projected<F>(&mut self, name: &str, params: &ParameterSet, f: F) -> Result<()>
    where
        F: Fn(&mut Graph, &BoundParams) -> Result<Var> + Sync,
    {
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let y = f(&mut g, &b)?;
        let n = g.value(y).len();
        let weights: Vec<f64> = (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        self.run(name, params, |g, b| {
            let y = f(g, b)?;
            g.weighted_sum(y, weights.clone())
        })
    }
}

fn primitives(c: &mut Ctx) -> Result<()> {
    let p = c.params(&[("x", vec![12, 6]), ("w", vec![18, 5]), ("b", vec![5])]);
    c.projected("time_delay", &p, |g, b| g.time_delay(b.get("x")?, b.get("w")?, Some(b.get("b")?), 3, 2))?;
    let p = c.params(&[("x", vec![9, 8])]);
    c.projected("max_pool_2x2", &p, |g, b| g.max_pool(b.get("x")?, 2))?;
    c.projected("max_pool_time", &p, |g, b| g.max_pool(b.get("x")?, 1))?;
    c.projected("mfm", &p, |g, b| g.mfm(b.get("x")?))?;
    c.projected("stats_pool", &p, |g, b| g.stats_pool(b.get("x")?, STATS_EPS))?;
    let p = c.params(&[("x", vec![7, 4]), ("a", vec![4])]);
    c.projected("prelu", &p, |g, b| g.prelu(b.get("x")?, b.get("a")?))?;
    let p = c.params(&[("main", vec![8, 6]), ("skip", vec![12, 4])]);
    c.projected("residual_add", &p, |g, b| g.residual_add(b.get("main")?, b.get("skip")?))?;
    let p = c.params(&[("x", vec![5, 7]), ("w", vec![7, 3]), ("b", vec![3])]);
    c.projected("affine", &p, |g, b| g.affine(b.get("x")?, b.get("w")?, Some(b.get("b")?)))?;
    Ok(())
}

fn losses(c: &mut Ctx) -> Result<()> {
    let labels = [0, 3, 1, 3, 2, 4];
    let p = c.params(&[("logits", vec![6, 5])]);
    c.run("softmax_ce", &p, |g, b| softmax_ce_node(g, b.get("logits")?, &labels))?;
    let p = c.params(&[("x", vec![6, 4]), ("w", vec![4, 5])]);
    for m in 1..=4 {
        for lambda in [0.0, 3.0] {
            c.run(&format!("asoftmax_m{m}_lambda{lambda}"), &p, |g, b| asoftmax_node(g, b.get("x")?, b.get("w")?, &labels, m, lambda))?;
        }
    }
    Ok(())
}

/// Central differences of the mean triplet loss over the upper triangle.
fn csml(c: &mut Ctx) -> Result<()> {
    let d = 5;
    let embs: Vec<Vec<f64>> = (0..8).map(|_| (0..d).map(|_| c.rng.random_range(-1.0..1.0)).collect()).collect();
    let triplets: Vec<Triplet> = (0..10)
        .map(|_| Triplet { anchor: c.rng.random_range(0..8), positive: c.rng.random_range(0..8), negative: c.rng.random_range(0..8) })
        .collect();
    let mut a = vec![0.0; d * d];
    for r in 0..d {
        for col in r..d {
            a[r * d + col] = if r == col { 1.0 + c.rng.random_range(0.0..0.5) } else { c.rng.random_range(-0.3..0.3) };
        }
    }
    let t = CsmlTransform::from_matrix(d, a.clone())?;
    let (base, grad) = triplet_loss_grad(&t, &embs, &triplets)?;
    let h = c.opts.step;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for r in 0..d {
        for col in r..d {
            let at = |delta: f64| -> Result<f64> {
                let mut m = a.clone();
                m[r * d + col] += delta;
                triplet_loss(&CsmlTransform::from_matrix(d, m)?, &embs, &triplets)
            };
            let numeric = (at(h)? - at(-h)?) / (2.0 * h);
            worst = worst.max(relative_error(grad[r * d + col], numeric, c.opts.abs_floor * base.abs().max(1.0)));
            checked += 1;
        }
    }
    c.cases.push(GradCase { name: "csml_triplet".into(), max_rel_error: worst, checked, skipped: 0 });
    Ok(())
}

fn network(c: &mut Ctx, name: &str, model: &ExtractorModel, frames: usize) -> Result<()> {
    let dim = model.spec().input_dim;
    let segs: Vec<FeatureMatrix> = (0..2)
        .map(|_| FeatureMatrix::new((0..frames * dim).map(|_| c.rng.random_range(-2.0..2.0)).collect(), frames, dim, 10.0))
        .collect::<Result<_>>()?;
    let n_spk = model.spec().n_spk();
    let labels = [0, n_spk - 1];
    for (tag, loss) in [("softmax", LossKind::Softmax), ("asoftmax", LossKind::Asoftmax(MarginConfig::without_annealing(4)))] {
        c.run(&format!("{name}_{tag}"), model.params(), |g, p| {
            let refs: Vec<&FeatureMatrix> = segs.iter().collect();
            let e = model.embed_graph(g, p, &refs)?;
            model.loss_graph(g, p, e, &labels, &loss, 0)
        })?;
    }
    Ok(())
}

/// Runs every case and returns one entry per case.
pub fn gradient_suite(opts: &GradSuiteOptions) -> Result<Vec<GradCase>> {
    let mut c = Ctx {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        opts: GradCheckOptions { max_coords_per_tensor: Some(opts.coords_per_tensor), seed: opts.seed, ..Default::default() },
        cases: Vec::new(),
    };
    primitives(&mut c)?;
    losses(&mut c)?;
    csml(&mut c)?;
    if !opts.primitives_only {
        let mp = build_maxpool_net(opts.n_speakers, opts.input_dim, opts.seed)?;
        network(&mut c, "maxpool_net", &mp, opts.frames)?;
        let rn = build_res_net(opts.resnet_blocks, opts.n_speakers, opts.input_dim, opts.seed)?;
        network(&mut c, &format!("resnet{}_net", 2 * opts.resnet_blocks + 4), &rn, opts.frames)?;
    }
    Ok(c.cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let cases = gradient_suite(&GradSuiteOptions { primitives_only: true, ..Default::default() }).unwrap();
        assert_eq!(cases.len(), 8 + 1 + 8 + 1);
        for c in &cases {
            assert!(c.max_rel_error < 1e-4, "{c:?}");
            assert!(c.checked > 0);
        }
    }
}
