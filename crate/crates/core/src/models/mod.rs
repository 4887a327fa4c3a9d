//! TDNN embedding extractors.
//!
//! A [`NetworkSpec`] lists the layers and their widths; an
//! [`ExtractorModel`] pairs a spec with its parameters and builds the
//! forward pass on an autodiff [`Graph`]. Frame-level layers run per
//! utterance; statistics pooling turns each utterance into one row and the
//! segment layers run on the stacked batch. The embedding is the output of
//! the last segment layer, before the classifier.

mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use spec::{receptive_field, LayerKind, LayerSpec, MaxPoolWidths, NetworkSpec, ResNetWidths};

use crate::autodiff::{BoundParams, Graph, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::objectives::{asoftmax_node, softmax_ce_node, LossKind};

pub const STATS_EPS: f64 = 1e-8;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform,
    Zero,
    Slope,
}

/// Parameter names, shapes and initializers implied by a spec.
fn param_layout(spec: &NetworkSpec) -> Vec<(String, Vec<usize>, Init)> {
    let mut out = Vec::new();
    let affine = |out: &mut Vec<_>, prefix: &str, din: usize, dout: usize, slope: bool| {
        out.push((format!("{prefix}.weight"), vec![din, dout], Init::Uniform));
        out.push((format!("{prefix}.bias"), vec![dout], Init::Zero));
        if slope {
            out.push((format!("{prefix}.slope"), vec![dout], Init::Slope));
        }
    };
    for l in &spec.layers {
        let n = &l.name;
        match l.kind {
            LayerKind::TimeDelay { .. } | LayerKind::AffinePrelu => affine(&mut out, n, l.in_dim, l.out_dim, true),
            LayerKind::ResBlock { context } => {
                affine(&mut out, &format!("{n}.conv1"), context * l.in_dim, l.out_dim, true);
                affine(&mut out, &format!("{n}.conv2"), context * l.out_dim, l.out_dim, false);
                out.push((format!("{n}.out.slope"), vec![l.out_dim], Init::Slope));
            }
            LayerKind::AffineMfm => affine(&mut out, n, l.in_dim, 2 * l.out_dim, false),
            LayerKind::Classifier => affine(&mut out, n, l.in_dim, l.out_dim, false),
            LayerKind::MaxPool { .. } | LayerKind::StatsPool => {}
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorModel {
    spec: NetworkSpec,
    params: ParameterSet,
}

impl ExtractorModel {
    /// Fresh model: uniform weights with bound `sqrt(6 / fan_in)`, zero
    /// biases and PReLU slopes at 0.25.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for (name, shape, init) in param_layout(&spec) {
            match init {
                Init::Uniform => params.insert_uniform(name, shape[0], shape[1], &mut rng)?,
                Init::Zero => params.insert(name, Tensor::zeros(shape))?,
                Init::Slope => params.insert(name, Tensor::vector(vec![PRELU_INIT; shape[0]]))?,
            }
        }
        Ok(Self { spec, params })
    }

    /// Reassembles a model, checking every parameter against the spec.
    pub fn from_parts(spec: NetworkSpec, params: ParameterSet) -> Result<Self> {
        spec.validate()?;
        let layout = param_layout(&spec);
        if layout.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameters, got {}", layout.len(), params.len())));
        }
        for (name, shape, _) in &layout {
            let p = params.get(name).ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Format(format!("parameter {name}: shape {:?}, expected {shape:?}", p.value.shape())));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (NetworkSpec, ParameterSet) {
        (self.spec, self.params)
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    pub fn min_frames(&self) -> usize {
        self.spec.min_frames()
    }

    fn check_input(&self, f: &FeatureMatrix) -> Result<()> {
        if f.dim() != self.spec.input_dim {
            return Err(Error::Dimension(format!("features have dim {}, model expects {}", f.dim(), self.spec.input_dim)));
        }
        let needed = self.min_frames();
        if f.frames() < needed {
            return Err(Error::ShorterThanReceptiveField { needed, got: f.frames() });
        }
        Ok(())
    }

    /// Frame-level stack plus statistics pooling for one utterance. Returns
    /// the output of every layer up to and including the pooled `1 x 2C` row.
    pub fn frame_trace(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Vec<(String, Var)>> {
        let mut trace = Vec::new();
        let mut h = x;
        for l in &self.spec.layers {
            let n = &l.name;
            h = match l.kind {
                LayerKind::TimeDelay { context, dilation } => {
                    let (w, b, s) = (p.get(&format!("{n}.weight"))?, p.get(&format!("{n}.bias"))?, p.get(&format!("{n}.slope"))?);
                    let a = g.time_delay(h, w, Some(b), context, dilation)?;
                    g.prelu(a, s)?
                }
                LayerKind::MaxPool { channel_window } => g.max_pool(h, channel_window)?,
                LayerKind::ResBlock { context } => {
                    let get = |k: &str| p.get(&format!("{n}.{k}"));
                    let a = g.time_delay(h, get("conv1.weight")?, Some(get("conv1.bias")?), context, 1)?;
                    let a = g.prelu(a, get("conv1.slope")?)?;
                    let a = g.time_delay(a, get("conv2.weight")?, Some(get("conv2.bias")?), context, 1)?;
                    let a = g.residual_add(a, h)?;
                    g.prelu(a, get("out.slope")?)?
                }
                LayerKind::StatsPool => {
                    let s = g.stats_pool(h, STATS_EPS)?;
                    trace.push((n.clone(), s));
                    return Ok(trace);
                }
                _ => unreachable!("validated spec pools before segment layers"),
            };
            trace.push((n.clone(), h));
        }
        unreachable!("validated spec contains statistics pooling")
    }

    /// Segment layers on stacked pooled rows (`B x 2C`), giving `B x E`.
    pub fn segment_layers(&self, g: &mut Graph, p: &BoundParams, pooled: Var) -> Result<Var> {
        let mut h = pooled;
        for l in self.spec.layers.iter().filter(|l| matches!(l.kind, LayerKind::AffineMfm | LayerKind::AffinePrelu)) {
            let n = &l.name;
            let a = g.affine(h, p.get(&format!("{n}.weight"))?, Some(p.get(&format!("{n}.bias"))?))?;
            h = match l.kind {
                LayerKind::AffineMfm => g.mfm(a)?,
                _ => g.prelu(a, p.get(&format!("{n}.slope"))?)?,
            };
        }
        Ok(h)
    }

    /// Embeddings (`B x E`) for a batch of segments of any lengths.
    pub fn embed_graph(&self, g: &mut Graph, p: &BoundParams, segments: &[&FeatureMatrix]) -> Result<Var> {
        if segments.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        let mut rows = Vec::with_capacity(segments.len());
        for f in segments {
            self.check_input(f)?;
            let x = g.input(Tensor::matrix(f.frames(), f.dim(), f.values().to_vec())?);
            let trace = self.frame_trace(g, p, x)?;
            rows.push(trace.last().expect("non-empty trace").1);
        }
        let pooled = g.stack_rows(&rows)?;
        self.segment_layers(g, p, pooled)
    }

    /// Classification loss on embeddings; `step` drives A-softmax annealing.
    pub fn loss_graph(&self, g: &mut Graph, p: &BoundParams, emb: Var, labels: &[usize], loss: &LossKind, step: u64) -> Result<Var> {
        let n = &self.spec.classifier().name;
        let w = p.get(&format!("{n}.weight"))?;
        match loss {
            LossKind::Softmax => {
                let logits = g.affine(emb, w, Some(p.get(&format!("{n}.bias"))?))?;
                softmax_ce_node(g, logits, labels)
            }
            LossKind::Asoftmax(m) => asoftmax_node(g, emb, w, labels, m.margin, m.lambda_at(step)),
        }
    }

    /// Embedding of one utterance.
    pub fn forward_embed(&self, f: &FeatureMatrix) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let e = self.embed_graph(&mut g, &p, &[f])?;
        Ok(g.value(e).data().to_vec())
    }
}

/// Max-pooling extractor with default widths.
pub fn build_maxpool_net(n_spk: usize, in_dim: usize, seed: u64) -> Result<ExtractorModel> {
    ExtractorModel::new(NetworkSpec::maxpool(n_spk, in_dim, &MaxPoolWidths::default())?, seed)
}

/// Residual extractor with `blocks` residual blocks and default widths.
pub fn build_res_net(blocks: usize, n_spk: usize, in_dim: usize, seed: u64) -> Result<ExtractorModel> {
    ExtractorModel::new(NetworkSpec::resnet(blocks, n_spk, in_dim, &ResNetWidths::default())?, seed)
}
