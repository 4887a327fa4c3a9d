use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Affine over `context` frames spaced by `dilation`, then PReLU.
    TimeDelay { context: usize, dilation: usize },
    /// Max over 2 frames x `channel_window` channels, stride equal to the window.
    MaxPool { channel_window: usize },
    /// Two time-delay sub-layers with PReLU and an identity skip.
    ResBlock { context: usize },
    StatsPool,
    /// Affine to twice the output width, then Max-Feature-Map.
    AffineMfm,
    AffinePrelu,
    /// Bias-free under A-softmax; biased under plain softmax.
    Classifier,
}

impl LayerKind {
    fn tag(&self) -> &'static str {
        match self {
            Self::TimeDelay { .. } => "time_delay",
            Self::MaxPool { .. } => "max_pool",
            Self::ResBlock { .. } => "res_block",
            Self::StatsPool => "stats_pool",
            Self::AffineMfm => "affine_mfm",
            Self::AffinePrelu => "affine_prelu",
            Self::Classifier => "classifier",
        }
    }

    pub fn is_frame_level(&self) -> bool {
        matches!(self, Self::TimeDelay { .. } | Self::MaxPool { .. } | Self::ResBlock { .. })
    }
}

/// One layer with its net `in x out` widths. For time-delay layers `in_dim`
/// is the spliced affine input width (`context x channels`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind, in_dim: usize, out_dim: usize) -> Self {
        Self { name: name.into(), kind, in_dim, out_dim }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

/// Layer widths of the max-pooling extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPoolWidths {
    /// Output channels of frame1..frame3.
    pub frame: usize,
    /// Output channels of frame4.
    pub top: usize,
    pub segment: usize,
    pub embedding: usize,
}

impl Default for MaxPoolWidths {
    fn default() -> Self {
        Self { frame: 256, top: 2048, segment: 1024, embedding: 512 }
    }
}

/// Layer widths of the residual extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResNetWidths {
    pub frame1: usize,
    pub block: usize,
    pub top: usize,
    pub segment: usize,
    pub embedding: usize,
}

impl Default for ResNetWidths {
    fn default() -> Self {
        Self { frame1: 128, block: 64, top: 2048, segment: 1024, embedding: 512 }
    }
}

fn check_even(name: &str, v: usize) -> Result<()> {
    if v == 0 || v % 2 != 0 {
        return Err(Error::Config(format!("{name} width must be positive and even, got {v}")));
    }
    Ok(())
}

impl NetworkSpec {
    /// Max-pooling TDNN: four time-delay layers (contexts 7, 5, 3, 1) with
    /// max pooling after each, statistics pooling, two MFM segment layers
    /// and the classifier. With default widths and `in_dim = 23` the
    /// `in x out` pairs are 161x256, 640x256, 384x256, 256x2048, 1024x2048,
    /// 2048x1024, 1024x512 and 512xN.
    ///
    /// maxpool3 pools time only: frame4 has context 1 yet consumes the full
    /// `frame` width.
    pub fn maxpool(n_spk: usize, in_dim: usize, w: &MaxPoolWidths) -> Result<Self> {
        if n_spk < 2 {
            return Err(Error::Config("need at least 2 speakers".into()));
        }
        check_even("frame", w.frame)?;
        check_even("top", w.top)?;
        let half = w.frame / 2;
        let td = |context| LayerKind::TimeDelay { context, dilation: 1 };
        let pool = |channel_window| LayerKind::MaxPool { channel_window };
        let layers = vec![
            LayerSpec::new("frame1", td(7), 7 * in_dim, w.frame),
            LayerSpec::new("maxpool1", pool(2), w.frame, half),
            LayerSpec::new("frame2", td(5), 5 * half, w.frame),
            LayerSpec::new("maxpool2", pool(2), w.frame, half),
            LayerSpec::new("frame3", td(3), 3 * half, w.frame),
            LayerSpec::new("maxpool3", pool(1), w.frame, w.frame),
            LayerSpec::new("frame4", td(1), w.frame, w.top),
            LayerSpec::new("maxpool4", pool(2), w.top, w.top / 2),
            LayerSpec::new("stats_pool", LayerKind::StatsPool, w.top / 2, w.top),
            LayerSpec::new("segment6", LayerKind::AffineMfm, w.top, w.segment),
            LayerSpec::new("segment7", LayerKind::AffineMfm, w.segment, w.embedding),
            LayerSpec::new("classifier", LayerKind::Classifier, w.embedding, n_spk),
        ];
        let spec = Self { name: "SpeakerMaxPoolNet7".into(), input_dim: in_dim, layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Residual TDNN with `blocks` residual blocks. Default widths give
    /// 69x128 at frame1 and 64x64 blocks for `in_dim = 23`.
    pub fn resnet(blocks: usize, n_spk: usize, in_dim: usize, w: &ResNetWidths) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::Config("need at least one residual block".into()));
        }
        if n_spk < 2 {
            return Err(Error::Config("need at least 2 speakers".into()));
        }
        check_even("frame1", w.frame1)?;
        check_even("top", w.top)?;
        let mut layers = vec![
            LayerSpec::new("frame1", LayerKind::TimeDelay { context: 3, dilation: 1 }, 3 * in_dim, w.frame1),
            LayerSpec::new("maxpool1", LayerKind::MaxPool { channel_window: 2 }, w.frame1, w.frame1 / 2),
        ];
        let mut channels = w.frame1 / 2;
        for b in 1..=blocks {
            layers.push(LayerSpec::new(format!("frame{}", b + 1), LayerKind::ResBlock { context: 3 }, channels, w.block));
            channels = w.block;
        }
        let top = blocks + 2;
        layers.extend([
            LayerSpec::new(format!("frame{top}"), LayerKind::TimeDelay { context: 1, dilation: 1 }, w.block, w.top),
            LayerSpec::new(format!("maxpool{top}"), LayerKind::MaxPool { channel_window: 2 }, w.top, w.top / 2),
            LayerSpec::new("stats_pool", LayerKind::StatsPool, w.top / 2, w.top),
            LayerSpec::new("segment6", LayerKind::AffineMfm, w.top, w.segment),
            LayerSpec::new("segment7", LayerKind::AffineMfm, w.segment, w.embedding),
            LayerSpec::new("classifier", LayerKind::Classifier, w.embedding, n_spk),
        ]);
        let spec = Self { name: format!("SpeakerResNet{}", 2 * blocks + 4), input_dim: in_dim, layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Checks width chaining and the frame-level -> stats -> segment ->
    /// classifier ordering.
    pub fn validate(&self) -> Result<()> {
        let bad = |l: &LayerSpec, msg: String| Err(Error::Config(format!("layer {}: {msg}", l.name)));
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        let mut width = self.input_dim;
        let mut pooled = false;
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return bad(l, "dims must be positive".into());
            }
            if l.kind.is_frame_level() && pooled {
                return bad(l, "frame-level layer after statistics pooling".into());
            }
            if !l.kind.is_frame_level() && l.kind != LayerKind::StatsPool && !pooled {
                return bad(l, "segment-level layer before statistics pooling".into());
            }
            match l.kind {
                LayerKind::TimeDelay { context, dilation } => {
                    if context == 0 || dilation == 0 || l.in_dim != context * width {
                        return bad(l, format!("expects {context} x {width} inputs, declared {}", l.in_dim));
                    }
                }
                LayerKind::MaxPool { channel_window } => {
                    if !(channel_window == 1 || channel_window == 2)
                        || l.in_dim != width
                        || l.in_dim % channel_window != 0
                        || l.out_dim * channel_window != l.in_dim
                    {
                        return bad(l, "inconsistent pooling widths".into());
                    }
                }
                LayerKind::ResBlock { context } => {
                    if context == 0 || l.in_dim != width || l.out_dim < l.in_dim {
                        return bad(l, "block input must match and output must not narrow".into());
                    }
                }
                LayerKind::StatsPool => {
                    if pooled || l.in_dim != width || l.out_dim != 2 * width {
                        return bad(l, "statistics pooling must map C to 2C once".into());
                    }
                    pooled = true;
                }
                LayerKind::AffineMfm | LayerKind::AffinePrelu => {
                    if l.in_dim != width {
                        return bad(l, format!("input {width} != declared {}", l.in_dim));
                    }
                }
                LayerKind::Classifier => {
                    if l.in_dim != width || i + 1 != self.layers.len() {
                        return bad(l, "classifier must be last and match the embedding width".into());
                    }
                }
            }
            width = l.out_dim;
        }
        match self.layers.last() {
            Some(l) if l.kind == LayerKind::Classifier => Ok(()),
            _ => Err(Error::Config("network must end with a classifier".into())),
        }
    }

    pub fn classifier(&self) -> &LayerSpec {
        self.layers.last().expect("validated spec ends with classifier")
    }

    pub fn n_spk(&self) -> usize {
        self.classifier().out_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.classifier().in_dim
    }

    /// Frame-level layer input channel count (time-delay width divided by context).
    pub fn input_channels(layer: &LayerSpec) -> usize {
        match layer.kind {
            LayerKind::TimeDelay { context, .. } => layer.in_dim / context,
            _ => layer.in_dim,
        }
    }

    /// Total input context after each frame-level layer, in input frames.
    pub fn context_table(&self) -> Vec<(String, usize)> {
        let mut rf = 1;
        let mut jump = 1;
        let mut table = Vec::new();
        for l in self.layers.iter().take_while(|l| l.kind.is_frame_level()) {
            match l.kind {
                LayerKind::TimeDelay { context, dilation } => rf += (context - 1) * dilation * jump,
                LayerKind::MaxPool { .. } => {
                    rf += jump;
                    jump *= 2;
                }
                LayerKind::ResBlock { context } => rf += 2 * (context - 1) * jump,
                _ => unreachable!(),
            }
            table.push((l.name.clone(), rf));
        }
        table
    }

    /// Fewest input frames that yield one frame at statistics pooling.
    pub fn min_frames(&self) -> usize {
        let mut need = 1;
        for l in self.layers.iter().take_while(|l| l.kind.is_frame_level()).collect::<Vec<_>>().into_iter().rev() {
            need = match l.kind {
                LayerKind::TimeDelay { context, dilation } => need + (context - 1) * dilation,
                LayerKind::MaxPool { .. } => 2 * need,
                LayerKind::ResBlock { context } => need + 2 * (context - 1),
                _ => unreachable!(),
            };
        }
        need
    }

    /// Output frame count at statistics pooling for `frames` input frames,
    /// or `None` when the input is too short.
    pub fn output_frames(&self, frames: usize) -> Option<usize> {
        let mut t = frames;
        for l in self.layers.iter().take_while(|l| l.kind.is_frame_level()) {
            t = match l.kind {
                LayerKind::TimeDelay { context, dilation } => t.checked_sub((context - 1) * dilation)?,
                LayerKind::MaxPool { .. } => t / 2,
                LayerKind::ResBlock { context } => t.checked_sub(2 * (context - 1))?,
                _ => unreachable!(),
            };
            if t == 0 {
                return None;
            }
        }
        Some(t)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut name = None;
        let mut input_dim = None;
        let mut layers = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let err = |msg: &str| Error::Parse { line: n + 1, msg: msg.to_string() };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("name=") {
                name = Some(v.to_string());
                continue;
            }
            if let Some(v) = line.strip_prefix("input_dim=") {
                input_dim = Some(v.parse().map_err(|_| err("bad input_dim"))?);
                continue;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("layer") {
                return Err(err("expected `layer`"));
            }
            let lname = parts.next().ok_or_else(|| err("missing layer name"))?;
            let tag = parts.next().ok_or_else(|| err("missing layer kind"))?;
            let mut kv = std::collections::HashMap::new();
            for p in parts {
                let (k, v) = p.split_once('=').ok_or_else(|| err("expected key=value"))?;
                kv.insert(k, v.parse::<usize>().map_err(|_| err("expected integer"))?);
            }
            let get = |k: &str| kv.get(k).copied().ok_or_else(|| err(&format!("missing {k}")));
            let kind = match tag {
                "time_delay" => LayerKind::TimeDelay { context: get("context")?, dilation: get("dilation")? },
                "max_pool" => LayerKind::MaxPool { channel_window: get("window")? },
                "res_block" => LayerKind::ResBlock { context: get("context")? },
                "stats_pool" => LayerKind::StatsPool,
                "affine_mfm" => LayerKind::AffineMfm,
                "affine_prelu" => LayerKind::AffinePrelu,
                "classifier" => LayerKind::Classifier,
                _ => return Err(err("unknown layer kind")),
            };
            layers.push(LayerSpec::new(lname, kind, get("in")?, get("out")?));
        }
        let spec = Self {
            name: name.ok_or_else(|| Error::Format("network spec missing name".into()))?,
            input_dim: input_dim.ok_or_else(|| Error::Format("network spec missing input_dim".into()))?,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name={}", self.name)?;
        writeln!(f, "input_dim={}", self.input_dim)?;
        for l in &self.layers {
            write!(f, "layer {} {}", l.name, l.kind.tag())?;
            match l.kind {
                LayerKind::TimeDelay { context, dilation } => write!(f, " context={context} dilation={dilation}")?,
                LayerKind::MaxPool { channel_window } => write!(f, " window={channel_window}")?,
                LayerKind::ResBlock { context } => write!(f, " context={context}")?,
                _ => {}
            }
            writeln!(f, " in={} out={}", l.in_dim, l.out_dim)?;
        }
        Ok(())
    }
}

/// Minimum input frames for one output position of the frame-level stack.
pub fn receptive_field(spec: &NetworkSpec) -> usize {
    spec.context_table().last().map_or(1, |(_, rf)| *rf)
}
