//! The brain module: spatial attention over sensors, a per-subject channel
//! mixing, a stack of dilated residual convolution blocks and a projection
//! head onto the speech feature dimension.
//!
//! The same builder produces the learnable speech encoder ("Deep Mel") by
//! disabling the sensor-specific front end and the subject layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchNormStats, Mode};
use crate::optim::ParamStore;
use crate::tensor::{Real, Tensor};

/// One ablation per row of the architecture ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    SpatialAttentionDropout,
    GeluToRelu,
    FinalConvs,
    NonResidualGluConv,
    SkipConnections,
    InitialConv,
    SpatialAttention,
    SubjectLayer,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::SpatialAttentionDropout,
        Ablation::GeluToRelu,
        Ablation::FinalConvs,
        Ablation::NonResidualGluConv,
        Ablation::SkipConnections,
        Ablation::InitialConv,
        Ablation::SpatialAttention,
        Ablation::SubjectLayer,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Ablation::SpatialAttentionDropout => "- Spatial attention dropout",
            Ablation::GeluToRelu => "- GELU + ReLU",
            Ablation::FinalConvs => "- Final convs",
            Ablation::NonResidualGluConv => "- Non-residual GLU conv",
            Ablation::SkipConnections => "- Skip connections",
            Ablation::InitialConv => "- Initial 1x1 conv",
            Ablation::SpatialAttention => "- Spatial attention",
            Ablation::SubjectLayer => "- Subj layer",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Ablation::SpatialAttentionDropout => "spatial-attention-dropout",
            Ablation::GeluToRelu => "gelu-to-relu",
            Ablation::FinalConvs => "final-convs",
            Ablation::NonResidualGluConv => "non-residual-glu-conv",
            Ablation::SkipConnections => "skip-connections",
            Ablation::InitialConv => "initial-conv",
            Ablation::SpatialAttention => "spatial-attention",
            Ablation::SubjectLayer => "subject-layer",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Accepts either the kebab-case key or the table label.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ablation::ALL
            .into_iter()
            .find(|a| a.key() == s || a.label() == s)
            .ok_or_else(|| Error::invalid("ablation", format!("unknown ablation flag `{s}`")))
    }
}

/// What to do when evaluating a subject index the model was not trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnseenSubject {
    #[default]
    Error,
    /// Use the mean of all learned subject matrices.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrainNetConfig {
    pub in_channels: usize,
    pub subjects: usize,
    pub d1: usize,
    pub d2: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub out_features: usize,
    pub harmonics: usize,
    pub drop_radius: f64,
    pub position_margin: f64,
    pub ablations: Vec<Ablation>,
    pub unseen_subject: UnseenSubject,
}

impl Default for BrainNetConfig {
    fn default() -> Self {
        BrainNetConfig {
            in_channels: 273,
            subjects: 1,
            d1: 270,
            d2: 320,
            blocks: 5,
            kernel: 3,
            out_features: 1024,
            harmonics: 32,
            drop_radius: 0.2,
            position_margin: 0.1,
            ablations: Vec::new(),
            unseen_subject: UnseenSubject::Error,
        }
    }
}

impl BrainNetConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("in_channels", self.in_channels),
            ("d1", self.d1),
            ("d2", self.d2),
            ("kernel", self.kernel),
            ("out_features", self.out_features),
            ("harmonics", self.harmonics),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("model.{name}"),
                    reason: "must be ≥ 1".into(),
                });
            }
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config {
                key: "model.kernel".into(),
                reason: "kernel size must be odd".into(),
            });
        }
        if !(0.0..=std::f64::consts::SQRT_2).contains(&self.drop_radius) {
            return Err(Error::Config {
                key: "model.drop_radius".into(),
                reason: "must lie in [0, √2]".into(),
            });
        }
        if !(0.0..0.5).contains(&self.position_margin) {
            return Err(Error::Config {
                key: "model.position_margin".into(),
                reason: "must lie in [0, 0.5)".into(),
            });
        }
        Ok(())
    }

    /// Configuration of the learnable speech encoder: same trunk, fed with
    /// `n_mels` spectrogram bands, without sensor attention or subject layer.
    pub fn deep_mel(&self, n_mels: usize) -> Self {
        let mut cfg = self.clone();
        cfg.in_channels = n_mels;
        cfg.subjects = 0;
        for a in [Ablation::SpatialAttention, Ablation::SubjectLayer] {
            if !cfg.has(a) {
                cfg.ablations.push(a);
            }
        }
        cfg
    }

    /// Sum over every kernel-`k` convolution of `dilation · (k − 1) / 2`: how
    /// far one output step can see into the input on either side.
    pub fn receptive_radius(&self) -> usize {
        let half = (self.kernel - 1) / 2;
        (0..self.blocks)
            .map(|k| {
                let (d0, d1) = block_dilations(k);
                let third = if self.has(Ablation::NonResidualGluConv) { 0 } else { 1 };
                (d0 + d1 + third) * half
            })
            .sum()
    }
}

/// Returns a copy of `config` with one more ablation applied.
pub fn build_ablation(config: &BrainNetConfig, flag: &str) -> Result<BrainNetConfig> {
    let a: Ablation = flag.parse()?;
    let mut cfg = config.clone();
    if !cfg.has(a) {
        cfg.ablations.push(a);
    }
    Ok(cfg)
}

/// Dilations of the two residual convolutions of block `k` (zero-indexed).
pub fn block_dilations(k: usize) -> (usize, usize) {
    (1 << ((2 * k) % 5), 1 << ((2 * k + 1) % 5))
}

/// Sensor layout: 2-D positions in `[0, 1]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub positions: Vec<[f64; 2]>,
}

impl Layout {
    pub fn new(positions: Vec<[f64; 2]>) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("positions", "layout needs at least one sensor"));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]))
        {
            return Err(Error::invalid(
                "positions",
                format!("sensor {i} at {:?} lies outside [0, 1]²", positions[i]),
            ));
        }
        Ok(Layout { positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Positions squeezed into `[margin, 1 − margin]²`.
    pub fn rescaled(&self, margin: f64) -> Vec<[f64; 2]> {
        let span = 1.0 - 2.0 * margin;
        self.positions
            .iter()
            .map(|p| [margin + span * p[0], margin + span * p[1]])
            .collect()
    }
}

/// Cos/sin Fourier basis evaluated at each sensor: `2·K² × C`, cosine terms
/// first, harmonics `k, l ∈ 1..=K` with `k` the slow index.
pub fn fourier_basis<T: Real>(positions: &[[f64; 2]], harmonics: usize) -> Tensor<T> {
    let c = positions.len();
    let kk = harmonics * harmonics;
    let mut data = vec![T::zero(); 2 * kk * c];
    for k in 0..harmonics {
        for l in 0..harmonics {
            let row = k * harmonics + l;
            for (i, p) in positions.iter().enumerate() {
                let phase = 2.0 * std::f64::consts::PI * ((k + 1) as f64 * p[0] + (l + 1) as f64 * p[1]);
                data[row * c + i] = T::of(phase.cos());
                data[(kk + row) * c + i] = T::of(phase.sin());
            }
        }
    }
    Tensor::from_vec(&[2 * kk, c], data).expect("basis shape")
}

/// Slots of every parameter in the store, resolved once at build time.
#[derive(Clone, Debug)]
struct Slots {
    front: Front,
    initial: Option<(usize, usize)>,
    subjects: Vec<usize>,
    blocks: Vec<BlockSlots>,
    head: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
enum Front {
    Attention(usize),
    Projection(usize, usize),
}

#[derive(Clone, Debug)]
struct BlockSlots {
    convs: [(usize, usize); 2],
    norms: [(usize, usize); 2],
    glu: Option<(usize, usize)>,
}

/// A batch ready for the network.
pub struct BrainBatch<'a, T> {
    /// `B×C×T` preprocessed signal.
    pub x: &'a Tensor<T>,
    /// Subject index per batch item.
    pub subjects: &'a [usize],
    /// Index into `layouts` per batch item.
    pub layout_of: &'a [usize],
    pub layouts: &'a [Layout],
}

#[derive(Clone, Debug)]
pub struct BrainNet<T> {
    pub config: BrainNetConfig,
    pub params: ParamStore<T>,
    pub norms: Vec<BatchNormStats<T>>,
    slots: Slots,
}

impl<T: Real> BrainNet<T> {
    /// Builds a freshly initialised network; `prefix` namespaces parameter names.
    pub fn new<R: Rng>(config: BrainNetConfig, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut norms = Vec::new();
        let name = |s: &str| format!("{prefix}{s}");
        let (d1, d2, k) = (config.d1, config.d2, config.kernel);

        let front = if config.has(Ablation::SpatialAttention) {
            let (w, b) = conv_params(&mut params, &name("front"), d1, config.in_channels, 1, rng);
            Front::Projection(w, b)
        } else {
            let kk = config.harmonics * config.harmonics;
            let std = (1.0 / (2.0 * kk as f64)).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            let data = (0..d1 * 2 * kk).map(|_| T::of(normal.sample(rng))).collect();
            let shape = [d1, 2, config.harmonics, config.harmonics];
            let slot = params.add(name("spatial_attention.coeffs"), Tensor::from_vec(&shape, data)?);
            Front::Attention(slot)
        };

        let initial = (!config.has(Ablation::InitialConv))
            .then(|| conv_params(&mut params, &name("initial"), d1, d1, 1, rng));

        let mut subjects = Vec::new();
        if !config.has(Ablation::SubjectLayer) {
            let noise = Normal::new(0.0, 0.01).expect("finite std");
            for s in 0..config.subjects {
                let mut m = Tensor::zeros(&[d1, d1]);
                for (i, v) in m.data_mut().iter_mut().enumerate() {
                    let diag = if i / d1 == i % d1 { 1.0 } else { 0.0 };
                    *v = T::of(diag + noise.sample(rng));
                }
                subjects.push(params.add(name(&format!("subject.{s}")), m));
            }
        }

        let mut blocks = Vec::new();
        for bk in 0..config.blocks {
            let cin = if bk == 0 { d1 } else { d2 };
            let c0 = conv_params(&mut params, &name(&format!("block{bk}.conv0")), d2, cin, k, rng);
            let n0 = norm_params(&mut params, &name(&format!("block{bk}.norm0")), d2);
            norms.push(BatchNormStats::new(d2));
            let c1 = conv_params(&mut params, &name(&format!("block{bk}.conv1")), d2, d2, k, rng);
            let n1 = norm_params(&mut params, &name(&format!("block{bk}.norm1")), d2);
            norms.push(BatchNormStats::new(d2));
            let glu = (!config.has(Ablation::NonResidualGluConv))
                .then(|| conv_params(&mut params, &name(&format!("block{bk}.glu")), 2 * d2, d2, k, rng));
            blocks.push(BlockSlots {
                convs: [c0, c1],
                norms: [n0, n1],
                glu,
            });
        }

        let trunk_out = if config.blocks == 0 { d1 } else { d2 };
        let head = if config.has(Ablation::FinalConvs) {
            vec![conv_params(&mut params, &name("head.out"), config.out_features, trunk_out, 1, rng)]
        } else {
            vec![
                conv_params(&mut params, &name("head.hidden"), 2 * d2, trunk_out, 1, rng),
                conv_params(&mut params, &name("head.out"), config.out_features, 2 * d2, 1, rng),
            ]
        };

        Ok(BrainNet {
            config,
            params,
            norms,
            slots: Slots {
                front,
                initial,
                subjects,
                blocks,
                head,
            },
        })
    }

    /// Binds every parameter as a graph leaf; returned vars are in store order.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| g.param(self.params.get(i).clone()))
            .collect()
    }

    /// Spatial attention weights (`D1×C`, softmax over sensors, no dropout)
    /// for a given layout.
    pub fn attention_weights(&self, layout: &Layout) -> Result<Tensor<T>> {
        let Front::Attention(slot) = self.slots.front else {
            return Err(Error::State("network has no spatial attention layer".into()));
        };
        let mut g = Graph::new();
        let coeffs = g.input(self.params.get(slot).clone());
        let basis = fourier_basis::<T>(&layout.rescaled(self.config.position_margin), self.config.harmonics);
        let basis = Tensor::stack(&[basis])?;
        let logits = g.project_basis(coeffs, &basis)?;
        let w = g.masked_softmax(logits, &[0], &[vec![true; layout.len()]])?;
        let (_, d, c) = g.value(w).dims3()?;
        g.value(w).clone().reshape(&[d, c])
    }

    /// Forward pass. Returns `Z: B×F×T`.
    pub fn forward<R: Rng>(
        &mut self,
        g: &mut Graph<T>,
        vars: &[Var],
        batch: &BrainBatch<'_, T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (b, c, _t) = batch.x.dims3()?;
        if batch.subjects.len() != b || batch.layout_of.len() != b {
            return Err(Error::shape("brain_forward", "subjects/layouts must have one entry per item"));
        }
        if c != self.config.in_channels {
            return Err(Error::shape(
                "brain_forward",
                format!("input has {c} channels, network expects {}", self.config.in_channels),
            ));
        }
        let x = g.input(batch.x.clone());
        let cfg = &self.config;
        let act = |g: &mut Graph<T>, v: Var| {
            if cfg.has(Ablation::GeluToRelu) {
                g.relu(v)
            } else {
                g.gelu(v)
            }
        };

        let mut h = match self.slots.front {
            Front::Attention(slot) => self.spatial_attention(g, vars[slot], x, batch, mode, rng)?,
            Front::Projection(w, bias) => g.conv1d(x, vars[w], Some(vars[bias]), 1)?,
        };
        check(g, h, "spatial attention")?;

        if let Some((w, bias)) = self.slots.initial {
            h = g.conv1d(h, vars[w], Some(vars[bias]), 1)?;
        }

        if !self.slots.subjects.is_empty() {
            h = self.subject_layer(g, vars, h, batch.subjects)?;
            check(g, h, "subject layer")?;
        }

        let skip = !cfg.has(Ablation::SkipConnections);
        for (bk, blk) in self.slots.blocks.iter().enumerate() {
            let (da, db) = block_dilations(bk);
            for (j, dil) in [da, db].into_iter().enumerate() {
                let (w, bias) = blk.convs[j];
                let y = g.conv1d(h, vars[w], Some(vars[bias]), dil)?;
                let y = if skip && g.value(h).shape() == g.value(y).shape() {
                    g.add(y, h)?
                } else {
                    y
                };
                let (gamma, beta) = blk.norms[j];
                let y = g.batchnorm1d(y, vars[gamma], vars[beta], &mut self.norms[2 * bk + j], mode)?;
                h = act(g, y);
            }
            if let Some((w, bias)) = blk.glu {
                let y = g.conv1d(h, vars[w], Some(vars[bias]), 1)?;
                h = g.glu(y)?;
            }
            check(g, h, &format!("block {bk}"))?;
        }

        let n_head = self.slots.head.len();
        for (i, &(w, bias)) in self.slots.head.iter().enumerate() {
            h = g.conv1d(h, vars[w], Some(vars[bias]), 1)?;
            if i + 1 < n_head {
                h = act(g, h);
            }
        }
        check(g, h, "output head")?;
        Ok(h)
    }

    fn spatial_attention<R: Rng>(
        &self,
        g: &mut Graph<T>,
        coeffs: Var,
        x: Var,
        batch: &BrainBatch<'_, T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let c = self.config.in_channels;
        let margin = self.config.position_margin;
        let mut rescaled = Vec::with_capacity(batch.layouts.len());
        let mut bases = Vec::with_capacity(batch.layouts.len());
        for layout in batch.layouts {
            if layout.len() != c {
                return Err(Error::shape(
                    "spatial_attention",
                    format!("layout has {} sensors, input has {c}", layout.len()),
                ));
            }
            let pos = layout.rescaled(margin);
            bases.push(fourier_basis::<T>(&pos, self.config.harmonics));
            rescaled.push(pos);
        }
        let basis = Tensor::stack(&bases)?;
        let logits = g.project_basis(coeffs, &basis)?;

        let dropout = mode == Mode::Train
            && !self.config.has(Ablation::SpatialAttentionDropout)
            && self.config.drop_radius > 0.0;
        let keep: Vec<Vec<bool>> = batch
            .layout_of
            .iter()
            .map(|&l| {
                if dropout {
                    let pos = rescaled.get(l).ok_or_else(|| Error::invalid("layout_of", "index out of range"))?;
                    drop_mask(pos, self.config.drop_radius, rng)
                } else {
                    Ok(vec![true; c])
                }
            })
            .collect::<Result<_>>()?;
        let weights = g.masked_softmax(logits, batch.layout_of, &keep)?;
        g.batched_matmul(weights, x)
    }

    fn subject_layer(&self, g: &mut Graph<T>, vars: &[Var], h: Var, subjects: &[usize]) -> Result<Var> {
        let n = self.slots.subjects.len();
        let mut mats: Vec<Var> = self.slots.subjects.iter().map(|&s| vars[s]).collect();
        let mut which = subjects.to_vec();
        if let Some(&bad) = subjects.iter().find(|&&s| s >= n) {
            match self.config.unseen_subject {
                UnseenSubject::Error => return Err(Error::UnknownSubject(bad)),
                UnseenSubject::Average => {
                    let mut mean = Tensor::zeros(&[self.config.d1, self.config.d1]);
                    for &s in &self.slots.subjects {
                        mean.add_assign(self.params.get(s));
                    }
                    mean.scale(T::one() / T::of(n.max(1) as f64));
                    mats.push(g.input(mean));
                    for w in &mut which {
                        if *w >= n {
                            *w = n;
                        }
                    }
                }
            }
        }
        g.subject_matmul(h, &mats, &which)
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}

/// Sensors to keep after dropping every sensor within `radius` of a centre
/// drawn uniformly over the layout's bounding box.
pub fn drop_mask<R: Rng>(positions: &[[f64; 2]], radius: f64, rng: &mut R) -> Result<Vec<bool>> {
    const RETRIES: usize = 16;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in positions {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    for _ in 0..RETRIES {
        let centre = [sample_in(rng, lo[0], hi[0]), sample_in(rng, lo[1], hi[1])];
        let keep: Vec<bool> = positions
            .iter()
            .map(|p| ((p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2)).sqrt() > radius)
            .collect();
        if keep.iter().any(|&k| k) {
            return Ok(keep);
        }
    }
    Err(Error::State(format!(
        "spatial dropout removed every sensor in {RETRIES} attempts"
    )))
}

fn sample_in<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn conv_params<T: Real, R: Rng>(
    params: &mut ParamStore<T>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut R,
) -> (usize, usize) {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    let u = Uniform::new(-bound, bound).expect("valid bounds");
    let w = (0..cout * cin * k).map(|_| T::of(u.sample(rng))).collect();
    let b = (0..cout).map(|_| T::of(u.sample(rng))).collect();
    let ws = params.add(format!("{name}.weight"), Tensor::from_vec(&[cout, cin, k], w).expect("shape"));
    let bs = params.add(format!("{name}.bias"), Tensor::from_vec(&[cout], b).expect("shape"));
    (ws, bs)
}

fn norm_params<T: Real>(params: &mut ParamStore<T>, name: &str, c: usize) -> (usize, usize) {
    let g = params.add(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
    let b = params.add(format!("{name}.beta"), Tensor::zeros(&[c]));
    (g, b)
}

fn check<T: Real>(g: &Graph<T>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: format!("activations after {layer}"),
        })
    }
}
