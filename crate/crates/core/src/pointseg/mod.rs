//! Point cloud segmentation network.
//!
//! The encoder stacks dilated residual blocks (DRBs). A DRB runs two units of
//! local spatial encoding (LocSE) and attentive pooling over each point's `K`
//! nearest neighbours, adds a linear shortcut, and is followed by random
//! subsampling. The decoder copies features from each point's nearest point of
//! the coarser level, concatenates the encoder skip features, and mixes them
//! with a shared MLP. Three fully connected layers with dropout produce class
//! scores.
//!
//! ```
//! use pointunet::pointseg::{PointSegConfig, PointSegNet};
//! use pointunet::sampling::{random_sample, SamplerConfig};
//! use pointunet::volume::{generate_phantom, PhantomSpec};
//!
//! let p = generate_phantom(&PhantomSpec::default())?;
//! let cloud = random_sample(&p.volume, &SamplerConfig { points: 256, ..SamplerConfig::default() })?;
//! let cfg = PointSegConfig { k: 8, widths: vec![8, 16], ratios: vec![4, 4], ..PointSegConfig::default() };
//! let net = PointSegNet::new(cfg, 0)?;
//! let probs = net.predict(&cloud)?;
//! assert_eq!((probs.len(), probs.num_classes()), (256, 4));
//! # Ok::<(), pointunet::Error>(())
//! ```

mod loss;
mod plan;

pub use loss::{cross_entropy_graph, gdl_graph, gdl_loss, one_hot};
pub use plan::{local_spatial_encoding, relative_geometry, subsample, CloudPlan, LevelPlan, GEO_CHANNELS};

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::sampling::PointCloud;
use crate::tensor::{Bound, Gradients, Graph, ParamId, ParamStore, Tensor, Var, LEAKY_SLOPE};
use crate::train::{self, EpochStats, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegLoss {
    /// Generalized Dice loss.
    #[default]
    Gdl,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointSegConfig {
    /// Neighbours per point, the point itself included.
    pub k: usize,
    /// Output width of every encoder level.
    pub widths: Vec<usize>,
    /// Subsampling ratio after every encoder level.
    pub ratios: Vec<usize>,
    /// Width of the first per-point layer.
    pub stem_width: usize,
    /// Widths of the first two fully connected head layers.
    pub head_widths: [usize; 2],
    /// Dropout keep probability in the head.
    pub keep_prob: f64,
    pub in_features: usize,
    pub num_classes: usize,
    pub loss: SegLoss,
    /// Weight classes by `1 / (sum r)^2` instead of `1 / sum r` in the GDL.
    pub squared_weights: bool,
    /// Seed of the subsampling hash.
    pub subsample_seed: u64,
    /// Points per LocSE chunk during inference.
    pub chunk: usize,
}

impl Default for PointSegConfig {
    fn default() -> Self {
        PointSegConfig {
            k: 16,
            widths: vec![16, 32, 64],
            ratios: vec![4, 4, 4],
            stem_width: 8,
            head_widths: [32, 32],
            keep_prob: 0.5,
            in_features: 4,
            num_classes: 4,
            loss: SegLoss::Gdl,
            squared_weights: false,
            subsample_seed: 0,
            chunk: 64,
        }
    }
}

impl PointSegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("point network: {m}")));
        if self.k == 0 {
            return bad("K must be at least 1".into());
        }
        if self.widths.is_empty() || self.widths.len() != self.ratios.len() {
            return bad(format!(
                "{} widths and {} ratios; need one of each per level",
                self.widths.len(),
                self.ratios.len()
            ));
        }
        if self.widths[0] < 2 || self.widths.windows(2).any(|w| w[0] >= w[1]) || self.widths.iter().any(|w| w % 2 != 0) {
            return bad(format!("widths {:?} must be even and strictly increasing", self.widths));
        }
        if self.ratios.iter().any(|&r| r == 0) {
            return bad("ratios must be positive".into());
        }
        if self.stem_width == 0 || self.head_widths.contains(&0) || self.in_features == 0 || self.chunk == 0 {
            return bad("layer widths, feature count and chunk size must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return bad(format!("class count {} outside 2..=256", self.num_classes));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad(format!("keep probability {} outside (0, 1]", self.keep_prob));
        }
        Ok(())
    }

    /// Point counts per encoder level for an input of `n` points, followed by
    /// the count after the last subsampling.
    /// Widest per-point feature vector any layer outputs.
    pub fn max_feature_width(&self) -> usize {
        let w = self.widths.iter().chain(&self.head_widths).copied().max().unwrap_or(0);
        w.max(self.stem_width)
    }

    pub fn level_sizes(&self, n: usize) -> Vec<usize> {
        let mut sizes = vec![n];
        for &r in &self.ratios {
            sizes.push(sizes.last().unwrap() / r);
        }
        sizes
    }

    /// Errors unless every level, including the deepest subsampled one, keeps
    /// at least `K` points.
    pub fn check_points(&self, n: usize) -> Result<()> {
        let sizes = self.level_sizes(n);
        if let Some(&m) = sizes.iter().find(|&&m| m < self.k) {
            return Err(Error::InvalidArgument(format!(
                "{n} input points shrink to {m} at some level, fewer than K = {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Row-stochastic `N x C` class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbabilities {
    classes: usize,
    data: Vec<f64>,
}

impl ClassProbabilities {
    /// Wraps row-major `N x C` values; every row must lie in `[0, 1]` and sum
    /// to 1 within `1e-9`.
    pub fn new(classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || data.len() % classes != 0 {
            return Err(Error::shape("class probabilities", format!("{} values for {classes} classes", data.len())));
        }
        for (n, row) in data.chunks(classes).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {n} is not a distribution: {row:?}")));
            }
        }
        Ok(ClassProbabilities { classes, data })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Most probable class per point; ties go to the lower class id.
    pub fn argmax(&self) -> Vec<u8> {
        self.data
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// Column standardization epsilon of the normalized layers.
const NORM_EPS: f64 = 1e-5;

/// Drops values nothing downstream reads. A no-op while recording, where
/// backward still needs them.
fn release(g: &mut Graph, vars: &[Var]) -> Result<()> {
    if !g.is_recording() {
        for &v in vars {
            g.free(v)?;
        }
    }
    Ok(())
}

/// Linear layer applied to the rows of an `[N, in]` tensor, followed by an
/// optional bias or by per-column standardization over the `N` rows.
#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: Option<ParamId>,
    norm: bool,
}

impl Dense {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool, rng: &mut Rng) -> Self {
        Dense {
            w: store.add_he(format!("{name}.w"), &[cin, cout], cin, rng),
            b: bias.then(|| store.add_zeros(format!("{name}.b"), &[cout])),
            norm: false,
        }
    }

    /// Normalized layer; a bias would be cancelled by the centring.
    fn normed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Dense {
            norm: true,
            ..Self::new(store, name, cin, cout, false, rng)
        }
    }

    /// Matmul and bias only; `finish` applies the normalization.
    fn linear(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(self.w))?;
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => Ok(y),
        }
    }

    fn finish(&self, g: &mut Graph, y: Var) -> Result<Var> {
        if self.norm {
            g.normalize_columns(y, NORM_EPS)
        } else {
            Ok(y)
        }
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.linear(g, p, x)?;
        let out = self.finish(g, y)?;
        if out != y {
            release(g, &[y])?;
        }
        Ok(out)
    }

    fn apply_act(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(g, p, x)?;
        let out = g.leaky_relu(y, LEAKY_SLOPE)?;
        release(g, &[y])?;
        Ok(out)
    }
}

/// One LocSE + attentive pooling unit.
#[derive(Clone, Debug)]
struct Unit {
    /// MLPs applied in sequence to the raw relative geometry.
    geo: Vec<Dense>,
    score: Dense,
    out: Dense,
}

#[derive(Clone, Debug)]
struct Drb {
    mlp1: Dense,
    units: [Unit; 2],
    mlp2: Dense,
    shortcut: Dense,
}

#[derive(Clone, Debug)]
struct Layout {
    stem: Dense,
    drbs: Vec<Drb>,
    bottleneck: Dense,
    decoders: Vec<Dense>,
    head: [Dense; 3],
}

static PREDICTIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`PointSegNet::predict`] calls made by this process.
pub fn prediction_count() -> usize {
    PREDICTIONS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct PointSegNet {
    cfg: PointSegConfig,
    store: ParamStore,
    layout: Layout,
}

/// Attention-weighted sum over the neighbour axis of `[N, K, C]` features.
/// Scores come from `score_w` (`[C, C]`) and are normalized over `K` per
/// point and channel.
pub fn attentive_pool(g: &mut Graph, encoded: Var, score_w: Var) -> Result<Var> {
    let s = g.shape(encoded).to_vec();
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape("attentive_pool", format!("{s:?}")));
    }
    let (n, k, c) = (s[0], s[1], s[2]);
    let flat = g.reshape(encoded, &[n * k, c])?;
    let scores = g.matmul(flat, score_w)?;
    let scores = g.reshape(scores, &[n, k, c])?;
    let weights = g.softmax(scores, 1)?;
    let weighted = g.mul(weights, encoded)?;
    g.sum_axis(weighted, 1)
}

impl PointSegNet {
    pub fn new(cfg: PointSegConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let st = &mut s;
        let stem = Dense::normed(st, "stem", cfg.in_features, cfg.stem_width, rng);
        let mut drbs = Vec::new();
        let mut cin = cfg.stem_width;
        for (l, &d) in cfg.widths.iter().enumerate() {
            let h = d / 2;
            let name = |part: &str| format!("enc{l}.{part}");
            let mlp1 = Dense::normed(st, &name("mlp1"), cin, h, rng);
            let u0 = Unit {
                geo: vec![Dense::new(st, &name("unit0.geo"), GEO_CHANNELS, h, true, rng)],
                score: Dense::new(st, &name("unit0.score"), d, d, false, rng),
                out: Dense::normed(st, &name("unit0.out"), d, h, rng),
            };
            let u1 = Unit {
                // The second unit refines the first unit's geometry encoding.
                geo: vec![u0.geo[0], Dense::new(st, &name("unit1.geo"), h, h, true, rng)],
                score: Dense::new(st, &name("unit1.score"), d, d, false, rng),
                out: Dense::normed(st, &name("unit1.out"), d, d, rng),
            };
            drbs.push(Drb {
                mlp1,
                units: [u0, u1],
                mlp2: Dense::normed(st, &name("mlp2"), d, d, rng),
                shortcut: Dense::normed(st, &name("shortcut"), cin, d, rng),
            });
            cin = d;
        }
        let deepest = *cfg.widths.last().unwrap();
        let bottleneck = Dense::normed(st, "bottleneck", deepest, deepest, rng);
        let mut decoders = Vec::new();
        let mut below = deepest;
        for l in (0..cfg.widths.len()).rev() {
            let d = cfg.widths[l];
            // The full-resolution stage also sees the stem features.
            let stem_skip = if l == 0 { cfg.stem_width } else { 0 };
            decoders.push(Dense::normed(st, &format!("dec{l}"), below + d + stem_skip, d, rng));
            below = d;
        }
        let [h0, h1] = cfg.head_widths;
        let head = [
            Dense::normed(st, "head0", below, h0, rng),
            Dense::normed(st, "head1", h0, h1, rng),
            Dense::new(st, "head2", h1, cfg.num_classes, false, rng),
        ];
        // Start from uniform class scores; a random last layer on top of the
        // positive-mean activations saturates the softmax before training.
        // There is no output bias: under GDL a shared bias drifts a rare class
        // down everywhere at once and the softmax never recovers it.
        s.get_mut(head[2].w).data_mut().fill(0.0);
        let layout = Layout {
            stem,
            drbs,
            bottleneck,
            decoders,
            head,
        };
        Ok(PointSegNet { cfg, store: s, layout })
    }

    pub fn from_params(cfg: PointSegConfig, params: &ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.store.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &PointSegConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Neighbour, subsampling and upsampling indices for a cloud.
    pub fn plan(&self, pc: &PointCloud) -> Result<CloudPlan> {
        if pc.is_empty() {
            return Err(Error::InvalidArgument("cannot segment an empty cloud".into()));
        }
        if pc.num_features() != self.cfg.in_features {
            return Err(Error::InvalidArgument(format!(
                "network expects {} features per point, cloud has {}",
                self.cfg.in_features,
                pc.num_features()
            )));
        }
        CloudPlan::new(pc, &self.cfg)
    }

    /// Point features standardized per channel over the cloud.
    fn features(pc: &PointCloud) -> Result<Tensor> {
        let (n, f) = (pc.len(), pc.num_features());
        let mut data = pc.feats().to_vec();
        for c in 0..f {
            let mean = (0..n).map(|i| data[i * f + c]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (data[i * f + c] - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
            for i in 0..n {
                data[i * f + c] = (data[i * f + c] - mean) * inv;
            }
        }
        Tensor::from_vec(vec![n, f], data)
    }

    /// Runs `f` over row ranges of `n` points. Recording graphs get a single
    /// call; otherwise each chunk's output is copied out and its intermediates
    /// are dropped before the next one.
    fn chunked(
        &self,
        g: &mut Graph,
        n: usize,
        mut f: impl FnMut(&mut Graph, Range<usize>) -> Result<Var>,
    ) -> Result<Var> {
        if g.is_recording() {
            return f(g, 0..n);
        }
        let mut rows = Vec::new();
        let mut width = 0;
        for start in (0..n).step_by(self.cfg.chunk) {
            let mark = g.len();
            let v = f(g, start..(start + self.cfg.chunk).min(n))?;
            width = g.shape(v)[1];
            rows.extend_from_slice(g.value(v).data());
            g.truncate(mark)?;
        }
        g.try_constant(Tensor::from_vec(vec![n, width], rows)?)
    }

    /// LocSE and attentive pooling for the points in `range` of a level, up to
    /// the output layer's normalization.
    fn unit(&self, g: &mut Graph, p: &Bound, unit: &Unit, level: &LevelPlan, feats: Var, range: Range<usize>) -> Result<Var> {
        let k = self.cfg.k;
        let m = range.len();
        let nbr = &level.knn.indices()[range.start * k..range.end * k];
        let mut geo = g.constant(relative_geometry(&level.positions, &level.knn, range)?);
        for layer in &unit.geo {
            geo = layer.apply_act(g, p, geo)?;
        }
        let neighbors = g.gather_rows(feats, nbr)?;
        let enc = g.concat(&[geo, neighbors], 1)?;
        let c = g.shape(enc)[1];
        let enc = g.reshape(enc, &[m, k, c])?;
        let pooled = attentive_pool(g, enc, p.var(unit.score.w))?;
        unit.out.linear(g, p, pooled)
    }

    fn drb(&self, g: &mut Graph, p: &Bound, drb: &Drb, level: &LevelPlan, x: Var) -> Result<Var> {
        let n = level.positions.len();
        let mut h = drb.mlp1.apply_act(g, p, x)?;
        for unit in &drb.units {
            let pooled = self.chunked(g, n, |g, r| self.unit(g, p, unit, level, h, r))?;
            let y = unit.out.finish(g, pooled)?;
            let next = g.leaky_relu(y, LEAKY_SLOPE)?;
            release(g, &[h, pooled, y])?;
            h = next;
        }
        let y = drb.mlp2.apply(g, p, h)?;
        let sc = drb.shortcut.apply(g, p, x)?;
        let sum = g.add(y, sc)?;
        let out = g.leaky_relu(sum, LEAKY_SLOPE)?;
        release(g, &[h, y, sc, sum])?;
        Ok(out)
    }

    /// Class logits `[N, C]` for the cloud behind `plan`, whose features are `x`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, plan: &CloudPlan, x: Var, train: bool, rng: &mut Rng) -> Result<Var> {
        let l = &self.layout;
        let stem = l.stem.apply_act(g, p, x)?;
        let mut h = stem;
        let mut skips = Vec::new();
        for (drb, level) in l.drbs.iter().zip(&plan.levels) {
            let out = self.drb(g, p, drb, level, h)?;
            if h != stem {
                release(g, &[h])?;
            }
            skips.push(out);
            h = g.gather_rows(out, &level.keep)?;
        }
        let mut next = l.bottleneck.apply_act(g, p, h)?;
        release(g, &[h])?;
        h = next;
        let levels = plan.levels.len();
        for (i, (dec, level)) in l.decoders.iter().zip(plan.levels.iter().rev()).enumerate() {
            let depth = levels - 1 - i;
            let up = g.gather_rows(h, &level.up)?;
            let cat = if depth == 0 {
                g.concat(&[up, skips[0], stem], 1)?
            } else {
                g.concat(&[up, skips[depth]], 1)?
            };
            next = dec.apply_act(g, p, cat)?;
            release(g, &[h, up, cat, skips[depth]])?;
            h = next;
        }
        release(g, &[stem])?;
        for layer in &l.head[..2] {
            next = layer.apply_act(g, p, h)?;
            release(g, &[h])?;
            h = next;
        }
        let dropped = g.dropout(h, self.cfg.keep_prob, train, rng)?;
        if dropped != h {
            release(g, &[h])?;
        }
        l.head[2].apply(g, p, dropped)
    }

    /// Output of encoder level `level`'s residual block for features `x`
    /// (`[N_level, C_in]`), before subsampling.
    pub fn encode_level(&self, plan: &CloudPlan, level: usize, x: &Tensor) -> Result<Tensor> {
        let (drb, lp) = self
            .layout
            .drbs
            .get(level)
            .zip(plan.levels.get(level))
            .ok_or_else(|| Error::InvalidArgument(format!("no encoder level {level}")))?;
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let x = g.try_constant(x.clone())?;
        let out = self.drb(&mut g, &p, drb, lp, x)?;
        Ok(g.value(out).clone())
    }

    /// Class probabilities in inference mode (no dropout, chunked LocSE).
    pub fn predict(&self, pc: &PointCloud) -> Result<ClassProbabilities> {
        PREDICTIONS.fetch_add(1, Ordering::Relaxed);
        let plan = self.plan(pc)?;
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let x = g.constant(Self::features(pc)?);
        let logits = self.forward(&mut g, &p, &plan, x, false, &mut seeded(0))?;
        let probs = g.softmax(logits, 1)?;
        release(&mut g, &[x, logits])?;
        Ok(ClassProbabilities {
            classes: self.cfg.num_classes,
            data: g.value(probs).data().to_vec(),
        })
    }

    /// Loss and gradients on one labelled cloud with a precomputed plan.
    pub fn loss_and_grads(&self, pc: &PointCloud, plan: &CloudPlan, rng: &mut Rng) -> Result<(f64, Gradients)> {
        self.loss_and_grads_with(&self.store, pc, plan, rng)
    }

    fn loss_and_grads_with(&self, store: &ParamStore, pc: &PointCloud, plan: &CloudPlan, rng: &mut Rng) -> Result<(f64, Gradients)> {
        let labels = pc
            .labels()
            .ok_or_else(|| Error::InvalidArgument("training cloud has no labels".into()))?;
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Self::features(pc)?);
        let logits = self.forward(&mut g, &p, plan, x, true, rng)?;
        let loss = match self.cfg.loss {
            SegLoss::Gdl => {
                let probs = g.softmax(logits, 1)?;
                gdl_graph(&mut g, probs, labels, self.cfg.squared_weights)?
            }
            SegLoss::CrossEntropy => cross_entropy_graph(&mut g, logits, labels)?,
        };
        let value = g.value(loss).item();
        g.backward(loss)?;
        Ok((value, store.gradients(&g, &p)?))
    }
}

/// Trains on labelled clouds; a batch is `cfg.batch_size` whole clouds.
/// `after_epoch` sees the statistics and parameters after every epoch.
pub fn train_segmentation(
    net: &mut PointSegNet,
    clouds: &[PointCloud],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&EpochStats, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("segmentation training set is empty".into()));
    }
    let plans = clouds.iter().map(|pc| net.plan(pc)).collect::<Result<Vec<_>>>()?;
    if let Some(i) = clouds.iter().position(|pc| pc.labels().is_none()) {
        return Err(Error::InvalidArgument(format!("training cloud {i} has no labels")));
    }
    let mut store = net.store.clone();
    let curve = train::run(
        &mut store,
        clouds.len(),
        cfg,
        |params, i, rng| net.loss_and_grads_with(params, &clouds[i], &plans[i], rng),
        |stats, params| after_epoch(stats, params),
    )?;
    net.store = store;
    Ok(curve)
}
