//! Voxel saliency network: a small 3D CNN whose sigmoid output estimates the
//! probability that a voxel belongs to any foreground class.
//!
//! The low-level path keeps full resolution in its first layer and halves it
//! (by `downsample`) in every later one. The high-level path keeps
//! downsampling; each of its layers feeds an atrous pyramid (parallel 3³
//! convolutions with dilations `rates`, concatenated). Features of different
//! resolutions are merged coarse-to-fine with [`sca_fuse`]: nearest upsample,
//! concatenate, then rescale channels by a squeeze-and-gate attention vector.
//!
//! ```
//! use pointunet::saliency::{SaliencyConfig, SaliencyNet};
//! use pointunet::volume::{generate_phantom, PhantomSpec};
//!
//! let spec = PhantomSpec { dims: [16, 16, 16], outer_radius: (3.0, 5.0), ..PhantomSpec::default() };
//! let phantom = generate_phantom(&spec)?;
//! let cfg = SaliencyConfig { width: 4, high_layers: 1, ..SaliencyConfig::default() };
//! let net = SaliencyNet::new(cfg, 7)?;
//! let map = net.predict(&phantom.volume)?;
//! assert_eq!(map.dims(), [16, 16, 16]);
//! assert!(map.prob().iter().all(|p| (0.0..=1.0).contains(p)));
//! # Ok::<(), pointunet::Error>(())
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::{Bound, Conv3dGeom, Gradients, Graph, ParamId, ParamStore, Tensor, Var, LEAKY_SLOPE};
use crate::train::{self, EpochStats, TrainConfig};
use crate::volume::{Dims, LabelVolume, Volume};

/// Added to the Dice denominator so empty targets stay finite.
pub const DICE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Input modalities.
    pub in_channels: usize,
    /// Channels of the first layer; each later layer doubles it.
    pub width: usize,
    /// Dilation rates of the atrous pyramid branches.
    pub rates: Vec<usize>,
    /// Output channels of every pyramid branch.
    pub branch_width: usize,
    pub low_layers: usize,
    pub high_layers: usize,
    /// Stride of every downsampling convolution and factor of every upsample.
    pub downsample: usize,
    /// Hidden width of the attention MLP is `channels / reduction`, at least 1.
    pub reduction: usize,
    /// Initial bias of the output logit. Negative values start the map near
    /// zero, which suits the small foreground fraction of lesion volumes.
    pub head_bias: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            in_channels: 4,
            width: 8,
            rates: vec![1, 2, 3],
            branch_width: 8,
            low_layers: 2,
            high_layers: 2,
            downsample: 2,
            reduction: 4,
            head_bias: -3.0,
        }
    }
}

const KERNEL: usize = 3;

impl SaliencyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("saliency: {m}")));
        if self.in_channels == 0 || self.width == 0 || self.branch_width == 0 || self.reduction == 0 {
            return bad("channel counts and reduction must be positive".into());
        }
        if !self.head_bias.is_finite() {
            return bad("head_bias must be finite".into());
        }
        if self.low_layers == 0 || self.high_layers == 0 {
            return bad("need at least one low-level and one high-level layer".into());
        }
        if self.downsample < 2 {
            return bad(format!("downsample factor {} must be at least 2", self.downsample));
        }
        if self.rates.is_empty() || self.rates[0] == 0 || self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("dilation rates {:?} must be positive and strictly increasing", self.rates));
        }
        Ok(())
    }

    /// Total spatial reduction between the input and the deepest layer.
    pub fn total_downsample(&self) -> usize {
        self.downsample.pow((self.low_layers - 1 + self.high_layers) as u32)
    }

    /// Receptive field extent of each pyramid branch at its own resolution.
    pub fn branch_receptive_fields(&self) -> Vec<usize> {
        self.rates.iter().map(|r| r * (KERNEL - 1) + 1).collect()
    }

    /// Checks that `dims` survive every downsampling step and that the deepest
    /// feature map is larger than the widest dilation.
    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let f = self.total_downsample();
        if dims.iter().any(|d| d % f != 0) {
            return Err(Error::InvalidArgument(format!(
                "saliency input dims {dims:?} must be divisible by {f}"
            )));
        }
        let deepest = dims.iter().min().unwrap() / f;
        let max_rate = *self.rates.last().unwrap();
        if deepest <= max_rate {
            return Err(Error::InvalidArgument(format!(
                "deepest feature extent {deepest} does not exceed dilation {max_rate}; the receptive field does not fit dims {dims:?}"
            )));
        }
        Ok(())
    }

    fn low_channels(&self, i: usize) -> usize {
        self.width << i
    }

    fn high_channels(&self, j: usize) -> usize {
        self.width << (self.low_layers + j)
    }

    fn pyramid_channels(&self) -> usize {
        self.branch_width * self.rates.len()
    }
}

/// Per-voxel foreground probability.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    dims: Dims,
    prob: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(dims: Dims, prob: Vec<f64>) -> Result<Self> {
        if prob.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "{} saliency values for dims {dims:?}",
                prob.len()
            )));
        }
        if let Some(p) = prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!("saliency value {p} outside [0, 1]")));
        }
        Ok(SaliencyMap { dims, prob })
    }

    /// 1 on every foreground voxel of `labels`, 0 elsewhere.
    pub fn from_mask(labels: &LabelVolume) -> Self {
        SaliencyMap {
            dims: labels.dims(),
            prob: binary_target(labels),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }

    /// Single-channel volume, for writing as `.pvol`.
    pub fn to_volume(&self, spacing: [f64; 3]) -> Result<Volume> {
        Volume::new(1, self.dims, spacing, self.prob.clone())
    }

    pub fn from_volume(vol: &Volume) -> Result<Self> {
        if vol.channels() != 1 {
            return Err(Error::InvalidArgument(format!(
                "a saliency map has one channel, found {}",
                vol.channels()
            )));
        }
        Self::new(vol.dims(), vol.data().to_vec())
    }
}

/// Every channel shifted and scaled to zero mean and unit variance.
pub fn standardize(vol: &Volume) -> Vec<f64> {
    let mut out = Vec::with_capacity(vol.data().len());
    for c in 0..vol.channels() {
        let ch = vol.channel(c);
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        out.extend(ch.iter().map(|x| (x - mean) * inv));
    }
    out
}

/// Union of all foreground classes as 0/1 values.
pub fn binary_target(labels: &LabelVolume) -> Vec<f64> {
    labels.labels().iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect()
}

/// `1 - 2 sum(p r) / (sum(p) + sum(r) + eps)` on the graph; `pred` may have any
/// shape with as many elements as `target`.
pub fn dice_loss_graph(g: &mut Graph, pred: Var, target: &[f64]) -> Result<Var> {
    let n = g.shape(pred).iter().product::<usize>();
    if n != target.len() {
        return Err(Error::shape("dice_loss", format!("{n} predictions, {} targets", target.len())));
    }
    let r = g.constant(Tensor::from_vec(g.shape(pred).to_vec(), target.to_vec())?);
    let inter = g.mul(pred, r)?;
    let inter = g.sum(inter)?;
    let psum = g.sum(pred)?;
    let den = g.add_scalar(psum, target.iter().sum::<f64>() + DICE_EPS)?;
    let ratio = g.div(inter, den)?;
    let scaled = g.scale(ratio, -2.0)?;
    g.add_scalar(scaled, 1.0)
}

/// Binary Dice loss of a map against the foreground union of `target`.
pub fn dice_loss_binary(pred: &SaliencyMap, target: &LabelVolume) -> Result<f64> {
    if pred.dims != target.dims() {
        return Err(Error::shape(
            "dice_loss",
            format!("map {:?} vs labels {:?}", pred.dims, target.dims()),
        ));
    }
    let r = binary_target(target);
    let inter: f64 = pred.prob.iter().zip(&r).map(|(p, r)| p * r).sum();
    let den = pred.prob.iter().sum::<f64>() + r.iter().sum::<f64>() + DICE_EPS;
    Ok(1.0 - 2.0 * inter / den)
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    geom: Conv3dGeom,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, geom: Conv3dGeom, rng: &mut Rng) -> Self {
        let w = store.add_he(format!("{name}.w"), &[cout, cin, k, k, k], cin * k * k * k, rng);
        let b = store.add_zeros(format!("{name}.b"), &[cout]);
        Conv { w, b, geom }
    }

    fn pointwise(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let geom = Conv3dGeom { stride: 1, dilation: 1, padding: 0 };
        Self::new(store, name, cin, cout, 1, geom, rng)
    }

    fn apply(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv3d(x, p.var(self.w), Some(p.var(self.b)), self.geom)
    }

    fn apply_act(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.apply(g, p, x)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Parameters of the channel attention gate used by [`sca_fuse`].
#[derive(Clone, Copy, Debug)]
pub struct ScaGate {
    /// `[C, hidden]`
    pub w1: Var,
    /// `[hidden]`
    pub b1: Var,
    /// `[hidden, C]`
    pub w2: Var,
    /// `[C]`
    pub b2: Var,
}

/// Per-channel weights in `(0, 1)` for a `[C, ...]` feature map.
pub fn sca_weights(g: &mut Graph, x: Var, gate: &ScaGate) -> Result<Var> {
    let c = g.shape(x)[0];
    let pooled = g.global_avg_pool(x)?;
    let row = g.reshape(pooled, &[1, c])?;
    let h = g.matmul(row, gate.w1)?;
    let h = g.add_row(h, gate.b1)?;
    let h = g.leaky_relu(h, LEAKY_SLOPE)?;
    let s = g.matmul(h, gate.w2)?;
    let s = g.add_row(s, gate.b2)?;
    let s = g.sigmoid(s)?;
    g.reshape(s, &[c])
}

/// Concatenates two `[C, D, H, W]` maps of equal spatial shape along channels
/// and rescales every channel by its attention weight.
pub fn sca_fuse(g: &mut Graph, a: Var, b: Var, gate: &ScaGate) -> Result<Var> {
    if g.shape(a)[1..] != g.shape(b)[1..] {
        return Err(Error::shape(
            "sca_fuse",
            format!("spatial shapes {:?} and {:?}", &g.shape(a)[1..], &g.shape(b)[1..]),
        ));
    }
    let cat = g.concat(&[a, b], 0)?;
    let w = sca_weights(g, cat, gate)?;
    g.scale_channels(cat, w)
}

#[derive(Clone, Copy, Debug)]
struct Sca {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Sca {
    fn new(store: &mut ParamStore, name: &str, c: usize, reduction: usize, rng: &mut Rng) -> Self {
        let hidden = (c / reduction).max(1);
        Sca {
            w1: store.add_he(format!("{name}.w1"), &[c, hidden], c, rng),
            b1: store.add_zeros(format!("{name}.b1"), &[hidden]),
            w2: store.add_he(format!("{name}.w2"), &[hidden, c], hidden, rng),
            b2: store.add_zeros(format!("{name}.b2"), &[c]),
        }
    }

    fn gate(&self, p: &Bound) -> ScaGate {
        ScaGate {
            w1: p.var(self.w1),
            b1: p.var(self.b1),
            w2: p.var(self.w2),
            b2: p.var(self.b2),
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    low: Vec<Conv>,
    /// `low_proj[i]` maps the fused features below low level `i` to `width`.
    low_proj: Vec<Conv>,
    low_sca: Vec<Sca>,
    high: Vec<Conv>,
    pyramids: Vec<Vec<Conv>>,
    high_sca: Vec<Sca>,
    high_proj: Conv,
    final_sca: Sca,
    head: Conv,
}

static PREDICTIONS: AtomicUsize = AtomicUsize::new(0);

/// Number of [`SaliencyNet::predict`] calls made by this process.
pub fn prediction_count() -> usize {
    PREDICTIONS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct SaliencyNet {
    cfg: SaliencyConfig,
    store: ParamStore,
    layout: Layout,
}

impl SaliencyNet {
    /// Fresh network with He-uniform weights and zero biases.
    pub fn new(cfg: SaliencyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed);
        let rng = &mut rng;
        let mut s = ParamStore::new();
        let st = &mut s;
        let down = Conv3dGeom { stride: cfg.downsample, dilation: 1, padding: 1 };
        let same = Conv3dGeom::same(KERNEL, 1);

        let mut low = Vec::new();
        let mut cin = cfg.in_channels;
        for i in 0..cfg.low_layers {
            let geom = if i == 0 { same } else { down };
            low.push(Conv::new(st, &format!("low{i}"), cin, cfg.low_channels(i), KERNEL, geom, rng));
            cin = cfg.low_channels(i);
        }
        let mut high = Vec::new();
        let mut pyramids = Vec::new();
        for j in 0..cfg.high_layers {
            high.push(Conv::new(st, &format!("high{j}"), cin, cfg.high_channels(j), KERNEL, down, rng));
            cin = cfg.high_channels(j);
            let branches = cfg
                .rates
                .iter()
                .map(|&r| Conv::new(st, &format!("high{j}.atrous{r}"), cin, cfg.branch_width, KERNEL, Conv3dGeom::same(KERNEL, r), rng))
                .collect();
            pyramids.push(branches);
        }
        let pc = cfg.pyramid_channels();
        let mut high_sca = Vec::new();
        let mut high_fused = pc;
        for j in (0..cfg.high_layers - 1).rev() {
            high_fused += pc;
            high_sca.push(Sca::new(st, &format!("high{j}.sca"), high_fused, cfg.reduction, rng));
        }
        high_sca.reverse();
        let high_proj = Conv::pointwise(st, "high.proj", high_fused, cfg.width, rng);

        // Low fusion runs from the deepest low layer upwards. Level i combines
        // low layer i with the projected fusion of everything below it.
        let mut low_proj = Vec::new();
        let mut low_sca = Vec::new();
        let mut below = cfg.low_channels(cfg.low_layers - 1);
        for i in (0..cfg.low_layers - 1).rev() {
            low_proj.push(Conv::pointwise(st, &format!("low{i}.proj"), below, cfg.width, rng));
            let c = cfg.low_channels(i) + cfg.width;
            low_sca.push(Sca::new(st, &format!("low{i}.sca"), c, cfg.reduction, rng));
            below = c;
        }
        let final_c = below + cfg.width;
        let final_sca = Sca::new(st, "fuse.sca", final_c, cfg.reduction, rng);
        let head = Conv::pointwise(st, "head", final_c, 1, rng);
        st.get_mut(head.b).data_mut()[0] = cfg.head_bias;
        let layout = Layout {
            low,
            low_proj,
            low_sca,
            high,
            pyramids,
            high_sca,
            high_proj,
            final_sca,
            head,
        };
        Ok(SaliencyNet { cfg, store: s, layout })
    }

    /// Network with the given configuration and parameter values.
    pub fn from_params(cfg: SaliencyConfig, params: &ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.store.load_from(params)?;
        Ok(net)
    }

    pub fn config(&self) -> &SaliencyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn input(&self, vol: &Volume) -> Result<Tensor> {
        if vol.channels() != self.cfg.in_channels {
            return Err(Error::InvalidArgument(format!(
                "saliency net expects {} channels, volume has {}",
                self.cfg.in_channels,
                vol.channels()
            )));
        }
        self.cfg.check_dims(vol.dims())?;
        let [d, h, w] = vol.dims();
        Tensor::from_vec(vec![vol.channels(), d, h, w], standardize(vol))
    }

    /// Probability map `[1, D, H, W]` for a `[C, D, H, W]` input.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let l = &self.layout;
        let f = self.cfg.downsample;
        let mut lows = Vec::new();
        let mut h = x;
        for conv in &l.low {
            h = conv.apply_act(g, p, h)?;
            lows.push(h);
        }
        let mut pyr_out = Vec::new();
        for (conv, branches) in l.high.iter().zip(&l.pyramids) {
            h = conv.apply_act(g, p, h)?;
            let outs = branches
                .iter()
                .map(|b| b.apply_act(g, p, h))
                .collect::<Result<Vec<_>>>()?;
            pyr_out.push(g.concat(&outs, 0)?);
        }

        let mut high = *pyr_out.last().unwrap();
        for j in (0..pyr_out.len() - 1).rev() {
            let up = g.upsample_nearest(high, f)?;
            high = sca_fuse(g, pyr_out[j], up, &l.high_sca[j].gate(p))?;
        }
        // A 1x1x1 convolution commutes with nearest upsampling, so projecting
        // first is the same map at a fraction of the cost.
        let high = l.high_proj.apply(g, p, high)?;
        let high = g.upsample_nearest(high, f.pow(self.cfg.low_layers as u32))?;

        let mut low = *lows.last().unwrap();
        for (k, i) in (0..lows.len() - 1).rev().enumerate() {
            let proj = l.low_proj[k].apply(g, p, low)?;
            let up = g.upsample_nearest(proj, f)?;
            low = sca_fuse(g, lows[i], up, &l.low_sca[k].gate(p))?;
        }

        let fused = sca_fuse(g, low, high, &l.final_sca.gate(p))?;
        let logits = l.head.apply(g, p, fused)?;
        g.sigmoid(logits)
    }

    pub fn predict(&self, vol: &Volume) -> Result<SaliencyMap> {
        PREDICTIONS.fetch_add(1, Ordering::Relaxed);
        let x = self.input(vol)?;
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g);
        let x = g.constant(x);
        let out = self.forward(&mut g, &p, x)?;
        let prob = g.value(out).data().to_vec();
        SaliencyMap::new(vol.dims(), prob)
    }

    /// Binary Dice loss and gradients on one labelled volume.
    pub fn loss_and_grads(&self, vol: &Volume, labels: &LabelVolume) -> Result<(f64, Gradients)> {
        self.loss_and_grads_with(&self.store, vol, labels)
    }

    fn loss_and_grads_with(&self, store: &ParamStore, vol: &Volume, labels: &LabelVolume) -> Result<(f64, Gradients)> {
        let x = self.input(vol)?;
        let target = binary_target(labels);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(x);
        let out = self.forward(&mut g, &p, x)?;
        let loss = dice_loss_graph(&mut g, out, &target)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        Ok((value, store.gradients(&g, &p)?))
    }
}

/// Trains on `(volume, labels)` pairs against their foreground union.
/// `after_epoch` sees the statistics and parameters after every epoch.
pub fn train_saliency(
    net: &mut SaliencyNet,
    data: &[(Volume, LabelVolume)],
    cfg: &TrainConfig,
    mut after_epoch: impl FnMut(&EpochStats, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("saliency training set is empty".into()));
    }
    for (vol, lab) in data {
        if vol.dims() != lab.dims() {
            return Err(Error::InvalidArgument(format!(
                "volume dims {:?} vs label dims {:?}",
                vol.dims(),
                lab.dims()
            )));
        }
    }
    let mut store = net.store.clone();
    let curve = train::run(
        &mut store,
        data.len(),
        cfg,
        |params, i, _| net.loss_and_grads_with(params, &data[i].0, &data[i].1),
        |stats, params| after_epoch(stats, params),
    )?;
    net.store = store;
    Ok(curve)
}
