//! Forward and reverse-mode passes of the acoustic model:
//! conv2d stack -> bidirectional LSTM stack (sequence-wise batch norm on the
//! input projections) -> dense -> alphabet head with log-softmax.
//!
//! Activations are processed layer by layer across the whole batch, because
//! the batch-norm statistics of one recurrent layer couple all utterances.
//! Everything else is per utterance, so utterances run in parallel and
//! reductions happen in batch order.

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{ConvSpec, ModelConfig};
use super::tensors::TensorSet;
use super::NetError;
use crate::alphabet::Alphabet;
use crate::logmath::log_softmax_in_place;

/// Position in a seeded ChaCha stream; enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, word_pos: 0 }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn sync(&mut self, rng: &ChaCha8Rng) {
        self.word_pos = rng.get_word_pos();
    }
}

/// All trainable state plus the alphabet-bound output head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    /// Every parameter below the head.
    pub body: TensorSet,
    /// Batch-norm running statistics (part of the body, not trained by gradient).
    pub stats: TensorSet,
    pub head: TensorSet,
    pub alphabet_id: String,
    pub rng_state: RngState,
    /// Names of the stages that produced this checkpoint, oldest first.
    pub lineage: Vec<String>,
}

impl ModelCheckpoint {
    /// True when body parameters and running statistics match bit for bit.
    pub fn body_bit_eq(&self, other: &Self) -> bool {
        self.body.bit_eq(&other.body) && self.stats.bit_eq(&other.stats)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.body_bit_eq(other)
            && self.head.bit_eq(&other.head)
            && self.alphabet_id == other.alphabet_id
            && self.rng_state == other.rng_state
            && self.lineage == other.lineage
    }

    pub fn num_parameters(&self) -> usize {
        self.body.numel() + self.head.numel()
    }

    /// Checks tensor names and shapes against the layout the config implies.
    pub fn check_layout(&self) -> Result<(), NetError> {
        let layout = Layout::of(&self.config);
        for (set, specs) in [(&self.body, &layout.body), (&self.stats, &layout.stats), (&self.head, &layout.head)] {
            check_set(set, specs)?;
        }
        Ok(())
    }
}

pub(crate) fn check_set(set: &TensorSet, specs: &[TensorSpec]) -> Result<(), NetError> {
    for spec in specs {
        match set.get(&spec.name) {
            None => return Err(NetError::MissingTensor(spec.name.clone())),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(NetError::ShapeMismatch {
                    tensor: spec.name.clone(),
                    found: t.shape().to_vec(),
                    expected: spec.shape.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = set.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
        return Err(NetError::UnexpectedTensor(extra.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone)]
pub(crate) struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Tensor names, shapes and initializers implied by a config.
pub(crate) struct Layout {
    pub body: Vec<TensorSpec>,
    pub stats: Vec<TensorSpec>,
    pub head: Vec<TensorSpec>,
}

impl Layout {
    pub fn of(cfg: &ModelConfig) -> Self {
        let spec = |name: String, shape: Vec<usize>, init| TensorSpec { name, shape, init };
        let bound = |fan_in: usize| Init::Uniform(1.0 / (fan_in as f64).sqrt());
        let mut body = Vec::new();
        let mut stats = Vec::new();
        let mut in_channels = 1;
        for (i, c) in cfg.conv.iter().enumerate() {
            let fan_in = in_channels * c.kernel[0] * c.kernel[1];
            body.push(spec(format!("conv.{i}.weight"), vec![c.channels, in_channels, c.kernel[0], c.kernel[1]], bound(fan_in)));
            body.push(spec(format!("conv.{i}.bias"), vec![c.channels], bound(fan_in)));
            in_channels = c.channels;
        }
        let gates = 4 * cfg.hidden;
        let mut input = cfg.recurrent_input_dim();
        for l in 0..cfg.recurrent_layers {
            body.push(spec(format!("rnn.{l}.w_in"), vec![2, gates, input], bound(input)));
            if cfg.batch_norm {
                body.push(spec(format!("rnn.{l}.bn_gamma"), vec![2, gates], Init::Const(1.0)));
                body.push(spec(format!("rnn.{l}.bn_beta"), vec![2, gates], Init::Const(0.0)));
                stats.push(spec(format!("rnn.{l}.bn_mean"), vec![2, gates], Init::Const(0.0)));
                stats.push(spec(format!("rnn.{l}.bn_var"), vec![2, gates], Init::Const(1.0)));
            } else {
                body.push(spec(format!("rnn.{l}.bias"), vec![2, gates], bound(cfg.hidden)));
            }
            body.push(spec(format!("rnn.{l}.w_rec"), vec![2, gates, cfg.hidden], bound(cfg.hidden)));
            input = cfg.hidden;
        }
        body.push(spec("fc.weight".into(), vec![cfg.fc_size, cfg.hidden], bound(cfg.hidden)));
        body.push(spec("fc.bias".into(), vec![cfg.fc_size], bound(cfg.hidden)));
        let head = vec![
            spec("head.weight".into(), vec![cfg.alphabet_size, cfg.fc_size], bound(cfg.fc_size)),
            spec("head.bias".into(), vec![cfg.alphabet_size], Init::Const(0.0)),
        ];
        Self { body, stats, head }
    }
}

fn materialize(specs: &[TensorSpec], rng: &mut ChaCha8Rng) -> TensorSet {
    let mut set = TensorSet::new();
    for s in specs {
        let t = match s.init {
            Init::Const(v) => ArrayD::from_elem(IxDyn(&s.shape), v),
            Init::Uniform(b) => {
                let dist = Uniform::new_inclusive(-b, b);
                ArrayD::from_shape_fn(IxDyn(&s.shape), |_| dist.sample(rng))
            }
        };
        set.insert(s.name.clone(), t);
    }
    set
}

/// Fresh parameters: fan-in scaled uniform weights, batch-norm gain 1 and shift 0.
pub fn init_params(config: &ModelConfig, alphabet_id: &str, seed: u64) -> Result<ModelCheckpoint, NetError> {
    config.validate()?;
    let layout = Layout::of(config);
    let mut rng_state = RngState::new(seed);
    let mut rng = rng_state.rng();
    let body = materialize(&layout.body, &mut rng);
    let stats = materialize(&layout.stats, &mut rng);
    let head = materialize(&layout.head, &mut rng);
    rng_state.sync(&rng);
    Ok(ModelCheckpoint {
        config: config.clone(),
        body,
        stats,
        head,
        alphabet_id: alphabet_id.to_string(),
        rng_state,
        lineage: Vec::new(),
    })
}

/// Replaces the head with a freshly initialized one sized for `alphabet`.
/// The body and running statistics are carried over untouched.
pub fn reinit_head(ckpt: &ModelCheckpoint, alphabet: &Alphabet) -> ModelCheckpoint {
    let mut out = ckpt.clone();
    out.config.alphabet_size = alphabet.len();
    out.alphabet_id = alphabet.id();
    let mut rng = out.rng_state.rng();
    out.head = materialize(&Layout::of(&out.config).head, &mut rng);
    out.rng_state.sync(&rng);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for normalization; records a tape for [`backward`].
    Train,
    /// Running statistics; no tape.
    Infer,
}

/// Variable-length utterances, each `frames x input_dim`.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub utterances: Vec<Array2<f64>>,
}

impl Batch {
    pub fn new(utterances: Vec<Array2<f64>>) -> Self {
        Self { utterances }
    }

    /// From a zero-padded `batch x frames x features` tensor and true lengths.
    pub fn from_padded(padded: ArrayView3<f64>, lengths: &[usize]) -> Result<Self, NetError> {
        let (b, t, _) = padded.dim();
        if lengths.len() != b {
            return Err(NetError::Dimension(format!("{} lengths for a batch of {b}", lengths.len())));
        }
        let utterances = lengths
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                if len > t {
                    Err(NetError::Dimension(format!("utterance {i}: length {len} exceeds padded length {t}")))
                } else {
                    Ok(padded.slice(s![i, ..len, ..]).to_owned())
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Per-frame log-probabilities, `frames x batch x alphabet`, padded to the
/// longest output. Padding frames hold the uniform distribution.
#[derive(Debug, Clone)]
pub struct Lattice {
    pub data: Array3<f64>,
    pub lengths: Vec<usize>,
}

impl Lattice {
    pub fn utterance(&self, b: usize) -> ArrayView2<'_, f64> {
        self.data.slice(s![..self.lengths[b], b, ..])
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn alphabet_size(&self) -> usize {
        self.data.dim().2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub body: TensorSet,
    pub head: TensorSet,
}

impl Gradients {
    pub fn zeros_like(ckpt: &ModelCheckpoint) -> Self {
        Self { body: ckpt.body.zeros_like(), head: ckpt.head.zeros_like() }
    }

    pub fn norm(&self) -> f64 {
        (self.body.sum_squares() + self.head.sum_squares()).sqrt()
    }
}

pub struct ForwardOutput {
    pub lattice: Lattice,
    /// Running statistics after this batch (train mode with batch norm only).
    pub updated_stats: Option<TensorSet>,
    tape: Option<Tape>,
}

impl ForwardOutput {
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }
}

struct ConvCache {
    input: Array3<f64>,
    pre: Array3<f64>,
}

struct DirectionCache {
    /// Activated gates `[i f g o]`, `frames x 4H`.
    gates: Array2<f64>,
    cell: Array2<f64>,
    tanh_cell: Array2<f64>,
    hidden: Array2<f64>,
}

struct RecurrentCache {
    input: Array2<f64>,
    /// Normalized projections (batch norm only), `frames x 8H`.
    normalized: Option<Array2<f64>>,
    dirs: [DirectionCache; 2],
}

struct RecurrentTape {
    utts: Vec<RecurrentCache>,
    inv_std: Option<Array1<f64>>,
}

struct Tape {
    conv: Vec<Vec<ConvCache>>,
    conv_out: Vec<(usize, usize, usize)>,
    rnn: Vec<RecurrentTape>,
    fc_input: Vec<Array2<f64>>,
    fc_pre: Vec<Array2<f64>>,
    head_input: Vec<Array2<f64>>,
    log_probs: Vec<Array2<f64>>,
}

fn view2<'a>(t: &'a ArrayD<f64>) -> ArrayView2<'a, f64> {
    t.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn view1<'a>(t: &'a ArrayD<f64>) -> ArrayView1<'a, f64> {
    t.view().into_dimensionality::<Ix1>().expect("1-d tensor")
}

/// Views a `[2, rows, cols]` tensor as `[2 * rows, cols]`.
fn stacked2<'a>(t: &'a ArrayD<f64>) -> ArrayView2<'a, f64> {
    let sh = t.shape();
    t.view().into_shape_with_order((sh[0] * sh[1], sh[2])).expect("contiguous")
}

/// Views a `[2, n]` tensor as `[2n]`.
fn stacked1<'a>(t: &'a ArrayD<f64>) -> ArrayView1<'a, f64> {
    t.view().into_shape_with_order(t.len()).expect("contiguous")
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn clipped_relu(x: f64, clip: f64) -> f64 {
    x.max(0.0).min(clip)
}

#[inline]
fn clipped_relu_grad(x: f64, clip: f64) -> f64 {
    if x > 0.0 && x < clip {
        1.0
    } else {
        0.0
    }
}

/// Range of output positions `o` for which `o * stride + offset - pad` lies in `[0, len)`.
fn valid_outputs(out_len: usize, len: usize, stride: usize, offset: usize, pad: usize) -> std::ops::Range<usize> {
    let lo = if pad > offset { (pad - offset).div_ceil(stride) } else { 0 };
    let hi = if len + pad > offset { (len + pad - offset - 1) / stride + 1 } else { 0 };
    lo.min(out_len)..hi.min(out_len).max(lo.min(out_len))
}

fn conv_forward(x: &Array3<f64>, weight: &ArrayD<f64>, bias: &ArrayD<f64>, spec: &ConvSpec, out_t: usize, out_f: usize) -> Array3<f64> {
    let w = weight.view().into_dimensionality::<Ix4>().expect("4-d");
    let (c_out, c_in, kt, kf) = w.dim();
    let (_, len_t, len_f) = x.dim();
    let [st, sf] = spec.stride;
    let [pt, pf] = spec.padding;
    let mut pre = Array3::zeros((c_out, out_t, out_f));
    for co in 0..c_out {
        pre.slice_mut(s![co, .., ..]).fill(bias[[co]]);
        for ci in 0..c_in {
            for dt in 0..kt {
                for to in valid_outputs(out_t, len_t, st, dt, pt) {
                    let ti = to * st + dt - pt;
                    for df in 0..kf {
                        let wv = w[[co, ci, dt, df]];
                        for fo in valid_outputs(out_f, len_f, sf, df, pf) {
                            pre[[co, to, fo]] += wv * x[[ci, ti, fo * sf + df - pf]];
                        }
                    }
                }
            }
        }
    }
    pre
}

/// Returns `(d weight, d bias, d input)` given the gradient on the conv pre-activation.
fn conv_backward(cache: &ConvCache, weight: &ArrayD<f64>, spec: &ConvSpec, dpre: &Array3<f64>) -> (Array4d, Array1<f64>, Array3<f64>) {
    let w = weight.view().into_dimensionality::<Ix4>().expect("4-d");
    let (c_out, c_in, kt, kf) = w.dim();
    let x = &cache.input;
    let (_, len_t, len_f) = x.dim();
    let (_, out_t, out_f) = dpre.dim();
    let [st, sf] = spec.stride;
    let [pt, pf] = spec.padding;
    let mut dw = ndarray::Array4::zeros((c_out, c_in, kt, kf));
    let mut dx = Array3::zeros(x.dim());
    let db = dpre.sum_axis(Axis(2)).sum_axis(Axis(1));
    for co in 0..c_out {
        for ci in 0..c_in {
            for dt in 0..kt {
                for to in valid_outputs(out_t, len_t, st, dt, pt) {
                    let ti = to * st + dt - pt;
                    for df in 0..kf {
                        let wv = w[[co, ci, dt, df]];
                        let mut acc = 0.0;
                        for fo in valid_outputs(out_f, len_f, sf, df, pf) {
                            let fi = fo * sf + df - pf;
                            let g = dpre[[co, to, fo]];
                            acc += g * x[[ci, ti, fi]];
                            dx[[ci, ti, fi]] += wv * g;
                        }
                        dw[[co, ci, dt, df]] += acc;
                    }
                }
            }
        }
    }
    (dw, db, dx)
}

type Array4d = ndarray::Array4<f64>;

/// Runs one direction of an LSTM over precomputed input contributions
/// `zin[t, offset..offset + 4H]`.
fn lstm_direction(zin: &Array2<f64>, offset: usize, w_rec: ArrayView2<f64>, reverse: bool) -> DirectionCache {
    let frames = zin.nrows();
    let hidden = w_rec.ncols();
    let g4 = 4 * hidden;
    let mut gates = Array2::zeros((frames, g4));
    let mut cell = Array2::zeros((frames, hidden));
    let mut tanh_cell = Array2::zeros((frames, hidden));
    let mut h_out = Array2::zeros((frames, hidden));
    let mut h_prev = vec![0.0; hidden];
    let mut c_prev = vec![0.0; hidden];
    let mut z = vec![0.0; g4];
    let w = w_rec.as_standard_layout();
    let w = w.as_slice().expect("contiguous");
    for step in 0..frames {
        let t = if reverse { frames - 1 - step } else { step };
        let zrow = zin.row(t);
        for (r, zr) in z.iter_mut().enumerate() {
            let wr = &w[r * hidden..(r + 1) * hidden];
            *zr = zrow[offset + r] + wr.iter().zip(&h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        let mut grow = gates.row_mut(t);
        for j in 0..hidden {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hidden + j]);
            let g = z[2 * hidden + j].tanh();
            let o = sigmoid(z[3 * hidden + j]);
            let c = f * c_prev[j] + i * g;
            let tc = c.tanh();
            let h = o * tc;
            grow[j] = i;
            grow[hidden + j] = f;
            grow[2 * hidden + j] = g;
            grow[3 * hidden + j] = o;
            cell[[t, j]] = c;
            tanh_cell[[t, j]] = tc;
            h_out[[t, j]] = h;
            c_prev[j] = c;
            h_prev[j] = h;
        }
    }
    DirectionCache { gates, cell, tanh_cell, hidden: h_out }
}

/// Backpropagates through one LSTM direction. Writes the gradient on the
/// input contributions into `dzin[.., offset..offset + 4H]` and returns the
/// recurrent weight gradient.
fn lstm_direction_backward(
    cache: &DirectionCache,
    w_rec: ArrayView2<f64>,
    dh_out: &Array2<f64>,
    reverse: bool,
    dzin: &mut Array2<f64>,
    offset: usize,
) -> Array2<f64> {
    let frames = dh_out.nrows();
    let hidden = w_rec.ncols();
    let g4 = 4 * hidden;
    let mut dw = Array2::<f64>::zeros((g4, hidden));
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    let mut dz = vec![0.0; g4];
    let w = w_rec.as_standard_layout();
    let w = w.as_slice().expect("contiguous");
    for step in (0..frames).rev() {
        let t = if reverse { frames - 1 - step } else { step };
        let prev = if step == 0 { None } else if reverse { Some(t + 1) } else { Some(t - 1) };
        let gates = cache.gates.row(t);
        for j in 0..hidden {
            let (i, f, g, o) = (gates[j], gates[hidden + j], gates[2 * hidden + j], gates[3 * hidden + j]);
            let tc = cache.tanh_cell[[t, j]];
            let dh = dh_out[[t, j]] + dh_next[j];
            let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
            let c_prev = prev.map_or(0.0, |p| cache.cell[[p, j]]);
            dz[j] = dc * g * i * (1.0 - i);
            dz[hidden + j] = dc * c_prev * f * (1.0 - f);
            dz[2 * hidden + j] = dc * i * (1.0 - g * g);
            dz[3 * hidden + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        for (r, &d) in dz.iter().enumerate() {
            dzin[[t, offset + r]] = d;
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if let Some(p) = prev {
            let h_prev = cache.hidden.row(p);
            for (r, &d) in dz.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let wr = &w[r * hidden..(r + 1) * hidden];
                let mut dwr = dw.row_mut(r);
                for j in 0..hidden {
                    dwr[j] += d * h_prev[j];
                    dh_next[j] += d * wr[j];
                }
            }
        }
    }
    dw
}

fn check_batch(ckpt: &ModelCheckpoint, batch: &Batch) -> Result<Vec<usize>, NetError> {
    let cfg = &ckpt.config;
    if ckpt.head.expect("head.bias").len() != cfg.alphabet_size {
        return Err(NetError::Dimension("head width differs from configured alphabet size".into()));
    }
    if batch.is_empty() {
        return Err(NetError::Dimension("empty batch".into()));
    }
    batch
        .utterances
        .iter()
        .enumerate()
        .map(|(b, u)| {
            if u.ncols() != cfg.input_dim {
                return Err(NetError::Dimension(format!(
                    "utterance {b}: feature dim {} but model expects {}",
                    u.ncols(),
                    cfg.input_dim
                )));
            }
            cfg.output_frames(u.nrows()).ok_or(NetError::TooShort { utterance: b, frames: u.nrows() })
        })
        .collect()
}

/// Runs the model over a batch. In [`Mode::Train`] a tape is recorded for
/// [`backward`] and batch-norm uses batch statistics.
pub fn forward(ckpt: &ModelCheckpoint, batch: &Batch, mode: Mode) -> Result<ForwardOutput, NetError> {
    let out_lengths = check_batch(ckpt, batch)?;
    let cfg = &ckpt.config;
    let train = mode == Mode::Train;
    let shapes = cfg.conv_shapes()?;

    // convolutions, per utterance
    let mut acts: Vec<Array3<f64>> = batch
        .utterances
        .iter()
        .map(|u| u.clone().insert_axis(Axis(0)))
        .collect();
    let mut conv_tape = Vec::new();
    for (i, spec) in cfg.conv.iter().enumerate() {
        let weight = ckpt.body.expect(&format!("conv.{i}.weight"));
        let bias = ckpt.body.expect(&format!("conv.{i}.bias"));
        let out_f = shapes[i + 1].1;
        let results: Vec<(Array3<f64>, ConvCache)> = acts
            .into_par_iter()
            .map(|x| {
                let out_t = ConvSpecExt::out_t(spec, x.dim().1);
                let pre = conv_forward(&x, weight, bias, spec, out_t, out_f);
                let out = pre.mapv(|v| clipped_relu(v, cfg.clip));
                (out, ConvCache { input: x, pre })
            })
            .collect();
        let (next, caches): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        acts = next;
        if train {
            conv_tape.push(caches);
        }
    }
    let conv_out: Vec<(usize, usize, usize)> = acts.iter().map(|a| a.dim()).collect();
    // frames x (channels * freq)
    let mut seq: Vec<Array2<f64>> = acts
        .into_iter()
        .map(|a| {
            let (c, t, f) = a.dim();
            a.permuted_axes([1, 0, 2]).as_standard_layout().into_owned().into_shape_with_order((t, c * f)).expect("reshape")
        })
        .collect();

    let hidden = cfg.hidden;
    let g8 = 8 * hidden;
    let mut rnn_tape = Vec::new();
    let mut new_stats = if train && cfg.batch_norm { Some(ckpt.stats.clone()) } else { None };
    for l in 0..cfg.recurrent_layers {
        let w_in = stacked2(ckpt.body.expect(&format!("rnn.{l}.w_in")));
        let w_rec_t = ckpt.body.expect(&format!("rnn.{l}.w_rec"));
        let w_rec = w_rec_t.view().into_dimensionality::<Ix3>().expect("3-d");
        let proj: Vec<Array2<f64>> = seq.par_iter().map(|x| x.dot(&w_in.t())).collect();

        let (zin, normalized, inv_std) = if cfg.batch_norm {
            let gamma = stacked1(ckpt.body.expect(&format!("rnn.{l}.bn_gamma")));
            let beta = stacked1(ckpt.body.expect(&format!("rnn.{l}.bn_beta")));
            let (mean, var) = if train {
                let n: usize = proj.iter().map(|p| p.nrows()).sum();
                let mut mean = Array1::<f64>::zeros(g8);
                for p in &proj {
                    mean += &p.sum_axis(Axis(0));
                }
                mean /= n as f64;
                let mut var = Array1::<f64>::zeros(g8);
                for p in &proj {
                    for row in p.rows() {
                        var.zip_mut_with(&(&row - &mean), |v, d| *v += d * d);
                    }
                }
                var /= n as f64;
                if let Some(stats) = new_stats.as_mut() {
                    let m = cfg.bn_momentum;
                    let rm = stats.expect_mut(&format!("rnn.{l}.bn_mean"));
                    for (r, &b) in rm.iter_mut().zip(mean.iter()) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    let rv = stats.expect_mut(&format!("rnn.{l}.bn_var"));
                    for (r, &b) in rv.iter_mut().zip(var.iter()) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
                (mean, var)
            } else {
                (
                    stacked1(ckpt.stats.expect(&format!("rnn.{l}.bn_mean"))).to_owned(),
                    stacked1(ckpt.stats.expect(&format!("rnn.{l}.bn_var"))).to_owned(),
                )
            };
            let inv_std = var.mapv(|v| 1.0 / (v + cfg.bn_eps).sqrt());
            let mut zs = Vec::with_capacity(proj.len());
            let mut norms = Vec::with_capacity(proj.len());
            for p in proj {
                let xhat = (&p - &mean) * &inv_std;
                zs.push(&xhat * &gamma + &beta);
                norms.push(xhat);
            }
            (zs, Some(norms), Some(inv_std))
        } else {
            let bias = stacked1(ckpt.body.expect(&format!("rnn.{l}.bias")));
            (proj.into_iter().map(|p| p + &bias).collect(), None, None)
        };

        let dirs: Vec<[DirectionCache; 2]> = zin
            .par_iter()
            .map(|z| {
                [
                    lstm_direction(z, 0, w_rec.index_axis(Axis(0), 0), false),
                    lstm_direction(z, 4 * hidden, w_rec.index_axis(Axis(0), 1), true),
                ]
            })
            .collect();
        let next: Vec<Array2<f64>> = dirs.iter().map(|d| &d[0].hidden + &d[1].hidden).collect();
        if train {
            let mut norms = normalized.map(|n| n.into_iter().map(Some).collect::<Vec<_>>()).unwrap_or_else(|| vec![None; seq.len()]);
            let utts = seq
                .into_iter()
                .zip(dirs)
                .zip(norms.drain(..))
                .map(|((input, dirs), normalized)| RecurrentCache { input, normalized, dirs })
                .collect();
            rnn_tape.push(RecurrentTape { utts, inv_std });
        }
        seq = next;
    }

    let fc_w = view2(ckpt.body.expect("fc.weight"));
    let fc_b = view1(ckpt.body.expect("fc.bias"));
    let head_w = view2(ckpt.head.expect("head.weight"));
    let head_b = view1(ckpt.head.expect("head.bias"));
    let per_utt: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)> = seq
        .par_iter()
        .map(|x| {
            let pre = x.dot(&fc_w.t()) + &fc_b;
            let act = pre.mapv(|v| clipped_relu(v, cfg.clip));
            let mut logits = act.dot(&head_w.t()) + &head_b;
            for mut row in logits.rows_mut() {
                log_softmax_in_place(row.as_slice_mut().expect("contiguous row"));
            }
            (pre, act, logits)
        })
        .collect();

    let max_t = out_lengths.iter().copied().max().unwrap_or(0);
    let alphabet = cfg.alphabet_size;
    let mut data = Array3::from_elem((max_t, batch.len(), alphabet), -(alphabet as f64).ln());
    for (b, (_, _, lp)) in per_utt.iter().enumerate() {
        data.slice_mut(s![..lp.nrows(), b, ..]).assign(lp);
    }
    let lattice = Lattice { data, lengths: out_lengths };

    let tape = train.then(|| {
        let mut fc_pre = Vec::new();
        let mut head_input = Vec::new();
        let mut log_probs = Vec::new();
        for (pre, act, lp) in per_utt {
            fc_pre.push(pre);
            head_input.push(act);
            log_probs.push(lp);
        }
        Tape { conv: conv_tape, conv_out, rnn: rnn_tape, fc_input: seq, fc_pre, head_input, log_probs }
    });
    Ok(ForwardOutput { lattice, updated_stats: new_stats, tape })
}

struct ConvSpecExt;

impl ConvSpecExt {
    fn out_t(spec: &ConvSpec, frames: usize) -> usize {
        (frames + 2 * spec.padding[0] - spec.kernel[0]) / spec.stride[0] + 1
    }
}

/// Reverse-mode pass. `loss_grad` is the gradient of the loss with respect
/// to the lattice (`frames x batch x alphabet`); padding frames are ignored.
pub fn backward(ckpt: &ModelCheckpoint, out: &ForwardOutput, loss_grad: ArrayView3<f64>) -> Result<Gradients, NetError> {
    let tape = out.tape.as_ref().ok_or(NetError::NoTape)?;
    if loss_grad.dim() != out.lattice.data.dim() {
        return Err(NetError::Dimension(format!(
            "loss gradient shape {:?} differs from lattice shape {:?}",
            loss_grad.dim(),
            out.lattice.data.dim()
        )));
    }
    let cfg = &ckpt.config;
    let mut grads = Gradients::zeros_like(ckpt);
    let lengths = &out.lattice.lengths;

    // head and dense layer
    let head_w = view2(ckpt.head.expect("head.weight"));
    let fc_w = view2(ckpt.body.expect("fc.weight"));
    let per_utt: Vec<_> = (0..lengths.len())
        .into_par_iter()
        .map(|b| {
            let g = loss_grad.slice(s![..lengths[b], b, ..]);
            let lp = &tape.log_probs[b];
            let mut dlogits = g.to_owned();
            for (mut row, lrow) in dlogits.rows_mut().into_iter().zip(lp.rows()) {
                let total = row.sum();
                row.zip_mut_with(&lrow, |d, &l| *d -= l.exp() * total);
            }
            let d_head_w = dlogits.t().dot(&tape.head_input[b]);
            let d_head_b = dlogits.sum_axis(Axis(0));
            let d_act = dlogits.dot(&head_w);
            let mut d_pre = d_act;
            d_pre.zip_mut_with(&tape.fc_pre[b], |d, &p| *d *= clipped_relu_grad(p, cfg.clip));
            let d_fc_w = d_pre.t().dot(&tape.fc_input[b]);
            let d_fc_b = d_pre.sum_axis(Axis(0));
            let d_in = d_pre.dot(&fc_w);
            (d_head_w, d_head_b, d_fc_w, d_fc_b, d_in)
        })
        .collect();
    let mut dseq = Vec::with_capacity(per_utt.len());
    for (dhw, dhb, dfw, dfb, din) in per_utt {
        *grads.head.expect_mut("head.weight") += &dhw.into_dyn();
        *grads.head.expect_mut("head.bias") += &dhb.into_dyn();
        *grads.body.expect_mut("fc.weight") += &dfw.into_dyn();
        *grads.body.expect_mut("fc.bias") += &dfb.into_dyn();
        dseq.push(din);
    }

    let hidden = cfg.hidden;
    let g4 = 4 * hidden;
    for l in (0..cfg.recurrent_layers).rev() {
        let layer = &tape.rnn[l];
        let w_rec_t = ckpt.body.expect(&format!("rnn.{l}.w_rec"));
        let w_rec = w_rec_t.view().into_dimensionality::<Ix3>().expect("3-d");
        let w_in = stacked2(ckpt.body.expect(&format!("rnn.{l}.w_in")));

        let rec: Vec<(Array2<f64>, Array2<f64>, Array2<f64>)> = layer
            .utts
            .par_iter()
            .zip(dseq.par_iter())
            .map(|(cache, dy)| {
                let mut dzin = Array2::zeros((dy.nrows(), 2 * g4));
                let dw0 = lstm_direction_backward(&cache.dirs[0], w_rec.index_axis(Axis(0), 0), dy, false, &mut dzin, 0);
                let dw1 = lstm_direction_backward(&cache.dirs[1], w_rec.index_axis(Axis(0), 1), dy, true, &mut dzin, g4);
                (dzin, dw0, dw1)
            })
            .collect();
        let mut dzins = Vec::with_capacity(rec.len());
        {
            let dw = grads.body.expect_mut(&format!("rnn.{l}.w_rec"));
            for (dzin, dw0, dw1) in rec {
                let mut dw3 = dw.view_mut().into_dimensionality::<Ix3>().expect("3-d");
                dw3.index_axis_mut(Axis(0), 0).zip_mut_with(&dw0, |a, &b| *a += b);
                dw3.index_axis_mut(Axis(0), 1).zip_mut_with(&dw1, |a, &b| *a += b);
                dzins.push(dzin);
            }
        }

        let dprojs: Vec<Array2<f64>> = if cfg.batch_norm {
            let gamma = stacked1(ckpt.body.expect(&format!("rnn.{l}.bn_gamma")));
            let inv_std = layer.inv_std.as_ref().expect("train-mode batch norm");
            let n: usize = dzins.iter().map(|d| d.nrows()).sum();
            let mut dbeta = Array1::<f64>::zeros(2 * g4);
            let mut dgamma = Array1::<f64>::zeros(2 * g4);
            for (dz, cache) in dzins.iter().zip(&layer.utts) {
                let xhat = cache.normalized.as_ref().expect("normalized projections");
                dbeta += &dz.sum_axis(Axis(0));
                dgamma += &(dz * xhat).sum_axis(Axis(0));
            }
            let scale = &gamma * inv_std / n as f64;
            let dprojs = dzins
                .par_iter()
                .zip(layer.utts.par_iter())
                .map(|(dz, cache)| {
                    let xhat = cache.normalized.as_ref().expect("normalized projections");
                    (dz * n as f64 - &dbeta - &(xhat * &dgamma)) * &scale
                })
                .collect();
            *grads.body.expect_mut(&format!("rnn.{l}.bn_gamma")) += &dgamma.into_shape_with_order((2, g4)).expect("reshape").into_dyn();
            *grads.body.expect_mut(&format!("rnn.{l}.bn_beta")) += &dbeta.into_shape_with_order((2, g4)).expect("reshape").into_dyn();
            dprojs
        } else {
            let mut dbias = Array1::<f64>::zeros(2 * g4);
            for dz in &dzins {
                dbias += &dz.sum_axis(Axis(0));
            }
            *grads.body.expect_mut(&format!("rnn.{l}.bias")) += &dbias.into_shape_with_order((2, g4)).expect("reshape").into_dyn();
            dzins
        };

        let parts: Vec<(Array2<f64>, Array2<f64>)> = dprojs
            .par_iter()
            .zip(layer.utts.par_iter())
            .map(|(dp, cache)| (dp.t().dot(&cache.input), dp.dot(&w_in)))
            .collect();
        let dw_in = grads.body.expect_mut(&format!("rnn.{l}.w_in"));
        let dim = dw_in.shape()[2];
        let mut dw_in2 = dw_in.view_mut().into_shape_with_order((2 * g4, dim)).expect("contiguous");
        dseq = Vec::with_capacity(parts.len());
        for (dw, dx) in parts {
            dw_in2 += &dw;
            dseq.push(dx);
        }
    }

    // back through the convolutions
    let mut dacts: Vec<Array3<f64>> = dseq
        .into_iter()
        .zip(&tape.conv_out)
        .map(|(d, &(c, t, f))| d.into_shape_with_order((t, c, f)).expect("reshape").permuted_axes([1, 0, 2]).as_standard_layout().into_owned())
        .collect();
    for (i, spec) in cfg.conv.iter().enumerate().rev() {
        let weight = ckpt.body.expect(&format!("conv.{i}.weight"));
        let parts: Vec<(Array4d, Array1<f64>, Array3<f64>)> = tape.conv[i]
            .par_iter()
            .zip(dacts.into_par_iter())
            .map(|(cache, mut dout)| {
                dout.zip_mut_with(&cache.pre, |d, &p| *d *= clipped_relu_grad(p, cfg.clip));
                conv_backward(cache, weight, spec, &dout)
            })
            .collect();
        dacts = Vec::with_capacity(parts.len());
        for (dw, db, dx) in parts {
            *grads.body.expect_mut(&format!("conv.{i}.weight")) += &dw.into_dyn();
            *grads.body.expect_mut(&format!("conv.{i}.bias")) += &db.into_dyn();
            dacts.push(dx);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logmath::log_sum_exp;
    use ndarray::Array;
    use rand_distr::StandardNormal;
    use rand::Rng;

    fn tiny(batch_norm: bool) -> ModelConfig {
        let mut cfg = ModelConfig::small(6, 5);
        cfg.conv.truncate(1);
        cfg.conv[0] = ConvSpec { channels: 2, kernel: [3, 3], stride: [2, 2], padding: [1, 1] };
        cfg.recurrent_layers = 2;
        cfg.hidden = 3;
        cfg.fc_size = 4;
        cfg.batch_norm = batch_norm;
        cfg
    }

    fn random_utt(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> Array2<f64> {
        Array::from_shape_fn((frames, dim), |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = tiny(true);
        let a = init_params(&cfg, "x", 7).unwrap();
        let b = init_params(&cfg, "x", 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_params(&cfg, "x", 8).unwrap();
        assert!(!a.body.bit_eq(&c.body));
        a.check_layout().unwrap();
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let cfg = tiny(true);
        let mut ckpt = init_params(&cfg, "x", 1).unwrap();
        for (_, t) in ckpt.head.iter_mut() {
            t.fill(0.0);
        }
        let batch = Batch::new(vec![Array2::from_elem((1, 6), 0.3)]);
        let out = forward(&ckpt, &batch, Mode::Infer).unwrap();
        assert_eq!(out.lattice.lengths, vec![1]);
        for &v in out.lattice.utterance(0).iter() {
            assert!((v + (5f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_are_normalized_in_both_modes() {
        let cfg = tiny(true);
        let ckpt = init_params(&cfg, "x", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = Batch::new(vec![random_utt(&mut rng, 9, 6), random_utt(&mut rng, 4, 6)]);
        for mode in [Mode::Train, Mode::Infer] {
            let out = forward(&ckpt, &batch, mode).unwrap();
            for row in out.lattice.data.lanes(Axis(2)) {
                assert!(log_sum_exp(row.iter().copied()).abs() < 1e-6);
            }
            assert_eq!(out.lattice.lengths, vec![5, 2]);
            assert_eq!(out.has_tape(), mode == Mode::Train);
            assert_eq!(out.updated_stats.is_some(), mode == Mode::Train);
        }
    }

    #[test]
    fn dimension_errors() {
        let ckpt = init_params(&tiny(true), "x", 3).unwrap();
        let bad = Batch::new(vec![Array2::zeros((4, 7))]);
        assert!(matches!(forward(&ckpt, &bad, Mode::Infer), Err(NetError::Dimension(_))));
        let padded = Array3::<f64>::zeros((2, 4, 6));
        assert!(Batch::from_padded(padded.view(), &[4, 5]).is_err());
        let ok = Batch::from_padded(padded.view(), &[4, 2]).unwrap();
        assert_eq!(ok.utterances[1].nrows(), 2);
    }

    #[test]
    fn backward_needs_a_train_tape() {
        let ckpt = init_params(&tiny(true), "x", 3).unwrap();
        let batch = Batch::new(vec![Array2::zeros((4, 6))]);
        let out = forward(&ckpt, &batch, Mode::Infer).unwrap();
        let g = Array3::zeros(out.lattice.data.dim());
        assert!(matches!(backward(&ckpt, &out, g.view()), Err(NetError::NoTape)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let ckpt = init_params(&tiny(true), "x", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = Batch::new(vec![random_utt(&mut rng, 6, 6)]);
        let out = forward(&ckpt, &batch, Mode::Train).unwrap();
        let g = Array3::zeros(out.lattice.data.dim());
        let grads = backward(&ckpt, &out, g.view()).unwrap();
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn padding_frames_are_off_the_active_path() {
        let ckpt = init_params(&tiny(false), "x", 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = Batch::new(vec![random_utt(&mut rng, 10, 6), random_utt(&mut rng, 3, 6)]);
        let out = forward(&ckpt, &batch, Mode::Train).unwrap();
        let mut g = Array3::zeros(out.lattice.data.dim());
        // utterance 1 has 2 output frames; frames 2.. are padding
        g.slice_mut(s![2.., 1, ..]).fill(1.0);
        let grads = backward(&ckpt, &out, g.view()).unwrap();
        assert_eq!(grads.norm(), 0.0);
    }

    #[test]
    fn reinit_keeps_body_and_lineage() {
        let ckpt = {
            let mut c = init_params(&tiny(true), "x", 3).unwrap();
            c.lineage.push("asr".into());
            c
        };
        let alphabet = Alphabet::new("abcdefghij".chars().collect());
        let re = reinit_head(&ckpt, &alphabet);
        assert!(re.body_bit_eq(&ckpt));
        assert_eq!(re.head.expect("head.weight").shape(), &[11, 4]);
        assert_eq!(re.lineage, ckpt.lineage);
        assert_eq!(re.alphabet_id, alphabet.id());
        let again = reinit_head(&re, &alphabet);
        assert!(!again.head.bit_eq(&re.head));
        re.check_layout().unwrap();
    }
}
