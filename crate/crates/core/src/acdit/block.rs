//! The anchor-conditioned block: self-attention modulated by the combined
//! condition, gated masked cross-attention over past and future anchor
//! tokens, and gated chunk attention along the temporal axis — with
//! hand-written analytic gradients for the full
//! denoising-loss-of-block-output pipeline.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::mask::AttentionMask;

use super::attention::{attention_backward, attention_forward, AttentionCache};
use super::embed::{combine_conditions, ConditionVector, EmbedCache, ScalarEmbedder};
use super::schedule::denoising_loss;
use super::{AcDitConfig, AcditError, TokenTensor};

/// Projection and modulation weights of one attention layer (d x d each).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    /// Maps the condition to a per-channel scale (adaptive modulation).
    pub w_scale: DMatrix<f64>,
    /// Maps the condition to a per-channel shift.
    pub w_shift: DMatrix<f64>,
}

impl AttentionLayerParams {
    fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let w = 1.0 / (d as f64).sqrt();
        let m = 0.1 / (d as f64).sqrt();
        let mat = |scale: f64, rng: &mut R| {
            DMatrix::from_fn(d, d, |_, _| {
                let g: f64 = StandardNormal.sample(rng);
                g * scale
            })
        };
        Self {
            wq: mat(w, rng),
            wk: mat(w, rng),
            wv: mat(w, rng),
            wo: mat(w, rng),
            w_scale: mat(m, rng),
            w_shift: mat(m, rng),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            wq: DMatrix::zeros(d, d),
            wk: DMatrix::zeros(d, d),
            wv: DMatrix::zeros(d, d),
            wo: DMatrix::zeros(d, d),
            w_scale: DMatrix::zeros(d, d),
            w_shift: DMatrix::zeros(d, d),
        }
    }
}

/// Weights and gates of the full block. All gates start at zero, so a
/// freshly initialized block computes exactly the self-attention path.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedBlockParams {
    pub sa: AttentionLayerParams,
    pub pa: AttentionLayerParams,
    pub fa: AttentionLayerParams,
    pub ca: AttentionLayerParams,
    pub gamma_past: f64,
    pub gamma_fut: f64,
    pub gamma_tau: f64,
}

impl GatedBlockParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            sa: AttentionLayerParams::init(d, rng),
            pa: AttentionLayerParams::init(d, rng),
            fa: AttentionLayerParams::init(d, rng),
            ca: AttentionLayerParams::init(d, rng),
            gamma_past: 0.0,
            gamma_fut: 0.0,
            gamma_tau: 0.0,
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            sa: AttentionLayerParams::zeros(d),
            pa: AttentionLayerParams::zeros(d),
            fa: AttentionLayerParams::zeros(d),
            ca: AttentionLayerParams::zeros(d),
            gamma_past: 0.0,
            gamma_fut: 0.0,
            gamma_tau: 0.0,
        }
    }
}

/// The complete trainable state: the five condition embedders, the condition
/// gate, and the block.
#[derive(Debug, Clone, PartialEq)]
pub struct AcDitParams {
    pub config: AcDitConfig,
    pub embed_t: ScalarEmbedder,
    pub embed_k: ScalarEmbedder,
    pub embed_a: ScalarEmbedder,
    pub embed_a_inv: ScalarEmbedder,
    pub embed_k_f: ScalarEmbedder,
    pub gamma_cond: f64,
    pub block: GatedBlockParams,
}

impl AcDitParams {
    pub fn init(config: AcDitConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, f) = (config.d, config.mlp_hidden, config.freq_count);
        Self {
            config,
            embed_t: ScalarEmbedder::init(1, f, h, d, &mut rng),
            embed_k: ScalarEmbedder::init(1, f, h, d, &mut rng),
            embed_a: ScalarEmbedder::init(3, f, h, d, &mut rng),
            embed_a_inv: ScalarEmbedder::init(3, f, h, d, &mut rng),
            embed_k_f: ScalarEmbedder::init(1, f, h, d, &mut rng),
            gamma_cond: 0.0,
            block: GatedBlockParams::init(d, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.config;
        Self {
            config: c,
            embed_t: ScalarEmbedder::zeros(1, c.freq_count, c.mlp_hidden, c.d),
            embed_k: ScalarEmbedder::zeros(1, c.freq_count, c.mlp_hidden, c.d),
            embed_a: ScalarEmbedder::zeros(3, c.freq_count, c.mlp_hidden, c.d),
            embed_a_inv: ScalarEmbedder::zeros(3, c.freq_count, c.mlp_hidden, c.d),
            embed_k_f: ScalarEmbedder::zeros(1, c.freq_count, c.mlp_hidden, c.d),
            gamma_cond: 0.0,
            block: GatedBlockParams::zeros(c.d),
        }
    }
}

/// Borrowed view of one parameter slot.
pub(super) enum SlotRef<'a> {
    Mat(&'a DMatrix<f64>),
    Vec(&'a DVector<f64>),
    Scalar(&'a f64),
}

pub(super) enum SlotMut<'a> {
    Mat(&'a mut DMatrix<f64>),
    Vec(&'a mut DVector<f64>),
    Scalar(&'a mut f64),
}

impl SlotRef<'_> {
    pub(super) fn len(&self) -> usize {
        match self {
            SlotRef::Mat(m) => m.len(),
            SlotRef::Vec(v) => v.len(),
            SlotRef::Scalar(_) => 1,
        }
    }

    pub(super) fn get(&self, i: usize) -> f64 {
        match self {
            SlotRef::Mat(m) => m.as_slice()[i],
            SlotRef::Vec(v) => v.as_slice()[i],
            SlotRef::Scalar(s) => **s,
        }
    }
}

impl SlotMut<'_> {
    pub(super) fn add(&mut self, i: usize, delta: f64) {
        match self {
            SlotMut::Mat(m) => m.as_mut_slice()[i] += delta,
            SlotMut::Vec(v) => v.as_mut_slice()[i] += delta,
            SlotMut::Scalar(s) => **s += delta,
        }
    }
}

fn embedder_slots<'a>(name: &str, e: &'a ScalarEmbedder) -> Vec<(String, SlotRef<'a>)> {
    vec![
        (format!("{name}.w1"), SlotRef::Mat(&e.w1)),
        (format!("{name}.b1"), SlotRef::Vec(&e.b1)),
        (format!("{name}.w2"), SlotRef::Mat(&e.w2)),
        (format!("{name}.b2"), SlotRef::Vec(&e.b2)),
    ]
}

fn embedder_slots_mut<'a>(name: &str, e: &'a mut ScalarEmbedder) -> Vec<(String, SlotMut<'a>)> {
    vec![
        (format!("{name}.w1"), SlotMut::Mat(&mut e.w1)),
        (format!("{name}.b1"), SlotMut::Vec(&mut e.b1)),
        (format!("{name}.w2"), SlotMut::Mat(&mut e.w2)),
        (format!("{name}.b2"), SlotMut::Vec(&mut e.b2)),
    ]
}

fn layer_slots<'a>(name: &str, l: &'a AttentionLayerParams) -> Vec<(String, SlotRef<'a>)> {
    vec![
        (format!("{name}.wq"), SlotRef::Mat(&l.wq)),
        (format!("{name}.wk"), SlotRef::Mat(&l.wk)),
        (format!("{name}.wv"), SlotRef::Mat(&l.wv)),
        (format!("{name}.wo"), SlotRef::Mat(&l.wo)),
        (format!("{name}.w_scale"), SlotRef::Mat(&l.w_scale)),
        (format!("{name}.w_shift"), SlotRef::Mat(&l.w_shift)),
    ]
}

fn layer_slots_mut<'a>(name: &str, l: &'a mut AttentionLayerParams) -> Vec<(String, SlotMut<'a>)> {
    vec![
        (format!("{name}.wq"), SlotMut::Mat(&mut l.wq)),
        (format!("{name}.wk"), SlotMut::Mat(&mut l.wk)),
        (format!("{name}.wv"), SlotMut::Mat(&mut l.wv)),
        (format!("{name}.wo"), SlotMut::Mat(&mut l.wo)),
        (format!("{name}.w_scale"), SlotMut::Mat(&mut l.w_scale)),
        (format!("{name}.w_shift"), SlotMut::Mat(&mut l.w_shift)),
    ]
}

impl AcDitParams {
    /// Stable ordered enumeration of every parameter array; the checkpoint
    /// format and flat indexing both derive from it.
    pub(super) fn slots(&self) -> Vec<(String, SlotRef<'_>)> {
        let mut out = Vec::new();
        out.extend(embedder_slots("embed_t", &self.embed_t));
        out.extend(embedder_slots("embed_k", &self.embed_k));
        out.extend(embedder_slots("embed_a", &self.embed_a));
        out.extend(embedder_slots("embed_a_inv", &self.embed_a_inv));
        out.extend(embedder_slots("embed_k_f", &self.embed_k_f));
        out.push(("gamma_cond".into(), SlotRef::Scalar(&self.gamma_cond)));
        out.extend(layer_slots("sa", &self.block.sa));
        out.extend(layer_slots("pa", &self.block.pa));
        out.extend(layer_slots("fa", &self.block.fa));
        out.extend(layer_slots("ca", &self.block.ca));
        out.push(("gamma_past".into(), SlotRef::Scalar(&self.block.gamma_past)));
        out.push(("gamma_fut".into(), SlotRef::Scalar(&self.block.gamma_fut)));
        out.push(("gamma_tau".into(), SlotRef::Scalar(&self.block.gamma_tau)));
        out
    }

    pub(super) fn slots_mut(&mut self) -> Vec<(String, SlotMut<'_>)> {
        let mut out = Vec::new();
        out.extend(embedder_slots_mut("embed_t", &mut self.embed_t));
        out.extend(embedder_slots_mut("embed_k", &mut self.embed_k));
        out.extend(embedder_slots_mut("embed_a", &mut self.embed_a));
        out.extend(embedder_slots_mut("embed_a_inv", &mut self.embed_a_inv));
        out.extend(embedder_slots_mut("embed_k_f", &mut self.embed_k_f));
        out.push((
            "gamma_cond".into(),
            SlotMut::Scalar(&mut self.gamma_cond),
        ));
        out.extend(layer_slots_mut("sa", &mut self.block.sa));
        out.extend(layer_slots_mut("pa", &mut self.block.pa));
        out.extend(layer_slots_mut("fa", &mut self.block.fa));
        out.extend(layer_slots_mut("ca", &mut self.block.ca));
        out.push((
            "gamma_past".into(),
            SlotMut::Scalar(&mut self.block.gamma_past),
        ));
        out.push((
            "gamma_fut".into(),
            SlotMut::Scalar(&mut self.block.gamma_fut),
        ));
        out.push((
            "gamma_tau".into(),
            SlotMut::Scalar(&mut self.block.gamma_tau),
        ));
        out
    }

    pub fn flat_len(&self) -> usize {
        self.slots().iter().map(|(_, s)| s.len()).sum()
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut rest = index;
        for (_, slot) in self.slots() {
            if rest < slot.len() {
                return slot.get(rest);
            }
            rest -= slot.len();
        }
        panic!("flat index {index} out of range");
    }

    pub fn add_flat(&mut self, index: usize, delta: f64) {
        let mut rest = index;
        for (_, mut slot) in self.slots_mut() {
            let len = match &slot {
                SlotMut::Mat(m) => m.len(),
                SlotMut::Vec(v) => v.len(),
                SlotMut::Scalar(_) => 1,
            };
            if rest < len {
                slot.add(rest, delta);
                return;
            }
            rest -= len;
        }
        panic!("flat index {index} out of range");
    }

    /// Flat indices of the four gates.
    pub fn gate_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (name, slot) in self.slots() {
            if name.starts_with("gamma_") {
                out.push(offset);
            }
            offset += slot.len();
        }
        out
    }

    /// In-place scaled add of a gradient set (SGD step when `scale` is
    /// the negative learning rate).
    pub fn axpy(&mut self, scale: f64, other: &AcDitParams) {
        let other_slots = other.slots();
        for ((_, mut dst), (_, src)) in self.slots_mut().into_iter().zip(other_slots) {
            match (&mut dst, src) {
                (SlotMut::Mat(d), SlotRef::Mat(s)) => **d += s.scale(scale),
                (SlotMut::Vec(d), SlotRef::Vec(s)) => **d += s.scale(scale),
                (SlotMut::Scalar(d), SlotRef::Scalar(s)) => **d += scale * *s,
                _ => unreachable!("slot layout mismatch"),
            }
        }
    }
}

/// Scalar conditions of one chunk frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScalars {
    /// Diffusion timestep (shared across the chunk).
    pub t: f64,
    /// Relative time offset from the past anchor, in steps.
    pub k_offset: f64,
    /// Forward action reaching this frame.
    pub action: [f64; 3],
    /// Inverse action from the future anchor back to this frame.
    pub inv_action: [f64; 3],
    /// Relative time to the future anchor, in steps.
    pub k_future: f64,
}

/// One training/verification sample for the block pipeline.
#[derive(Debug, Clone)]
pub struct AcDitBatch {
    /// Noisy target tokens (K frames).
    pub x_t: TokenTensor,
    /// Past anchor tokens (L x d).
    pub z_past: DMatrix<f64>,
    /// Future anchor tokens (L x d).
    pub z_fut: DMatrix<f64>,
    /// Per-frame (past, future) masks in stored orientation.
    pub masks: Vec<(AttentionMask, AttentionMask)>,
    /// Per-frame scalar conditions.
    pub scalars: Vec<FrameScalars>,
    /// The noise the block must predict.
    pub eps: TokenTensor,
}

// ---------------------------------------------------------------------------
// Modulation
// ---------------------------------------------------------------------------

struct ModCache {
    scale: DVector<f64>,
}

fn modulate(
    x: &DMatrix<f64>,
    xi: &DVector<f64>,
    layer: &AttentionLayerParams,
) -> (DMatrix<f64>, ModCache) {
    let scale = &layer.w_scale * xi;
    let shift = &layer.w_shift * xi;
    let mut u = x.clone();
    for j in 0..u.ncols() {
        let s = 1.0 + scale[j];
        let b = shift[j];
        for i in 0..u.nrows() {
            u[(i, j)] = u[(i, j)] * s + b;
        }
    }
    (u, ModCache { scale })
}

/// Returns d_x; accumulates modulation weight grads and d_xi.
fn modulate_backward(
    x: &DMatrix<f64>,
    xi: &DVector<f64>,
    cache: &ModCache,
    d_u: &DMatrix<f64>,
    layer: &AttentionLayerParams,
    grads: &mut AttentionLayerParams,
    d_xi: &mut DVector<f64>,
) -> DMatrix<f64> {
    let mut d_x = d_u.clone();
    let mut d_scale = DVector::zeros(x.ncols());
    let mut d_shift = DVector::zeros(x.ncols());
    for j in 0..x.ncols() {
        let s = 1.0 + cache.scale[j];
        let mut ds = 0.0;
        let mut db = 0.0;
        for i in 0..x.nrows() {
            ds += d_u[(i, j)] * x[(i, j)];
            db += d_u[(i, j)];
            d_x[(i, j)] *= s;
        }
        d_scale[j] = ds;
        d_shift[j] = db;
    }
    grads.w_scale += &d_scale * xi.transpose();
    grads.w_shift += &d_shift * xi.transpose();
    *d_xi += layer.w_scale.transpose() * d_scale + layer.w_shift.transpose() * d_shift;
    d_x
}

// ---------------------------------------------------------------------------
// Per-frame attention layers
// ---------------------------------------------------------------------------

struct FrameLayerCache {
    modc: ModCache,
    u: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    attn: AttentionCache,
    o: DMatrix<f64>,
    out: DMatrix<f64>,
}

/// Residual self-attention over the modulated stream.
fn self_attention(
    x: &DMatrix<f64>,
    xi: &DVector<f64>,
    layer: &AttentionLayerParams,
) -> Result<(DMatrix<f64>, FrameLayerCache), AcditError> {
    let (u, modc) = modulate(x, xi, layer);
    let q = &u * &layer.wq;
    let k = &u * &layer.wk;
    let v = &u * &layer.wv;
    let (o, attn) = attention_forward(&q, &k, &v, None)?;
    let out = &o * &layer.wo;
    let y = x + &out;
    Ok((
        y,
        FrameLayerCache {
            modc,
            u,
            q,
            k,
            v,
            attn,
            o,
            out,
        },
    ))
}

fn self_attention_backward(
    x: &DMatrix<f64>,
    xi: &DVector<f64>,
    layer: &AttentionLayerParams,
    cache: &FrameLayerCache,
    d_y: &DMatrix<f64>,
    grads: &mut AttentionLayerParams,
    d_xi: &mut DVector<f64>,
) -> DMatrix<f64> {
    let mut d_x = d_y.clone();
    let d_out = d_y;
    grads.wo += cache.o.transpose() * d_out;
    let d_o = d_out * layer.wo.transpose();
    let (d_q, d_k, d_v) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &d_o);
    grads.wq += cache.u.transpose() * &d_q;
    grads.wk += cache.u.transpose() * &d_k;
    grads.wv += cache.u.transpose() * &d_v;
    let d_u = &d_q * layer.wq.transpose()
        + &d_k * layer.wk.transpose()
        + &d_v * layer.wv.transpose();
    d_x += modulate_backward(x, xi, &cache.modc, &d_u, layer, grads, d_xi);
    d_x
}

/// Cross-attention: queries from the modulated target stream, keys/values
/// from the (unmodulated) source tokens. Returns the pre-gate output.
fn cross_attention(
    x_q: &DMatrix<f64>,
    src: &DMatrix<f64>,
    xi: &DVector<f64>,
    mask: &AttentionMask,
    layer: &AttentionLayerParams,
) -> Result<(DMatrix<f64>, FrameLayerCache), AcditError> {
    let (u, modc) = modulate(x_q, xi, layer);
    let q = &u * &layer.wq;
    let k = src * &layer.wk;
    let v = src * &layer.wv;
    let (o, attn) = attention_forward(&q, &k, &v, Some(mask))?;
    let out = &o * &layer.wo;
    Ok((
        out.clone(),
        FrameLayerCache {
            modc,
            u,
            q,
            k,
            v,
            attn,
            o,
            out,
        },
    ))
}

/// Returns d_x_q (source gradients are not tracked; the anchors are inputs).
fn cross_attention_backward(
    x_q: &DMatrix<f64>,
    src: &DMatrix<f64>,
    xi: &DVector<f64>,
    layer: &AttentionLayerParams,
    cache: &FrameLayerCache,
    d_out: &DMatrix<f64>,
    grads: &mut AttentionLayerParams,
    d_xi: &mut DVector<f64>,
) -> DMatrix<f64> {
    grads.wo += cache.o.transpose() * d_out;
    let d_o = d_out * layer.wo.transpose();
    let (d_q, d_k, d_v) = attention_backward(&cache.q, &cache.k, &cache.v, &cache.attn, &d_o);
    grads.wq += cache.u.transpose() * &d_q;
    grads.wk += src.transpose() * &d_k;
    grads.wv += src.transpose() * &d_v;
    let d_u = &d_q * layer.wq.transpose();
    modulate_backward(x_q, xi, &cache.modc, &d_u, layer, grads, d_xi)
}

// ---------------------------------------------------------------------------
// Chunk attention along the temporal axis
// ---------------------------------------------------------------------------

struct ChunkAttnCache {
    modc: Vec<ModCache>,
    u: Vec<DMatrix<f64>>,
    q: Vec<DMatrix<f64>>,
    k: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    /// Per spatial token: K x K attention weights.
    weights: Vec<DMatrix<f64>>,
    delta: Vec<DMatrix<f64>>,
    out: Vec<DMatrix<f64>>,
}

/// Temporal mixing across the K frames at each spatial token. The mixture is
/// applied as a delta in value space, so a length-1 chunk contributes
/// exactly nothing regardless of the gate.
fn chunk_attention(
    frames: &[DMatrix<f64>],
    xis: &[DVector<f64>],
    layer: &AttentionLayerParams,
) -> Result<(Vec<DMatrix<f64>>, ChunkAttnCache), AcditError> {
    let k_frames = frames.len();
    let l = frames[0].nrows();
    let d = frames[0].ncols();
    let scale = 1.0 / (d as f64).sqrt();

    let mut modc = Vec::with_capacity(k_frames);
    let mut u = Vec::with_capacity(k_frames);
    let mut q = Vec::with_capacity(k_frames);
    let mut k = Vec::with_capacity(k_frames);
    let mut v = Vec::with_capacity(k_frames);
    for (f, xi) in frames.iter().zip(xis) {
        let (uf, mc) = modulate(f, xi, layer);
        q.push(&uf * &layer.wq);
        k.push(&uf * &layer.wk);
        v.push(f * &layer.wv);
        u.push(uf);
        modc.push(mc);
    }

    let mut weights = Vec::with_capacity(l);
    let mut delta: Vec<DMatrix<f64>> = (0..k_frames).map(|_| DMatrix::zeros(l, d)).collect();
    for token in 0..l {
        let mut logits = DMatrix::zeros(k_frames, k_frames);
        for a in 0..k_frames {
            for b in 0..k_frames {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += q[a][(token, c)] * k[b][(token, c)];
                }
                logits[(a, b)] = dot * scale;
            }
        }
        // Row softmax.
        let mut w = logits;
        for a in 0..k_frames {
            let mut max = f64::NEG_INFINITY;
            for b in 0..k_frames {
                max = max.max(w[(a, b)]);
            }
            let mut sum = 0.0;
            for b in 0..k_frames {
                let e = (w[(a, b)] - max).exp();
                w[(a, b)] = e;
                sum += e;
            }
            for b in 0..k_frames {
                w[(a, b)] /= sum;
            }
        }
        for a in 0..k_frames {
            for c in 0..d {
                let mut mix = 0.0;
                for b in 0..k_frames {
                    mix += w[(a, b)] * v[b][(token, c)];
                }
                delta[a][(token, c)] = mix - v[a][(token, c)];
            }
        }
        weights.push(w);
    }

    let out: Vec<DMatrix<f64>> = delta.iter().map(|df| df * &layer.wo).collect();
    Ok((
        out.clone(),
        ChunkAttnCache {
            modc,
            u,
            q,
            k,
            v,
            weights,
            delta,
            out,
        },
    ))
}

/// Returns per-frame d_x; accumulates layer grads and per-frame d_xi.
#[allow(clippy::too_many_arguments)]
fn chunk_attention_backward(
    frames: &[DMatrix<f64>],
    xis: &[DVector<f64>],
    layer: &AttentionLayerParams,
    cache: &ChunkAttnCache,
    d_out: &[DMatrix<f64>],
    grads: &mut AttentionLayerParams,
    d_xis: &mut [DVector<f64>],
) -> Vec<DMatrix<f64>> {
    let k_frames = frames.len();
    let l = frames[0].nrows();
    let d = frames[0].ncols();
    let scale = 1.0 / (d as f64).sqrt();

    let mut d_delta = Vec::with_capacity(k_frames);
    for f in 0..k_frames {
        grads.wo += cache.delta[f].transpose() * &d_out[f];
        d_delta.push(&d_out[f] * layer.wo.transpose());
    }

    let mut d_q: Vec<DMatrix<f64>> = (0..k_frames).map(|_| DMatrix::zeros(l, d)).collect();
    let mut d_k: Vec<DMatrix<f64>> = (0..k_frames).map(|_| DMatrix::zeros(l, d)).collect();
    let mut d_v: Vec<DMatrix<f64>> = (0..k_frames).map(|_| DMatrix::zeros(l, d)).collect();
    for token in 0..l {
        let w = &cache.weights[token];
        // d_mix = d_delta; the -v term feeds d_v directly.
        let mut d_a = DMatrix::zeros(k_frames, k_frames);
        for a in 0..k_frames {
            for b in 0..k_frames {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += d_delta[a][(token, c)] * cache.v[b][(token, c)];
                }
                d_a[(a, b)] = dot;
            }
            for c in 0..d {
                d_v[a][(token, c)] -= d_delta[a][(token, c)];
            }
        }
        for a in 0..k_frames {
            for b in 0..k_frames {
                for c in 0..d {
                    d_v[b][(token, c)] += w[(a, b)] * d_delta[a][(token, c)];
                }
            }
        }
        // Softmax backward per query frame.
        for a in 0..k_frames {
            let mut dot = 0.0;
            for b in 0..k_frames {
                dot += d_a[(a, b)] * w[(a, b)];
            }
            for b in 0..k_frames {
                let ds = w[(a, b)] * (d_a[(a, b)] - dot) * scale;
                for c in 0..d {
                    d_q[a][(token, c)] += ds * cache.k[b][(token, c)];
                    d_k[b][(token, c)] += ds * cache.q[a][(token, c)];
                }
            }
        }
    }

    let mut d_frames = Vec::with_capacity(k_frames);
    for f in 0..k_frames {
        grads.wq += cache.u[f].transpose() * &d_q[f];
        grads.wk += cache.u[f].transpose() * &d_k[f];
        grads.wv += frames[f].transpose() * &d_v[f];
        let d_u = &d_q[f] * layer.wq.transpose() + &d_k[f] * layer.wk.transpose();
        let mut d_x = &d_v[f] * layer.wv.transpose();
        d_x += modulate_backward(
            &frames[f],
            &xis[f],
            &cache.modc[f],
            &d_u,
            layer,
            grads,
            &mut d_xis[f],
        );
        d_frames.push(d_x);
    }
    d_frames
}

// ---------------------------------------------------------------------------
// Block forward / backward
// ---------------------------------------------------------------------------

struct BlockCache {
    sa: Vec<FrameLayerCache>,
    z_tilde: Vec<DMatrix<f64>>,
    pa: Vec<FrameLayerCache>,
    z1: Vec<DMatrix<f64>>,
    fa: Vec<FrameLayerCache>,
    z2: Vec<DMatrix<f64>>,
    ca: ChunkAttnCache,
}

fn check_block_shapes(
    z: &TokenTensor,
    z_past: &DMatrix<f64>,
    z_fut: &DMatrix<f64>,
    masks: &[(AttentionMask, AttentionMask)],
    conditions: &[DVector<f64>],
) -> Result<(), AcditError> {
    let (l, d, k) = (z.l(), z.d(), z.k());
    if z_past.nrows() != l || z_past.ncols() != d {
        return Err(AcditError::Shape(format!(
            "z_past is {}x{}, expected {l}x{d}",
            z_past.nrows(),
            z_past.ncols()
        )));
    }
    if z_fut.nrows() != l || z_fut.ncols() != d {
        return Err(AcditError::Shape(format!(
            "z_fut is {}x{}, expected {l}x{d}",
            z_fut.nrows(),
            z_fut.ncols()
        )));
    }
    if masks.len() != k {
        return Err(AcditError::Shape(format!(
            "{} mask pairs for {k} frames",
            masks.len()
        )));
    }
    if conditions.len() != k {
        return Err(AcditError::Shape(format!(
            "{} condition vectors for {k} frames",
            conditions.len()
        )));
    }
    for xi in conditions {
        if xi.len() != d {
            return Err(AcditError::Shape(format!(
                "condition dim {} != d {d}",
                xi.len()
            )));
        }
    }
    for (p, f) in masks {
        if p.token_count() != l || f.token_count() != l {
            return Err(AcditError::Shape("mask token count != L".into()));
        }
    }
    Ok(())
}

fn block_forward_cached(
    z: &TokenTensor,
    z_past: &DMatrix<f64>,
    z_fut: &DMatrix<f64>,
    masks: &[(AttentionMask, AttentionMask)],
    conditions: &[DVector<f64>],
    params: &GatedBlockParams,
) -> Result<(TokenTensor, BlockCache), AcditError> {
    check_block_shapes(z, z_past, z_fut, masks, conditions)?;
    let k = z.k();

    let mut sa_caches = Vec::with_capacity(k);
    let mut z_tilde = Vec::with_capacity(k);
    for f in 0..k {
        let (y, cache) = self_attention(&z.frames[f], &conditions[f], &params.sa)?;
        z_tilde.push(y);
        sa_caches.push(cache);
    }

    let mut pa_caches = Vec::with_capacity(k);
    let mut z1 = Vec::with_capacity(k);
    for f in 0..k {
        let (out, cache) =
            cross_attention(&z_tilde[f], z_past, &conditions[f], &masks[f].0, &params.pa)?;
        z1.push(&z_tilde[f] + &out * params.gamma_past);
        pa_caches.push(cache);
    }

    let mut fa_caches = Vec::with_capacity(k);
    let mut z2 = Vec::with_capacity(k);
    for f in 0..k {
        let (out, cache) =
            cross_attention(&z1[f], z_fut, &conditions[f], &masks[f].1, &params.fa)?;
        z2.push(&z1[f] + &out * params.gamma_fut);
        fa_caches.push(cache);
    }

    let (ca_out, ca_cache) = chunk_attention(&z2, conditions, &params.ca)?;
    let z3: Vec<DMatrix<f64>> = (0..k)
        .map(|f| &z2[f] + &ca_out[f] * params.gamma_tau)
        .collect();

    Ok((
        TokenTensor { frames: z3 },
        BlockCache {
            sa: sa_caches,
            z_tilde,
            pa: pa_caches,
            z1,
            fa: fa_caches,
            z2,
            ca: ca_cache,
        },
    ))
}

/// Forward pass of the gated block:
/// z̃ = SA(z; ξ), z1 = z̃ + γ_past·PA(z̃, z_past; M_past, ξ),
/// z2 = z1 + γ_fut·FA(z1, z_fut; M_fut, ξ), z3 = z2 + γ_τ·CA(z2; K).
pub fn block_forward(
    z: &TokenTensor,
    z_past: &DMatrix<f64>,
    z_fut: &DMatrix<f64>,
    masks: &[(AttentionMask, AttentionMask)],
    conditions: &[DVector<f64>],
    params: &GatedBlockParams,
) -> Result<TokenTensor, AcditError> {
    block_forward_cached(z, z_past, z_fut, masks, conditions, params).map(|(out, _)| out)
}

/// The self-attention-only path: what the block computes when every gate is
/// zero.
pub fn sa_only_forward(
    z: &TokenTensor,
    conditions: &[DVector<f64>],
    params: &GatedBlockParams,
) -> Result<TokenTensor, AcditError> {
    let mut frames = Vec::with_capacity(z.k());
    for f in 0..z.k() {
        let (y, _) = self_attention(&z.frames[f], &conditions[f], &params.sa)?;
        frames.push(y);
    }
    Ok(TokenTensor { frames })
}

// ---------------------------------------------------------------------------
// Loss pipeline with gradients
// ---------------------------------------------------------------------------

struct ConditionForward {
    vectors: Vec<ConditionVector>,
    caches: Vec<[EmbedCache; 5]>,
}

fn conditions_forward(
    params: &AcDitParams,
    scalars: &[FrameScalars],
) -> Result<ConditionForward, AcditError> {
    let mut vectors = Vec::with_capacity(scalars.len());
    let mut caches = Vec::with_capacity(scalars.len());
    for s in scalars {
        let (psi_t, c_t) = params.embed_t.forward(&[s.t]);
        let (psi_k, c_k) = params.embed_k.forward(&[s.k_offset]);
        let (psi_a, c_a) = params.embed_a.forward(&s.action);
        let (psi_ai, c_ai) = params.embed_a_inv.forward(&s.inv_action);
        let (psi_kf, c_kf) = params.embed_k_f.forward(&[s.k_future]);
        vectors.push(combine_conditions(
            &psi_t,
            &psi_k,
            &psi_a,
            &psi_ai,
            &psi_kf,
            params.gamma_cond,
        )?);
        caches.push([c_t, c_k, c_a, c_ai, c_kf]);
    }
    Ok(ConditionForward { vectors, caches })
}

fn batch_conditions(
    params: &AcDitParams,
    batch: &AcDitBatch,
) -> Result<ConditionForward, AcditError> {
    if batch.scalars.len() != batch.x_t.k() {
        return Err(AcditError::Shape(format!(
            "{} scalar sets for {} frames",
            batch.scalars.len(),
            batch.x_t.k()
        )));
    }
    conditions_forward(params, &batch.scalars)
}

/// Denoising loss of the full pipeline (embed conditions, run the block,
/// score the noise prediction).
pub fn forward_loss(params: &AcDitParams, batch: &AcDitBatch) -> Result<f64, AcditError> {
    let cond = batch_conditions(params, batch)?;
    let xis: Vec<DVector<f64>> = cond.vectors.iter().map(|c| c.combined.clone()).collect();
    let eps_pred = block_forward(
        &batch.x_t,
        &batch.z_past,
        &batch.z_fut,
        &batch.masks,
        &xis,
        &params.block,
    )?;
    denoising_loss(&batch.eps, &eps_pred)
}

/// Loss and analytic gradients for every parameter (returned in a
/// zero-initialized mirror of the parameter struct).
pub fn loss_and_grads(
    params: &AcDitParams,
    batch: &AcDitBatch,
) -> Result<(f64, AcDitParams), AcditError> {
    let cond = batch_conditions(params, batch)?;
    let xis: Vec<DVector<f64>> = cond.vectors.iter().map(|c| c.combined.clone()).collect();
    let (eps_pred, cache) = block_forward_cached(
        &batch.x_t,
        &batch.z_past,
        &batch.z_fut,
        &batch.masks,
        &xis,
        &params.block,
    )?;
    let loss = denoising_loss(&batch.eps, &eps_pred)?;

    let mut grads = params.zeros_like();
    let k = batch.x_t.k();
    let norm = 2.0 / batch.eps.entry_count() as f64;
    let mut d_xis: Vec<DVector<f64>> = (0..k)
        .map(|_| DVector::zeros(params.config.d))
        .collect();

    // dL/d eps_pred.
    let d_z3: Vec<DMatrix<f64>> = (0..k)
        .map(|f| (&eps_pred.frames[f] - &batch.eps.frames[f]) * norm)
        .collect();

    // Chunk attention.
    let mut d_gamma_tau = 0.0;
    for f in 0..k {
        d_gamma_tau += cache
            .ca
            .out[f]
            .iter()
            .zip(d_z3[f].iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    grads.block.gamma_tau = d_gamma_tau;
    let d_ca_out: Vec<DMatrix<f64>> = d_z3
        .iter()
        .map(|g| g * params.block.gamma_tau)
        .collect();
    let d_from_ca = chunk_attention_backward(
        &cache.z2,
        &xis,
        &params.block.ca,
        &cache.ca,
        &d_ca_out,
        &mut grads.block.ca,
        &mut d_xis,
    );
    let mut d_z2: Vec<DMatrix<f64>> = (0..k).map(|f| &d_z3[f] + &d_from_ca[f]).collect();

    // Future cross-attention.
    let mut d_z1 = Vec::with_capacity(k);
    for f in 0..k {
        grads.block.gamma_fut += cache.fa[f]
            .out
            .iter()
            .zip(d_z2[f].iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
        let d_out = &d_z2[f] * params.block.gamma_fut;
        let d_q_path = cross_attention_backward(
            &cache.z1[f],
            &batch.z_fut,
            &xis[f],
            &params.block.fa,
            &cache.fa[f],
            &d_out,
            &mut grads.block.fa,
            &mut d_xis[f],
        );
        d_z1.push(&d_z2[f] + &d_q_path);
    }
    d_z2.clear();

    // Past cross-attention.
    let mut d_z_tilde = Vec::with_capacity(k);
    for f in 0..k {
        grads.block.gamma_past += cache.pa[f]
            .out
            .iter()
            .zip(d_z1[f].iter())
            .map(|(a, b)| a * b)
            .sum::<f64>();
        let d_out = &d_z1[f] * params.block.gamma_past;
        let d_q_path = cross_attention_backward(
            &cache.z_tilde[f],
            &batch.z_past,
            &xis[f],
            &params.block.pa,
            &cache.pa[f],
            &d_out,
            &mut grads.block.pa,
            &mut d_xis[f],
        );
        d_z_tilde.push(&d_z1[f] + &d_q_path);
    }

    // Self-attention.
    for f in 0..k {
        let _ = self_attention_backward(
            &batch.x_t.frames[f],
            &xis[f],
            &params.block.sa,
            &cache.sa[f],
            &d_z_tilde[f],
            &mut grads.block.sa,
            &mut d_xis[f],
        );
    }

    // Conditions: xi = base + gamma_cond * fut.
    for f in 0..k {
        let d_xi = &d_xis[f];
        grads.gamma_cond += d_xi.dot(&cond.vectors[f].fut);
        let d_fut = d_xi * params.gamma_cond;
        let caches = &cond.caches[f];
        params.embed_t.backward(&caches[0], d_xi, &mut grads.embed_t);
        params.embed_k.backward(&caches[1], d_xi, &mut grads.embed_k);
        params.embed_a.backward(&caches[2], d_xi, &mut grads.embed_a);
        params
            .embed_a_inv
            .backward(&caches[3], &d_fut, &mut grads.embed_a_inv);
        params
            .embed_k_f
            .backward(&caches[4], &d_fut, &mut grads.embed_k_f);
    }

    Ok((loss, grads))
}

/// Compare analytic gradients against central finite differences on
/// `samples` parameters (the four gates always included, the rest drawn at
/// random). Returns the maximum relative error.
pub fn finite_diff_grad_check(
    params: &AcDitParams,
    batch: &AcDitBatch,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, AcditError> {
    let (_, grads) = loss_and_grads(params, batch)?;
    let total = params.flat_len();
    let mut indices = params.gate_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while indices.len() < samples.min(total) {
        let i = rng.random_range(0..total);
        if !indices.contains(&i) {
            indices.push(i);
        }
    }

    let mut probe = params.clone();
    let mut max_rel: f64 = 0.0;
    for &i in &indices {
        probe.add_flat(i, h);
        let plus = forward_loss(&probe, batch)?;
        probe.add_flat(i, -2.0 * h);
        let minus = forward_loss(&probe, batch)?;
        probe.add_flat(i, h);
        let fd = (plus - minus) / (2.0 * h);
        let analytic = grads.get_flat(i);
        if !fd.is_finite() || !analytic.is_finite() {
            return Err(AcditError::NonFinite("gradient check"));
        }
        let denom = fd.abs().max(analytic.abs());
        let rel = if denom < 1e-10 {
            0.0
        } else {
            (fd - analytic).abs() / denom
        };
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_masks(l: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<(AttentionMask, AttentionMask)> {
        (0..k)
            .map(|_| {
                let mut past = AttentionMask::all_true(l);
                let mut fut = AttentionMask::all_true(l);
                for _ in 0..l / 3 {
                    past.constrain(rng.random_range(0..l), rng.random_range(0..l));
                    fut.constrain(rng.random_range(0..l), rng.random_range(0..l));
                }
                (past, fut)
            })
            .collect()
    }

    fn random_batch(config: &AcDitConfig, seed: u64) -> AcDitBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, l, d) = (config.k, config.l, config.d);
        let x_t = TokenTensor::random(k, l, d, &mut rng);
        let z_past = DMatrix::from_fn(l, d, |_, _| StandardNormal.sample(&mut rng));
        let z_fut = DMatrix::from_fn(l, d, |_, _| StandardNormal.sample(&mut rng));
        let masks = random_masks(l, k, &mut rng);
        let scalars: Vec<FrameScalars> = (0..k)
            .map(|f| FrameScalars {
                t: 0.37,
                k_offset: f as f64 + 1.0,
                action: [0.4, -0.1, 0.05],
                inv_action: [-0.4, 0.1, -0.05],
                k_future: (k - f) as f64,
            })
            .collect();
        let eps = TokenTensor::random(k, l, d, &mut rng);
        AcDitBatch {
            x_t,
            z_past,
            z_fut,
            masks,
            scalars,
            eps,
        }
    }

    #[test]
    fn zero_gates_match_sa_only_path_bitwise() {
        let config = AcDitConfig::small();
        let params = AcDitParams::init(config, 3);
        assert_eq!(params.block.gamma_past, 0.0);
        assert_eq!(params.block.gamma_fut, 0.0);
        assert_eq!(params.block.gamma_tau, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let batch = random_batch(&config, 100 + trial);
            let cond = conditions_forward(&params, &batch.scalars).unwrap();
            let xis: Vec<DVector<f64>> =
                cond.vectors.iter().map(|c| c.combined.clone()).collect();
            let full = block_forward(
                &batch.x_t,
                &batch.z_past,
                &batch.z_fut,
                &batch.masks,
                &xis,
                &params.block,
            )
            .unwrap();
            let sa = sa_only_forward(&batch.x_t, &xis, &params.block).unwrap();
            for (a, b) in full.frames.iter().zip(&sa.frames) {
                assert_eq!(a, b, "bitwise identity at init violated");
            }
            let _ = rng.random::<u64>();
        }
    }

    #[test]
    fn single_frame_chunk_attention_is_noop() {
        let config = AcDitConfig {
            k: 1,
            ..AcDitConfig::small()
        };
        let mut params = AcDitParams::init(config, 5);
        params.block.gamma_tau = 1.7;
        let batch = random_batch(&config, 42);
        let cond = conditions_forward(&params, &batch.scalars).unwrap();
        let xis: Vec<DVector<f64>> = cond.vectors.iter().map(|c| c.combined.clone()).collect();
        let (ca_out, _) = chunk_attention(&batch.x_t.frames, &xis, &params.block.ca).unwrap();
        assert!(ca_out[0].iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn gate_isolation_for_future_anchor() {
        // With gamma_fut = 0 the future tokens cannot influence the output.
        let config = AcDitConfig::small();
        let mut params = AcDitParams::init(config, 7);
        params.block.gamma_past = 0.3;
        params.block.gamma_tau = 0.2;
        params.block.gamma_fut = 0.0;
        let mut batch = random_batch(&config, 9);
        let cond = conditions_forward(&params, &batch.scalars).unwrap();
        let xis: Vec<DVector<f64>> = cond.vectors.iter().map(|c| c.combined.clone()).collect();
        let base = block_forward(
            &batch.x_t,
            &batch.z_past,
            &batch.z_fut,
            &batch.masks,
            &xis,
            &params.block,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        batch.z_fut = DMatrix::from_fn(config.l, config.d, |_, _| StandardNormal.sample(&mut rng));
        let perturbed = block_forward(
            &batch.x_t,
            &batch.z_past,
            &batch.z_fut,
            &batch.masks,
            &xis,
            &params.block,
        )
        .unwrap();
        for (a, b) in base.frames.iter().zip(&perturbed.frames) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn gamma_fut_gradient_is_exactly_zero_when_fa_output_vanishes() {
        let config = AcDitConfig::small();
        let mut params = AcDitParams::init(config, 13);
        params.block.gamma_past = 0.5;
        params.block.gamma_fut = 0.5;
        params.block.gamma_tau = 0.5;
        params.gamma_cond = 0.5;
        // Zero value projection makes the FA branch output identically zero.
        params.block.fa.wv = DMatrix::zeros(config.d, config.d);
        let batch = random_batch(&config, 21);
        let (_, grads) = loss_and_grads(&params, &batch).unwrap();
        assert_eq!(grads.block.gamma_fut, 0.0);
    }

    #[test]
    fn linear_value_path_gradient_is_machine_exact() {
        // A single value projection behind an all-true mask is linear in wv,
        // so central differences are exact up to rounding.
        let config = AcDitConfig::small();
        let params = AcDitParams::init(config, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = config.l;
        let src = DMatrix::from_fn(l, config.d, |_, _| StandardNormal.sample(&mut rng));
        let q = DMatrix::from_fn(l, config.d, |_, _| StandardNormal.sample(&mut rng));
        let k = DMatrix::from_fn(l, config.d, |_, _| StandardNormal.sample(&mut rng));
        let target = DMatrix::from_fn(l, config.d, |_, _| StandardNormal.sample(&mut rng));
        let mask = AttentionMask::all_true(l);

        let objective = |wv: &DMatrix<f64>| -> f64 {
            let v = &src * wv;
            let (out, _) = attention_forward(&q, &k, &v, Some(&mask)).unwrap();
            (&out - &target).iter().map(|&x| x * x).sum::<f64>()
        };

        let mut wv = params.block.pa.wv.clone();
        let (out, cache) = {
            let v = &src * &wv;
            attention_forward(&q, &k, &v, Some(&mask)).unwrap()
        };
        let d_out = (&out - &target) * 2.0;
        let (_, _, d_v) = attention_backward(&q, &k, &(&src * &wv), &cache, &d_out);
        let analytic = src.transpose() * d_v;

        let h = 1e-5;
        for (r, c) in [(0usize, 0usize), (3, 4), (7, 1)] {
            let orig = wv[(r, c)];
            wv[(r, c)] = orig + h;
            let plus = objective(&wv);
            wv[(r, c)] = orig - h;
            let minus = objective(&wv);
            wv[(r, c)] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic[(r, c)];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-12);
            assert!(rel < 1e-9, "linear path rel error {rel}");
        }
    }

    #[test]
    fn full_block_gradients_match_finite_differences() {
        let config = AcDitConfig::small();
        let mut params = AcDitParams::init(config, 23);
        params.block.gamma_past = 0.5;
        params.block.gamma_fut = 0.5;
        params.block.gamma_tau = 0.5;
        params.gamma_cond = 0.5;
        let batch = random_batch(&config, 31);
        let max_rel = finite_diff_grad_check(&params, &batch, 1e-5, 64, 7).unwrap();
        assert!(max_rel < 1e-4, "max relative gradient error {max_rel}");
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let config = AcDitConfig::small();
        let params = AcDitParams::init(config, 3);
        let mut batch = random_batch(&config, 1);
        batch.z_past = DMatrix::zeros(config.l + 1, config.d);
        assert!(matches!(
            forward_loss(&params, &batch),
            Err(AcditError::Shape(_))
        ));
    }
}
