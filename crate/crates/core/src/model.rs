//! The bag classifier: linear projection, a two-layer post-norm self-attention
//! encoder, prototype similarity statistics, bias-augmented multi-head
//! attention pooling and a two-layer perceptron head.
//!
//! The forward pass is built on a [`Tape`] so the same code path serves
//! inference and training. Bags in a batch occupy consecutive blocks of `W`
//! rows; every op is row-wise or confined to a bag's rows, so one bag's
//! outputs never depend on its batch mates.

use crate::autodiff::{Segments, Tape, Var};
use crate::bagging::Bag;
use crate::error::{Error, Result};
use crate::ingest::{kv_usize, parse_kv};
use crate::tensor::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Floor applied to norms before L2 normalization.
pub const NORM_FLOOR: f64 = 1e-8;
/// Temperature of the soft prototype assignment used for `E_bag`.
pub const ASSIGN_TEMPERATURE: f64 = 0.1;
/// Entropy floor inside logarithms.
pub const ENTROPY_EPS: f64 = 1e-8;
/// Classifier logits are clamped to `[-LOGIT_LIMIT, LOGIT_LIMIT]`.
pub const LOGIT_LIMIT: f64 = 30.0;
pub const ENCODER_LAYERS: usize = 2;

const CKPT_MAGIC: &[u8] = b"LMCKPT1\n";
const CKPT_VERSION: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Input embedding width.
    pub d: usize,
    pub d_h: usize,
    pub n_proto: usize,
    /// Attention pooling heads.
    pub k_heads: usize,
    pub d_a: usize,
    /// Self-attention heads in each encoder layer.
    pub heads_enc: usize,
    /// Classifier hidden width.
    pub h_c: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_h: 32,
            n_proto: 8,
            k_heads: 4,
            d_a: 16,
            heads_enc: 4,
            h_c: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d < 2 {
            return bad("d must be >= 2");
        }
        if self.d_h < 4 {
            return bad("d_h must be >= 4");
        }
        if self.n_proto < 1 || self.k_heads < 1 || self.d_a < 1 || self.h_c < 1 {
            return bad("n_proto, k_heads, d_a and h_c must be >= 1");
        }
        if self.heads_enc < 1 || self.d_h % self.heads_enc != 0 {
            return bad("heads_enc must divide d_h");
        }
        Ok(())
    }

    pub fn classifier_inputs(&self) -> usize {
        self.k_heads * self.d_h + 3
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerSlots {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ff1_w: usize,
    ff1_b: usize,
    ff2_w: usize,
    ff2_b: usize,
}

/// Index of every named parameter tensor.
#[derive(Clone, Debug)]
struct Slots {
    proj_w: usize,
    proj_b: usize,
    layers: Vec<LayerSlots>,
    protos: usize,
    pool_v: usize,
    pool_u: usize,
    beta_raw: usize,
    cls_w1: usize,
    cls_b1: usize,
    cls_w2: usize,
    cls_b2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Xavier,
    Zeros,
    Ones,
    Sphere,
    BetaRaw,
}

struct Layout {
    specs: Vec<(String, usize, usize, Init)>,
    slots: Slots,
}

fn layout(c: &ModelConfig) -> Layout {
    let mut specs = Vec::new();
    let mut add = |name: String, r: usize, cc: usize, init: Init| {
        specs.push((name, r, cc, init));
        specs.len() - 1
    };
    let h = c.d_h;
    let proj_w = add("proj.w".into(), c.d, h, Init::Xavier);
    let proj_b = add("proj.b".into(), 1, h, Init::Zeros);
    let mut layers = Vec::new();
    for l in 0..ENCODER_LAYERS {
        let p = |s: &str| format!("enc.{l}.{s}");
        layers.push(LayerSlots {
            ln1_g: add(p("ln1.g"), 1, h, Init::Ones),
            ln1_b: add(p("ln1.b"), 1, h, Init::Zeros),
            wq: add(p("attn.wq"), h, h, Init::Xavier),
            bq: add(p("attn.bq"), 1, h, Init::Zeros),
            wk: add(p("attn.wk"), h, h, Init::Xavier),
            bk: add(p("attn.bk"), 1, h, Init::Zeros),
            wv: add(p("attn.wv"), h, h, Init::Xavier),
            bv: add(p("attn.bv"), 1, h, Init::Zeros),
            wo: add(p("attn.wo"), h, h, Init::Xavier),
            bo: add(p("attn.bo"), 1, h, Init::Zeros),
            ln2_g: add(p("ln2.g"), 1, h, Init::Ones),
            ln2_b: add(p("ln2.b"), 1, h, Init::Zeros),
            ff1_w: add(p("ff1.w"), h, 4 * h, Init::Xavier),
            ff1_b: add(p("ff1.b"), 1, 4 * h, Init::Zeros),
            ff2_w: add(p("ff2.w"), 4 * h, h, Init::Xavier),
            ff2_b: add(p("ff2.b"), 1, h, Init::Zeros),
        });
    }
    let protos = add("prototypes".into(), c.n_proto, h, Init::Sphere);
    let pool_v = add("pool.v".into(), h, c.k_heads * c.d_a, Init::Xavier);
    let pool_u = add("pool.u".into(), c.k_heads, c.d_a, Init::Xavier);
    let beta_raw = add("pool.beta_raw".into(), 1, 1, Init::BetaRaw);
    let cls_w1 = add("cls.w1".into(), c.classifier_inputs(), c.h_c, Init::Xavier);
    let cls_b1 = add("cls.b1".into(), 1, c.h_c, Init::Zeros);
    let cls_w2 = add("cls.w2".into(), c.h_c, 1, Init::Xavier);
    let cls_b2 = add("cls.b2".into(), 1, 1, Init::Zeros);
    Layout {
        specs,
        slots: Slots {
            proj_w,
            proj_b,
            layers,
            protos,
            pool_v,
            pool_u,
            beta_raw,
            cls_w1,
            cls_b1,
            cls_w2,
            cls_b2,
        },
    }
}

/// All learnable state, as named tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
    slots: Slots,
}

impl<T: Real> PartialEq for ModelParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.names == other.names && self.tensors == other.tensors
    }
}

impl<T: Real> ModelParams<T> {
    /// Seeded initialization: Xavier-uniform weights, zero biases, unit
    /// layer-norm gains, prototypes uniform on the unit sphere and `beta = 1`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let lay = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, r, c, init) in lay.specs {
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; r * c],
                Init::Ones => vec![1.0; r * c],
                Init::Xavier => {
                    let lim = (6.0 / (r + c) as f64).sqrt();
                    (0..r * c).map(|_| rng.gen_range(-lim..lim)).collect()
                }
                Init::Sphere => {
                    let mut v = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        let row: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
                        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
                        v.extend(row.iter().map(|x| x / n));
                    }
                    v
                }
                // softplus(ln(e - 1)) = 1
                Init::BetaRaw => vec![(std::f64::consts::E - 1.0).ln(); r * c],
            };
            names.push(name);
            tensors.push(Tensor::from_vec(r, c, data.into_iter().map(T::lit).collect()));
        }
        Ok(Self {
            config,
            names,
            tensors,
            slots: lay.slots,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Current pooling bias coefficient `beta = softplus(raw)`.
    pub fn beta(&self) -> f64 {
        let raw = self.tensors[self.slots.beta_raw].data[0].as_f64();
        if raw > 0.0 {
            raw + (-raw).exp().ln_1p()
        } else {
            raw.exp().ln_1p()
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            slots: self.slots.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Register every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }
}

/// Tape handles of the parameter tensors, in [`ModelParams::names`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: Vec<Var>,
}

/// A batch laid out for the tape: `B*W x d` embeddings and the row mask.
pub struct BatchInput<T> {
    pub x: Tensor<T>,
    pub seg: Segments,
}

impl<T: Real> BatchInput<T> {
    pub fn from_bags(bags: &[&Bag], d: usize) -> Result<Self> {
        let first = bags.first().ok_or(Error::EmptyInput)?;
        let w = first.width();
        let mut data = Vec::with_capacity(bags.len() * w * d);
        let mut mask = Vec::with_capacity(bags.len() * w);
        for b in bags {
            if b.width() != w || b.embeddings.len() != w * d {
                return Err(Error::ShapeMismatch(format!(
                    "bag of width {} with {} floats, expected W={w}, d={d}",
                    b.width(),
                    b.embeddings.len()
                )));
            }
            if !b.mask.iter().any(|&m| m) {
                return Err(Error::ShapeMismatch("bag without valid positions".into()));
            }
            data.extend(b.embeddings.iter().map(|&v| T::lit(v as f64)));
            mask.extend_from_slice(&b.mask);
        }
        Ok(Self {
            x: Tensor::from_vec(bags.len() * w, d, data),
            seg: Segments::new(w, mask),
        })
    }

    pub fn bags(&self) -> usize {
        self.seg.count()
    }
}

/// Handles to the intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GraphOutput {
    pub h: Var,
    pub z: Var,
    /// `n x N_p` similarities.
    pub sim: Var,
    /// `n x 1` max similarity per instance.
    pub m: Var,
    /// `n x 1` anomaly-candidate bias `1 - m`.
    pub bias: Var,
    pub m_bag: Var,
    pub e_bag: Var,
    pub v_bag: Var,
    /// `n x K` pooling logits before the masked softmax.
    pub attn_logits: Var,
    /// `n x K` pooling attention.
    pub attn: Var,
    /// `B x K*d_h`.
    pub zcat: Var,
    pub logit: Var,
    pub prob: Var,
}

pub(crate) fn project_graph<T: Real>(tape: &mut Tape<T>, p: &ModelParams<T>, bp: &BoundParams, x: Var) -> Var {
    let s = &p.slots;
    let xw = tape.matmul(x, bp.vars[s.proj_w]);
    tape.add_row(xw, bp.vars[s.proj_b])
}

fn linear<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

pub(crate) fn encode_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<T>,
    bp: &BoundParams,
    h: Var,
    seg: &Segments,
) -> Var {
    let v = &bp.vars;
    let mut x = h;
    for l in &p.slots.layers {
        let q = linear(tape, x, v[l.wq], v[l.bq]);
        let k = linear(tape, x, v[l.wk], v[l.bk]);
        let vv = linear(tape, x, v[l.wv], v[l.bv]);
        let att = tape.self_attention(q, k, vv, p.config.heads_enc, seg);
        let o = linear(tape, att, v[l.wo], v[l.bo]);
        let r = tape.add(x, o);
        x = tape.layer_norm(r, v[l.ln1_g], v[l.ln1_b]);
        let f = linear(tape, x, v[l.ff1_w], v[l.ff1_b]);
        let f = tape.gelu(f);
        let f = linear(tape, f, v[l.ff2_w], v[l.ff2_b]);
        let r = tape.add(x, f);
        x = tape.layer_norm(r, v[l.ln2_g], v[l.ln2_b]);
    }
    x
}

pub(crate) struct ProtoVars {
    sim: Var,
    m: Var,
    bias: Var,
    m_bag: Var,
    e_bag: Var,
    v_bag: Var,
}

fn check_norms<T: Real>(t: &Tensor<T>, rows: impl Iterator<Item = usize>) -> Result<()> {
    for r in rows {
        let n = t.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
        if !(n >= NORM_FLOOR) {
            return Err(Error::DegenerateVector(r));
        }
    }
    Ok(())
}

pub(crate) fn prototype_graph<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    protos: Var,
    n_proto: usize,
    seg: &Segments,
) -> Result<ProtoVars> {
    check_norms(tape.value(z), (0..seg.rows()).filter(|&r| seg.mask[r]))?;
    check_norms(tape.value(protos), 0..n_proto)?;
    let floor = T::lit(NORM_FLOOR);
    let zn = tape.l2_normalize_rows(z, floor);
    let pn = tape.l2_normalize_rows(protos, floor);
    let dist = tape.pair_dist(zn, pn);
    let sim = tape.inv_one_plus(dist);
    let m = tape.row_max(sim);
    let bias = tape.affine(m, -T::one(), T::one());
    let m_bag = tape.seg_max(m, seg);
    let v_bag = tape.seg_mean(m, seg);
    let q = tape.row_softmax(sim, T::lit(1.0 / ASSIGN_TEMPERATURE));
    let qbar = tape.seg_mean(q, seg);
    let e_bag = tape.norm_entropy_rows(qbar, T::lit(ENTROPY_EPS));
    Ok(ProtoVars {
        sim,
        m,
        bias,
        m_bag,
        e_bag,
        v_bag,
    })
}

pub(crate) fn pool_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<T>,
    bp: &BoundParams,
    z: Var,
    bias: Var,
    seg: &Segments,
) -> (Var, Var, Var) {
    let s = &p.slots;
    let proj = tape.matmul(z, bp.vars[s.pool_v]);
    let act = tape.tanh(proj);
    let logits = tape.grouped_dot(act, bp.vars[s.pool_u]);
    let beta = tape.softplus(bp.vars[s.beta_raw]);
    let logits = tape.add_scaled_col(logits, bias, beta);
    let attn = tape.seg_softmax(logits, seg);
    let zcat = tape.seg_pool(attn, z, seg);
    (logits, attn, zcat)
}

pub(crate) fn classify_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<T>,
    bp: &BoundParams,
    features: Var,
) -> (Var, Var) {
    let s = &p.slots;
    let hdn = linear(tape, features, bp.vars[s.cls_w1], bp.vars[s.cls_b1]);
    let hdn = tape.tanh(hdn);
    let logit = linear(tape, hdn, bp.vars[s.cls_w2], bp.vars[s.cls_b2]);
    let prob = tape.sigmoid_clamped(logit, T::lit(LOGIT_LIMIT));
    (logit, prob)
}

/// Full forward composition on `tape`.
pub fn forward_graph<T: Real>(
    tape: &mut Tape<T>,
    p: &ModelParams<T>,
    bp: &BoundParams,
    input: &BatchInput<T>,
) -> Result<GraphOutput> {
    let c = &p.config;
    if input.x.cols != c.d {
        return Err(Error::ShapeMismatch(format!("input width {} != d {}", input.x.cols, c.d)));
    }
    let x = tape.leaf(input.x.clone());
    let h = project_graph(tape, p, bp, x);
    let z = encode_graph(tape, p, bp, h, &input.seg);
    let pv = prototype_graph(tape, z, bp.vars[p.slots.protos], c.n_proto, &input.seg)?;
    let (attn_logits, attn, zcat) = pool_graph(tape, p, bp, z, pv.bias, &input.seg);
    let features = tape.concat_cols(&[zcat, pv.m_bag, pv.e_bag, pv.v_bag]);
    let (logit, prob) = classify_graph(tape, p, bp, features);
    Ok(GraphOutput {
        h,
        z,
        sim: pv.sim,
        m: pv.m,
        bias: pv.bias,
        m_bag: pv.m_bag,
        e_bag: pv.e_bag,
        v_bag: pv.v_bag,
        attn_logits,
        attn,
        zcat,
        logit,
        prob,
    })
}

/// Prototype statistics of one bag. Per-position vectors have length `W`;
/// padded positions hold zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeStats {
    /// `W x N_p` similarities, row-major.
    pub sim: Vec<f64>,
    pub n_proto: usize,
    pub m: Vec<f64>,
    pub b: Vec<f64>,
    pub m_bag: f64,
    pub e_bag: f64,
    pub v_bag: f64,
}

impl PrototypeStats {
    pub fn features(&self) -> [f64; 3] {
        [self.m_bag, self.e_bag, self.v_bag]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Bag anomaly probability, computed in f64 from the clamped logit.
    pub p: f64,
    pub logit: f64,
    /// `K x W`, row-major; rows sum to one over valid positions.
    pub attention: Vec<f64>,
    /// `K x W` pooling logits; zero at padded positions. Same order as
    /// `attention` within a head but free of f32 underflow ties.
    pub attention_logits: Vec<f64>,
    pub k_heads: usize,
    pub zcat: Vec<f64>,
    pub stats: PrototypeStats,
}

impl ForwardOutput {
    pub fn head(&self, k: usize) -> &[f64] {
        let w = self.attention.len() / self.k_heads;
        &self.attention[k * w..(k + 1) * w]
    }
}

pub fn probability(logit: f64) -> f64 {
    let l = logit.clamp(-LOGIT_LIMIT, LOGIT_LIMIT);
    1.0 / (1.0 + (-l).exp())
}

fn collect_outputs<T: Real>(tape: &Tape<T>, g: &GraphOutput, seg: &Segments, c: &ModelConfig) -> Vec<ForwardOutput> {
    let w = seg.width;
    let kk = c.k_heads;
    let np = c.n_proto;
    let attn = tape.value(g.attn);
    let logits = tape.value(g.attn_logits);
    let sim = tape.value(g.sim);
    let m = tape.value(g.m);
    let bias = tape.value(g.bias);
    let zcat = tape.value(g.zcat);
    (0..seg.count())
        .map(|b| {
            let mut attention = vec![0.0; kk * w];
            let mut attention_logits = vec![0.0; kk * w];
            let mut s = vec![0.0; w * np];
            let mut mv = vec![0.0; w];
            let mut bv = vec![0.0; w];
            for i in 0..w {
                let r = b * w + i;
                if !seg.mask[r] {
                    continue;
                }
                for k in 0..kk {
                    attention[k * w + i] = attn.at(r, k).as_f64();
                    attention_logits[k * w + i] = logits.at(r, k).as_f64();
                }
                for j in 0..np {
                    s[i * np + j] = sim.at(r, j).as_f64();
                }
                mv[i] = m.data[r].as_f64();
                bv[i] = bias.data[r].as_f64();
            }
            let logit = tape.value(g.logit).data[b].as_f64();
            ForwardOutput {
                p: probability(logit),
                logit,
                attention,
                attention_logits,
                k_heads: kk,
                zcat: zcat.row(b).iter().map(|v| v.as_f64()).collect(),
                stats: PrototypeStats {
                    sim: s,
                    n_proto: np,
                    m: mv,
                    b: bv,
                    m_bag: tape.value(g.m_bag).data[b].as_f64(),
                    e_bag: tape.value(g.e_bag).data[b].as_f64(),
                    v_bag: tape.value(g.v_bag).data[b].as_f64(),
                },
            }
        })
        .collect()
}

/// Forward a batch of bags with uniform `W` and `d`.
pub fn forward<T: Real>(params: &ModelParams<T>, bags: &[&Bag]) -> Result<Vec<ForwardOutput>> {
    let input = BatchInput::<T>::from_bags(bags, params.config.d)?;
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let g = forward_graph(&mut tape, params, &bp, &input)?;
    Ok(collect_outputs(&tape, &g, &input.seg, &params.config))
}

/// Forward `bags` in chunks of `batch` (outputs identical to one big batch).
pub fn forward_all<T: Real>(params: &ModelParams<T>, bags: &[Bag], batch: usize) -> Result<Vec<ForwardOutput>> {
    let mut out = Vec::with_capacity(bags.len());
    for chunk in bags.chunks(batch.max(1)) {
        let refs: Vec<&Bag> = chunk.iter().collect();
        out.extend(forward(params, &refs)?);
    }
    Ok(out)
}

fn mask_segments(mask: &[bool]) -> Result<Segments> {
    if mask.is_empty() || !mask.iter().any(|&m| m) {
        return Err(Error::ShapeMismatch("mask needs at least one valid position".into()));
    }
    Ok(Segments::new(mask.len(), mask.to_vec()))
}

/// `H = X W_proj + b_proj` for one bag (`W x d`).
pub fn project<T: Real>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols != params.config.d {
        return Err(Error::ShapeMismatch(format!("X has {} columns, d = {}", x.cols, params.config.d)));
    }
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let h = project_graph(&mut tape, params, &bp, xv);
    Ok(tape.value(h).clone())
}

/// Masked two-layer encoder over one bag (`W x d_h`).
pub fn encode<T: Real>(params: &ModelParams<T>, h: &Tensor<T>, mask: &[bool]) -> Result<Tensor<T>> {
    if h.cols != params.config.d_h || h.rows != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "H is {}x{}, expected {}x{}",
            h.rows,
            h.cols,
            mask.len(),
            params.config.d_h
        )));
    }
    let seg = mask_segments(mask)?;
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let hv = tape.leaf(h.clone());
    let z = encode_graph(&mut tape, params, &bp, hv, &seg);
    Ok(tape.value(z).clone())
}

/// Similarity statistics of `z` (`W x d_h`) against prototypes (`N_p x d_h`).
pub fn prototype_stats<T: Real>(z: &Tensor<T>, mask: &[bool], protos: &Tensor<T>) -> Result<PrototypeStats> {
    if z.cols != protos.cols || z.rows != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "Z is {}x{}, prototypes {}x{}, mask {}",
            z.rows,
            z.cols,
            protos.rows,
            protos.cols,
            mask.len()
        )));
    }
    let seg = mask_segments(mask)?;
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let pv = tape.leaf(protos.clone());
    let st = prototype_graph(&mut tape, zv, pv, protos.rows, &seg)?;
    let np = protos.rows;
    let w = mask.len();
    let mut sim = vec![0.0; w * np];
    let mut m = vec![0.0; w];
    let mut b = vec![0.0; w];
    for i in (0..w).filter(|&i| mask[i]) {
        for j in 0..np {
            sim[i * np + j] = tape.value(st.sim).at(i, j).as_f64();
        }
        m[i] = tape.value(st.m).data[i].as_f64();
        b[i] = tape.value(st.bias).data[i].as_f64();
    }
    Ok(PrototypeStats {
        sim,
        n_proto: np,
        m,
        b,
        m_bag: tape.value(st.m_bag).data[0].as_f64(),
        e_bag: tape.value(st.e_bag).data[0].as_f64(),
        v_bag: tape.value(st.v_bag).data[0].as_f64(),
    })
}

/// Bias-augmented multi-head attention pooling of one bag. Returns the
/// attention as `K x W` and the concatenated pooled vector.
pub fn attention_pool<T: Real>(
    params: &ModelParams<T>,
    z: &Tensor<T>,
    bias: &[T],
    mask: &[bool],
) -> Result<(Tensor<T>, Vec<T>)> {
    let c = &params.config;
    if z.cols != c.d_h || z.rows != mask.len() || bias.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "Z is {}x{}, bias {}, mask {}",
            z.rows,
            z.cols,
            bias.len(),
            mask.len()
        )));
    }
    let seg = mask_segments(mask)?;
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let zv = tape.leaf(z.clone());
    let bv = tape.leaf(Tensor::from_vec(bias.len(), 1, bias.to_vec()));
    let (_, attn, zcat) = pool_graph(&mut tape, params, &bp, zv, bv, &seg);
    let a = tape.value(attn);
    let w = mask.len();
    let mut out = Tensor::zeros(c.k_heads, w);
    for i in 0..w {
        for k in 0..c.k_heads {
            out.data[k * w + i] = a.at(i, k);
        }
    }
    Ok((out, tape.value(zcat).data.clone()))
}

/// Bag probability from `[Z_cat ; F_p]`.
pub fn classify<T: Real>(params: &ModelParams<T>, zcat: &[T], fp: [T; 3]) -> Result<f64> {
    let c = &params.config;
    if zcat.len() + 3 != c.classifier_inputs() {
        return Err(Error::ShapeMismatch(format!(
            "classifier input {} != {}",
            zcat.len() + 3,
            c.classifier_inputs()
        )));
    }
    let mut feats = zcat.to_vec();
    feats.extend_from_slice(&fp);
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let fv = tape.leaf(Tensor::from_vec(1, feats.len(), feats));
    let (logit, _) = classify_graph(&mut tape, params, &bp, fv);
    Ok(probability(tape.value(logit).data[0].as_f64()))
}

/// Write a checkpoint: magic, key=value header ending in `end`, then for each
/// tensor a `name rows cols` line followed by its f32 little-endian data.
pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>) -> Result<()> {
    let c = &params.config;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write!(
        w,
        "version={CKPT_VERSION}\nd={}\nd_h={}\nn_proto={}\nk_heads={}\nd_a={}\nheads_enc={}\nh_c={}\nseed={}\ntensors={}\nend\n",
        c.d,
        c.d_h,
        c.n_proto,
        c.k_heads,
        c.d_a,
        c.heads_enc,
        c.h_c,
        c.seed,
        params.tensors.len()
    )?;
    for (name, t) in params.names.iter().zip(&params.tensors) {
        writeln!(w, "{name} {} {}", t.rows, t.cols)?;
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = vec![0u8; CKPT_MAGIC.len()];
    r.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let mut header = String::new();
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        if line.trim() == "end" {
            break;
        }
        header.push_str(&line);
    }
    let kv = parse_kv(&header)?;
    if kv_usize(&kv, "version")? != CKPT_VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let config = ModelConfig {
        d: kv_usize(&kv, "d")?,
        d_h: kv_usize(&kv, "d_h")?,
        n_proto: kv_usize(&kv, "n_proto")?,
        k_heads: kv_usize(&kv, "k_heads")?,
        d_a: kv_usize(&kv, "d_a")?,
        heads_enc: kv_usize(&kv, "heads_enc")?,
        h_c: kv_usize(&kv, "h_c")?,
        seed: kv
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad seed".into()))?,
    };
    let mut params = ModelParams::<f32>::init(config)?;
    let count = kv_usize(&kv, "tensors")?;
    if count != params.tensors.len() {
        return Err(Error::Format(format!("{count} tensors, expected {}", params.tensors.len())));
    }
    for i in 0..count {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, rows, cols] = parts[..] else {
            return Err(Error::Format(format!("bad tensor line `{}`", line.trim())));
        };
        let (rows, cols): (usize, usize) = (
            rows.parse().map_err(|_| Error::Format("bad rows".into()))?,
            cols.parse().map_err(|_| Error::Format("bad cols".into()))?,
        );
        if name != params.names[i] || (rows, cols) != params.tensors[i].shape() {
            return Err(Error::Format(format!("unexpected tensor {name} {rows}x{cols}")));
        }
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw)?;
        params.tensors[i].data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
    }
    Ok(params)
}
