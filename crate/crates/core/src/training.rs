//! Training with prototype margins, attention sharpening and counterfactual
//! consistency.
//!
//! Each mini-batch runs a forward pass, then (for positive bags only) zeroes
//! the key instance of every positive bag and runs a second forward pass on
//! the same tape. The total loss is backpropagated through both passes.
//! Instance labels are never read here.

use crate::autodiff::{Tape, Var};
use crate::bagging::{Bag, BagDataset};
use crate::error::{Error, Result};
use crate::eval::{prf_at_threshold, select_threshold};
use crate::model::{forward_all, forward_graph, BatchInput, ModelParams, LOGIT_LIMIT};
use crate::optim::Adam;
use crate::tensor::Real;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// RNG stream reserved for the sampler; parameter init uses stream 0.
pub const SAMPLER_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_p: f64,
    pub lambda_a: f64,
    pub lambda_c: f64,
    pub delta_p: f64,
    pub delta_e: f64,
    pub w_ent: f64,
    pub delta_c: f64,
    pub eps: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub use_consistency: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_p: 0.1,
            lambda_a: 0.01,
            lambda_c: 0.5,
            delta_p: 0.7,
            delta_e: 0.5,
            w_ent: 1.0,
            delta_c: 0.3,
            eps: 1e-8,
            gamma: 2.0,
            alpha: 0.25,
            use_consistency: true,
            epochs: 50,
            batch_size: 32,
            lr: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_p", self.lambda_p),
            ("lambda_a", self.lambda_a),
            ("lambda_c", self.lambda_c),
            ("delta_p", self.delta_p),
            ("delta_e", self.delta_e),
            ("w_ent", self.w_ent),
            ("eps", self.eps),
            ("gamma", self.gamma),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.delta_c) {
            return Err(Error::Config(format!("delta_c must lie in [0, 1], got {}", self.delta_c)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Mean focal loss over a batch of probabilities.
pub fn focal_loss(p: &[f64], y: &[u8], gamma: f64, alpha: f64) -> f64 {
    if p.is_empty() {
        return 0.0;
    }
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let (pt, at) = if y == 1 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    total / p.len() as f64
}

fn mean_or_zero(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn proto_loss(m_bag: &[f64], e_bag: &[f64], y: &[u8], delta_p: f64, delta_e: f64, w_ent: f64) -> f64 {
    let pos = mean_or_zero((0..y.len()).filter(|&i| y[i] == 1).map(|i| (delta_p - m_bag[i]).max(0.0)));
    let neg = mean_or_zero((0..y.len()).filter(|&i| y[i] == 0).map(|i| (delta_e - e_bag[i]).max(0.0)));
    pos + w_ent * neg
}

/// Normalized entropy of one head over the valid positions; zero when only
/// one position is valid.
pub fn normalized_entropy(a: &[f64], mask: &[bool], eps: f64) -> f64 {
    let n = mask.iter().filter(|&&m| m).count();
    if n < 2 {
        return 0.0;
    }
    let h: f64 = a
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&a, _)| -a * (a + eps).ln())
        .sum();
    h / (n as f64).ln()
}

/// Mean normalized attention entropy over bags and heads. `attn[b]` is the
/// `K x W` row-major attention of bag `b`.
pub fn attention_entropy_loss(attn: &[Vec<f64>], masks: &[Vec<bool>], k_heads: usize, eps: f64) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (a, mask) in attn.iter().zip(masks) {
        let w = mask.len();
        for k in 0..k_heads {
            total += normalized_entropy(&a[k * w..(k + 1) * w], mask, eps);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

pub fn consistency_loss(p_orig: &[f64], p_pert: &[f64], y: &[u8], delta_c: f64) -> f64 {
    mean_or_zero((0..y.len()).filter(|&i| y[i] == 1).map(|i| (delta_c - (p_orig[i] - p_pert[i])).max(0.0)))
}

/// Minimum-entropy head, then its highest-attention valid position. Ties go
/// to the lowest index. `attn` is `K x W` row-major.
pub fn select_key_instance(attn: &[f64], k_heads: usize, mask: &[bool]) -> (usize, usize) {
    let w = mask.len();
    let entropy = |k: usize| -> f64 {
        attn[k * w..(k + 1) * w]
            .iter()
            .zip(mask)
            .filter(|&(&a, &m)| m && a > 0.0)
            .map(|(&a, _)| -a * a.ln())
            .sum()
    };
    let mut best_k = 0;
    let mut best_h = entropy(0);
    for k in 1..k_heads {
        let h = entropy(k);
        if h < best_h {
            best_h = h;
            best_k = k;
        }
    }
    let row = &attn[best_k * w..(best_k + 1) * w];
    let mut best_i = usize::MAX;
    for i in (0..w).filter(|&i| mask[i]) {
        if best_i == usize::MAX || row[i] > row[best_i] {
            best_i = i;
        }
    }
    (best_k, best_i)
}

/// Copy of `bag` with the embedding row `i` set to zero.
pub fn perturb_bag(bag: &Bag, i: usize) -> Result<Bag> {
    if i >= bag.width() || !bag.mask[i] {
        return Err(Error::InvalidIndex {
            index: i,
            valid: bag.valid_count(),
        });
    }
    let mut out = bag.clone();
    let d = bag.embeddings.len() / bag.width();
    out.embeddings[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = 0.0);
    Ok(out)
}

/// Per-bag sampling weights inversely proportional to class frequency;
/// uniform when a class is missing.
pub fn sampler_weights(labels: &[u8]) -> Vec<f64> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return vec![1.0; labels.len()];
    }
    labels
        .iter()
        .map(|&y| if y == 1 { 1.0 / pos as f64 } else { 1.0 / neg as f64 })
        .collect()
}

/// One epoch of indices drawn with replacement from [`sampler_weights`].
pub fn sample_epoch<R: Rng>(labels: &[u8], rng: &mut R) -> Vec<usize> {
    if labels.is_empty() {
        return Vec::new();
    }
    let dist = WeightedIndex::new(sampler_weights(labels)).expect("positive weights");
    (0..labels.len()).map(|_| dist.sample(rng)).collect()
}

pub fn sampler_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLER_STREAM);
    rng
}

/// Index stream for one epoch under `seed`.
pub fn weighted_sampler(labels: &[u8], seed: u64) -> Vec<usize> {
    sample_epoch(labels, &mut sampler_rng(seed))
}

/// Loss values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchLosses {
    pub cls: f64,
    pub proto: f64,
    pub attn: f64,
    pub con: f64,
    pub total: f64,
    pub positives: usize,
}

impl BatchLosses {
    /// `|L_total - (L_cls + lambda_p L_proto + lambda_a L_attn + lambda_c L_con)|`.
    pub fn identity_gap(&self, cfg: &TrainConfig) -> f64 {
        let sum = self.cls + cfg.lambda_p * self.proto + cfg.lambda_a * self.attn + cfg.lambda_c * self.con;
        (self.total - sum).abs()
    }
}

struct LossGraph {
    cls: Var,
    proto: Var,
    attn: Var,
    con: Option<Var>,
    total: Var,
    positives: usize,
}

fn hinge_mean<T: Real>(tape: &mut Tape<T>, x: Var, idx: &[usize], margin: f64) -> Var {
    if idx.is_empty() {
        return tape.constant_scalar(T::zero());
    }
    let g = tape.gather_rows(x, idx);
    let h = tape.affine(g, -T::one(), T::lit(margin));
    let h = tape.relu(h);
    tape.mean(h)
}

fn build_losses<T: Real>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    bp: &crate::model::BoundParams,
    bags: &[&Bag],
    cfg: &TrainConfig,
) -> Result<LossGraph> {
    let c = &params.config;
    let input = BatchInput::<T>::from_bags(bags, c.d)?;
    let g = forward_graph(tape, params, bp, &input)?;
    let labels: Vec<bool> = bags.iter().map(|b| b.label == 1).collect();
    let pos: Vec<usize> = (0..bags.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..bags.len()).filter(|&i| !labels[i]).collect();

    let focal = tape.focal(g.logit, &labels, T::lit(cfg.gamma), T::lit(cfg.alpha), T::lit(LOGIT_LIMIT));
    let cls = tape.mean(focal);

    let lp = hinge_mean(tape, g.m_bag, &pos, cfg.delta_p);
    let ln = hinge_mean(tape, g.e_bag, &neg, cfg.delta_e);
    let proto = tape.weighted_sum(&[(lp, T::one()), (ln, T::lit(cfg.w_ent))]);

    let ent = tape.seg_norm_entropy(g.attn, &input.seg, T::lit(cfg.eps));
    let attn = tape.mean(ent);

    let mut terms = vec![
        (cls, T::one()),
        (proto, T::lit(cfg.lambda_p)),
        (attn, T::lit(cfg.lambda_a)),
    ];
    let con = if cfg.use_consistency {
        let con = if pos.is_empty() {
            tape.constant_scalar(T::zero())
        } else {
            let w = input.seg.width;
            let a = tape.value(g.attn);
            let kk = c.k_heads;
            let mut perturbed = Vec::with_capacity(pos.len());
            for &b in &pos {
                let mut head = vec![0.0; kk * w];
                for i in 0..w {
                    for k in 0..kk {
                        head[k * w + i] = a.at(b * w + i, k).as_f64();
                    }
                }
                let (_, key) = select_key_instance(&head, kk, &bags[b].mask);
                perturbed.push(perturb_bag(bags[b], key)?);
            }
            let refs: Vec<&Bag> = perturbed.iter().collect();
            let pin = BatchInput::<T>::from_bags(&refs, c.d)?;
            let g2 = forward_graph(tape, params, bp, &pin)?;
            let p_orig = tape.gather_rows(g.prob, &pos);
            let drop = tape.sub(p_orig, g2.prob);
            let h = tape.affine(drop, -T::one(), T::lit(cfg.delta_c));
            let h = tape.relu(h);
            tape.mean(h)
        };
        terms.push((con, T::lit(cfg.lambda_c)));
        Some(con)
    } else {
        None
    };
    let total = tape.weighted_sum(&terms);
    Ok(LossGraph {
        cls,
        proto,
        attn,
        con,
        total,
        positives: pos.len(),
    })
}

fn read_losses<T: Real>(tape: &Tape<T>, lg: &LossGraph) -> BatchLosses {
    let s = |v: Var| tape.value(v).data[0].as_f64();
    BatchLosses {
        cls: s(lg.cls),
        proto: s(lg.proto),
        attn: s(lg.attn),
        con: lg.con.map(s).unwrap_or(0.0),
        total: s(lg.total),
        positives: lg.positives,
    }
}

/// Loss values of one batch without gradients.
pub fn batch_loss<T: Real>(params: &ModelParams<T>, bags: &[&Bag], cfg: &TrainConfig) -> Result<BatchLosses> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let lg = build_losses(&mut tape, params, &bp, bags, cfg)?;
    Ok(read_losses(&tape, &lg))
}

/// Loss values and the gradient of `L_total` for every parameter tensor.
pub fn loss_and_grads<T: Real>(
    params: &ModelParams<T>,
    bags: &[&Bag],
    cfg: &TrainConfig,
) -> Result<(BatchLosses, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let bp = params.bind(&mut tape);
    let lg = build_losses(&mut tape, params, &bp, bags, cfg)?;
    let losses = read_losses(&tape, &lg);
    let grads = tape.backward(lg.total);
    let out = bp
        .vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.get(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); t.len()]))
        .collect();
    Ok((losses, out))
}

#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_proto: f64,
    pub l_attn: f64,
    pub l_con: f64,
    pub l_total: f64,
    pub bags: usize,
    pub positives: usize,
    pub batches: usize,
    /// Largest per-batch deviation from the total-loss decomposition.
    pub max_identity_gap: f64,
    pub wall_secs: f64,
    /// Validation F1, filled in by [`fit`].
    pub val_f1: Option<f64>,
}

impl EpochReport {
    pub fn losses(&self) -> [f64; 5] {
        [self.l_cls, self.l_proto, self.l_attn, self.l_con, self.l_total]
    }

    /// Tab-separated `epoch L_cls L_proto L_attn L_con L_total val_f1`.
    pub fn log_line(&self) -> String {
        let f1 = self.val_f1.map(|v| format!("{v:.6}")).unwrap_or_else(|| "nan".into());
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{f1}",
            self.epoch, self.l_cls, self.l_proto, self.l_attn, self.l_con, self.l_total
        )
    }
}

pub struct TrainState {
    pub optimizer: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: &ModelParams<f32>, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: Adam::new(params, cfg.lr),
            rng: sampler_rng(cfg.seed),
            epoch: 0,
        }
    }
}

/// One pass of `ds.len()` sampled bags.
pub fn train_epoch(
    params: &mut ModelParams<f32>,
    ds: &BagDataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<EpochReport> {
    if ds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let start = Instant::now();
    state.epoch += 1;
    let order = sample_epoch(&ds.labels(), &mut state.rng);
    let mut sums = [0.0f64; 5];
    let mut batches = 0;
    let mut positives = 0;
    let mut max_gap = 0.0f64;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let bags: Vec<&Bag> = chunk.iter().map(|&i| &ds.bags[i]).collect();
        let (l, grads) = loss_and_grads(params, &bags, cfg)?;
        let finite = [l.cls, l.proto, l.attn, l.con, l.total].iter().all(|v| v.is_finite());
        if !finite || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss {
                epoch: state.epoch,
                step: step + 1,
                detail: format!(
                    "L_cls={} L_proto={} L_attn={} L_con={} L_total={}",
                    l.cls, l.proto, l.attn, l.con, l.total
                ),
            });
        }
        let refs: Vec<Option<&[f32]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
        state.optimizer.step(params, &refs);
        for (s, v) in sums.iter_mut().zip([l.cls, l.proto, l.attn, l.con, l.total]) {
            *s += v;
        }
        max_gap = max_gap.max(l.identity_gap(cfg));
        positives += l.positives;
        batches += 1;
    }
    let n = batches as f64;
    Ok(EpochReport {
        epoch: state.epoch,
        l_cls: sums[0] / n,
        l_proto: sums[1] / n,
        l_attn: sums[2] / n,
        l_con: sums[3] / n,
        l_total: sums[4] / n,
        bags: order.len(),
        positives,
        batches,
        max_identity_gap: max_gap,
        wall_secs: start.elapsed().as_secs_f64(),
        val_f1: None,
    })
}

/// Bag-level F1 on `val` at the threshold selected on `val` itself.
pub fn validation_f1(params: &ModelParams<f32>, val: &BagDataset, batch: usize) -> Result<f64> {
    let scores: Vec<f64> = forward_all(params, &val.bags, batch)?.iter().map(|o| o.p).collect();
    let labels = val.labels();
    let tau = select_threshold(&scores, &labels)?.0;
    Ok(prf_at_threshold(&scores, &labels, tau).2)
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams<f32>,
    pub reports: Vec<EpochReport>,
    /// Epoch of the kept checkpoint; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
}

/// Best-epoch bookkeeping for [`fit`]. A tie with the best F1 so far
/// replaces the kept epoch but does not reset the patience counter.
#[derive(Clone, Debug, Default)]
pub struct BestTracker {
    pub best_f1: Option<f64>,
    pub best_epoch: usize,
    pub since_improvement: usize,
}

impl BestTracker {
    /// Record one epoch; returns whether its parameters should be kept.
    pub fn observe(&mut self, epoch: usize, f1: f64) -> bool {
        match self.best_f1 {
            Some(b) if f1 < b => {
                self.since_improvement += 1;
                false
            }
            Some(b) if f1 == b => {
                self.best_epoch = epoch;
                self.since_improvement += 1;
                true
            }
            _ => {
                self.best_f1 = Some(f1);
                self.best_epoch = epoch;
                self.since_improvement = 0;
                true
            }
        }
    }

    pub fn exhausted(&self, patience: usize) -> bool {
        self.since_improvement >= patience
    }
}

/// Train for up to `cfg.epochs` epochs keeping the parameters with the best
/// validation F1, stopping after `cfg.patience` epochs without improvement.
pub fn fit(params: ModelParams<f32>, train: &BagDataset, val: &BagDataset, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    let mut params = params;
    let mut state = TrainState::new(&params, cfg);
    let mut best = params.clone();
    let mut tracker = BestTracker::default();
    let mut reports = Vec::new();
    for _ in 0..cfg.epochs {
        let mut rep = train_epoch(&mut params, train, cfg, &mut state)?;
        let f1 = validation_f1(&params, val, cfg.batch_size.max(64))?;
        rep.val_f1 = Some(f1);
        reports.push(rep);
        if tracker.observe(state.epoch, f1) {
            best = params.clone();
        }
        if tracker.exhausted(cfg.patience) {
            break;
        }
    }
    Ok(FitResult {
        params: best,
        reports,
        best_epoch: tracker.best_epoch,
        best_val_f1: tracker.best_f1,
    })
}
