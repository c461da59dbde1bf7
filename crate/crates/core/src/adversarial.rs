//! The generator/discriminator game.
//!
//! For a query `q` of one modality:
//!
//! - the generator scores a uniformly sampled pool of unpaired items of the
//!   other modality with `p(x | q) = softmax(-||h(q) - h(x)||^2)` and draws
//!   *generated* candidates from it;
//! - the discriminator scores a generated candidate `x^G` against a manifold
//!   positive `x^M` with the triplet relevance
//!   `f = max(0, m + ||h(q) - h(x^M)||^2 - ||h(q) - h(x^G)||^2)`
//!   and minimizes `softplus(f)`;
//! - the generator is updated by REINFORCE with reward `softplus(f)`.
//!
//! A training round is one discriminator epoch followed by one generator
//! epoch. Batches alternate between the image->text and text->image
//! directions.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::{sample_manifold_positive, KnnGraph, Metric};
use crate::net::{features_to_f64, squared_distance, Activations, GradientSet, HashNet, NetDims};
use crate::{Direction, Modality};

/// Which parts of the game are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Discriminator alone: self-pair positives, uniform random negatives.
    Baseline,
    /// Adds the adversarial generator, still with self-pair positives.
    BaselineGan,
    /// Generator plus manifold positives from the kNN graphs.
    Ugach,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Baseline, Mode::BaselineGan, Mode::Ugach];

    pub fn trains_generator(self) -> bool {
        self != Mode::Baseline
    }

    pub fn uses_graph(self) -> bool {
        self == Mode::Ugach
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::BaselineGan => "baseline-gan",
            Mode::Ugach => "ugach",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "baseline-gan" | "baseline_gan" => Ok(Mode::BaselineGan),
            "ugach" => Ok(Mode::Ugach),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub bits: usize,
    pub dim_common: usize,
    /// Triplet margin `m`.
    pub margin: f64,
    pub batch_size: usize,
    /// Number of rounds, each one discriminator and one generator epoch.
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    /// Candidates scored by the generator softmax per query.
    pub pool_size: usize,
    /// Generated candidates drawn per query in a generator step.
    pub sample_count: usize,
    pub graph_k: usize,
    pub graph_metric: Metric,
    /// Whether the directly paired item counts among the manifold positives.
    pub include_self_pair: bool,
    /// Subtract a running mean reward in generator steps.
    pub reward_baseline: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ugach,
            bits: 16,
            dim_common: 4096,
            margin: 1.0,
            batch_size: 64,
            epochs: 30,
            lr0: 0.01,
            lr_decay_every: 2,
            lr_decay_factor: 10.0,
            pool_size: 100,
            sample_count: 5,
            graph_k: 5,
            graph_metric: Metric::Cosine,
            include_self_pair: true,
            reward_baseline: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, db_size: usize) -> Result<()> {
        let positive = [
            ("bits", self.bits),
            ("dim_common", self.dim_common),
            ("batch_size", self.batch_size),
            ("lr_decay_every", self.lr_decay_every),
            ("pool_size", self.pool_size),
            ("sample_count", self.sample_count),
            ("graph_k", self.graph_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if self.sample_count > self.pool_size {
            return Err(Error::invalid(format!(
                "sample_count {} exceeds pool_size {}",
                self.sample_count, self.pool_size
            )));
        }
        if self.pool_size > db_size {
            return Err(Error::invalid(format!(
                "pool_size {} exceeds database size {db_size}",
                self.pool_size
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::invalid("margin must be finite and non-negative"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite() && self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::invalid("learning rate and decay factor must be positive"));
        }
        Ok(())
    }
}

/// `lr0 / factor^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = epoch / cfg.lr_decay_every.max(1);
    let mut lr = cfg.lr0;
    for _ in 0..steps {
        lr /= cfg.lr_decay_factor;
    }
    lr
}

/// Database features of both modalities in `f64`, indexed by db position.
#[derive(Debug, Clone)]
pub struct TrainFeatures {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

impl TrainFeatures {
    pub fn from_dataset(dataset: &Dataset) -> Self {
        Self {
            image: features_to_f64(dataset.image()),
            text: features_to_f64(dataset.text()),
        }
    }

    pub fn len(&self) -> usize {
        self.image.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    fn rows(&self, modality: Modality, idx: &[usize]) -> Array2<f64> {
        self.get(modality).select(Axis(0), idx)
    }
}

/// One query's view of a training step. Indices are database positions;
/// `pool` and `manifold` refer to items of the target modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryContext {
    pub direction: Direction,
    pub query: usize,
    pub pool: Vec<usize>,
    pub manifold: usize,
}

/// A discriminator training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub direction: Direction,
    pub query: usize,
    pub manifold: usize,
    pub generated: usize,
}

/// Numerically stable `log(1 + e^f)`.
pub fn softplus(f: f64) -> f64 {
    if f > 0.0 {
        f + (-f).exp().ln_1p()
    } else {
        f.exp().ln_1p()
    }
}

/// `D = e^f / (1 + e^f)` without overflow.
pub fn discriminator_probability(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Triplet relevance from the two squared distances.
pub fn hinge(margin: f64, manifold_sq: f64, generated_sq: f64) -> f64 {
    (margin + manifold_sq - generated_sq).max(0.0)
}

/// Softmax of `-d^2`, shifted by the smallest distance.
pub fn softmax_neg(sq_dists: &[f64]) -> Vec<f64> {
    let min = sq_dists.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = sq_dists.iter().map(|d| (min - d).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// `f(x^G, q)` under the discriminator's relaxed codes.
pub fn relevance_score(
    disc: &HashNet,
    direction: Direction,
    query: &[f64],
    manifold: &[f64],
    generated: &[f64],
    margin: f64,
) -> Result<f64> {
    let hq = disc.forward_hash(direction.query_modality(), query)?;
    let hm = disc.forward_hash(direction.target_modality(), manifold)?;
    let hg = disc.forward_hash(direction.target_modality(), generated)?;
    let dm = squared_distance(hq.as_slice().unwrap(), hm.as_slice().unwrap())?;
    let dg = squared_distance(hq.as_slice().unwrap(), hg.as_slice().unwrap())?;
    Ok(hinge(margin, dm, dg))
}

/// The generator's candidate distribution over `ctx.pool`.
pub fn generator_distribution(gen: &HashNet, ctx: &QueryContext, features: &TrainFeatures) -> Result<Vec<f64>> {
    if ctx.pool.is_empty() {
        return Err(Error::invalid("empty candidate pool"));
    }
    let q = features.rows(ctx.direction.query_modality(), &[ctx.query]);
    let hq = gen.forward_batch(ctx.direction.query_modality(), q.view())?.hash;
    let pool = features.rows(ctx.direction.target_modality(), &ctx.pool);
    let hp = gen.forward_batch(ctx.direction.target_modality(), pool.view())?.hash;
    let hq = hq.row(0);
    Ok(softmax_neg(&sq_dists_to(hq, &hp)))
}

fn sq_dists_to(h: ArrayView1<f64>, rows: &Array2<f64>) -> Vec<f64> {
    rows.rows()
        .into_iter()
        .map(|r| r.iter().zip(h.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect()
}

/// `count` independent categorical draws, as positions into `probs`.
pub fn sample_generated<R: Rng + ?Sized>(probs: &[f64], count: usize, rng: &mut R) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(probs).map_err(|e| Error::invalid(format!("bad distribution: {e}")))?;
    Ok((0..count).map(|_| dist.sample(rng)).collect())
}

/// Cumulative mean of every reward seen so far, current batch included.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RewardBaseline {
    sum: f64,
    count: usize,
}

impl RewardBaseline {
    pub fn update(&mut self, rewards: &[f64]) -> f64 {
        self.sum += rewards.iter().sum::<f64>();
        self.count += rewards.len();
        self.mean()
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

/// Forward pass over the distinct target rows a batch touches.
struct TargetRows {
    slot: Vec<usize>,
    indices: Vec<usize>,
    x: Array2<f64>,
    acts: Activations,
}

impl TargetRows {
    fn gather<'a>(
        net: &HashNet,
        features: &TrainFeatures,
        modality: Modality,
        wanted: impl IntoIterator<Item = &'a usize>,
    ) -> Result<Self> {
        let n = features.len();
        let mut slot = vec![usize::MAX; n];
        let mut indices = Vec::new();
        for &i in wanted {
            if i >= n {
                return Err(Error::invalid(format!("index {i} outside database of {n}")));
            }
            if slot[i] == usize::MAX {
                slot[i] = indices.len();
                indices.push(i);
            }
        }
        let x = features.rows(modality, &indices);
        let acts = net.forward_batch(modality, x.view())?;
        Ok(Self { slot, indices, x, acts })
    }

    fn code(&self, db_index: usize) -> ArrayView1<'_, f64> {
        self.acts.hash.row(self.slot[db_index])
    }

    fn pos(&self, db_index: usize) -> usize {
        self.slot[db_index]
    }
}

/// Generator codes for a batch of queries and the union of their pools.
struct CodedBatch<'a> {
    batch: &'a [QueryContext],
    query_x: Array2<f64>,
    query_acts: Activations,
    pool: TargetRows,
}

impl<'a> CodedBatch<'a> {
    fn new(gen: &HashNet, features: &TrainFeatures, batch: &'a [QueryContext]) -> Result<Self> {
        let direction = batch_direction(batch, |c| c.direction)?;
        if batch.iter().any(|c| c.pool.is_empty()) {
            return Err(Error::invalid("empty candidate pool"));
        }
        let (qm, tm) = (direction.query_modality(), direction.target_modality());
        let qidx: Vec<usize> = batch.iter().map(|c| c.query).collect();
        let query_x = features.rows(qm, &qidx);
        let query_acts = gen.forward_batch(qm, query_x.view())?;
        let pool = TargetRows::gather(gen, features, tm, batch.iter().flat_map(|c| c.pool.iter()))?;
        Ok(Self { batch, query_x, query_acts, pool })
    }

    fn distributions(&self) -> Vec<Vec<f64>> {
        self.batch
            .iter()
            .enumerate()
            .map(|(b, ctx)| {
                let hq = self.query_acts.hash.row(b);
                let d: Vec<f64> = ctx.pool.iter().map(|&j| sq(hq, self.pool.code(j))).collect();
                softmax_neg(&d)
            })
            .collect()
    }
}

/// [`generator_distribution`] for every query of a single-direction batch.
pub fn generator_distributions(gen: &HashNet, features: &TrainFeatures, batch: &[QueryContext]) -> Result<Vec<Vec<f64>>> {
    Ok(CodedBatch::new(gen, features, batch)?.distributions())
}

fn batch_direction<T>(items: &[T], direction: impl Fn(&T) -> Direction) -> Result<Direction> {
    let d = items.first().map(&direction).ok_or_else(|| Error::invalid("empty batch"))?;
    if items.iter().any(|t| direction(t) != d) {
        return Err(Error::invalid("a batch must share one direction"));
    }
    Ok(d)
}

fn sq(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch loss `sum softplus(f)` and its parameter gradient.
pub fn discriminator_loss_and_grad(
    disc: &HashNet,
    features: &TrainFeatures,
    batch: &[Triplet],
    margin: f64,
) -> Result<(f64, GradientSet)> {
    let direction = batch_direction(batch, |t| t.direction)?;
    let (qm, tm) = (direction.query_modality(), direction.target_modality());
    let qidx: Vec<usize> = batch.iter().map(|t| t.query).collect();
    let qx = features.rows(qm, &qidx);
    let qa = disc.forward_batch(qm, qx.view())?;
    let targets = TargetRows::gather(
        disc,
        features,
        tm,
        batch.iter().flat_map(|t| [&t.manifold, &t.generated]),
    )?;

    let bits = disc.bits();
    let mut dq = Array2::<f64>::zeros((batch.len(), bits));
    let mut dt = Array2::<f64>::zeros((targets.indices.len(), bits));
    let mut loss = 0.0;
    for (b, t) in batch.iter().enumerate() {
        let hq = qa.hash.row(b);
        let hm = targets.code(t.manifold);
        let hg = targets.code(t.generated);
        let f = hinge(margin, sq(hq, hm), sq(hq, hg));
        loss += softplus(f);
        if margin + sq(hq, hm) - sq(hq, hg) <= 0.0 {
            continue;
        }
        // d softplus(f) / d f = sigmoid(f); f = m + |q - M|^2 - |q - G|^2
        let s = discriminator_probability(f);
        let (pm, pg) = (targets.pos(t.manifold), targets.pos(t.generated));
        for k in 0..bits {
            let (q, m, g) = (hq[k], hm[k], hg[k]);
            dq[[b, k]] += 2.0 * s * (g - m);
            dt[[pm, k]] -= 2.0 * s * (q - m);
            dt[[pg, k]] += 2.0 * s * (q - g);
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("discriminator loss".into()));
    }
    let mut grads = GradientSet::zeros(disc.dims());
    disc.backward_batch(qm, qx.view(), &qa, dq.view(), &mut grads)?;
    disc.backward_batch(tm, targets.x.view(), &targets.acts, dt.view(), &mut grads)?;
    Ok((loss, grads))
}

/// One SGD step on `sum softplus(f)` over the batch; returns the pre-step loss.
pub fn discriminator_step(
    disc: &mut HashNet,
    features: &TrainFeatures,
    batch: &[Triplet],
    margin: f64,
    lr: f64,
) -> Result<f64> {
    let (loss, grads) = discriminator_loss_and_grad(disc, features, batch, margin)?;
    disc.sgd_step(&grads, lr)?;
    Ok(loss)
}

/// Gradient w.r.t. the generator's parameters of `sum_i weights_i * log p(pool[picks_i] | q)`.
///
/// `codes_q` and `pool_codes` are the generator's codes for the query and
/// pool; the returned pair holds `d/dh_q` and `d/dh_pool` (one row per pool
/// entry).
fn log_prob_upstream(
    hq: ArrayView1<f64>,
    pool_codes: &[ArrayView1<f64>],
    probs: &[f64],
    picks: &[(usize, f64)],
) -> (Array1<f64>, Vec<Array1<f64>>) {
    // d/dd_j sum_i w_i log p_{k_i} = p_j * sum_i w_i - sum_{i: k_i = j} w_i
    let total: f64 = picks.iter().map(|&(_, w)| w).sum();
    let mut coef: Vec<f64> = probs.iter().map(|p| p * total).collect();
    for &(k, w) in picks {
        coef[k] -= w;
    }
    let mut dq = Array1::zeros(hq.len());
    let mut dpool = Vec::with_capacity(pool_codes.len());
    for (j, hj) in pool_codes.iter().enumerate() {
        // d_j = |h_q - h_j|^2
        let diff = &hq - hj;
        dq.scaled_add(2.0 * coef[j], &diff);
        dpool.push(diff * (-2.0 * coef[j]));
    }
    (dq, dpool)
}

/// Exact `d log p(pool[pick] | q) / d theta` for the generator.
pub fn log_prob_gradient(gen: &HashNet, features: &TrainFeatures, ctx: &QueryContext, pick: usize) -> Result<GradientSet> {
    if pick >= ctx.pool.len() {
        return Err(Error::invalid(format!("pick {pick} outside pool of {}", ctx.pool.len())));
    }
    let (qm, tm) = (ctx.direction.query_modality(), ctx.direction.target_modality());
    let qx = features.rows(qm, &[ctx.query]);
    let qa = gen.forward_batch(qm, qx.view())?;
    let px = features.rows(tm, &ctx.pool);
    let pa = gen.forward_batch(tm, px.view())?;
    let hq = qa.hash.row(0);
    let probs = softmax_neg(&sq_dists_to(hq, &pa.hash));
    let pool_codes: Vec<_> = pa.hash.rows().into_iter().collect();
    let (dq, dpool) = log_prob_upstream(hq, &pool_codes, &probs, &[(pick, 1.0)]);
    let mut grads = GradientSet::zeros(gen.dims());
    let dq = dq.insert_axis(Axis(0));
    gen.backward_batch(qm, qx.view(), &qa, dq.view(), &mut grads)?;
    let mut dp = Array2::zeros(pa.hash.dim());
    for (j, row) in dpool.iter().enumerate() {
        dp.row_mut(j).assign(row);
    }
    gen.backward_batch(tm, px.view(), &pa, dp.view(), &mut grads)?;
    Ok(grads)
}

/// Outcome of a generator step.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorStepStats {
    pub mean_reward: f64,
    pub num_rewards: usize,
}

/// One REINFORCE ascent step on the generator.
///
/// For every query, draws `sample_count` candidates from the generator
/// distribution over its pool, rewards each with `softplus(f)` under the
/// frozen discriminator, and moves `theta` along
/// `(1 / S) sum_k r_k grad log p(x_k | q)`.
#[allow(clippy::too_many_arguments)]
pub fn generator_step<R: Rng + ?Sized>(
    gen: &mut HashNet,
    disc: &HashNet,
    features: &TrainFeatures,
    batch: &[QueryContext],
    sample_count: usize,
    margin: f64,
    lr: f64,
    baseline: Option<&mut RewardBaseline>,
    rng: &mut R,
) -> Result<GeneratorStepStats> {
    let grads_and_stats = generator_policy_gradient(gen, disc, features, batch, sample_count, margin, baseline, rng)?;
    let (grads, stats) = grads_and_stats;
    gen.sgd_step(&grads, lr)?;
    Ok(stats)
}

/// The descent direction used by [`generator_step`] (the negated policy gradient).
#[allow(clippy::too_many_arguments)]
pub fn generator_policy_gradient<R: Rng + ?Sized>(
    gen: &HashNet,
    disc: &HashNet,
    features: &TrainFeatures,
    batch: &[QueryContext],
    sample_count: usize,
    margin: f64,
    baseline: Option<&mut RewardBaseline>,
    rng: &mut R,
) -> Result<(GradientSet, GeneratorStepStats)> {
    if sample_count == 0 {
        return Err(Error::invalid("sample_count must be at least 1"));
    }
    let coded = CodedBatch::new(gen, features, batch)?;
    let direction = batch[0].direction;
    let (qm, tm) = (direction.query_modality(), direction.target_modality());
    let probs_all = coded.distributions();
    let picks_all = probs_all
        .iter()
        .map(|p| sample_generated(p, sample_count, rng))
        .collect::<Result<Vec<_>>>()?;
    let (qa, pool_rows) = (&coded.query_acts, &coded.pool);

    // rewards under the frozen discriminator
    let dqa = disc.forward_batch(qm, coded.query_x.view())?;
    let disc_rows = TargetRows::gather(
        disc,
        features,
        tm,
        batch
            .iter()
            .zip(&picks_all)
            .flat_map(|(c, picks)| std::iter::once(&c.manifold).chain(picks.iter().map(|&p| &c.pool[p]))),
    )?;
    let mut rewards: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    for (b, (ctx, picks)) in batch.iter().zip(&picks_all).enumerate() {
        let hq = dqa.hash.row(b);
        let dm = sq(hq, disc_rows.code(ctx.manifold));
        let r: Vec<f64> = picks
            .iter()
            .map(|&p| softplus(hinge(margin, dm, sq(hq, disc_rows.code(ctx.pool[p])))))
            .collect();
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("generator reward".into()));
        }
        rewards.push(r);
    }
    let flat: Vec<f64> = rewards.iter().flatten().copied().collect();
    let mean_reward = flat.iter().sum::<f64>() / flat.len() as f64;
    let center = baseline.map_or(0.0, |b| b.update(&flat));

    // descend on -(1/S) sum_k (r_k - b) log p_k
    let bits = gen.bits();
    let mut dq = Array2::<f64>::zeros((batch.len(), bits));
    let mut dpool = Array2::<f64>::zeros((pool_rows.indices.len(), bits));
    for (b, ctx) in batch.iter().enumerate() {
        let weighted: Vec<(usize, f64)> = picks_all[b]
            .iter()
            .zip(&rewards[b])
            .map(|(&p, &r)| (p, -(r - center) / sample_count as f64))
            .collect();
        if weighted.iter().all(|&(_, w)| w == 0.0) {
            continue;
        }
        let codes: Vec<_> = ctx.pool.iter().map(|&j| pool_rows.code(j)).collect();
        let (gq, gp) = log_prob_upstream(qa.hash.row(b), &codes, &probs_all[b], &weighted);
        dq.row_mut(b).assign(&gq);
        for (&j, g) in ctx.pool.iter().zip(gp) {
            let mut row = dpool.row_mut(pool_rows.pos(j));
            row += &g;
        }
    }
    let mut grads = GradientSet::zeros(gen.dims());
    gen.backward_batch(qm, coded.query_x.view(), qa, dq.view(), &mut grads)?;
    gen.backward_batch(tm, pool_rows.x.view(), &pool_rows.acts, dpool.view(), &mut grads)?;
    Ok((
        grads,
        GeneratorStepStats {
            mean_reward,
            num_rewards: flat.len(),
        },
    ))
}

/// Per-round training record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean `softplus(f)` per discriminator triplet.
    pub disc_loss: f64,
    /// Mean raw generator reward; `None` when no generator is trained.
    pub gen_mean_reward: Option<f64>,
}

impl EpochRecord {
    /// `epoch,lr,disc_loss,gen_mean_reward`; a missing reward is written as `nan`.
    pub fn csv_line(&self) -> String {
        let reward = self.gen_mean_reward.map_or_else(|| "nan".to_string(), |r| format!("{r:.9}"));
        format!("{},{:e},{:.9},{}", self.epoch, self.lr, self.disc_loss, reward)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub disc: HashNet,
    pub gen: HashNet,
    pub history: Vec<EpochRecord>,
}

/// Seeds of the two networks, derived from the run seed.
pub fn net_seeds(seed: u64) -> (u64, u64) {
    (seed, seed ^ 0x9e37_79b9_7f4a_7c15)
}

struct Game<'a> {
    cfg: &'a TrainConfig,
    features: TrainFeatures,
    image_graph: &'a KnnGraph,
    text_graph: &'a KnnGraph,
    rng: ChaCha8Rng,
}

impl Game<'_> {
    fn n(&self) -> usize {
        self.features.len()
    }

    fn manifold(&mut self, direction: Direction, query: usize) -> usize {
        if !self.cfg.mode.uses_graph() {
            return query;
        }
        let graph = match direction.query_modality() {
            Modality::Image => self.image_graph,
            Modality::Text => self.text_graph,
        };
        sample_manifold_positive(graph, query, self.cfg.include_self_pair, &mut self.rng)
    }

    /// Uniform pool of unpaired candidates, never containing the query's own
    /// pair or the manifold positive.
    fn pool(&mut self, query: usize, manifold: usize) -> Vec<usize> {
        let n = self.n();
        let excluded = 1 + usize::from(manifold != query);
        let size = self.cfg.pool_size.min(n - excluded);
        sample(&mut self.rng, n, (size + excluded).min(n))
            .into_iter()
            .filter(|&i| i != query && i != manifold)
            .take(size)
            .collect()
    }

    fn contexts(&mut self, direction: Direction, queries: &[usize]) -> Vec<QueryContext> {
        queries
            .iter()
            .map(|&query| {
                let manifold = self.manifold(direction, query);
                QueryContext { direction, query, pool: self.pool(query, manifold), manifold }
            })
            .collect()
    }

    fn uniform_negative(&mut self, query: usize, manifold: usize) -> usize {
        loop {
            let i = self.rng.random_range(0..self.n());
            if i != query && i != manifold {
                return i;
            }
        }
    }

    /// Shuffled batches for both directions, interleaved.
    fn batches(&mut self) -> Vec<(Direction, Vec<usize>)> {
        let mut per_direction = Vec::new();
        for direction in Direction::BOTH {
            let mut order: Vec<usize> = (0..self.n()).collect();
            order.shuffle(&mut self.rng);
            let chunks: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
            per_direction.push((direction, chunks));
        }
        let (mut a, mut b) = (per_direction.remove(0), per_direction.remove(0));
        let mut out = Vec::new();
        let mut ia = a.1.drain(..);
        let mut ib = b.1.drain(..);
        loop {
            match (ia.next(), ib.next()) {
                (None, None) => break,
                (x, y) => {
                    out.extend(x.map(|c| (a.0, c)));
                    out.extend(y.map(|c| (b.0, c)));
                }
            }
        }
        out
    }

    fn discriminator_epoch(&mut self, disc: &mut HashNet, gen: &HashNet, lr: f64) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (direction, queries) in self.batches() {
            let triplets: Vec<Triplet> = if self.cfg.mode.trains_generator() {
                let contexts = self.contexts(direction, &queries);
                let probs = generator_distributions(gen, &self.features, &contexts)?;
                let mut out = Vec::with_capacity(contexts.len());
                for (ctx, p) in contexts.iter().zip(&probs) {
                    let pick = sample_generated(p, 1, &mut self.rng)?[0];
                    out.push(Triplet { direction, query: ctx.query, manifold: ctx.manifold, generated: ctx.pool[pick] });
                }
                out
            } else {
                queries
                    .iter()
                    .map(|&query| {
                        let manifold = self.manifold(direction, query);
                        let generated = self.uniform_negative(query, manifold);
                        Triplet { direction, query, manifold, generated }
                    })
                    .collect()
            };
            total += discriminator_step(disc, &self.features, &triplets, self.cfg.margin, lr)?;
            count += triplets.len();
        }
        Ok(total / count as f64)
    }

    fn generator_epoch(
        &mut self,
        gen: &mut HashNet,
        disc: &HashNet,
        lr: f64,
        baseline: &mut Option<RewardBaseline>,
    ) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (direction, queries) in self.batches() {
            let contexts = self.contexts(direction, &queries);
            let stats = generator_step(
                gen,
                disc,
                &self.features,
                &contexts,
                self.cfg.sample_count,
                self.cfg.margin,
                lr,
                baseline.as_mut(),
                &mut self.rng,
            )?;
            total += stats.mean_reward * stats.num_rewards as f64;
            count += stats.num_rewards;
        }
        Ok(total / count as f64)
    }
}

/// Runs the full alternating schedule. `graphs` must be built over the
/// database rows of `split` (image graph, text graph).
pub fn train(dataset: &Dataset, split: &Split, graphs: (&KnnGraph, &KnnGraph), cfg: &TrainConfig) -> Result<TrainOutput> {
    train_with(dataset, split, graphs, cfg, |_| {})
}

/// [`train`] with a callback after every round.
pub fn train_with(
    dataset: &Dataset,
    split: &Split,
    graphs: (&KnnGraph, &KnnGraph),
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    let db = dataset.subset(&split.db)?;
    cfg.validate(db.len())?;
    if db.len() < 3 {
        return Err(Error::invalid("training needs at least 3 database pairs"));
    }
    for g in [graphs.0, graphs.1] {
        if g.len() != db.len() {
            return Err(Error::DimensionMismatch {
                expected: db.len(),
                actual: g.len(),
                context: "graph size vs database size",
            });
        }
    }
    let dims = NetDims {
        dim_image: db.image().cols(),
        dim_text: db.text().cols(),
        dim_common: cfg.dim_common,
        bits: cfg.bits,
    };
    let (disc_seed, gen_seed) = net_seeds(cfg.seed);
    let mut disc = HashNet::init(dims, disc_seed)?;
    let mut gen = HashNet::init(dims, gen_seed)?;
    let mut game = Game {
        cfg,
        features: TrainFeatures::from_dataset(&db),
        image_graph: graphs.0,
        text_graph: graphs.1,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut baseline = cfg.reward_baseline.then(RewardBaseline::default);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let disc_loss = game.discriminator_epoch(&mut disc, &gen, lr)?;
        let gen_mean_reward = if cfg.mode.trains_generator() {
            Some(game.generator_epoch(&mut gen, &disc, lr, &mut baseline)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            lr,
            disc_loss,
            gen_mean_reward,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutput { disc, gen, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticConfig};
    use crate::graph::build_knn_graph;

    fn small_features(seed: u64) -> (TrainFeatures, HashNet) {
        let ds = generate_synthetic(&SyntheticConfig {
            num_pairs: 40,
            num_clusters: 4,
            dim_image: 6,
            dim_text: 5,
            noise_sigma: 0.5,
            seed,
            ..Default::default()
        })
        .unwrap();
        let net = HashNet::init(NetDims { dim_image: 6, dim_text: 5, dim_common: 7, bits: 4 }, seed).unwrap();
        (TrainFeatures::from_dataset(&ds), net)
    }

    #[test]
    fn softmax_hand_cases() {
        assert_eq!(softmax_neg(&[0.7, 0.7]), vec![0.5, 0.5]);
        let p = softmax_neg(&[0.0, 2f64.ln()]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        // huge distances stay finite
        let p = softmax_neg(&[1e4, 1e4 + 1.0]);
        assert!(p.iter().all(|v| v.is_finite()) && (p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_and_probability_cases() {
        assert_eq!(hinge(1.0, 0.25, 1.5), 0.0);
        assert_eq!(hinge(1.0, 0.25, 0.5), 0.75);
        assert_eq!(hinge(1.0, 0.3, 0.3), 1.0);
        assert_eq!(discriminator_probability(0.0), 0.5);
        assert!((discriminator_probability(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(discriminator_probability(1e4), 1.0);
        assert!(discriminator_probability(-1e4) >= 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn relevance_with_identical_candidates_is_margin() {
        let (f, net) = small_features(1);
        let q = f.image.row(0).to_vec();
        let x = f.text.row(3).to_vec();
        let score = relevance_score(&net, Direction::ImageToText, &q, &x, &x, 1.0).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn sampling_degenerate_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_generated(&[1.0, 0.0], 100, &mut rng).unwrap().iter().all(|&i| i == 0));
        let a = sample_generated(&[0.2, 0.3, 0.5], 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = sample_generated(&[0.2, 0.3, 0.5], 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws = sample_generated(&[0.25; 4], 100_000, &mut rng).unwrap();
        for c in 0..4 {
            let freq = draws.iter().filter(|&&d| d == c).count() as f64 / 1e5;
            assert!((freq - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn lr_schedule_values() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = (0..6).map(|e| lr_schedule(e, &cfg)).collect();
        assert_eq!(lrs, vec![0.01, 0.01, 0.001, 0.001, 0.0001, 0.0001]);
    }

    #[test]
    fn inactive_hinge_batch_has_log2_loss_and_no_gradient() {
        let (f, net) = small_features(2);
        let batch: Vec<Triplet> = (0..5)
            .map(|i| Triplet { direction: Direction::TextToImage, query: i, manifold: i, generated: i + 10 })
            .collect();
        // a negative margin larger than any squared distance keeps every hinge at 0
        let (loss, grads) = discriminator_loss_and_grad(&net, &f, &batch, -(net.bits() as f64) - 1.0).unwrap();
        assert!((loss - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!(grads.is_zero());
    }

    #[test]
    fn discriminator_step_descends() {
        let (f, mut net) = small_features(3);
        let t = Triplet { direction: Direction::ImageToText, query: 0, manifold: 0, generated: 7 };
        let before = relevance_score(&net, t.direction, &f.image.row(0).to_vec(), &f.text.row(0).to_vec(), &f.text.row(7).to_vec(), 1.0).unwrap();
        assert!(before > 0.0);
        discriminator_step(&mut net, &f, &[t], 1.0, 1e-3).unwrap();
        let after = relevance_score(&net, t.direction, &f.image.row(0).to_vec(), &f.text.row(0).to_vec(), &f.text.row(7).to_vec(), 1.0).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn discriminator_loss_is_additive() {
        let (f, net) = small_features(4);
        let batch: Vec<Triplet> = (0..6)
            .map(|i| Triplet { direction: Direction::ImageToText, query: i, manifold: i, generated: 39 - i })
            .collect();
        let (whole, g) = discriminator_loss_and_grad(&net, &f, &batch, 1.0).unwrap();
        let mut sum = 0.0;
        let mut gsum = GradientSet::zeros(net.dims());
        for t in &batch {
            let (l, gi) = discriminator_loss_and_grad(&net, &f, std::slice::from_ref(t), 1.0).unwrap();
            sum += l;
            gsum.add_assign(&gi);
        }
        assert!((whole - sum).abs() < 1e-12);
        for (a, b) in g.values().zip(gsum.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_direction_batch_is_rejected() {
        let (f, net) = small_features(5);
        let batch = [
            Triplet { direction: Direction::ImageToText, query: 0, manifold: 0, generated: 1 },
            Triplet { direction: Direction::TextToImage, query: 0, manifold: 0, generated: 1 },
        ];
        assert!(discriminator_loss_and_grad(&net, &f, &batch, 1.0).is_err());
    }

    #[test]
    fn generator_distribution_matches_batched_path() {
        let (f, net) = small_features(6);
        let ctx = QueryContext { direction: Direction::TextToImage, query: 2, pool: vec![5, 9, 1, 30], manifold: 2 };
        let p = generator_distribution(&net, &ctx, &f).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let hq = net.forward_hash(Modality::Text, f.text.row(2).as_slice().unwrap()).unwrap();
        let raw: Vec<f64> = ctx
            .pool
            .iter()
            .map(|&j| {
                let h = net.forward_hash(Modality::Image, f.image.row(j).as_slice().unwrap()).unwrap();
                (-squared_distance(hq.as_slice().unwrap(), h.as_slice().unwrap()).unwrap()).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        for (a, b) in p.iter().zip(&raw) {
            assert!((a - b / z).abs() < 1e-12);
        }
        let empty = QueryContext { pool: vec![], ..ctx };
        assert!(generator_distribution(&net, &empty, &f).is_err());
    }

    #[test]
    fn constant_rewards_with_baseline_cancel() {
        let (f, mut gen) = small_features(7);
        // zero discriminator: every code is 0.5, every reward is softplus(m)
        let disc = HashNet::zeros(gen.dims());
        let batch: Vec<QueryContext> = (0..4)
            .map(|q| QueryContext { direction: Direction::ImageToText, query: q, pool: vec![10, 11, 12, 13, 14], manifold: q })
            .collect();
        let before = gen.clone();
        let mut baseline = RewardBaseline::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = generator_step(&mut gen, &disc, &f, &batch, 3, 1.0, 0.5, Some(&mut baseline), &mut rng).unwrap();
        assert!((stats.mean_reward - softplus(1.0)).abs() < 1e-12);
        assert_eq!(gen, before);
        // without the baseline the same rewards do move the generator
        generator_step(&mut gen, &disc, &f, &batch, 3, 1.0, 0.5, None, &mut rng).unwrap();
        assert_ne!(gen, before);
    }

    #[test]
    fn generator_step_is_deterministic() {
        let (f, gen0) = small_features(8);
        let disc = HashNet::init(gen0.dims(), 99).unwrap();
        let batch: Vec<QueryContext> = (0..4)
            .map(|q| QueryContext { direction: Direction::TextToImage, query: q, pool: (10..20).collect(), manifold: q })
            .collect();
        let run = || {
            let mut gen = gen0.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let s = generator_step(&mut gen, &disc, &f, &batch, 5, 1.0, 0.1, None, &mut rng).unwrap();
            (gen, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn policy_gradient_matches_single_query_log_prob_gradients() {
        // the batched estimator equals -(1/S) sum_k r_k grad log p_k recomputed per pick
        let (f, gen) = small_features(9);
        let disc = HashNet::init(gen.dims(), 3).unwrap();
        let ctx = QueryContext { direction: Direction::ImageToText, query: 1, pool: vec![4, 8, 15, 16, 23], manifold: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (g, _) = generator_policy_gradient(&gen, &disc, &f, std::slice::from_ref(&ctx), 4, 1.0, None, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs = generator_distribution(&gen, &ctx, &f).unwrap();
        let picks = sample_generated(&probs, 4, &mut rng).unwrap();
        let mut expected = GradientSet::zeros(gen.dims());
        for &p in &picks {
            let r = softplus(
                relevance_score(
                    &disc,
                    ctx.direction,
                    f.image.row(1).as_slice().unwrap(),
                    f.text.row(1).as_slice().unwrap(),
                    f.text.row(ctx.pool[p]).as_slice().unwrap(),
                    1.0,
                )
                .unwrap(),
            );
            let mut gp = log_prob_gradient(&gen, &f, &ctx, p).unwrap();
            gp.scale(-r / 4.0);
            expected.add_assign(&gp);
        }
        for (a, b) in g.values().zip(expected.values()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    fn log_prob(gen: &HashNet, f: &TrainFeatures, ctx: &QueryContext, pick: usize) -> f64 {
        generator_distribution(gen, ctx, f).unwrap()[pick].ln()
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let (f, gen) = small_features(10);
        for pool_size in [2, 5, 10] {
            let ctx = QueryContext { direction: Direction::TextToImage, query: 0, pool: (20..20 + pool_size).collect(), manifold: 0 };
            let pick = pool_size / 2;
            let analytic = log_prob_gradient(&gen, &f, &ctx, pick).unwrap();
            let analytic: Vec<f64> = analytic.values().collect();
            let eps = 1e-5;
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = gen.clone();
                *plus.parameters_mut().nth(i).unwrap() += eps;
                let mut minus = gen.clone();
                *minus.parameters_mut().nth(i).unwrap() -= eps;
                let numeric = (log_prob(&plus, &f, &ctx, pick) - log_prob(&minus, &f, &ctx, pick)) / (2.0 * eps);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel <= 1e-4, "pool {pool_size} param {i}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate(1000).is_ok());
        assert!(TrainConfig::default().validate(50).is_err());
        assert!(TrainConfig { sample_count: 200, ..Default::default() }.validate(1000).is_err());
        assert!(TrainConfig { bits: 0, ..Default::default() }.validate(1000).is_err());
        assert!(TrainConfig { lr0: 0.0, ..Default::default() }.validate(1000).is_err());
    }

    #[test]
    fn zero_epochs_returns_initial_nets() {
        let ds = generate_synthetic(&SyntheticConfig { num_pairs: 60, num_clusters: 3, dim_image: 5, dim_text: 4, ..Default::default() }).unwrap();
        let split = Split::random(60, 0.1, 0).unwrap();
        let db = ds.subset(&split.db).unwrap();
        let gi = build_knn_graph(db.image(), 3, Metric::Cosine).unwrap();
        let gt = build_knn_graph(db.text(), 3, Metric::Cosine).unwrap();
        let cfg = TrainConfig { epochs: 0, dim_common: 8, bits: 4, pool_size: 10, ..Default::default() };
        let out = train(&ds, &split, (&gi, &gt), &cfg).unwrap();
        let dims = out.disc.dims();
        let (ds_seed, gs_seed) = net_seeds(cfg.seed);
        assert_eq!(out.disc, HashNet::init(dims, ds_seed).unwrap());
        assert_eq!(out.gen, HashNet::init(dims, gs_seed).unwrap());
        assert!(out.history.is_empty());
    }

    #[test]
    fn pools_exclude_pair_and_manifold() {
        let ds = generate_synthetic(&SyntheticConfig { num_pairs: 30, num_clusters: 3, dim_image: 3, dim_text: 3, ..Default::default() }).unwrap();
        let g = KnnGraph::from_lists(1, &(0..30).map(|q| vec![(q + 1) % 30]).collect::<Vec<_>>()).unwrap();
        let cfg = TrainConfig { pool_size: 28, ..Default::default() };
        let mut game = Game { cfg: &cfg, features: TrainFeatures::from_dataset(&ds), image_graph: &g, text_graph: &g, rng: ChaCha8Rng::seed_from_u64(0) };
        for q in 0..30 {
            let pool = game.pool(q, (q + 1) % 30);
            assert_eq!(pool.len(), 28);
            assert!(!pool.contains(&q) && !pool.contains(&((q + 1) % 30)));
            let mut sorted = pool.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 28);
        }
        let batches = game.batches();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].0, Direction::ImageToText);
        assert_eq!(batches[1].0, Direction::TextToImage);
    }
}
