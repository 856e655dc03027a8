//! Synthetic classification tasks and federated partitioning.
//!
//! Label skew draws each client's class mix from a symmetric Dirichlet,
//! quantity skew draws client sizes from a Dirichlet over clients, and gold
//! labels are revealed on a random subset of clients with Dirichlet-shaped
//! quotas. An infinite concentration selects the exact uniform limit.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{ClientShard, Dataset, Sample};
use crate::error::{FesError, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class_count: usize,
    pub cluster_spread: f64,
    pub class_center_separation: f64,
    /// Held-out draw per class; later split into server validation and test.
    pub test_per_class: usize,
    /// Share of each class drawn around the mean of all centers instead of
    /// its own center. These points carry their class label but sit between
    /// clusters.
    pub ambiguous_fraction: f64,
    pub ambiguous_spread: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 16,
            per_class_count: 500,
            cluster_spread: 1.0,
            class_center_separation: 5.0,
            test_per_class: 500,
            ambiguous_fraction: 0.0,
            ambiguous_spread: 1.0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FesError::InvalidConfig(format!("task.{m}")));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.per_class_count == 0 {
            return bad("per_class_count must be at least 1");
        }
        if !(self.cluster_spread > 0.0) {
            return bad("cluster_spread must be positive");
        }
        if !(self.class_center_separation > 0.0) {
            return bad("class_center_separation must be positive");
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return bad("ambiguous_fraction must be in [0, 1]");
        }
        if !(self.ambiguous_spread > 0.0) {
            return bad("ambiguous_spread must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSpec {
    pub num_clients: usize,
    /// Label-skew concentration; `inf` means every client mirrors the prior.
    pub alpha: f64,
    /// Quantity-skew concentration; `inf` means equal client sizes.
    pub beta: f64,
    /// Total number of gold labels `n`.
    pub gold_total: usize,
    /// Gold sparsity `gamma`.
    pub gold_sparsity: f64,
    /// Number of clients `xi` eligible to own gold labels.
    pub gold_client_cap: usize,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            num_clients: 32,
            alpha: 1.0,
            beta: f64::INFINITY,
            gold_total: 64,
            gold_sparsity: 0.1,
            gold_client_cap: 32,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self, total_samples: usize) -> Result<()> {
        let bad = |m: String| Err(FesError::InvalidConfig(format!("partition.{m}")));
        if self.num_clients == 0 {
            return bad("num_clients must be positive".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gold_sparsity", self.gold_sparsity),
        ] {
            if !(v > 0.0) {
                return bad(format!("{name} must be positive (got {v})"));
            }
        }
        if self.gold_client_cap == 0 || self.gold_client_cap > self.num_clients {
            return bad(format!(
                "gold_client_cap must be in 1..={} (got {})",
                self.num_clients, self.gold_client_cap
            ));
        }
        if self.gold_total > total_samples {
            return bad(format!(
                "gold_total {} exceeds the {total_samples} training samples",
                self.gold_total
            ));
        }
        Ok(())
    }
}

/// Class-conditional Gaussian clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobTask {
    pub spec: SyntheticTaskSpec,
    pub centers: Vec<Vec<f64>>,
}

impl BlobTask {
    /// Centers are mutually orthogonal when `C <= d` and scaled so every
    /// pair sits exactly `class_center_separation` apart.
    pub fn new(spec: SyntheticTaskSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
        for c in 0..spec.num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            if c < d {
                for b in &basis {
                    let proj = dot(&v, b);
                    for (vi, bi) in v.iter_mut().zip(b) {
                        *vi -= proj * bi;
                    }
                }
            }
            let norm = dot(&v, &v).sqrt();
            for vi in &mut v {
                *vi /= norm;
            }
            basis.push(v);
        }
        let scale = spec.class_center_separation / std::f64::consts::SQRT_2;
        let centers = basis
            .into_iter()
            .map(|v| v.into_iter().map(|x| x * scale).collect())
            .collect();
        Ok(Self { spec, centers })
    }

    pub fn draw_point(&self, class: usize, rng: &mut Rng) -> Vec<f64> {
        self.centers[class]
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.spec.cluster_spread * z
            })
            .collect()
    }

    fn draw_ambiguous(&self, rng: &mut Rng) -> Vec<f64> {
        let k = self.centers.len() as f64;
        (0..self.spec.dim)
            .map(|j| {
                let mean = self.centers.iter().map(|c| c[j]).sum::<f64>() / k;
                let z: f64 = StandardNormal.sample(rng);
                mean + self.spec.ambiguous_spread * z
            })
            .collect()
    }

    /// `per_class` points of every class, shuffled, with dense ids.
    pub fn draw(&self, per_class: usize, rng: &mut Rng) -> Dataset {
        self.draw_with(per_class, self.spec.ambiguous_fraction, rng)
    }

    /// Cluster points only; used for the small public split.
    pub fn draw_clean(&self, per_class: usize, rng: &mut Rng) -> Dataset {
        self.draw_with(per_class, 0.0, rng)
    }

    fn draw_with(&self, per_class: usize, ambiguous_fraction: f64, rng: &mut Rng) -> Dataset {
        let ambiguous = (ambiguous_fraction * per_class as f64).round() as usize;
        let mut labels: Vec<(usize, bool)> = (0..self.spec.num_classes)
            .flat_map(|c| (0..per_class).map(move |i| (c, i < ambiguous)))
            .collect();
        labels.shuffle(rng);
        let samples = labels
            .into_iter()
            .enumerate()
            .map(|(id, (c, amb))| Sample {
                id,
                embedding: if amb {
                    self.draw_ambiguous(rng)
                } else {
                    self.draw_point(c, rng)
                },
                label: Some(c),
            })
            .collect();
        Dataset {
            dim: self.spec.dim,
            num_classes: self.spec.num_classes,
            samples,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub task: BlobTask,
    pub train: Dataset,
    pub test: Dataset,
}

pub fn gen_blobs(spec: &SyntheticTaskSpec, rng: &mut Rng) -> Result<SyntheticData> {
    let task = BlobTask::new(spec.clone(), &mut rng.split("centers"))?;
    let train = task.draw(spec.per_class_count, &mut rng.split("train"));
    let test = task.draw(spec.test_per_class, &mut rng.split("test"));
    Ok(SyntheticData { task, train, test })
}

/// Split off `fraction` of `pool` (at least one sample when the pool has two
/// or more). Both halves get fresh dense ids.
pub fn split_holdout(pool: &Dataset, fraction: f64, rng: &mut Rng) -> (Dataset, Dataset) {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut take = (fraction * pool.len() as f64).round() as usize;
    if pool.len() >= 2 {
        take = take.clamp(1, pool.len() - 1);
    }
    let (head, tail) = order.split_at(take.min(order.len()));
    let build = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        Dataset {
            dim: pool.dim,
            num_classes: pool.num_classes,
            samples: ids
                .iter()
                .enumerate()
                .map(|(new_id, &old)| Sample {
                    id: new_id,
                    ..pool.samples[old].clone()
                })
                .collect(),
        }
    };
    (build(head), build(tail))
}

// ---------------------------------------------------------------------------
// Gamma / Dirichlet
// ---------------------------------------------------------------------------

/// `ln X` for `X ~ Gamma(shape, 1)`.
///
/// Marsaglia–Tsang for `shape >= 1`; for `shape < 1` the boost
/// `Gamma(a) = Gamma(a + 1) * U^(1/a)` is applied in log space so tiny shapes
/// do not underflow.
pub fn ln_gamma_sample(shape: f64, rng: &mut Rng) -> f64 {
    assert!(
        shape > 0.0 && shape.is_finite(),
        "gamma shape must be positive"
    );
    if shape < 1.0 {
        let u: f64 = open01(rng);
        return ln_gamma_sample(shape + 1.0, rng) + u.ln() / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = StandardNormal.sample(rng);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = open01(rng);
        if u.ln() < 0.5 * x * x + d - d * v + d * v.ln() {
            return d.ln() + v.ln();
        }
    }
}

fn open01(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Draw from `Dir(params)`. Zero entries stay exactly zero; infinite entries
/// share all of the mass equally.
pub fn dirichlet(params: &[f64], rng: &mut Rng) -> Vec<f64> {
    let active: Vec<usize> = (0..params.len()).filter(|&i| params[i] > 0.0).collect();
    let mut out = vec![0.0; params.len()];
    if active.is_empty() {
        return out;
    }
    let infinite: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&i| params[i].is_infinite())
        .collect();
    if !infinite.is_empty() {
        for &i in &infinite {
            out[i] = 1.0 / infinite.len() as f64;
        }
        return out;
    }
    let logs: Vec<f64> = active
        .iter()
        .map(|&i| ln_gamma_sample(params[i], rng))
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = weights.iter().sum();
    for (&i, w) in active.iter().zip(weights) {
        out[i] = w / sum;
    }
    out
}

/// Symmetric-prior draw: `Dir(concentration * prior)`, or `prior` itself when
/// the concentration is infinite.
pub fn dirichlet_with_prior(concentration: f64, prior: &[f64], rng: &mut Rng) -> Vec<f64> {
    let total: f64 = prior.iter().sum();
    let p: Vec<f64> = prior.iter().map(|x| x / total).collect();
    if concentration.is_infinite() {
        return p;
    }
    let params: Vec<f64> = p.iter().map(|x| x * concentration).collect();
    dirichlet(&params, rng)
}

/// Integer quotas summing to `total`, proportional to `weights`.
///
/// Floors first, then the leftover units go to the largest fractional
/// remainders; ties go to the lower index. All-zero weights are treated as
/// uniform.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let shares: Vec<f64> = if sum > 0.0 {
        weights.iter().map(|w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut quotas: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = shares[a] - shares[a].floor();
        let rb = shares[b] - shares[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        quotas[i] += 1;
    }
    quotas
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

fn equal_sizes(total: usize, clients: usize) -> Vec<usize> {
    (0..clients)
        .map(|i| total / clients + usize::from(i < total % clients))
        .collect()
}

fn class_pools(dataset: &Dataset, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    let mut pools = vec![Vec::new(); dataset.num_classes];
    for s in &dataset.samples {
        let label = s.label.ok_or_else(|| {
            FesError::InvalidConfig(format!(
                "label partitioning needs labels; sample {} has none",
                s.id
            ))
        })?;
        pools[label].push(s.id);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    Ok(pools)
}

/// Per-client class quotas for a client of `size` samples given mix `q`,
/// never exceeding what is left in each class. A shortfall in an exhausted
/// class is re-spread over the classes that still have samples.
fn class_quotas(q: &[f64], size: usize, remaining: &[usize]) -> Vec<usize> {
    let mut quota = largest_remainder(q, size);
    loop {
        let mut deficit = 0;
        for (c, qc) in quota.iter_mut().enumerate() {
            if *qc > remaining[c] {
                deficit += *qc - remaining[c];
                *qc = remaining[c];
            }
        }
        if deficit == 0 {
            return quota;
        }
        let spare: Vec<usize> = (0..q.len()).map(|c| remaining[c] - quota[c]).collect();
        if spare.iter().sum::<usize>() == 0 {
            return quota;
        }
        let mut weights: Vec<f64> = (0..q.len())
            .map(|c| if spare[c] > 0 { q[c] } else { 0.0 })
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            weights = spare.iter().map(|&s| s as f64).collect();
        }
        for (c, extra) in largest_remainder(&weights, deficit).into_iter().enumerate() {
            quota[c] += extra;
        }
    }
}

/// Label-skew partition with (near-)equal client sizes.
///
/// Client `j` draws its class mix `q_j ~ Dir(alpha * p)` where `p` is the
/// class distribution of the samples not yet handed out (uniform at the
/// start for a balanced pool), then takes that many samples of each class
/// without replacement.
pub fn partition_labels_dirichlet(
    dataset: &Dataset,
    num_clients: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<ClientShard>> {
    let sizes = equal_sizes(dataset.len(), num_clients);
    partition_labels_with_sizes(dataset, &sizes, alpha, rng)
}

fn partition_labels_with_sizes(
    dataset: &Dataset,
    sizes: &[usize],
    alpha: f64,
    rng: &mut Rng,
) -> Result<Vec<ClientShard>> {
    if !(alpha > 0.0) {
        return Err(FesError::InvalidConfig(format!(
            "alpha must be positive (got {alpha})"
        )));
    }
    let mut pools = class_pools(dataset, &mut rng.split("pools"))?;
    let mut mix_rng = rng.split("mix");
    let mut shards = Vec::with_capacity(sizes.len());
    for (client_id, &size) in sizes.iter().enumerate() {
        let remaining: Vec<usize> = pools.iter().map(Vec::len).collect();
        let prior: Vec<f64> = remaining.iter().map(|&r| r as f64).collect();
        let q = dirichlet_with_prior(alpha, &prior, &mut mix_rng);
        let quota = class_quotas(&q, size, &remaining);
        let mut ids = Vec::with_capacity(size);
        for (pool, take) in pools.iter_mut().zip(quota) {
            ids.extend(pool.drain(pool.len() - take..));
        }
        ids.sort_unstable();
        shards.push(ClientShard::new(client_id, ids));
    }
    Ok(shards)
}

/// Quantity-skew partition: `z ~ Dir_N(beta)` client shares of the pool,
/// labels otherwise uniformly random.
pub fn partition_quantity_dirichlet(
    dataset: &Dataset,
    num_clients: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<Vec<ClientShard>> {
    let sizes = quantity_sizes(dataset.len(), num_clients, beta, rng)?;
    let mut ids: Vec<usize> = (0..dataset.len()).collect();
    ids.shuffle(&mut rng.split("assign"));
    let mut shards = Vec::with_capacity(num_clients);
    let mut start = 0;
    for (client_id, size) in sizes.into_iter().enumerate() {
        let mut mine = ids[start..start + size].to_vec();
        mine.sort_unstable();
        start += size;
        shards.push(ClientShard::new(client_id, mine));
    }
    Ok(shards)
}

fn quantity_sizes(
    total: usize,
    num_clients: usize,
    beta: f64,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(FesError::InvalidConfig(
            "num_clients must be positive".into(),
        ));
    }
    if !(beta > 0.0) {
        return Err(FesError::InvalidConfig(format!(
            "beta must be positive (got {beta})"
        )));
    }
    if beta.is_infinite() {
        return Ok(equal_sizes(total, num_clients));
    }
    let z = dirichlet(&vec![beta; num_clients], &mut rng.split("sizes"));
    Ok(largest_remainder(&z, total))
}

/// Combined partition: client sizes from `beta`, class mixes from `alpha`.
pub fn partition(
    dataset: &Dataset,
    spec: &PartitionSpec,
    rng: &mut Rng,
) -> Result<Vec<ClientShard>> {
    spec.validate(dataset.len())?;
    if spec.alpha.is_infinite() && spec.beta.is_finite() {
        return partition_quantity_dirichlet(dataset, spec.num_clients, spec.beta, rng);
    }
    let sizes = quantity_sizes(dataset.len(), spec.num_clients, spec.beta, rng)?;
    partition_labels_with_sizes(dataset, &sizes, spec.alpha, rng)
}

/// Reveal gold labels on `xi` randomly chosen clients.
///
/// Quotas follow `z ~ Dir_xi(gamma)` scaled to `n` with largest-remainder
/// rounding. A client too small for its quota passes the excess on to the
/// next chosen client.
pub fn assign_gold_labels(
    mut shards: Vec<ClientShard>,
    n: usize,
    gamma: f64,
    xi: usize,
    rng: &mut Rng,
) -> Result<Vec<ClientShard>> {
    if xi == 0 || xi > shards.len() {
        return Err(FesError::InvalidConfig(format!(
            "gold_client_cap must be in 1..={} (got {xi})",
            shards.len()
        )));
    }
    if !(gamma > 0.0) {
        return Err(FesError::InvalidConfig(format!(
            "gold_sparsity must be positive (got {gamma})"
        )));
    }
    let mut order: Vec<usize> = (0..shards.len()).collect();
    order.shuffle(&mut rng.split("clients"));
    order.truncate(xi);

    let capacity: usize = order.iter().map(|&c| shards[c].unlabeled.len()).sum();
    if n > capacity {
        return Err(FesError::GoldQuotaTooLarge {
            requested: n,
            available: capacity,
        });
    }

    let z = if gamma.is_infinite() {
        vec![1.0 / xi as f64; xi]
    } else {
        dirichlet(&vec![gamma; xi], &mut rng.split("quota"))
    };
    let quotas = largest_remainder(&z, n);

    let mut takes = vec![0usize; xi];
    let mut carry = 0usize;
    for (slot, &client) in order.iter().enumerate() {
        let want = quotas[slot] + carry;
        takes[slot] = want.min(shards[client].unlabeled.len());
        carry = want - takes[slot];
    }
    // Wrap around for spill left over after the last chosen client.
    for (slot, &client) in order.iter().enumerate() {
        if carry == 0 {
            break;
        }
        let room = shards[client].unlabeled.len() - takes[slot];
        let extra = room.min(carry);
        takes[slot] += extra;
        carry -= extra;
    }
    debug_assert_eq!(carry, 0);

    let mut reveal_rng = rng.split("reveal");
    for (slot, &client) in order.iter().enumerate() {
        let shard = &mut shards[client];
        let mut pool = std::mem::take(&mut shard.unlabeled);
        pool.shuffle(&mut reveal_rng);
        let mut gold: Vec<usize> = pool.drain(..takes[slot]).collect();
        gold.sort_unstable();
        pool.sort_unstable();
        shard.gold.extend(gold);
        shard.gold.sort_unstable();
        shard.unlabeled = pool;
    }
    Ok(shards)
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

pub fn class_histogram(shard: &ClientShard, dataset: &Dataset) -> Vec<usize> {
    let mut hist = vec![0; dataset.num_classes];
    for id in shard.all_ids() {
        if let Some(l) = dataset.true_label(id) {
            hist[l] += 1;
        }
    }
    hist
}

/// Gini coefficient of non-negative values (0 = equal, towards 1 = skewed).
pub fn gini(values: &[usize]) -> f64 {
    let n = values.len();
    let total: usize = values.iter().sum();
    if n == 0 || total == 0 {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (2 * (i + 1)) as f64 * v as f64)
        .sum();
    weighted / (n as f64 * total as f64) - (n as f64 + 1.0) / n as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
