//! The federated orchestrator: training rounds, labeling events, pacing and
//! cost accounting over a fixed set of simulated clients.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    assign_gold_labels, gen_blobs, partition, split_holdout, PartitionSpec, SyntheticTaskSpec,
};
use crate::domain::{validate_partition, ClientShard, Dataset, PseudoLabel};
use crate::error::{FesError, Result};
use crate::exec::Execution;
use crate::model::{
    accuracy, fed_avg, trainable_parameter_count, Example, FedModel, LayerPlan, MlpModel,
    ModelConfig, TrainerConfig,
};
use crate::pacing::{
    AugEParams, AugETracker, ControllerConfig, Decision, PacingConfig, PacingController, Prober,
    SearchOutcome, StaticSchedule,
};
use crate::planner::{round_cost, CostModel, PlanEvaluator};
use crate::rng::Rng;
use crate::selector::{random_select, select_pool, SelectorConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PacingMode {
    /// No pseudo labeling at all.
    Off,
    Fixed(PacingConfig),
    /// Label every round on that round's training participants, adding up to
    /// `per_client` labels per client per visit.
    FixedCount {
        per_client: usize,
    },
    Controller(ControllerConfig),
}

/// Which unlabeled samples a client may pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Filter {
    /// The whole unlabeled pool.
    Off,
    /// Greedy representativeness/diversity selection.
    Diversity(SelectorConfig),
    /// Uniform sample of the same budget; an ablation baseline.
    Random { budget_fraction: f64 },
}

/// AUG-E weights; latencies default to the cost model's per-batch forward
/// pass and per-batch training step under the active plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugEConfig {
    pub eta: f64,
    pub theta: f64,
    pub l_i: Option<f64>,
    pub l_t: Option<f64>,
}

impl Default for AugEConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            theta: 1.0,
            l_i: None,
            l_t: None,
        }
    }
}

impl AugEConfig {
    pub fn resolve(&self, cost: &CostModel, plan: &LayerPlan) -> AugEParams {
        AugEParams {
            eta: self.eta,
            theta: self.theta,
            l_i: self.l_i.unwrap_or_else(|| cost.forward_time(plan.len())),
            l_t: self.l_t.unwrap_or_else(|| cost.train_batch_time(plan)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub clients_per_training_round: usize,
    pub pacing: PacingMode,
    pub confidence_threshold: f64,
    pub capacity_filter: bool,
    /// `None` trains every layer.
    pub plan: Option<LayerPlan>,
    pub filter: Filter,
    pub trainer: TrainerConfig,
    pub cost: CostModel,
    pub aug_e: AugEConfig,
    pub max_rounds: usize,
    pub target_accuracy: Option<f64>,
    /// Share of the test draw held back for validation.
    pub validation_fraction: f64,
    /// Selector embedding pass, as a fraction of a training pass per sample.
    pub embedding_cost_fraction: f64,
    pub execution: Execution,
    /// Re-check shard and label invariants after every step.
    pub check_invariants: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            clients_per_training_round: 5,
            pacing: PacingMode::Controller(ControllerConfig::default()),
            confidence_threshold: 0.9,
            capacity_filter: true,
            plan: None,
            filter: Filter::Diversity(SelectorConfig::default()),
            trainer: TrainerConfig::default(),
            cost: CostModel::default(),
            aug_e: AugEConfig::default(),
            max_rounds: 100,
            target_accuracy: None,
            validation_fraction: 0.1,
            embedding_cost_fraction: 0.084,
            execution: Execution::default(),
            check_invariants: cfg!(debug_assertions),
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients_per_training_round == 0 {
            return Err(FesError::InvalidConfig(
                "engine.clients_per_training_round must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(FesError::InvalidConfig(
                "engine.confidence_threshold must be in [0, 1]".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(FesError::InvalidConfig(
                "engine.validation_fraction must be in (0, 1)".into(),
            ));
        }
        if !(self.embedding_cost_fraction >= 0.0) {
            return Err(FesError::InvalidConfig(
                "engine.embedding_cost_fraction must be >= 0".into(),
            ));
        }
        if let Some(t) = self.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(FesError::InvalidConfig(
                    "engine.target_accuracy must be in [0, 1]".into(),
                ));
            }
        }
        match &self.pacing {
            PacingMode::Fixed(c) => c.validate()?,
            PacingMode::Controller(c) => c.validate()?,
            PacingMode::FixedCount { .. } | PacingMode::Off => {}
        }
        match &self.filter {
            Filter::Off => {}
            Filter::Diversity(s) => s.validate()?,
            Filter::Random { budget_fraction } => {
                if !(*budget_fraction > 0.0 && *budget_fraction <= 1.0) {
                    return Err(FesError::InvalidConfig(
                        "engine.filter.budget_fraction must be in (0, 1]".into(),
                    ));
                }
            }
        }
        self.trainer.validate()?;
        self.cost.validate()
    }

    pub fn plan_for(&self, num_layers: usize) -> Result<LayerPlan> {
        match &self.plan {
            Some(p) if p.len() != num_layers => Err(FesError::ShapeMismatch(format!(
                "engine.plan {p} has {} layers, model has {num_layers}",
                p.len()
            ))),
            Some(p) => Ok(p.clone()),
            None => Ok(LayerPlan::all_full(num_layers)),
        }
    }
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// Everything a run reads but never changes, plus the initial shards.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub train: Dataset,
    pub shards: Vec<ClientShard>,
    /// Server-side validation split (capacity filter, pacing).
    pub val: Dataset,
    pub test: Dataset,
    /// Small labeled split used only for informative initialization.
    pub public: Dataset,
}

impl Scenario {
    /// Every training sample revealed as gold; the full-label reference.
    pub fn with_all_gold(&self) -> Self {
        let mut sc = self.clone();
        for s in &mut sc.shards {
            s.gold.append(&mut s.unlabeled);
            s.gold.sort_unstable();
            s.pseudo.clear();
        }
        sc
    }

    pub fn gold_count(&self) -> usize {
        self.shards.iter().map(|s| s.gold.len()).sum()
    }
}

/// Draw the blob task, split it across clients and reveal the gold labels.
pub fn build_scenario(
    task: &SyntheticTaskSpec,
    part: &PartitionSpec,
    public_per_class: usize,
    validation_fraction: f64,
    rng: &Rng,
) -> Result<Scenario> {
    task.validate()?;
    let data = gen_blobs(task, &mut rng.split("data"))?;
    let shards = partition(&data.train, part, &mut rng.split("partition"))?;
    let shards = assign_gold_labels(
        shards,
        part.gold_total,
        part.gold_sparsity,
        part.gold_client_cap,
        &mut rng.split("gold"),
    )?;
    let (val, test) = split_holdout(
        &data.test,
        validation_fraction,
        &mut rng.split("validation"),
    );
    let public = data
        .task
        .draw_clean(public_per_class, &mut rng.split("public"));
    Ok(Scenario {
        train: data.train,
        shards,
        val,
        test,
        public,
    })
}

/// Random initialization, then centroid initialization of the output layer
/// when `cfg.pretrained`.
pub fn init_model(sc: &Scenario, cfg: &ModelConfig, rng: &Rng) -> Result<MlpModel> {
    let mut model = MlpModel::from_config(
        sc.train.dim,
        sc.train.num_classes,
        cfg,
        &mut rng.split("model"),
    );
    if cfg.pretrained {
        model.centroid_init(&sc.public, cfg.init_sharpness)?;
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// State and outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    /// Simulated wall clock.
    pub time: f64,
    pub energy: f64,
    pub traffic_bytes: u64,
    /// Client-side inference time summed over clients (not wall clock).
    pub inference_time: f64,
    pub inference_batches: u64,
    /// One-off selector embedding pass, summed over clients.
    pub selector_time: f64,
}

impl CostTotals {
    fn add(&mut self, o: &CostTotals) {
        self.time += o.time;
        self.energy += o.energy;
        self.traffic_bytes += o.traffic_bytes;
        self.inference_time += o.inference_time;
        self.inference_batches += o.inference_batches;
        self.selector_time += o.selector_time;
    }
}

#[derive(Debug, Clone)]
pub struct SimState<M> {
    pub model: M,
    pub shards: Vec<ClientShard>,
    /// Training rounds completed.
    pub round: usize,
    /// Labeling events dispatched, including skipped ones.
    pub events: usize,
    pub skipped_events: usize,
    /// Admitted share of each client's candidate pool.
    pub fraction: f64,
    /// Labeling visits per client.
    pub visits: Vec<usize>,
    pub last_participants: Vec<usize>,
    pub totals: CostTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub sim_time: f64,
    pub test_acc: f64,
    pub val_acc: f64,
    pub total_pseudo: usize,
    /// Diagnostic only: uses the hidden true labels.
    pub pseudo_correct_frac: f64,
    pub active_config: Option<PacingConfig>,
    pub aug_e: Option<f64>,
    pub traffic_bytes: u64,
    pub energy: f64,
}

pub const TRACE_HEADER: &str = "round,sim_time,test_acc,val_acc,total_pseudo,pseudo_correct_frac,f,n,k,aug_e,traffic_bytes,energy";

/// Trace as CSV with [`TRACE_HEADER`]; absent values are empty cells.
pub fn trace_csv(trace: &[RoundTrace]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        let (f, n, k) = match r.active_config {
            Some(c) => (c.f.to_string(), c.n.to_string(), c.k.to_string()),
            None => Default::default(),
        };
        let aug = r.aug_e.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{f},{n},{k},{aug},{},{}",
            r.round,
            r.sim_time,
            r.test_acc,
            r.val_acc,
            r.total_pseudo,
            r.pseudo_correct_frac,
            r.traffic_bytes,
            r.energy
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub plan: LayerPlan,
    pub zero_shot_val_acc: f64,
    pub zero_shot_test_acc: f64,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub final_val_acc: f64,
    pub total_pseudo: usize,
    pub pseudo_correct_frac: f64,
    /// Correctness of the labels admitted by the first non-skipped event.
    pub first_event_correct_frac: Option<f64>,
    pub label_events: usize,
    pub skipped_events: usize,
    pub switches: usize,
    pub final_config: Option<PacingConfig>,
    pub startup: Option<SearchOutcome>,
    pub totals: CostTotals,
    /// Cost of pacing probes, kept out of the main clock.
    pub probe_totals: CostTotals,
}

#[derive(Debug, Clone)]
pub struct RunOutput<M> {
    pub trace: Vec<RoundTrace>,
    pub model: M,
    pub summary: RunSummary,
}

/// How many labels a visited client may hold after an event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quota {
    /// Share of the client's candidate pool.
    Fraction(f64),
    /// `per_visit` more labels for every visit so far, this one included.
    PerVisit(usize),
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

pub struct Engine<'a> {
    cfg: EngineConfig,
    sc: &'a Scenario,
    plan: LayerPlan,
    params: AugEParams,
    root: Rng,
    /// Labeling candidates per client, ascending ids.
    pools: Vec<Vec<usize>>,
    /// One-off selector cost, charged at run start.
    selector_cost: CostTotals,
}

impl<'a> Engine<'a> {
    /// Validates the configuration and runs the selector over every client's
    /// unlabeled pool.
    pub fn new(cfg: EngineConfig, sc: &'a Scenario, num_layers: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        validate_partition(&sc.shards, sc.train.len())?;
        let plan = cfg.plan_for(num_layers)?;
        let params = cfg.aug_e.resolve(&cfg.cost, &plan);
        params.validate()?;
        let root = Rng::new(seed).split("engine");

        let mut selector_cost = CostTotals::default();
        let pools: Vec<Vec<usize>> = match &cfg.filter {
            Filter::Off => sc
                .shards
                .iter()
                .map(|s| sorted(s.unlabeled.clone()))
                .collect(),
            Filter::Random { budget_fraction } => sc
                .shards
                .iter()
                .map(|s| {
                    let mut rng = root.split(&format!("filter/{}", s.client_id));
                    sorted(random_select(&s.unlabeled, *budget_fraction, &mut rng))
                })
                .collect(),
            Filter::Diversity(sel) => {
                let picks = sc
                    .shards
                    .iter()
                    .map(|s| {
                        select_pool(
                            &s.unlabeled,
                            |id| sc.train.embedding(id).to_vec(),
                            sel,
                            cfg.execution,
                        )
                        .map(|p| sorted(p.ids))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let pass = cfg.embedding_cost_fraction
                    * cfg.cost.train_batch_time(&LayerPlan::all_full(num_layers));
                let mut slowest: f64 = 0.0;
                for s in &sc.shards {
                    let t = pass * batches(s.unlabeled.len(), cfg.trainer.batch_size) as f64;
                    slowest = slowest.max(t);
                    selector_cost.selector_time += t;
                    selector_cost.energy += cfg.cost.energy(t, 0.0);
                }
                selector_cost.time = slowest;
                picks
            }
        };
        Ok(Self {
            cfg,
            sc,
            plan,
            params,
            root,
            pools,
            selector_cost,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &LayerPlan {
        &self.plan
    }

    pub fn aug_e_params(&self) -> &AugEParams {
        &self.params
    }

    pub fn pools(&self) -> &[Vec<usize>] {
        &self.pools
    }

    /// Stream for client `client`'s local training in round `round`.
    pub fn train_rng(&self, round: usize, client: usize) -> Rng {
        self.root.split(&format!("train/{round}/{client}"))
    }

    pub fn initial_state<M: FedModel>(&self, model: M) -> SimState<M> {
        SimState {
            model,
            shards: self.sc.shards.clone(),
            round: 0,
            events: 0,
            skipped_events: 0,
            fraction: 0.0,
            visits: vec![0; self.sc.shards.len()],
            last_participants: Vec::new(),
            totals: CostTotals::default(),
        }
    }

    pub fn val_acc<M: FedModel>(&self, model: &M) -> f64 {
        accuracy(model, &self.sc.val)
    }

    pub fn test_acc<M: FedModel>(&self, model: &M) -> f64 {
        accuracy(model, &self.sc.test)
    }

    /// One synchronous FedAvg round over a random subset of eligible clients.
    pub fn training_round<M: FedModel>(&self, st: &mut SimState<M>) -> Result<()> {
        let eligible: Vec<usize> = st
            .shards
            .iter()
            .filter(|s| s.is_eligible())
            .map(|s| s.client_id)
            .collect();
        if eligible.is_empty() {
            return Err(FesError::NoLabeledData);
        }
        let round = st.round + 1;
        let mut participants = eligible;
        let take = self.cfg.clients_per_training_round.min(participants.len());
        participants.partial_shuffle(&mut self.root.split(&format!("round/{round}")), take);
        participants.truncate(take);
        participants.sort_unstable();

        let shapes = st.model.layer_shapes();
        let results = self.cfg.execution.map(&participants, |&c| -> Result<_> {
            let shard = &st.shards[c];
            let data: Vec<Example<'_>> = shard
                .gold
                .iter()
                .map(|&id| Example {
                    x: self.sc.train.embedding(id),
                    label: self
                        .sc
                        .train
                        .true_label(id)
                        .expect("training samples carry labels"),
                })
                .chain(shard.pseudo.iter().map(|p| Example {
                    x: self.sc.train.embedding(p.sample_id),
                    label: p.label,
                }))
                .collect();
            let (m, n) = st.model.local_train(
                &data,
                &self.plan,
                &self.cfg.trainer,
                &mut self.train_rng(round, c),
            )?;
            let b =
                batches(data.len(), self.cfg.trainer.batch_size) * self.cfg.trainer.local_epochs;
            Ok((m, n, round_cost(&shapes, &self.plan, &self.cfg.cost, b)))
        });
        let mut updates = Vec::with_capacity(results.len());
        let mut slowest: f64 = 0.0;
        for r in results {
            let (m, n, cost) = r?;
            slowest = slowest.max(cost.time());
            st.totals.energy += cost.energy;
            st.totals.traffic_bytes += cost.traffic_bytes;
            updates.push((m, n));
        }
        st.totals.time += slowest;
        st.model = fed_avg(&updates)?;
        st.round = round;
        st.last_participants = participants;
        Ok(())
    }

    /// `n` clients drawn uniformly for the next labeling event.
    pub fn pick_label_clients<M>(&self, st: &SimState<M>, n: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..st.shards.len()).collect();
        let take = n.min(ids.len());
        ids.partial_shuffle(
            &mut self
                .root
                .split(&format!("label/{}/{}", st.round, st.events)),
            take,
        );
        ids.truncate(take);
        ids.sort_unstable();
        ids
    }

    /// Pseudo-label the candidate pools of `clients`.
    ///
    /// Existing pseudo labels on a visited client are re-predicted in place;
    /// new ones are admitted by descending confidence, at or above the
    /// threshold, until the client holds its quota. The whole event is
    /// skipped when the model validates below the zero-shot model.
    /// Returns the correctness of the newly admitted labels (None if
    /// skipped or nothing was admitted).
    pub fn labeling_event<M: FedModel>(
        &self,
        st: &mut SimState<M>,
        clients: &[usize],
        quota: Quota,
        zero_shot_val: f64,
    ) -> Option<f64> {
        st.events += 1;
        if self.cfg.capacity_filter && self.val_acc(&st.model) < zero_shot_val {
            st.skipped_events += 1;
            log::debug!("labeling event {} skipped by capacity filter", st.events);
            return None;
        }
        let event = st.events;
        let threshold = self.cfg.confidence_threshold;
        let bs = self.cfg.trainer.batch_size;
        // Clients already hold the frozen part of the model.
        let downlink = (self.cfg.cost.bytes_per_param
            * trainable_parameter_count(&st.model.layer_shapes(), &self.plan))
            as u64;
        let results = self.cfg.execution.map(clients, |&c| {
            let pool = &self.pools[c];
            let preds: HashMap<usize, (usize, f64)> = pool
                .iter()
                .map(|&id| (id, st.model.confidence(self.sc.train.embedding(id))))
                .collect();
            let shard = &st.shards[c];
            let mut pseudo: Vec<PseudoLabel> = shard
                .pseudo
                .iter()
                .map(|p| {
                    let (label, confidence) = preds[&p.sample_id];
                    PseudoLabel {
                        sample_id: p.sample_id,
                        label,
                        confidence,
                        issued_at_event: event,
                    }
                })
                .collect();
            let cap = match quota {
                Quota::Fraction(f) => ((f * pool.len() as f64) - 1e-9).ceil().max(0.0) as usize,
                Quota::PerVisit(n) => (st.visits[c] + 1) * n,
            };
            let held: HashSet<usize> = shard.pseudo.iter().map(|p| p.sample_id).collect();
            let mut fresh: Vec<(usize, usize, f64)> = pool
                .iter()
                .filter(|id| !held.contains(id))
                .map(|&id| (id, preds[&id].0, preds[&id].1))
                .collect();
            fresh.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            let admitted: Vec<PseudoLabel> = fresh
                .into_iter()
                .take_while(|x| x.2 >= threshold)
                .take(cap.saturating_sub(pseudo.len()))
                .map(|(sample_id, label, confidence)| PseudoLabel {
                    sample_id,
                    label,
                    confidence,
                    issued_at_event: event,
                })
                .collect();
            pseudo.extend(admitted.iter().copied());
            let b = batches(pool.len(), bs) as u64;
            (c, pseudo, admitted, b)
        });
        let mut slowest: f64 = 0.0;
        let (mut right, mut total) = (0usize, 0usize);
        for (c, pseudo, admitted, b) in results {
            let infer = b as f64 * self.params.l_i;
            let comm = self.cfg.cost.comm_time(downlink);
            slowest = slowest.max(infer + comm);
            st.totals.energy += self.cfg.cost.energy(infer, comm);
            st.totals.traffic_bytes += downlink;
            st.totals.inference_time += infer;
            st.totals.inference_batches += b;
            total += admitted.len();
            right += admitted
                .iter()
                .filter(|p| self.sc.train.true_label(p.sample_id) == Some(p.label))
                .count();
            st.shards[c].pseudo = pseudo;
            st.visits[c] += 1;
        }
        st.totals.time += slowest;
        (total > 0).then(|| right as f64 / total as f64)
    }

    /// Apply one event under a fraction-based pacing config.
    fn paced_event<M: FedModel>(
        &self,
        st: &mut SimState<M>,
        cfg: &PacingConfig,
        zero_shot_val: f64,
    ) -> Option<f64> {
        let clients = self.pick_label_clients(st, cfg.n);
        let next = (st.fraction + f64::from(cfg.k) / 100.0).min(1.0);
        let before = st.skipped_events;
        let out = self.labeling_event(st, &clients, Quota::Fraction(next), zero_shot_val);
        if st.skipped_events == before {
            st.fraction = next;
        }
        out
    }

    /// Self-contained mini-run from `snapshot`: one immediate labeling event
    /// under `cfg`, then `rounds` training rounds on its schedule. Returns
    /// the validation accuracy change and the cost spent.
    pub fn probe<M: FedModel>(
        &self,
        snapshot: &SimState<M>,
        cfg: &PacingConfig,
        rounds: usize,
        zero_shot_val: f64,
    ) -> Result<(f64, CostTotals)> {
        let mut st = snapshot.clone();
        st.totals = CostTotals::default();
        let start = self.val_acc(&st.model);
        self.paced_event(&mut st, cfg, zero_shot_val);
        let mut schedule = StaticSchedule::new(cfg.f);
        for _ in 0..rounds {
            self.training_round(&mut st)?;
            if schedule.tick() == Decision::TriggerLabeling {
                self.paced_event(&mut st, cfg, zero_shot_val);
            }
        }
        Ok((self.val_acc(&st.model) - start, st.totals))
    }

    fn check<M: FedModel>(&self, st: &SimState<M>, eligible_before: &[bool]) -> Result<()> {
        validate_partition(&st.shards, self.sc.train.len())?;
        for ((s, orig), was) in st.shards.iter().zip(&self.sc.shards).zip(eligible_before) {
            if s.gold != orig.gold || s.unlabeled != orig.unlabeled {
                return Err(FesError::InvariantViolated(format!(
                    "client {} gold/unlabeled sets changed",
                    s.client_id
                )));
            }
            if *was && !s.is_eligible() {
                return Err(FesError::InvariantViolated(format!(
                    "client {} lost eligibility",
                    s.client_id
                )));
            }
        }
        Ok(())
    }

    /// Run to `max_rounds` (or the target accuracy) from `model`.
    pub fn run<M: FedModel>(&self, model: M) -> Result<RunOutput<M>> {
        let mut st = self.initial_state(model);
        let zero_shot_val = self.val_acc(&st.model);
        let zero_shot_test = self.test_acc(&st.model);
        let mut summary = RunSummary {
            rounds: 0,
            plan: self.plan.clone(),
            zero_shot_val_acc: zero_shot_val,
            zero_shot_test_acc: zero_shot_test,
            final_test_acc: zero_shot_test,
            best_test_acc: zero_shot_test,
            final_val_acc: zero_shot_val,
            total_pseudo: 0,
            pseudo_correct_frac: 0.0,
            first_event_correct_frac: None,
            label_events: 0,
            skipped_events: 0,
            switches: 0,
            final_config: None,
            startup: None,
            totals: CostTotals::default(),
            probe_totals: CostTotals::default(),
        };
        let mut trace = Vec::new();
        if self.cfg.max_rounds == 0 {
            return Ok(RunOutput {
                trace,
                model: st.model,
                summary,
            });
        }
        st.totals.add(&self.selector_cost);

        let mut controller = None;
        let mut fixed = None;
        let mut tracker = None;
        let mut every_round = None;
        match &self.cfg.pacing {
            PacingMode::Off => {}
            PacingMode::Fixed(c) => {
                fixed = Some((*c, StaticSchedule::new(c.f)));
                tracker = Some(AugETracker::new(5, 3, zero_shot_val));
            }
            PacingMode::FixedCount { per_client } => {
                every_round = Some(*per_client);
                tracker = Some(AugETracker::new(5, 3, zero_shot_val));
            }
            PacingMode::Controller(cc) => {
                let mut prober = EngineProber::new(self, &st, zero_shot_val);
                let (ctl, outcome) =
                    PacingController::start(cc.clone(), self.params, zero_shot_val, &mut prober)?;
                prober.finish()?;
                summary.probe_totals.add(&prober.totals);
                log::info!("startup pacing search picked {}", outcome.best);
                summary.startup = Some(outcome);
                controller = Some(ctl);
            }
        }

        let mut eligible: Vec<bool> = st.shards.iter().map(ClientShard::is_eligible).collect();
        let mut first_event = None;
        let mut record = |r: Option<f64>| {
            if first_event.is_none() {
                first_event = r;
            }
        };
        for _ in 0..self.cfg.max_rounds {
            self.training_round(&mut st)?;
            let val = self.val_acc(&st.model);
            let test = self.test_acc(&st.model);
            let mut aug_e = None;
            let mut active = None;
            if let Some((c, sched)) = fixed.as_mut() {
                active = Some(*c);
                aug_e = tracker.as_mut().and_then(|t| t.push(val, c, &self.params));
                if sched.tick() == Decision::TriggerLabeling {
                    record(self.paced_event(&mut st, c, zero_shot_val));
                }
            } else if let Some(per_client) = every_round {
                let c = PacingConfig::new(1, self.cfg.clients_per_training_round, 0);
                aug_e = tracker.as_mut().and_then(|t| t.push(val, &c, &self.params));
                let clients = st.last_participants.clone();
                record(self.labeling_event(
                    &mut st,
                    &clients,
                    Quota::PerVisit(per_client),
                    zero_shot_val,
                ));
            } else if let Some(ctl) = controller.as_mut() {
                let mut prober = EngineProber::new(self, &st, zero_shot_val);
                let decision = ctl.step(val, &mut prober);
                prober.finish()?;
                summary.probe_totals.add(&prober.totals);
                aug_e = ctl.last_aug_e;
                if decision == Decision::TriggerLabeling {
                    let c = ctl.active;
                    record(self.paced_event(&mut st, &c, zero_shot_val));
                }
                active = Some(ctl.active);
            }
            if self.cfg.check_invariants {
                self.check(&st, &eligible)?;
                eligible = st.shards.iter().map(ClientShard::is_eligible).collect();
            }
            let (total_pseudo, correct) = self.pseudo_stats(&st);
            trace.push(RoundTrace {
                round: st.round,
                sim_time: st.totals.time,
                test_acc: test,
                val_acc: val,
                total_pseudo,
                pseudo_correct_frac: correct,
                active_config: active,
                aug_e,
                traffic_bytes: st.totals.traffic_bytes,
                energy: st.totals.energy,
            });
            summary.best_test_acc = summary.best_test_acc.max(test);
            if self.cfg.target_accuracy.is_some_and(|t| test >= t) {
                break;
            }
        }
        let last = trace.last().expect("at least one round ran");
        summary.rounds = st.round;
        summary.final_test_acc = last.test_acc;
        summary.final_val_acc = last.val_acc;
        summary.total_pseudo = last.total_pseudo;
        summary.pseudo_correct_frac = last.pseudo_correct_frac;
        summary.first_event_correct_frac = first_event;
        summary.label_events = st.events - st.skipped_events;
        summary.skipped_events = st.skipped_events;
        summary.totals = st.totals;
        if let Some(ctl) = &controller {
            summary.switches = ctl.switches;
            summary.final_config = Some(ctl.active);
        } else if let Some((c, _)) = fixed {
            summary.final_config = Some(c);
        }
        Ok(RunOutput {
            trace,
            model: st.model,
            summary,
        })
    }

    fn pseudo_stats<M>(&self, st: &SimState<M>) -> (usize, f64) {
        let (mut total, mut right) = (0usize, 0usize);
        for p in st.shards.iter().flat_map(|s| &s.pseudo) {
            total += 1;
            if self.sc.train.true_label(p.sample_id) == Some(p.label) {
                right += 1;
            }
        }
        (
            total,
            if total == 0 {
                0.0
            } else {
                right as f64 / total as f64
            },
        )
    }
}

/// Probes candidates from a snapshot of the live run.
struct EngineProber<'e, 'a, M> {
    engine: &'e Engine<'a>,
    snapshot: &'e SimState<M>,
    zero_shot_val: f64,
    totals: CostTotals,
    error: Option<FesError>,
}

impl<'e, 'a, M: FedModel> EngineProber<'e, 'a, M> {
    fn new(engine: &'e Engine<'a>, snapshot: &'e SimState<M>, zero_shot_val: f64) -> Self {
        Self {
            engine,
            snapshot,
            zero_shot_val,
            totals: CostTotals::default(),
            error: None,
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.error.take().map_or(Ok(()), Err)
    }
}

impl<M: FedModel> Prober for EngineProber<'_, '_, M> {
    fn probe(&mut self, candidates: &[PacingConfig], rounds: usize) -> Vec<f64> {
        let results = self.engine.cfg.execution.map(candidates, |c| {
            self.engine
                .probe(self.snapshot, c, rounds, self.zero_shot_val)
        });
        results
            .into_iter()
            .map(|r| match r {
                Ok((delta, cost)) => {
                    self.totals.add(&cost);
                    delta
                }
                Err(e) => {
                    self.error.get_or_insert(e);
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }
}

fn batches(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

// ---------------------------------------------------------------------------
// Planner proxy
// ---------------------------------------------------------------------------

/// Scores a plan by its accuracy after a short full-label FedAvg run.
pub struct ProxyEvaluator {
    pub scenario: Scenario,
    pub model: MlpModel,
    pub engine: EngineConfig,
    pub rounds: usize,
    pub seed: u64,
    evaluations: AtomicUsize,
}

impl ProxyEvaluator {
    /// Labels every sample of `scenario` and disables pseudo labeling.
    pub fn new(
        scenario: &Scenario,
        model: MlpModel,
        engine: &EngineConfig,
        rounds: usize,
        seed: u64,
    ) -> Self {
        let engine = EngineConfig {
            pacing: PacingMode::Off,
            filter: Filter::Off,
            target_accuracy: None,
            max_rounds: rounds,
            check_invariants: false,
            ..engine.clone()
        };
        Self {
            scenario: scenario.with_all_gold(),
            model,
            engine,
            rounds,
            seed,
            evaluations: AtomicUsize::new(0),
        }
    }

    pub fn try_accuracy(&self, plan: &LayerPlan) -> Result<f64> {
        let cfg = EngineConfig {
            plan: Some(plan.clone()),
            ..self.engine.clone()
        };
        let engine = Engine::new(cfg, &self.scenario, self.model.num_layers(), self.seed)?;
        let out = engine.run(self.model.clone())?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        Ok(out.summary.final_test_acc)
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

impl PlanEvaluator for ProxyEvaluator {
    fn accuracy(&self, plan: &LayerPlan) -> f64 {
        self.try_accuracy(plan).unwrap_or_else(|e| {
            log::warn!("plan {plan} failed to evaluate: {e}");
            0.0
        })
    }
}
