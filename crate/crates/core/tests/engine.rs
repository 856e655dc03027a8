use fes_core::datagen::{PartitionSpec, SyntheticTaskSpec};
use fes_core::engine::*;
use fes_core::error::{FesError, Result};
use fes_core::model::{
    trainable_parameter_count, Example, FedModel, LayerPlan, LayerShape, MlpModel, ModelConfig,
    TrainerConfig,
};
use fes_core::pacing::{ControllerConfig, PacingConfig};
use fes_core::{ClientShard, Dataset, Rng, Sample};

/// Predicts class `x[1]` with confidence `x[0]` (two classes). Once `flip`
/// is set it predicts the other class with the same confidence. Training is
/// a no-op.
#[derive(Debug, Clone)]
struct Scripted {
    flip: f64,
}

impl FedModel for Scripted {
    fn input_dim(&self) -> usize {
        2
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn layer_shapes(&self) -> Vec<LayerShape> {
        vec![LayerShape {
            weights: 3,
            biases: 1,
        }]
    }
    fn predict_dist(&self, x: &[f64]) -> Vec<f64> {
        let mut cls = x[1] as usize;
        if self.flip > 0.5 {
            cls = 1 - cls;
        }
        let mut d = vec![1.0 - x[0]; 2];
        d[cls] = x[0];
        d
    }
    fn local_train(
        &self,
        data: &[Example<'_>],
        _: &LayerPlan,
        _: &TrainerConfig,
        _: &mut Rng,
    ) -> Result<(Self, usize)> {
        Ok((self.clone(), data.len()))
    }
    fn flat_params(&self) -> Vec<f64> {
        vec![self.flip, 0.0, 0.0, 0.0]
    }
    fn with_flat_params(&self, p: &[f64]) -> Result<Self> {
        Ok(Self { flip: p[0] })
    }
}

fn sample(id: usize, conf: f64, class: usize) -> Sample {
    Sample {
        id,
        embedding: vec![conf, class as f64],
        label: Some(class),
    }
}

/// Client 0 holds one gold sample and an unlabeled pool with the given
/// confidences (all class 1); client 1 holds two gold samples only.
fn scripted_scenario(confidences: &[f64]) -> Scenario {
    let mut samples = vec![sample(0, 0.99, 0), sample(1, 0.99, 1), sample(2, 0.99, 0)];
    for (i, &c) in confidences.iter().enumerate() {
        samples.push(sample(3 + i, c, 1));
    }
    let n = samples.len();
    let train = Dataset::new(2, 2, samples).unwrap();
    let held =
        |k: usize| Dataset::new(2, 2, (0..k).map(|i| sample(i, 0.99, i % 2)).collect()).unwrap();
    let shards = vec![
        ClientShard {
            client_id: 0,
            gold: vec![0],
            unlabeled: (3..n).collect(),
            pseudo: vec![],
        },
        ClientShard {
            client_id: 1,
            gold: vec![1, 2],
            unlabeled: vec![],
            pseudo: vec![],
        },
    ];
    Scenario {
        train,
        shards,
        val: held(4),
        test: held(4),
        public: held(2),
    }
}

fn scripted_config() -> EngineConfig {
    EngineConfig {
        pacing: PacingMode::Off,
        filter: Filter::Off,
        capacity_filter: false,
        check_invariants: true,
        ..Default::default()
    }
}

#[test]
fn confidence_just_below_threshold_is_rejected() {
    let sc = scripted_scenario(&[0.95, 0.9, 0.89, 0.5]);
    let engine = Engine::new(scripted_config(), &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 0.0 });
    let correct = engine.labeling_event(&mut st, &[0], Quota::Fraction(1.0), 0.0);
    let mut ids: Vec<usize> = st.shards[0].pseudo.iter().map(|p| p.sample_id).collect();
    ids.sort_unstable();
    assert_eq!(ids, vec![3, 4]);
    assert_eq!(correct, Some(1.0));
}

#[test]
fn admission_follows_confidence_order_up_to_the_quota() {
    let sc = scripted_scenario(&[0.91, 0.99, 0.95, 0.97]);
    let engine = Engine::new(scripted_config(), &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 0.0 });
    // ceil(0.5 * 4) = 2 labels: the two most confident.
    engine.labeling_event(&mut st, &[0], Quota::Fraction(0.5), 0.0);
    let ids: Vec<usize> = st.shards[0].pseudo.iter().map(|p| p.sample_id).collect();
    assert_eq!(ids, vec![4, 6]);
    // ceil(0.26 * 4) = 2 as well, so a repeat admits nothing new.
    engine.labeling_event(&mut st, &[0], Quota::Fraction(0.26), 0.0);
    assert_eq!(st.shards[0].pseudo.len(), 2);
}

#[test]
fn zero_fraction_admits_nothing_but_still_costs() {
    let sc = scripted_scenario(&[0.99; 9]);
    let cfg = scripted_config();
    let engine = Engine::new(cfg.clone(), &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 0.0 });
    let out = engine.labeling_event(&mut st, &[0], Quota::Fraction(0.0), 0.0);
    assert_eq!(out, None);
    assert!(st.shards[0].pseudo.is_empty());

    // 9 candidates in batches of 4 -> 3 forward batches; the downlink
    // carries the 4 trainable parameters.
    let infer = 3.0 * cfg.cost.forward_time(1);
    let bytes = 4 * cfg.cost.bytes_per_param as u64;
    let comm = bytes as f64 / cfg.cost.bandwidth;
    assert_eq!(st.totals.inference_batches, 3);
    assert!((st.totals.inference_time - infer).abs() < 1e-12);
    assert_eq!(st.totals.traffic_bytes, bytes);
    assert!((st.totals.time - (infer + comm)).abs() < 1e-12);
    assert!(
        (st.totals.energy - (cfg.cost.power_compute * infer + cfg.cost.power_network * comm)).abs()
            < 1e-12
    );
}

#[test]
fn revisits_relabel_existing_pseudo_labels() {
    let sc = scripted_scenario(&[0.99, 0.98, 0.97, 0.96]);
    let engine = Engine::new(scripted_config(), &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 0.0 });
    engine.labeling_event(&mut st, &[0], Quota::Fraction(0.5), 0.0);
    assert!(st.shards[0]
        .pseudo
        .iter()
        .all(|p| p.label == 1 && p.issued_at_event == 1));

    st.model = Scripted { flip: 1.0 };
    let correct = engine.labeling_event(&mut st, &[0], Quota::Fraction(0.75), 0.0);
    let p = &st.shards[0].pseudo;
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|p| p.label == 0 && p.issued_at_event == 2));
    // Only the newly admitted label is scored.
    assert_eq!(correct, Some(0.0));
    // Gold is untouched.
    assert_eq!(st.shards[0].gold, vec![0]);
    assert_eq!(st.shards[1].gold, vec![1, 2]);
}

#[test]
fn capacity_filter_skips_the_whole_event() {
    let sc = scripted_scenario(&[0.99, 0.99]);
    let cfg = EngineConfig {
        capacity_filter: true,
        ..scripted_config()
    };
    let engine = Engine::new(cfg, &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 1.0 });
    // The flipped model scores 0 on validation.
    assert_eq!(engine.val_acc(&st.model), 0.0);
    assert_eq!(
        engine.labeling_event(&mut st, &[0], Quota::Fraction(1.0), 0.5),
        None
    );
    assert_eq!((st.events, st.skipped_events), (1, 1));
    assert!(st.shards[0].pseudo.is_empty());
    assert_eq!(st.totals.traffic_bytes, 0);
    // At parity the event goes ahead.
    engine.labeling_event(&mut st, &[0], Quota::Fraction(1.0), 0.0);
    assert_eq!(st.shards[0].pseudo.len(), 2);
}

#[test]
fn per_visit_quota_grows_with_visits() {
    let sc = scripted_scenario(&[0.99; 10]);
    let engine = Engine::new(scripted_config(), &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 0.0 });
    for visit in 1..=4 {
        engine.labeling_event(&mut st, &[0], Quota::PerVisit(3), 0.0);
        assert_eq!(st.shards[0].pseudo.len(), (3 * visit).min(10));
    }
}

#[test]
fn no_labels_anywhere_is_an_error() {
    let mut sc = scripted_scenario(&[0.99]);
    for s in &mut sc.shards {
        s.unlabeled.append(&mut s.gold);
        s.unlabeled.sort_unstable();
    }
    let engine = Engine::new(scripted_config(), &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 0.0 });
    assert!(matches!(
        engine.training_round(&mut st),
        Err(FesError::NoLabeledData)
    ));
}

#[test]
fn single_eligible_client_trains_alone() {
    let mut sc = scripted_scenario(&[0.99]);
    let s = &mut sc.shards[1];
    s.unlabeled.append(&mut s.gold);
    let engine = Engine::new(scripted_config(), &sc, 1, 0).unwrap();
    let mut st = engine.initial_state(Scripted { flip: 0.0 });
    engine.training_round(&mut st).unwrap();
    assert_eq!(st.last_participants, vec![0]);
}

// ---------------------------------------------------------------------------
// Real model
// ---------------------------------------------------------------------------

fn toy_scenario(seed: u64, clients: usize) -> Scenario {
    let task = SyntheticTaskSpec {
        num_classes: 3,
        dim: 4,
        per_class_count: 12,
        test_per_class: 20,
        ..Default::default()
    };
    let part = PartitionSpec {
        num_clients: clients,
        gold_total: 6,
        gold_client_cap: clients,
        ..Default::default()
    };
    build_scenario(&task, &part, 2, 0.1, &Rng::new(seed)).unwrap()
}

fn small_model(sc: &Scenario, seed: u64) -> MlpModel {
    let mc = ModelConfig {
        num_layers: 3,
        hidden: 8,
        ..Default::default()
    };
    init_model(sc, &mc, &Rng::new(seed)).unwrap()
}

/// Plain FedAvg written out directly: every client trains each round and
/// parameters are averaged by naive weighted sums.
#[test]
fn all_gold_without_pacing_is_plain_fedavg() {
    let seed = 11;
    let sc = toy_scenario(seed, 3).with_all_gold();
    let init = small_model(&sc, seed);
    let rounds = 4;
    let cfg = EngineConfig {
        max_rounds: rounds,
        pacing: PacingMode::Off,
        filter: Filter::Off,
        check_invariants: true,
        ..Default::default()
    };
    let out = Engine::new(cfg.clone(), &sc, 3, seed)
        .unwrap()
        .run(init.clone())
        .unwrap();

    let streams = Rng::new(seed).split("engine");
    let plan = LayerPlan::all_full(3);
    let shapes = init.layer_shapes();
    let params = trainable_parameter_count(&shapes, &plan) as u64;
    let mut global = init;
    let mut clock = 0.0;
    for r in 1..=rounds {
        let mut sum = vec![0.0; global.flat_params().len()];
        let mut weight = 0.0;
        let mut slowest: f64 = 0.0;
        for shard in &sc.shards {
            let data: Vec<Example<'_>> = shard
                .gold
                .iter()
                .map(|&id| Example {
                    x: sc.train.embedding(id),
                    label: sc.train.true_label(id).unwrap(),
                })
                .collect();
            let mut rng = streams.split(&format!("train/{r}/{}", shard.client_id));
            let (m, n) = global
                .local_train(&data, &plan, &cfg.trainer, &mut rng)
                .unwrap();
            for (s, p) in sum.iter_mut().zip(m.flat_params()) {
                *s += n as f64 * p;
            }
            weight += n as f64;
            let compute = data.len().div_ceil(4) as f64 * (3.0 * 0.01 + 3.0 * 0.02);
            let comm = (2 * 4 * params) as f64 / cfg.cost.bandwidth;
            slowest = slowest.max(compute + comm);
        }
        let avg: Vec<f64> = sum.iter().map(|s| s / weight).collect();
        global = global.with_flat_params(&avg).unwrap();
        clock += slowest;
        let row = &out.trace[r - 1];
        assert!(
            (row.sim_time - clock).abs() < 1e-9,
            "round {r}: {} vs {clock}",
            row.sim_time
        );
        assert_eq!(row.traffic_bytes, r as u64 * 3 * 2 * 4 * params);
    }
    let diff = global
        .flat_params()
        .iter()
        .zip(out.model.flat_params())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "max parameter difference {diff}");
}

#[test]
fn zero_rounds_returns_the_initial_model() {
    let sc = toy_scenario(1, 4);
    let init = small_model(&sc, 1);
    let cfg = EngineConfig {
        max_rounds: 0,
        ..Default::default()
    };
    let out = Engine::new(cfg, &sc, 3, 1)
        .unwrap()
        .run(init.clone())
        .unwrap();
    assert!(out.trace.is_empty());
    assert_eq!(out.model, init);
    assert_eq!(out.summary.totals, CostTotals::default());
}

fn controller_config(rounds: usize) -> EngineConfig {
    EngineConfig {
        max_rounds: rounds,
        pacing: PacingMode::Controller(ControllerConfig {
            candidates: vec![
                PacingConfig::new(1, 2, 2),
                PacingConfig::new(2, 4, 1),
                PacingConfig::new(5, 1, 2),
            ],
            top_t: 2,
            ..Default::default()
        }),
        check_invariants: true,
        ..Default::default()
    }
}

#[test]
fn same_seed_gives_identical_traces() {
    let sc = toy_scenario(5, 6);
    let init = small_model(&sc, 5);
    let run = || {
        let out = Engine::new(controller_config(15), &sc, 3, 5)
            .unwrap()
            .run(init.clone())
            .unwrap();
        trace_csv(&out.trace)
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.lines().count(), 16);
    assert!(a.starts_with(TRACE_HEADER));
}

#[test]
fn trace_counters_are_cumulative_and_match_totals() {
    let sc = toy_scenario(7, 6);
    let init = small_model(&sc, 7);
    let out = Engine::new(controller_config(20), &sc, 3, 7)
        .unwrap()
        .run(init)
        .unwrap();
    for w in out.trace.windows(2) {
        assert!(w[1].sim_time > w[0].sim_time);
        assert!(w[1].energy >= w[0].energy);
        assert!(w[1].traffic_bytes >= w[0].traffic_bytes);
        assert_eq!(w[1].round, w[0].round + 1);
    }
    let last = out.trace.last().unwrap();
    let t = &out.summary.totals;
    assert_eq!(last.sim_time, t.time);
    assert_eq!(last.energy, t.energy);
    assert_eq!(last.traffic_bytes, t.traffic_bytes);
    assert_eq!(last.total_pseudo, out.summary.total_pseudo);
}

#[test]
fn eligibility_never_shrinks_and_gold_is_stable() {
    let sc = toy_scenario(9, 6);
    let init = small_model(&sc, 9);
    let cfg = EngineConfig {
        pacing: PacingMode::Fixed(PacingConfig::new(1, 3, 10)),
        filter: Filter::Off,
        capacity_filter: false,
        confidence_threshold: 0.0,
        ..controller_config(0)
    };
    let engine = Engine::new(cfg, &sc, 3, 9).unwrap();
    let mut st = engine.initial_state(init);
    let mut eligible: Vec<bool> = st.shards.iter().map(ClientShard::is_eligible).collect();
    for event in 1..=10 {
        engine.training_round(&mut st).unwrap();
        let clients = engine.pick_label_clients(&st, 3);
        engine.labeling_event(&mut st, &clients, Quota::Fraction(event as f64 / 10.0), 0.0);
        for ((s, orig), was) in st.shards.iter().zip(&sc.shards).zip(&eligible) {
            assert_eq!(s.gold, orig.gold);
            assert!(!was || s.is_eligible());
            s.validate().unwrap();
        }
        eligible = st.shards.iter().map(ClientShard::is_eligible).collect();
    }
    assert!(
        eligible.iter().all(|&e| e),
        "threshold 0 and fraction 1 label everyone"
    );
}

#[test]
fn first_event_labels_are_mostly_correct_with_centroid_init() {
    let mut fracs = Vec::new();
    for seed in 0..3 {
        let rng = Rng::new(seed);
        let sc = build_scenario(
            &SyntheticTaskSpec::default(),
            &PartitionSpec::default(),
            4,
            0.1,
            &rng,
        )
        .unwrap();
        let init = init_model(&sc, &ModelConfig::default(), &rng).unwrap();
        let cfg = EngineConfig {
            max_rounds: 3,
            pacing: PacingMode::Fixed(PacingConfig::new(1, 8, 2)),
            check_invariants: true,
            ..Default::default()
        };
        let out = Engine::new(cfg, &sc, 6, seed).unwrap().run(init).unwrap();
        fracs.push(
            out.summary
                .first_event_correct_frac
                .expect("first event admits labels"),
        );
    }
    println!("first-event correctness {fracs:?}");
    fracs.sort_by(f64::total_cmp);
    assert!(fracs[1] >= 0.9);
}

#[test]
fn plan_depth_must_match_model() {
    let sc = toy_scenario(1, 4);
    let cfg = EngineConfig {
        plan: Some(LayerPlan::all_full(5)),
        ..Default::default()
    };
    assert!(matches!(
        Engine::new(cfg, &sc, 3, 1),
        Err(FesError::ShapeMismatch(_))
    ));
}
