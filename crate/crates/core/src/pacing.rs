//! Curriculum pacing: how often, on how many clients, and how much pseudo
//! labeling happens.
//!
//! A [`PacingConfig`] `<f, n, k>` labels every `f` training rounds on `n`
//! clients, growing the admitted fraction of each client's candidate pool by
//! `k` percent per event. The [`PacingController`] ranks configurations by
//! augment efficiency,
//!
//! ```text
//! AUG-E = eta * Δacc / (l_i * n / f + theta * l_t * k)
//! ```
//!
//! probes every candidate at startup, and re-probes its short list when the
//! windowed AUG-E of the active configuration falls below the alarm
//! threshold.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{FesError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PacingConfig {
    /// Training rounds between labeling events.
    pub f: usize,
    /// Clients visited per labeling event.
    pub n: usize,
    /// Percent of the candidate pool added per event.
    pub k: u32,
}

impl PacingConfig {
    pub const fn new(f: usize, n: usize, k: u32) -> Self {
        Self { f, n, k }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || self.n == 0 {
            return Err(FesError::InvalidConfig(format!(
                "pacing config {self}: f and n must be >= 1"
            )));
        }
        Ok(())
    }

    /// Fraction of the candidate pool admitted after `events` labeling events.
    pub fn cumulative_fraction(&self, events: usize) -> f64 {
        (events as f64 * f64::from(self.k) / 100.0).min(1.0)
    }
}

impl fmt::Display for PacingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{},{}>", self.f, self.n, self.k)
    }
}

/// Cross product f ∈ {1,2,5,10} × n ∈ {1,2,4,8} × k ∈ {1,2}.
pub fn default_candidates() -> Vec<PacingConfig> {
    let mut out = Vec::with_capacity(32);
    for f in [1, 2, 5, 10] {
        for n in [1, 2, 4, 8] {
            for k in [1, 2] {
                out.push(PacingConfig::new(f, n, k));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugEParams {
    pub eta: f64,
    pub theta: f64,
    /// Inference latency per batch.
    pub l_i: f64,
    /// Training latency per batch.
    pub l_t: f64,
}

impl AugEParams {
    pub fn validate(&self) -> Result<()> {
        if [self.eta, self.theta, self.l_i, self.l_t]
            .iter()
            .all(|v| *v > 0.0)
        {
            Ok(())
        } else {
            Err(FesError::InvalidConfig(
                "AUG-E parameters must all be positive".into(),
            ))
        }
    }

    /// `l_i * n / f`.
    pub fn inference_cost(&self, cfg: &PacingConfig) -> f64 {
        self.l_i * cfg.n as f64 / cfg.f as f64
    }

    /// `l_t * k`.
    pub fn training_cost(&self, cfg: &PacingConfig) -> f64 {
        self.l_t * f64::from(cfg.k)
    }
}

pub fn aug_e(delta_acc: f64, cfg: &PacingConfig, p: &AugEParams) -> f64 {
    let denom = p.inference_cost(cfg) + p.theta * p.training_cost(cfg);
    debug_assert!(denom > 0.0);
    p.eta * delta_acc / denom
}

/// Something that can run every candidate for `rounds` training rounds from
/// one shared snapshot and report the accuracy change of each.
pub trait Prober {
    fn probe(&mut self, candidates: &[PacingConfig], rounds: usize) -> Vec<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: PacingConfig,
    pub top: Vec<PacingConfig>,
    /// Every candidate with its probe Δacc and AUG-E, best first.
    pub ranking: Vec<(PacingConfig, f64, f64)>,
    pub warning: Option<String>,
}

/// Probe all candidates and rank them by AUG-E (ties keep candidate order).
pub fn startup_search(
    candidates: &[PacingConfig],
    trial_window: usize,
    top_t: usize,
    params: &AugEParams,
    prober: &mut dyn Prober,
) -> Result<SearchOutcome> {
    if candidates.is_empty() {
        return Err(FesError::InvalidConfig(
            "pacing search needs at least one candidate".into(),
        ));
    }
    let deltas = prober.probe(candidates, trial_window);
    let mut ranking: Vec<(PacingConfig, f64, f64)> = candidates
        .iter()
        .zip(deltas)
        .map(|(c, d)| (*c, d, aug_e(d, c, params)))
        .collect();
    ranking.sort_by(|a, b| b.2.total_cmp(&a.2));
    let best = ranking[0].0;
    let warning = (ranking[0].2 <= 0.0).then(|| {
        format!(
            "every pacing candidate had non-positive AUG-E; using least negative {best} ({:.4})",
            ranking[0].2
        )
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let top = ranking.iter().take(top_t.max(1)).map(|r| r.0).collect();
    Ok(SearchOutcome {
        best,
        top,
        ranking,
        warning,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Continue,
    TriggerLabeling,
    SwitchConfig(PacingConfig),
}

/// Exponential moving average over `points` evaluations (`2 / (points + 1)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    weight: f64,
    value: Option<f64>,
}

impl Ema {
    pub fn new(points: usize) -> Self {
        Self {
            weight: 2.0 / (points as f64 + 1.0),
            value: None,
        }
    }

    pub fn update(&mut self, x: f64) -> f64 {
        let v = match self.value {
            None => x,
            Some(prev) => prev + self.weight * (x - prev),
        };
        self.value = Some(v);
        v
    }

    pub fn value(&self) -> Option<f64> {
        self.value
    }
}

/// Windowed AUG-E of one configuration over smoothed accuracy.
#[derive(Debug, Clone)]
pub struct AugETracker {
    window: usize,
    ema_points: usize,
    ema: Ema,
    last_raw: f64,
    /// Smoothed accuracy since activation; index = rounds since activation.
    history: VecDeque<f64>,
}

impl AugETracker {
    pub fn new(window: usize, ema_points: usize, initial_acc: f64) -> Self {
        let mut ema = Ema::new(ema_points);
        let v = ema.update(initial_acc);
        Self {
            window: window.max(1),
            ema_points,
            ema,
            last_raw: initial_acc,
            history: VecDeque::from([v]),
        }
    }

    /// Start a new window, restarting the smoothing at the latest raw
    /// accuracy so a drop that caused the reset is not counted twice.
    pub fn reset(&mut self) {
        self.ema = Ema::new(self.ema_points);
        let v = self.ema.update(self.last_raw);
        self.history.clear();
        self.history.push_back(v);
    }

    /// Feed one round's accuracy; returns the windowed AUG-E once a full
    /// window has elapsed since activation.
    pub fn push(&mut self, acc: f64, cfg: &PacingConfig, params: &AugEParams) -> Option<f64> {
        self.last_raw = acc;
        let v = self.ema.update(acc);
        self.history.push_back(v);
        if self.history.len() > self.window + 1 {
            self.history.pop_front();
        }
        (self.history.len() == self.window + 1).then(|| aug_e(v - self.history[0], cfg, params))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub candidates: Vec<PacingConfig>,
    pub top_t: usize,
    pub trial_window: usize,
    pub alarm_threshold: f64,
    pub ema_points: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            candidates: default_candidates(),
            top_t: 8,
            trial_window: 5,
            alarm_threshold: 0.0,
            ema_points: 3,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(FesError::InvalidConfig(
                "pacing.candidates must not be empty".into(),
            ));
        }
        for c in &self.candidates {
            c.validate()?;
        }
        if self.trial_window == 0 || self.top_t == 0 || self.ema_points == 0 {
            return Err(FesError::InvalidConfig(
                "pacing trial_window, top_t and ema_points must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Online pacing state machine.
#[derive(Debug, Clone)]
pub struct PacingController {
    pub cfg: ControllerConfig,
    pub params: AugEParams,
    pub active: PacingConfig,
    pub top: Vec<PacingConfig>,
    pub switches: usize,
    pub last_aug_e: Option<f64>,
    rounds_since_activation: usize,
    tracker: AugETracker,
    probing: bool,
}

impl PacingController {
    /// Run the startup search and activate its winner.
    pub fn start(
        cfg: ControllerConfig,
        params: AugEParams,
        initial_acc: f64,
        prober: &mut dyn Prober,
    ) -> Result<(Self, SearchOutcome)> {
        cfg.validate()?;
        params.validate()?;
        let outcome = startup_search(
            &cfg.candidates,
            cfg.trial_window,
            cfg.top_t,
            &params,
            prober,
        )?;
        let ctl = Self::with_active(cfg, params, outcome.best, outcome.top.clone(), initial_acc);
        Ok((ctl, outcome))
    }

    pub fn with_active(
        cfg: ControllerConfig,
        params: AugEParams,
        active: PacingConfig,
        top: Vec<PacingConfig>,
        initial_acc: f64,
    ) -> Self {
        let tracker = AugETracker::new(cfg.trial_window, cfg.ema_points, initial_acc);
        Self {
            cfg,
            params,
            active,
            top,
            switches: 0,
            last_aug_e: None,
            rounds_since_activation: 0,
            tracker,
            probing: false,
        }
    }

    pub fn is_probing(&self) -> bool {
        self.probing
    }

    /// Mark a probe in flight; [`PacingController::step`] ignores rounds
    /// reported meanwhile.
    pub fn begin_probe(&mut self) {
        self.probing = true;
    }

    pub fn end_probe(&mut self) {
        self.probing = false;
    }

    /// Consume one finished training round with validation accuracy `acc`.
    pub fn step(&mut self, acc: f64, prober: &mut dyn Prober) -> Decision {
        if self.probing {
            return Decision::Continue;
        }
        self.rounds_since_activation += 1;
        self.last_aug_e = self.tracker.push(acc, &self.active, &self.params);
        if let Some(a) = self.last_aug_e {
            if a < self.cfg.alarm_threshold {
                self.begin_probe();
                let deltas = prober.probe(&self.top, self.cfg.trial_window);
                self.end_probe();
                let winner = self
                    .top
                    .iter()
                    .zip(deltas)
                    .map(|(c, d)| (*c, aug_e(d, c, &self.params)))
                    .fold(None::<(PacingConfig, f64)>, |best, cur| match best {
                        Some(b) if b.1 >= cur.1 => Some(b),
                        _ => Some(cur),
                    })
                    .map(|(c, _)| c)
                    .unwrap_or(self.active);
                log::info!(
                    "pacing alarm (AUG-E {a:.4} < {}): switching {} -> {winner}",
                    self.cfg.alarm_threshold,
                    self.active
                );
                self.active = winner;
                self.switches += 1;
                self.rounds_since_activation = 0;
                self.tracker.reset();
                return Decision::SwitchConfig(winner);
            }
        }
        if self.rounds_since_activation.is_multiple_of(self.active.f) {
            Decision::TriggerLabeling
        } else {
            Decision::Continue
        }
    }
}

/// Fixed schedule: label every `every` rounds.
#[derive(Debug, Clone)]
pub struct StaticSchedule {
    every: usize,
    rounds: usize,
}

impl StaticSchedule {
    pub fn new(every: usize) -> Self {
        Self {
            every: every.max(1),
            rounds: 0,
        }
    }

    pub fn tick(&mut self) -> Decision {
        self.rounds += 1;
        if self.rounds.is_multiple_of(self.every) {
            Decision::TriggerLabeling
        } else {
            Decision::Continue
        }
    }
}
