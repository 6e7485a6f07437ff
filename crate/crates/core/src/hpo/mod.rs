//! Hyperparameter optimization against a pre-recorded tabular benchmark.
//!
//! Every method only ever looks up `(config, fidelity)` pairs that the
//! benchmark recorded, so traces replay exactly. Objectives are minimized.
//! Fidelity is counted in training epochs; one "trial" of budget equals
//! one full-fidelity evaluation (`R` epochs), and traces expose both the
//! epoch and trial accounting.

pub mod forest;
pub mod ranking;

pub use forest::{ForestConfig, RandomForest};
pub use ranking::{rank_and_cd, CdReport, RankError};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::trainer::TrainConfig;

/// Lookup table of recorded optimization runs: a validation-objective
/// curve and a final test objective per configuration. `ids` are sorted
/// ascending and index all other fields; ties in every method break
/// toward the lower config id, i.e. the lower index.
#[derive(Debug, Clone)]
pub struct TabularBenchmark {
    pub name: String,
    pub ids: Vec<u64>,
    /// Feature vector per config (one-hot categoricals, log-scaled
    /// positives), used by the model-based optimizer.
    pub descriptors: Vec<Vec<f64>>,
    /// Validation objective after each epoch; shorter than `max_fidelity`
    /// for censored (failed) runs.
    pub curves: Vec<Vec<f64>>,
    /// Final test objective per config.
    pub finals: Vec<f64>,
    /// Full fidelity R in epochs.
    pub max_fidelity: usize,
}

impl TabularBenchmark {
    pub fn n_configs(&self) -> usize {
        self.ids.len()
    }

    /// Validation objective after `fidelity` epochs (1-based). `None`
    /// marks a censored curve queried past its last recorded epoch.
    pub fn value_at(&self, config: usize, fidelity: usize) -> Option<f64> {
        assert!(fidelity >= 1 && fidelity <= self.max_fidelity, "fidelity {fidelity} out of range");
        self.curves[config].get(fidelity - 1).copied()
    }

    /// Like [`value_at`](Self::value_at) but mapping censored lookups to
    /// infinity so they can never win a comparison.
    pub fn observed(&self, config: usize, fidelity: usize) -> f64 {
        self.value_at(config, fidelity).unwrap_or(f64::INFINITY)
    }
}

/// Feature encoding of one grid config: shape and strategy one-hot,
/// positive numerics log-scaled (weight decay shifted by 1e-3 before the
/// log). The seed is replication noise and is not encoded.
pub fn encode_config(cfg: &TrainConfig) -> Vec<f64> {
    let mut v = Vec::with_capacity(13);
    let shape_idx = crate::model::Shape::ALL.iter().position(|s| *s == cfg.shape).unwrap();
    for i in 0..6 {
        v.push(if i == shape_idx { 1.0 } else { 0.0 });
    }
    let strat_idx = match cfg.strategy {
        crate::trainer::ValidationStrategy::Oos => 0,
        crate::trainer::ValidationStrategy::ReOos => 1,
        crate::trainer::ValidationStrategy::InSample => 2,
    };
    for i in 0..3 {
        v.push(if i == strat_idx { 1.0 } else { 0.0 });
    }
    v.push((cfg.context as f64).ln());
    v.push((cfg.dist_hidden as f64).ln());
    v.push(cfg.learning_rate.ln());
    v.push((cfg.weight_decay + 1e-3).ln());
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub trial: usize,
    pub config_id: u64,
    pub fidelity: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncumbentPoint {
    pub after_trial: usize,
    pub epochs_consumed: usize,
    pub config_id: u64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub configs: usize,
    pub fidelity: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketStats {
    pub s: usize,
    pub rounds: Vec<RoundStats>,
    pub epochs_consumed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HpoTrace {
    pub method: String,
    pub steps: Vec<TraceStep>,
    /// Strictly improving incumbent history.
    pub incumbents: Vec<IncumbentPoint>,
    pub epochs_consumed: usize,
    /// Number of evaluations performed.
    pub trials_consumed: usize,
    /// Epoch budget expressed in full-fidelity evaluations.
    pub full_fidelity_equivalents: f64,
    pub brackets: Vec<BracketStats>,
    pub incumbent_config: Option<u64>,
    pub incumbent_objective: f64,
    /// Test objective of the incumbent config.
    pub final_test_objective: f64,
    pub notes: Vec<String>,
}

/// Mutable trace under construction.
struct TraceBuilder<'b> {
    bench: &'b TabularBenchmark,
    trace: HpoTrace,
    incumbent: Option<(usize, f64)>,
}

impl<'b> TraceBuilder<'b> {
    fn new(bench: &'b TabularBenchmark, method: &str) -> TraceBuilder<'b> {
        TraceBuilder {
            bench,
            trace: HpoTrace {
                method: method.to_string(),
                steps: Vec::new(),
                incumbents: Vec::new(),
                epochs_consumed: 0,
                trials_consumed: 0,
                full_fidelity_equivalents: 0.0,
                brackets: Vec::new(),
                incumbent_config: None,
                incumbent_objective: f64::INFINITY,
                final_test_objective: f64::INFINITY,
                notes: Vec::new(),
            },
            incumbent: None,
        }
    }

    fn observe(&mut self, config: usize, fidelity: usize) -> f64 {
        let objective = self.bench.observed(config, fidelity);
        self.trace.trials_consumed += 1;
        self.trace.epochs_consumed += fidelity;
        self.trace.steps.push(TraceStep {
            trial: self.trace.trials_consumed,
            config_id: self.bench.ids[config],
            fidelity,
            objective,
        });
        if self.incumbent.is_none_or(|(_, best)| objective < best) {
            self.incumbent = Some((config, objective));
            self.trace.incumbents.push(IncumbentPoint {
                after_trial: self.trace.trials_consumed,
                epochs_consumed: self.trace.epochs_consumed,
                config_id: self.bench.ids[config],
                objective,
            });
        }
        objective
    }

    fn finish(mut self) -> HpoTrace {
        if let Some((config, objective)) = self.incumbent {
            self.trace.incumbent_config = Some(self.bench.ids[config]);
            self.trace.incumbent_objective = objective;
            self.trace.final_test_objective = self.bench.finals[config];
        }
        self.trace.full_fidelity_equivalents =
            self.trace.epochs_consumed as f64 / self.bench.max_fidelity as f64;
        self.trace
    }
}

/// Draw `count` distinct config indices, uniform without replacement.
fn sample_without_replacement(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    rand::seq::index::sample(rng, n, count.min(n)).into_vec()
}

/// Uniform search: `trials` configs without replacement, each at full
/// fidelity.
pub fn random_search(bench: &TabularBenchmark, trials: usize, rng: &mut impl Rng) -> HpoTrace {
    assert!(trials >= 1);
    let mut builder = TraceBuilder::new(bench, "random");
    let capped = trials.min(bench.n_configs());
    if capped < trials {
        builder.trace.notes.push(format!(
            "requested {trials} trials but only {} configs exist; capped",
            bench.n_configs()
        ));
    }
    for config in sample_without_replacement(bench.n_configs(), capped, rng) {
        builder.observe(config, bench.max_fidelity);
    }
    builder.finish()
}

/// One successive-halving pass: round `i` evaluates `floor(n / eta^i)`
/// configs at fidelity `floor(r * eta^i)` (clamped to `[1, R]`), keeping
/// the best for the next round; ties break toward the lower config id.
/// Stops once a single config remains or the fidelity cap is reached.
pub fn successive_halving(
    bench: &TabularBenchmark,
    n: usize,
    r: f64,
    eta: f64,
    rng: &mut impl Rng,
) -> HpoTrace {
    let mut builder = TraceBuilder::new(bench, "sh");
    run_halving_pass(bench, &mut builder, n, r, eta, rng);
    builder.finish()
}

fn fidelity_at(r: f64, eta: f64, i: usize, max: usize) -> usize {
    let raw = (r * eta.powi(i as i32)).floor() as usize;
    raw.clamp(1, max)
}

/// Shared by standalone SH and each HyperBand bracket. Returns per-round
/// stats and the epochs consumed.
fn run_halving_pass(
    bench: &TabularBenchmark,
    builder: &mut TraceBuilder,
    n: usize,
    r: f64,
    eta: f64,
    rng: &mut impl Rng,
) -> BracketStats {
    assert!(n >= 1 && eta > 1.0 && r >= 0.0);
    let n = n.min(bench.n_configs());
    let epochs_before = builder.trace.epochs_consumed;
    let mut rounds = Vec::new();
    let mut active = sample_without_replacement(bench.n_configs(), n, rng);
    active.sort_unstable();

    if n == 1 {
        // Nothing to halve: one full-fidelity evaluation.
        builder.observe(active[0], bench.max_fidelity);
        rounds.push(RoundStats { configs: 1, fidelity: bench.max_fidelity });
        return BracketStats {
            s: 0,
            rounds,
            epochs_consumed: builder.trace.epochs_consumed - epochs_before,
        };
    }

    let mut scored: Vec<(f64, usize)> = Vec::new();
    let mut i = 0usize;
    loop {
        let n_i = ((n as f64) / eta.powi(i as i32)).floor() as usize;
        if n_i == 0 {
            break;
        }
        if i > 0 {
            // Keep the best n_i from the previous round's scores.
            scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            active = scored.iter().take(n_i).map(|&(_, c)| c).collect();
            active.sort_unstable();
        }
        let fidelity = fidelity_at(r.max(1.0), eta, i, bench.max_fidelity);
        scored = active.iter().map(|&c| (builder.observe(c, fidelity), c)).collect();
        rounds.push(RoundStats { configs: active.len(), fidelity });
        if n_i == 1 || fidelity >= bench.max_fidelity {
            break;
        }
        i += 1;
    }
    BracketStats { s: 0, rounds, epochs_consumed: builder.trace.epochs_consumed - epochs_before }
}

/// Largest `s` with `eta^s <= R` (tolerating float fuzz).
fn hyperband_s_max(max_fidelity: usize, eta: f64) -> usize {
    let mut s = 0usize;
    while eta.powi(s as i32 + 1) <= max_fidelity as f64 * (1.0 + 1e-12) {
        s += 1;
    }
    s
}

fn bracket_n(s_max: usize, s: usize, eta: f64) -> usize {
    let raw = (s_max as f64 + 1.0) * eta.powi(s as i32) / (s as f64 + 1.0);
    ((raw - 1e-9).ceil() as usize).max(1)
}

/// One full HyperBand pass: brackets `s = s_max .. 0`, each a
/// successive-halving run starting from `n = ceil((s_max+1) eta^s /
/// (s+1))` configs at fidelity `R / eta^s`.
pub fn hyperband(bench: &TabularBenchmark, eta: f64, rng: &mut impl Rng) -> HpoTrace {
    let mut builder = TraceBuilder::new(bench, "hyperband");
    let max_fidelity = bench.max_fidelity;
    let s_max = hyperband_s_max(max_fidelity, eta);
    for s in (0..=s_max).rev() {
        let n = bracket_n(s_max, s, eta);
        let r = max_fidelity as f64 / eta.powi(s as i32);
        let mut stats = run_halving_pass(bench, &mut builder, n, r, eta, rng);
        stats.s = s;
        builder.trace.brackets.push(stats);
    }
    builder.finish()
}

/// Configuration of the random-forest Bayesian optimizer.
#[derive(Debug, Clone)]
pub struct RfBoConfig {
    pub forest: ForestConfig,
    /// Random full-fidelity evaluations before the surrogate starts.
    pub init: usize,
    /// Unevaluated configs scored per iteration.
    pub candidate_pool: usize,
}

impl Default for RfBoConfig {
    fn default() -> Self {
        RfBoConfig { forest: ForestConfig::default(), init: 10, candidate_pool: 512 }
    }
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement below `best` for a prediction `(mean, std)`.
fn expected_improvement(best: f64, mean: f64, std: f64) -> f64 {
    let gap = best - mean;
    if std <= 1e-12 {
        return gap.max(0.0);
    }
    let z = gap / std;
    gap * normal_cdf(z) + std * normal_pdf(z)
}

/// Random-forest surrogate Bayesian optimization: after `init` random
/// full-fidelity evaluations, repeatedly fit the forest to everything
/// observed, score a pool of unevaluated configs by expected improvement,
/// and evaluate the argmax. Falls back to a random candidate when the
/// surrogate has no signal.
pub fn rf_surrogate_bo(
    bench: &TabularBenchmark,
    trials: usize,
    cfg: &RfBoConfig,
    rng: &mut impl Rng,
) -> HpoTrace {
    assert!(trials > 0 && cfg.init >= 2 && trials >= cfg.init, "need trials >= init >= 2");
    let mut builder = TraceBuilder::new(bench, "rfbo");
    let trials = trials.min(bench.n_configs());
    let mut evaluated: Vec<usize> = Vec::with_capacity(trials);
    let mut is_evaluated = vec![false; bench.n_configs()];

    for config in sample_without_replacement(bench.n_configs(), cfg.init.min(trials), rng) {
        builder.observe(config, bench.max_fidelity);
        evaluated.push(config);
        is_evaluated[config] = true;
    }

    while evaluated.len() < trials {
        let xs: Vec<Vec<f64>> = evaluated.iter().map(|&c| bench.descriptors[c].clone()).collect();
        let ys: Vec<f64> = evaluated
            .iter()
            .map(|&c| builder.bench.observed(c, bench.max_fidelity))
            .collect();
        let forest = RandomForest::fit(&xs, &ys, &cfg.forest, rng);
        let best = ys.iter().cloned().fold(f64::INFINITY, f64::min);

        let unevaluated: Vec<usize> = (0..bench.n_configs()).filter(|&c| !is_evaluated[c]).collect();
        let pool: Vec<usize> = if unevaluated.len() <= cfg.candidate_pool {
            unevaluated
        } else {
            let picks = sample_without_replacement(unevaluated.len(), cfg.candidate_pool, rng);
            let mut pool: Vec<usize> = picks.into_iter().map(|i| unevaluated[i]).collect();
            pool.sort_unstable();
            pool
        };
        let mut chosen = None;
        let mut best_ei = 0.0;
        for &c in &pool {
            let (mean, std) = forest.predict_stats(&bench.descriptors[c]);
            let ei = expected_improvement(best, mean, std);
            if ei > best_ei {
                best_ei = ei;
                chosen = Some(c);
            }
        }
        // Degenerate surrogate (e.g. all observations identical): random pick.
        let config = chosen.unwrap_or_else(|| pool[rng.random_range(0..pool.len())]);
        builder.observe(config, bench.max_fidelity);
        evaluated.push(config);
        is_evaluated[config] = true;
    }
    builder.finish()
}

/// The strategies exposed by the comparison harness and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StrategyKind {
    Random,
    SuccessiveHalving,
    HyperBand,
    RfBo,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Random,
        StrategyKind::SuccessiveHalving,
        StrategyKind::HyperBand,
        StrategyKind::RfBo,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Random => "random",
            StrategyKind::SuccessiveHalving => "sh",
            StrategyKind::HyperBand => "hyperband",
            StrategyKind::RfBo => "rfbo",
        }
    }

    pub fn parse(s: &str) -> Option<StrategyKind> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Some(StrategyKind::Random),
            "sh" | "successive-halving" => Some(StrategyKind::SuccessiveHalving),
            "hyperband" | "hb" => Some(StrategyKind::HyperBand),
            "rfbo" | "rf-bo" | "smac" => Some(StrategyKind::RfBo),
            _ => None,
        }
    }
}

/// Run a strategy under a common budget of `trials` full-fidelity
/// equivalents (`trials * R` epochs). Single-fidelity methods evaluate
/// `trials` configs; the multi-fidelity schedules repeat passes while the
/// next pass (or bracket) still fits the remaining epoch budget.
pub fn run_strategy(
    bench: &TabularBenchmark,
    kind: StrategyKind,
    trials: usize,
    seed: u64,
    eta: f64,
    rfbo: &RfBoConfig,
) -> HpoTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epoch_budget = trials * bench.max_fidelity;
    match kind {
        StrategyKind::Random => random_search(bench, trials, &mut rng),
        StrategyKind::RfBo => rf_surrogate_bo(bench, trials, rfbo, &mut rng),
        StrategyKind::SuccessiveHalving => {
            let s_max = hyperband_s_max(bench.max_fidelity, eta);
            let n = (eta.powi(s_max as i32) as usize).max(1);
            let r = bench.max_fidelity as f64 / eta.powi(s_max as i32);
            let mut builder = TraceBuilder::new(bench, "sh");
            loop {
                let pass = run_halving_pass(bench, &mut builder, n, r, eta, &mut rng);
                let cost = pass.epochs_consumed;
                builder.trace.brackets.push(pass);
                if cost == 0 || builder.trace.epochs_consumed + cost > epoch_budget {
                    break;
                }
            }
            builder.finish()
        }
        StrategyKind::HyperBand => {
            let s_max = hyperband_s_max(bench.max_fidelity, eta);
            let mut builder = TraceBuilder::new(bench, "hyperband");
            let mut s_cycle = (0..=s_max).rev().cycle();
            loop {
                let s = s_cycle.next().unwrap();
                let n = bracket_n(s_max, s, eta);
                let r = bench.max_fidelity as f64 / eta.powi(s as i32);
                // Analytic bracket cost decides whether it still fits.
                let mut cost = 0usize;
                let mut i = 0usize;
                loop {
                    let n_i = ((n as f64) / eta.powi(i as i32)).floor() as usize;
                    if n_i == 0 {
                        break;
                    }
                    let fid = fidelity_at(r.max(1.0), eta, i, bench.max_fidelity);
                    cost += n_i * fid;
                    if n_i == 1 || fid >= bench.max_fidelity {
                        break;
                    }
                    i += 1;
                }
                if builder.trace.epochs_consumed + cost > epoch_budget {
                    break;
                }
                let mut stats = run_halving_pass(bench, &mut builder, n, r, eta, &mut rng);
                stats.s = s;
                builder.trace.brackets.push(stats);
            }
            builder.finish()
        }
    }
}
