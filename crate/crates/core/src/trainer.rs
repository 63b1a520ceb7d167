//! Co-training loop: rollouts, hint pipeline on all-incorrect groups, reasoner
//! and hinter updates, held-out evaluation and run artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::domain::{Question, RolloutGroup, Trajectory};
use crate::env::{success_prob, TaskFamilyConfig};
use crate::error::{HillError, Result};
use crate::grpo::{is_all_incorrect, reasoner_grad};
use crate::hintloop::{
    audit_records, generate_candidates, hinter_grad, score_candidate, select_and_replace, transfer_weight,
    HintAuditRecord, HinterContext,
};
use crate::policy::{init, write_checkpoint, FeatureLayout, GradientVector, SoftmaxPolicy};
use crate::rng::{purpose, stream};

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub step: usize,
    pub reasoner: SoftmaxPolicy,
    pub hinter: SoftmaxPolicy,
    /// Number of hint pipelines run so far; stays zero in GRPO mode.
    pub hinter_invocations: u64,
}

impl TrainerState {
    pub fn initial(cfg: &TrainConfig) -> TrainerState {
        let task = cfg.task();
        let v = task.vocab;
        let reasoner = init::reasoner(
            FeatureLayout::reasoner(v, cfg.reasoner_buckets, task.max_response_len()),
            task.max_response_len(),
            &cfg.reasoner_prior(),
        );
        let hinter = init::hinter(
            FeatureLayout::hinter(v, cfg.hinter_buckets, task.max_hint_len, task.d_max),
            task.max_hint_len + 1,
            &cfg.hinter_prior(),
        );
        TrainerState {
            step: 0,
            reasoner,
            hinter,
            hinter_invocations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub all_incorrect_ratio_before: f64,
    pub all_incorrect_ratio_after: f64,
    pub n_replaced: usize,
    pub batch_success_rate: f64,
    /// Mean `rho_hat_c` over the hints that were installed.
    pub mean_rho_hat: Option<f64>,
    /// Reduction of the all-incorrect ratio by hinting.
    pub mean_signal_creation: f64,
    /// Mean `exp(-rho_hat_c)` over installed hints.
    pub mean_signal_transfer: Option<f64>,
    /// Mean `exp(-max(rho_hat_c, 0) / T)` over installed hints.
    pub mean_transfer_weight: Option<f64>,
    /// Mean reward over every scored candidate of the step.
    pub hinter_mean_reward: Option<f64>,
    pub invalid_hint_rate: Option<f64>,
    pub hinter_invocations: u64,
    /// Exact no-hint success on the held-out set, on evaluation steps.
    pub reasoner_eval_success: Option<f64>,
    pub eval_success_by_difficulty: Option<Vec<f64>>,
}

pub struct StepOutput {
    pub metrics: StepMetrics,
    pub audit: Vec<HintAuditRecord>,
    /// The groups the reasoner was updated on, in batch order.
    pub final_groups: Vec<RolloutGroup>,
}

/// Fixed evaluation questions: `per_difficulty` per tier, ids from zero.
pub fn held_out_set(task: &TaskFamilyConfig, per_difficulty: usize, eval_seed: u64) -> Vec<Question> {
    let mut rng = stream(eval_seed, &[purpose::HELD_OUT]);
    let mut out = Vec::new();
    for d in task.d_min..=task.d_max {
        for _ in 0..per_difficulty {
            let id = out.len() as u64;
            out.push(task.generate_question(id, d, &mut rng));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    /// Indexed by `difficulty - d_min`.
    pub by_difficulty: Vec<f64>,
}

/// No-hint exact success probabilities; hints never enter evaluation.
pub fn evaluate(reasoner: &SoftmaxPolicy, task: &TaskFamilyConfig, held_out: &[Question]) -> EvalResult {
    let probs: Vec<f64> = held_out
        .par_iter()
        .map(|q| success_prob(reasoner, q, &q.prompt))
        .collect();
    let tiers = task.d_max - task.d_min + 1;
    let mut sum = vec![0.0; tiers];
    let mut count = vec![0usize; tiers];
    for (q, p) in held_out.iter().zip(&probs) {
        sum[q.difficulty - task.d_min] += p;
        count[q.difficulty - task.d_min] += 1;
    }
    EvalResult {
        mean: probs.iter().sum::<f64>() / probs.len().max(1) as f64,
        by_difficulty: sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect(),
    }
}

pub fn sample_batch(cfg: &TrainConfig, step: usize) -> Vec<Question> {
    let task = cfg.task();
    let weights = WeightedIndex::new(&cfg.difficulty_weights).expect("validated weights");
    let mut rng = stream(cfg.seed, &[purpose::BATCH, step as u64]);
    (0..cfg.batch_size)
        .map(|i| {
            let d = task.d_min + weights.sample(&mut rng);
            task.generate_question((step * cfg.batch_size + i) as u64, d, &mut rng)
        })
        .collect()
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

struct HintOutcome {
    group: RolloutGroup,
    selected: Option<usize>,
    selected_rho: Option<f64>,
    rewards: Vec<f64>,
    n_invalid: usize,
    grad: GradientVector,
    audit: Vec<HintAuditRecord>,
}

fn hint_pipeline(
    state: &TrainerState,
    cfg: &TrainConfig,
    task: &TaskFamilyConfig,
    question: &Question,
    original: RolloutGroup,
    index: usize,
) -> Result<HintOutcome> {
    let step = state.step as u64;
    let i = index as u64;
    let adv = cfg.advantage();
    let scoring = cfg.scoring();
    let ctx = HinterContext::from_failed_group(
        question,
        &original,
        &mut stream(cfg.seed, &[purpose::FAILED_PICK, step, i]),
    );
    let samples = generate_candidates(
        &state.hinter,
        &ctx,
        cfg.m,
        &mut stream(cfg.seed, &[purpose::HINTS, step, i]),
    );
    let candidates = samples
        .into_iter()
        .enumerate()
        .map(|(j, s)| {
            let mut rng = stream(cfg.seed, &[purpose::HINTED_ROLLOUT, step, i, j as u64]);
            score_candidate(&state.reasoner, task, question, s, &scoring, &adv, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let grad = hinter_grad(&state.hinter, &ctx, &candidates, &adv);
    let (group, selected) = select_and_replace(&candidates, original);
    Ok(HintOutcome {
        selected_rho: selected.and_then(|j| candidates[j].rho_hat_c),
        rewards: candidates.iter().map(|c| c.reward).collect(),
        n_invalid: candidates.iter().filter(|c| !c.validity.is_valid()).count(),
        audit: audit_records(state.step, question, &candidates, selected),
        group,
        selected,
        grad,
    })
}

/// One co-training step on `batch`. The state's step counter advances by one.
pub fn train_step(state: &mut TrainerState, batch: &[Question], cfg: &TrainConfig) -> Result<StepOutput> {
    let task = cfg.task();
    let adv = cfg.advantage();
    let step = state.step as u64;
    let n = batch.len();

    let groups: Vec<RolloutGroup> = batch
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = stream(cfg.seed, &[purpose::ROLLOUT, step, i as u64]);
            let enc = state.reasoner.encode(&q.prompt);
            let trajs: Vec<Trajectory> = (0..cfg.g)
                .map(|_| Trajectory::scored(&task.vocab, q, state.reasoner.sample_encoded(&enc, &mut rng)))
                .collect();
            RolloutGroup::new(q.prompt.clone(), None, trajs, &adv)
        })
        .collect();
    let batch_success_rate = groups.iter().map(|g| g.success_rate).sum::<f64>() / n as f64;
    let failed: Vec<usize> = (0..n).filter(|&i| is_all_incorrect(&groups[i])).collect();
    let ratio_before = failed.len() as f64 / n as f64;

    let mut final_groups = groups;
    let mut outcomes = Vec::new();
    if cfg.mode.uses_hinter() && !failed.is_empty() {
        let st: &TrainerState = state;
        let fg = &final_groups;
        outcomes = failed
            .par_iter()
            .map(|&i| hint_pipeline(st, cfg, &task, &batch[i], fg[i].clone(), i))
            .collect::<Result<Vec<_>>>()?;
        state.hinter_invocations += failed.len() as u64;
        for (&i, o) in failed.iter().zip(&outcomes) {
            final_groups[i] = o.group.clone();
        }
    }
    let n_failed_after = final_groups.iter().filter(|g| is_all_incorrect(g)).count();
    let ratio_after = n_failed_after as f64 / n as f64;

    let reasoner = &state.reasoner;
    let grads = final_groups
        .par_iter()
        .map(|g| reasoner_grad(reasoner, &g.input, g, &adv, None))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = GradientVector::zeros(reasoner.n_params());
    for g in &grads {
        grad.add_scaled(g, 1.0 / n as f64);
    }
    let new_reasoner = if grad.is_zero() {
        state.reasoner.clone()
    } else {
        state.reasoner.sgd_step(&grad, cfg.lr_reasoner)?
    };

    let mut new_hinter = None;
    if !outcomes.is_empty() {
        let mut hg = GradientVector::zeros(state.hinter.n_params());
        for o in &outcomes {
            hg.add_scaled(&o.grad, 1.0 / outcomes.len() as f64);
        }
        if !hg.is_zero() {
            new_hinter = Some(state.hinter.sgd_step(&hg, cfg.lr_hinter)?);
        }
    }

    let rhos: Vec<f64> = outcomes.iter().filter_map(|o| o.selected_rho).collect();
    let rewards: Vec<f64> = outcomes.iter().flat_map(|o| o.rewards.iter().copied()).collect();
    let n_invalid: usize = outcomes.iter().map(|o| o.n_invalid).sum();
    let metrics = StepMetrics {
        step: state.step,
        all_incorrect_ratio_before: ratio_before,
        all_incorrect_ratio_after: ratio_after,
        n_replaced: outcomes.iter().filter(|o| o.selected.is_some()).count(),
        batch_success_rate,
        mean_rho_hat: mean(&rhos),
        mean_signal_creation: ratio_before - ratio_after,
        mean_signal_transfer: mean(&rhos.iter().map(|r| (-r).exp()).collect::<Vec<_>>()),
        mean_transfer_weight: mean(&rhos.iter().map(|&r| transfer_weight(r, cfg.temperature)).collect::<Vec<_>>()),
        hinter_mean_reward: mean(&rewards),
        invalid_hint_rate: (!rewards.is_empty()).then(|| n_invalid as f64 / rewards.len() as f64),
        hinter_invocations: state.hinter_invocations,
        reasoner_eval_success: None,
        eval_success_by_difficulty: None,
    };
    let audit = outcomes.into_iter().flat_map(|o| o.audit).collect();

    state.reasoner = new_reasoner;
    if let Some(h) = new_hinter {
        state.hinter = h;
    }
    state.step += 1;
    Ok(StepOutput {
        metrics,
        audit,
        final_groups,
    })
}

/// Paths of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    /// Only written by modes that run the hinter.
    pub audit: PathBuf,
}

impl RunArtifacts {
    pub fn in_dir(run_dir: &Path) -> RunArtifacts {
        RunArtifacts {
            run_dir: run_dir.to_path_buf(),
            manifest: run_dir.join("manifest.toml"),
            metrics: run_dir.join("metrics.jsonl"),
            checkpoints: run_dir.join("checkpoints"),
            audit: run_dir.join("audit.jsonl"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub history: Vec<StepMetrics>,
    pub initial_eval: EvalResult,
    pub final_state: TrainerState,
    pub best_step: Option<usize>,
    pub best_eval: f64,
}

struct Sink {
    art: RunArtifacts,
    metrics: BufWriter<File>,
    audit: Option<BufWriter<File>>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| HillError::io(path, e))?))
}

fn save_policy(path: &Path, policy: &SoftmaxPolicy) -> Result<()> {
    let mut w = create(path)?;
    write_checkpoint(policy, &mut w)?;
    w.flush().map_err(|e| HillError::io(path, e))
}

impl Sink {
    fn open(run_dir: &Path, cfg: &TrainConfig) -> Result<Sink> {
        let art = RunArtifacts::in_dir(run_dir);
        fs::create_dir_all(&art.checkpoints).map_err(|e| HillError::io(&art.checkpoints, e))?;
        fs::write(&art.manifest, manifest_text(cfg)).map_err(|e| HillError::io(&art.manifest, e))?;
        let metrics = create(&art.metrics)?;
        let audit = if cfg.mode.uses_hinter() {
            Some(create(&art.audit)?)
        } else {
            None
        };
        Ok(Sink { art, metrics, audit })
    }

    fn checkpoint(&self, tag: &str, state: &TrainerState) -> Result<()> {
        save_policy(&self.art.checkpoints.join(format!("reasoner-{tag}.ckpt")), &state.reasoner)?;
        save_policy(&self.art.checkpoints.join(format!("hinter-{tag}.ckpt")), &state.hinter)
    }

    fn record(&mut self, out: &StepOutput) -> Result<()> {
        let path = self.art.metrics.clone();
        serde_json::to_writer(&mut self.metrics, &out.metrics)?;
        self.metrics.write_all(b"\n").map_err(|e| HillError::io(&path, e))?;
        if let Some(w) = self.audit.as_mut() {
            for rec in &out.audit {
                serde_json::to_writer(&mut *w, rec)?;
                w.write_all(b"\n").map_err(|e| HillError::io(&self.art.audit, e))?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| HillError::io(&self.art.metrics, e))?;
        if let Some(mut w) = self.audit.take() {
            w.flush().map_err(|e| HillError::io(&self.art.audit, e))?;
        }
        Ok(())
    }
}

pub fn manifest_text(cfg: &TrainConfig) -> String {
    format!(
        "# resolved run configuration\nformat = \"hill-run-v1\"\ncrate_version = \"{}\"\n\n[config]\n{}",
        env!("CARGO_PKG_VERSION"),
        cfg.to_toml()
    )
}

/// Runs `cfg.steps` steps. With `run_dir` set, writes the manifest, metrics,
/// checkpoints (initial, every evaluation step, best and final) and, for
/// hinter modes, the hint audit log.
pub fn run_training(cfg: &TrainConfig, run_dir: Option<&Path>) -> Result<RunResult> {
    cfg.validate()?;
    let task = cfg.task();
    let held_out = held_out_set(&task, cfg.held_out_per_difficulty, cfg.eval_seed);
    let mut state = TrainerState::initial(cfg);
    let mut sink = run_dir.map(|d| Sink::open(d, cfg)).transpose()?;
    if let Some(s) = &sink {
        s.checkpoint("step-000000", &state)?;
        s.checkpoint("best", &state)?;
    }
    let initial_eval = evaluate(&state.reasoner, &task, &held_out);
    let mut best_step = None;
    let mut best_eval = initial_eval.mean;
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = sample_batch(cfg, step);
        let mut out = train_step(&mut state, &batch, cfg)?;
        let is_eval = (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps;
        if is_eval {
            let ev = evaluate(&state.reasoner, &task, &held_out);
            out.metrics.reasoner_eval_success = Some(ev.mean);
            out.metrics.eval_success_by_difficulty = Some(ev.by_difficulty.clone());
            let improved = ev.mean > best_eval;
            if improved {
                best_eval = ev.mean;
                best_step = Some(step);
            }
            if let Some(s) = &sink {
                s.checkpoint(&format!("step-{:06}", step + 1), &state)?;
                if improved {
                    s.checkpoint("best", &state)?;
                }
            }
        }
        if let Some(s) = sink.as_mut() {
            s.record(&out)?;
        }
        history.push(out.metrics);
    }
    if let Some(s) = sink.take() {
        s.checkpoint("final", &state)?;
        s.finish()?;
    }
    Ok(RunResult {
        history,
        initial_eval,
        final_state: state,
        best_step,
        best_eval,
    })
}

/// Summary quantities of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Mean post-replacement all-incorrect ratio over the last tenth of the run.
    pub final_all_incorrect_ratio: f64,
    /// Mean of the per-step `mean_rho_hat` over steps that installed a hint.
    pub mean_reliance: Option<f64>,
    pub mean_signal_creation: f64,
    pub mean_signal_transfer: Option<f64>,
    /// Last evaluation, all tiers.
    pub final_eval: Option<f64>,
    /// Last evaluation, hardest tier.
    pub final_eval_hardest: Option<f64>,
}

pub fn summarize(history: &[StepMetrics]) -> RunSummary {
    let n = history.len();
    let tail = &history[n - (n / 10).max(1).min(n)..];
    let collect = |f: &dyn Fn(&StepMetrics) -> Option<f64>| history.iter().filter_map(f).collect::<Vec<_>>();
    let last_eval = history.iter().rev().find(|m| m.reasoner_eval_success.is_some());
    RunSummary {
        final_all_incorrect_ratio: mean(&tail.iter().map(|m| m.all_incorrect_ratio_after).collect::<Vec<_>>())
            .unwrap_or(f64::NAN),
        mean_reliance: mean(&collect(&|m| m.mean_rho_hat)),
        mean_signal_creation: mean(&collect(&|m| Some(m.mean_signal_creation))).unwrap_or(f64::NAN),
        mean_signal_transfer: mean(&collect(&|m| m.mean_signal_transfer)),
        final_eval: last_eval.and_then(|m| m.reasoner_eval_success),
        final_eval_hardest: last_eval
            .and_then(|m| m.eval_success_by_difficulty.as_ref())
            .and_then(|v| v.last().copied()),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| HillError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(HillError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    fn small(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            steps: 6,
            batch_size: 8,
            eval_every: 3,
            held_out_per_difficulty: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn held_out_set_is_fixed_and_spans_tiers() {
        let cfg = TrainConfig::default();
        let a = held_out_set(&cfg.task(), 50, cfg.eval_seed);
        let b = held_out_set(&cfg.task(), 50, cfg.eval_seed);
        assert_eq!(a, b);
        assert_eq!(a.len(), 200);
        for d in 1..=4 {
            assert_eq!(a.iter().filter(|q| q.difficulty == d).count(), 50);
        }
    }

    #[test]
    fn grpo_never_invokes_the_hinter() {
        let res = run_training(&small(Mode::Grpo), None).unwrap();
        assert_eq!(res.final_state.hinter_invocations, 0);
        assert!(res.history.iter().all(|m| m.hinter_mean_reward.is_none()));
        assert!(res.history.iter().all(|m| m.all_incorrect_ratio_after == m.all_incorrect_ratio_before));
    }

    #[test]
    fn replacement_only_lowers_the_ratio() {
        let res = run_training(&small(Mode::Hill), None).unwrap();
        for m in &res.history {
            assert!(m.all_incorrect_ratio_after <= m.all_incorrect_ratio_before);
            if m.n_replaced > 0 {
                assert!(m.all_incorrect_ratio_after < m.all_incorrect_ratio_before);
            }
            assert!((0.0..=1.0).contains(&m.all_incorrect_ratio_after));
        }
        let steps: Vec<usize> = res.history.iter().map(|m| m.step).collect();
        assert_eq!(steps, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn installed_groups_keep_on_policy_pairing() {
        let cfg = small(Mode::Hill);
        let mut state = TrainerState::initial(&cfg);
        for step in 0..3 {
            let batch = sample_batch(&cfg, step);
            let before = state.reasoner.clone();
            let out = train_step(&mut state, &batch, &cfg).unwrap();
            for (q, g) in batch.iter().zip(&out.final_groups) {
                assert_eq!(g.size(), cfg.g);
                assert!(g.input.starts_with(&q.prompt));
                match &g.hint {
                    Some(h) => assert_eq!(&g.input[q.prompt.len()..], h.as_slice()),
                    None => assert_eq!(g.input, q.prompt),
                }
                assert!(reasoner_grad(&before, &g.input, g, &cfg.advantage(), None).is_ok());
            }
        }
    }

    #[test]
    fn empty_failure_set_makes_hill_match_grpo() {
        // an all-but-certain reasoner leaves no all-incorrect groups
        let mut cfg = small(Mode::Hill);
        cfg.prior_chain_logits = vec![40.0];
        cfg.prior_wrap_logits = vec![40.0];
        cfg.prior_eos_logit = 40.0;
        let hill = run_training(&cfg, None).unwrap();
        cfg.mode = Mode::Grpo;
        let grpo = run_training(&cfg, None).unwrap();
        assert!(hill.history.iter().all(|m| m.all_incorrect_ratio_before == 0.0));
        let a: Vec<String> = hill.history.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        let b: Vec<String> = grpo.history.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_steps_keeps_initial_policies() {
        let cfg = TrainConfig {
            steps: 0,
            ..small(Mode::Hill)
        };
        let res = run_training(&cfg, None).unwrap();
        assert!(res.history.is_empty());
        let init = TrainerState::initial(&cfg);
        assert_eq!(res.final_state.reasoner.params(), init.reasoner.params());
        assert_eq!(res.final_state.hinter.params(), init.hinter.params());
    }

    #[test]
    fn summary_uses_the_last_tenth() {
        let mut hist = Vec::new();
        for s in 0..20 {
            hist.push(StepMetrics {
                step: s,
                all_incorrect_ratio_before: 0.5,
                all_incorrect_ratio_after: if s >= 18 { 0.1 } else { 0.4 },
                n_replaced: 0,
                batch_success_rate: 0.5,
                mean_rho_hat: (s % 2 == 0).then_some(s as f64),
                mean_signal_creation: 0.1,
                mean_signal_transfer: None,
                mean_transfer_weight: None,
                hinter_mean_reward: None,
                invalid_hint_rate: None,
                hinter_invocations: 0,
                reasoner_eval_success: (s == 9).then_some(0.7),
                eval_success_by_difficulty: (s == 9).then(|| vec![0.9, 0.5]),
            });
        }
        let sm = summarize(&hist);
        assert!((sm.final_all_incorrect_ratio - 0.1).abs() < 1e-15);
        assert_eq!(sm.mean_reliance, Some(9.0));
        assert_eq!(sm.final_eval, Some(0.7));
        assert_eq!(sm.final_eval_hardest, Some(0.5));
    }
}
