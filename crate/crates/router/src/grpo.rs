//! Group-relative policy optimization over parametric categorical routing
//! policies. The policy is a softmax-linear head: logits are a weight
//! matrix (actions x features) times a feature vector. Rollouts are grouped
//! per context, the binary final reward is normalized within each group
//! into advantages, and the clipped surrogate objective with a KL penalty
//! to a reference policy is ascended with an analytic gradient.
//!
//! The same machinery trains both routing policies: the decomposer head
//! (choice among candidate decompositions, one action per rollout) and the
//! allocator head (model choice per subtask, one action per step).
//!
//! # Example
//!
//! ```
//! use model_router::grpo::{
//!     group_advantages, update_policy, GrpoConfig, PolicyParams, Rollout, TrajectoryGroup,
//! };
//! use model_router::pool::Cost;
//!
//! // group-relative advantages are normalized within the group
//! let adv = group_advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap();
//! assert!((adv[0] - 1.0).abs() < 1e-12);
//!
//! // one ascent step on a two-rollout group: the rewarded action gains mass
//! let uniform_logprob = (1.0f64 / 3.0).ln();
//! let rollout = |action: usize, reward: f64| Rollout {
//!     actions: vec![action],
//!     logprobs_old: vec![uniform_logprob],
//!     features: vec![vec![1.0, 0.5]],
//!     reward,
//!     cost: Cost::ZERO,
//! };
//! let group = TrajectoryGroup {
//!     context_id: "task-0".into(),
//!     rollouts: vec![rollout(2, 1.0), rollout(0, 0.0)],
//! };
//! let params = PolicyParams::zeros(3, 2);
//! let updated = update_policy(&params, &[group], &params, &GrpoConfig::default()).unwrap();
//! assert!(updated.probs(&[1.0, 0.5])[2] > 1.0 / 3.0);
//! ```

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::Cost;

/// Per-subtask routing context: difficulty quantile, bucket one-hot,
/// normalized chain position, normalized text length, bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub quantile: f64,
    pub bucket_one_hot: [f64; 3],
    pub position: f64,
    pub length: f64,
}

impl FeatureVector {
    pub const DIM: usize = 7;

    pub fn to_vec(self) -> Vec<f64> {
        vec![
            self.quantile,
            self.bucket_one_hot[0],
            self.bucket_one_hot[1],
            self.bucket_one_hot[2],
            self.position,
            self.length,
            1.0,
        ]
    }

    pub fn for_subtask(
        quantile: f64,
        bucket: crate::alloc::Bucket,
        index: usize,
        k: usize,
        text_len: usize,
    ) -> Self {
        FeatureVector {
            quantile,
            bucket_one_hot: bucket.one_hot(),
            position: if k <= 1 { 0.0 } else { index as f64 / (k - 1) as f64 },
            length: (text_len as f64 / 200.0).min(1.0),
        }
    }
}

/// Softmax-linear categorical policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    /// Row-major, `actions x features`.
    pub weights: Vec<f64>,
    pub actions: usize,
    pub features: usize,
}

impl PolicyParams {
    pub fn zeros(actions: usize, features: usize) -> Self {
        assert!(actions >= 1 && features >= 1);
        PolicyParams { weights: vec![0.0; actions * features], actions, features }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.features);
        (0..self.actions)
            .map(|a| {
                let row = &self.weights[a * self.features..(a + 1) * self.features];
                row.iter().zip(x).map(|(w, xi)| w * xi).sum()
            })
            .collect()
    }

    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let logits = self.logits(x);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn log_prob(&self, x: &[f64], action: usize) -> f64 {
        self.probs(x)[action].ln()
    }

    pub fn sample(&self, x: &[f64], rng: &mut impl Rng) -> (usize, f64) {
        let probs = self.probs(x);
        let mut u: f64 = rng.gen_range(0.0..1.0);
        for (a, p) in probs.iter().enumerate() {
            if u < *p {
                return (a, p.ln());
            }
            u -= p;
        }
        let last = self.actions - 1;
        (last, probs[last].ln())
    }

    pub fn argmax(&self, x: &[f64]) -> usize {
        let probs = self.probs(x);
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .expect("non-empty action space")
            .0
    }
}

/// Checkpoint format: header plus flat matrix dump.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    action_space: usize,
    feature_dim: usize,
    weights: Vec<f64>,
}

pub fn save_policy(params: &PolicyParams, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint {
        action_space: params.actions,
        feature_dim: params.features,
        weights: params.weights.clone(),
    };
    serde_json::to_writer(&mut *out, &ck)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_policy(input: &str) -> Result<PolicyParams> {
    let ck: Checkpoint = serde_json::from_str(input.trim())?;
    if ck.weights.len() != ck.action_space * ck.feature_dim {
        return Err(Error::MalformedResponse("checkpoint matrix shape mismatch".into()));
    }
    Ok(PolicyParams {
        weights: ck.weights,
        actions: ck.action_space,
        features: ck.feature_dim,
    })
}

/// One sampled trajectory: the actions taken, the behavior policy's log
/// probabilities at collection time, per-step features, and the binary
/// final reward broadcast to every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub actions: Vec<usize>,
    pub logprobs_old: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub reward: f64,
    pub cost: Cost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub context_id: String,
    pub rollouts: Vec<Rollout>,
}

#[derive(Debug, Clone)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    /// Ascent steps per data-collection pass.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    /// Defaults are not fixed by the method; standard clipped-surrogate settings.
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.05,
            iterations: 10,
            seed: 0,
        }
    }
}

/// Group-relative advantages: (r - mean)/std with population std; all zero
/// for a zero-variance group.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `min(ratio * adv, clip(ratio, 1-eps, 1+eps) * adv)`.
pub fn clipped_step_objective(ratio: f64, adv: f64, eps: f64) -> Result<f64> {
    if ratio <= 0.0 {
        return Err(Error::NonpositiveRatio(ratio));
    }
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
    Ok((ratio * adv).min(clipped * adv))
}

/// Forward KL divergence sum p ln(p/q), with 0 ln 0 = 0.
pub fn kl_penalty(policy_probs: &[f64], ref_probs: &[f64]) -> Result<f64> {
    if policy_probs.len() != ref_probs.len() {
        return Err(Error::SupportMismatch);
    }
    let mut kl = 0.0;
    for (&p, &q) in policy_probs.iter().zip(ref_probs) {
        if p > 0.0 {
            if q <= 0.0 {
                return Err(Error::SupportMismatch);
            }
            kl += p * (p / q).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Objective and analytic gradient of the grouped clipped-surrogate
/// objective with the KL penalty. Per group, per rollout, steps are
/// averaged (1/|o|); groups and rollouts are averaged uniformly. Gradient
/// is zero through clipped branches.
pub fn grpo_objective_and_gradient(
    batch: &[TrajectoryGroup],
    params: &PolicyParams,
    ref_policy: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut objective = 0.0;
    let mut grad = vec![0.0; params.weights.len()];
    let n_groups = batch.len() as f64;

    for group in batch {
        let rewards: Vec<f64> = group.rollouts.iter().map(|r| r.reward).collect();
        let advantages = group_advantages(&rewards)?;
        let g = group.rollouts.len() as f64;

        for (rollout, &adv) in group.rollouts.iter().zip(&advantages) {
            let steps = rollout.actions.len();
            if steps == 0 {
                continue;
            }
            let w = 1.0 / (n_groups * g * steps as f64);
            for k in 0..steps {
                let x = &rollout.features[k];
                let action = rollout.actions[k];
                let probs = params.probs(x);
                let logp = probs[action].ln();
                let ratio = (logp - rollout.logprobs_old[k]).exp();
                if ratio <= 0.0 {
                    return Err(Error::NonpositiveRatio(ratio));
                }
                let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                let surrogate = (ratio * adv).min(clipped * adv);

                let ref_probs = ref_policy.probs(x);
                let kl = kl_penalty(&probs, &ref_probs)?;
                objective += w * (surrogate - cfg.kl_beta * kl);

                // surrogate gradient flows only through the unclipped branch
                let unclipped_active = ratio * adv <= clipped * adv;
                for a in 0..params.actions {
                    for f in 0..params.features {
                        let idx = a * params.features + f;
                        let dlogp = (f64::from(u8::from(a == action)) - probs[a]) * x[f];
                        let mut dobj = 0.0;
                        if unclipped_active {
                            dobj += adv * ratio * dlogp;
                        }
                        if cfg.kl_beta != 0.0 {
                            // d/dw sum_b p_b ln(p_b/q_b)
                            //   = x_f * p_a * ((ln p_a - ln q_a) - KL)
                            let s = (probs[a] / ref_probs[a]).ln();
                            dobj -= cfg.kl_beta * x[f] * probs[a] * (s - kl);
                        }
                        grad[idx] += w * dobj;
                    }
                }
            }
        }
    }
    Ok((objective, grad))
}

/// One ascent step.
pub fn update_policy(
    params: &PolicyParams,
    batch: &[TrajectoryGroup],
    ref_policy: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<PolicyParams> {
    let (_, grad) = grpo_objective_and_gradient(batch, params, ref_policy, cfg)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonfiniteGradient);
    }
    let mut next = params.clone();
    for (w, g) in next.weights.iter_mut().zip(&grad) {
        *w += cfg.learning_rate * g;
    }
    Ok(next)
}

/// Cross-entropy fit of a categorical policy to labeled (features, action)
/// pairs. This is the parametric stand-in for supervised fine-tuning on the
/// searched allocation labels; full-batch gradient descent.
pub fn fit_supervised(
    params: &PolicyParams,
    examples: &[(Vec<f64>, usize)],
    epochs: usize,
    lr: f64,
) -> Result<PolicyParams> {
    if examples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut p = params.clone();
    let n = examples.len() as f64;
    for _ in 0..epochs {
        let mut grad = vec![0.0; p.weights.len()];
        for (x, label) in examples {
            let probs = p.probs(x);
            for a in 0..p.actions {
                let coeff = f64::from(u8::from(a == *label)) - probs[a];
                for f in 0..p.features {
                    grad[a * p.features + f] += coeff * x[f] / n;
                }
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonfiniteGradient);
        }
        for (w, g) in p.weights.iter_mut().zip(&grad) {
            *w += lr * g;
        }
    }
    Ok(p)
}

/// Environment the co-training loop rolls out against: tasks, candidate
/// decompositions, per-step features, and end-to-end execution with a
/// binary reward and a cost ledger. The nonce decorrelates repeated
/// rollouts of the same context.
pub trait RolloutEnv {
    fn context_ids(&self) -> Vec<String>;
    fn candidate_count(&self, context_id: &str) -> Result<usize>;
    fn task_features(&self, context_id: &str) -> Result<Vec<f64>>;
    fn subtask_features(&self, context_id: &str, candidate: usize) -> Result<Vec<Vec<f64>>>;
    fn execute(
        &self,
        context_id: &str,
        candidate: usize,
        assignments: &[usize],
        nonce: u64,
    ) -> Result<(f64, Cost)>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub module: String,
    pub mean_reward: f64,
    pub mean_cost_cents: f64,
    pub objective: f64,
    pub kl: f64,
}

fn mean_kl_to_ref(
    batch: &[TrajectoryGroup],
    params: &PolicyParams,
    ref_policy: &PolicyParams,
) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for group in batch {
        for rollout in &group.rollouts {
            for x in &rollout.features {
                total += kl_penalty(&params.probs(x), &ref_policy.probs(x)).unwrap_or(0.0);
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Alternating co-training: odd rounds update the decomposer head with the
/// allocator frozen, even rounds the reverse. The reference policy is the
/// trained module's round-start snapshot; behavior log-probs are taken at
/// collection time and reused across the round's ascent steps.
pub fn cotrain(
    decomp_policy: &PolicyParams,
    alloc_policy: &PolicyParams,
    env: &dyn RolloutEnv,
    cfg: &GrpoConfig,
    outer_rounds: usize,
) -> Result<(PolicyParams, PolicyParams, Vec<RoundStats>)> {
    assert!(outer_rounds >= 1);
    let mut decomp = decomp_policy.clone();
    let mut alloc = alloc_policy.clone();
    let mut history = Vec::new();

    for round in 1..=outer_rounds {
        let train_decomp = round % 2 == 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(round as u64));

        let ref_policy = if train_decomp { decomp.clone() } else { alloc.clone() };
        let mut batch: Vec<TrajectoryGroup> = Vec::new();
        let mut reward_sum = 0.0;
        let mut cost_sum = Cost::ZERO;
        let mut rollout_count = 0usize;

        for ctx in env.context_ids() {
            let m = env.candidate_count(&ctx)?;
            let task_x = env.task_features(&ctx)?;
            let mut rollouts = Vec::with_capacity(cfg.group_size);
            for r in 0..cfg.group_size {
                // the policy acts over its full action space; indices past
                // the candidate count wrap around at the env boundary
                let (cand_action, cand_logp) = decomp.sample(&task_x, &mut rng);
                let cand = cand_action % m.max(1);
                let step_xs = env.subtask_features(&ctx, cand)?;
                let mut assignments = Vec::with_capacity(step_xs.len());
                let mut alloc_logps = Vec::with_capacity(step_xs.len());
                for x in &step_xs {
                    let (a, lp) = alloc.sample(x, &mut rng);
                    assignments.push(a);
                    alloc_logps.push(lp);
                }
                let nonce = (round as u64) << 32 | r as u64;
                let (reward, cost) = env.execute(&ctx, cand, &assignments, nonce)?;
                reward_sum += reward;
                cost_sum += cost;
                rollout_count += 1;

                let rollout = if train_decomp {
                    Rollout {
                        actions: vec![cand_action],
                        logprobs_old: vec![cand_logp],
                        features: vec![task_x.clone()],
                        reward,
                        cost,
                    }
                } else {
                    Rollout {
                        actions: assignments,
                        logprobs_old: alloc_logps,
                        features: step_xs,
                        reward,
                        cost,
                    }
                };
                rollouts.push(rollout);
            }
            batch.push(TrajectoryGroup { context_id: ctx, rollouts });
        }

        let mut trained = if train_decomp { decomp.clone() } else { alloc.clone() };
        let mut objective = 0.0;
        for _ in 0..cfg.iterations {
            let (obj, _) = grpo_objective_and_gradient(&batch, &trained, &ref_policy, cfg)?;
            objective = obj;
            trained = update_policy(&trained, &batch, &ref_policy, cfg)?;
        }
        let kl = mean_kl_to_ref(&batch, &trained, &ref_policy);
        if train_decomp {
            decomp = trained;
        } else {
            alloc = trained;
        }

        history.push(RoundStats {
            round,
            module: if train_decomp { "decomp".into() } else { "alloc".into() },
            mean_reward: reward_sum / rollout_count as f64,
            mean_cost_cents: cost_sum.cents() / rollout_count as f64,
            objective,
            kl,
        });
    }
    Ok((decomp, alloc, history))
}

pub fn write_history(history: &[RoundStats], out: &mut dyn Write) -> Result<()> {
    for h in history {
        serde_json::to_writer(&mut *out, h)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
