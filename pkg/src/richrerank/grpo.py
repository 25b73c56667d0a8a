"""Group-relative advantages, the clipped multi-task GRPO surrogate, and a toy
Plackett-Luce ranking policy that makes the whole loop checkable on a laptop.

The toy policy scores each candidate with ``theta . x`` and emits a ranking by
repeatedly choosing among the remaining candidates with softmax probabilities.
Its log-likelihood and gradient are exact, so the surrogate's analytic gradient
can be checked against finite differences.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import CandidateSet, Ranking, as_ids, is_permutation
from .metrics import DEFAULT_RBO_P
from .rewards import RERANK_VALID, GammaWeights, TaskKind, rerank_task_reward

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12


class GrpoError(ValueError):
    pass


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_beta: float = 0.04
    learning_rate: float = 0.01
    iterations: int = 200
    seed: int = 0
    # Gradient steps taken on each batch of rollouts before the reference is refreshed.
    updates_per_iteration: int = 2

    def __post_init__(self) -> None:
        for name in ("clip_epsilon", "kl_beta", "learning_rate"):
            if not math.isfinite(getattr(self, name)):
                raise GrpoError(f"{name} must be finite")
        if self.group_size < 2:
            raise GrpoError("group_size must be >= 2")
        if self.clip_epsilon <= 0:
            raise GrpoError("clip_epsilon must be > 0")
        if self.kl_beta < 0:
            raise GrpoError("kl_beta must be >= 0")
        if self.learning_rate <= 0:
            raise GrpoError("learning_rate must be > 0")
        if self.iterations < 0:
            raise GrpoError("iterations must be >= 0")
        if self.updates_per_iteration < 1:
            raise GrpoError("updates_per_iteration must be >= 1")


@dataclass(frozen=True)
class ScoredSample:
    logprob: float
    ref_logprob: float
    reward: float


@dataclass(frozen=True)
class GrpoGroup:
    task: TaskKind
    responses: tuple[ScoredSample, ...]
    advantages: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "responses", tuple(self.responses))
        object.__setattr__(self, "advantages", tuple(self.advantages))
        if self.advantages and len(self.advantages) != len(self.responses):
            raise GrpoError("advantages length must equal responses length")

    def with_advantages(self) -> GrpoGroup:
        adv = compute_advantages([r.reward for r in self.responses])
        return GrpoGroup(self.task, self.responses, tuple(adv))


def compute_advantages(rewards: Sequence[float]) -> list[float]:
    """Standardize rewards within a group using the population std.

    Groups whose std falls below 1e-12 get all-zero advantages.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GrpoError("advantages need a group of at least 2 rewards")
    centered = r - r.mean()
    std = math.sqrt(float(np.mean(centered * centered)))
    if std < DEGENERATE_STD:
        return [0.0] * r.size
    return (centered / std).tolist()


def surrogate_terms(
    logp: np.ndarray,
    logp_old: np.ndarray,
    advantages: np.ndarray,
    clip_epsilon: float,
    kl_beta: float,
) -> tuple[float, np.ndarray]:
    """Loss of one group and its derivative with respect to each ``logp``.

    The KL penalty uses the per-sample estimator ``exp(d) - d - 1`` with
    ``d = logp_old - logp``.
    """
    n = logp.size
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantages
    surrogate = np.minimum(unclipped, clipped)
    delta = logp_old - logp
    kl = np.exp(delta) - delta - 1.0
    loss = -float(np.sum(surrogate - kl_beta * kl)) / n

    # min() takes the unclipped branch iff unclipped <= clipped; the clipped
    # branch only differs outside the trust region, where it is constant.
    d_surrogate = np.where(unclipped <= clipped, unclipped, 0.0)
    d_kl = 1.0 - np.exp(delta)
    grad = -(d_surrogate - kl_beta * d_kl) / n
    return loss, grad


def grpo_surrogate_loss(groups: Sequence[GrpoGroup], config: GrpoConfig) -> float:
    total = 0.0
    for group in groups:
        if not group.advantages:
            raise GrpoError("group has no advantages; call compute_advantages first")
        logp = np.array([s.logprob for s in group.responses], dtype=np.float64)
        logp_old = np.array([s.ref_logprob for s in group.responses], dtype=np.float64)
        if not (np.all(np.isfinite(logp)) and np.all(np.isfinite(logp_old))):
            raise GrpoError("non-finite log-probability in group")
        loss, _ = surrogate_terms(
            logp, logp_old, np.asarray(group.advantages), config.clip_epsilon, config.kl_beta
        )
        total += loss
    return total


# -- toy Plackett-Luce policy ------------------------------------------------

FEATURE_NAMES = (
    "relevance_grade",
    "quality_grade",
    "click_through_rate",
    "completion_rate",
    "recency",
)


def candidate_features(cset: CandidateSet) -> np.ndarray:
    """Five features per candidate; recency is min-max scaled over the set."""
    times = np.array([c.side.publish_time for c in cset.candidates], dtype=np.float64)
    span = times.max() - times.min() if times.size else 0.0
    recency = (times - times.min()) / span if span > 0 else np.zeros_like(times)
    rows = []
    for c, rec in zip(cset.candidates, recency):
        rows.append(
            [
                float(c.relevance_grade.value) if c.relevance_grade else 0.0,
                float(c.quality_grade.value) if c.quality_grade else 0.0,
                c.side.click_through_rate,
                c.side.completion_rate,
                rec,
            ]
        )
    return np.array(rows, dtype=np.float64).reshape(len(cset), len(FEATURE_NAMES))


FeatureFn = Callable[[CandidateSet], np.ndarray]


@dataclass(eq=False)
class ToyRankPolicy:
    theta: np.ndarray
    feature_fn: FeatureFn = candidate_features

    def __post_init__(self) -> None:
        self.theta = np.asarray(self.theta, dtype=np.float64).copy()
        if not np.all(np.isfinite(self.theta)):
            raise GrpoError("theta must be finite")

    @classmethod
    def zeros(cls, dim: int = len(FEATURE_NAMES), feature_fn: FeatureFn = candidate_features):
        return cls(np.zeros(dim), feature_fn)

    def scores(self, cset: CandidateSet) -> np.ndarray:
        return self.feature_fn(cset) @ self.theta


def _order_indices(cset: CandidateSet, ranking: Ranking | Sequence[str]) -> np.ndarray:
    if not is_permutation(ranking, cset):
        raise GrpoError("ranking is not a complete permutation of the candidate set")
    index = {cid: i for i, cid in enumerate(cset.ids)}
    return np.array([index[cid] for cid in as_ids(ranking)], dtype=np.int64)


def pl_logprob_and_grad(
    features: np.ndarray, theta: np.ndarray, order: np.ndarray
) -> tuple[float, np.ndarray]:
    """Plackett-Luce log-likelihood of ``order`` and its gradient in ``theta``."""
    x = features[order]
    s = x @ theta
    logp = 0.0
    grad = np.zeros_like(theta)
    for t in range(len(order) - 1):
        tail = s[t:]
        m = tail.max()
        w = np.exp(tail - m)
        z = w.sum()
        logp += s[t] - (m + math.log(z))
        grad += x[t] - (w / z) @ x[t:]
    return logp, grad


def policy_logprob(policy: ToyRankPolicy, cset: CandidateSet, ranking: Ranking | Sequence[str]) -> float:
    order = _order_indices(cset, ranking)
    logp, _ = pl_logprob_and_grad(policy.feature_fn(cset), policy.theta, order)
    return logp


def _sample_orders(scores: np.ndarray, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    # Gumbel-max: sorting perturbed scores is an exact Plackett-Luce draw.
    keys = scores[None, :] + rng.gumbel(size=(n_samples, scores.size))
    return np.argsort(-keys, axis=1, kind="stable")


def sample_rankings(
    policy: ToyRankPolicy, cset: CandidateSet, n_samples: int, seed: int
) -> list[Ranking]:
    if len(cset) == 0:
        raise GrpoError("cannot sample rankings of an empty candidate set")
    if n_samples < 1:
        raise GrpoError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    ids = cset.ids
    orders = _sample_orders(policy.scores(cset), n_samples, rng)
    return [Ranking(tuple(ids[i] for i in row)) for row in orders]


# -- training ----------------------------------------------------------------


@dataclass
class Rollout:
    """N sampled rankings for one candidate set, frozen at the reference policy."""

    features: np.ndarray
    orders: list[np.ndarray]
    ref_logprobs: np.ndarray
    task_rewards: np.ndarray
    advantages: np.ndarray

    @property
    def rewards(self) -> np.ndarray:
        return self.task_rewards + RERANK_VALID

    def group(self, theta: np.ndarray) -> GrpoGroup:
        samples = tuple(
            ScoredSample(pl_logprob_and_grad(self.features, theta, o)[0], float(ref), float(r))
            for o, ref, r in zip(self.orders, self.ref_logprobs, self.rewards)
        )
        return GrpoGroup(TaskKind.RERANK, samples, tuple(self.advantages.tolist()))


def toy_surrogate_loss_and_grad(
    theta: np.ndarray, rollouts: Sequence[Rollout], config: GrpoConfig
) -> tuple[float, np.ndarray]:
    """Surrogate loss summed over rollout groups, with its exact gradient in theta."""
    total = 0.0
    grad = np.zeros_like(theta, dtype=np.float64)
    for rollout in rollouts:
        pairs = [pl_logprob_and_grad(rollout.features, theta, o) for o in rollout.orders]
        logp = np.array([p[0] for p in pairs])
        dlogp = np.array([p[1] for p in pairs])
        loss, dloss = surrogate_terms(
            logp, rollout.ref_logprobs, rollout.advantages, config.clip_epsilon, config.kl_beta
        )
        total += loss
        grad += dloss @ dlogp
    return total, grad


def _rollout(
    policy: ToyRankPolicy,
    cset: CandidateSet,
    label: Ranking,
    n: int,
    seed: int,
    gammas: GammaWeights,
    rbo_p: float,
) -> Rollout:
    features = policy.feature_fn(cset)
    rng = np.random.default_rng(seed)
    orders = list(_sample_orders(features @ policy.theta, n, rng))
    ids = cset.ids
    task = np.array(
        [rerank_task_reward([ids[i] for i in o], label, gammas, rbo_p) for o in orders]
    )
    ref = np.array([pl_logprob_and_grad(features, policy.theta, o)[0] for o in orders])
    adv = np.array(compute_advantages((task + RERANK_VALID).tolist()))
    return Rollout(features, orders, ref, task, adv)


TRAIN_STREAM = 0
EVAL_STREAM = 1


def _seed_for(base: int, stream: int, iteration: int, index: int) -> int:
    return int(np.random.SeedSequence([base, stream, iteration, index]).generate_state(1)[0])


def collect_rollouts(
    policy: ToyRankPolicy,
    dataset: Sequence[tuple[CandidateSet, Ranking]],
    group_size: int,
    seed: int,
    iteration: int,
    gammas: GammaWeights = GammaWeights(),
    rbo_p: float = DEFAULT_RBO_P,
    workers: int = 1,
    stream: int = TRAIN_STREAM,
) -> list[Rollout]:
    def one(item):
        idx, (cset, label) = item
        return _rollout(
            policy, cset, label, group_size, _seed_for(seed, stream, iteration, idx), gammas, rbo_p
        )

    items = list(enumerate(dataset))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, items))
    return [one(item) for item in items]


@dataclass
class IterationStats:
    iteration: int
    mean_reward: float
    mean_task_reward: float
    loss: float | None = None

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "mean_reward": self.mean_reward,
            "mean_task_reward": self.mean_task_reward,
            "loss": self.loss,
        }


@dataclass
class TrainResult:
    policy: ToyRankPolicy
    trace: list[IterationStats] = field(default_factory=list)


def estimate_mean_reward(
    policy: ToyRankPolicy,
    dataset: Sequence[tuple[CandidateSet, Ranking]],
    samples: int,
    seed: int,
    gammas: GammaWeights = GammaWeights(),
    rbo_p: float = DEFAULT_RBO_P,
) -> float:
    """Monte-Carlo estimate of the mean re-rank task reward under ``policy``."""
    rollouts = collect_rollouts(
        policy, dataset, samples, seed, 0, gammas, rbo_p, stream=EVAL_STREAM
    )
    return float(np.mean([r.task_rewards.mean() for r in rollouts]))


def train_toy_policy(
    dataset: Sequence[tuple[CandidateSet, Ranking]],
    config: GrpoConfig = GrpoConfig(),
    gammas: GammaWeights = GammaWeights(),
    rbo_p: float = DEFAULT_RBO_P,
    policy: ToyRankPolicy | None = None,
    workers: int = 1,
) -> TrainResult:
    """Run GRPO on the toy policy.

    Each iteration snapshots the reference policy, samples a group of
    rankings per candidate set, standardizes their rewards, then takes
    ``updates_per_iteration`` plain gradient steps on the surrogate. The trace
    has ``iterations + 1`` entries: one per iteration (reward of the rollouts
    drawn at its start) plus a final entry for the trained policy.
    """
    for cset, label in dataset:
        if not is_permutation(label, cset):
            raise GrpoError("every label must be a complete permutation of its set")
    policy = policy or ToyRankPolicy.zeros()
    theta = policy.theta.copy()
    trace: list[IterationStats] = []

    def snapshot() -> ToyRankPolicy:
        return ToyRankPolicy(theta, policy.feature_fn)

    for it in range(config.iterations + 1):
        rollouts = collect_rollouts(
            snapshot(), dataset, config.group_size, config.seed, it, gammas, rbo_p, workers
        )
        stats = IterationStats(
            iteration=it,
            mean_reward=float(np.mean([r.rewards.mean() for r in rollouts])),
            mean_task_reward=float(np.mean([r.task_rewards.mean() for r in rollouts])),
        )
        trace.append(stats)
        if it == config.iterations:
            break
        for _ in range(config.updates_per_iteration):
            loss, grad = toy_surrogate_loss_and_grad(theta, rollouts, config)
            theta = theta - config.learning_rate * grad
        stats.loss = loss
        logger.debug("iteration %d: mean task reward %.4f", it, stats.mean_task_reward)

    return TrainResult(snapshot(), trace)
