"""Three-phase loss generation.

Phase I alternates between the controller and the recommender: sample
expressions until one passes the gradient-fingerprint proxy test, train
a copy of the model for one epoch under it, reward the controller with
the validation-metric increment, and promote the copy only when the
increment clears the reward filter. Phase II keeps expressions whose
gradient pushes predictions toward the label on synthesized pairs.
Phase III trains a fresh model per surviving candidate over the
smoothing-coefficient grid and picks the best validation score.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import controller as ctl, expr as ex, metrics, recmodels as rm, tensorcore as tc

__all__ = [
    "SearchConfig",
    "CandidateRecord",
    "ProxyResult",
    "FingerprintStore",
    "SearchResult",
    "gradient_fingerprint",
    "proxy_test",
    "search_phase",
    "validation_check",
    "TrainResult",
    "train_to_convergence",
    "EffectivenessResult",
    "effectiveness_test",
]

EPSILON_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


@dataclass
class SearchConfig:
    delta: float = 1e-4            # proxy-test threshold
    eta: float = 0.01              # reward-filter tolerance (may be +inf)
    probe_size: int = 5            # |B|, 5 for small datasets, 20 for large
    m: int = 10                    # expression rounds
    reward_metric: str = "auc"     # "auc" or "rmse"
    default_negative_reward: float = -0.05
    stall_budget: int = 500        # iterations without a promotion
    max_iterations: int = 10000
    max_samples: int | None = None
    update_every: int = 10         # controller update cadence (in rewards)
    proxy_enabled: bool = True
    entropy_weight: float = 1e-4
    controller_lr: float = 1e-3
    baseline_decay: float = 0.95
    xi: float = 1e-6
    model_lr: float = 0.01
    l2: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 1000
    epsilon_grid: tuple = EPSILON_GRID

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0 (or inf), got {self.eta}")
        if not 5 <= self.probe_size <= 20:
            raise ValueError(f"probe batch size must be in [5, 20], got {self.probe_size}")
        if self.reward_metric not in ("auc", "rmse"):
            raise ValueError(f"reward metric must be auc or rmse, got {self.reward_metric!r}")

    @property
    def safe_math(self) -> ex.SafeMathConfig:
        return ex.SafeMathConfig(xi=self.xi, epsilon=self.xi)


@dataclass
class CandidateRecord:
    expr_text: str
    reward: float
    iteration: int
    positive_rate: float | None = None
    best_epsilon: float | None = None
    val_metric: float | None = None
    test_metric: float | None = None


@dataclass(frozen=True)
class ProxyResult:
    kind: str  # "zero_grad" | "duplicate" | "pass"
    duplicate_of: str | None = None

    @property
    def passed(self) -> bool:
        return self.kind == "pass"


class FingerprintStore:
    """Gradient fingerprints of losses sampled against one model snapshot."""

    def __init__(self):
        self._order: list[str] = []
        self._grads: dict[str, np.ndarray] = {}
        self._rewards: dict[str, float | None] = {}

    def __len__(self):
        return len(self._order)

    def find_duplicate(self, g: np.ndarray, delta: float) -> str | None:
        for text in self._order:
            if np.linalg.norm(g - self._grads[text]) < delta:
                return text
        return None

    def insert(self, text: str, g: np.ndarray) -> None:
        if text not in self._grads:
            self._order.append(text)
        self._grads[text] = g
        self._rewards[text] = None

    def fingerprint(self, text: str) -> np.ndarray:
        return self._grads[text]

    def set_reward(self, text: str, reward: float) -> None:
        self._rewards[text] = reward

    def reward_of(self, text: str) -> float | None:
        return self._rewards.get(text)

    def reset(self) -> None:
        self._order.clear()
        self._grads.clear()
        self._rewards.clear()


def gradient_fingerprint(loss: ex.LossExpr, model, probe, cfg: ex.SafeMathConfig) -> np.ndarray:
    """Flattened model-parameter gradient of the mean loss over the
    probe batch; eval mode so the fingerprint is deterministic."""
    params = model.parameters()
    tc.zero_grads(params)
    with tc.Tape():
        yhat = rm.predict(model, probe.users, probe.items, mode="eval")
        per_example = tc.elementwise(
            yhat,
            lambda v: ex.eval_batch(loss, v, probe.labels, cfg),
            lambda v: ex.grad_batch(loss, v, probe.labels, cfg),
        )
        tc.backward(tc.mean(per_example))
    parts = [
        (p.grad if p.grad is not None else np.zeros_like(p.val)).ravel() for p in params
    ]
    tc.zero_grads(params)
    return np.concatenate(parts)


def proxy_test(
    loss: ex.LossExpr,
    model,
    probe,
    store: FingerprintStore,
    delta: float,
    cfg: ex.SafeMathConfig = ex.SafeMathConfig(),
) -> ProxyResult:
    """Screen a loss by its gradient fingerprint before any training."""
    g = gradient_fingerprint(loss, model, probe, cfg)
    if np.linalg.norm(g) < delta:
        return ProxyResult("zero_grad")
    dup = store.find_duplicate(g, delta)
    if dup is not None:
        return ProxyResult("duplicate", duplicate_of=dup)
    store.insert(ex.serialize(loss), g)
    return ProxyResult("pass")


@dataclass
class SearchResult:
    records: list
    model: object
    iterations: int
    samples: int
    train_invocations: int
    final_val: float
    history: list = field(default_factory=list)


def _val_metric(model, split, metric: str) -> float:
    scores = rm.predict_scores(model, split.users, split.items)
    return metrics.evaluate(split.labels, scores, metric)


def search_phase(
    cfg: SearchConfig,
    data,
    model,
    policy,
    rng: np.random.Generator,
    sampler=None,
    on_iteration=None,
) -> SearchResult:
    """Phase I: iterative, alternating optimization (reward-filtered).

    ``sampler`` overrides the controller (scripted streams in tests);
    controller updates then do not run. The fingerprint store is cleared
    whenever the model is replaced, since older fingerprints describe a
    model that no longer exists.
    """
    safe = cfg.safe_math
    higher = metrics.higher_is_better(cfg.reward_metric)
    probe_idx = rng.choice(len(data.train), size=cfg.probe_size, replace=False)
    probe = type(data.train)(
        data.train.users[probe_idx], data.train.items[probe_idx], data.train.labels[probe_idx]
    )
    store = FingerprintStore()
    records: list[CandidateRecord] = []
    history: list[dict] = []
    pending: list[tuple] = []
    baseline = ctl.RewardBaseline(decay=cfg.baseline_decay)
    policy_opt = tc.adam(lr=cfg.controller_lr, l2=cfg.l2)
    samples = 0
    train_invocations = 0
    iteration = 0
    stall = 0

    def draw():
        nonlocal samples
        samples += 1
        if sampler is not None:
            return sampler()
        return ctl.sample(policy, cfg.m, rng)

    def push_reward(episode, reward):
        if sampler is not None or policy is None:
            return
        pending.append((episode, reward))
        if len(pending) >= cfg.update_every:
            episodes, rewards = zip(*pending)
            ctl.reinforce_update(
                policy, episodes, rewards, baseline, policy_opt, cfg.entropy_weight
            )
            pending.clear()

    def budget_left():
        return cfg.max_samples is None or samples < cfg.max_samples

    while iteration < cfg.max_iterations and stall < cfg.stall_budget and budget_left():
        iteration += 1
        init = _val_metric(model, data.validation, cfg.reward_metric)
        episode = None
        while budget_left():
            candidate = draw()
            if not cfg.proxy_enabled:
                episode = candidate
                break
            result = proxy_test(candidate.expr, model, probe, store, cfg.delta, safe)
            if result.kind == "zero_grad":
                push_reward(candidate, cfg.default_negative_reward)
                continue
            if result.kind == "duplicate":
                recorded = store.reward_of(result.duplicate_of)
                push_reward(
                    candidate,
                    recorded if recorded is not None else cfg.default_negative_reward,
                )
                continue
            episode = candidate
            break
        if episode is None:
            break  # sample budget exhausted before a pass
        text = ex.serialize(episode.expr)
        copied = rm.clone(model)
        opt = tc.sgd(lr=cfg.model_lr, l2=cfg.l2)
        rm.train_epoch(copied, data.train, episode.expr, safe, opt, rng, cfg.batch_size)
        train_invocations += 1
        updated = _val_metric(copied, data.validation, cfg.reward_metric)
        reward = (updated - init) if higher else (init - updated)
        if cfg.proxy_enabled:
            store.set_reward(text, reward)
        push_reward(episode, reward)
        promoted = reward >= -cfg.eta
        if promoted:
            model = copied
            records.append(CandidateRecord(text, reward, iteration))
            stall = 0
            store.reset()  # fingerprints refer to the replaced model
        else:
            stall += 1
        entry = {
            "iteration": iteration,
            "expr": text,
            "reward": reward,
            "promoted": promoted,
            "val_metric": updated if promoted else init,
            "samples": samples,
        }
        history.append(entry)
        if on_iteration is not None:
            on_iteration(entry)
    final_val = _val_metric(model, data.validation, cfg.reward_metric)
    return SearchResult(
        records, model, iteration, samples, train_invocations, final_val, history
    )


def validation_check(
    loss: ex.LossExpr,
    n_pairs: int = 2000,
    rng: np.random.Generator | None = None,
    cfg: ex.SafeMathConfig = ex.SafeMathConfig(),
) -> float:
    """Fraction of synthesized (yhat, y) pairs whose gradient actually
    moves the prediction toward the label under a descent step (a zero
    gradient moves nothing and does not count). Callers pass a loss iff
    the rate clears their threshold (0.9 by convention)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    yhat = rng.random(n_pairs)
    y = rng.integers(0, 2, n_pairs).astype(float)
    g = ex.grad_batch(loss, yhat, y, cfg)
    ok = np.where(y == 0, g > 0.0, g < 0.0)
    return float(ok.mean())


@dataclass
class TrainResult:
    expr_text: str
    epsilon: float
    best_epoch: int
    epochs_run: int
    val_metric: float
    test_metric: float
    val_report: dict
    test_report: dict


def _full_report(model, split, task: str) -> dict:
    scores = rm.predict_scores(model, split.users, split.items)
    if task == "classification":
        return {
            "auc": metrics.auc(split.labels, scores),
            "f1": metrics.f1(split.labels, scores),
            "accuracy": metrics.accuracy(split.labels, scores),
        }
    return {
        "rmse": metrics.rmse(split.labels, scores),
        "mae": metrics.mae(split.labels, scores),
    }


def train_to_convergence(
    data,
    model_kind: str,
    loss: ex.LossExpr,
    epsilon: float,
    cfg: SearchConfig,
    task: str,
    seed: int,
    d: int = rm.EMBEDDING_DIM,
) -> TrainResult:
    """From-scratch SGD training with the early-stop rules: stop after 10
    consecutive worsening validation epochs, or once the best validation
    epoch is more than 50 epochs old."""
    metric = "auc" if task == "classification" else "rmse"
    higher = metrics.higher_is_better(metric)
    safe = ex.SafeMathConfig(xi=cfg.xi, epsilon=epsilon)
    model = rm.init_model(model_kind, data.n_users, data.n_items, d=d, seed=seed)
    opt = tc.sgd(lr=cfg.model_lr, l2=cfg.l2)
    rng = np.random.default_rng(seed + 1)
    best_val = -math.inf if higher else math.inf
    best_epoch = 0
    best_model = rm.clone(model)
    prev = None
    worsening = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        rm.train_epoch(model, data.train, loss, safe, opt, rng, cfg.batch_size)
        val = _val_metric(model, data.validation, metric)
        if (val > best_val) if higher else (val < best_val):
            best_val = val
            best_epoch = epoch
            best_model = rm.clone(model)
        if prev is not None and ((val < prev) if higher else (val > prev)):
            worsening += 1
        else:
            worsening = 0
        prev = val
        if worsening >= 10 or epoch - best_epoch > 50:
            break
    val_report = _full_report(best_model, data.validation, task)
    test_report = _full_report(best_model, data.test, task)
    return TrainResult(
        ex.serialize(loss),
        epsilon,
        best_epoch,
        epoch,
        val_report[metric],
        test_report[metric],
        val_report,
        test_report,
    )


@dataclass
class EffectivenessResult:
    best: CandidateRecord | None
    runs: list  # TrainResult per (candidate, epsilon), candidate-major order


def _phase3_run(args):
    data, model_kind, text, epsilon, cfg, task, seed = args
    return train_to_convergence(
        data, model_kind, ex.parse(text), epsilon, cfg, task, seed
    )


def effectiveness_test(
    candidates,
    data,
    model_kind: str,
    cfg: SearchConfig,
    task: str,
    seed: int,
    jobs: int = 1,
) -> EffectivenessResult:
    """Phase III: train every candidate over the smoothing grid and keep
    the best validation score; the test metric is recorded, never used
    for selection. Expressions without Log/Reciprocal sites ignore the
    grid, so they train once."""
    candidates = list(candidates)
    if not candidates:
        return EffectivenessResult(None, [])
    metric_higher = task == "classification"
    tasks = []
    for ci, record in enumerate(candidates):
        loss = ex.parse(record.expr_text)
        grid = cfg.epsilon_grid if ex.smoothing_sites(loss) > 0 else (cfg.xi,)
        for ei, epsilon in enumerate(grid):
            tasks.append(((ci, ei), (data, model_kind, record.expr_text, float(epsilon), cfg, task, seed)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_phase3_run, [t[1] for t in tasks]))
    else:
        outputs = [_phase3_run(t[1]) for t in tasks]
    runs = {key: out for (key, _), out in zip(tasks, outputs)}
    best_record = None
    best_score = None
    ordered = [runs[key] for key in sorted(runs)]
    for ci, record in enumerate(candidates):
        cand_runs = [runs[key] for key in sorted(runs) if key[0] == ci]
        scores = [r.val_metric for r in cand_runs]
        pick = int(np.argmax(scores)) if metric_higher else int(np.argmin(scores))
        record.best_epsilon = cand_runs[pick].epsilon
        record.val_metric = cand_runs[pick].val_metric
        record.test_metric = cand_runs[pick].test_metric
        better = (
            best_score is None
            or ((record.val_metric > best_score) if metric_higher else (record.val_metric < best_score))
        )
        if better:
            best_score = record.val_metric
            best_record = record
    return EffectivenessResult(best_record, ordered)
