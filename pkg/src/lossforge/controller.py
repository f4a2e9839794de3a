"""Recurrent policy that samples loss expressions token by token.

Each round the policy emits an operator and then the operator's operand
slots, conditioning on the embedding of the previously emitted token.
Operator/operand logits are squashed as ``1.5 * tanh`` before the
softmax, so no available token's probability can collapse to zero.
Operand choices are masked to slots that exist at that point of the
episode; a binary operator's second operand additionally excludes the
first. Updates are plain REINFORCE with an entropy bonus folded into
the reward and a moving-average baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint, expr as ex, tensorcore as tc

__all__ = [
    "PolicyParams",
    "Episode",
    "RewardBaseline",
    "init_policy",
    "sample",
    "episode_logprob",
    "reinforce_update",
    "save_policy",
    "load_policy",
]

HIDDEN = 32
LAYERS = 2
EMBED_DIM = 32
INIT_RANGE = 0.1
LOGIT_SQUASH = 1.5
ENTROPY_WEIGHT = 1e-4
MASKED = -1e9


@dataclass(frozen=True)
class Episode:
    """One sampled trajectory: interleaved operator and slot choices."""

    decisions: tuple[int, ...]
    logprob: float
    entropy: float
    expr: ex.LossExpr


@dataclass
class RewardBaseline:
    """Exponential moving average of the mean episode reward."""

    value: float = 0.0
    decay: float = 0.95

    def update(self, mean_reward: float) -> None:
        self.value = self.decay * self.value + (1.0 - self.decay) * mean_reward


class PolicyParams:
    def __init__(self, operators, m: int, rng: np.random.Generator):
        self.operators = tuple(operators)
        self.m = m
        self.n_slots = ex.N_VARS + m
        # token ids: 0 = start, 1..n_ops = operators, then one per slot
        self.vocab = 1 + len(self.operators) + self.n_slots

        def u(shape):
            return tc.Tensor(rng.uniform(-INIT_RANGE, INIT_RANGE, shape), requires_grad=True)

        self.embedding = u((self.vocab, EMBED_DIM))
        self.w_ih, self.w_hh, self.b = [], [], []
        for layer in range(LAYERS):
            in_dim = EMBED_DIM if layer == 0 else HIDDEN
            self.w_ih.append(u((in_dim, 4 * HIDDEN)))
            self.w_hh.append(u((HIDDEN, 4 * HIDDEN)))
            bias = u((4 * HIDDEN,))
            bias.decay = False
            self.b.append(bias)
        self.w_op = u((HIDDEN, len(self.operators)))
        self.b_op = u((len(self.operators),))
        self.b_op.decay = False
        self.w_slot = u((HIDDEN, self.n_slots))
        self.b_slot = u((self.n_slots,))
        self.b_slot.decay = False

    def parameters(self):
        out = [self.embedding]
        for layer in range(LAYERS):
            out += [self.w_ih[layer], self.w_hh[layer], self.b[layer]]
        out += [self.w_op, self.b_op, self.w_slot, self.b_slot]
        return out

    def op_token(self, op_idx: int) -> int:
        return 1 + op_idx

    def slot_token(self, slot: int) -> int:
        return 1 + len(self.operators) + slot


def init_policy(
    operators=tuple(ex.Op), m: int = 10, seed: int = 0
) -> PolicyParams:
    return PolicyParams(operators, m, np.random.default_rng(seed))


def _lstm_step(policy: PolicyParams, x: tc.Tensor, state):
    new_state = []
    inp = x
    for layer in range(LAYERS):
        h, c = state[layer]
        gates = tc.add(
            tc.add(tc.matmul(inp, policy.w_ih[layer]), tc.matmul(h, policy.w_hh[layer])),
            policy.b[layer],
        )
        i = tc.sigmoid(tc.slice_vec(gates, 0, HIDDEN))
        f = tc.sigmoid(tc.slice_vec(gates, HIDDEN, 2 * HIDDEN))
        g = tc.tanh(tc.slice_vec(gates, 2 * HIDDEN, 3 * HIDDEN))
        o = tc.sigmoid(tc.slice_vec(gates, 3 * HIDDEN, 4 * HIDDEN))
        c_new = tc.add(tc.mul(f, c), tc.mul(i, g))
        h_new = tc.mul(o, tc.tanh(c_new))
        new_state.append((h_new, c_new))
        inp = h_new
    return inp, new_state


_SQUASH = tc.Tensor(LOGIT_SQUASH)


def _decide(h, w, b, mask, rng, forced):
    """Squash logits, mask, sample (or replay) one choice.

    Returns (choice, logprob tensor, entropy, probs).
    """
    logits = tc.mul(tc.tanh(tc.add(tc.matmul(h, w), b)), _SQUASH)
    if mask is not None:
        logits = tc.add(logits, tc.Tensor(mask))
    ls = tc.log_softmax(logits)
    probs = np.exp(ls.val)
    if forced is None:
        cum = np.cumsum(probs)
        choice = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
        choice = min(choice, int(np.flatnonzero(probs > 0)[-1]))
    else:
        choice = forced
    live = probs[probs > 0]
    entropy = float(-(live * np.log(live)).sum())
    return choice, tc.pick(ls, choice), entropy


def _run_episode(policy: PolicyParams, m: int, rng=None, decisions=None):
    """Sample a fresh episode, or replay ``decisions`` to rebuild its
    log-probability on the active tape."""
    if m < 1 or m > policy.m:
        raise tc.ContractError(f"rounds must be in [1, {policy.m}], got {m}")
    replay = decisions is not None
    cursor = 0

    def forced():
        nonlocal cursor
        if not replay:
            return None
        choice = decisions[cursor]
        cursor += 1
        return choice

    zeros = tc.Tensor(np.zeros(HIDDEN))
    state = [(zeros, zeros) for _ in range(LAYERS)]
    token = 0  # start token
    logprob = None
    entropy = 0.0
    made: list[int] = []
    nodes: list[ex.Node] = []
    for rnd in range(m):
        existing = ex.N_VARS + rnd
        h, state = _lstm_step(policy, tc.embedding_lookup(policy.embedding, token), state)
        op_idx, lp, ent = _decide(h, policy.w_op, policy.b_op, None, rng, forced())
        logprob = lp if logprob is None else tc.add(logprob, lp)
        entropy += ent
        made.append(op_idx)
        op = policy.operators[op_idx]
        token = policy.op_token(op_idx)
        args = []
        for operand in range(op.arity):
            mask = np.full(policy.n_slots, MASKED)
            mask[:existing] = 0.0
            if operand == 1:
                mask[args[0]] = MASKED
            h, state = _lstm_step(policy, tc.embedding_lookup(policy.embedding, token), state)
            slot, lp, ent = _decide(h, policy.w_slot, policy.b_slot, mask, rng, forced())
            logprob = tc.add(logprob, lp)
            entropy += ent
            made.append(slot)
            args.append(slot)
            token = policy.slot_token(slot)
        nodes.append(ex.Node(op, tuple(args)))
    return tuple(made), logprob, entropy, nodes


def sample(policy: PolicyParams, m: int, rng: np.random.Generator) -> Episode:
    """Draw one episode; the expression is pruned to its root-reachable part."""
    decisions, logprob, entropy, nodes = _run_episode(policy, m, rng=rng)
    return Episode(decisions, float(logprob.val), entropy, ex.prune_to_root(nodes))


def episode_logprob(policy: PolicyParams, episode: Episode, m: int | None = None) -> tc.Tensor:
    """Log-probability of an episode under the current weights.

    Run inside an active tape to make it differentiable.
    """
    rounds = m if m is not None else _rounds_of(policy, episode)
    _, logprob, _, _ = _run_episode(policy, rounds, decisions=episode.decisions)
    return logprob


def _rounds_of(policy: PolicyParams, episode: Episode) -> int:
    rounds = 0
    cursor = 0
    while cursor < len(episode.decisions):
        op = policy.operators[episode.decisions[cursor]]
        cursor += 1 + op.arity
        rounds += 1
    return rounds


def reinforce_update(
    policy: PolicyParams,
    episodes,
    rewards,
    baseline: RewardBaseline,
    opt: tc.OptimizerState,
    entropy_weight: float = ENTROPY_WEIGHT,
) -> None:
    """One policy-gradient ascent step from a batch of scored episodes."""
    episodes = list(episodes)
    rewards = [float(r) for r in rewards]
    if len(episodes) != len(rewards):
        raise tc.ContractError(
            f"episodes/rewards length mismatch: {len(episodes)} vs {len(rewards)}"
        )
    n = len(episodes)
    with tc.Tape():
        surrogate = None
        for episode, reward in zip(episodes, rewards):
            advantage = reward + entropy_weight * episode.entropy - baseline.value
            lp = episode_logprob(policy, episode)
            term = tc.mul(lp, tc.Tensor(-advantage / n))  # minimize -J
            surrogate = term if surrogate is None else tc.add(surrogate, term)
        tc.backward(surrogate)
    tc.step(opt, policy.parameters())
    baseline.update(sum(rewards) / n)


def save_policy(policy: PolicyParams, path) -> None:
    arrays = {
        "meta/ops": np.frombuffer(",".join(op.value for op in policy.operators).encode(), dtype=np.uint8),
        "meta/m": np.asarray([policy.m], dtype=np.int64),
    }
    for k, t in enumerate(policy.parameters()):
        arrays[f"param/{k}"] = t.val
    checkpoint.save_arrays(path, arrays)


def load_policy(path) -> PolicyParams:
    arrays = checkpoint.load_arrays(path)
    ops = tuple(ex.Op(v) for v in arrays["meta/ops"].tobytes().decode().split(","))
    m = int(arrays["meta/m"][0])
    policy = init_policy(ops, m, seed=0)
    for k, t in enumerate(policy.parameters()):
        t.val[...] = arrays[f"param/{k}"]
    return policy
