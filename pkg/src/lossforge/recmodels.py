"""The two recommender architectures: matrix factorization and MLP.

Both map a (user, item) pair to a sigmoid prediction in (0, 1) and train
by minibatch SGD/Adam under an arbitrary loss expression: the scalar
batch loss is the mean of the per-example expression values, and the
expression's own d(loss)/d(yhat) is chained into the model tape at the
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint, expr as ex, tensorcore as tc

__all__ = [
    "MFModel",
    "MLPModel",
    "NonFiniteLossError",
    "init_model",
    "predict",
    "predict_scores",
    "train_epoch",
    "clone",
    "save_model",
    "load_model",
]

EMBEDDING_DIM = 64
MLP_LAYERS = ((128, 64), (64, 16), (16, 1))
DROPOUT_RATE = 0.2
BATCH_SIZE = 128
INIT_SCALE = 0.01


class NonFiniteLossError(Exception):
    pass


def _uniform(rng, shape):
    return tc.Tensor(rng.uniform(-INIT_SCALE, INIT_SCALE, shape), requires_grad=True)


@dataclass
class MFModel:
    user_emb: tc.Tensor
    item_emb: tc.Tensor
    user_bias: tc.Tensor
    item_bias: tc.Tensor
    global_bias: tc.Tensor
    n_users: int
    n_items: int
    d: int

    kind = "mf"

    def parameters(self):
        return [self.user_emb, self.item_emb, self.user_bias, self.item_bias, self.global_bias]


@dataclass
class MLPModel:
    user_emb: tc.Tensor
    item_emb: tc.Tensor
    weights: list  # [W1, b1, W2, b2, W3, b3]
    gammas: list
    betas: list
    bn_states: list
    n_users: int
    n_items: int
    d: int

    kind = "mlp"

    def parameters(self):
        return [self.user_emb, self.item_emb] + self.weights + self.gammas + self.betas


def init_model(kind: str, n_users: int, n_items: int, d: int = EMBEDDING_DIM, seed: int = 0):
    """Fresh model with uniform(-0.01, 0.01) weights, deterministic per seed."""
    rng = np.random.default_rng(seed)
    user_emb = _uniform(rng, (n_users, d))
    item_emb = _uniform(rng, (n_items, d))
    if kind == "mf":
        user_bias = _uniform(rng, (n_users,))
        item_bias = _uniform(rng, (n_items,))
        global_bias = _uniform(rng, ())
        for b in (user_bias, item_bias, global_bias):
            b.decay = False
        return MFModel(user_emb, item_emb, user_bias, item_bias, global_bias, n_users, n_items, d)
    if kind == "mlp":
        if MLP_LAYERS[0][0] != 2 * d:
            raise ValueError(f"MLP input width {MLP_LAYERS[0][0]} needs d={MLP_LAYERS[0][0] // 2}")
        weights, gammas, betas, bn_states = [], [], [], []
        for li, (n_in, n_out) in enumerate(MLP_LAYERS):
            weights.append(_uniform(rng, (n_in, n_out)))
            bias = _uniform(rng, (n_out,))
            bias.decay = False
            weights.append(bias)
            if li < len(MLP_LAYERS) - 1:  # no batchnorm/dropout on the output layer
                gamma = tc.Tensor(np.ones(n_out), requires_grad=True, decay=False)
                beta = tc.Tensor(np.zeros(n_out), requires_grad=True, decay=False)
                gammas.append(gamma)
                betas.append(beta)
                bn_states.append(tc.BatchNormState.for_width(n_out))
        return MLPModel(user_emb, item_emb, weights, gammas, betas, bn_states, n_users, n_items, d)
    raise ValueError(f"unknown model kind {kind!r} (expected 'mf' or 'mlp')")


def predict(model, users, items, mode: str = "eval", rng=None) -> tc.Tensor:
    """Batch predictions as a tensor of shape (batch,). Values in (0, 1)."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    eu = tc.embedding_lookup(model.user_emb, users)
    ei = tc.embedding_lookup(model.item_emb, items)
    if model.kind == "mf":
        score = tc.sum_tensor(tc.mul(eu, ei), axis=1)
        score = tc.add(score, tc.embedding_lookup(model.user_bias, users))
        score = tc.add(score, tc.embedding_lookup(model.item_bias, items))
        score = tc.add(score, model.global_bias)
        return tc.sigmoid(score)
    h = tc.concat(eu, ei, axis=1)
    n_hidden = len(model.bn_states)
    for li in range(len(MLP_LAYERS)):
        w, b = model.weights[2 * li], model.weights[2 * li + 1]
        h = tc.add(tc.matmul(h, w), b)
        if li < n_hidden:
            h = tc.batchnorm(h, model.gammas[li], model.betas[li], model.bn_states[li], mode)
            h = tc.relu(h)
            h = tc.dropout(h, DROPOUT_RATE, mode, rng)
    return tc.sigmoid(tc.reshape(h, (-1,)))


def predict_scores(model, users, items) -> np.ndarray:
    """Eval-mode predictions off-tape, as a plain array."""
    return predict(model, users, items, mode="eval").val


def train_epoch(
    model,
    split,
    loss: ex.LossExpr,
    cfg: ex.SafeMathConfig,
    opt: tc.OptimizerState,
    rng: np.random.Generator,
    batch_size: int = BATCH_SIZE,
) -> float:
    """One shuffled pass over the training split. Returns the mean loss."""
    n = len(split)
    order = rng.permutation(n)
    params = model.parameters()
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        users = split.users[idx]
        items = split.items[idx]
        y = split.labels[idx]
        with tc.Tape():
            yhat = predict(model, users, items, mode="train", rng=rng)
            per_example = tc.elementwise(
                yhat,
                lambda v, y=y: ex.eval_batch(loss, v, y, cfg),
                lambda v, y=y: ex.grad_batch(loss, v, y, cfg),
            )
            batch_loss = tc.mean(per_example)
            if not np.isfinite(batch_loss.val):
                raise NonFiniteLossError(
                    f"non-finite loss {batch_loss.val!r} at batch {start // batch_size} "
                    f"for {ex.serialize(loss)}"
                )
            tc.backward(batch_loss)
        tc.step(opt, params)
        total += float(batch_loss.val) * len(idx)
    return total / n if n else 0.0


def clone(model):
    """Deep, independent replica (parameters and batchnorm statistics)."""

    def dup(t: tc.Tensor) -> tc.Tensor:
        out = tc.Tensor(t.val.copy(), requires_grad=t.requires_grad, decay=t.decay)
        return out

    if model.kind == "mf":
        return MFModel(
            dup(model.user_emb),
            dup(model.item_emb),
            dup(model.user_bias),
            dup(model.item_bias),
            dup(model.global_bias),
            model.n_users,
            model.n_items,
            model.d,
        )
    return MLPModel(
        dup(model.user_emb),
        dup(model.item_emb),
        [dup(t) for t in model.weights],
        [dup(t) for t in model.gammas],
        [dup(t) for t in model.betas],
        [s.copy() for s in model.bn_states],
        model.n_users,
        model.n_items,
        model.d,
    )


_MF_NAMES = ["user_emb", "item_emb", "user_bias", "item_bias", "global_bias"]


def save_model(model, path) -> None:
    arrays = {
        "meta/kind": np.frombuffer(model.kind.encode(), dtype=np.uint8),
        "meta/dims": np.asarray([model.n_users, model.n_items, model.d], dtype=np.int64),
    }
    if model.kind == "mf":
        for name, t in zip(_MF_NAMES, model.parameters()):
            arrays[f"param/{name}"] = t.val
    else:
        for k, t in enumerate(model.weights):
            arrays[f"param/weights/{k}"] = t.val
        for k, (g, b, s) in enumerate(zip(model.gammas, model.betas, model.bn_states)):
            arrays[f"param/gamma/{k}"] = g.val
            arrays[f"param/beta/{k}"] = b.val
            arrays[f"bn/mean/{k}"] = s.mean
            arrays[f"bn/var/{k}"] = s.var
        arrays["param/user_emb"] = model.user_emb.val
        arrays["param/item_emb"] = model.item_emb.val
    checkpoint.save_arrays(path, arrays)


def load_model(path):
    arrays = checkpoint.load_arrays(path)
    kind = arrays["meta/kind"].tobytes().decode()
    n_users, n_items, d = (int(v) for v in arrays["meta/dims"])
    model = init_model(kind, n_users, n_items, d=d, seed=0)
    if kind == "mf":
        for name, t in zip(_MF_NAMES, model.parameters()):
            t.val[...] = arrays[f"param/{name}"]
    else:
        model.user_emb.val[...] = arrays["param/user_emb"]
        model.item_emb.val[...] = arrays["param/item_emb"]
        for k, t in enumerate(model.weights):
            t.val[...] = arrays[f"param/weights/{k}"]
        for k, (g, b, s) in enumerate(zip(model.gammas, model.betas, model.bn_states)):
            g.val[...] = arrays[f"param/gamma/{k}"]
            b.val[...] = arrays[f"param/beta/{k}"]
            s.mean[...] = arrays[f"bn/mean/{k}"]
            s.var[...] = arrays[f"bn/var/{k}"]
    return model
