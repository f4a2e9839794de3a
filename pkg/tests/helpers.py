"""Shared test utilities: random expressions and finite-difference oracles."""

from __future__ import annotations

import numpy as np

from lossforge import expr as ex

FD_STEP = 1e-5


def random_expr(rng: np.random.Generator, rounds: int = 10) -> ex.LossExpr:
    """Random well-formed expression: per round a random operator with
    random distinct existing slots, pruned to the root-reachable part."""
    ops = list(ex.Op)
    nodes = []
    for k in range(rounds):
        op = ops[rng.integers(len(ops))]
        existing = ex.N_VARS + k
        if op.arity == 1:
            args = (int(rng.integers(existing)),)
        else:
            first = int(rng.integers(existing))
            second = int(rng.integers(existing - 1))
            if second >= first:
                second += 1
            args = (first, second)
        nodes.append(ex.Node(op, args))
    return ex.prune_to_root(nodes)


def central_diff(expr, yhat, y, cfg=ex.SafeMathConfig(), h=FD_STEP) -> float:
    return (ex.eval_expr(expr, yhat + h, y, cfg) - ex.eval_expr(expr, yhat - h, y, cfg)) / (2 * h)


def _yhat_dependent(expr) -> list[bool]:
    dep = [True, False, False]
    for node in expr.nodes:
        dep.append(any(dep[a] for a in node.args))
    return dep


def is_safe_point(expr, yhat, y, cfg=ex.SafeMathConfig(), margin=1e-3) -> bool:
    """True when the point is at least ``margin`` away from Max/Min ties
    and clamp-state changes, and the central difference is numerically
    stable (step-halving agreement), so it can serve as an oracle."""
    raws, _ = ex.node_values(expr, yhat, y, cfg)
    values, _ = ex._forward(expr, yhat, y, cfg)
    dep = _yhat_dependent(expr)
    ceil = 1.0 / cfg.xi
    for k, node in enumerate(expr.nodes):
        if node.op in (ex.Op.MAX, ex.Op.MIN):
            a = float(values[node.args[0]])
            b = float(values[node.args[1]])
            if abs(a - b) < margin and (dep[node.args[0]] or dep[node.args[1]]):
                return False
        if not dep[ex.N_VARS + k]:
            continue
        mag = abs(float(raws[k]))
        if abs(mag - cfg.xi) < margin * cfg.xi:
            return False
        if abs(mag - ceil) < margin * ceil:
            return False
    cd1 = central_diff(expr, yhat, y, cfg, h=FD_STEP)
    cd2 = central_diff(expr, yhat, y, cfg, h=FD_STEP / 2)
    return abs(cd1 - cd2) <= 1e-4 * max(1.0, abs(cd2))


def safe_points(expr, rng, n: int, cfg=ex.SafeMathConfig(), max_tries=400):
    """Up to ``n`` oracle-safe (yhat, y) points for the expression."""
    points = []
    tries = 0
    while len(points) < n and tries < max_tries:
        tries += 1
        yhat = float(rng.uniform(0.002, 0.998))
        y = float(rng.integers(0, 2))
        if is_safe_point(expr, yhat, y, cfg):
            points.append((yhat, y))
    return points
