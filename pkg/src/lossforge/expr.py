"""Symbolic loss expressions over the variables (yhat, y, 1).

A loss is a small DAG of primitive operators. Slots 0, 1, 2 hold the
initial variables ``yhat``, ``y`` and the constant ``1``; node k of the
DAG defines slot ``3 + k``. The last node is always the root.

Evaluation is "safe math": every node result has its magnitude clamped
into ``[xi, 1/xi]`` (sign preserved, sign(0) := +1), and Log/Reciprocal
add a smoothing constant ``epsilon`` to their argument's magnitude so no
input can raise a numeric exception. Gradients with respect to ``yhat``
are computed by a reverse sweep over the DAG; a node whose raw value
fell outside the clamp interval passes zero gradient downstream.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Op",
    "Node",
    "LossExpr",
    "SafeMathConfig",
    "ExprError",
    "StructuralError",
    "ParseError",
    "eval_expr",
    "eval_batch",
    "grad_yhat",
    "grad_batch",
    "node_values",
    "serialize",
    "parse",
    "smoothing_sites",
    "structurally_equal",
]

N_VARS = 3  # yhat, y, one

SLOT_YHAT = 0
SLOT_Y = 1
SLOT_ONE = 2


class Op(enum.Enum):
    ADD = "add"
    MUL = "mul"
    MAX = "max"
    MIN = "min"
    NEG = "neg"
    ID = "id"
    LOG = "log"
    SQ = "sq"
    REC = "rec"

    @property
    def arity(self) -> int:
        return 2 if self in _BINARY else 1


_BINARY = frozenset({Op.ADD, Op.MUL, Op.MAX, Op.MIN})
_HEADS = {op.value: op for op in Op}
_ATOMS = {"yhat": SLOT_YHAT, "y": SLOT_Y, "one": SLOT_ONE}
_ATOM_NAMES = {v: k for k, v in _ATOMS.items()}


class ExprError(Exception):
    """Base class for loss-expression errors."""


class StructuralError(ExprError):
    """Malformed expression DAG (bad operand index, bad arity)."""


class ParseError(ExprError):
    """Syntax error in the textual loss format; carries a position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


@dataclass(frozen=True)
class Node:
    op: Op
    args: tuple[int, ...]


@dataclass(frozen=True)
class SafeMathConfig:
    """Numeric guards: ``xi`` is the clamp constant, ``epsilon`` the
    smoothing constant substituted at Log/Reciprocal sites."""

    xi: float = 1e-6
    epsilon: float = 1e-6

    def __post_init__(self):
        if not (0.0 < self.xi <= self.epsilon <= 1.0):
            raise ValueError(
                f"need 0 < xi <= epsilon <= 1, got xi={self.xi}, epsilon={self.epsilon}"
            )


@dataclass(frozen=True)
class LossExpr:
    """An ordered DAG of nodes; node k defines slot 3 + k, root is last."""

    nodes: tuple[Node, ...]

    def __post_init__(self):
        if not self.nodes:
            raise StructuralError("expression needs at least one node")
        for k, node in enumerate(self.nodes):
            if node.op.arity != len(node.args):
                raise StructuralError(
                    f"node {k}: {node.op.value} takes {node.op.arity} operands, got {len(node.args)}"
                )
            for a in node.args:
                if not (0 <= a < N_VARS + k):
                    raise StructuralError(f"node {k}: operand slot {a} does not exist yet")
            if node.op.arity == 2 and node.args[0] == node.args[1]:
                raise StructuralError(
                    f"node {k}: {node.op.value} requires two distinct operand slots"
                )

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def root_slot(self) -> int:
        return N_VARS + len(self.nodes) - 1


def _clamp(raw: np.ndarray, xi: float) -> tuple[np.ndarray, np.ndarray]:
    """Sign-preserving magnitude clamp into [xi, 1/xi]; sign(0) := +1.

    Returns (clamped value, pass-gate) where the gate is 1.0 only where
    the raw magnitude already lay inside the interval.
    """
    mag = np.abs(raw)
    sign = np.where(raw < 0, -1.0, 1.0)
    inside = (mag >= xi) & (mag <= 1.0 / xi)
    return sign * np.clip(mag, xi, 1.0 / xi), inside.astype(float)


def _forward(expr: LossExpr, yhat, y, cfg: SafeMathConfig):
    """Evaluate all slots; returns (values, raws) lists of arrays."""
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    yhat, y = np.broadcast_arrays(yhat, y)
    values: list[np.ndarray] = [yhat, y, np.ones_like(yhat)]
    raws: list[np.ndarray] = []
    eps = cfg.epsilon
    for node in expr.nodes:
        a = values[node.args[0]]
        if node.op is Op.ADD:
            raw = a + values[node.args[1]]
        elif node.op is Op.MUL:
            raw = a * values[node.args[1]]
        elif node.op is Op.MAX:
            raw = np.maximum(a, values[node.args[1]])
        elif node.op is Op.MIN:
            raw = np.minimum(a, values[node.args[1]])
        elif node.op is Op.NEG:
            raw = -a
        elif node.op is Op.ID:
            raw = +a
        elif node.op is Op.LOG:
            raw = np.where(a < 0, -1.0, 1.0) * np.log(np.abs(a) + eps)
        elif node.op is Op.SQ:
            raw = a * a
        else:  # Op.REC
            raw = np.where(a < 0, -1.0, 1.0) / (np.abs(a) + eps)
        clamped, _ = _clamp(raw, cfg.xi)
        raws.append(raw)
        values.append(clamped)
    return values, raws


def eval_batch(expr, yhat, y, cfg: SafeMathConfig = SafeMathConfig()) -> np.ndarray:
    """Vectorized loss values for arrays of predictions and labels."""
    values, _ = _forward(expr, yhat, y, cfg)
    return values[expr.root_slot]


def eval_expr(expr, yhat: float, y: float, cfg: SafeMathConfig = SafeMathConfig()) -> float:
    """Loss value at one (yhat, y) point."""
    return float(eval_batch(expr, yhat, y, cfg))


def grad_batch(expr, yhat, y, cfg: SafeMathConfig = SafeMathConfig()) -> np.ndarray:
    """Vectorized d(loss)/d(yhat) via a reverse sweep over the DAG."""
    values, raws = _forward(expr, yhat, y, cfg)
    eps = cfg.epsilon
    adj = [np.zeros_like(values[0]) for _ in values]
    adj[expr.root_slot] = np.ones_like(values[0])
    for k in range(len(expr.nodes) - 1, -1, -1):
        node = expr.nodes[k]
        _, gate = _clamp(raws[k], cfg.xi)
        up = adj[N_VARS + k] * gate
        a = values[node.args[0]]
        if node.op is Op.ADD:
            adj[node.args[0]] += up
            adj[node.args[1]] += up
        elif node.op is Op.MUL:
            b = values[node.args[1]]
            adj[node.args[0]] += up * b
            adj[node.args[1]] += up * a
        elif node.op is Op.MAX:
            b = values[node.args[1]]
            first = (a >= b).astype(float)  # ties feed the first operand
            adj[node.args[0]] += up * first
            adj[node.args[1]] += up * (1.0 - first)
        elif node.op is Op.MIN:
            b = values[node.args[1]]
            first = (a <= b).astype(float)
            adj[node.args[0]] += up * first
            adj[node.args[1]] += up * (1.0 - first)
        elif node.op is Op.NEG:
            adj[node.args[0]] -= up
        elif node.op is Op.ID:
            adj[node.args[0]] += up
        elif node.op is Op.LOG:
            adj[node.args[0]] += up / (np.abs(a) + eps)
        elif node.op is Op.SQ:
            adj[node.args[0]] += up * 2.0 * a
        else:  # Op.REC
            adj[node.args[0]] += up * (-1.0 / (np.abs(a) + eps) ** 2)
    return adj[SLOT_YHAT]


def grad_yhat(expr, yhat: float, y: float, cfg: SafeMathConfig = SafeMathConfig()) -> float:
    """d(loss)/d(yhat) at one point."""
    return float(grad_batch(expr, yhat, y, cfg))


def node_values(expr, yhat, y, cfg: SafeMathConfig = SafeMathConfig()):
    """Per-node (raw, clamped) values; diagnostic for clamp/kink analysis."""
    values, raws = _forward(expr, yhat, y, cfg)
    return raws, values[N_VARS:]


def smoothing_sites(expr: LossExpr) -> int:
    """Number of Log/Reciprocal nodes, i.e. sites where ``epsilon`` acts."""
    return sum(1 for node in expr.nodes if node.op in (Op.LOG, Op.REC))


# --- textual format: prefix S-expressions --------------------------------

def serialize(expr: LossExpr) -> str:
    """Render as a prefix S-expression, e.g. ``(sq (add yhat (neg y)))``.

    Shared nodes are expanded in place, so the text is always a tree.
    """

    def render(slot: int) -> str:
        if slot < N_VARS:
            return _ATOM_NAMES[slot]
        node = expr.nodes[slot - N_VARS]
        parts = " ".join(render(a) for a in node.args)
        return f"({node.op.value} {parts})"

    return render(expr.root_slot)


_TOKEN_RE = re.compile(r"\(|\)|[a-z]+")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        m = _TOKEN_RE.match(text, i)
        if m is None:
            raise ParseError(f"unexpected character {ch!r}", i)
        tokens.append((m.group(), i))
        i = m.end()
    return tokens


def parse(text: str) -> LossExpr:
    """Parse the textual loss format back into a :class:`LossExpr`."""
    tokens = _tokenize(text)
    if not tokens:
        raise ParseError("empty expression", 0)
    nodes: list[Node] = []
    pos = 0  # token cursor

    def next_token() -> tuple[str, int]:
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of input", len(text))
        tok = tokens[pos]
        pos += 1
        return tok

    def parse_term() -> int:
        tok, at = next_token()
        if tok == "(":
            head, head_at = next_token()
            if head == "(" or head == ")":
                raise ParseError("expected operator name after '('", head_at)
            op = _HEADS.get(head)
            if op is None:
                raise ParseError(f"unknown operator {head!r}", head_at)
            args = []
            while True:
                if pos >= len(tokens):
                    raise ParseError("missing ')'", len(text))
                if tokens[pos][0] == ")":
                    pos_close = tokens[pos][1]
                    next_token()
                    break
                args.append(parse_term())
            if len(args) != op.arity:
                raise ParseError(
                    f"{head!r} takes {op.arity} operand(s), got {len(args)}", head_at
                )
            if op.arity == 2 and args[0] == args[1]:
                raise ParseError(f"{head!r} requires two distinct operands", head_at)
            nodes.append(Node(op, tuple(args)))
            return N_VARS + len(nodes) - 1
        if tok == ")":
            raise ParseError("unexpected ')'", at)
        slot = _ATOMS.get(tok)
        if slot is None:
            raise ParseError(f"unknown variable {tok!r}", at)
        return slot

    root = parse_term()
    if pos != len(tokens):
        raise ParseError("trailing input after expression", tokens[pos][1])
    if root < N_VARS:
        raise ParseError("expression must apply at least one operator", 0)
    return LossExpr(tuple(nodes))


def structurally_equal(e1: LossExpr, e2: LossExpr) -> bool:
    """Equality of the unfolded computation trees rooted at each root."""
    memo: dict[tuple[int, int], bool] = {}

    def eq(s1: int, s2: int) -> bool:
        if s1 < N_VARS or s2 < N_VARS:
            return s1 == s2
        key = (s1, s2)
        if key not in memo:
            n1 = e1.nodes[s1 - N_VARS]
            n2 = e2.nodes[s2 - N_VARS]
            memo[key] = n1.op is n2.op and all(
                eq(a1, a2) for a1, a2 in zip(n1.args, n2.args)
            )
        return memo[key]

    return eq(e1.root_slot, e2.root_slot)


def prune_to_root(nodes: list[Node]) -> LossExpr:
    """Drop nodes unreachable from the last node and renumber slots.

    Samplers append one node per round; rounds whose results are never
    referenced again leave orphans that carry no gradient and would not
    survive a serialize/parse round trip.
    """
    if not nodes:
        raise StructuralError("expression needs at least one node")
    keep = set()
    stack = [N_VARS + len(nodes) - 1]
    while stack:
        slot = stack.pop()
        if slot < N_VARS or slot in keep:
            continue
        keep.add(slot)
        stack.extend(nodes[slot - N_VARS].args)
    remap: dict[int, int] = {s: s for s in range(N_VARS)}
    pruned: list[Node] = []
    for k, node in enumerate(nodes):
        slot = N_VARS + k
        if slot not in keep:
            continue
        pruned.append(Node(node.op, tuple(remap[a] for a in node.args)))
        remap[slot] = N_VARS + len(pruned) - 1
    return LossExpr(tuple(pruned))


def is_finite_scalar(x: float) -> bool:
    return math.isfinite(x)
