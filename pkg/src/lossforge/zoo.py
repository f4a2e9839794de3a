"""Built-in losses: handcrafted baselines plus the generated ones.

All entries are plain expression texts in the DSL, so they share the
safe-math evaluation and smoothing-coefficient machinery with searched
losses. The generated entries (maxr, sumr, logmin) are the raw operator
forms; their Log/Reciprocal sites are where the smoothing coefficient is
substituted during grid search.
"""

from __future__ import annotations

from . import expr as ex

__all__ = ["ZOO", "zoo_names", "get_loss"]

_PT = "(add (mul y yhat) (mul (add one (neg y)) (add one (neg yhat))))"

ZOO = {
    # regression winner; also a strong classification baseline
    "mse": "(sq (add yhat (neg y)))",
    # binary cross entropy: -[y*log(yhat) + (1-y)*log(1-yhat)]
    "bce": "(neg (add (mul y (log yhat)) (mul (add one (neg y)) (log (add one (neg yhat))))))",
    # hinge on (2y-1)(2yhat-1); 2v-1 is written v-(1-v) since the DSL
    # has no scalar coefficients, and the zero arm as yhat-yhat
    "hinge": (
        "(max (add yhat (neg yhat)) "
        "(add one (neg (mul (add y (neg (add one (neg y)))) "
        "(add yhat (neg (add one (neg yhat))))))))"
    ),
    # focal with gamma=2: -(1-pt)^2 * log(pt)
    "focal": f"(neg (mul (sq (add one (neg {_PT}))) (log {_PT})))",
    # generated: max of the two prediction/label ratios
    "maxr": "(max (mul yhat (rec y)) (mul y (rec yhat)))",
    # generated: (yhat + y) / (yhat * y)
    "sumr": "(mul (add yhat y) (rec (mul yhat y)))",
    # generated: log(1/min(yhat, y)) * (yhat + y + min(yhat, y))
    "logmin": "(mul (log (rec (min yhat y))) (add (add yhat y) (min yhat y)))",
}


def zoo_names() -> list[str]:
    return list(ZOO)


def get_loss(name_or_text: str) -> ex.LossExpr:
    """Resolve a zoo name or parse an explicit expression text."""
    text = ZOO.get(name_or_text.strip().lower(), name_or_text)
    return ex.parse(text)
