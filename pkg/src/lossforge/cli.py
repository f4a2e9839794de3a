"""Command-line entry point: ``lossforge search | check | train``.

Configuration comes from defaults, then an optional flat ``key=value``
config file, then flags (highest precedence). Every run echoes its full
resolved configuration to ``config.echo`` in the output directory, and
re-running from that echo reproduces the run bit for bit under the same
seeds. Reports are one ``key=value`` pair per line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import controller as ctl, data as dat, expr as ex, recmodels as rm, search as sr, zoo

__all__ = ["RunConfig", "main", "cmd_search", "cmd_check", "cmd_train"]


class UsageError(Exception):
    pass


class NoCandidateError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved settings for one command; every field has a default."""

    dataset: str = ""            # path, or synth spec "users=..,items=..,rank=..,noise=..,seed=.."
    format: str = "ml100k"       # ml100k | csv | synth
    model: str = "mf"            # mf | mlp
    task: str = "classification"  # classification | regression
    loss: str = "mse"            # train: zoo name or expression; check: loss-list file
    epsilon: float = 1e-6        # smoothing coefficient for train/check
    eta: float = 0.01            # reward-filter tolerance
    delta: float = 1e-4          # proxy-test threshold
    rounds: int = 10             # controller rounds per expression
    seed: int = 0
    jobs: int = 1                # phase-III parallelism
    out: str = ""                # output dir; default $LOSSFORGE_OUT or ./lossforge_out
    max_iters: int = 10000       # phase-I outer iteration cap
    stall: int = 500             # iterations without a promotion before stopping
    max_samples: int = 0         # total sampled expressions (0 = unlimited)
    probe: int = 5               # proxy-test batch size |B|
    pairs: int = 2000            # validation-check sample pairs
    threshold: float = 0.9       # validation-check positive-rate threshold
    dim: int = 64                # embedding dimension
    lr: float = 0.01             # recommender SGD learning rate
    l2: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 1000

    def out_dir(self) -> str:
        return self.out or os.environ.get("LOSSFORGE_OUT", "lossforge_out")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    try:
        if f.type in ("int", int):
            return int(raw)
        if f.type in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise UsageError(f"config field {name!r}: cannot parse {raw!r}") from None


def load_config_file(path: str) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key == "command":
                continue  # echo files carry the command for the record
            if key not in _FIELDS:
                raise UsageError(f"{path}:{lineno}: unknown config field {key!r}")
            values[key] = _coerce(key, raw.strip())
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    for name in _FIELDS:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            values[name] = flag_val
    cfg = RunConfig(**values)
    if cfg.model not in ("mf", "mlp"):
        raise UsageError(f"--model must be mf or mlp, got {cfg.model!r}")
    if cfg.task not in ("classification", "regression"):
        raise UsageError(f"--task must be classification or regression, got {cfg.task!r}")
    if cfg.format not in ("ml100k", "csv", "synth"):
        raise UsageError(f"--format must be ml100k, csv or synth, got {cfg.format!r}")
    return cfg


def echo_config(cfg: RunConfig, command: str, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"command={command}\n")
        for name in sorted(_FIELDS):
            fh.write(f"{name}={getattr(cfg, name)!r}\n".replace("'", ""))


def _parse_synth_spec(spec: str) -> dict:
    out = {"users": 200, "items": 100, "rank": 2, "noise": 0.05, "seed": 0}
    if spec:
        for part in spec.split(","):
            if "=" not in part:
                raise UsageError(f"--dataset synth spec: expected key=value, got {part!r}")
            key, _, raw = part.partition("=")
            key = key.strip()
            if key not in out:
                raise UsageError(f"--dataset synth spec: unknown key {key!r}")
            out[key] = float(raw) if key == "noise" else int(raw)
    return out


def load_dataset(cfg: RunConfig) -> dat.SplitDataset:
    if cfg.format == "synth":
        spec = _parse_synth_spec(cfg.dataset)
        return dat.synth_dataset(spec["users"], spec["items"], spec["rank"], spec["noise"], spec["seed"])
    if not cfg.dataset:
        raise UsageError("--dataset is required (path to the ratings file)")
    if not os.path.exists(cfg.dataset):
        raise UsageError(f"--dataset: no such file: {cfg.dataset}")
    loaded = dat.load_tabular(cfg.dataset, cfg.format)
    return dat.leave_one_out_split(dat.binarize(loaded.interactions), loaded.n_users, loaded.n_items)


def _search_config(cfg: RunConfig) -> sr.SearchConfig:
    return sr.SearchConfig(
        delta=cfg.delta,
        eta=cfg.eta,
        probe_size=cfg.probe,
        m=cfg.rounds,
        reward_metric="auc" if cfg.task == "classification" else "rmse",
        stall_budget=cfg.stall,
        max_iterations=cfg.max_iters,
        max_samples=cfg.max_samples or None,
        model_lr=cfg.lr,
        l2=cfg.l2,
        batch_size=cfg.batch_size,
        max_epochs=cfg.max_epochs,
    )


def _record_to_json(r: sr.CandidateRecord) -> str:
    return json.dumps(
        {
            "expr": r.expr_text,
            "reward": r.reward,
            "iteration": r.iteration,
            "positive_rate": r.positive_rate,
            "best_epsilon": r.best_epsilon,
            "val_metric": r.val_metric,
            "test_metric": r.test_metric,
        },
        sort_keys=True,
    )


def _record_from_json(line: str) -> sr.CandidateRecord:
    d = json.loads(line)
    return sr.CandidateRecord(
        d["expr"], d["reward"], d["iteration"], d["positive_rate"],
        d["best_epsilon"], d["val_metric"], d["test_metric"],
    )


def write_ledger(path: str, records) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(_record_to_json(r) + "\n")
    os.replace(tmp, path)


def read_ledger(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        return [_record_from_json(line) for line in fh if line.strip()]


def cmd_search(cfg: RunConfig, out=None) -> int:
    out = out if out is not None else sys.stdout
    data = load_dataset(cfg)
    scfg = _search_config(cfg)
    out_dir = cfg.out_dir()
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, "search", os.path.join(out_dir, "config.echo"))
    ledger_path = os.path.join(out_dir, "ledger.jsonl")
    model_ckpt = os.path.join(out_dir, "model.ckpt")
    policy_ckpt = os.path.join(out_dir, "policy.ckpt")
    log_path = os.path.join(out_dir, "run_log.txt")

    resumed = None
    if os.path.exists(ledger_path) and os.path.exists(model_ckpt):
        resumed = read_ledger(ledger_path)
    if resumed is None:
        model = rm.init_model(cfg.model, data.n_users, data.n_items, d=cfg.dim, seed=cfg.seed)
        policy = ctl.init_policy(m=cfg.rounds, seed=cfg.seed + 1)
        rng = np.random.default_rng(cfg.seed + 2)
        with open(log_path, "w", encoding="utf-8") as log:
            def on_iteration(entry):
                log.write(
                    "iteration={iteration} reward={reward!r} promoted={promoted} "
                    "val_metric={val_metric!r} samples={samples} expr={expr}\n".format(**entry)
                )
            result = sr.search_phase(scfg, data, model, policy, rng, on_iteration=on_iteration)
        rm.save_model(result.model, model_ckpt)
        ctl.save_policy(policy, policy_ckpt)
        records = result.records
        write_ledger(ledger_path, records)
        out.write(f"phase1_iterations={result.iterations}\n")
        out.write(f"phase1_samples={result.samples}\n")
        out.write(f"phase1_train_invocations={result.train_invocations}\n")
    else:
        records = resumed
        out.write("phase1_resumed=true\n")

    # phase II over unique expressions, first-seen order
    unique: list[sr.CandidateRecord] = []
    seen = {}
    for r in records:
        if r.expr_text not in seen:
            seen[r.expr_text] = r
            unique.append(r)
    safe = ex.SafeMathConfig(xi=scfg.xi, epsilon=cfg.epsilon)
    for idx, r in enumerate(unique):
        if r.positive_rate is None:
            rate_rng = np.random.default_rng((cfg.seed + 3) * 100003 + idx)
            r.positive_rate = sr.validation_check(
                ex.parse(r.expr_text), cfg.pairs, rate_rng, safe
            )
    for r in records:  # propagate to duplicate records of the same expression
        r.positive_rate = seen[r.expr_text].positive_rate
    write_ledger(ledger_path, records)
    survivors = [r for r in unique if r.positive_rate >= cfg.threshold]
    out.write(f"phase1_records={len(records)}\n")
    out.write(f"phase2_unique={len(unique)}\n")
    out.write(f"phase2_survivors={len(survivors)}\n")
    if not survivors:
        out.write("selected_loss=none\n")
        raise NoCandidateError("no candidate passed the validation check")

    needs_phase3 = any(r.val_metric is None for r in survivors)
    if needs_phase3:
        eff = sr.effectiveness_test(
            survivors, data, cfg.model, scfg, cfg.task, cfg.seed + 4, jobs=cfg.jobs
        )
        best = eff.best
        for r in records:
            src = seen[r.expr_text]
            r.best_epsilon, r.val_metric, r.test_metric = (
                src.best_epsilon, src.val_metric, src.test_metric,
            )
        write_ledger(ledger_path, records)
    else:
        higher = cfg.task == "classification"
        best = (max if higher else min)(survivors, key=lambda r: r.val_metric)
    with open(os.path.join(out_dir, "selected_loss.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# epsilon={best.best_epsilon!r} val_metric={best.val_metric!r}\n")
        fh.write(best.expr_text + "\n")
    out.write(f"selected_loss={best.expr_text}\n")
    out.write(f"selected_epsilon={best.best_epsilon!r}\n")
    out.write(f"selected_val_metric={best.val_metric!r}\n")
    out.write(f"selected_test_metric={best.test_metric!r}\n")
    return 0


def cmd_check(cfg: RunConfig, out=None) -> int:
    out = out if out is not None else sys.stdout
    if not cfg.loss:
        raise UsageError("--loss is required (path to a loss-list file)")
    if not os.path.exists(cfg.loss):
        raise UsageError(f"--loss: no such file: {cfg.loss}")
    out_dir = cfg.out_dir()
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, "check", os.path.join(out_dir, "config.echo"))
    safe = ex.SafeMathConfig(epsilon=max(cfg.epsilon, 1e-6))
    with open(cfg.loss, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    idx = 0
    for line in lines:
        if not line or line.startswith("#"):
            continue
        loss = zoo.get_loss(line)
        rng = np.random.default_rng((cfg.seed + 3) * 100003 + idx)
        rate = sr.validation_check(loss, cfg.pairs, rng, safe)
        verdict = "pass" if rate >= cfg.threshold else "fail"
        out.write(f"loss={line} rate={rate:.4f} result={verdict}\n")
        idx += 1
    return 0


def _resolve_train_loss(raw: str) -> ex.LossExpr:
    text = raw.strip()
    if text.startswith("("):
        return ex.parse(text)
    name = text.lower()
    if name not in zoo.ZOO:
        raise UsageError(
            f"unknown loss {raw!r}; valid zoo names: {', '.join(zoo.zoo_names())}"
        )
    return zoo.get_loss(name)


def cmd_train(cfg: RunConfig, out=None) -> int:
    out = out if out is not None else sys.stdout
    loss = _resolve_train_loss(cfg.loss)
    data = load_dataset(cfg)
    scfg = _search_config(cfg)
    out_dir = cfg.out_dir()
    os.makedirs(out_dir, exist_ok=True)
    echo_config(cfg, "train", os.path.join(out_dir, "config.echo"))
    result = sr.train_to_convergence(
        data, cfg.model, loss, cfg.epsilon, scfg, cfg.task, cfg.seed, d=cfg.dim
    )
    lines = [
        f"loss={result.expr_text}",
        f"epsilon={result.epsilon!r}",
        f"best_epoch={result.best_epoch}",
        f"epochs_run={result.epochs_run}",
    ]
    for name, value in result.val_report.items():
        lines.append(f"val_{name}={value:.6f}")
    for name, value in result.test_report.items():
        lines.append(f"test_{name}={value:.6f}")
    report = "\n".join(lines) + "\n"
    out.write(report)
    with open(os.path.join(out_dir, "train_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lossforge",
        description="Search, check and train symbolic loss functions for recommenders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, descr in (
        ("search", "run the three-phase loss search end to end"),
        ("check", "validation-check the expressions in a loss-list file"),
        ("train", "train one model under a zoo loss or explicit expression"),
    ):
        p = sub.add_parser(name, help=descr)
        p.add_argument("--config", help="flat key=value config file; flags override")
        p.add_argument("--dataset", help="ratings file, or synth spec for --format synth")
        p.add_argument("--format", choices=("ml100k", "csv", "synth"))
        p.add_argument("--model", choices=("mf", "mlp"))
        p.add_argument("--task", choices=("classification", "regression"))
        p.add_argument("--loss", help="zoo name or expression (train); loss-list file (check)")
        p.add_argument("--epsilon", type=float, help="smoothing coefficient")
        p.add_argument("--eta", type=float, help="reward-filter tolerance")
        p.add_argument("--delta", type=float, help="proxy-test threshold")
        p.add_argument("--rounds", type=int, help="expression rounds m")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help="phase-III parallel workers")
        p.add_argument("--out", help="output directory (default $LOSSFORGE_OUT)")
        p.add_argument("--max-iters", dest="max_iters", type=int)
        p.add_argument("--stall", type=int, help="stall budget (iterations)")
        p.add_argument("--max-samples", dest="max_samples", type=int)
        p.add_argument("--probe", type=int, help="proxy batch size |B|")
        p.add_argument("--pairs", type=int, help="validation-check pairs")
        p.add_argument("--threshold", type=float, help="validation-check threshold")
        p.add_argument("--dim", type=int, help="embedding dimension")
        p.add_argument("--lr", type=float, help="recommender learning rate")
        p.add_argument("--l2", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "check":
            return cmd_check(cfg)
        return cmd_train(cfg)
    except NoCandidateError as e:
        print(f"lossforge: {e}", file=sys.stderr)
        return 3
    except (UsageError, ex.ExprError, dat.DataError, ValueError) as e:
        print(f"lossforge: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
