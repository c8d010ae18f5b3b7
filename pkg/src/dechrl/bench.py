"""Experiment harness: variants, ASR/ADC/KL metrics, seed sweeps and the command line."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import delaydist as dd
from .orchestrator import VARIANTS, RunConfig, RunResult, build_spec, kl_rows, run, true_delays
from .world import ConfigError, TaskSpec

WINDOW = 100

_ALIASES = {
    "dechrl": "dechrl",
    "dechrlnoemp": "dechrl_noemp",
    "dechrlemp": "dechrl_noemp",
    "priordelaydistribution": "prior_delay_distribution",
    "priorfixed": "prior_fixed",
    "prioruniform": "prior_uniform",
    "stateaugmentation": "state_augmentation",
    "simplified": "simplified",
    "simplifieddechrl": "simplified",
}


def parse_variant(name: str) -> str:
    """Canonical variant name; accepts CamelCase, snake_case and case variations."""
    key = name.replace("_", "").replace("-", "").replace("/", "").lower()
    if key not in _ALIASES:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return _ALIASES[key]


def _last(rows: Sequence, window: int) -> list:
    if not rows:
        raise ValueError("no evaluation rows")
    if len(rows) < window:
        warnings.warn(f"only {len(rows)} evaluation rows; averaging over all of them", stacklevel=3)
    return list(rows[-window:])


def asr(rows: Sequence[Mapping], window: int = WINDOW) -> float:
    """Mean success flag over the last ``window`` evaluation rows."""
    return float(np.mean([float(r["success"]) for r in _last(rows, window)]))


def adc(rows: Sequence[Mapping], window: int = WINDOW) -> float:
    """Mean remaining-subgoal count over the last ``window`` evaluation rows."""
    return float(np.mean([float(r["adc"]) for r in _last(rows, window)]))


def kl_per_edge(spec: TaskSpec, beta: np.ndarray, tau_max: int) -> dict:
    """KL(true || learned) in nats for each effect that has a rule."""
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    if beta.shape != (spec.n_vars, tau_max):
        raise ValueError(f"delay logits have shape {beta.shape}, expected {(spec.n_vars, tau_max)}")
    kl = kl_rows(true_delays(spec, tau_max), dd.delay_distribution(beta))
    effects = sorted({r.effect for r in spec.rules})
    return {spec.variables[i]: float(kl[i]) for i in effects}


def kl_divergence(p: Sequence[float], q: Sequence[float], eps: float = 1e-9) -> float:
    return float(kl_rows(np.atleast_2d(np.asarray(p, float)), np.atleast_2d(np.asarray(q, float)), eps)[0])


def read_metrics(path: str | Path) -> list:
    """Rows of a metrics.csv file, skipping the version comment."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# summaries ------------------------------------------------------------------

def summarize(result: RunResult, variant: str, seed: int) -> dict:
    rows = result.metrics
    row = {"variant": variant, "seed": seed, "status": result.status,
           "asr": asr(rows), "adc": adc(rows), "rounds": len(result.rounds),
           "episodes": result.rounds[-1].episodes if result.rounds else 0}
    row["kl_median"] = "" if result.kl is None else float(np.median(result.kl))
    for name, value in result.per_subgoal.items():
        row[f"success_{name}"] = value
    return row


def format_table(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def mean_row(rows: Sequence[Mapping]) -> dict:
    out: dict = {}
    for c in rows[0]:
        vals = [r[c] for r in rows]
        if c == "seed":
            out[c] = "mean"
        elif all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals):
            out[c] = float(np.mean(vals))
        else:
            out[c] = vals[0] if len(set(map(str, vals))) == 1 else ""
    return out


def _write_csv(path: Path, rows: Sequence[Mapping]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    path.write_text(buf.getvalue())


# command line ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dechrl", description=__doc__)
    p.add_argument("--task", default="GetSilverore", help="built-in task name")
    p.add_argument("--tau-max", type=int, default=4)
    p.add_argument("--sigma-delay", type=float, default=0.4)
    p.add_argument("--kappa", type=int, default=None, help="delay stride (simplified variant only)")
    p.add_argument("--variant", default="dechrl", help=f"one of {', '.join(VARIANTS)}")
    p.add_argument("--seeds", type=int, default=1, help="run seeds 0..N-1")
    p.add_argument("--episodes", type=int, default=None, help="episode budget per seed")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--config", default=None, help="JSON file overriding run settings")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace, seed: int) -> RunConfig:
    fields = {f.name for f in dataclasses.fields(RunConfig)}
    overrides: dict = {}
    if args.config:
        overrides = json.loads(Path(args.config).read_text())
        unknown = set(overrides) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    params = dict(overrides)
    params.update(task=args.task, tau_max=args.tau_max, sigma_delay=args.sigma_delay,
                  variant=parse_variant(args.variant), kappa=args.kappa, seed=seed)
    if args.episodes is not None:
        params["episodes"] = args.episodes
    return RunConfig(**params)


def run_experiment(args: argparse.Namespace) -> list:
    """One run directory per seed plus summary.csv and a printed table."""
    if args.seeds < 1:
        raise ConfigError("--seeds must be at least 1")
    out = Path(args.out)
    rows = []
    for seed in range(args.seeds):
        cfg = config_from_args(args, seed)
        tag = cfg.variant if cfg.kappa is None else f"{cfg.variant}_k{cfg.kappa}"
        task = build_spec(cfg).name
        result = run(cfg, out / f"{task}_t{cfg.tau_max}_s{cfg.sigma_delay:g}_{tag}_seed{seed}")
        rows.append(summarize(result, cfg.variant, seed))
    table = rows + ([mean_row(rows)] if len(rows) > 1 else [])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "summary.csv", table)
    print(format_table(table))
    return rows


def main(argv: Iterable[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(None if argv is None else list(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.kappa is not None and parse_variant(args.variant) != "simplified":
            parser.error("--kappa requires --variant simplified")
        run_experiment(args)
    except ConfigError as exc:
        parser.error(str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
