"""Command-line benchmark harness.

Subcommands:

  profile   score every head at the probe step; write the score matrix as
            CSV and tensor container plus a JSON summary with the TopN set
  run       execute a full session in one mode and write the run report
  verify    run the property suites (greedy / equivalence / cache / all)
  sweep     time warm attention steps across context lengths or dummy
            ratios and write a CSV of counters and wall times

Exit codes: 0 success, 1 verification failure, 2 bad configuration,
3 I/O failure. All randomness flows from the single top-level seed in the
config (or --seed), which is echoed in every report.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

from . import container, engine, profiler, rng, verify
from .config import SessionConfig
from .errors import ConfigError, DummyForcingError
from .head_programming import greedy_classify
from .kv_cache import cache_stats
from .profiler import Probe
from .scenario import (
    PlantedSpec,
    ToyModelSpec,
    build_toy_model,
    cycle_labels,
    planted_stream,
)

SCHEMA_VERSION = 1

_TOP_KEYS = {"schema_version", "seed", "mode", "model", "session", "timing", "sweep"}
_MODEL_KEYS = {"kind", "weight_scale", "labels", "margin", "row_noise"}
_SESSION_KEYS = {
    "num_layers",
    "num_heads",
    "head_dim",
    "HW",
    "window_len",
    "ar_steps",
    "denoise_steps",
    "sink_frame",
    "dummy_count",
    "dummy_fraction",
    "packing",
    "merged_window",
    "context_extension",
    "probe_ar_step",
    "probe_denoise_step",
    "subsample_ratio",
}
_TIMING_KEYS = {"reps"}
_SWEEP_KEYS = {"context_len", "dummy_ratio", "HW"}


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} fields: {sorted(unknown)}")


class RunConfig:
    """Validated contents of a benchmark config file."""

    def __init__(self, raw: dict, seed_override: int | None = None):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _reject_unknown(raw, _TOP_KEYS, "top-level")
        if raw.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(
                f"schema_version must be {SCHEMA_VERSION}, got {raw.get('schema_version')!r}"
            )
        if "seed" not in raw or not isinstance(raw["seed"], int):
            raise ConfigError("config needs an integer 'seed'")
        self.seed = seed_override if seed_override is not None else raw["seed"]
        self.mode = raw.get("mode", "baseline")
        if self.mode not in engine.MODES:
            raise ConfigError(f"mode must be one of {engine.MODES}")

        session = dict(raw.get("session") or {})
        _reject_unknown(session, _SESSION_KEYS, "session")
        self.session = self._session_config(session)

        model = dict(raw.get("model") or {"kind": "toy"})
        _reject_unknown(model, _MODEL_KEYS, "model")
        self.model_section = model
        self.kind = model.get("kind", "toy")
        if self.kind not in ("toy", "planted"):
            raise ConfigError(f"model kind must be 'toy' or 'planted', got {self.kind!r}")

        timing = dict(raw.get("timing") or {})
        _reject_unknown(timing, _TIMING_KEYS, "timing")
        self.reps = int(timing.get("reps", 5))
        if self.reps < 1:
            raise ConfigError("timing.reps must be >= 1")

        sweep = dict(raw.get("sweep") or {})
        _reject_unknown(sweep, _SWEEP_KEYS, "sweep")
        self.sweep = sweep
        self.raw = raw

    def _session_config(self, section: dict) -> SessionConfig:
        required = ("num_layers", "num_heads", "head_dim", "HW", "window_len", "ar_steps")
        missing = [k for k in required if k not in section]
        if missing:
            raise ConfigError(f"session is missing fields: {missing}")
        section = dict(section)
        fraction = section.pop("dummy_fraction", None)
        packing = section.pop("packing", True)
        if fraction is not None:
            if "dummy_count" in section:
                raise ConfigError("set either dummy_count or dummy_fraction, not both")
            total = section["num_layers"] * section["num_heads"]
            section["dummy_count"] = int(total * float(fraction))
        try:
            return SessionConfig(packing_enabled=bool(packing), **section)
        except TypeError as e:
            raise ConfigError(f"bad session section: {e}") from e

    def build_model(self, config: SessionConfig | None = None):
        cfg = config or self.session
        if self.kind == "toy":
            spec = ToyModelSpec(
                num_layers=cfg.num_layers,
                num_heads=cfg.num_heads,
                head_dim=cfg.head_dim,
                HW=cfg.HW,
                denoise_steps=cfg.denoise_steps,
                seed=rng.derive(self.seed, "toy-model"),
                weight_scale=float(self.model_section.get("weight_scale", 1.0)),
            )
            return build_toy_model(spec)
        labels = self.model_section.get("labels")
        if labels is None:
            raise ConfigError("planted model needs 'labels'")
        if isinstance(labels, dict):
            labels = cycle_labels({k: int(v) for k, v in labels.items()})
        spec = PlantedSpec(
            labels=tuple(labels),
            margin=float(self.model_section.get("margin", 0.0)),
            noise_seed=rng.derive(self.seed, "planted-stream"),
            row_noise=float(self.model_section.get("row_noise", 0.05)),
        )
        return planted_stream(spec, cfg)


def load_config(path: str, seed_override: int | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return RunConfig(raw, seed_override)


def _write_json(path: str, payload: dict) -> None:
    data = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    container.write_atomic(path, data.encode("utf-8"))


def _write_csv(path: str, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    container.write_atomic(path, buf.getvalue().encode("utf-8"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_profile(config_path: str, out_dir: str, seed: int | None = None) -> int:
    cfg = load_config(config_path, seed)
    session = engine.Session(cfg.build_model(), cfg.session, "baseline")
    table = profiler.global_scores(session)
    probe = Probe(cfg.session.probe_ar_step, cfg.session.probe_denoise_step)
    top = profiler.top_n_current(table, cfg.session.dummy_count)
    assignment, objective = greedy_classify(table, cfg.session.dummy_count)

    os.makedirs(out_dir, exist_ok=True)
    rows = [
        [
            i // cfg.session.num_heads,
            i % cfg.session.num_heads,
            f"{table.scores[i, 0]:.17g}",
            f"{table.scores[i, 1]:.17g}",
            f"{table.scores[i, 2]:.17g}",
        ]
        for i in range(table.total_heads)
    ]
    _write_csv(
        os.path.join(out_dir, "scores.csv"),
        ["layer", "head", "alpha_sink", "alpha_neighbor", "alpha_current"],
        rows,
    )
    container.save_tensors(
        os.path.join(out_dir, "scores.dfc"), {"scores": table.scores}
    )
    summary = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "probe": {"ar_step": probe.ar_step, "denoise_step": probe.denoise_step},
        "subsample_ratio": cfg.session.subsample_ratio,
        "top_n_current": [[l, h] for l, h in sorted(top.entries)],
        "n": top.N,
        "greedy": {
            "objective": objective,
            "counts": assignment.counts(),
            "heads": assignment.to_records(cfg.session.num_heads),
        },
        "config": cfg.session.to_dict(),
    }
    _write_json(os.path.join(out_dir, "profile.json"), summary)
    return 0


def cmd_run(config_path: str, mode: str | None, out_path: str, seed: int | None = None) -> int:
    cfg = load_config(config_path, seed)
    run_mode = mode or cfg.mode
    if run_mode not in engine.MODES:
        raise ConfigError(f"mode must be one of {engine.MODES}")
    _, report = engine.generate_session(cfg.build_model(), cfg.session, run_mode)
    payload = {"schema_version": SCHEMA_VERSION, "seed": cfg.seed, **report.to_dict()}
    _write_json(out_path, payload)
    return 0


def cmd_verify(suite: str) -> int:
    names = list(verify.SUITES) if suite == "all" else [suite]
    if any(n not in verify.SUITES for n in names):
        raise ConfigError(f"suite must be one of {list(verify.SUITES) + ['all']}")
    results = verify.run_suites(names)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def _sweep_session(cfg: RunConfig, session_cfg: SessionConfig, mode: str) -> engine.Session:
    """Warm session ready to time its next step under ``mode``."""
    model = cfg.build_model(session_cfg)
    session = engine.Session(model, session_cfg, mode)
    session.run()
    return session


def _axis_configs(cfg: RunConfig, axis: str) -> list[tuple[float, SessionConfig]]:
    base = cfg.session.to_dict()
    if cfg.sweep.get("HW"):
        base["HW"] = int(cfg.sweep["HW"])
    out = []
    if axis == "context_len":
        values = cfg.sweep.get("context_len")
        if not values:
            raise ConfigError("sweep.context_len missing from config")
        for v in values:
            v = int(v)
            window = v - 1
            if window < 2:
                raise ConfigError(f"context_len {v} too small (needs >= 3 frames)")
            if window <= base["probe_ar_step"]:
                raise ConfigError(
                    f"context_len {v} leaves no room for probe step {base['probe_ar_step']}"
                )
            d = dict(base, window_len=window, ar_steps=window)
            out.append((float(v), SessionConfig(**d)))
        return out
    if axis == "dummy_ratio":
        values = cfg.sweep.get("dummy_ratio")
        if not values:
            raise ConfigError("sweep.dummy_ratio missing from config")
        if base["probe_ar_step"] >= base["window_len"]:
            raise ConfigError(
                "dummy_ratio sweep needs probe_ar_step < window_len so heads "
                "are classified before the timed warm step"
            )
        total = base["num_layers"] * base["num_heads"]
        for r in values:
            r = float(r)
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"dummy_ratio {r} outside [0, 1]")
            d = dict(base, dummy_count=int(round(r * total)), ar_steps=base["window_len"])
            out.append((r, SessionConfig(**d)))
        return out
    raise ConfigError(f"unknown sweep axis {axis!r}")


def cmd_sweep(config_path: str, axis: str, out_csv: str, seed: int | None = None, reps: int | None = None) -> int:
    cfg = load_config(config_path, seed)
    reps = reps or cfg.reps
    rows = []
    for value, session_cfg in _axis_configs(cfg, axis):
        history = session_cfg.ar_steps  # frames cached before the timed step
        for mode in engine.MODES:
            session = _sweep_session(cfg, session_cfg, mode)
            timing = session.time_step(reps=reps)
            expected = engine.expected_step_macs(
                session_cfg, session._effective_mode(), history, session.assignment
            )
            if session.assignment is not None:
                ratio = cache_stats(session.assignment, session_cfg).reduction_ratio
            else:
                ratio = 1.0
            rows.append(
                [
                    axis,
                    f"{value:g}",
                    mode,
                    timing["key_token_macs"],
                    expected,
                    sum(timing["kernel_calls_per_layer"]),
                    timing["wall_time_ns_median"],
                    f"{ratio:.10g}",
                ]
            )
    _write_csv(
        out_csv,
        [
            "axis",
            "axis_value",
            "mode",
            "key_token_macs",
            "expected_key_token_macs",
            "kernel_calls",
            "wall_time_ns_median",
            "cache_reduction_ratio",
        ],
        rows,
    )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dummy-forcing",
        description="Profile, classify, and benchmark per-head KV-cache policies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="score heads and write the score matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("run", help="run a session and write the report JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=engine.MODES, default=None)
    p.add_argument("--out", required=True, help="report path")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument(
        "--suite", choices=list(verify.SUITES) + ["all"], default="all"
    )

    p = sub.add_parser("sweep", help="time warm steps along an axis, write CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", choices=["context_len", "dummy_ratio"], required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "profile":
            return cmd_profile(args.config, args.out, args.seed)
        if args.command == "run":
            return cmd_run(args.config, args.mode, args.out, args.seed)
        if args.command == "verify":
            return cmd_verify(args.suite)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.axis, args.out, args.seed, args.reps)
        raise ConfigError(f"unknown command {args.command!r}")
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, DummyForcingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
