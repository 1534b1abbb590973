"""``clutterlab`` command line: suite generation, training, evaluation, metric
inspection and the random-versus-learned comparison table."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import nn
from .affordance import SurrogateParams, compute_affordance, load_affordance_png
from .agent import (EvalStats, GreedyPolicy, TrainConfig, curves_csv, episode_seed, evaluate,
                    random_policy, run_episode, train)
from .metric import MetricParams, compute_metric
from .scene import PATTERNS, SceneError, generate_scene, load_scene, render, save_scene

log = logging.getLogger("clutterlab")

TABLE_COLUMNS = ("operation_times", "phi_increment", "success_rate")

DEFAULT_CONFIG = {
    # 3 seeds x 360 episodes stay inside an hour on one core, evaluation included
    "train": {**asdict(TrainConfig()), "episodes": 360, "train_every": 2, "augment": True},
    "metric": asdict(MetricParams()),
    "surrogate": asdict(SurrogateParams()),
    # evaluation suite: per_pattern scenes of each pattern
    "suite": {"patterns": list(PATTERNS), "per_pattern": 25, "n_objects": 11, "seed": 1},
    # training scenes are drawn from disjoint seeds
    "train_suite": {"patterns": ["gathering", "covering", "tilting"], "per_pattern": 40,
                    "n_objects": 11, "seed": 2},
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override in place; values parse as JSON."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    *parents, leaf = key.split(".")
    node = cfg
    for part in parents:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section {part!r} in {key!r}")
        node = node[part]
    if leaf not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = _parse_value(raw)


def _merge(base: dict, extra: dict, where: str = "") -> None:
    for k, v in extra.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config section {where + k!r} must be an object")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def resolve_config(path=None, overrides: Sequence[str] = (), seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        _merge(cfg, user)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["train"]["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        train_cfg(cfg)
        metric_params(cfg)
        surrogate_params(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    for name in ("suite", "train_suite"):
        s = cfg[name]
        if not s["patterns"] or any(p not in PATTERNS for p in s["patterns"]):
            raise ConfigError(f"{name}.patterns must be a non-empty subset of {PATTERNS}")
        if int(s["per_pattern"]) < 1:
            raise ConfigError(f"{name}.per_pattern must be >= 1")


def train_cfg(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def metric_params(cfg: dict) -> MetricParams:
    return MetricParams(**cfg["metric"])


def surrogate_params(cfg: dict) -> SurrogateParams:
    return SurrogateParams(**cfg["surrogate"])


def suite_entries(spec: dict) -> list[tuple[str, int]]:
    """(pattern, scene seed) for every scene of a suite definition."""
    base = int(spec["seed"]) * 1_000_000
    return [(p, base + 10_000 * PATTERNS.index(p) + k)
            for p in spec["patterns"] for k in range(int(spec["per_pattern"]))]


def build_suite(spec: dict):
    return [generate_scene(p, int(spec["n_objects"]), s) for p, s in suite_entries(spec)]


def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def workers() -> int:
    try:
        return max(1, int(os.environ.get("CLUTTERLAB_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------- output

def prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    return out


def write_manifest(out: Path, command: str, cfg: dict, outputs: Sequence[str], **extra) -> Path:
    manifest = {"command": command, "code_version": code_version(), "config": cfg,
                "outputs": sorted(outputs), **extra}
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def line_chart_svg(series: dict, title: str, xlabel: str, ylabel: str,
                   width: int = 480, height: int = 300) -> str:
    """Standalone SVG line chart; ``series`` maps a label to (x, y) points."""
    pts = [p for s in series.values() for p in s]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(min(ys), 0.0), max(max(ys), 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    left, right, top, bottom = 50, 110, 30, 40
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{title}</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
             f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{xlabel}</text>',
             f'<text x="12" y="{top + ph / 2:.1f}" text-anchor="middle" '
             f'transform="rotate(-90 12 {top + ph / 2:.1f})">{ylabel}</text>']
    for v in (y0, (y0 + y1) / 2, y1):
        parts.append(f'<text x="{left - 4}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for v in (x0, x1):
        parts.append(f'<text x="{sx(v):.1f}" y="{top + ph + 14}" text-anchor="middle">{v:g}</text>')
    for k, (label, s) in enumerate(series.items()):
        c = colors[k % len(colors)]
        if s:
            path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
            parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"/>')
        ly = top + 12 + 16 * k
        parts.append(f'<line x1="{left + pw + 8}" y1="{ly}" x2="{left + pw + 24}" y2="{ly}" '
                     f'stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 28}" y="{ly + 4}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def stats_rows(rows: dict) -> list[list[str]]:
    out = [["policy", *TABLE_COLUMNS]]
    for name, st in rows.items():
        out.append([name, f"{st.avg_operations:.4f}", f"{st.avg_phi_increment_per_push:.6f}",
                    f"{st.test_success_rate:.4f}"])
    return out


def table_csv(rows: dict) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(stats_rows(rows))
    return buf.getvalue()


def table_text(rows: dict) -> str:
    cells = stats_rows(rows)
    widths = [max(len(r[i]) for r in cells) for i in range(len(cells[0]))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) + "\n" for r in cells)


# ---------------------------------------------------------------- commands

def cmd_gen_suite(cfg: dict, out: Path) -> list[str]:
    scenes = out / "scenes"
    scenes.mkdir(exist_ok=True)
    lines = ["file,pattern,seed"]
    written = []
    for k, (pattern, seed) in enumerate(suite_entries(cfg["suite"])):
        name = f"scenes/{k:03d}_{pattern}.json"
        save_scene(generate_scene(pattern, int(cfg["suite"]["n_objects"]), seed), out / name)
        lines.append(f"{name},{pattern},{seed}")
        written.append(name)
    (out / "suite.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return written + ["suite.csv"]


def cmd_train(cfg: dict, out: Path) -> list[str]:
    tc = train_cfg(cfg)
    suite = build_suite(cfg["train_suite"])

    def progress(p):
        if (p.episode + 1) % 50 == 0:
            log.info("episode %d  reward100 %.3f  success100 %.2f  eps %.3f",
                     p.episode + 1, p.mean_reward_100, p.success_rate_100, p.epsilon)

    res = train(tc, suite, metric_params(cfg), surrogate_params(cfg), progress)
    nn.save_checkpoint(res.net, out / "checkpoint.bin")
    (out / "curves.csv").write_text(curves_csv(res.curves), encoding="utf-8")
    svg = line_chart_svg({"mean reward (100 ep)": [(c.episode, c.mean_reward_100) for c in res.curves],
                          "success rate (100 ep)": [(c.episode, c.success_rate_100)
                                                    for c in res.curves]},
                         "training curves", "episode", "value")
    (out / "curves.svg").write_text(svg, encoding="utf-8")
    log.info("trained %d episodes in %.0f s; %d parameters per head", tc.episodes, res.seconds,
             nn.head_param_count())
    return ["checkpoint.bin", "curves.csv", "curves.svg"]


def _policy(checkpoint, use_random: bool):
    if use_random:
        return "random", random_policy
    if checkpoint is None:
        raise ConfigError("eval needs --checkpoint PATH or --random")
    return "learned", GreedyPolicy(nn.load_checkpoint(checkpoint), 0.0)


def _evaluate(cfg: dict, policy, suite) -> EvalStats:
    return evaluate(policy, suite, train_cfg(cfg), metric_params(cfg), surrogate_params(cfg),
                    workers=workers())


def cmd_eval(cfg: dict, out: Path, checkpoint=None, use_random: bool = False) -> list[str]:
    name, policy = _policy(checkpoint, use_random)
    stats = _evaluate(cfg, policy, build_suite(cfg["suite"]))
    rows = {name: stats}
    (out / "eval.csv").write_text(table_csv(rows), encoding="utf-8")
    print(table_text(rows), end="")
    return ["eval.csv"]


def _phi_trace(cfg: dict, scene, policy) -> list[tuple[int, float]]:
    ep = run_episode(scene, policy, train_cfg(cfg), episode_seed(train_cfg(cfg).seed, 0),
                     metric_params(cfg), surrogate_params(cfg))
    trace, ops = [], 0
    for r in ep.records:
        trace.append((ops, r["phi"]))
        if r["action"] is not None:
            ops += 1
    return trace


def cmd_compare(cfg: dict, out: Path, checkpoint) -> list[str]:
    if checkpoint is None:
        raise ConfigError("compare needs --checkpoint PATH")
    learned = GreedyPolicy(nn.load_checkpoint(checkpoint), 0.0)
    suite = build_suite(cfg["suite"])
    rows = {"random": _evaluate(cfg, random_policy, suite),
            "learned": _evaluate(cfg, learned, suite)}
    (out / "compare.csv").write_text(table_csv(rows), encoding="utf-8")
    (out / "compare.txt").write_text(table_text(rows), encoding="utf-8")
    print(table_text(rows), end="")
    # Phi against operations on the first scene that starts below the lift threshold
    tc, mp, sp = train_cfg(cfg), metric_params(cfg), surrogate_params(cfg)
    scene = next((s for s in suite
                  if compute_metric(compute_affordance(render(s), sp), mp).phi <= tc.phi_threshold),
                 suite[0])
    svg = line_chart_svg({"random": _phi_trace(cfg, scene, random_policy),
                          "learned": _phi_trace(cfg, scene, learned)},
                         "metric against operations", "operations", "phi")
    (out / "phi_vs_operations.svg").write_text(svg, encoding="utf-8")
    return ["compare.csv", "compare.txt", "phi_vs_operations.svg"]


def cmd_metric(cfg: dict, out: Path, source) -> list[str]:
    source = Path(source)
    if not source.exists():
        raise FileNotFoundError(f"no such file: {source}")
    if source.suffix.lower() == ".png":
        aff = load_affordance_png(source)
    else:
        aff = compute_affordance(render(load_scene(source)), surrogate_params(cfg))
    report = compute_metric(aff, metric_params(cfg))
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n"
    (out / "metric.json").write_text(text, encoding="utf-8")
    print(text, end="")
    return ["metric.json"]


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override train.seed")
    common.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config entry, e.g. train.episodes=100")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="clutterlab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-suite", parents=[common], help="write the evaluation scene suite")
    sub.add_parser("train", parents=[common], help="train the Q-network")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a policy on the suite")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--random", action="store_true", help="uniform random pushes")
    me = sub.add_parser("metric", parents=[common], help="score an affordance PNG or scene JSON")
    me.add_argument("source", type=Path)
    co = sub.add_parser("compare", parents=[common], help="random against learned table")
    co.add_argument("--checkpoint", type=Path, required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        out = prepare_out(args.out)
        if args.command == "gen-suite":
            written = cmd_gen_suite(cfg, out)
        elif args.command == "train":
            written = cmd_train(cfg, out)
        elif args.command == "eval":
            written = cmd_eval(cfg, out, args.checkpoint, args.random)
        elif args.command == "metric":
            written = cmd_metric(cfg, out, args.source)
        else:
            written = cmd_compare(cfg, out, args.checkpoint)
        missing = [w for w in written if not (out / w).is_file()]
        if missing:
            raise OSError(f"outputs not written: {missing}")
        write_manifest(out, args.command, cfg, written,
                       checkpoint=str(getattr(args, "checkpoint", None) or ""))
    except (ConfigError, SceneError, nn.CheckpointError, OSError, ValueError) as exc:
        print(f"clutterlab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
