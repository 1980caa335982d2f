"""Command-line driver: world/dataset generation, training, evaluation,
ablation suites, checkpoint inspection, and per-step trace export.

Exit codes: 0 success, 1 usage, 2 bad input data or config, 3 runtime
failure. Diagnostics (including the resolved-config echo) go to stderr;
machine-readable output goes to files or stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .graph import GraphError, save_world
from .harness import (
    DatasetWorldMismatch,
    TrainConfig,
    _svg_line_plot,
    all_flag_combinations,
    association_grid,
    ablation_report,
    drive,
    evaluate,
    k_grid,
    locating_grid,
    overall_grid,
    run_ablation_suite,
    spatial_grid,
    train,
    write_run_artifacts,
)
from .layers import CheckpointError
from .model import Agent, AgentConfig, LabelLengthMismatch
from .worldgen import (
    GenerationFailed,
    RouteFailed,
    WorldParams,
    build_records,
    generate_world,
    load_dataset,
    save_dataset,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

RESULTS_ENV = "BLOCKNAV_RESULTS_DIR"


class UsageError(Exception):
    """Bad flags or arguments; mapped to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; the contract wants 1
    def error(self, message):
        raise UsageError(message)


def _echo(kind: str, payload: dict) -> None:
    print(f"{kind}: {json.dumps(payload, sort_keys=True)}", file=sys.stderr)


def _out_dir(explicit: str | None, default_name: str) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(RESULTS_ENV, "results")) / default_name


def _grid_type(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 6x6, got {text!r}")


def _world_params(args) -> WorldParams:
    return WorldParams(
        seed=args.seed,
        grid_w=args.grid[0],
        grid_h=args.grid[1],
        edge_keep_prob=args.keep,
        landmark_vocab_size=args.landmarks,
        feature_noise_sigma=args.noise,
        d_v=args.dv,
        num_bins=args.bins,
    )


def _load_train_config(args) -> TrainConfig:
    """Precedence: explicit flags > config file > defaults."""
    if getattr(args, "config", None):
        tc = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        tc = TrainConfig()
    updates = {}
    for name in ("epochs", "batch_size", "lr", "seed", "grad_clip_norm"):
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "data", None):
        updates["train_path"] = args.data
    if getattr(args, "eval_data", None):
        updates["eval_path"] = args.eval_data
    if getattr(args, "k", None) is not None and not isinstance(args.k, list):
        agent = {**tc.agent.to_dict(), "K": int(args.k)}
        updates["agent"] = AgentConfig.from_dict(agent)
    if updates:
        tc = dataclasses.replace(tc, **updates)
    return tc


def _agent_hash(config: AgentConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------- commands


def cmd_gen_world(args) -> int:
    params = _world_params(args)
    _echo("resolved config", dataclasses.asdict(params))
    world = generate_world(params)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_world(world.graph, args.out)
    print(f"wrote {args.out}: {len(world.graph.nodes)} nodes", file=sys.stderr)
    return EXIT_OK


def cmd_gen_data(args) -> int:
    params = _world_params(args)
    _echo("resolved config", {**dataclasses.asdict(params), "count": args.count,
                              "min_blocks": args.min_blocks, "max_blocks": args.max_blocks,
                              "filler_prob": args.filler})
    world = generate_world(params)
    records = build_records(world, args.count, seed=args.seed,
                            min_blocks=args.min_blocks, max_blocks=args.max_blocks,
                            filler_prob=args.filler)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(records, [world], args.out)
    print(f"wrote {args.out}: {len(records)} episodes", file=sys.stderr)
    return EXIT_OK


def cmd_train(args) -> int:
    tc = _load_train_config(args)
    if not tc.train_path:
        raise ValueError("no training data: pass --data or set train_path in the config")
    _echo("resolved config", tc.to_dict())
    dataset = load_dataset(tc.train_path)
    agent, log = train(tc, dataset)
    evals = {"train": evaluate(agent, dataset, tc_mode=args.tc_mode)}
    if tc.eval_path:
        evals["eval"] = evaluate(agent, load_dataset(tc.eval_path), tc_mode=args.tc_mode)
    run_dir = _out_dir(args.out, f"run-{tc.config_hash()}-s{tc.seed}")
    write_run_artifacts(str(run_dir), tc, log, evals, agent, dataset)
    for split in sorted(evals):
        r = evals[split]
        print(json.dumps({"split": split, "tc": r.tc, "spd": r.spd, "sed": r.sed,
                          "episodes": len(r.rows)}, sort_keys=True))
    print(f"artifacts under {run_dir}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    _echo("resolved config", {"ckpt": args.ckpt, "data": args.data,
                              "split": args.split, "tc_mode": args.tc_mode})
    agent = Agent.load(args.ckpt)
    dataset = load_dataset(args.data)
    result = evaluate(agent, dataset, tc_mode=args.tc_mode)
    out = _out_dir(args.out, "eval")
    out.mkdir(parents=True, exist_ok=True)
    chash = _agent_hash(agent.config)
    lines = ["run_id,split,tc,spd,sed,seed,config_hash",
             f"{out.name},{args.split},{result.tc:.4f},{result.spd:.4f},"
             f"{result.sed:.4f},{args.seed},{chash}"]
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    print(json.dumps({"split": args.split, "tc": result.tc, "spd": result.spd,
                      "sed": result.sed, "episodes": len(result.rows)}, sort_keys=True))
    return EXIT_OK


GRID_BUILDERS = {
    "overall": overall_grid,
    "locating": locating_grid,
    "spatial": spatial_grid,
    "association": association_grid,
    "all": all_flag_combinations,
}


def cmd_ablate(args) -> int:
    tc = _load_train_config(args)
    if not tc.train_path:
        raise ValueError("no training data: pass --data or set train_path in the config")
    grid_name = args.ablate_grid or ("k" if args.k else "overall")
    if grid_name == "k":
        ks = tuple(args.k) if args.k else (1, 2, 3, 4, 5)
        grid = k_grid(tc.agent, ks=ks)
    else:
        grid = GRID_BUILDERS[grid_name](tc.agent)
    _echo("resolved config", {**tc.to_dict(), "grid": grid_name,
                              "rows": [n for n, _ in grid], "seeds": list(args.seeds)})
    train_ds = load_dataset(tc.train_path)
    eval_ds = load_dataset(tc.eval_path) if tc.eval_path else train_ds
    out = _out_dir(args.out, f"ablate-{grid_name}")
    out.mkdir(parents=True, exist_ok=True)
    table = run_ablation_suite(
        grid, tc, train_ds, eval_ds, seeds=tuple(args.seeds),
        out_dir=str(out), tc_mode=args.tc_mode,
        log_hook=lambda row: print(f"done: {row['name']}", file=sys.stderr))
    csv_text, md = ablation_report(table, f"{grid_name} ablation")
    (out / "ablation.csv").write_text(csv_text)
    (out / "ablation.md").write_text(md)
    print(md)
    print(f"artifacts under {out}", file=sys.stderr)
    return EXIT_OK


def cmd_inspect(args) -> int:
    agent = Agent.load(args.ckpt)
    print(agent.describe())
    return EXIT_OK


def _svg_heatmap(path: Path, matrix: np.ndarray, title: str,
                 xlabel: str, ylabel: str) -> None:
    """Grayscale cell grid; value 0 -> white, 1 -> near-black."""
    rows, cols = matrix.shape
    cell, ml, mt = 28, 70, 40
    width, height = ml + cols * cell + 20, mt + rows * cell + 50
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14" '
        f'font-family="sans-serif">{title}</text>',
    ]
    for i in range(rows):
        for j in range(cols):
            v = float(matrix[i, j])
            shade = int(round(255 * (1.0 - max(0.0, min(1.0, v)))))
            parts.append(
                f'<rect x="{ml + j * cell}" y="{mt + i * cell}" width="{cell}" '
                f'height="{cell}" fill="rgb({shade},{shade},{shade})" '
                f'stroke="#888" stroke-width="0.5"/>')
        parts.append(f'<text x="{ml - 6}" y="{mt + i * cell + cell / 2 + 4:.1f}" '
                     f'text-anchor="end" font-size="10" font-family="sans-serif">{i}</text>')
    for j in range(cols):
        parts.append(f'<text x="{ml + j * cell + cell / 2:.1f}" y="{mt + rows * cell + 14}" '
                     f'text-anchor="middle" font-size="10" font-family="sans-serif">{j}</text>')
    parts.append(f'<text x="{ml + cols * cell / 2:.1f}" y="{height - 8}" text-anchor="middle" '
                 f'font-size="12" font-family="sans-serif">{xlabel}</text>')
    parts.append(f'<text x="15" y="{mt + rows * cell / 2:.1f}" text-anchor="middle" '
                 f'font-size="12" font-family="sans-serif" '
                 f'transform="rotate(-90 15 {mt + rows * cell / 2:.1f})">{ylabel}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def cmd_trace(args) -> int:
    _echo("resolved config", {"ckpt": args.ckpt, "data": args.data,
                              "episode": args.episode, "svg": args.svg})
    agent = Agent.load(args.ckpt)
    dataset = load_dataset(args.data)
    if args.episode:
        record = next((r for r in dataset.records if r.episode_id == args.episode), None)
        if record is None:
            raise ValueError(f"episode {args.episode!r} not in {args.data}")
    else:
        record = dataset.records[0]
    trace = drive(agent, dataset.graph_for(record), record, policy="teacher")

    def finite(x: float):
        return x if math.isfinite(x) else None

    steps = []
    for t, out in enumerate(trace.outputs):
        steps.append({
            "t": t,
            "gold_action": int(record.gold_actions[t]),
            "action_scores": [finite(float(s)) for s in out.action_scores.data[0]],
            "e_p": out.e_p,
            "progress_label": float(record.progress_labels[t]),
            "relevance": None if out.r is None else [float(v) for v in out.r],
            "relevance_labels": [int(v) for v in record.relevance_labels[t]],
        })
    doc = {"episode_id": record.episode_id, "world": record.world_hash,
           "n_sentences": len(record.sentence_spans), "steps": steps}
    print(json.dumps(doc, sort_keys=True))
    if args.svg:
        out = _out_dir(args.out, f"trace-{record.episode_id}")
        out.mkdir(parents=True, exist_ok=True)
        xs = list(range(len(steps)))
        series = [("label", xs, [s["progress_label"] for s in steps])]
        if agent.config.use_locating:
            series.append(("predicted", xs, [s["e_p"] for s in steps]))
        _svg_line_plot(out / "progress.svg", series,
                       f"block progress ({record.episode_id})", "step", "progress")
        if agent.config.use_sentence_filter:
            heat = np.array([s["relevance"] for s in steps])
            _svg_heatmap(out / "relevance.svg", heat,
                         f"sentence relevance ({record.episode_id})",
                         "sentence", "step")
        print(f"plots under {out}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _add_world_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--grid", type=_grid_type, default=(6, 6), metavar="WxH")
    p.add_argument("--keep", type=float, default=0.85,
                   help="probability of keeping each grid edge")
    p.add_argument("--landmarks", type=int, default=12)
    p.add_argument("--dv", type=int, default=16, help="visual feature width")
    p.add_argument("--bins", type=int, default=8, help="heading bins per node")
    p.add_argument("--noise", type=float, default=0.05)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON training config file")
    p.add_argument("--data", help="training dataset (JSONL)")
    p.add_argument("--eval-data", dest="eval_data", help="held-out dataset (JSONL)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--grad-clip", dest="grad_clip_norm", type=float)
    p.add_argument("--out", help="run directory")
    p.add_argument("--tc-mode", dest="tc_mode", choices=("exact", "adjacent"),
                   default="adjacent")


def build_parser() -> _Parser:
    parser = _Parser(prog="blocknav", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-world", help="generate a street-graph world file")
    _add_world_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("gen-data", help="generate an instruction dataset")
    _add_world_flags(p)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--min-blocks", dest="min_blocks", type=int, default=1)
    p.add_argument("--max-blocks", dest="max_blocks", type=int, default=3)
    p.add_argument("--filler", type=float, default=0.0,
                   help="probability of filler tokens per sentence")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an agent")
    _add_train_flags(p)
    p.add_argument("--k", type=int, help="turning-angle window K")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for metrics.csv")
    p.add_argument("--tc-mode", dest="tc_mode", choices=("exact", "adjacent"),
                   default="adjacent")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_train_flags(p)
    p.add_argument("--ablate-grid", dest="ablate_grid",
                   choices=("overall", "locating", "k", "spatial", "association", "all"))
    p.add_argument("--k", type=int, nargs="+", help="window sizes for the K sweep")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="dump checkpoint config and parameters")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("trace", help="export per-step signals for one episode")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--episode", help="episode id (default: first record)")
    p.add_argument("--svg", action="store_true")
    p.add_argument("--out", help="directory for SVG plots")
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (GraphError, CheckpointError, DatasetWorldMismatch, LabelLengthMismatch,
            FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (GenerationFailed, RouteFailed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        return EXIT_RUNTIME
    except Exception as exc:  # anything else is a runtime failure, not a crash
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
