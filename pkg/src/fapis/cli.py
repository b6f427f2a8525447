"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad or missing data, 3 numerical failure.
Every command writes into a temporary sibling first and renames it into place,
so a failed run leaves no partial output behind.
"""

import argparse
import contextlib
import json
import math
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import CONFIG_NAME, ConfigError, RunConfig, load_config, write_config
from .episodes import EpisodeConfig, PlacementError, SplitError, generate_corpus, load_corpus, load_episode, save_corpus
from .evalkit import write_pr_csv
from .numeric import FormatError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Atomic outputs
# ---------------------------------------------------------------------------

@contextlib.contextmanager
def staged_dir(target):
    """Yield a scratch directory that replaces ``target`` only on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    os.replace(tmp, target)


def write_file_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _require(path, what):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _resolve_config(args, **overrides):
    cfg = load_config(_require(args.config, "config")) if getattr(args, "config", None) else RunConfig()
    return cfg.replace(**overrides)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    cfg = _resolve_config(args, seed=args.seed)
    splits = {k: tuple(v) for k, v in cfg.splits.items()}
    if args.split not in splits:
        raise UsageError(f"unknown split {args.split!r}; choose from {sorted(splits)}")
    if args.n < 1:
        raise UsageError("--n must be positive")
    episodes = generate_corpus(args.split, args.n, cfg.seed, EpisodeConfig(img_size=cfg.img_size), splits)
    with staged_dir(args.out) as tmp:
        save_corpus(episodes, tmp)
        write_config(cfg, tmp)
        info = {"n": args.n, "seed": cfg.seed, "split": args.split, "families": list(splits[args.split])}
        (tmp / "corpus.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.n} {args.split} episodes to {args.out}")


def extract_basis(episodes, j, iters, h_r, w_r, seed):
    from .partfactor import crop_to_box, nmf_factorize, stack_masks

    masks = [crop_to_box(m > 0.5) for ep in episodes for m in ep.query_masks]
    stack = stack_masks(masks, h_r, w_r)
    if stack.d < j:
        raise DataError(f"only {stack.d} usable masks for a {j}-part basis")
    basis, _ = nmf_factorize(stack, j, iters, seed)
    return basis


def cmd_nmf_extract(args):
    from .viz import write_pgm

    cfg = _resolve_config(args, j=args.j, seed=args.seed)
    episodes = load_corpus(_require(args.data, "data directory"))
    basis = extract_basis(episodes, cfg.j, args.iters, cfg.h_r, cfg.w_r, cfg.seed)
    with staged_dir(args.out) as tmp:
        basis.save(tmp)
        maps = basis.maps()
        for k in range(basis.j):
            write_pgm(tmp / f"part_{k:02d}.pgm", maps[..., k], 0.0, 1.0)
        write_config(cfg, tmp)
    print(f"wrote {basis.j}-part basis to {args.out}")


def cmd_train(args):
    from .partfactor import PartBasis
    from .training import fit, save_checkpoint, write_loss_log

    cfg = _resolve_config(args, seed=args.seed, epochs=args.epochs, lr=args.lr)
    episodes = load_corpus(_require(args.data, "data directory"))
    basis = None
    if args.basis:
        basis = PartBasis.load(_require(args.basis, "basis directory"))
    elif cfg.weights.lambda4 > 0:
        raise UsageError("--basis is required when lambda4 > 0")

    def log(row):
        if not args.quiet and row["step"] % 25 == 0:
            print(f"epoch {row['epoch']} step {row['step']} loss {row['total']:.4f}", file=sys.stderr)

    params, rows = fit(episodes, basis, cfg, log)
    with staged_dir(args.out) as tmp:
        save_checkpoint(params, cfg, len(rows), tmp)
        write_loss_log(rows, tmp / "loss_log.csv")
        write_config(cfg, tmp)
    print(f"trained {len(rows)} steps; checkpoint in {args.out}")


def eval_report(result, cfg, step, n_episodes):
    """Text of ``eval.json``; non-finite metrics become ``null``."""
    payload = {**result.as_dict(), "config": cfg.as_dict(), "checkpoint_step": step, "n_episodes": n_episodes}
    return json.dumps(_json_safe(payload), indent=2, sort_keys=True) + "\n"


def cmd_eval(args):
    from .training import evaluate, load_checkpoint

    params, cfg, step = load_checkpoint(_require(args.ckpt, "checkpoint"))
    episodes = load_corpus(_require(args.data, "data directory"))
    result = evaluate(episodes, params, cfg)
    write_file_atomic(args.out, eval_report(result, cfg, step, len(episodes)))
    write_file_atomic(Path(args.out).parent / CONFIG_NAME, cfg.to_json())
    if args.pr_csv:
        write_pr_csv(result, args.pr_csv)
    print(json.dumps(_json_safe(result.metrics()), sort_keys=True))


def cmd_infer(args):
    from .model import forward
    from .model.layers import sigmoid
    from .training import load_checkpoint
    from .viz import overlay, write_pgm

    params, cfg, _ = load_checkpoint(_require(args.ckpt, "checkpoint"))
    ep = load_episode(_require(args.episode, "episode"))
    _, parts, instances = forward(ep, params, cfg.model_config())
    top_k = min(args.top_parts, cfg.j)
    with staged_dir(args.out) as tmp:
        write_pgm(tmp / "support.pgm", ep.support_img)
        write_pgm(tmp / "query.pgm", ep.query_img)
        rows = []
        for i, inst in enumerate(instances):
            write_pgm(tmp / f"inst_{i:02d}_overlay.pgm", overlay(ep.query_img, inst.full_mask, inst.box), 0.0, 1.0)
            write_pgm(tmp / f"inst_{i:02d}_mask.pgm", inst.mask, 0.0, 1.0)
            gates = sigmoid(inst.importance)
            top = [int(k) for k in np.argsort(-gates, kind="stable")[:top_k]]
            for k in top:
                write_pgm(tmp / f"inst_{i:02d}_part_{k:02d}.pgm", parts[..., k])
            rows.append({
                "box": inst.box.as_list(),
                "score": inst.score,
                "importance": [float(g) for g in gates],
                "top_parts": top,
            })
        (tmp / "instances.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        write_config(cfg, tmp)
    print(f"{len(instances)} instances written to {args.out}")


def cmd_gradcheck(args):
    from .gradcheck import run_checks

    results = run_checks(args.component, seeds=range(args.seed, args.seed + args.n_seeds),
                         pipeline_seeds=(args.seed,))
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="fapis", description="Few-shot part-based instance segmentation toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", help="render a synthetic episode corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--split", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    n = sub.add_parser("nmf-extract", help="factorize GT masks into a part basis")
    n.add_argument("--data", required=True)
    n.add_argument("--j", type=int, default=None)
    n.add_argument("--iters", type=int, default=500)
    n.add_argument("--seed", type=int, default=None)
    n.add_argument("--out", required=True)
    n.add_argument("--config")
    n.set_defaults(func=cmd_nmf_extract)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", required=True)
    t.add_argument("--basis")
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a corpus")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--pr-csv")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="visualize predictions on one episode")
    i.add_argument("--episode", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--top-parts", type=int, default=3)
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--component", required=True, choices=("losses", "model"))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--n-seeds", type=int, default=10)
    c.set_defaults(func=cmd_gradcheck)
    return p


def run_command(argv=None):
    try:
        args = build_parser().parse_args(argv)
        code = args.func(args)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, ConfigError, SplitError, PlacementError,
            FileNotFoundError, NotADirectoryError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
