"""Command-line entry points.

Exit codes: 0 success, 2 usage/config error, 3 numerical divergence,
4 checkpoint integrity failure, 5 gradient verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as dx
from . import evaluation as ev
from .errors import ConfigError, DkuaError, IntegrityError, NumericalError, ParseError
from .gradcheck import run_gradcheck
from .trainer import lifelong_train, load_checkpoint, load_train_config

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_INTEGRITY = 4
EXIT_VERIFICATION = 5


def cmd_synth(args) -> int:
    spec = (dx.load_sequence_spec(args.spec) if args.spec
            else dx.default_sequence_spec())
    manifest = dx.synthesize_sequence(spec, args.seed, args.out)
    total = len(manifest["seen"]) + len(manifest["unseen"])
    print(f"wrote {total} domains "
          f"({len(manifest['seen'])} seen + {len(manifest['unseen'])} unseen) "
          f"to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_train_config(args.config)
    run_dir = lifelong_train(config, args.data, args.out)
    print(f"run complete: {run_dir}")
    return EXIT_OK


def _checkpoint_metrics(checkpoint_dir: Path, data_dir: Path) -> list:
    model, _, _, _ = load_checkpoint(checkpoint_dir)
    manifest = dx.load_sequence(data_dir)
    rows = []
    for group in ("seen", "unseen"):
        for name in manifest[group]:
            domain = dx.load_domain(Path(data_dir) / name)
            m, r1 = ev.evaluate_domain(model, domain)
            rows.append((group, name, m, r1))
    return rows


def cmd_eval(args) -> int:
    rows = _checkpoint_metrics(args.checkpoint, args.data)
    lines = ["domain\tgroup\tmAP\trank1"]
    for group, name, m, r1 in rows:
        lines.append(f"{name}\t{group}\t{m:.6f}\t{r1:.6f}")
    avg = ev.averages([(g, m, r1) for g, _, m, r1 in rows])
    for group, (m, r1) in avg.items():
        lines.append(f"{group}-average\t{group}\t{m:.6f}\t{r1:.6f}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


ABLATION_ARMS = [
    ("baseline", {"enable_ka": False, "enable_uka": False, "enable_dkt": False}),
    ("+ka", {"enable_ka": True, "enable_uka": False, "enable_dkt": False}),
    ("+ka+uka", {"enable_ka": True, "enable_uka": True, "enable_dkt": False}),
    ("full", {"enable_ka": True, "enable_uka": True, "enable_dkt": True}),
]


def cmd_ablate(args) -> int:
    config = load_train_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for arm, overrides in ABLATION_ARMS:
        arm_config = replace(config, **overrides)
        run_dir = lifelong_train(arm_config, args.data, out_dir / arm)
        rows = _checkpoint_metrics(
            sorted((run_dir / "checkpoints").iterdir())[-1], args.data)
        avg = ev.averages([(g, m, r1) for g, _, m, r1 in rows])
        seen = avg.get("seen", (float("nan"),) * 2)
        unseen = avg.get("unseen", (float("nan"),) * 2)
        table.append({"arm": arm, "seen_map": seen[0], "seen_rank1": seen[1],
                      "unseen_map": unseen[0], "unseen_rank1": unseen[1]})
    lines = ["arm\tseen_mAP\tseen_rank1\tunseen_mAP\tunseen_rank1"]
    for row in table:
        lines.append(f"{row['arm']}\t{row['seen_map']:.6f}\t"
                     f"{row['seen_rank1']:.6f}\t{row['unseen_map']:.6f}\t"
                     f"{row['unseen_rank1']:.6f}")
    text = "\n".join(lines)
    print(text)
    (out_dir / "ablation.tsv").write_text(text + "\n")
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed, corrupt=args.self_test_corrupt)
    failed = []
    for res in results:
        status = "ok" if res.passed else "FAIL"
        print(f"{status:4s} {res.name:28s} max_rel_err={res.max_rel_err:.3e} "
              f"tol={res.tolerance:.0e}")
        if not res.passed:
            failed.append(res)
    if failed:
        names = ", ".join(f"{r.name} ({r.max_rel_err:.3e})" for r in failed)
        print(f"gradient verification failed: {names}", file=sys.stderr)
        return EXIT_VERIFICATION
    return EXIT_OK


def cmd_export(args) -> int:
    model, _, _, _ = load_checkpoint(args.checkpoint)
    manifest = dx.load_sequence(args.data)
    all_rows = None
    for name in manifest["seen"] + manifest["unseen"]:
        domain = dx.load_domain(Path(args.data) / name)
        es = ev.extract_embeddings(model, domain)
        if all_rows is None:
            all_rows = es
        else:
            all_rows = ev.EmbeddingSet(
                vectors=np.concatenate([all_rows.vectors, es.vectors]),
                identities=np.concatenate([all_rows.identities, es.identities]),
                cameras=np.concatenate([all_rows.cameras, es.cameras]),
                domains=np.concatenate([all_rows.domains, es.domains]),
                splits=all_rows.splits + es.splits)
    ev.export_embeddings(args.out, all_rows)
    print(f"exported {len(all_rows.identities)} embeddings to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dkua",
        description="Lifelong ReID laboratory: synthetic domains, sequential "
                    "training, retrieval evaluation, and verification suites.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic domain sequence")
    p.add_argument("--spec", type=Path, default=None,
                   help="JSON domain-sequence spec (default: built-in)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run the lifelong training sequence")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every domain")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-arm loss ablation")
    p.add_argument("--config", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference certification")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--self-test-corrupt", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export", help="export embeddings for external plotting")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DkuaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
