"""Command-line entry point (``rdpg``).

Exit status: 0 on success, 1 when a check fails, 2 on usage or
configuration errors, 3 when training halts on a non-finite update.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

# small matmuls run faster without BLAS threading; must precede the numpy import
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np  # noqa: E402

from .errors import ConfigurationError  # noqa: E402


def _overrides(items):
    pairs = []
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    return pairs


def _config(args, extra=()):
    from .harness import load_config

    return load_config(args.config, _overrides(args.set) + list(extra))


def _add_config_args(p):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def _train(args, extra=()):
    from .harness import train

    extra = list(extra)
    if args.episodes is not None:
        extra.append(("episodes", str(args.episodes)))
    if args.seed is not None:
        extra.append(("seed", str(args.seed)))
    cfg = _config(args, extra)

    def log(rec):
        if not args.quiet and (rec["episode"] + 1) % args.log_every == 0:
            print(f"episode {rec['episode'] + 1:5d}  return {rec['return']:9.2f}  "
                  f"R100MA {rec['r100ma']:9.2f}  {rec['cause']:<9}  updates {rec['total_updates']}",
                  flush=True)

    res = train(cfg, out_dir=args.out, log=log)
    if res.halted:
        print(f"halted: {json.dumps(res.diagnostics, default=str)}", file=sys.stderr)
        return 3
    final = res.metrics[-1]["r100ma"] if res.metrics else None
    print(json.dumps({"episodes": len(res.metrics), "final_r100ma": final,
                      "best_r100ma": res.best_r100ma if res.metrics else None,
                      "out": args.out}))
    return 0


def cmd_train(args):
    return _train(args)


def cmd_inject_train(args):
    return _train(args, [("injection_on", "true"), ("teacher_files", ",".join(args.teacher))])


def cmd_eval(args):
    from .harness import evaluate

    cfg = _config(args)
    n = args.episodes if args.episodes is not None else cfg.eval_episodes
    seeds = range(args.seed_offset, args.seed_offset + n)
    res = evaluate(args.checkpoint, cfg, terrain_seeds=seeds)
    if not args.returns:
        res.pop("returns")
    print(json.dumps(res))
    return 0


def cmd_record_teacher(args):
    from .harness import record_teacher

    cfg = _config(args)
    seeds = range(args.seed_offset, args.seed_offset + args.episodes)
    eps = record_teacher(args.checkpoint, args.episodes, args.out, cfg, terrain_seeds=seeds)
    print(json.dumps({"episodes": len(eps), "steps": int(sum(len(e) for e in eps)),
                      "out": args.out}))
    return 0


def cmd_check_grad(args):
    from .gradcheck import layer_checks, loss_checks, report

    text, ok = report(layer_checks(args.seed) + loss_checks(args.seed))
    print(text)
    return 0 if ok else 1


def cmd_td_demo(args):
    from .tdlearn import TdConfig, interp_weights, closed_form_weights

    TdConfig(gamma=args.gamma, lam=args.lam, l=args.l, u=args.u).validate()
    w = interp_weights(args.lam, args.u)
    wp = closed_form_weights(args.lam, args.u)
    np.set_printoptions(precision=6, suppress=True)
    print(f"lambda={args.lam:g} gamma={args.gamma:g} l={args.l} u={args.u}")
    print("pos  backup  weight(normalized)  weight(closed-form prefactor)")
    for i in range(args.u):
        print(f"{i:3d}  {args.l - i:6d}  {w[i]:18.6f}  {wp[i]:25.6f}")
    print(f"sum  {'':6}  {w.sum():18.6f}  {wp.sum():25.6f}")
    print("TD decompositions (r_k rewards in the window, Q the tail target value):")
    for i in range(args.u):
        terms = [f"{args.gamma ** (k - i):.4g}*r{k}" for k in range(i, args.l)]
        terms.append(f"{args.gamma ** (args.l - i):.4g}*Q(o{args.l})")
        print(f"  TD_{i} = " + " + ".join(terms) + f" - Q_beh(o{i})")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="rdpg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    for name, fn, helptext in (("train", cmd_train, "train an agent"),
                               ("inject-train", cmd_inject_train,
                                "train with teacher episodes in the replay buffer")):
        t = sub.add_parser(name, help=helptext)
        _add_config_args(t)
        t.add_argument("--out", help="output directory for metrics and checkpoints")
        t.add_argument("--episodes", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--log-every", type=int, default=50)
        t.add_argument("--quiet", action="store_true")
        if name == "inject-train":
            t.add_argument("--teacher", nargs="+", required=True, help="teacher file(s)")
        t.set_defaults(func=fn)

    e = sub.add_parser("eval", help="noise-free evaluation of a checkpoint")
    _add_config_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int)
    e.add_argument("--seed-offset", type=int, default=0, help="first terrain seed")
    e.add_argument("--returns", action="store_true", help="include per-episode returns")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("record-teacher", help="write noise-free rollouts to a teacher file")
    _add_config_args(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--episodes", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed-offset", type=int, default=0)
    r.set_defaults(func=cmd_record_teacher)

    g = sub.add_parser("check-grad", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_check_grad)

    d = sub.add_parser("td-demo", help="print TD weight tables and decompositions")
    d.add_argument("--lambda", dest="lam", type=float, default=0.9)
    d.add_argument("--gamma", type=float, default=0.99)
    d.add_argument("--l", type=int, default=None)
    d.add_argument("--u", type=int, default=3)
    d.set_defaults(func=cmd_td_demo)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "td-demo" and args.l is None:
        args.l = args.u
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"rdpg: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rdpg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
