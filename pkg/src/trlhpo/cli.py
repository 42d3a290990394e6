"""Command line entry point: ``trlhpo run | report | eval-one``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from trlhpo.evaluator import eval_cached
from trlhpo.reports import export_reports, format_summary
from trlhpo.search import RunConfig, make_cache, make_evaluator, read_log, run_search
from trlhpo.space import ArchSpec, arch_hash, legalize


def _load_config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_run(args) -> int:
    config = _load_config(args.config)
    changes = {}
    if args.surrogate:
        changes["evaluator"] = "surrogate"
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.budget_s is not None:
        changes["wallclock_budget_s"] = args.budget_s
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.episodes is not None:
        changes["episodes"] = args.episodes
    config = config.replace(**changes)
    result = run_search(config, resume=args.resume)
    print(f"log: {result.log_path}")
    print(f"episodes completed: {result.episodes_completed} ({result.stopped}); "
          f"evaluations: {result.evaluations}")
    if result.best:
        print(f"best accuracy {result.best['accuracy']:.4f}: {ArchSpec.from_dict(result.best['arch'])}")
    return 0


def cmd_report(args) -> int:
    reports = export_reports(read_log(args.log), args.out, args.budget_s, args.top_k)
    print(format_summary(reports))
    print(f"reports written to {args.out}")
    return 0


def cmd_eval_one(args) -> int:
    text = args.arch
    if Path(text).is_file():
        text = Path(text).read_text()
    arch = ArchSpec.from_dict(json.loads(text))
    for i, layer in enumerate(arch.layers):
        shape = arch.input_shape if i == 0 else arch.shapes[i - 1]
        if legalize(layer, shape) != layer:
            print(f"warning: layer {i} {layer} would be legalized to {legalize(layer, shape)}", file=sys.stderr)
    config = _load_config(args.config)
    if args.surrogate:
        config = config.replace(evaluator="surrogate")
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    evaluator = make_evaluator(config)
    cache = make_cache(config, evaluator) if args.cache else None
    outcome = eval_cached(arch, evaluator, cache)
    print(json.dumps({"digest": arch_hash(arch), "arch": arch.to_dict(), "outcome": outcome.to_dict()}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trlhpo", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a search")
    run.add_argument("--config", help="JSON config file (keys of RunConfig)")
    run.add_argument("--surrogate", action="store_true", help="score candidates with the analytic surrogate")
    run.add_argument("--seed", type=int)
    run.add_argument("--budget-s", type=float, help="wall-clock budget in seconds")
    run.add_argument("--episodes", type=int)
    run.add_argument("--out", help="output directory (overrides out_dir)")
    run.add_argument("--resume", action="store_true", help="continue after the last complete episode in the log")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="export analyses of a run log")
    rep.add_argument("--log", required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--budget-s", type=float, help="AccTime budget; default is the whole run")
    rep.add_argument("--top-k", type=int, default=10)
    rep.set_defaults(func=cmd_report)

    one = sub.add_parser("eval-one", help="evaluate a single architecture")
    one.add_argument("--arch", required=True, help="architecture JSON or a path to it")
    one.add_argument("--config")
    one.add_argument("--surrogate", action="store_true")
    one.add_argument("--seed", type=int)
    one.add_argument("--cache", action="store_true", help="use the config's evaluation cache")
    one.set_defaults(func=cmd_eval_one)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
