"""Command-line entry point: ``persona-probe run|resume|status|report|prompt``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import perspective as P
from .questionnaire import builtin_ids, load_builtin
from .report import build_report
from .runner import ConfigError, Experiment, ExperimentConfig, LedgerError, RunAborted

log = logging.getLogger("persona_probe")


def _perspectives_arg(value: str):
    if value in ("default", "none") or value.startswith("free_text:"):
        return value
    dims = [d.strip() for d in value.split(",") if d.strip()]
    return [{"targets": [[d, "high"] for d in dims]}]


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    doc: dict = {}
    if args.config:
        doc = ExperimentConfig.load(args.config).to_dict()
    overrides = {
        "id": args.id,
        "questionnaire": args.questionnaire,
        "permutations": args.permutations,
        "seed": args.seed,
        "intensity": args.intensity,
        "workers": args.workers,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.perspective is not None:
        doc["perspectives"] = _perspectives_arg(args.perspective)
    if args.context:
        doc["contexts"] = args.context
    if args.channel or args.person:
        channels = args.channel or sorted({v.split("/")[0] for v in doc.get("induction_variants", ["system/2nd"])})
        persons = args.person or sorted({v.split("/")[1] for v in doc.get("induction_variants", ["system/2nd"])})
        doc["induction_variants"] = [f"{c}/{p}" for c in channels for p in persons]
    if args.respondent:
        doc.pop("endpoint", None)
        doc["respondent"] = {"policy": args.respondent}
    if "id" not in doc or "questionnaire" not in doc:
        raise ConfigError("need a config file or --id and --questionnaire")
    if "endpoint" not in doc and "respondent" not in doc:
        doc["respondent"] = {"policy": "first"}
    return ExperimentConfig.from_mapping(doc)


def _print_status(exp: Experiment) -> None:
    counts = exp.status()
    total = sum(counts.values())
    print(f"{exp.config.id}: " + ", ".join(f"{k} {v}" for k, v in counts.items()) + f" (of {total})")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    exp = Experiment(cfg, args.root)
    exp.execute(limit=args.limit)
    _print_status(exp)
    if exp.status()["PENDING"] == 0:
        exp.save_tensors()
    return 0


def cmd_resume(args: argparse.Namespace) -> int:
    exp = Experiment.resume(args.experiment_id, args.root)
    exp.execute(limit=args.limit)
    _print_status(exp)
    if exp.status()["PENDING"] == 0:
        exp.save_tensors()
    return 0


def cmd_status(args: argparse.Namespace) -> int:
    exp = Experiment.resume(args.experiment_id, args.root)
    _print_status(exp)
    if args.json:
        print(json.dumps(exp.status(), sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    exps = [Experiment.resume(i, args.root) for i in args.experiment_ids]
    tables, charts = args.tables, args.charts
    if not (tables or charts):
        tables = charts = True
    baselines = True if args.baselines == "builtin" else args.baselines
    bundle = build_report(exps, tables, charts, baselines, args.alpha, not args.single_correction)
    out = Path(args.out) if args.out else Path(args.root) / args.experiment_ids[0] / "report"
    written = bundle.write(out)
    print(f"wrote {len(written)} files under {out}")
    return 0


def cmd_prompt(args: argparse.Namespace) -> int:
    q = load_builtin(args.questionnaire)
    item = q.items[0] if args.item is None else q.item(args.item)
    persp = P.NO_PERSPECTIVE
    if args.perspective and args.perspective != "none":
        if args.perspective in [c.id for c in q.categories]:
            targets = tuple((d, "high") for d in q.members(args.perspective))
        else:
            targets = tuple((d.strip(), "high") for d in args.perspective.split(","))
        persp = P.PerspectiveSpec(P.PerspectiveKind.VALUE_TARGETED, targets, P.Intensity(args.intensity),
                                  P.Channel(args.channel), P.Person(args.person))
    ctx = P.load_context_fixture(args.context)
    if args.permutation is None:
        perm = tuple(range(q.scale_of(item).points))
    else:
        perm = P.permute_options(q, args.seed, args.permutation + 1)[args.permutation]
    bundle = P.build_prompt(q, item, persp, ctx, perm)
    sys.stdout.write(P.format_messages(bundle.messages))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="persona-probe", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_root(p):
        p.add_argument("--root", default="results", help="results directory (default: results)")

    run = sub.add_parser("run", help="start (or continue) an experiment")
    run.add_argument("config", nargs="?", help="YAML experiment config")
    run.add_argument("--id")
    run.add_argument("--questionnaire", choices=builtin_ids())
    run.add_argument("--perspective", help="default | none | free_text:<set> | comma-separated dimensions")
    run.add_argument("--context", action="append", help="context fixture, repeatable (e.g. format/code_py)")
    run.add_argument("--channel", action="append", choices=[c.value for c in P.Channel])
    run.add_argument("--person", action="append", choices=[p.value for p in P.Person])
    run.add_argument("--intensity", choices=[i.value for i in P.Intensity])
    run.add_argument("--permutations", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--respondent", choices=["first", "random", "target_maximal"],
                     help="use an offline scripted respondent")
    run.add_argument("--limit", type=int, help="stop after this many tasks")
    add_root(run)
    run.set_defaults(func=cmd_run)

    res = sub.add_parser("resume", help="continue an interrupted experiment")
    res.add_argument("experiment_id")
    res.add_argument("--limit", type=int)
    add_root(res)
    res.set_defaults(func=cmd_resume)

    st = sub.add_parser("status", help="show task counts")
    st.add_argument("experiment_id")
    st.add_argument("--json", action="store_true")
    add_root(st)
    st.set_defaults(func=cmd_status)

    rep = sub.add_parser("report", help="write tables, charts and the annex")
    rep.add_argument("experiment_ids", nargs="+")
    rep.add_argument("--tables", action="store_true")
    rep.add_argument("--charts", action="store_true")
    rep.add_argument("--baselines", nargs="?", const="builtin",
                     help="human baselines CSV (omit the value for the shipped file)")
    rep.add_argument("--alpha", type=float, default=0.05)
    rep.add_argument("--single-correction", action="store_true",
                     help="flag post-hoc pairs at alpha instead of the corrected threshold")
    rep.add_argument("--out", help="output directory (default: <root>/<first id>/report)")
    add_root(rep)
    rep.set_defaults(func=cmd_report)

    pr = sub.add_parser("prompt", help="print the messages for one item")
    pr.add_argument("--questionnaire", default="pvq", choices=builtin_ids())
    pr.add_argument("--item")
    pr.add_argument("--perspective", help="category id or comma-separated dimensions")
    pr.add_argument("--channel", default="system", choices=[c.value for c in P.Channel])
    pr.add_argument("--person", default="2nd", choices=[p.value for p in P.Person])
    pr.add_argument("--intensity", default="extreme", choices=[i.value for i in P.Intensity])
    pr.add_argument("--context", default="none")
    pr.add_argument("--permutation", type=int, help="permutation index (default: identity order)")
    pr.add_argument("--seed", type=int, default=0)
    pr.set_defaults(func=cmd_prompt)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, LedgerError, RunAborted, P.PromptError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
