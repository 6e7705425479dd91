"""Command-line entry point: ``gepiii <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error (including rejected submissions), 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import pandas as pd
from filelock import FileLock, Timeout

from .config import ConfigError, load_config, synthetic_spec_path
from .dataset import (
    BUILDING_FILE_NAMES,
    DatasetError,
    load_submission,
    load_test_rows,
    read_buildings,
)
from .features import FeatureError
from .pipeline import STAGES, Pipeline, StageError
from .preprocess import CleaningConfigError
from .scoring import (
    ScoringError,
    SplitSpec,
    Submission,
    SubmissionRejected,
    build_leaderboard,
    enforce_submission_rules,
    score_submission,
    validate_predictions,
)
from .synthetic import SpecError, SyntheticSpec, generate_synthetic

logger = logging.getLogger("gepiii")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DEFAULT_CONFIG = "winner5"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba

    limit = numba.config.NUMBA_NUM_THREADS
    if n > limit:
        logger.info("--threads %d exceeds the %d threads available; using %d", n, limit, limit)
    numba.set_num_threads(min(n, limit))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SyntheticSpec.from_file(synthetic_spec_path(args.spec))
    spec.validate()
    manifest = generate_synthetic(spec, args.out)
    n_buildings = sum(1 for r in manifest if r.get("record") == "building")
    print(f"wrote synthetic dataset to {args.out} ({n_buildings} buildings)")
    return EXIT_OK


def _pipeline(args) -> Pipeline:
    config = load_config(args.config or DEFAULT_CONFIG, seed=args.seed)
    if args.data_dir:
        config.data_dir = args.data_dir
    return Pipeline(config, args.work_dir)


def _run_stages(args, until: str) -> int:
    pipe = _pipeline(args)
    pipe.work.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(pipe.work / ".lock"), timeout=0):
            results = pipe.run(until=until, force=args.force)
    except Timeout:
        raise UsageError(f"work dir {pipe.work} is locked by another gepiii process") from None
    for r in results:
        print(f"{r.stage:<10} {r.status:<7} {r.seconds:8.1f}s")
    if until in ("blend", "score"):
        print(f"submission: {pipe.submission_path}")
    if until == "score":
        scores = results[-1].report.get("scores")
        if scores:
            for name, s in scores.items():
                print(f"{name:<28} public {s['public_rmsle']:.6f}  private {s['private_rmsle']:.6f}"
                      if s["private_rmsle"] is not None else f"{name:<28} public {s['public_rmsle']}")
    return EXIT_OK


def _test_rows_with_sites(data_dir: Path) -> pd.DataFrame:
    test = load_test_rows(data_dir / "test.csv")
    bpath = next((data_dir / n for n in BUILDING_FILE_NAMES if (data_dir / n).exists()), None)
    if bpath is None:
        raise DatasetError(f"no building metadata file in {data_dir}")
    buildings, _ = read_buildings(bpath)
    test = test.sort_values("row_id").reset_index(drop=True)
    test["site_id"] = test["building_id"].map(buildings.set_index("building_id")["site_id"])
    if test["site_id"].isna().any():
        raise DatasetError("test.csv references buildings without metadata")
    return test


def cmd_score(args) -> int:
    data_dir = Path(args.data_dir or ".")
    test = _test_rows_with_sites(data_dir)
    split = SplitSpec(excluded_site_ids=frozenset(args.exclude_site or ()))
    if args.config:
        split = load_config(args.config).split
        if args.exclude_site:
            split = SplitSpec(split.public_year, split.private_year, frozenset(args.exclude_site))
    report = {
        "team": args.team,
        "submission": str(args.submission),
        "uploaded_at": str(pd.Timestamp(args.uploaded_at or pd.Timestamp.now(tz="UTC"))),
        "selected_final": bool(args.final),
    }
    try:
        pred = validate_predictions(load_submission(args.submission), len(test))
    except SubmissionRejected as exc:
        report.update({"status": "rejected", "reason": exc.reason, "offending_row_ids": exc.offending})
        if args.report:
            Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
        print(f"submission rejected: {exc}", file=sys.stderr)
        return EXIT_DATA
    truth_path = Path(args.truth) if args.truth else data_dir / "ground_truth.csv"
    if not truth_path.exists():
        # structural check only: the submission aligns with the test rows
        public, private, excluded = split.masks(test)
        report.update({"status": "validated", "rows": {"public": int(public.sum()),
                       "private": int(private.sum()), "excluded": int(excluded.sum())}})
        print(f"submission valid ({len(pred)} rows); no ground truth, not scored")
    else:
        truth = validate_predictions(load_submission(truth_path), len(test))
        result = score_submission(pred, truth, test, split)
        report.update({"status": "scored", **result.to_dict()})
        print(result.to_text())
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK


def cmd_leaderboard(args) -> int:
    reports = []
    for path in sorted(Path(args.dir).glob("*.json")):
        data = json.loads(path.read_text())
        if data.get("status") != "scored" or data.get("team") is None:
            continue
        reports.append(Submission(
            data["team"], pd.Timestamp(data["uploaded_at"]), None,
            bool(data.get("selected_final")), data.get("public_rmsle"),
            data.get("private_rmsle"), path.name,
        ))
    if not reports:
        raise DatasetError(f"no scored submission reports with a team in {args.dir}")
    accepted: dict[str, list[Submission]] = {}
    for sub in sorted(reports, key=lambda s: (s.team_id, s.uploaded_at, s.name)):
        history = accepted.setdefault(sub.team_id, [])
        decision = enforce_submission_rules(history, sub)
        if decision.accepted:
            history.append(sub)
        else:
            print(f"ignored {sub.name} ({sub.team_id}): {decision.reason}", file=sys.stderr)
    board = build_leaderboard([s for subs in accepted.values() for s in subs])
    print(board.to_text())
    if args.out:
        board.entries.to_csv(args.out, index=False)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the command; SUPPRESS keeps a
    # subcommand from resetting a value given before it
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help=f"config file or preset name (default {DEFAULT_CONFIG})")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="numba worker threads")
    common.add_argument("--work-dir", help="override paths.work_dir")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    parser = _Parser(prog="gepiii", description=__doc__.splitlines()[0], parents=[common])
    parser.set_defaults(config=None, seed=None, threads=None, work_dir=None, quiet=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="spec file or shipped spec name (small)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    for stage in STAGES[1:-1]:
        p = sub.add_parser(stage, parents=[common], help=f"run the pipeline through '{stage}'")
        p.add_argument("--data-dir", help="override paths.data_dir")
        p.add_argument("--force", action="store_true", help="ignore cached stages")
        p.set_defaults(func=lambda a, s=stage: _run_stages(a, s))

    p = sub.add_parser("run", parents=[common], help="run every stage, including scoring")
    p.add_argument("--data-dir", help="override paths.data_dir")
    p.add_argument("--force", action="store_true", help="ignore cached stages")
    p.set_defaults(func=lambda a: _run_stages(a, "score"))

    p = sub.add_parser("score", parents=[common], help="score one submission file")
    p.add_argument("submission")
    p.add_argument("--data-dir", help="directory with test.csv and building metadata")
    p.add_argument("--truth", help="ground truth CSV (row_id,meter_reading)")
    p.add_argument("--exclude-site", type=int, action="append", help="site excluded from private")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--team", help="team id recorded in the report")
    p.add_argument("--uploaded-at", help="UTC upload time recorded in the report")
    p.add_argument("--final", action="store_true", help="mark as a selected final submission")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("leaderboard", parents=[common], help="rank teams from score reports")
    p.add_argument("dir", help="directory of JSON score reports")
    p.add_argument("--out", help="write the table as CSV")
    p.set_defaults(func=cmd_leaderboard)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command is None:
        build_parser().print_help(sys.stderr)
        return EXIT_USAGE
    try:
        _set_threads(args.threads)
        return args.func(args)
    except StageError as exc:
        code = _code_for(exc.__cause__)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except Exception as exc:  # noqa: BLE001
        code = _code_for(exc)
        print(f"error: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            logger.debug("internal error", exc_info=True)
        return code


def _code_for(exc) -> int:
    if isinstance(exc, (UsageError, ConfigError, SpecError, CleaningConfigError, FileNotFoundError)):
        return EXIT_USAGE
    if isinstance(exc, (DatasetError, FeatureError, ScoringError)):
        return EXIT_DATA
    return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
