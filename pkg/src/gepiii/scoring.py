"""Competition scoring: metrics, public/private split, rules and leaderboards.

All sums go through :func:`math.fsum`, which is exactly rounded, so scores
do not depend on how rows are chunked or ordered.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

PUBLIC_YEAR = 2017
PRIVATE_YEAR = 2018
MAX_DAILY_SUBMISSIONS = 2
MAX_FINALS = 2
MAX_REPORTED_ROWS = 10


class ScoringError(ValueError):
    pass


class SubmissionRejected(ScoringError):
    """Invalid submission; ``offending`` holds up to 10 row_ids."""

    def __init__(self, reason: str, offending=()):
        self.reason = reason
        self.offending = [int(r) for r in list(offending)[:MAX_REPORTED_ROWS]]
        super().__init__(f"{reason}; first offending row_ids: {self.offending}" if self.offending else reason)


# ---------------------------------------------------------------------------
# metrics


def _pair(predictions, actuals):
    p = np.asarray(predictions, dtype=float).ravel()
    a = np.asarray(actuals, dtype=float).ravel()
    if p.shape != a.shape:
        raise ScoringError(f"length mismatch: {p.size} predictions vs {a.size} actuals")
    if p.size == 0:
        raise ScoringError("empty input")
    if not (np.isfinite(p).all() and np.isfinite(a).all()):
        raise ScoringError("non-finite values")
    if (p < 0).any() or (a < 0).any():
        raise ScoringError("negative values")
    return p, a


def rmsle(predictions, actuals) -> float:
    """Root mean squared error of ``ln(1 + x)`` values."""
    p, a = _pair(predictions, actuals)
    d = np.log1p(p) - np.log1p(a)
    return math.sqrt(math.fsum(d * d) / d.size)


def cv_rmse(predictions, actuals) -> float:
    """RMSE as a percentage of the mean actual."""
    p, a = _pair(predictions, actuals)
    mean = math.fsum(a) / a.size
    if mean == 0:
        raise ScoringError("mean of actuals is zero")
    d = a - p
    return 100.0 * math.sqrt(math.fsum(d * d) / d.size) / mean


def mbe(predictions, actuals) -> float:
    """Mean bias error in percent; positive means underprediction."""
    p, a = _pair(predictions, actuals)
    total = math.fsum(a)
    if total == 0:
        raise ScoringError("mean of actuals is zero")
    return 100.0 * math.fsum(a - p) / total


# ---------------------------------------------------------------------------
# split and scoring


@dataclass(frozen=True)
class SplitSpec:
    public_year: int = PUBLIC_YEAR
    private_year: int = PRIVATE_YEAR
    excluded_site_ids: frozenset = frozenset()

    def __post_init__(self):
        if self.public_year == self.private_year:
            raise ScoringError("public and private ranges must be disjoint")
        object.__setattr__(self, "excluded_site_ids", frozenset(int(s) for s in self.excluded_site_ids))

    @classmethod
    def from_dict(cls, data: dict | None) -> "SplitSpec":
        data = dict(data or {})
        unknown = set(data) - {"public_year", "private_year", "excluded_site_ids"}
        if unknown:
            raise ScoringError(f"unknown split fields {sorted(unknown)}")
        return cls(
            int(data.get("public_year", PUBLIC_YEAR)),
            int(data.get("private_year", PRIVATE_YEAR)),
            frozenset(data.get("excluded_site_ids") or ()),
        )

    def masks(self, test_rows: pd.DataFrame) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(public, private, excluded) masks over ``test_rows``.

        ``test_rows`` needs ``timestamp`` and ``site_id``. Excluded rows are
        private-year rows of excluded sites; they are in neither score.
        """
        year = pd.DatetimeIndex(test_rows["timestamp"]).year.to_numpy()
        public = year == self.public_year
        in_private = year == self.private_year
        if not (public | in_private).all():
            bad = test_rows.loc[~(public | in_private)]
            raise ScoringError(f"{len(bad)} test rows fall outside both scoring years")
        excluded = in_private & test_rows["site_id"].isin(list(self.excluded_site_ids)).to_numpy()
        return public, in_private & ~excluded, excluded


@dataclass
class ScoreResult:
    public: float | None
    private: float | None
    n_public: int
    n_private: int
    n_excluded: int
    per_meter: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "public_rmsle": self.public,
            "private_rmsle": self.private,
            "rows": {"public": self.n_public, "private": self.n_private, "excluded": self.n_excluded},
            "per_meter": self.per_meter,
        }

    def to_text(self) -> str:
        fmt = lambda v: "n/a" if v is None else f"{v:.6f}"  # noqa: E731
        lines = [
            f"public RMSLE:  {fmt(self.public)}  ({self.n_public} rows)",
            f"private RMSLE: {fmt(self.private)}  ({self.n_private} rows, {self.n_excluded} excluded)",
        ]
        for meter, s in sorted(self.per_meter.items()):
            lines.append(f"  meter {meter}: public {fmt(s['public'])}  private {fmt(s['private'])}")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def validate_predictions(frame: pd.DataFrame, n_rows: int) -> np.ndarray:
    """Check a submission frame against ``n_rows`` test rows (row_id 0..n-1).

    Returns predictions ordered by row_id; raises :class:`SubmissionRejected`
    naming the first problem found.
    """
    if "_reason" in frame:
        bad = frame["_reason"].notna() & (frame["_reason"] != "")
        if bad.any():
            rows = frame.loc[bad]
            ids = rows["row_id"].dropna() if rows["row_id"].notna().any() else rows["_line"]
            raise SubmissionRejected(f"unparseable rows: {rows['_reason'].iloc[0]}", ids)
    row_id = frame["row_id"].to_numpy(dtype=np.int64)
    values = frame["meter_reading"].to_numpy(dtype=float)
    dup = pd.Series(row_id).duplicated(keep="first").to_numpy()
    if dup.any():
        raise SubmissionRejected("duplicate row_id", np.unique(row_id[dup]))
    extra = (row_id < 0) | (row_id >= n_rows)
    if extra.any():
        raise SubmissionRejected("row_id not in the test set", np.sort(row_id[extra]))
    if len(row_id) != n_rows:
        missing = np.setdiff1d(np.arange(n_rows), row_id)
        raise SubmissionRejected(f"{len(missing)} test rows missing", missing)
    order = np.argsort(row_id, kind="stable")
    row_id, values = row_id[order], values[order]
    bad = ~np.isfinite(values) | (values < 0)
    if bad.any():
        raise SubmissionRejected("predictions must be finite and >= 0", row_id[bad])
    return values


def score_submission(predictions, truth, test_rows: pd.DataFrame, split: SplitSpec) -> ScoreResult:
    """Public and private RMSLE of row_id-aligned ``predictions``.

    ``truth`` is aligned the same way; ``test_rows`` (row_id order) carries
    timestamp, meter and site_id.
    """
    p = np.asarray(predictions, dtype=float)
    a = np.asarray(truth, dtype=float)
    if not (len(p) == len(a) == len(test_rows)):
        raise ScoringError("predictions, truth and test rows are not aligned")
    public, private, excluded = split.masks(test_rows)
    score = lambda m: rmsle(p[m], a[m]) if m.any() else None  # noqa: E731
    per_meter = {}
    meters = test_rows["meter"].to_numpy()
    for meter in np.unique(meters):
        sel = meters == meter
        per_meter[int(meter)] = {"public": score(public & sel), "private": score(private & sel)}
    return ScoreResult(score(public), score(private), int(public.sum()), int(private.sum()),
                       int(excluded.sum()), per_meter)


# ---------------------------------------------------------------------------
# rules


@dataclass
class Submission:
    team_id: str
    uploaded_at: pd.Timestamp
    predictions: np.ndarray | None = None
    selected_final: bool = False
    public: float | None = None
    private: float | None = None
    name: str = ""

    def __post_init__(self):
        ts = pd.Timestamp(self.uploaded_at)
        self.uploaded_at = ts.tz_convert("UTC") if ts.tzinfo else ts.tz_localize("UTC")


@dataclass
class RuleDecision:
    accepted: bool
    reason: str = ""


def enforce_submission_rules(history: list[Submission], new: Submission) -> RuleDecision:
    """Accept or reject ``new`` given the team's accepted ``history``.

    At most two submissions per UTC calendar day and at most two selected
    finals per team.
    """
    times = [s.uploaded_at for s in history]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ScoringError("history must be ordered by upload time")
    if history and new.uploaded_at < times[-1]:
        raise ScoringError("new submission predates the team history")
    day = new.uploaded_at.normalize()
    same_day = sum(1 for s in history if s.uploaded_at.normalize() == day)
    if same_day >= MAX_DAILY_SUBMISSIONS:
        return RuleDecision(False, f"daily limit of {MAX_DAILY_SUBMISSIONS} submissions reached for {day.date()} UTC")
    if new.selected_final and sum(s.selected_final for s in history) >= MAX_FINALS:
        return RuleDecision(False, f"at most {MAX_FINALS} final submissions may be selected")
    return RuleDecision(True)


def final_submission(submissions: list[Submission]) -> Submission | None:
    """The submission that counts: best private score among the selected
    finals, or among the last two uploads when none is selected."""
    scored = [s for s in submissions if s.private is not None]
    if not scored:
        return None
    pool = [s for s in scored if s.selected_final]
    if not pool:
        pool = sorted(scored, key=lambda s: s.uploaded_at)[-MAX_FINALS:]
    return min(pool, key=lambda s: (s.private, s.uploaded_at))


# ---------------------------------------------------------------------------
# leaderboard


def medal_counts(n_teams: int) -> dict[str, int]:
    """Cumulative medal cut-offs: top 0.2% gold, 5% silver, 10% bronze (ceil)."""
    return {
        "gold": -(-2 * n_teams // 1000),
        "silver": -(-5 * n_teams // 100),
        "bronze": -(-n_teams // 10),
    }


def competition_ranks(scores) -> np.ndarray:
    """1-based ranks where ties share the best rank and the next rank skips."""
    s = np.asarray(scores, dtype=float)
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.int64)
    for pos, i in enumerate(order):
        if pos and s[i] == s[order[pos - 1]]:
            ranks[i] = ranks[order[pos - 1]]
        else:
            ranks[i] = pos + 1
    return ranks


@dataclass
class Leaderboard:
    entries: pd.DataFrame  # team, public, private, rank, medal

    def to_text(self) -> str:
        lines = [f"{'rank':>4}  {'team':<20} {'public':>10} {'private':>10}  medal"]
        for r in self.entries.itertuples(index=False):
            pub = "n/a" if r.public is None or pd.isna(r.public) else f"{r.public:.6f}"
            lines.append(f"{r.rank:>4}  {r.team:<20} {pub:>10} {r.private:>10.6f}  {r.medal}")
        return "\n".join(lines)


def build_leaderboard(submissions: list[Submission]) -> Leaderboard:
    """Rank teams by the private score of their final submission."""
    teams: dict[str, list[Submission]] = {}
    for s in submissions:
        teams.setdefault(s.team_id, []).append(s)
    rows = []
    for team in sorted(teams):
        final = final_submission(teams[team])
        if final is not None:
            rows.append({"team": team, "public": final.public, "private": final.private,
                         "submission": final.name})
    if not rows:
        raise ScoringError("no team has a scored submission")
    frame = pd.DataFrame(rows)
    frame["rank"] = competition_ranks(frame["private"])
    cut = medal_counts(len(frame))
    frame["medal"] = np.select(
        [frame["rank"] <= cut["gold"], frame["rank"] <= cut["silver"], frame["rank"] <= cut["bronze"]],
        ["gold", "silver", "bronze"], default="",
    )
    frame = frame.sort_values(["rank", "team"], kind="stable").reset_index(drop=True)
    return Leaderboard(frame[["rank", "team", "public", "private", "medal", "submission"]])
