"""Domain records, file ingestion, label construction, feature assembly and
model-artifact serialization."""
from __future__ import annotations

import csv
import json
import math
import operator
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np

HISTORY_WINDOW = 28
LIKERT_LEVELS = (1, 2, 3, 4, 5)
ARTIFACT_VERSION = "1.0"


class DataError(ValueError):
    """Malformed input data."""


class ArtifactError(ValueError):
    """Unreadable, inconsistent or incompatible model artifact."""


class Construct(str, Enum):
    RETENTIVE_RELEVANCE = "RetentiveRelevance"
    WORTH_YOUR_TIME = "WorthYourTime"
    INTEREST_MATCHING = "InterestMatching"

    @property
    def short(self) -> str:
        return _SHORT[self]

    @classmethod
    def parse(cls, value) -> "Construct":
        if isinstance(value, Construct):
            return value
        text = str(value)
        for c in cls:
            if text in (c.value, c.short, c.name):
                return c
        raise ValueError(f"unknown construct {value!r}")


_SHORT = {
    Construct.RETENTIVE_RELEVANCE: "rr",
    Construct.WORTH_YOUR_TIME: "wyt",
    Construct.INTEREST_MATCHING: "im",
}


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class SurveyResponse:
    user_id: Any
    item_id: Any
    construct: Construct
    rating: int
    timestamp: int  # epoch-days

    def __post_init__(self):
        object.__setattr__(self, "construct", Construct.parse(self.construct))
        if isinstance(self.rating, bool) or int(self.rating) != self.rating or self.rating not in LIKERT_LEVELS:
            raise ValueError(f"rating must be an integer in [1, 5], got {self.rating!r}")
        object.__setattr__(self, "rating", int(self.rating))
        object.__setattr__(self, "timestamp", int(self.timestamp))


ENGAGEMENT_FIELDS = ("like", "comment", "share", "skip", "watch_time_seconds")


@dataclass(frozen=True)
class InteractionRecord:
    user_id: Any
    item_id: Any
    day: int
    like: int = 0
    comment: int = 0
    share: int = 0
    skip: int = 0
    watch_time_seconds: float = 0.0

    def __post_init__(self):
        for name in ENGAGEMENT_FIELDS:
            value = getattr(self, name)
            if value is None or not math.isfinite(value):
                raise ValueError(f"{name} must be finite")
            if value < 0:
                kind = "duration" if name == "watch_time_seconds" else "count"
                raise ValueError(f"negative {kind} in field {name}")


@dataclass(frozen=True)
class RetentionLabel:
    user_id: Any
    day: int
    retained: bool


# --------------------------------------------------------------------------
# ingestion


def _iter_rows(path: Path, fmt: str):
    if fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
                if not isinstance(row, dict):
                    raise DataError(f"line {lineno}: expected a JSON object")
                yield lineno, row
    elif fmt == "csv":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):
                yield lineno, row
    else:
        raise DataError(f"unknown format {fmt!r}; expected 'csv' or 'jsonl'")


def _field(row: dict, key: str, lineno: int, cast, required: bool = True, default=None):
    if key not in row or row[key] in (None, ""):
        if required:
            raise DataError(f"line {lineno}: missing field '{key}'")
        return default
    try:
        return cast(row[key])
    except (TypeError, ValueError):
        raise DataError(f"line {lineno}: field '{key}' has invalid value {row[key]!r}") from None


def _as_int(value) -> int:
    f = float(value)
    if not f.is_integer():
        raise ValueError(value)
    return int(f)


def _as_id(value):
    # csv gives strings; keep integer-looking ids as ints so both formats agree
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            return value
    return value


def load_interactions(path, format: str = "jsonl") -> list[InteractionRecord]:
    """Read interaction rows; one record per row in file order."""
    if format not in ("csv", "jsonl"):
        raise DataError(f"unknown format {format!r}; expected 'csv' or 'jsonl'")
    out = []
    for lineno, row in _iter_rows(Path(path), format):
        user = _field(row, "user_id", lineno, _as_id)
        item = _field(row, "item_id", lineno, _as_id)
        day = _field(row, "day", lineno, _as_int)
        counts = {k: _field(row, k, lineno, _as_int) for k in ("like", "comment", "share", "skip")}
        for k, v in counts.items():
            if v < 0:
                raise DataError(f"negative count at line {lineno} (field '{k}')")
        watch = _field(row, "watch_time_seconds", lineno, float)
        if not math.isfinite(watch):
            raise DataError(f"line {lineno}: field 'watch_time_seconds' is not finite")
        if watch < 0:
            raise DataError(f"negative duration at line {lineno} (field 'watch_time_seconds')")
        out.append(InteractionRecord(user, item, day, watch_time_seconds=watch, **counts))
    return out


def load_interaction_table(path, format: str = "jsonl") -> "InteractionTable":
    """Columnar :func:`load_interactions` for large files.

    Parses optimistically and defers to the row-wise loader whenever a row
    looks wrong, so error messages are identical.
    """
    if format != "jsonl":
        return InteractionTable.from_records(load_interactions(path, format))
    keys = ("user_id", "item_id", "day", "like", "comment", "share", "skip", "watch_time_seconds")
    get = operator.itemgetter(*keys)
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rows.append(get(json.loads(line)))
        if not rows:
            return InteractionTable.empty()
        cols = list(zip(*rows))
        ints = np.array(cols[2:7], dtype=float)
        watch = np.array(cols[7], dtype=float)
        ok = (np.isfinite(ints).all() and (ints == np.round(ints)).all() and (ints[1:] >= 0).all()
              and np.isfinite(watch).all() and (watch >= 0).all()
              and all(isinstance(v, (int, str)) and not isinstance(v, bool) for v in cols[0] + cols[1]))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError):
        ok = False
    if not ok:
        return InteractionTable.from_records(load_interactions(path, format))
    ints = ints.astype(np.int64)
    return InteractionTable(user_id=np.array(cols[0]), item_id=np.array(cols[1]), day=ints[0], like=ints[1],
                            comment=ints[2], share=ints[3], skip=ints[4], watch_time_seconds=watch)


def load_surveys(path) -> list[SurveyResponse]:
    out = []
    for lineno, row in _iter_rows(Path(path), "jsonl"):
        rating = _field(row, "rating", lineno, _as_int)
        if rating not in LIKERT_LEVELS:
            raise DataError(f"line {lineno}: field 'rating' must be in [1, 5], got {rating}")
        construct = _field(row, "construct", lineno, Construct.parse)
        out.append(
            SurveyResponse(
                user_id=_field(row, "user_id", lineno, _as_id),
                item_id=_field(row, "item_id", lineno, _as_id),
                construct=construct,
                rating=rating,
                timestamp=_field(row, "day", lineno, _as_int),
            )
        )
    return out


def load_labels(path) -> list[RetentionLabel]:
    out = []
    for lineno, row in _iter_rows(Path(path), "jsonl"):
        retained = _field(row, "retained", lineno, lambda v: bool(int(v)) if not isinstance(v, bool) else v)
        out.append(RetentionLabel(_field(row, "user_id", lineno, _as_id), _field(row, "day", lineno, _as_int), retained))
    return out


def read_jsonl(path) -> list[dict]:
    return [row for _, row in _iter_rows(Path(path), "jsonl")]


def write_jsonl(path, rows: Iterable[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


# --------------------------------------------------------------------------
# labels


def binarize_survey(rating: int) -> Optional[int]:
    """Likely/Very likely -> 1, Unlikely/Very unlikely -> 0, neutral -> None."""
    if isinstance(rating, bool) or rating not in LIKERT_LEVELS:
        raise ValueError(f"rating must be an integer in [1, 5], got {rating!r}")
    if rating >= 4:
        return 1
    if rating <= 2:
        return 0
    return None


def nearest_rank_percentile(values, pct: float) -> float:
    """Smallest value with at least ``pct`` percent of the data at or below it."""
    arr = np.sort(np.asarray(values, dtype=float))
    if arr.size == 0:
        raise ValueError("percentile of an empty distribution")
    if not 0 < pct <= 100:
        raise ValueError("pct must lie in (0, 100]")
    rank = max(1, math.ceil(pct / 100.0 * arr.size))
    return float(arr[rank - 1])


def retention_label(next_day_views: int, active_view_distribution: Sequence[int], pct: float = 5.0) -> bool:
    """True iff next-day views strictly exceed the nearest-rank 5th percentile."""
    dist = np.asarray(active_view_distribution)
    if dist.size == 0:
        raise ValueError("empty active-user view distribution")
    if (dist < 0).any():
        raise ValueError("view counts must be non-negative")
    return bool(next_day_views > nearest_rank_percentile(dist, pct))


def retention_labels(next_day_views, pct: float = 5.0) -> np.ndarray:
    """Vectorized labels against the population's own nearest-rank threshold."""
    views = np.asarray(next_day_views)
    return views > nearest_rank_percentile(views, pct)


# --------------------------------------------------------------------------
# feature containers

GROUP_ORDER = ("H", "R", "U", "C", "D", "P", "E", "I", "N", "S")
RETENTION_GROUPS = ("H", "R", "U", "C", "D")
PROXY_GROUPS = ("P", "E", "C", "I", "N")


def _frozen(arr) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureVector:
    """Named, grouped feature values for one row."""

    names: tuple[str, ...]
    groups: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "values", _frozen(self.values))
        if not (len(self.names) == len(self.groups) == self.values.shape[-1]):
            raise ValueError("names, groups and values must align")

    def group(self, tag: str) -> dict[str, float]:
        return {n: float(v) for n, g, v in zip(self.names, self.groups, self.values) if g == tag}

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return (self.names, self.groups) == (other.names, other.groups) and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True)
class FeatureMatrix:
    """Column-named feature block for many rows."""

    names: tuple[str, ...]
    groups: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "groups", tuple(self.groups))
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 2 or vals.shape[1] != len(self.names) or len(self.names) != len(self.groups):
            raise ValueError("names, groups and values must align")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def row(self, i: int) -> FeatureVector:
        return FeatureVector(self.names, self.groups, self.values[i])

    def columns(self, names: Sequence[str]) -> "FeatureMatrix":
        pos = {n: i for i, n in enumerate(self.names)}
        idx = [pos[n] for n in names]
        return FeatureMatrix(tuple(names), tuple(self.groups[i] for i in idx), self.values[:, idx])

    def select_groups(self, tags: Iterable[str]) -> "FeatureMatrix":
        tags = set(tags)
        return self.columns([n for n, g in zip(self.names, self.groups) if g in tags])

    def take(self, rows) -> "FeatureMatrix":
        return FeatureMatrix(self.names, self.groups, self.values[rows])

    @staticmethod
    def hstack(blocks: Sequence["FeatureMatrix"]) -> "FeatureMatrix":
        return FeatureMatrix(
            tuple(n for b in blocks for n in b.names),
            tuple(g for b in blocks for g in b.groups),
            np.hstack([b.values for b in blocks]),
        )


# --------------------------------------------------------------------------
# columnar tables


def _col(records, name, dtype=None):
    return np.array([getattr(r, name) for r in records], dtype=dtype)


@dataclass(frozen=True)
class InteractionTable:
    user_id: np.ndarray
    item_id: np.ndarray
    day: np.ndarray
    like: np.ndarray
    comment: np.ndarray
    share: np.ndarray
    skip: np.ndarray
    watch_time_seconds: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[InteractionRecord]) -> "InteractionTable":
        if not records:
            return cls.empty()
        return cls(
            user_id=_col(records, "user_id"),
            item_id=_col(records, "item_id"),
            day=_col(records, "day", np.int64),
            like=_col(records, "like", np.int64),
            comment=_col(records, "comment", np.int64),
            share=_col(records, "share", np.int64),
            skip=_col(records, "skip", np.int64),
            watch_time_seconds=_col(records, "watch_time_seconds", np.float64),
        )

    @classmethod
    def empty(cls) -> "InteractionTable":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, z, z, np.zeros(0))

    def __len__(self) -> int:
        return self.day.size

    def rows(self, mask) -> "InteractionTable":
        return InteractionTable(**{k: getattr(self, k)[mask] for k in self.__dataclass_fields__})

    def to_records(self) -> list[InteractionRecord]:
        return [
            InteractionRecord(
                _py(self.user_id[i]), _py(self.item_id[i]), int(self.day[i]),
                int(self.like[i]), int(self.comment[i]), int(self.share[i]), int(self.skip[i]),
                float(self.watch_time_seconds[i]),
            )
            for i in range(len(self))
        ]


def _py(value):
    return value.item() if isinstance(value, np.generic) else value


@dataclass(frozen=True)
class ItemTable:
    """Item metadata: topic, quality-classifier score, popularity and
    (optionally) the historical skip rate across all users."""

    item_id: np.ndarray
    topic: np.ndarray
    quality_score: np.ndarray
    popularity: np.ndarray
    skip_rate: Optional[np.ndarray] = None

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping]) -> "ItemTable":
        skip = [r.get("skip_rate") for r in rows]
        return cls(
            item_id=np.array([_as_id(r["item_id"]) for r in rows]),
            topic=np.array([int(r["topic"]) for r in rows], dtype=np.int64),
            quality_score=np.array([float(r["quality_score"]) for r in rows]),
            popularity=np.array([float(r["popularity"]) for r in rows]),
            skip_rate=None if any(s is None for s in skip) else np.array(skip, dtype=float),
        )

    def to_rows(self) -> list[dict]:
        out = []
        for i in range(self.item_id.size):
            row = {
                "item_id": _py(self.item_id[i]),
                "topic": int(self.topic[i]),
                "quality_score": float(self.quality_score[i]),
                "popularity": float(self.popularity[i]),
            }
            if self.skip_rate is not None:
                row["skip_rate"] = float(self.skip_rate[i])
            out.append(row)
        return out


@dataclass(frozen=True)
class UserTable:
    """Demographic and usage controls."""

    user_id: np.ndarray
    age_cohort: np.ndarray
    region: np.ndarray
    tenure_days: np.ndarray

    @classmethod
    def from_rows(cls, rows: Sequence[Mapping]) -> "UserTable":
        return cls(
            user_id=np.array([_as_id(r["user_id"]) for r in rows]),
            age_cohort=np.array([int(r["age_cohort"]) for r in rows], dtype=np.int64),
            region=np.array([int(r["region"]) for r in rows], dtype=np.int64),
            tenure_days=np.array([float(r["tenure_days"]) for r in rows]),
        )

    def to_rows(self) -> list[dict]:
        return [
            {
                "user_id": _py(self.user_id[i]),
                "age_cohort": int(self.age_cohort[i]),
                "region": int(self.region[i]),
                "tenure_days": float(self.tenure_days[i]),
            }
            for i in range(self.user_id.size)
        ]

    def covariates(self) -> tuple[np.ndarray, tuple[str, ...]]:
        return (
            np.column_stack([self.age_cohort, self.region, self.tenure_days]).astype(float),
            ("age_cohort", "region", "tenure_days"),
        )


# --------------------------------------------------------------------------
# feature assembly

H_NAMES = ("h_views", "h_likes", "h_comments", "h_shares", "h_skips", "h_watch_time", "history_days", "h_present")
R_NAMES = ("r_views", "r_likes", "r_skips", "r_watch_time", "r_present")
U_NAMES = ("u_like", "u_comment", "u_share", "u_skip", "u_watch_time", "u_present")
C_RET_NAMES = ("c_topic", "c_quality_score", "c_popularity", "c_present")
D_NAMES = ("d_age_cohort", "d_region", "d_tenure_days", "d_present")
P_NAMES = ("p_like", "p_skip", "p_present")
E_NAMES = ("e_active_rate", "e_views_per_day", "e_like_rate", "e_present")
C_PROXY_NAMES = ("c_quality_score", "c_popularity", "c_present")
I_NAMES = ("i_topic_share", "i_topic_like_rate", "i_seen_item", "i_present")
N_NAMES = ("n_item_skip_rate", "n_user_skip_rate", "n_present")
# behaviour predictors see the proxy groups that do not depend on them
BEHAVIOR_INPUTS = ("e_active_rate", "e_views_per_day", "e_like_rate", "c_quality_score", "c_popularity",
                   "i_topic_share", "i_topic_like_rate", "i_seen_item")


def survey_names(construct: Construct) -> tuple[str, ...]:
    s = construct.short
    return tuple(f"s_{s}_{level}" for level in LIKERT_LEVELS) + (f"s_{s}_present",)


def retention_schema(constructs: Sequence[Construct] = ()) -> tuple[tuple[str, ...], tuple[str, ...]]:
    names: list[str] = []
    groups: list[str] = []
    for tag, block in (("H", H_NAMES), ("R", R_NAMES), ("U", U_NAMES), ("C", C_RET_NAMES), ("D", D_NAMES)):
        names += block
        groups += [tag] * len(block)
    for c in constructs:
        block = survey_names(Construct.parse(c))
        names += block
        groups += ["S"] * len(block)
    return tuple(names), tuple(groups)


def proxy_schema() -> tuple[tuple[str, ...], tuple[str, ...]]:
    names: list[str] = []
    groups: list[str] = []
    for tag, block in (("P", P_NAMES), ("E", E_NAMES), ("C", C_PROXY_NAMES), ("I", I_NAMES), ("N", N_NAMES)):
        names += block
        groups += [tag] * len(block)
    return tuple(names), tuple(groups)


def _ratio(num, den):
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


class FeatureBuilder:
    """Vectorized feature assembly over interaction, item and user tables.

    History aggregates cover the ``window`` days strictly before each query day;
    same-day aggregates cover the query day itself. Absent data is imputed as
    zeros and flagged by the group's ``*_present`` column.
    """

    def __init__(self, interactions: InteractionTable, items: Optional[ItemTable] = None,
                 users: Optional[UserTable] = None, window: int = HISTORY_WINDOW):
        self.interactions = interactions
        self.items = items
        self.users = users
        self.window = window
        id_pool = [np.asarray(interactions.user_id)]
        if users is not None:
            id_pool.append(np.asarray(users.user_id))
        self._user_keys = np.unique(np.concatenate(id_pool)) if any(a.size for a in id_pool) else np.zeros(0)
        item_pool = [np.asarray(interactions.item_id)]
        if items is not None:
            item_pool.append(np.asarray(items.item_id))
        self._item_keys = np.unique(np.concatenate(item_pool)) if any(a.size for a in item_pool) else np.zeros(0)
        self._uidx = self._user_index(interactions.user_id)
        self._iidx = self._item_index(interactions.item_id)
        self._item_topic = np.full(self._item_keys.size, -1, dtype=np.int64)
        self._item_quality = np.zeros(self._item_keys.size)
        self._item_pop = np.zeros(self._item_keys.size)
        self._item_known = np.zeros(self._item_keys.size, dtype=bool)
        self._item_skip = None
        if items is not None and items.item_id.size:
            pos = self._item_index(items.item_id)
            self._item_topic[pos] = items.topic
            self._item_quality[pos] = items.quality_score
            self._item_pop[pos] = items.popularity
            self._item_known[pos] = True
            if items.skip_rate is not None:
                self._item_skip = np.zeros(self._item_keys.size)
                self._item_skip[pos] = items.skip_rate
        self._row_topic = self._item_topic[self._iidx] if self._iidx.size else np.zeros(0, dtype=np.int64)
        self._cache: dict = {}

    # -- id handling -----------------------------------------------------

    def _lookup(self, keys: np.ndarray, query) -> np.ndarray:
        query = np.asarray(query)
        if keys.size == 0:
            return np.full(query.shape, -1, dtype=np.int64)
        pos = np.searchsorted(keys, query)
        pos = np.clip(pos, 0, keys.size - 1)
        hit = keys[pos] == query
        return np.where(hit, pos, -1).astype(np.int64)

    def _user_index(self, ids) -> np.ndarray:
        return self._lookup(self._user_keys, ids)

    def _item_index(self, ids) -> np.ndarray:
        return self._lookup(self._item_keys, ids)

    # -- aggregates ------------------------------------------------------

    def _window_stats(self, day: int) -> dict:
        key = ("window", day)
        if key in self._cache:
            return self._cache[key]
        t = self.interactions
        nu = self._user_keys.size
        hist = (t.day >= day - self.window) & (t.day < day)
        u = self._uidx[hist]
        bc = lambda w=None: np.bincount(u, weights=w, minlength=nu).astype(float)
        active_days = np.zeros(nu)
        if u.size:
            pairs = np.unique(u * (self.window + 1) + (t.day[hist] - (day - self.window)))
            active_days = np.bincount(pairs // (self.window + 1), minlength=nu).astype(float)
        stats = {
            "views": bc(),
            "likes": bc(t.like[hist]),
            "comments": bc(t.comment[hist]),
            "shares": bc(t.share[hist]),
            "skips": bc(t.skip[hist]),
            "watch": bc(t.watch_time_seconds[hist]),
            "active_days": active_days,
        }
        self._cache[key] = stats
        return stats

    def _topic_stats(self, day: int) -> dict:
        key = ("topic", day)
        if key in self._cache:
            return self._cache[key]
        t = self.interactions
        hist = (t.day >= day - self.window) & (t.day < day) & (self._row_topic >= 0)
        n_topics = int(max(self._item_topic.max(initial=-1), 0)) + 1
        flat = self._uidx[hist] * n_topics + self._row_topic[hist]
        size = self._user_keys.size * n_topics
        stats = {
            "n_topics": n_topics,
            "views": np.bincount(flat, minlength=size).astype(float).reshape(-1, n_topics),
            "likes": np.bincount(flat, weights=t.like[hist], minlength=size).astype(float).reshape(-1, n_topics),
        }
        self._cache[key] = stats
        return stats

    def _item_skip_rate(self, day: int) -> tuple[np.ndarray, np.ndarray]:
        if self._item_skip is not None:
            return self._item_skip, self._item_known
        key = ("item_skip", day)
        if key not in self._cache:
            t = self.interactions
            hist = t.day < day
            views = np.bincount(self._iidx[hist], minlength=self._item_keys.size).astype(float)
            skips = np.bincount(self._iidx[hist], weights=t.skip[hist], minlength=self._item_keys.size)
            self._cache[key] = (_ratio(skips, views), views > 0)
        return self._cache[key]

    def _pair_table(self, day: int, window: bool) -> tuple[np.ndarray, dict]:
        key = ("pairs", day, window)
        if key not in self._cache:
            t = self.interactions
            if window:
                rows = (t.day >= day - self.window) & (t.day < day)
            else:
                rows = t.day == day
            row_key = self._uidx[rows] * self._item_keys.size + self._iidx[rows]
            keys, inv = np.unique(row_key, return_inverse=True)
            cols = {"views": None, "like": t.like[rows], "comment": t.comment[rows],
                    "share": t.share[rows], "skip": t.skip[rows], "watch": t.watch_time_seconds[rows]}
            sums = {name: np.bincount(inv, weights=w, minlength=keys.size).astype(float)
                    for name, w in cols.items()}
            self._cache[key] = (keys, sums)
        return self._cache[key]

    def _pair_stats(self, uidx, iidx, day: int, window: bool) -> dict:
        """Sums of engagement over interactions matching each (user, item) query."""
        keys, sums = self._pair_table(day, window)
        q_key = uidx * self._item_keys.size + iidx
        valid = (uidx >= 0) & (iidx >= 0)
        if keys.size == 0:
            return {name: np.zeros(q_key.size) for name in sums}
        pos = np.clip(np.searchsorted(keys, q_key), 0, keys.size - 1)
        hit = valid & (keys[pos] == q_key)
        return {name: np.where(hit, col[pos], 0.0) for name, col in sums.items()}

    def _same_day(self, day: int) -> dict:
        key = ("sameday", day)
        if key in self._cache:
            return self._cache[key]
        t = self.interactions
        rows = t.day == day
        u = self._uidx[rows]
        nu = self._user_keys.size
        bc = lambda w=None: np.bincount(u, weights=w, minlength=nu).astype(float)
        stats = {"views": bc(), "likes": bc(t.like[rows]), "skips": bc(t.skip[rows]),
                 "watch": bc(t.watch_time_seconds[rows])}
        self._cache[key] = stats
        return stats

    def _demographics(self, uidx) -> np.ndarray:
        out = np.zeros((uidx.size, 4))
        if self.users is None:
            return out
        pos = self._lookup(self._user_keys, self.users.user_id)
        table = np.zeros((self._user_keys.size, 4))
        table[pos, 0] = self.users.age_cohort
        table[pos, 1] = self.users.region
        table[pos, 2] = self.users.tenure_days
        table[pos, 3] = 1.0
        ok = uidx >= 0
        out[ok] = table[uidx[ok]]
        return out

    # -- public ----------------------------------------------------------

    def retention_matrix(self, user_ids, item_ids, days, ratings: Optional[Mapping] = None) -> FeatureMatrix:
        """Groups H, R, U, C, D plus one S block per construct in ``ratings``.

        ``ratings`` maps a construct to an integer array aligned with the rows;
        0 marks a missing response.
        """
        user_ids = np.asarray(user_ids)
        item_ids = np.asarray(item_ids)
        days = np.broadcast_to(np.asarray(days, dtype=np.int64), user_ids.shape)
        ratings = {Construct.parse(k): np.asarray(v, dtype=np.int64) for k, v in (ratings or {}).items()}
        constructs = [c for c in Construct if c in ratings]
        names, groups = retention_schema(constructs)
        n = user_ids.size
        X = np.zeros((n, len(names)))
        uidx = self._user_index(user_ids)
        iidx = self._item_index(item_ids)
        for day in np.unique(days):
            rows = np.nonzero(days == day)[0]
            u = uidx[rows]
            ok = u >= 0
            ws = self._window_stats(int(day))
            sd = self._same_day(int(day))
            g = lambda arr: np.where(ok, arr[np.maximum(u, 0)], 0.0)
            hist_days = g(ws["active_days"])
            X[rows, 0:8] = np.column_stack([
                g(ws["views"]), g(ws["likes"]), g(ws["comments"]), g(ws["shares"]), g(ws["skips"]),
                g(ws["watch"]), hist_days, (hist_days > 0).astype(float),
            ])
            r_views = g(sd["views"])
            X[rows, 8:13] = np.column_stack([
                r_views, g(sd["likes"]), g(sd["skips"]), g(sd["watch"]), (r_views > 0).astype(float),
            ])
            ps = self._pair_stats(u, iidx[rows], int(day), window=False)
            X[rows, 13:19] = np.column_stack([
                ps["like"], ps["comment"], ps["share"], ps["skip"], ps["watch"], (ps["views"] > 0).astype(float),
            ])
        known = (iidx >= 0) & self._item_known[np.maximum(iidx, 0)] if self._item_keys.size else np.zeros(n, bool)
        safe = np.maximum(iidx, 0)
        if self._item_keys.size:
            X[:, 19:23] = np.column_stack([
                np.where(known, self._item_topic[safe], 0),
                np.where(known, self._item_quality[safe], 0.0),
                np.where(known, self._item_pop[safe], 0.0),
                known.astype(float),
            ])
        X[:, 23:27] = self._demographics(uidx)
        col = 27
        for c in constructs:
            r = ratings[c]
            for level in LIKERT_LEVELS:
                X[:, col] = (r == level).astype(float)
                col += 1
            X[:, col] = np.isin(r, LIKERT_LEVELS).astype(float)
            col += 1
        return FeatureMatrix(names, groups, X)

    def proxy_matrix(self, user_ids, item_ids, day: int, behavior=None) -> FeatureMatrix:
        """Groups P, E, C, I, N for (user, item) pairs scored on ``day``."""
        user_ids = np.asarray(user_ids)
        item_ids = np.asarray(item_ids)
        names, groups = proxy_schema()
        n = user_ids.size
        X = np.zeros((n, len(names)))
        uidx = self._user_index(user_ids)
        iidx = self._item_index(item_ids)
        ok = uidx >= 0
        su = np.maximum(uidx, 0)
        si = np.maximum(iidx, 0)
        ws = self._window_stats(int(day))
        g = lambda arr: np.where(ok, arr[su], 0.0) if arr.size else np.zeros(n)
        views = g(ws["views"])
        likes = g(ws["likes"])
        present = (views > 0).astype(float)
        X[:, 3:7] = np.column_stack([
            g(ws["active_days"]) / self.window, views / self.window, _ratio(likes, views), present,
        ])
        known = (iidx >= 0) & (self._item_known[si] if self._item_keys.size else False)
        if self._item_keys.size:
            X[:, 7:10] = np.column_stack([
                np.where(known, self._item_quality[si], 0.0),
                np.where(known, self._item_pop[si], 0.0),
                known.astype(float),
            ])
        ts = self._topic_stats(int(day))
        topic = self._item_topic[si] if self._item_keys.size else np.full(n, -1)
        has_topic = ok & known & (topic >= 0)
        tv = np.where(has_topic, ts["views"][su, np.maximum(topic, 0)] if ts["views"].size else 0.0, 0.0)
        tl = np.where(has_topic, ts["likes"][su, np.maximum(topic, 0)] if ts["likes"].size else 0.0, 0.0)
        seen = self._pair_stats(uidx, iidx, int(day), window=True)["views"]
        X[:, 10:14] = np.column_stack([
            _ratio(tv, views), _ratio(tl, tv), seen, (present * has_topic).astype(float),
        ])
        item_skip, item_seen = self._item_skip_rate(int(day))
        iskip_ok = known & (item_seen[si] if item_seen.size else False)
        X[:, 14:17] = np.column_stack([
            np.where(iskip_ok, item_skip[si] if item_skip.size else 0.0, 0.0),
            _ratio(g(ws["skips"]), views),
            (iskip_ok & (present > 0)).astype(float),
        ])
        fm = FeatureMatrix(names, groups, X)
        if behavior is not None:
            probs = behavior.predict(fm.columns(BEHAVIOR_INPUTS))
            X[:, 0] = probs["p_like"]
            X[:, 1] = probs["p_skip"]
            X[:, 2] = 1.0
            fm = FeatureMatrix(names, groups, X)
        return fm


def assemble_features(history: Sequence[InteractionRecord], item: Optional[Mapping], demographics: Optional[Mapping],
                      survey: Optional[SurveyResponse | Sequence[SurveyResponse]], mode: str, *,
                      user_id=None, day: Optional[int] = None, constructs: Sequence = (),
                      behavior=None) -> FeatureVector:
    """Features for one user (retention mode) or one user-item pair (proxy mode).

    ``item`` holds ``item_id``, ``topic``, ``quality_score``, ``popularity`` and
    optionally ``skip_rate``; ``demographics`` holds ``age_cohort``, ``region``,
    ``tenure_days``. Retention mode emits one S block per construct listed in
    ``constructs`` (or answered in ``survey``).
    """
    surveys = [] if survey is None else ([survey] if isinstance(survey, SurveyResponse) else list(survey))
    if user_id is None:
        user_id = surveys[0].user_id if surveys else (history[0].user_id if history else 0)
    if day is None:
        if surveys:
            day = surveys[0].timestamp
        else:
            raise ValueError("day is required when no survey response is given")
    item_id = item["item_id"] if item else (surveys[0].item_id if surveys else None)
    table = InteractionTable.from_records([r for r in history if r.user_id == user_id])
    items = ItemTable.from_rows([item]) if item else None
    users = UserTable.from_rows([{**demographics, "user_id": user_id}]) if demographics else None
    builder = FeatureBuilder(table, items, users)
    if item_id is None:
        item_id = -1 if not isinstance(user_id, str) else ""
    if mode == "retention":
        wanted = [Construct.parse(c) for c in constructs] or [s.construct for s in surveys]
        ratings = {c: np.zeros(1, dtype=np.int64) for c in wanted}
        for s in surveys:
            if s.construct in ratings:
                ratings[s.construct][0] = s.rating
        fm = builder.retention_matrix(np.array([user_id]), np.array([item_id]), day, ratings)
    elif mode == "proxy":
        fm = builder.proxy_matrix(np.array([user_id]), np.array([item_id]), day, behavior=behavior)
    else:
        raise ValueError(f"unknown mode {mode!r}; expected 'retention' or 'proxy'")
    return fm.row(0)


# --------------------------------------------------------------------------
# artifacts


class ArtifactKind(str, Enum):
    GBT = "Gbt"
    PROXY = "Proxy"
    PROPENSITY = "Propensity"
    POLICY = "Policy"


@dataclass(frozen=True)
class ModelArtifact:
    kind: ArtifactKind
    payload: dict
    feature_schema: tuple[str, ...] = ()
    version: str = ARTIFACT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "kind", ArtifactKind(self.kind))
        object.__setattr__(self, "feature_schema", tuple(self.feature_schema))

    def to_json(self) -> str:
        doc = {
            "kind": self.kind.value,
            "version": self.version,
            "feature_schema": list(self.feature_schema),
            "payload": self.payload,
        }
        return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False)


def _payload_dim(kind: ArtifactKind, payload: Mapping) -> Optional[int]:
    if kind is ArtifactKind.PROXY:
        return len(payload["weights"])
    if kind is ArtifactKind.PROPENSITY:
        return len(payload["coefficients"])
    if kind is ArtifactKind.GBT:
        return int(payload["n_features"])
    return None


def _check_artifact(artifact: ModelArtifact) -> None:
    try:
        dim = _payload_dim(artifact.kind, artifact.payload)
    except (KeyError, TypeError) as exc:
        raise ArtifactError(f"{artifact.kind.value} payload is missing {exc}") from None
    if dim is not None and dim != len(artifact.feature_schema):
        raise ArtifactError(
            f"feature_schema has {len(artifact.feature_schema)} names but the {artifact.kind.value} "
            f"payload has {dim} parameters"
        )


def save_artifact(artifact: ModelArtifact, path) -> None:
    """Write atomically; refuses artifacts whose schema and parameters disagree."""
    _check_artifact(artifact)
    text = artifact.to_json()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=".artifact-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_artifact(path, expected_version: str = ARTIFACT_VERSION) -> ModelArtifact:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"corrupted artifact {path}: {exc.msg}") from None
    if not isinstance(doc, dict) or not {"kind", "version", "feature_schema", "payload"} <= doc.keys():
        raise ArtifactError(f"corrupted artifact {path}: missing top-level keys")
    if doc["version"] != expected_version:
        raise ArtifactError(f"artifact version mismatch: expected {expected_version}, found {doc['version']}")
    try:
        artifact = ModelArtifact(
            kind=doc["kind"], version=doc["version"], payload=doc["payload"],
            feature_schema=tuple(doc["feature_schema"]),
        )
    except ValueError as exc:
        raise ArtifactError(f"corrupted artifact {path}: {exc}") from None
    _check_artifact(artifact)
    return artifact
