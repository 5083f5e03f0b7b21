"""Batch pipeline: one subcommand per stage, a JSON config and a manifest per stage.

Stages read their inputs from earlier stage directories under the output root
(or from the files named in the config's ``data`` section) and write into
``<out>/<stage>/``. Outputs are staged in a hidden directory and moved into
place only when the stage succeeds.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
from dataclasses import fields
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import __version__
from ._rng import derive_seed, keyed_uniform
from .bias import balance_report, compute_smd, fit_cbps, weight_frame
from .core import (ArtifactKind, BEHAVIOR_INPUTS, Construct, FeatureBuilder, FeatureMatrix, InteractionTable,
                   ItemTable, ModelArtifact, UserTable, load_artifact, load_interaction_table, load_labels,
                   load_surveys, proxy_schema, read_jsonl, save_artifact, write_jsonl)
from .evaluation import build_retention_dataset, paired_comparisons, shap_summary
from .gbt import GbtParams, GradientBoostedTreesClassifier
from .proxy import BehaviorModel, ProxyLogisticRegression, calibrate_thresholds, realized_precisions, train_proxy
from .ranking import ExperimentContext, RankingPolicy, ab_simulate, rank_scores
from .report import (BALANCE_REPORT, AB_REPORT, SHAP_REPORT, THRESHOLD_REPORT, VALIDITY_REPORT,
                     delta_reports_to_dict, render_report)
from .stats import fisher_z_compare, mutual_information, pearson_r
from .synthworld import WorldConfig, default_horizon, emit_datasets, generate_world

log = logging.getLogger("retentia")

STAGES = ("generate", "debias", "validity", "train-retention", "evaluate", "explain", "train-proxy", "calibrate",
          "rank", "ab-sim", "report")
DATA_FILES = ("interactions", "surveys", "labels", "users", "items")
NONRESPONSE_COVARIATES = ("age_cohort", "region", "tenure_days")
MI_SIGNALS = ("h_views", "h_likes", "h_comments", "h_shares", "h_skips", "h_watch_time", "history_days")

DEFAULTS: dict = {
    "seed": 0,
    "data": None,
    "world": {},
    "horizon_days": None,
    "debias": {"trim_low": 0.1, "trim_high": 0.9, "tol": 1e-8, "max_iter": 100, "smd_threshold": 0.1},
    "validity": {"mi_bins": 5},
    "retention": {
        "gbt": GbtParams().to_dict(),
        "k": 10,
        "bootstrap_iterations": 1000,
        "segments": ["overall", "low_signal"],
        "constructs": [c.value for c in Construct],
        "model_construct": Construct.RETENTIVE_RELEVANCE.value,
    },
    "explain": {"n_explain": 10, "n_background": 50, "n_permutations": 2000},
    "proxy": {"lambda": 1e-3, "tol": 1e-8, "max_iters": 500, "calibration_fraction": 0.25,
              "holdout_fraction": 0.25, "behavior_rows": 200000},
    "calibrate": {"pos_precision_target": 0.80, "neg_precision_target": 0.60},
    "policy": {"alpha": None, "beta": 0.5, "alpha_iqr_factor": 0.5},
    "rank": {"n_users": 20, "slate_size": 20},
    "ab": {"days": 14, "n_users": None, "slate_size": 20, "consume": 5, "bootstrap_iterations": 1000},
}


class ValidationFailure(Exception):
    """Bad configuration or missing inputs (exit status 1)."""


# --------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            if path.startswith("world") or path.startswith("data") or base == {}:
                out[key] = value
                continue
            raise ValidationFailure(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, dict) and key not in ("data",):
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; values parse as JSON when possible."""
    if "=" not in assignment:
        raise ValidationFailure(f"--set expects KEY=VALUE, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ValidationFailure(f"bad override key {key!r}")
    patch: dict = {}
    node = patch
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = _parse_value(raw)
    return _merge(cfg, patch)


def bundled_config_path() -> Path:
    return Path(str(resources.files("retentia") / "configs" / "default.json"))


def load_config(path: Optional[str], overrides=(), seed: Optional[int] = None) -> dict:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    path = Path(path) if path else bundled_config_path()
    if not path.is_file():
        raise ValidationFailure(f"config file not found: {path}")
    try:
        user = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"config {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(user, dict):
        raise ValidationFailure("config must be a JSON object")
    cfg = _merge(DEFAULTS, user)
    for assignment in overrides:
        cfg = apply_override(cfg, assignment)
    if seed is not None:
        cfg["seed"] = seed
    validate_config(cfg, base_dir=path.parent)
    return cfg


def validate_config(cfg: dict, base_dir: Path = Path(".")) -> None:
    if not isinstance(cfg.get("seed"), int) or isinstance(cfg.get("seed"), bool):
        raise ValidationFailure("seed is mandatory and must be an integer")
    data = cfg.get("data")
    if data is not None:
        if not isinstance(data, dict):
            raise ValidationFailure("data must map dataset names to file paths")
        missing = [k for k in DATA_FILES if k not in data]
        if missing:
            raise ValidationFailure(f"data section lacks {missing}")
        for k in DATA_FILES:
            p = Path(data[k])
            if not p.is_absolute():
                p = base_dir / p
            if not p.is_file():
                raise ValidationFailure(f"data file for {k!r} not found: {p}")
            data[k] = str(p.resolve())
    else:
        try:
            world_config(cfg)
        except (TypeError, ValueError) as exc:
            raise ValidationFailure(f"invalid world config: {exc}") from None
    try:
        GbtParams(**cfg["retention"]["gbt"])
    except (TypeError, ValueError) as exc:
        raise ValidationFailure(f"invalid retention.gbt: {exc}") from None
    lo, hi = cfg["debias"]["trim_low"], cfg["debias"]["trim_high"]
    if not 0 <= lo < hi <= 1:
        raise ValidationFailure("debias trimming bounds must satisfy 0 <= low < high <= 1")
    for key in ("pos_precision_target", "neg_precision_target"):
        if not 0 < cfg["calibrate"][key] < 1:
            raise ValidationFailure(f"calibrate.{key} must lie in (0, 1)")
    if cfg["retention"]["k"] < 2:
        raise ValidationFailure("retention.k must be >= 2")
    beta = cfg["policy"]["beta"]
    if not 0 <= beta < 1:
        raise ValidationFailure("policy.beta must lie in [0, 1)")
    for c in cfg["retention"]["constructs"] + [cfg["retention"]["model_construct"]]:
        try:
            Construct.parse(c)
        except ValueError as exc:
            raise ValidationFailure(str(exc)) from None


def world_config(cfg: dict) -> WorldConfig:
    known = {f.name for f in fields(WorldConfig)}
    unknown = set(cfg["world"]) - known
    if unknown:
        raise ValueError(f"unknown world keys {sorted(unknown)}")
    params = {**cfg["world"], "seed": derive_seed(cfg["seed"], "generate") % (2 ** 31)}
    return WorldConfig.from_dict(params)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --------------------------------------------------------------------------
# stage context


class Stage:
    """Inputs, scratch output directory and manifest for one stage run."""

    def __init__(self, name: str, cfg: dict, out_root: Path, threads: int = 1):
        self.name = name
        self.cfg = cfg
        self.root = out_root
        self.dir = out_root / name
        self.tmp = out_root / f".{name}.partial"
        self.threads = threads
        self.seed = derive_seed(cfg["seed"], name) % (2 ** 31)
        self.inputs: dict = {}
        self.warnings: list[str] = []
        self._cache: dict = {}

    # -- paths --------------------------------------------------------------

    def stage_file(self, stage: str, name: str, required: bool = True) -> Optional[Path]:
        path = self.root / stage / name
        if not path.is_file():
            if required:
                raise ValidationFailure(f"stage {self.name!r} needs {stage}/{name}; run '{stage}' first")
            return None
        self.inputs[f"{stage}/{name}"] = {"path": str(path), "sha256": file_sha256(path)}
        return path

    def data_file(self, name: str) -> Path:
        data = self.cfg.get("data")
        if data is not None:
            path = Path(data[name])
            self.inputs[name] = {"path": str(path), "sha256": file_sha256(path)}
            return path
        return self.stage_file("generate", f"{name}.jsonl")

    def out(self, name: str) -> Path:
        return self.tmp / name

    # -- data -------------------------------------------------------------

    def interactions(self) -> InteractionTable:
        if "interactions" not in self._cache:
            path = self.data_file("interactions")
            digest = self.inputs.get("interactions", self.inputs.get("generate/interactions.jsonl"))["sha256"]
            cache = self.root / ".cache" / f"interactions-{digest[:32]}.npz"
            if cache.is_file():
                with np.load(cache, allow_pickle=False) as z:
                    table = InteractionTable(**{k: z[k] for k in z.files})
            else:
                table = load_interaction_table(path)
                cache.parent.mkdir(parents=True, exist_ok=True)
                tmp = cache.with_suffix(".tmp.npz")
                np.savez(tmp, **{f.name: getattr(table, f.name) for f in fields(InteractionTable)})
                os.replace(tmp, cache)
            self._cache["interactions"] = table
        return self._cache["interactions"]

    def surveys(self):
        if "surveys" not in self._cache:
            self._cache["surveys"] = load_surveys(self.data_file("surveys"))
        return self._cache["surveys"]

    def labels(self):
        return load_labels(self.data_file("labels"))

    def users(self) -> UserTable:
        return UserTable.from_rows(read_jsonl(self.data_file("users")))

    def items(self) -> ItemTable:
        return ItemTable.from_rows(read_jsonl(self.data_file("items")))

    def world(self):
        if self.cfg.get("data") is not None:
            raise ValidationFailure(f"stage {self.name!r} simulates users and needs a synthetic world; "
                                    "it is unavailable when the config supplies data files")
        path = self.stage_file("generate", "world.json")
        return generate_world(WorldConfig.from_json(path))

    # -- outputs ----------------------------------------------------------

    def write_json(self, name: str, doc) -> None:
        self.out(name).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    def manifest(self) -> dict:
        outputs = sorted(p.relative_to(self.tmp).as_posix() for p in self.tmp.rglob("*") if p.is_file())
        return {
            "stage": self.name,
            "seed": self.cfg["seed"],
            "stage_seed": self.seed,
            "config_hash": config_hash(self.cfg),
            "config": self.cfg,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": outputs,
            "warnings": self.warnings,
            "versions": {
                "retentia": __version__,
                "numpy": np.__version__,
                "python": platform.python_version(),
            },
        }


# --------------------------------------------------------------------------
# stages


def _responders(stage: Stage) -> tuple[UserTable, np.ndarray]:
    users = stage.users()
    surveyed = {s.user_id for s in stage.surveys()}
    return users, np.array([u in surveyed for u in users.user_id.tolist()])


def _covariates(users: UserTable) -> np.ndarray:
    return np.column_stack([users.age_cohort, users.region, users.tenure_days]).astype(float)


def stage_generate(stage: Stage) -> None:
    cfg = stage.cfg
    world = generate_world(world_config(cfg))
    emit_datasets(world, cfg["horizon_days"], stage.tmp)
    stage.write_json("world.json", world.config.to_dict())


def stage_debias(stage: Stage) -> None:
    p = stage.cfg["debias"]
    users, responded = _responders(stage)
    X = _covariates(users)
    model = fit_cbps(X, responded, NONRESPONSE_COVARIATES, tol=p["tol"], max_iter=p["max_iter"])
    prop = model.predict(X)
    frame = weight_frame(prop, responded, (p["trim_low"], p["trim_high"]))
    report = balance_report(X, responded, frame, NONRESPONSE_COVARIATES, threshold=p["smd_threshold"])
    save_artifact(ModelArtifact(ArtifactKind.PROPENSITY, model.estimator.to_payload(), NONRESPONSE_COVARIATES),
                  stage.out("propensity.json"))
    write_jsonl(stage.out("weights.jsonl"), (
        {"user_id": u, "responded": bool(r), "propensity": float(pp), "weight": float(w), "trimmed": bool(t)}
        for u, r, pp, w, t in zip(users.user_id.tolist(), frame.responded, frame.propensity, frame.weight,
                                  frame.trimmed)))
    stage.write_json("balance.json", {"report_kind": BALANCE_REPORT, **report,
                                      "residual": model.estimator.residual_, "n_iter": model.estimator.n_iter_})


def _survey_ratings(stage: Stage) -> tuple[np.ndarray, dict, np.ndarray, np.ndarray]:
    """Per-responder ratings for every construct (0 when missing), survey items and days."""
    by_user: dict = {}
    for s in stage.surveys():
        e = by_user.setdefault(s.user_id, {"item": s.item_id, "day": s.timestamp})
        e[s.construct] = s.rating
    users = sorted(by_user, key=lambda k: (str(type(k)), k))
    ratings = {c: np.array([by_user[u].get(c, 0) for u in users], dtype=np.int64) for c in Construct}
    return (np.array(users), ratings, np.array([by_user[u]["item"] for u in users]),
            np.array([by_user[u]["day"] for u in users], dtype=np.int64))


def stage_validity(stage: Stage) -> None:
    bins = stage.cfg["validity"]["mi_bins"]
    users, ratings, items, days = _survey_ratings(stage)
    correlations = {}
    constructs = list(Construct)
    for i, a in enumerate(constructs):
        for b in constructs[i + 1:]:
            ok = (ratings[a] > 0) & (ratings[b] > 0)
            if ok.sum() >= 4:
                correlations[(a, b)] = pearson_r(ratings[a][ok], ratings[b][ok])
    rows = [{"pair": f"{a.short.upper()}-{b.short.upper()}", **res.to_dict()} for (a, b), res in correlations.items()]
    doc = {"report_kind": VALIDITY_REPORT, "correlations": rows, "mi_bins": bins}
    rr, wyt, im = Construct.RETENTIVE_RELEVANCE, Construct.WORTH_YOUR_TIME, Construct.INTEREST_MATCHING
    if (rr, wyt) in correlations and (rr, im) in correlations:
        c1, c2 = correlations[(rr, wyt)], correlations[(rr, im)]
        f = fisher_z_compare(c1.r, c1.n, c2.r, c2.n)
        doc["fisher"] = {"label": "RR-WYT vs RR-IM", **f.to_dict()}
    builder = FeatureBuilder(stage.interactions(), stage.items(), stage.users())
    fm = builder.retention_matrix(users, items, days)
    mi_rows = []
    for c in constructs:
        ok = ratings[c] > 0
        if ok.sum() < 2:
            continue
        mi_rows.append({"signal": c.value, "values": [
            mutual_information(ratings[c][ok], fm.values[ok, fm.names.index(s)], bins, bins) for s in MI_SIGNALS]})
    doc["mi_columns"] = list(MI_SIGNALS)
    doc["mutual_information"] = mi_rows
    stage.write_json("validity.json", doc)


def _retention_dataset(stage: Stage):
    r = stage.cfg["retention"]
    ds = build_retention_dataset(stage.interactions(), stage.surveys(), stage.labels(), stage.items(),
                                 stage.users(), r["constructs"])
    weights_path = stage.stage_file("debias", "weights.jsonl", required=False)
    if weights_path is None:
        users, responded = _responders(stage)
        X = _covariates(users)
        thr = stage.cfg["debias"]["smd_threshold"]
        worst = max(abs(compute_smd(X[:, j], responded)) for j in range(X.shape[1])
                    if np.std(X[:, j]) > 0) if 0 < responded.sum() < responded.size else 0.0
        if worst > thr:
            stage.warnings.append(f"survey responders differ from the user population (max |SMD| {worst:.3f} "
                                  f"> {thr}); run 'debias' first to trim and weight responders")
        return ds
    rows = {r["user_id"]: r for r in read_jsonl(weights_path)}
    keep = np.array([not rows.get(u, {"trimmed": False})["trimmed"] for u in ds.user_ids.tolist()])
    ds = ds.take(np.nonzero(keep)[0])
    w = np.array([rows[u]["weight"] if u in rows else 1.0 for u in ds.user_ids.tolist()])
    return type(ds)(ds.features, ds.labels, ds.user_ids, ds.engagement_total, w)


def _gbt_params(stage: Stage) -> GbtParams:
    return GbtParams(**{**stage.cfg["retention"]["gbt"], "seed": stage.cfg["retention"]["gbt"].get("seed", 0)})


def stage_train_retention(stage: Stage) -> None:
    ds = _retention_dataset(stage)
    params = _gbt_params(stage)
    construct = Construct.parse(stage.cfg["retention"]["model_construct"])
    for tag, cols in (("baseline", ds.columns_for("HRUCD")), (construct.short, ds.columns_for("HRUCD", construct))):
        X = ds.features.columns(cols).values
        model = GradientBoostedTreesClassifier(**params.to_dict()).fit(X, ds.labels, feature_names=cols)
        save_artifact(ModelArtifact(ArtifactKind.GBT, model.to_payload(), cols), stage.out(f"gbt_{tag}.json"))
    stage.write_json("dataset.json", {"n_rows": len(ds), "positive_rate": float(ds.labels.mean()),
                                      "feature_names": list(ds.features.names)})


def stage_evaluate(stage: Stage) -> None:
    r = stage.cfg["retention"]
    ds = _retention_dataset(stage)
    reports = paired_comparisons(ds, "HRUCD", [Construct.parse(c) for c in r["constructs"]], _gbt_params(stage),
                                 k=r["k"], seed=stage.seed, segments=r["segments"],
                                 bootstrap_iterations=r["bootstrap_iterations"], n_jobs=stage.threads)
    stage.write_json("deltas.json", delta_reports_to_dict(reports, r["k"], {"gbt": _gbt_params(stage).to_dict()}))


def stage_explain(stage: Stage) -> None:
    p = stage.cfg["explain"]
    construct = Construct.parse(stage.cfg["retention"]["model_construct"])
    art = load_artifact(stage.stage_file("train-retention", f"gbt_{construct.short}.json"))
    model = GradientBoostedTreesClassifier.from_payload(art.payload, art.feature_schema)
    ds = _retention_dataset(stage)
    X = ds.features.columns(art.feature_schema).values
    order = np.argsort(keyed_uniform(stage.seed, "explain", np.arange(len(ds))), kind="stable")
    bg = order[: p["n_background"]]
    rows = order[p["n_background"]: p["n_background"] + p["n_explain"]]
    doc = shap_summary(model, X, X[bg], rows.tolist(), art.feature_schema, seed=stage.seed,
                       n_permutations=p["n_permutations"])
    doc["explained_user_ids"] = [v.item() if hasattr(v, "item") else v for v in ds.user_ids[rows]]
    stage.write_json("shap.json", {"report_kind": SHAP_REPORT, **doc})


def _proxy_rows(stage: Stage, behavior=None):
    """Non-neutral RetentiveRelevance responses with proxy features and split tags."""
    users, ratings, items, days = _survey_ratings(stage)
    rr = ratings[Construct.RETENTIVE_RELEVANCE]
    ok = np.isin(rr, (1, 2, 4, 5))
    users, items, days, y = users[ok], items[ok], days[ok], (rr[ok] >= 4).astype(np.int64)
    builder = FeatureBuilder(stage.interactions(), stage.items(), stage.users())
    names, groups = proxy_schema()
    X = np.zeros((users.size, len(names)))
    for d in np.unique(days):
        sel = days == d
        X[sel] = builder.proxy_matrix(users[sel], items[sel], int(d), behavior=behavior).values
    p = stage.cfg["proxy"]
    u = keyed_uniform(derive_seed(stage.cfg["seed"], "train-proxy") % (2 ** 31), "split",
                      np.array([hash_id(v) for v in users.tolist()]))
    split = np.where(u < p["calibration_fraction"], "calibration",
                     np.where(u < p["calibration_fraction"] + p["holdout_fraction"], "holdout", "train"))
    return FeatureMatrix(names, groups, X), y, split, builder, days


def hash_id(value) -> int:
    """Stable non-negative integer for an opaque identifier."""
    if isinstance(value, (int, np.integer)) and value >= 0:
        return int(value)
    return int.from_bytes(hashlib.sha256(str(value).encode()).digest()[:7], "little")


def _behavior(stage: Stage) -> BehaviorModel:
    return BehaviorModel.from_payload(json.loads(stage.stage_file("train-proxy", "behavior.json").read_text()))


def _proxy(stage: Stage) -> ProxyLogisticRegression:
    art = load_artifact(stage.stage_file("train-proxy", "proxy.json"))
    return ProxyLogisticRegression.from_payload(art.payload, art.feature_schema)


def stage_train_proxy(stage: Stage) -> None:
    p = stage.cfg["proxy"]
    table = stage.interactions()
    survey_days = np.unique([s.timestamp for s in stage.surveys()])
    rows = np.nonzero(np.isin(table.day, survey_days))[0][: p["behavior_rows"]]
    builder = FeatureBuilder(table, stage.items(), stage.users())
    parts = []
    for d in np.unique(table.day[rows]):
        sel = rows[table.day[rows] == d]
        parts.append((sel, builder.proxy_matrix(table.user_id[sel], table.item_id[sel], int(d))))
    order = np.concatenate([s for s, _ in parts])
    inputs = np.vstack([fm.columns(BEHAVIOR_INPUTS).values for _, fm in parts])
    behavior = BehaviorModel.fit(FeatureMatrix(BEHAVIOR_INPUTS, ("E",) * len(BEHAVIOR_INPUTS), inputs),
                                 table.like[order], table.skip[order], lam=p["lambda"])
    fm, y, split, _, _ = _proxy_rows(stage, behavior)
    train = split == "train"
    model = train_proxy(fm.take(np.nonzero(train)[0]), y[train], lam=p["lambda"], tolerance=p["tol"],
                        max_iters=p["max_iters"])
    save_artifact(ModelArtifact(ArtifactKind.PROXY, model.to_payload(), fm.names), stage.out("proxy.json"))
    stage.write_json("behavior.json", behavior.to_payload())
    stage.write_json("proxy_summary.json", {
        "n_train": int(train.sum()), "n_calibration": int((split == "calibration").sum()),
        "n_holdout": int((split == "holdout").sum()), "positive_rate": float(y.mean()),
        "behavior_rows": int(order.size),
    })


def stage_calibrate(stage: Stage) -> None:
    c = stage.cfg["calibrate"]
    behavior, model = _behavior(stage), _proxy(stage)
    fm, y, split, _, _ = _proxy_rows(stage, behavior)
    scores = model.predict_proba(fm)[:, 1]
    cal, hold = split == "calibration", split == "holdout"
    thr = calibrate_thresholds(scores[cal], y[cal], c["pos_precision_target"], c["neg_precision_target"])
    doc = {"report_kind": THRESHOLD_REPORT, **thr.to_dict(),
           "pos_precision_target": c["pos_precision_target"], "neg_precision_target": c["neg_precision_target"]}
    if hold.any():
        pos, neg = realized_precisions(scores[hold], y[hold], thr)
        doc.update(holdout_pos_precision=pos, holdout_neg_precision=neg, n_holdout=int(hold.sum()))
    stage.write_json("thresholds.json", doc)


def _thresholds(stage: Stage):
    from .proxy import ThresholdPair
    return ThresholdPair.from_dict(json.loads(stage.stage_file("calibrate", "thresholds.json").read_text()))


def stage_rank(stage: Stage) -> None:
    p, r = stage.cfg["policy"], stage.cfg["rank"]
    world = stage.world()
    thr = _thresholds(stage)
    ctx = ExperimentContext.build(world, _proxy(stage), _behavior(stage), stage.cfg["horizon_days"])
    n = min(r["n_users"], world.config.n_users)
    users = np.repeat(world.user_ids[:n], r["slate_size"])
    slots = np.tile(np.arange(r["slate_size"]), n)
    items = world.choose_items(users, 0, slots, stage.seed, stream="rank_cand")
    base = world.base_scores(users, items, 0, slots, stage.seed)
    if p["alpha"] is None:
        sample = world.base_scores(np.arange(world.config.n_users), np.arange(world.config.n_users)
                                   % world.config.n_items, 0, 0, stage.seed)
        policy = RankingPolicy.from_base_scores(sample, thr, beta=p["beta"], alpha_iqr_factor=p["alpha_iqr_factor"])
    else:
        policy = RankingPolicy(float(p["alpha"]), float(p["beta"]), thr)
    save_artifact(ModelArtifact(ArtifactKind.POLICY, policy.to_dict(), ctx.proxy.feature_names_),
                  stage.out("policy.json"))
    p_hat = ctx.p_hat(users, items)
    dump = []
    for u in range(n):
        sel = slice(u * r["slate_size"], (u + 1) * r["slate_size"])
        for pos, cand in enumerate(rank_scores(items[sel], base[sel], p_hat[sel], policy)):
            dump.append({"user_id": int(world.user_ids[u]), "day": ctx.start_day, "position": pos,
                         **cand.to_dict()})
    write_jsonl(stage.out("slates.jsonl"), dump)


def stage_ab_sim(stage: Stage) -> None:
    a = stage.cfg["ab"]
    world = stage.world()
    art = load_artifact(stage.stage_file("rank", "policy.json"))
    policy = RankingPolicy.from_dict(art.payload)
    ctx = ExperimentContext.build(world, _proxy(stage), _behavior(stage), stage.cfg["horizon_days"])
    rep = ab_simulate(world, policy.disabled(), policy, a["days"], stage.seed, n_users=a["n_users"],
                      slate_size=a["slate_size"], consume=a["consume"],
                      bootstrap_iterations=a["bootstrap_iterations"], context=ctx)
    stage.write_json("ab.json", {"report_kind": AB_REPORT, "policy": policy.to_dict(), **rep.to_dict()})


def stage_report(stage: Stage) -> None:
    render_report(stage.root, out_dir=stage.tmp)
    for p in sorted(stage.root.rglob("*.json")):
        rel = p.relative_to(stage.root)
        if rel.parts[0].startswith(".") or rel.parts[0] == "report" or p.name == "manifest.json":
            continue
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "report_kind" in doc:
            stage.inputs[rel.as_posix()] = {"path": str(p), "sha256": file_sha256(p)}


RUNNERS: dict[str, Callable[[Stage], None]] = {
    "generate": stage_generate,
    "debias": stage_debias,
    "validity": stage_validity,
    "train-retention": stage_train_retention,
    "evaluate": stage_evaluate,
    "explain": stage_explain,
    "train-proxy": stage_train_proxy,
    "calibrate": stage_calibrate,
    "rank": stage_rank,
    "ab-sim": stage_ab_sim,
    "report": stage_report,
}


# --------------------------------------------------------------------------
# entry points


def default_out_dir() -> Path:
    return Path(os.environ.get("RETENTIA_OUT", "retentia_out"))


def run(subcommand: str, config: Optional[str] = None, overrides=(), seed: Optional[int] = None,
        out: Optional[str] = None, threads: int = 1) -> int:
    """Run one stage; returns the process exit status."""
    if subcommand not in RUNNERS:
        log.error("unknown subcommand %r", subcommand)
        return 1
    try:
        cfg = load_config(config, overrides, seed)
    except ValidationFailure as exc:
        log.error("validation failed: %s", exc)
        return 1
    if threads < 1:
        log.error("validation failed: --threads must be >= 1")
        return 1
    root = Path(out) if out else default_out_dir()
    root.mkdir(parents=True, exist_ok=True)
    stage = Stage(subcommand, cfg, root, threads)
    shutil.rmtree(stage.tmp, ignore_errors=True)
    stage.tmp.mkdir(parents=True)
    try:
        RUNNERS[subcommand](stage)
        manifest = stage.manifest()
        (stage.tmp / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                                 encoding="utf-8")
    except ValidationFailure as exc:
        shutil.rmtree(stage.tmp, ignore_errors=True)
        log.error("validation failed: %s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 2
        shutil.rmtree(stage.tmp, ignore_errors=True)
        log.error("stage %s failed: %s: %s", subcommand, type(exc).__name__, exc)
        return 2
    shutil.rmtree(stage.dir, ignore_errors=True)
    os.replace(stage.tmp, stage.dir)
    for w in stage.warnings:
        log.warning("%s", w)
    log.info("stage %s wrote %s", subcommand, stage.dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retentia", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"retentia {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (default: bundled config)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output root (default: $RETENTIA_OUT or ./retentia_out)")
    common.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. --set retention.k=5")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="retentia: %(levelname)s: %(message)s", stream=sys.stderr)
    return run(args.command, args.config, args.overrides, args.seed, args.out, args.threads)


if __name__ == "__main__":
    sys.exit(main())
