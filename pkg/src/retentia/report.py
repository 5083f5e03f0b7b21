"""Plain-text and JSON rendering of stage outputs.

Every stage output that can be rendered is a JSON document with a
``report_kind`` field. :func:`render_report` collects them from an output
directory and emits ``report.json`` and ``report.txt``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .stats import significance_stars

DELTA_REPORT = "delta_report"
AB_REPORT = "ab_report"
BALANCE_REPORT = "balance_report"
VALIDITY_REPORT = "validity_report"
THRESHOLD_REPORT = "threshold_report"
SHAP_REPORT = "shap_report"
KNOWN_KINDS = (BALANCE_REPORT, VALIDITY_REPORT, DELTA_REPORT, SHAP_REPORT, THRESHOLD_REPORT, AB_REPORT)

MODEL_LABELS = {None: "Baseline", "RetentiveRelevance": "+RR", "WorthYourTime": "+WYT", "InterestMatching": "+IM"}
SEGMENT_LABELS = {"overall": "All users", "low_signal": "Low-signal users"}
SEGMENT_ORDER = ("overall", "low_signal")
AB_ORDER = ("sessions_per_user", "like_rate", "skip_rate", "negative_feedback_rate", "low_quality_exposure_rate")


class ReportError(ValueError):
    pass


def _fmt(x: Optional[float], digits: int = 3, sign: bool = False) -> str:
    if x is None or x != x:
        return "n/a"
    return f"{x:+.{digits}f}" if sign else f"{x:.{digits}f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> list[str]:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
    return [line(header), "  ".join("-" * w for w in widths), *map(line, rows)]


def delta_reports_to_dict(reports: Mapping, k: int, params: Optional[dict] = None) -> dict:
    """Serialize ``{(construct, segment): DeltaReport}`` as a ``delta_report`` document."""
    rows = []
    seg_rank = lambda s: (SEGMENT_ORDER.index(s) if s in SEGMENT_ORDER else len(SEGMENT_ORDER), s)
    model_rank = lambda c: list(MODEL_LABELS).index(c) if c in MODEL_LABELS else len(MODEL_LABELS)
    for (construct, segment), rep in sorted(reports.items(), key=lambda kv: (seg_rank(kv[0][1]),
                                                                             model_rank(kv[0][0]))):
        rows.append({
            "construct": construct,
            "segment": segment,
            "n_rows": rep.n_rows,
            "metrics": {m: d.to_dict() for m, d in rep.metrics.items()},
        })
    return {"report_kind": DELTA_REPORT, "k": k, "params": params or {}, "rows": rows}


def _mean(xs) -> float:
    return sum(xs) / len(xs)


def render_delta_table(doc: Mapping) -> list[str]:
    """Model-comparison table: baseline plus one row per survey construct, per segment."""
    lines = [f"Retention model comparison ({doc['k']}-fold cross-validation; deltas are fold-paired)"]
    segments = []
    for row in doc["rows"]:
        if row["segment"] not in segments:
            segments.append(row["segment"])
    for seg in segments:
        rows = [r for r in doc["rows"] if r["segment"] == seg]
        if not rows:
            continue
        lines.append("")
        lines.append(f"{SEGMENT_LABELS.get(seg, seg)} (n = {rows[0]['n_rows']})")
        first = rows[0]["metrics"]
        table = [["Baseline",
                  _fmt(_mean(first["accuracy"]["baseline"])), "",
                  _fmt(_mean(first["roc_auc"]["baseline"])), ""]]
        order = {c: i for i, c in enumerate(MODEL_LABELS)}
        for r in sorted(rows, key=lambda r: order.get(r["construct"], 99)):
            cells = [MODEL_LABELS.get(r["construct"], r["construct"])]
            for m in ("accuracy", "roc_auc"):
                d = r["metrics"][m]
                p = None if d["test"] is None else d["test"]["p_value"]
                cells.append(_fmt(_mean(d["augmented"])))
                cells.append(f"{_fmt(d['mean_delta'], sign=True)}{significance_stars(p)} "
                             f"[{_fmt(d['ci_low'], sign=True)}, {_fmt(d['ci_high'], sign=True)}]"
                             + ("" if d["status"] == "ok" else f" ({d['status']})"))
            table.append(cells)
        lines += _table(["Model", "Accuracy", "Delta accuracy [95% CI]", "AUC", "Delta AUC [95% CI]"], table)
    lines.append("")
    lines.append("Significance: * p < 0.05, ** p < 0.01, *** p < 0.001 (paired t-test across folds)")
    return lines


def render_ab_table(doc: Mapping) -> list[str]:
    """Category / metric / delta table for an A/B report document."""
    sizes = doc["arm_sizes"]
    lines = [f"A/B experiment ({doc['days']} days; control n = {sizes['control']}, "
             f"treatment n = {sizes['treatment']})"]
    rows = []
    ranked = sorted(doc["metrics"], key=lambda k: (AB_ORDER.index(k) if k in AB_ORDER else len(AB_ORDER), k))
    for name in ranked:
        m = doc["metrics"][name]
        stars = significance_stars(m["test"]["p_value"])
        rows.append([
            m["category"], name, _fmt(m["control_mean"], 4), _fmt(m["treatment_mean"], 4),
            f"{_fmt(m['delta'], 4, sign=True)}{stars} [{_fmt(m['ci_low'], 4, sign=True)}, "
            f"{_fmt(m['ci_high'], 4, sign=True)}]",
            f"{_fmt(100 * m['relative_delta'], 2, sign=True)}%",
            _fmt(m["cohens_d"], 3, sign=True),
        ])
    lines += _table(["Category", "Metric", "Control", "Treatment", "Delta [95% CI]", "Relative", "Cohen's d"], rows)
    lines.append("")
    lines.append("Deltas are treatment minus control in absolute units; relative deltas divide by the control mean.")
    return lines


def render_balance_table(doc: Mapping) -> list[str]:
    t = doc["trimming"]
    lines = [f"Nonresponse correction ({t['n_trimmed']} propensities trimmed "
             f"outside [{t['bounds'][0]}, {t['bounds'][1]}])"]
    rows = [[b["covariate"], _fmt(b["smd_unweighted"]), _fmt(b["smd_weighted"]), "yes" if b["passed"] else "no"]
            for b in doc["balance"]]
    lines += _table(["Covariate", "SMD before", "SMD after", "Balanced"], rows)
    if "residual" in doc:
        lines.append(f"Moment residual: {doc['residual']:.3e}")
    return lines


def render_validity_table(doc: Mapping) -> list[str]:
    lines = ["Construct validity"]
    rows = [[c["pair"], _fmt(c["r"]), f"[{_fmt(c['ci_low'])}, {_fmt(c['ci_high'])}]", str(c["n"])]
            for c in doc["correlations"]]
    lines += _table(["Pair", "r", "95% CI", "n"], rows)
    if "fisher" in doc:
        f = doc["fisher"]
        lines.append(f"Fisher z ({f['label']}): z = {_fmt(f['statistic'], 2)}, p = {f['p_value']:.3g}")
    if doc.get("mutual_information"):
        lines.append("")
        lines.append(f"Mutual information with engagement signals (nats, {doc['mi_bins']} bins)")
        lines += _table(["Signal", *doc["mi_columns"]],
                        [[r["signal"], *(_fmt(v) for v in r["values"])] for r in doc["mutual_information"]])
    return lines


def render_threshold_table(doc: Mapping) -> list[str]:
    lines = ["Proxy thresholds"]
    rows = [
        ["boost", _fmt(doc["tau_boost"], 4), _fmt(doc["achieved_pos_precision"]),
         _fmt(doc.get("holdout_pos_precision"))],
        ["demote", _fmt(doc["tau_demote"], 4), _fmt(doc["achieved_neg_precision"]),
         _fmt(doc.get("holdout_neg_precision"))],
    ]
    lines += _table(["Rule", "Threshold", "Calibration precision", "Held-out precision"], rows)
    return lines


def render_shap_table(doc: Mapping, top: int = 10) -> list[str]:
    names = doc["feature_names"]
    ranked = sorted(range(len(names)), key=lambda i: (-doc["mean_abs_phi"][i], names[i]))[:top]
    lines = [f"Feature attributions ({doc['n_explained']} explained rows, mean |phi| in probability units)"]
    lines += _table(["Feature", "Mean |phi|", "Mean phi"],
                    [[names[i], _fmt(doc["mean_abs_phi"][i], 4), _fmt(doc["mean_phi"][i], 4, sign=True)]
                     for i in ranked])
    return lines


RENDERERS = {
    BALANCE_REPORT: render_balance_table,
    VALIDITY_REPORT: render_validity_table,
    DELTA_REPORT: render_delta_table,
    SHAP_REPORT: render_shap_table,
    THRESHOLD_REPORT: render_threshold_table,
    AB_REPORT: render_ab_table,
}


def collect(directory) -> list[tuple[str, dict]]:
    """Renderable documents under ``directory`` as ``(relative path, doc)`` in a stable order."""
    root = Path(directory)
    found = []
    for path in sorted(root.rglob("*.json")):
        if path.parent.name == "report" and path.parent.parent == root:
            continue
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError):
            continue
        if isinstance(doc, dict) and "report_kind" in doc:
            found.append((path.relative_to(root).as_posix(), doc))
    return found


def render_documents(docs: Sequence[tuple[str, dict]]) -> tuple[dict, str]:
    if not docs:
        raise ReportError("nothing to render")
    for name, doc in docs:
        if doc["report_kind"] not in RENDERERS:
            raise ReportError(f"unknown artifact kind {doc['report_kind']!r} in {name}")
    docs = sorted(docs, key=lambda nd: (KNOWN_KINDS.index(nd[1]["report_kind"]), nd[0]))
    sections = []
    for name, doc in docs:
        sections.append("\n".join([f"== {name} ==", *RENDERERS[doc["report_kind"]](doc)]))
    text = "\n\n".join(sections) + "\n"
    return {"sections": [{"source": name, **doc} for name, doc in docs]}, text


def render_report(directory, out_dir=None) -> dict:
    """Render every recognized stage output under ``directory``.

    Writes ``report.json`` and ``report.txt`` into ``out_dir`` (default
    ``directory/report``) and returns their paths.
    """
    root = Path(directory)
    if not root.is_dir():
        raise ReportError(f"nothing to render: {root} is not a directory")
    payload, text = render_documents(collect(root))
    target = Path(out_dir) if out_dir is not None else root / "report"
    target.mkdir(parents=True, exist_ok=True)
    json_path = target / "report.json"
    text_path = target / "report.txt"
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    text_path.write_text(text, encoding="utf-8")
    return {"json": str(json_path), "text": str(text_path)}
