"""Analyses over a run log: AccTime, negative-reward layer pairs, attention differences."""

from __future__ import annotations

import csv
import io
import json
import os
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

NO_MODELS = "no models in budget"
INSUFFICIENT = "insufficient data"
START = "START"


def _steps(records) -> list[dict]:
    return [r for r in records if r.get("type") == "step"]


# --------------------------------------------------------------------------
# AccTime


@dataclass
class AccTime:
    budget_s: float | None
    status: str = "ok"
    n_models: int = 0
    best: float | None = None
    top_k: int = 10
    top_mean: float | None = None
    top_sd: float | None = None


def models_from_log(records) -> list[tuple[float, float, str]]:
    """(time, accuracy, digest) per distinct architecture, at its first evaluation."""
    seen: dict[str, tuple[float, float, str]] = {}
    for r in _steps(records):
        d = r["digest"]
        if d not in seen or r["t"] < seen[d][0]:
            seen[d] = (float(r["t"]), float(r["overall_accuracy"]), d)
    return sorted(seen.values())


def metric_acctime(models, budget_s: float | None, top_k: int = 10) -> AccTime:
    """Best accuracy among models finished within ``budget_s``, plus mean and sd of the top ``k``.

    ``models`` is an iterable of ``(t, accuracy)`` pairs (extra fields ignored)
    or a list of run-log records. The sd is the sample sd (ddof=1); a single
    model reports 0.
    """
    models = list(models)
    if models and isinstance(models[0], dict):
        models = models_from_log(models)
    accs = sorted((m[1] for m in models if budget_s is None or m[0] <= budget_s), reverse=True)
    if not accs:
        return AccTime(budget_s, NO_MODELS, 0, None, top_k)
    top = accs[:top_k]
    sd = float(np.std(top, ddof=1)) if len(top) > 1 else 0.0
    return AccTime(budget_s, "ok", len(accs), accs[0], top_k, float(np.mean(top)), sd)


# --------------------------------------------------------------------------
# layer affinity


def report_layer_affinity(records) -> Counter:
    """Counts of (previous kind, kind) over steps with negative reward; first layers pair with START."""
    counts: Counter = Counter()
    for r in _steps(records):
        if r["reward"] < 0:
            layers = r["arch"]["layers"]
            prev = layers[-2]["kind"] if len(layers) > 1 else START
            counts[(prev, layers[-1]["kind"])] += 1
    return counts


def affinity_rows(counts: Counter) -> list[tuple[str, str, int]]:
    return sorted(((p, c, n) for (p, c), n in counts.items()), key=lambda row: (-row[2], row[0], row[1]))


# --------------------------------------------------------------------------
# attention differences


@dataclass
class AttentionDiff:
    status: str = "ok"
    differences: list[float] = field(default_factory=list)
    pairs: list[dict] = field(default_factory=list)
    mean: float | None = None
    sd: float | None = None
    bins: list[tuple[float, float, int]] = field(default_factory=list)


HIST_EDGES = np.linspace(-1.0, 1.0, 21)


def report_attention_diff(records) -> AttentionDiff:
    """Attention on each rollout's best-reward layer minus attention on its negative-reward layers.

    Both values come from the same query row: the latest one in the rollout,
    which is the row the policy reads at the terminal state and so sees every
    generated layer.
    """
    rollouts: dict[tuple, list[dict]] = defaultdict(list)
    for r in _steps(records):
        rollouts[(r["episode"], r["rollout"])].append(r)
    diffs, pairs = [], []
    for key, steps in sorted(rollouts.items()):
        steps.sort(key=lambda r: r["step"])
        rewards = [s["reward"] for s in steps]
        best = int(np.argmax(rewards))
        if rewards[best] <= 0:
            continue
        last = steps[-1]
        row = last.get("final_attention") or last.get("attention")
        if not row:
            continue
        for slot, rew in enumerate(rewards):
            if rew < 0 and slot != best and slot < len(row) and best < len(row):
                d = float(row[best]) - float(row[slot])
                diffs.append(d)
                pairs.append({"episode": key[0], "rollout": key[1], "best_slot": best, "negative_slot": slot,
                              "best_attention": float(row[best]), "negative_attention": float(row[slot]),
                              "difference": d})
    if not diffs:
        return AttentionDiff(INSUFFICIENT)
    counts, _ = np.histogram(np.clip(diffs, -1.0, 1.0), bins=HIST_EDGES)
    bins = [(float(lo), float(hi), int(n)) for lo, hi, n in zip(HIST_EDGES[:-1], HIST_EDGES[1:], counts)]
    sd = float(np.std(diffs, ddof=1)) if len(diffs) > 1 else 0.0
    return AttentionDiff("ok", diffs, pairs, float(np.mean(diffs)), sd, bins)


# --------------------------------------------------------------------------
# export


def best_models(records, k: int = 10) -> list[dict]:
    best: dict[str, dict] = {}
    for r in _steps(records):
        d = r["digest"]
        if d not in best or r["overall_accuracy"] > best[d]["accuracy"]:
            best[d] = {"digest": d, "accuracy": r["overall_accuracy"], "arch": r["arch"]}
    return sorted(best.values(), key=lambda m: (-m["accuracy"], m["digest"]))[:k]


@dataclass
class Reports:
    acctime: AccTime
    affinity: Counter
    attention: AttentionDiff
    best_models: list[dict]


def build_reports(records, budget_s: float | None = None, top_k: int = 10) -> Reports:
    return Reports(
        metric_acctime(records, budget_s, top_k),
        report_layer_affinity(records),
        report_attention_diff(records),
        best_models(records, top_k),
    )


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def export_reports(records, outdir, budget_s: float | None = None, top_k: int = 10) -> Reports:
    """Write acctime.json, layer_affinity.csv, attention_diff.csv, attention_pairs.csv, best_models.json.

    Everything is computed, and the directory checked for writability, before
    the first file is written.
    """
    outdir = Path(outdir)
    if outdir.exists() and not outdir.is_dir():
        raise NotADirectoryError(f"{outdir} is not a directory")
    outdir.mkdir(parents=True, exist_ok=True)
    if not os.access(outdir, os.W_OK):
        raise PermissionError(f"{outdir} is not writable")
    if isinstance(records, (str, Path)):
        from trlhpo.search import read_log

        records = read_log(records)
    reports = build_reports(records, budget_s, top_k)
    att = reports.attention
    summary_rows = [("status", "", "", att.status)]
    if att.status == "ok":
        summary_rows += [("n", "", "", len(att.differences)), ("mean", "", "", repr(att.mean)),
                         ("sd", "", "", repr(att.sd))]
        summary_rows += [("bin", repr(lo), repr(hi), n) for lo, hi, n in att.bins]
    pair_cols = ["episode", "rollout", "best_slot", "negative_slot", "best_attention", "negative_attention", "difference"]
    files = {
        "acctime.json": json.dumps(asdict(reports.acctime), indent=2),
        "layer_affinity.csv": _csv(affinity_rows(reports.affinity), ["previous", "current", "count"]),
        "attention_diff.csv": _csv(summary_rows, ["statistic", "lo", "hi", "value"]),
        "attention_pairs.csv": _csv([[repr(p[c]) if isinstance(p[c], float) else p[c] for c in pair_cols]
                                     for p in att.pairs], pair_cols),
        "best_models.json": json.dumps(reports.best_models, indent=2),
    }
    for name, text in files.items():
        (outdir / name).write_text(text, encoding="utf-8")
    return reports


def load_reports(outdir) -> Reports:
    outdir = Path(outdir)
    acctime = AccTime(**json.loads((outdir / "acctime.json").read_text()))
    with open(outdir / "layer_affinity.csv", newline="") as fh:
        affinity = Counter({(r["previous"], r["current"]): int(r["count"]) for r in csv.DictReader(fh)})
    att = AttentionDiff()
    with open(outdir / "attention_diff.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            stat = r["statistic"]
            if stat == "status":
                att.status = r["value"]
            elif stat in ("mean", "sd"):
                setattr(att, stat, float(r["value"]))
            elif stat == "bin":
                att.bins.append((float(r["lo"]), float(r["hi"]), int(r["value"])))
    with open(outdir / "attention_pairs.csv", newline="") as fh:
        for r in csv.DictReader(fh):
            pair = {k: (float(v) if k.endswith(("attention", "difference")) else int(v)) for k, v in r.items()}
            att.pairs.append(pair)
            att.differences.append(pair["difference"])
    best = json.loads((outdir / "best_models.json").read_text())
    return Reports(acctime, affinity, att, best)


def format_summary(reports: Reports) -> str:
    at = reports.acctime
    lines = []
    if at.status == "ok":
        lines.append(f"AccTime: best {at.best:.4f}; top-{at.top_k} {at.top_mean:.4f} +/- {at.top_sd:.4f} "
                     f"over {at.n_models} models")
    else:
        lines.append(f"AccTime: {at.status}")
    rows = affinity_rows(reports.affinity)
    lines.append("negative-reward pairs: " + (", ".join(f"{p}->{c}: {n}" for p, c, n in rows) or "none"))
    att = reports.attention
    if att.status == "ok":
        lines.append(f"attention difference (best - negative): mean {att.mean:.4f}, sd {att.sd:.4f}, "
                     f"n {len(att.differences)}")
    else:
        lines.append(f"attention difference: {att.status}")
    if reports.best_models:
        top = reports.best_models[0]
        lines.append(f"best model {top['digest'][:12]} accuracy {top['accuracy']:.4f}")
    return "\n".join(lines)
