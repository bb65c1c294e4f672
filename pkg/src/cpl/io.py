"""File formats: calibration CSVs, rule files, report CSVs and SVG charts.

Input CSVs are header-bound. Feature columns are named ``f0 .. f{p-1}``;
the remaining columns depend on the score family::

    abs_residual:    f0,...,f{p-1},prediction,label
    cqr:             f0,...,f{p-1},q_lo,q_hi,label
    classification:  f0,...,f{p-1},s0,...,s{K-1},label_index
"""

from __future__ import annotations

import csv
import json
import math
import os
import re
from dataclasses import dataclass
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import Column, Dataset, ShiftBasis, parse_element
from .hypothesis import hypothesis_from_dict
from .scores import family_from_dict

FORMAT_VERSION = 1
FAMILIES = ("abs_residual", "cqr", "classification")
_FEATURE = re.compile(r"^f(\d+)$")
_CLASS = re.compile(r"^s(\d+)$")


class InputError(ValueError):
    """Malformed or inconsistent input file."""


# ------------------------------------------------------------------ CSV input

def _schema(header: list, family: str, path: str):
    feats, classes, other = {}, {}, {}
    for pos, name in enumerate(header):
        name = name.strip()
        if (m := _FEATURE.match(name)) is not None:
            feats[int(m.group(1))] = pos
        elif (m := _CLASS.match(name)) is not None:
            classes[int(m.group(1))] = pos
        else:
            other[name] = pos
    p = len(feats)
    if sorted(feats) != list(range(p)):
        raise InputError(f"{path}: feature columns must be f0..f{p - 1} without gaps")
    if family == "abs_residual":
        needed = ["prediction", "label"]
    elif family == "cqr":
        needed = ["q_lo", "q_hi", "label"]
    elif family == "classification":
        needed = ["label_index"]
        if not classes or sorted(classes) != list(range(len(classes))):
            raise InputError(f"{path}: classification files need score columns s0..s{{K-1}}")
    else:
        raise InputError(f"unknown score family {family!r}; expected one of {', '.join(FAMILIES)}")
    missing = [c for c in needed if c not in other]
    extra = [c for c in other if c not in needed]
    if missing or extra or (family != "classification" and classes):
        raise InputError(f"{path}: schema mismatch for {family} (missing {missing}, unexpected "
                         f"{extra + [f's{k}' for k in classes] if family != 'classification' else extra})")
    fcols = [feats[j] for j in range(p)]
    if family == "classification":
        pcols = [classes[k] for k in range(len(classes))]
        lcol = other["label_index"]
    else:
        pcols = [other[c] for c in needed[:-1]]
        lcol = other["label"]
    return fcols, pcols, lcol


def load_csv(path: str, family: str, task: Optional[str] = None) -> Dataset:
    """Read a calibration CSV into a :class:`Dataset`.

    Parameters
    ----------
    path : str
        UTF-8, comma-separated file with a header row.
    family : {"abs_residual", "cqr", "classification"}
        Selects the expected payload columns.
    task : str, optional
        ``"regression"`` or ``"classification"``; inferred from ``family``
        when omitted and checked against it otherwise.

    Raises
    ------
    InputError
        On an empty file, a header that does not match the schema, or a
        malformed row (the message names the 1-based line number).
    """
    expected_task = "classification" if family == "classification" else "regression"
    if task is not None and task != expected_task:
        raise InputError(f"family {family!r} implies task {expected_task!r}, got {task!r}")
    if not os.path.isfile(path):
        raise InputError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file")
        fcols, pcols, lcol = _schema(header, family, path)
        X, P, L = [], [], []
        K = len(pcols) if family == "classification" else None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
            try:
                x = [float(row[c]) for c in fcols]
                pay = [float(row[c]) for c in pcols]
                lab = float(row[lcol])
            except ValueError as exc:
                raise InputError(f"{path}:{line}: {exc}") from None
            if not all(math.isfinite(v) for v in x + pay + [lab]):
                raise InputError(f"{path}:{line}: non-finite value")
            if family == "cqr" and pay[0] > pay[1]:
                raise InputError(f"{path}:{line}: q_lo > q_hi")
            if family == "classification" and (lab != int(lab) or not 0 <= lab < K):
                raise InputError(f"{path}:{line}: label_index {row[lcol].strip()} outside [0, {K})")
            X.append(x)
            P.append(pay)
            L.append(lab)
    if not X:
        raise InputError(f"{path}: no data rows")
    X = np.array(X, dtype=float).reshape(len(X), len(fcols))
    return Dataset.from_arrays(X, np.array(P), np.array(L), task=expected_task, payload_kind=family, K=K)


def write_csv_dataset(ds: Dataset, path: str) -> None:
    """Write ``ds`` in the input schema of its family (round-trips through :func:`load_csv`)."""
    kind = ds.payload_kind
    head = [f"f{j}" for j in range(ds.p)]
    if kind == "abs_residual":
        head += ["prediction", "label"]
    elif kind == "cqr":
        head += ["q_lo", "q_hi", "label"]
    else:
        head += [f"s{k}" for k in range(ds.K)] + ["label_index"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for x, pay, lab in zip(ds.X, ds.payload, ds.labels):
            last = str(int(lab)) if kind == "classification" else repr(float(lab))
            w.writerow([repr(float(v)) for v in x] + [repr(float(v)) for v in pay] + [last])


# ------------------------------------------------------------ basis specs

def _load_column(path: str, n: int) -> np.ndarray:
    if not os.path.isfile(path):
        raise InputError(f"basis column file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]  # header
    try:
        vals = np.array([float(r[0]) for r in rows], dtype=float)
    except (ValueError, IndexError):
        raise InputError(f"{path}: basis column must hold one number per line") from None
    if vals.shape[0] != n:
        raise InputError(f"{path}: {vals.shape[0]} values for {n} records")
    if not np.all(np.isfinite(vals)):
        raise InputError(f"{path}: non-finite basis value")
    return vals


def resolve_basis(spec: str | Sequence[str], dataset: Dataset):
    """Parse a basis spec, materialising ``file:<path>`` columns.

    Each ``file:`` element appends the file's per-record values to the
    dataset as a new feature column and is replaced by a ``col:`` reference
    to it. Returns ``(basis, dataset)``.
    """
    specs = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    specs = [s for s in specs if s]
    if not specs:
        raise InputError("empty basis spec")
    elements = []
    for s in specs:
        if s.startswith("file:"):
            col = _load_column(s[len("file:"):], dataset.n)
            dataset = dataset.with_columns(col)
            elements.append(Column(dataset.p - 1))
        else:
            try:
                elements.append(parse_element(s))
            except ValueError as exc:
                raise InputError(str(exc)) from None
    basis = ShiftBasis(tuple(elements))
    if basis.max_column >= dataset.p:
        raise InputError(f"basis references column {basis.max_column} but the data has {dataset.p} features")
    return basis, dataset


# ------------------------------------------------------------- rule files

def rule_to_dict(rule) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "alpha": float(rule.alpha),
        "family": rule.family.describe(),
        "hypothesis": rule.hyp.describe(),
        "basis": rule.basis.specs,
        "beta": None if rule.beta is None else [float(b) for b in rule.beta],
        "provenance": rule.provenance,
    }


def write_rule(rule, path: str) -> None:
    """Serialise a :class:`PredictionRule` as JSON.

    Floats are written with Python's shortest round-trip representation, so
    :func:`read_rule` recovers every parameter bit for bit.
    """
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rule_to_dict(rule), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_rule(path: str):
    from .solver import PredictionRule

    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"rule file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: corrupt rule file ({exc})") from None
    if not isinstance(d, dict) or "format_version" not in d:
        raise InputError(f"{path}: missing format_version")
    if d["format_version"] != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported format_version {d['format_version']!r} (expected {FORMAT_VERSION})")
    try:
        beta = None if d.get("beta") is None else np.array(d["beta"], dtype=float)
        return PredictionRule(family_from_dict(d["family"]), hypothesis_from_dict(d["hypothesis"]),
                              float(d["alpha"]), ShiftBasis.parse(d["basis"]), beta, dict(d.get("provenance", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: corrupt rule file ({exc})") from None


# ----------------------------------------------------------- report CSVs

def fmt(v, digits: int = 6) -> str:
    if isinstance(v, str):
        return v
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.{digits}f}"


def write_table(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_report(report, path: str, basis_specs: Sequence[str] = ()) -> None:
    """Key-value CSV of an :class:`EvalReport`."""
    rows = [("n", report.n), ("alpha", report.alpha), ("marginal_coverage", report.marginal_coverage),
            ("avg_length", report.avg_length)]
    rows += [(f"length_{k}", v) for k, v in report.length_quantiles.items()]
    specs = list(basis_specs) or [f"dir{j}" for j in range(len(report.shift_gap))]
    rows += [(f"gap[{s}]", float(g)) for s, g in zip(specs, report.shift_gap)]
    for g, c in report.per_group_coverage.items():
        rows.append((f"coverage[{g}]", c.coverage))
        rows.append((f"count[{g}]", c.count))
    write_table(path, ("quantity", "value"), rows)


@dataclass
class MethodRow:
    method: str
    report: object = None  # EvalReport, or None for an oracle value
    length: float = math.nan


def write_comparison(path: str, methods: Sequence[MethodRow], group_names: Sequence[str],
                     reference: str = "split_conformal") -> None:
    """One row per method: coverage, length, ratio to ``reference`` and per-group coverage."""
    ref = next((m for m in methods if m.method == reference), None)
    ref_len = ref.report.avg_length if ref is not None and ref.report is not None else math.nan
    header = ["method", "marginal_coverage", "avg_length", "length_ratio_vs_" + reference, "worst_group_gap"]
    header += [f"coverage[{g}]" for g in group_names]
    rows = []
    for m in methods:
        if m.report is None:
            L = m.length
            rows.append([m.method, None, L, L / ref_len if ref_len > 0 else None, None] + [None] * len(group_names))
            continue
        r = m.report
        per = [r.per_group_coverage[g].coverage if g in r.per_group_coverage else None for g in group_names]
        rows.append([m.method, r.marginal_coverage, r.avg_length,
                     r.avg_length / ref_len if ref_len > 0 else None,
                     r.worst_group_gap() if r.per_group_coverage else None] + per)
    write_table(path, header, rows)


# ---------------------------------------------------------------- SVG charts

_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3")


def _svg(width, height, body):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def coverage_chart(path: str, group_names: Sequence[str], series: dict, target: float,
                   title: str = "Per-group coverage") -> None:
    """Grouped bars of per-group coverage with a dashed ``1 - alpha`` line.

    ``series`` maps a method name to coverages aligned with ``group_names``
    (``None`` for an undefined group).
    """
    ng, nm = len(group_names), max(len(series), 1)
    left, right, top, bottom = 50, 20, 30, 90
    bar = 10
    slot = nm * bar + 8
    width = left + right + max(ng, 1) * slot
    height = 320
    plot_h = height - top - bottom
    lo = min([target - 0.1] + [v for vals in series.values() for v in vals if v is not None])
    lo = max(0.0, math.floor(lo * 20) / 20)
    hi = 1.0

    def y(v):
        return top + plot_h * (hi - v) / (hi - lo)

    body = [f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for k in range(6):
        v = lo + (hi - lo) * k / 5
        body.append(f'<line x1="{left}" x2="{width - right}" y1="{y(v):.2f}" y2="{y(v):.2f}" stroke="#ddd"/>')
        body.append(f'<text x="{left - 4}" y="{y(v) + 4:.2f}" text-anchor="end">{v:.2f}</text>')
    for gi, g in enumerate(group_names):
        x0 = left + gi * slot + 4
        for mi, (name, vals) in enumerate(series.items()):
            v = vals[gi]
            if v is None:
                continue
            v = max(v, lo)
            body.append(f'<rect x="{x0 + mi * bar:.2f}" y="{y(v):.2f}" width="{bar - 1}" '
                        f'height="{y(lo) - y(v):.2f}" fill="{_PALETTE[mi % len(_PALETTE)]}"/>')
        cx = x0 + nm * bar / 2
        body.append(f'<text x="{cx:.2f}" y="{y(lo) + 10:.2f}" text-anchor="end" '
                    f'transform="rotate(-60 {cx:.2f} {y(lo) + 10:.2f})">{escape(g)}</text>')
    body.append(f'<line x1="{left}" x2="{width - right}" y1="{y(target):.2f}" y2="{y(target):.2f}" '
                f'stroke="black" stroke-dasharray="5,3"/>')
    for mi, name in enumerate(series):
        lx = left + mi * 130
        body.append(f'<rect x="{lx}" y="{height - 14}" width="10" height="10" fill="{_PALETTE[mi % len(_PALETTE)]}"/>')
        body.append(f'<text x="{lx + 14}" y="{height - 5}">{escape(name)}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_svg(width, height, body))


def length_chart(path: str, lengths: dict, title: str = "Average length") -> None:
    """One bar per method with its value printed above."""
    names = list(lengths)
    left, top, bottom = 50, 30, 40
    slot = 90
    width = left + 20 + slot * max(len(names), 1)
    height = 300
    plot_h = height - top - bottom
    hi = max([v for v in lengths.values() if math.isfinite(v)] + [1e-12]) * 1.1

    def y(v):
        return top + plot_h * (hi - v) / hi

    body = [f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<line x1="{left}" x2="{width - 20}" y1="{y(0):.2f}" y2="{y(0):.2f}" stroke="black"/>']
    for i, name in enumerate(names):
        v = lengths[name]
        x0 = left + i * slot + 15
        if math.isfinite(v):
            body.append(f'<rect x="{x0}" y="{y(v):.2f}" width="{slot - 30}" height="{y(0) - y(v):.2f}" '
                        f'fill="{_PALETTE[i % len(_PALETTE)]}"/>')
            body.append(f'<text x="{x0 + (slot - 30) / 2:.1f}" y="{y(v) - 4:.2f}" text-anchor="middle">{v:.3f}</text>')
        body.append(f'<text x="{x0 + (slot - 30) / 2:.1f}" y="{y(0) + 16:.2f}" text-anchor="middle">{escape(name)}</text>')
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_svg(width, height, body))
