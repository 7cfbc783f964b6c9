"""Scoring trained models along seismic lines.

Every experiment here follows the same recipe: pick a :class:`PromptLayout`
(which CDPs of each evaluation line act as prompts), predict the primaries of
all ``M`` CDPs of the line, and score each position. Inference mirrors
training: every gather is normalized by its own mean and std, prompt labels
by their prompt's statistics, and predictions are mapped back with the
query's statistics before scoring.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .model import SupportSet
from .training import normalize_pair

PSNR_CAP_DB = 120.0

CSV_COLUMNS = ("position", "psnr_mean_db", "psnr_std_db", "mse_mean", "layout", "model_id", "n_lines")
ENSEMBLE_COLUMNS = ("position", "mse_mean", "pred_std_mean")


@dataclass(frozen=True)
class PromptLayout:
    positions: tuple
    label_source: str = "ground_truth"  # or "external_file"

    def __post_init__(self):
        pos = tuple(int(p) for p in self.positions)
        if not pos:
            raise ValueError("a prompt layout needs at least one position")
        if len(set(pos)) != len(pos):
            raise ValueError(f"prompt positions must be distinct, got {pos}")
        if min(pos) < 0:
            raise ValueError("prompt positions must be non-negative")
        if self.label_source not in ("ground_truth", "external_file"):
            raise ValueError(f"unknown label_source {self.label_source!r}")
        object.__setattr__(self, "positions", tuple(sorted(pos)))

    @classmethod
    def parse(cls, text: str, label_source: str = "ground_truth") -> "PromptLayout":
        """Parse ``"0,10,20"``."""
        try:
            pos = [int(t) for t in text.replace(";", ",").split(",") if t.strip()]
        except ValueError as exc:
            raise ValueError(f"cannot parse prompt layout {text!r}") from exc
        return cls(tuple(pos), label_source)

    def check(self, M: int) -> None:
        if max(self.positions) >= M:
            raise ValueError(f"prompt position {max(self.positions)} outside a line of {M} CDPs")

    @property
    def descriptor(self) -> str:
        return ";".join(str(p) for p in self.positions)

    @property
    def S(self) -> int:
        return len(self.positions)


@dataclass
class EvalReport:
    psnr_mean: np.ndarray  # [M] dB
    psnr_std: np.ndarray  # [M] dB
    mse_mean: np.ndarray  # [M]
    layout: PromptLayout
    model_id: str = ""
    dataset_id: str = ""
    n_lines: int = 0
    psnr_lines: Optional[np.ndarray] = field(default=None, repr=False)  # [n_lines, M]
    mse_lines: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return len(self.psnr_mean)

    def mean_psnr(self, positions: Optional[Sequence[int]] = None) -> float:
        sel = self.psnr_mean if positions is None else self.psnr_mean[list(positions)]
        return float(np.mean(sel))


@dataclass
class EnsembleStats:
    mse_mean: np.ndarray  # [M]
    pred_std_mean: np.ndarray  # [M]
    spearman: float
    K: int
    n_lines: int
    layout: Optional[PromptLayout] = None


def psnr(pred, truth, peak: Optional[float] = None, cap: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB, ``10 log10(peak**2 / mse)``.

    ``peak`` defaults to ``max |truth|``; a zero error returns ``cap``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"psnr shape mismatch: {pred.shape} vs {truth.shape}")
    mse = float(np.mean((pred - truth) ** 2))
    if mse == 0.0:
        return cap
    if peak is None:
        peak = float(np.max(np.abs(truth)))
    return float(10.0 * np.log10(peak * peak / mse))


def _support(gathers, prompt_labels, layout: PromptLayout) -> SupportSet:
    pos = list(layout.positions)
    pairs = [normalize_pair(gathers[p], prompt_labels[p])[:2] for p in pos]
    return SupportSet(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))


def predict_line(model, gathers, prompt_labels, layout: PromptLayout, identity: bool = False) -> np.ndarray:
    """Predicted primaries for every CDP of one line, in data units.

    ``identity=True`` prompts with ``prompt_label := prompt``.
    """
    gathers = np.asarray(gathers, dtype=np.float64)
    M = gathers.shape[0]
    layout.check(M)
    labels = gathers if identity else np.asarray(prompt_labels, dtype=np.float64)
    support = _support(gathers, labels, layout)
    norm = [normalize_pair(g, g) for g in gathers]
    Xn = np.stack([n[0] for n in norm])[:, None]
    mu = np.array([n[2] for n in norm])[:, None, None]
    sigma = np.array([n[3] for n in norm])[:, None, None]
    pred = model.predict(Xn, support)[:, 0]
    return pred * sigma + mu


def _lines(dataset, lines):
    return list(dataset.eval_indices) if lines is None else list(lines)


def _prompt_labels(dataset, i, external):
    return dataset.labels[i] if external is None else external[i]


def eval_by_position(
    model,
    dataset,
    layout: PromptLayout,
    lines: Optional[Sequence[int]] = None,
    external_labels=None,
    model_id: str = "",
) -> EvalReport:
    """PSNR and MSE of predicted primaries at every CDP position.

    ``external_labels`` (``[N, M, H, W]``) replaces the ground-truth prompt
    labels when the layout's ``label_source`` is ``"external_file"``.
    """
    if layout.label_source == "external_file" and external_labels is None:
        raise ValueError("layout asks for external prompt labels but none were given")
    external = external_labels if layout.label_source == "external_file" else None
    idx = _lines(dataset, lines)
    layout.check(dataset.M)
    P = np.zeros((len(idx), dataset.M))
    E = np.zeros((len(idx), dataset.M))
    for row, i in enumerate(idx):
        truth = np.asarray(dataset.labels[i], dtype=np.float64)
        pred = predict_line(model, dataset.gathers[i], _prompt_labels(dataset, i, external), layout)
        peak = float(np.max(np.abs(truth)))
        for m in range(dataset.M):
            E[row, m] = np.mean((pred[m] - truth[m]) ** 2)
            P[row, m] = psnr(pred[m], truth[m], peak=peak)
    return EvalReport(
        psnr_mean=P.mean(axis=0),
        psnr_std=P.std(axis=0),
        mse_mean=E.mean(axis=0),
        layout=layout,
        model_id=model_id,
        dataset_id=str(getattr(dataset, "path", "")),
        n_lines=len(idx),
        psnr_lines=P,
        mse_lines=E,
    )


def prompt_spacing_study(model, dataset, layouts, lines=None, external_labels=None, model_id: str = "") -> list:
    return [
        eval_by_position(model, dataset, lay, lines, external_labels, model_id=model_id) for lay in layouts
    ]


def identity_steering(model, dataset, layout: PromptLayout, lines=None) -> tuple:
    """Mean L1 between prediction and normalized input, for identity vs true prompts.

    Returns ``(l1_identity, l1_truth)``; both are in normalized units.
    """
    idx = _lines(dataset, lines)
    out = []
    for identity in (True, False):
        total = 0.0
        for i in idx:
            g = np.asarray(dataset.gathers[i], dtype=np.float64)
            support = _support(g, g if identity else dataset.labels[i], layout)
            Xn = np.stack([normalize_pair(x, x)[0] for x in g])[:, None]
            total += float(np.mean(np.abs(model.predict(Xn, support) - Xn)))
        out.append(total / len(idx))
    return tuple(out)


def spearman(a, b) -> float:
    return float(stats.spearmanr(a, b).statistic)


def ensemble_variance(models, dataset, layout: PromptLayout, lines=None) -> EnsembleStats:
    """Error and disagreement of ``K`` identically configured models per position.

    The MSE curve averages squared error over models, pixels and lines; the
    std curve averages the per-pixel standard deviation across the ``K``
    predictions.
    """
    models = list(models)
    if len(models) < 2:
        raise ValueError("an ensemble needs at least two models")
    ref = (models[0].architecture, models[0].spec)
    for m in models[1:]:
        if (m.architecture, m.spec) != ref:
            raise ValueError("ensemble members must share architecture and spec")
    idx = _lines(dataset, lines)
    M = dataset.M
    mse = np.zeros(M)
    std = np.zeros(M)
    for i in idx:
        truth = np.asarray(dataset.labels[i], dtype=np.float64)
        preds = np.stack([predict_line(m, dataset.gathers[i], truth, layout) for m in models])
        mse += ((preds - truth[None]) ** 2).mean(axis=(0, 2, 3))
        # Spread about the first member: same std, but exactly zero for identical models.
        std += (preds - preds[:1]).std(axis=0).mean(axis=(1, 2))
    mse /= len(idx)
    std /= len(idx)
    rho = spearman(std, mse) if np.ptp(std) > 0 and np.ptp(mse) > 0 else float("nan")
    return EnsembleStats(mse, std, rho, len(models), len(idx), layout)


# ---------------------------------------------------------------- CSV export


def _fmt(x) -> str:
    return f"{float(x):.9g}"


def export_report(report: EvalReport, path) -> None:
    """Write one row per CDP position."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in range(report.M):
            w.writerow(
                [
                    m,
                    _fmt(report.psnr_mean[m]),
                    _fmt(report.psnr_std[m]),
                    _fmt(report.mse_mean[m]),
                    report.layout.descriptor,
                    report.model_id,
                    report.n_lines,
                ]
            )


def export_reports(reports, path) -> None:
    """Concatenate several reports (e.g. a spacing study) in one CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in reports:
            for m in range(r.M):
                w.writerow(
                    [m, _fmt(r.psnr_mean[m]), _fmt(r.psnr_std[m]), _fmt(r.mse_mean[m]), r.layout.descriptor, r.model_id, r.n_lines]
                )


def read_report(path) -> list:
    """Parse a report CSV back into a list of row dicts with typed values."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["position"] = int(r["position"])
        r["n_lines"] = int(r["n_lines"])
        for k in ("psnr_mean_db", "psnr_std_db", "mse_mean"):
            r[k] = float(r[k])
    return rows


def export_ensemble(ens: EnsembleStats, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENSEMBLE_COLUMNS)
        for m in range(len(ens.mse_mean)):
            w.writerow([m, _fmt(ens.mse_mean[m]), _fmt(ens.pred_std_mean[m])])
        w.writerow(["spearman", _fmt(ens.spearman), ""])


__all__ = [
    "EnsembleStats",
    "EvalReport",
    "PSNR_CAP_DB",
    "PromptLayout",
    "ensemble_variance",
    "eval_by_position",
    "export_ensemble",
    "export_report",
    "export_reports",
    "identity_steering",
    "predict_line",
    "prompt_spacing_study",
    "psnr",
    "read_report",
    "spearman",
]
