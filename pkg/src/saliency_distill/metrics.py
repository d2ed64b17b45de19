"""Saliency evaluation: adaptive-threshold F-beta, MAE and E-measure."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gridcore import Grid, ShapeError

BETA2 = 0.3
EPS = 1e-12


def _pair(pred, gt, check_binary=True) -> tuple[np.ndarray, np.ndarray]:
    p = pred.data if isinstance(pred, Grid) else np.asarray(pred, dtype=np.float64)
    g = gt.data if isinstance(gt, Grid) else np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    if check_binary and not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("ground truth must be binary")
    return p, g


def adaptive_threshold(p: np.ndarray) -> float:
    return min(2.0 * float(p.mean()), 1.0)


def binarize_adaptive(p: np.ndarray) -> np.ndarray:
    return p > adaptive_threshold(p)


def f_beta(pred, gt) -> float:
    p, g = _pair(pred, gt)
    pos = binarize_adaptive(p)
    gt_pos = g > 0.5
    n_pred = int(pos.sum())
    if n_pred == 0:
        return 1.0 if not gt_pos.any() else 0.0
    tp = int((pos & gt_pos).sum())
    precision = tp / n_pred
    recall = tp / int(gt_pos.sum()) if gt_pos.any() else 0.0
    if precision + recall == 0:
        return 0.0
    return (1 + BETA2) * precision * recall / (BETA2 * precision + recall)


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt, check_binary=False)
    return float(np.abs(p - g).mean())


def enhanced_alignment(fm: np.ndarray, gm: np.ndarray) -> float:
    """E-measure core on two binary maps.

    When either map is constant the alignment term is undefined; the score is
    then the fraction of pixels where the two maps agree.
    """
    fm = np.asarray(fm, dtype=np.float64)
    gm = np.asarray(gm, dtype=np.float64)
    if fm.min() == fm.max() or gm.min() == gm.max():
        return float((fm == gm).mean())
    phi_f = fm - fm.mean()
    phi_g = gm - gm.mean()
    xi = 2.0 * phi_f * phi_g / (phi_f ** 2 + phi_g ** 2 + EPS)
    return float(((1.0 + xi) ** 2 / 4.0).mean())


def e_measure(pred, gt) -> float:
    """Enhanced-alignment measure on the adaptively binarised prediction."""
    p, g = _pair(pred, gt)
    return enhanced_alignment(binarize_adaptive(p), g > 0.5)


@dataclass
class EvalReport:
    ids: list[str]
    fbeta: list[float]
    mae: list[float]
    emeasure: list[float]

    @property
    def count(self) -> int:
        return len(self.ids)

    @property
    def mean_fbeta(self) -> float:
        return float(np.mean(self.fbeta))

    @property
    def mean_mae(self) -> float:
        return float(np.mean(self.mae))

    @property
    def mean_emeasure(self) -> float:
        return float(np.mean(self.emeasure))

    def to_text(self) -> str:
        lines = ["id,fbeta,mae,emeasure"]
        for row in zip(self.ids, self.fbeta, self.mae, self.emeasure):
            lines.append(f"{row[0]},{row[1]:.17g},{row[2]:.17g},{row[3]:.17g}")
        lines.append(f"mean,{self.mean_fbeta:.17g},{self.mean_mae:.17g},{self.mean_emeasure:.17g}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            f.write(self.to_text())


def evaluate_maps(pairs) -> EvalReport:
    """``pairs``: iterable of (id, prediction, gt)."""
    rep = EvalReport([], [], [], [])
    for sid, pred, gt in pairs:
        if gt is None:
            raise ValueError(f"sample {sid} has no ground truth")
        rep.ids.append(sid)
        rep.fbeta.append(f_beta(pred, gt))
        rep.mae.append(mae(pred, gt))
        rep.emeasure.append(e_measure(pred, gt))
    return rep


def evaluate_dataset(source, dataset) -> EvalReport:
    """Score a model (anything with ``forward(Grid)``) or a ``{id: label}`` mapping."""
    def pairs():
        for s in dataset:
            if s.gt is None:
                raise ValueError(f"sample {s.id} has no ground truth")
            if isinstance(source, dict):
                if s.id not in source:
                    raise KeyError(f"no label for sample {s.id}")
                lab = source[s.id]
                pred = getattr(lab, "grid", lab)
            else:
                pred = source.forward(s.stack.planes)
            yield s.id, pred, s.gt
    return evaluate_maps(pairs())
