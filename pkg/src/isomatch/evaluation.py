"""Correspondence quality metrics: per-vertex geodesic errors, cumulative
accuracy curves, and the correlation between the two training losses."""

import json

import numpy as np

from .errors import DataError, NumericsError

DEFAULT_THRESHOLDS = np.linspace(0.0, 0.25, 200)

NORMALIZATIONS = ("diameter", "sqrt_area", "none")


class ErrorCurve:
    """Cumulative matching accuracy: fraction of vertices whose normalized
    geodesic error falls below each threshold."""

    __slots__ = ("thresholds", "fractions", "mean_error")

    def __init__(self, thresholds, fractions, mean_error):
        thresholds = np.ascontiguousarray(thresholds, dtype=np.float64)
        fractions = np.ascontiguousarray(fractions, dtype=np.float64)
        if thresholds.shape != fractions.shape or thresholds.ndim != 1:
            raise DataError("thresholds and fractions must match 1-D shapes")
        if thresholds.size and (np.diff(thresholds) < 0).any():
            raise DataError("thresholds must be ascending")
        if fractions.size and ((np.diff(fractions) < 0).any()
                               or fractions.min() < 0 or fractions.max() > 1):
            raise DataError("fractions must be non-decreasing in [0, 1]")
        thresholds.setflags(write=False)
        fractions.setflags(write=False)
        self.thresholds = thresholds
        self.fractions = fractions
        self.mean_error = float(mean_error)


def _dist_array(d):
    arr = d.d if hasattr(d, "d") else np.asarray(d)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise DataError(f"distance matrix must be square, got {arr.shape}")
    return arr


def geodesic_errors(pred, gt, d_y, normalization="diameter",
                    total_area=None):
    """e_i = d_Y(pred(i), gt(i)) / norm over ground-truth-matched vertices.

    Vertices the ground truth leaves unmatched are skipped; the returned
    array covers the matched subset in source order.
    """
    if pred.n_x != gt.n_x:
        raise DataError(
            f"map lengths differ: pred {pred.n_x}, gt {gt.n_x}")
    if pred.n_y != gt.n_y:
        raise DataError(
            f"target sizes differ: pred {pred.n_y}, gt {gt.n_y}")
    D = _dist_array(d_y)
    if D.shape[0] != pred.n_y:
        raise DataError(
            f"distance matrix is {D.shape[0]}x{D.shape[0]}, target has "
            f"{pred.n_y} vertices")
    if normalization not in NORMALIZATIONS:
        raise DataError(f"unknown normalization '{normalization}'")
    idx = gt.matched
    if idx.size == 0:
        raise DataError("ground truth matches no vertices")
    if (pred.map[idx] < 0).any():
        raise DataError("prediction unmatched at an evaluated vertex")
    raw = D[pred.map[idx], gt.map[idx]].astype(np.float64)
    if normalization == "diameter":
        norm = float(D.max())
        if norm <= 0:
            raise DataError("degenerate diameter")
    elif normalization == "sqrt_area":
        if total_area is None:
            raise DataError("sqrt_area normalization needs total_area")
        if total_area <= 0:
            raise DataError("total_area must be positive")
        norm = float(np.sqrt(total_area))
    else:
        norm = 1.0
    return raw / norm


def curve(errors, thresholds=None):
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 1 or errors.size == 0:
        raise DataError("need a non-empty 1-D error array")
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
    thresholds = np.asarray(thresholds, dtype=np.float64)
    ordered = np.sort(errors)
    fractions = np.searchsorted(ordered, thresholds, side="right") \
        / errors.size
    return ErrorCurve(thresholds, fractions, errors.mean())


def save_curve(path, curve_, metadata=None):
    """CSV `threshold,fraction` plus a JSON metadata sidecar at path.meta."""
    with open(path, "w") as fh:
        fh.write("threshold,fraction\n")
        for t, f in zip(curve_.thresholds, curve_.fractions):
            fh.write(f"{float(t)!r},{float(f)!r}\n")
    meta = dict(metadata or {})
    meta["mean_error"] = curve_.mean_error
    with open(path + ".meta", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_curve(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    with open(path + ".meta") as fh:
        meta = json.load(fh)
    if rows.size:
        thresholds, fractions = rows[:, 0], rows[:, 1]
    else:
        thresholds = fractions = np.empty(0)
    return ErrorCurve(thresholds, fractions, meta["mean_error"]), meta


def loss_correlation(history):
    """Pearson correlation of the log losses plus the supervised-loss ratio.

    history rows follow the training log schema (unsup_loss, sup_loss).
    Quantifies how far minimizing the unlabeled distortion also drives the
    labeled loss down.
    """
    unsup = []
    sup = []
    for row in history:
        if row.get("sup_loss") is None:
            continue
        unsup.append(row["unsup_loss"])
        sup.append(row["sup_loss"])
    if len(sup) < 2:
        raise DataError("need at least two iterations with supervised loss")
    unsup = np.asarray(unsup)
    sup = np.asarray(sup)
    if (unsup <= 0).any() or (sup <= 0).any():
        raise NumericsError("non-positive loss, log correlation undefined")
    lu = np.log(unsup)
    ls = np.log(sup)
    if np.ptp(lu) == 0 or np.ptp(ls) == 0:
        raise NumericsError("zero variance loss series")
    pearson = float(np.corrcoef(lu, ls)[0, 1])
    return {"pearson": pearson,
            "final_over_initial_sup": float(sup[-1] / sup[0])}
