"""Training loop: ADAM with bias correction, ordered-pair sampling with
per-appearance vertex shuffling, batch-summed gradients, CSV logging, and
periodic checkpoints.

The log format is one CSV row per iteration with columns
(iteration, unsup_loss, sup_loss, wall_ms); the supervised column is blank
when no ground truth is available. Loss columns are written with full float
repr so fixed-seed reruns reproduce them bitwise (wall_ms is timing and is
not seed-controlled).
"""

import csv
import os
import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import net as netmod
from .errors import DataError, NumericsError
from .fmaps import (RIDGE_SCALE, pipeline_backward, pipeline_forward,
                    sup_loss, unsup_loss)
from .geodesic import GeodesicMatrix
from .shot import DescriptorField
from .spectral import SpectralBasis

MAX_GRAD_NORM = 100.0


@dataclass
class TrainConfig:
    iterations: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_pairs: int = 4
    k: int = 120
    ridge_scale: float = RIDGE_SCALE
    seed: int = 0
    mode: str = "unsupervised"
    log_supervised: bool = True
    depth: int = netmod.DEFAULT_DEPTH
    checkpoint_every: int = 100
    out_dir: str = None

    def __post_init__(self):
        if self.iterations < 0:
            raise DataError("iterations must be non-negative")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise DataError(f"{name} must lie in (0, 1)")
        if self.epsilon <= 0:
            raise DataError("epsilon must be positive")
        if self.batch_pairs < 1:
            raise DataError("batch_pairs must be at least 1")
        if self.k < 1:
            raise DataError("k must be at least 1")
        if self.ridge_scale < 0:
            raise DataError("ridge_scale must be non-negative")
        if self.mode not in ("unsupervised", "supervised"):
            raise DataError(f"unknown mode '{self.mode}'")
        if self.depth < 1:
            raise DataError("depth must be at least 1")
        if self.checkpoint_every < 1:
            raise DataError("checkpoint_every must be at least 1")


def adam_step(params, grads, config, step):
    """Bias-corrected ADAM update, in place."""
    if step < 1:
        raise DataError("ADAM step count starts at 1")
    grad_w, grad_b = grads
    for i, g in enumerate(grad_w):
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite weight gradient in block {i}")
    for i, g in enumerate(grad_b):
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite bias gradient in block {i}")
    lr, b1, b2, eps = (config.learning_rate, config.beta1, config.beta2,
                       config.epsilon)
    corr1 = 1.0 - b1 ** step
    corr2 = 1.0 - b2 ** step
    groups = ((params.weights, grad_w, params.m_w, params.v_w),
              (params.biases, grad_b, params.m_b, params.v_b))
    for values, grads_, ms, vs in groups:
        for p, g, m, v in zip(values, grads_, ms, vs):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    params.step = step


def clip_grads(grads, max_norm=MAX_GRAD_NORM):
    """Scale gradients in place so the global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for group in grads:
        for g in group:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for group in grads:
            for g in group:
                g *= scale
    return norm


def pair_ground_truth(bundle_x, bundle_y):
    """Per-pair map from X vertices to Y vertices through shared labels.

    Bundles carry an optional per-vertex template-label array `gt` (negative
    = unlabeled). When Y additionally provides `tmpl_to_vertex` (template id
    to Y vertex, as remeshed bundles do), composition goes through it;
    otherwise labels are matched exactly. Returns None unless every X vertex
    resolves to a Y vertex.
    """
    gx = getattr(bundle_x, "gt", None)
    if gx is None:
        return None
    gx = np.asarray(gx)
    t2v = getattr(bundle_y, "tmpl_to_vertex", None)
    if t2v is not None:
        if gx.min() < 0 or gx.max() >= t2v.size:
            return None
        out = t2v[gx]
        return None if (out < 0).any() else out
    gy = getattr(bundle_y, "gt", None)
    if gy is None:
        return None
    lookup = {}
    for idx, label in enumerate(np.asarray(gy)):
        if label >= 0 and label not in lookup:
            lookup[int(label)] = idx
    out = np.empty(len(gx), dtype=np.int64)
    for i, label in enumerate(gx):
        j = lookup.get(int(label), -1) if label >= 0 else -1
        if j < 0:
            return None
        out[i] = j
    return out


def shuffle_bundle(bundle, rng):
    """Fresh copy of the bundle under a random vertex relabeling. Basis rows,
    distance rows and columns, descriptor rows, areas, and labels all move
    together, so the pair losses are invariant."""
    n = bundle.basis.n
    sigma = rng.permutation(n)
    basis = SpectralBasis(bundle.basis.phi[sigma],
                          bundle.basis.eigenvalues,
                          bundle.basis.mass[sigma])
    arr = bundle.distances.d if hasattr(bundle.distances, "d") \
        else np.asarray(bundle.distances)
    distances = GeodesicMatrix(arr[np.ix_(sigma, sigma)])
    shot = DescriptorField(bundle.shot.values[sigma])
    gt = getattr(bundle, "gt", None)
    t2v = getattr(bundle, "tmpl_to_vertex", None)
    if t2v is not None:
        inv = np.argsort(sigma)  # old index -> new position
        t2v = np.where(t2v >= 0, inv[np.maximum(t2v, 0)], -1)
    return SimpleNamespace(
        basis=basis, distances=distances, shot=shot,
        gt=None if gt is None else np.asarray(gt)[sigma],
        tmpl_to_vertex=t2v,
        mesh=getattr(bundle, "mesh", None))


def sample_batch(dataset, batch_pairs, rng):
    """Ordered pairs drawn uniformly, each side freshly vertex-shuffled.
    Self-pairs only occur when the dataset holds a single shape."""
    if not dataset:
        raise DataError("empty dataset")
    pairs = []
    for _ in range(batch_pairs):
        if len(dataset) == 1:
            i = j = 0
        else:
            i = int(rng.integers(len(dataset)))
            j = int(rng.integers(len(dataset) - 1))
            if j >= i:
                j += 1
        pairs.append((shuffle_bundle(dataset[i], rng),
                      shuffle_bundle(dataset[j], rng)))
    return pairs


def write_log(path, history):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "unsup_loss", "sup_loss", "wall_ms"])
        for row in history:
            out.writerow([row["iteration"], repr(row["unsup_loss"]),
                          "" if row["sup_loss"] is None else repr(row["sup_loss"]),
                          f"{row['wall_ms']:.3f}"])


def read_log(path):
    history = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            history.append({
                "iteration": int(rec["iteration"]),
                "unsup_loss": float(rec["unsup_loss"]),
                "sup_loss": float(rec["sup_loss"]) if rec["sup_loss"] else None,
                "wall_ms": float(rec["wall_ms"]),
            })
    return history


def train_loop(dataset, config):
    """Run the optimizer and return (params, history).

    Each iteration sums pipeline gradients over a sampled batch, clips the
    global norm, and applies one ADAM step. The supervised loss is evaluated
    for monitoring whenever pair ground truth exists; it only drives the
    update in supervised mode.
    """
    if not dataset:
        raise DataError("empty dataset")
    widths = {b.shot.d for b in dataset}
    if len(widths) != 1:
        raise DataError(f"descriptor widths differ across dataset: {widths}")
    if config.mode == "supervised":
        for idx, b in enumerate(dataset):
            if getattr(b, "gt", None) is None:
                raise DataError(
                    f"supervised mode requires ground truth (shape {idx} has none)")
    params = netmod.init_params(width=widths.pop(), depth=config.depth,
                                seed=config.seed)
    rng = np.random.default_rng(config.seed)
    history = []
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
    try:
        for it in range(config.iterations):
            t0 = time.perf_counter()
            batch = sample_batch(dataset, config.batch_pairs, rng)
            total = netmod.zero_grads(params)
            unsup_vals = []
            sup_vals = []
            for bx, by in batch:
                state = pipeline_forward(params, bx, by, config.ridge_scale)
                u_val, u_grad = unsup_loss(state.soft, bx.distances,
                                           by.distances)
                gt = None
                if config.mode == "supervised" or config.log_supervised:
                    gt = pair_ground_truth(bx, by)
                s_val = s_grad = None
                if gt is not None:
                    s_val, s_grad = sup_loss(state.soft, by.distances, gt)
                if config.mode == "supervised":
                    if s_grad is None:
                        raise DataError(
                            "supervised pair lost its ground truth")
                    trained_val, grad_p = s_val, s_grad
                else:
                    trained_val, grad_p = u_val, u_grad
                if not np.isfinite(trained_val):
                    raise NumericsError(
                        f"non-finite {config.mode} loss at iteration {it}")
                netmod.accumulate_grads(
                    total, pipeline_backward(params, state,
                                             grad_p.astype(params.dtype)))
                unsup_vals.append(u_val)
                if s_val is not None:
                    sup_vals.append(s_val)
            clip_grads(total)
            adam_step(params, total, config, params.step + 1)
            history.append({
                "iteration": it,
                "unsup_loss": float(np.mean(unsup_vals)),
                "sup_loss": float(np.mean(sup_vals)) if sup_vals else None,
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            })
            if config.out_dir and (it + 1) % config.checkpoint_every == 0:
                netmod.save_checkpoint(
                    params, os.path.join(config.out_dir,
                                         f"checkpoint_{it + 1:06d}.bin"))
    except Exception:
        # keep whatever checkpoints exist and flush the partial log
        if config.out_dir:
            write_log(os.path.join(config.out_dir, "log.csv"), history)
        raise
    if config.out_dir:
        netmod.save_checkpoint(params,
                               os.path.join(config.out_dir, "checkpoint_final.bin"))
        write_log(os.path.join(config.out_dir, "log.csv"), history)
    return params, history
