"""Metrics, control baselines, evaluation reports and plots."""

import json
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import InvalidArgumentError
from .sampler import SamplingOptions, reverse_chain
from .trainer import fit, init_run, to_batch

REPORT_VERSION = 1


def _ranking(scores):
    # Stable sort on negated scores: equal scores keep ascending class order.
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="stable")


def topk_accuracy(scores, labels, k):
    """Fraction of rows whose true class is among the ``k`` best-scored classes."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    m, c = scores.shape
    if not 1 <= k <= c:
        raise InvalidArgumentError(f"k must lie in [1, {c}], got {k}")
    if m == 0:
        return 0.0
    top = _ranking(scores)[:, :k]
    return float((top == labels[:, None]).any(axis=1).mean())


def precision_recall_at_k(scores, labels, k):
    """Overall precision ``H / (k M)`` and recall ``H / sum |Y_m|``.

    ``H`` counts true labels inside each row's top-k, summed over rows.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=bool)
    m, c = scores.shape
    if not 1 <= k <= c:
        raise InvalidArgumentError(f"k must lie in [1, {c}], got {k}")
    if labels.shape != scores.shape:
        raise InvalidArgumentError("labels must be a multi-hot matrix shaped like scores")
    if m and not labels.any(axis=1).all():
        raise InvalidArgumentError(f"label row {int(np.flatnonzero(~labels.any(axis=1))[0])} is empty")
    if m == 0:
        return 0.0, 0.0
    top = _ranking(scores)[:, :k]
    hits = int(np.take_along_axis(labels, top, axis=1).sum())
    return hits / (k * m), hits / int(labels.sum())


def confusion_matrix(predictions, labels, num_classes):
    """Counts indexed ``[true, predicted]``."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    for name, ids in (("prediction", predictions), ("label", labels)):
        if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
            raise InvalidArgumentError(f"{name} ids must lie in [0, {num_classes})")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (labels, predictions), 1)
    return out


@dataclass
class EvaluationReport:
    metrics: dict
    label_mode: str
    num_classes: int
    confusion: list = None
    trajectory: dict = None
    diagnostics: dict = field(default_factory=dict)
    projection: dict = None
    metadata: dict = field(default_factory=dict)
    wall_time: float = None

    def validate(self):
        for key, value in self.metrics.items():
            if not 0.0 <= value <= 1.0:
                raise InvalidArgumentError(f"metric {key}={value} outside [0, 1]")
        if self.confusion is not None:
            cm = np.asarray(self.confusion)
            if cm.shape != (self.num_classes, self.num_classes) or (cm < 0).any():
                raise InvalidArgumentError("confusion matrix has the wrong shape or negative counts")
        return self

    def to_dict(self, include_timing=False):
        out = {
            "version": REPORT_VERSION,
            "metrics": self.metrics,
            "label_mode": self.label_mode,
            "num_classes": self.num_classes,
            "confusion": self.confusion,
            "trajectory": self.trajectory,
            "diagnostics": self.diagnostics,
            "projection": self.projection,
            "metadata": self.metadata,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out

    def to_json(self, include_timing=False):
        return json.dumps(self.to_dict(include_timing), sort_keys=True, indent=2) + "\n"

    def save(self, path, include_timing=False):
        with open(path, "w") as fh:
            fh.write(self.to_json(include_timing))

    @classmethod
    def from_dict(cls, data):
        return cls(
            metrics=data["metrics"],
            label_mode=data["label_mode"],
            num_classes=data["num_classes"],
            confusion=data.get("confusion"),
            trajectory=data.get("trajectory"),
            diagnostics=data.get("diagnostics") or {},
            projection=data.get("projection"),
            metadata=data.get("metadata") or {},
            wall_time=data.get("wall_time"),
        )

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _metric_block(scores, labels, label_mode):
    c = scores.shape[1]
    ks = [k for k in (1, 5) if k <= c]
    metrics = {}
    if label_mode == "single":
        for k in ks:
            metrics[f"acc@{k}"] = topk_accuracy(scores, labels, k)
    else:
        for k in ks:
            p, r = precision_recall_at_k(scores, labels, k)
            metrics[f"pre@{k}"] = p
            metrics[f"rec@{k}"] = r
    return metrics


def _centroid_distance(features, centroids, labels):
    """Per-row distance to the row's class centroid (mean over active classes if multi-hot)."""
    features = np.asarray(features, dtype=np.float64)
    if labels.ndim == 1:
        return np.linalg.norm(features - centroids[labels], axis=1)
    dists = np.linalg.norm(features[:, None, :] - centroids[None, :, :], axis=2)
    return (dists * labels).sum(axis=1) / labels.sum(axis=1)


def pca_projection(arrays, max_points=200):
    """Project the stacked arrays onto their top two principal directions."""
    stacked = np.concatenate([np.asarray(a, dtype=np.float64)[:max_points] for a in arrays])
    mean = stacked.mean(axis=0)
    _, _, vt = np.linalg.svd(stacked - mean, full_matrices=False)
    basis = vt[:2].T
    # Fix sign so the projection does not flip between runs.
    for j in range(basis.shape[1]):
        pivot = np.argmax(np.abs(basis[:, j]))
        if basis[pivot, j] < 0:
            basis[:, j] = -basis[:, j]
    return [((np.asarray(a, dtype=np.float64)[:max_points] - mean) @ basis).tolist() for a in arrays]


def _features_for(model, schedule, visual, generator, options):
    """Aligned features per model kind plus (visited steps, trajectory) for diffusion models."""
    if model.kind == "seda":
        chain = reverse_chain(model, schedule, visual, generator, options)
        return chain.features, chain.steps, chain.trajectory
    with torch.no_grad():
        return model(visual), None, None


def evaluate(model, schedule, test_set, options=None, generator=None, batch_size=256, metadata=None):
    """Run the inference path over ``test_set`` and assemble a report.

    The trajectory diagnostic needs the per-class training centroids stored on
    a diffusion model, and is attached when ``options.record_trajectory`` is set.
    """
    options = options or SamplingOptions()
    if model.head.label_mode != test_set.label_mode:
        raise InvalidArgumentError("test set label mode does not match the classifier head")
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    started = time.perf_counter()
    model.eval()
    n = len(test_set)
    aligned, scores = [], []
    traj_text = traj_vis = None
    steps = None
    has_centroids = hasattr(model, "text_centroids")
    if has_centroids:
        text_c = model.text_centroids.double().numpy()
        vis_c = model.visual_centroids.double().numpy()
    for lo in range(0, n, batch_size):
        batch = to_batch(test_set, np.arange(lo, min(n, lo + batch_size)))
        feats, steps, traj = _features_for(model, schedule, batch["visual"], generator, options)
        with torch.no_grad():
            scores.append(model.head.scores(model.head(feats)).double().numpy())
        aligned.append(feats.double().numpy())
        if traj is not None and has_centroids:
            labels = np.asarray(test_set.labels[lo:lo + batch_size])
            t_rows = np.stack([_centroid_distance(x.numpy(), text_c, labels) for x in traj])
            v_rows = np.stack([_centroid_distance(x.numpy(), vis_c, labels) for x in traj])
            traj_text = t_rows if traj_text is None else np.concatenate([traj_text, t_rows], axis=1)
            traj_vis = v_rows if traj_vis is None else np.concatenate([traj_vis, v_rows], axis=1)
    c = model.head.num_classes
    d = test_set.feature_dim
    scores = np.concatenate(scores) if scores else np.zeros((0, c))
    aligned = np.concatenate(aligned) if aligned else np.zeros((0, d))
    labels = test_set.labels

    report = EvaluationReport(
        metrics=_metric_block(scores, labels, test_set.label_mode),
        label_mode=test_set.label_mode,
        num_classes=c,
        metadata={"model_kind": model.kind, "num_samples": n, **(metadata or {})},
    )
    if test_set.label_mode == "single":
        top1 = _ranking(scores)[:, 0] if n else np.zeros(0, dtype=np.int64)
        report.confusion = confusion_matrix(top1, labels, c).tolist()
    if has_centroids and n:
        report.diagnostics = {
            "aligned_to_text_centroid": float(_centroid_distance(aligned, text_c, labels).mean()),
            "visual_to_text_centroid": float(_centroid_distance(test_set.visual, text_c, labels).mean()),
            "aligned_to_visual_centroid": float(_centroid_distance(aligned, vis_c, labels).mean()),
        }
        if test_set.label_mode == "single":
            proj = pca_projection([test_set.visual, aligned, text_c])
            report.projection = {
                "visual": proj[0],
                "aligned": proj[1],
                "text_centroids": proj[2],
                "labels": labels[:200].tolist(),
            }
    if traj_text is not None:
        report.trajectory = {
            "steps": list(steps),
            "text_centroid_distance": traj_text.mean(axis=1).tolist(),
            "visual_centroid_distance": traj_vis.mean(axis=1).tolist(),
        }
    report.wall_time = time.perf_counter() - started
    return report.validate()


def _train_and_evaluate(kind, train_set, test_set, config, denoiser_kwargs=None, options=None):
    model, generator = init_run(config, train_set, kind=kind, **(denoiser_kwargs or {}))
    result = fit(model, train_set, config, generator=generator)
    eval_gen = torch.Generator().manual_seed(int(config.seed) + 1)
    meta = {"config_fingerprint": config.fingerprint(), "seed": int(config.seed)}
    report = evaluate(result.model, config.schedule(), test_set, options, eval_gen, metadata=meta)
    return result, report


def run_baseline_onestep(train_set, test_set, config, denoiser_kwargs=None):
    """Control arm: a feed-forward projector trained with MSE + CE, then the same head."""
    if train_set.textual is None:
        raise InvalidArgumentError("the one-step baseline needs textual training features")
    return _train_and_evaluate("onestep", train_set, test_set, config, denoiser_kwargs)[1]


def run_visual_baseline(train_set, test_set, config, denoiser_kwargs=None):
    """Raw-visual control: the classifier head trained directly on visual features."""
    return _train_and_evaluate("visual", train_set, test_set, config, denoiser_kwargs)[1]


def run_seda(train_set, test_set, config, denoiser_kwargs=None, options=None):
    """Train the diffusion aligner under ``config`` (ablation switches included) and evaluate."""
    return _train_and_evaluate(config.model_kind, train_set, test_set, config, denoiser_kwargs, options)


def plot_report(report, out_dir):
    """Write the confusion matrix, trajectory curves and 2-D projection as PNGs."""
    import os

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    written = []
    if report.confusion is not None:
        fig, ax = plt.subplots(figsize=(6, 5))
        im = ax.imshow(np.asarray(report.confusion), cmap="Blues")
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.colorbar(im, ax=ax)
        path = os.path.join(out_dir, "confusion.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    if report.trajectory is not None:
        fig, ax = plt.subplots(figsize=(6, 4))
        steps = report.trajectory["steps"]
        ax.plot(steps, report.trajectory["text_centroid_distance"], label="to textual centroid")
        ax.plot(steps, report.trajectory["visual_centroid_distance"], label="to visual centroid")
        ax.invert_xaxis()
        ax.set_xlabel("diffusion step")
        ax.set_ylabel("mean distance")
        ax.legend()
        path = os.path.join(out_dir, "trajectory.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    if report.projection is not None:
        fig, ax = plt.subplots(figsize=(6, 6))
        proj = report.projection
        labels = np.asarray(proj["labels"])
        vis = np.asarray(proj["visual"])
        ali = np.asarray(proj["aligned"])
        cen = np.asarray(proj["text_centroids"])
        ax.scatter(vis[:, 0], vis[:, 1], c=labels, cmap="tab20", marker=".", alpha=0.4, label="visual")
        ax.scatter(ali[:, 0], ali[:, 1], c=labels, cmap="tab20", marker="x", alpha=0.7, label="aligned")
        ax.scatter(cen[:, 0], cen[:, 1], c="black", marker="*", s=80, label="textual centroids")
        ax.legend()
        path = os.path.join(out_dir, "projection.png")
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


__all__ = [
    "EvaluationReport",
    "confusion_matrix",
    "evaluate",
    "plot_report",
    "precision_recall_at_k",
    "run_baseline_onestep",
    "run_seda",
    "run_visual_baseline",
    "topk_accuracy",
]
