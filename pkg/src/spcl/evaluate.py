"""Linear-probe evaluation and true-positive / false-negative distance
diagnostics on the contrastive projection space.

TP distance: cosine similarity between an anchor view and its sibling view.
FN distance: mean cosine similarity between the anchor and every other-sample
view in the batch that shares the anchor's ground-truth label (the masked
false negatives). Both are measured after the contrastive head g_c.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import derive_rng, derive_torch_seed
from .augment import apply_view_params, draw_view_params
from .model import MLPHead  # noqa: F401  (re-export convenience for tests)


class EvalError(ValueError):
    pass


@dataclass
class DistanceReport:
    epoch: int
    tau_used: float
    tp_mean: float
    tp_std: float
    fn_mean: float
    fn_std: float
    n_anchors: int
    n_fn_skipped: int = 0

    def __post_init__(self):
        if self.n_anchors <= 0:
            raise EvalError("report needs at least one anchor")
        for name in ("tp_mean", "fn_mean"):
            v = getattr(self, name)
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise EvalError(f"{name} outside [-1, 1]: {v}")


@dataclass
class ProbeResult:
    top1: float
    top5: float
    n_train: int
    n_test: int

    def __post_init__(self):
        if not 0.0 <= self.top1 <= self.top5 <= 100.0:
            raise EvalError("expected 0 <= top1 <= top5 <= 100")


def make_eval_batches(dataset, batch_size=256):
    """Deterministic partition of a labeled dataset into evaluation batches."""
    if dataset.labels is None:
        raise EvalError("distance diagnostics need ground-truth labels")
    ids = dataset.sample_ids
    batches = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start : start + batch_size]
        batches.append((chunk, dataset.take(chunk), dataset.labels[chunk]))
    return batches


def tp_fn_distances(bundle, dataset_or_batches, aug_spec, seed, tau, epoch=0, batch_size=256):
    """Per-anchor TP/FN cosine similarities aggregated over evaluation batches.

    View augmentations are keyed by sample id, so the report does not depend
    on how the evaluation set is batched or ordered. Anchors whose batch has
    no other same-label sample contribute TP only and are counted as skipped
    for the FN side.
    """
    if hasattr(dataset_or_batches, "take"):
        batches = make_eval_batches(dataset_or_batches, batch_size)
    else:
        batches = list(dataset_or_batches)
    if not batches:
        raise EvalError("no evaluation batches")
    bundle.eval()
    tp_all, fn_all = [], []
    skipped = 0
    with torch.no_grad():
        for ids, images, labels in batches:
            ids = np.asarray(ids, dtype=np.int64)
            labels = np.asarray(labels, dtype=np.int64)
            params = []
            for sid in ids:
                for view in range(2):
                    rng = derive_rng(seed, f"diag/e{epoch}/i{int(sid)}/v{view}")
                    params.append(draw_view_params(aug_spec, rng, images.shape[-2], images.shape[-1]))
            views = apply_view_params(images.repeat_interleave(2, dim=0), params)
            z = bundle.head_c(bundle.encoder(views))
            zn = F.normalize(z, dim=1)
            sim = (zn @ zn.T).numpy()
            v = len(zn)
            sib = np.arange(v) ^ 1
            view_labels = np.repeat(labels, 2)
            view_samples = np.repeat(ids, 2)
            tp_all.append(sim[np.arange(v), sib])
            same_label = view_labels[:, None] == view_labels[None, :]
            other_sample = view_samples[:, None] != view_samples[None, :]
            fn_mask = same_label & other_sample
            counts = fn_mask.sum(axis=1)
            has_fn = counts > 0
            skipped += int((~has_fn).sum())
            if has_fn.any():
                sums = (sim * fn_mask).sum(axis=1)
                fn_all.append(sums[has_fn] / counts[has_fn])
    tp = np.concatenate(tp_all)
    if not fn_all:
        raise EvalError("no false-negative pairs: every class appears once per batch")
    fn = np.concatenate(fn_all)
    return DistanceReport(
        epoch=epoch,
        tau_used=float(tau),
        tp_mean=float(tp.mean()),
        tp_std=float(tp.std()),
        fn_mean=float(fn.mean()),
        fn_std=float(fn.std()),
        n_anchors=int(len(tp)),
        n_fn_skipped=skipped,
    )


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0


def _frozen_features(bundle, dataset, batch_size=512):
    bundle.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunks.append(bundle.encoder(dataset.images[start : start + batch_size]))
    return torch.cat(chunks, dim=0)


def linear_probe(bundle, train_dataset, test_dataset, probe_config=None, seed=0):
    """Train a linear classifier on frozen features; report top-1/top-5."""
    cfg = probe_config or ProbeConfig()
    if train_dataset.labels is None or test_dataset.labels is None:
        raise EvalError("linear probe needs labeled train and test splits")
    train_classes = set(np.unique(train_dataset.labels).tolist())
    missing = sorted(set(np.unique(test_dataset.labels).tolist()) - train_classes)
    if missing:
        raise EvalError(f"classes absent from train split: {missing}")
    n_classes = int(max(train_classes)) + 1

    x_train = _frozen_features(bundle, train_dataset)
    x_test = _frozen_features(bundle, test_dataset)
    y_train = torch.as_tensor(train_dataset.labels)
    y_test = np.asarray(test_dataset.labels)

    probe = torch.nn.Linear(x_train.shape[1], n_classes)
    gen = torch.Generator().manual_seed(derive_torch_seed(seed, "probe/init"))
    with torch.no_grad():
        bound = 1.0 / np.sqrt(x_train.shape[1])
        probe.weight.uniform_(-bound, bound, generator=gen)
        probe.bias.uniform_(-bound, bound, generator=gen)
    buffers = [torch.zeros_like(p) for p in probe.parameters()]
    n = len(x_train)
    steps_per_epoch = max(1, int(np.ceil(n / cfg.batch_size)))
    total = cfg.epochs * steps_per_epoch
    step_idx = 0
    for ep in range(cfg.epochs):
        order = derive_rng(seed, f"probe/shuffle/e{ep}").permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = torch.as_tensor(order[start : start + cfg.batch_size])
            logits = probe(x_train[sel])
            loss = F.cross_entropy(logits, y_train[sel])
            probe.zero_grad()
            loss.backward()
            lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step_idx / total))
            with torch.no_grad():
                for p, buf in zip(probe.parameters(), buffers):
                    buf.mul_(cfg.momentum).add_(p.grad + cfg.weight_decay * p)
                    p.sub_(buf, alpha=lr)
            step_idx += 1
    with torch.no_grad():
        logits = probe(x_test).numpy()
    top1 = 100.0 * float((logits.argmax(axis=1) == y_test).mean())
    k = min(5, n_classes)
    topk = np.argsort(-logits, axis=1)[:, :k]
    top5 = 100.0 * float((topk == y_test[:, None]).any(axis=1).mean())
    return ProbeResult(top1=top1, top5=top5, n_train=n, n_test=len(y_test))


REPORT_COLUMNS = ("epoch", "tau", "tp_mean", "tp_std", "fn_mean", "fn_std")


def export_report(reports, csv_path, plot_path=None):
    """Write reports as CSV and, optionally, a two-panel TP/FN trajectory plot."""
    reports = list(reports)
    if not reports:
        raise EvalError("no reports to export")
    lines = [",".join(REPORT_COLUMNS)]
    for r in reports:
        lines.append(
            ",".join([str(r.epoch)] + [repr(float(v)) for v in (r.tau_used, r.tp_mean, r.tp_std, r.fn_mean, r.fn_std)])
        )
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if plot_path is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        taus = sorted({r.tau_used for r in reports})
        fig, (ax_tp, ax_fn) = plt.subplots(1, 2, figsize=(9, 3.5), sharex=True)
        for tau in taus:
            rows = sorted((r for r in reports if r.tau_used == tau), key=lambda r: r.epoch)
            epochs = [r.epoch for r in rows]
            for ax, means, stds in (
                (ax_tp, [r.tp_mean for r in rows], [r.tp_std for r in rows]),
                (ax_fn, [r.fn_mean for r in rows], [r.fn_std for r in rows]),
            ):
                ax.plot(epochs, means, marker="o", label=f"tau={tau:g}")
                lo = [m - s for m, s in zip(means, stds)]
                hi = [m + s for m, s in zip(means, stds)]
                ax.fill_between(epochs, lo, hi, alpha=0.15)
        ax_tp.set_title("TP distance")
        ax_fn.set_title("FN distance")
        for ax in (ax_tp, ax_fn):
            ax.set_xlabel("epoch")
            ax.set_ylabel("cosine similarity")
            ax.legend()
        fig.tight_layout()
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
    return csv_path
