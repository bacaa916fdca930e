"""End-to-end pretraining loop.

Per epoch: re-initialize the configured heads, recluster, then per step:
choose a prototype pair, draw the batch, make two views per sample, forward,
assemble the weighted three-term loss, backprop, and take an optimizer step
under the warmup+cosine schedule. Checkpoints restore bitwise-identical
trajectories because every random draw is keyed by (seed, epoch, step).
"""

import hashlib
import io
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .clustering import PrototypeTable, extract_epoch_features, kmeans
from .config import TrainConfig, apply_entries, config_hash, derive_rng, parse_entries, serialize_config
from .losses import LossError, ProjectionBatch, nt_xent, prototypical_ce, siamese_metric_loss, symmetric_prototypical_ce, total_loss
from .model import build_model, encode, reinit_heads
from .optim import bundle_optimizer, lr_schedule
from .sampling import build_pairing_plan, choose_prototype_pair, eligible_clusters, epoch_steps, make_step_views, sample_step_batch

METRICS_COLUMNS = ("epoch", "step", "lr", "loss_total", "loss_contra", "loss_metric", "loss_proto", "wall_ms")

CHECKPOINT_MAGIC = b"SPCLCKPT"
CHECKPOINT_VERSION = 1


class TrainerError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    encoder_arch: str
    bundle: object
    optimizer: object
    epoch: int = 0  # next epoch to run
    global_step: int = 0
    prototype_table: PrototypeTable | None = None
    metrics_rows: list = field(default_factory=list)

    @property
    def rng_cursor(self):
        return {"seed": self.config.seed, "epoch": self.epoch, "global_step": self.global_step}


def _metrics_line(row):
    return ",".join(repr(v) if isinstance(v, float) else str(v) for v in row)


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            fh.write(_metrics_line(row) + "\n")


def _module_arrays(module):
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def _load_module_arrays(module, arrays):
    state = {k: torch.from_numpy(np.asarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)


def save_checkpoint(state, path):
    """Single binary file: versioned header, content digest, pickled payload."""
    payload = {
        "config_text": serialize_config(state.config),
        "config_hash": config_hash(state.config),
        "encoder_arch": state.encoder_arch,
        "input_dim": state.bundle.input_dim,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "model": {name: _module_arrays(m) for name, m in state.bundle.named_modules_flat().items()},
        "optimizer": state.optimizer.state_arrays(),
        "prototype_table": None
        if state.prototype_table is None
        else {
            "centroids": state.prototype_table.centroids,
            "assignment": state.prototype_table.assignment,
            "sample_ids": state.prototype_table.sample_ids,
            "epoch": state.prototype_table.epoch,
            "sse": state.prototype_table.sse,
        },
        "metrics_rows": list(state.metrics_rows),
    }
    buf = io.BytesIO()
    pickle.dump(payload, buf, protocol=4)
    body = buf.getvalue()
    digest = hashlib.sha256(body).hexdigest()
    header = b"%s %d %s\n" % (CHECKPOINT_MAGIC, CHECKPOINT_VERSION, digest.encode())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)
    return path


def _parse_checkpoint_file(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    newline = blob.find(b"\n")
    if newline < 0 or not blob.startswith(CHECKPOINT_MAGIC + b" "):
        raise CheckpointError(f"{path} is not a checkpoint file")
    fields = blob[:newline].split(b" ")
    if len(fields) != 3:
        raise CheckpointError(f"{path}: malformed checkpoint header")
    version = int(fields[1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    body = blob[newline + 1 :]
    digest = hashlib.sha256(body).hexdigest()
    if digest != fields[2].decode():
        raise CheckpointError(f"{path}: content digest mismatch (corrupt file)")
    return pickle.loads(body)


def load_checkpoint(path):
    """Rebuild a TrainState (model, optimizer buffers, counters) from disk."""
    payload = _parse_checkpoint_file(path)
    config = TrainConfig()
    apply_entries(config, parse_entries(payload["config_text"]))
    config.validate()
    bundle = build_model(config, payload["encoder_arch"], input_dim=payload["input_dim"])
    for name, module in bundle.named_modules_flat().items():
        _load_module_arrays(module, payload["model"][name])
    optimizer = bundle_optimizer(bundle, config.optimizer)
    optimizer.load_state_arrays(payload["optimizer"])
    table = None
    if payload["prototype_table"] is not None:
        t = payload["prototype_table"]
        table = PrototypeTable(
            centroids=t["centroids"],
            assignment=t["assignment"],
            sample_ids=t["sample_ids"],
            epoch=t["epoch"],
            sse=t["sse"],
        )
    return TrainState(
        config=config,
        encoder_arch=payload["encoder_arch"],
        bundle=bundle,
        optimizer=optimizer,
        epoch=payload["epoch"],
        global_step=payload["global_step"],
        prototype_table=table,
        metrics_rows=[tuple(r) for r in payload["metrics_rows"]],
    )


def _component_losses(config, bundle, view_batch, emb, epoch, step):
    weights = config.loss_weights
    zero = torch.zeros((), dtype=emb.h.dtype)
    l_contra = zero
    if weights.alpha != 0:
        proj = ProjectionBatch(bundle.head_c(emb.h), view_batch.sibling, view_batch.source_proto)
        l_contra = nt_xent(proj, config.temperature, config.exclude_positive_in_denominator)
    l_metric = zero
    if weights.beta != 0:
        plan = build_pairing_plan(view_batch, derive_rng(config.seed, f"plan/e{epoch}/s{step}"))
        l_metric = siamese_metric_loss(emb, plan, bundle.head_m)
    l_proto = zero
    if weights.gamma != 0:
        labels = view_batch.source_proto
        if config.symmetric_ce:
            l_proto = symmetric_prototypical_ce(
                emb, labels, bundle.head_p,
                a_sce=config.symmetric_ce_a, b_sce=config.symmetric_ce_b, clamp=config.symmetric_ce_clamp,
            )
        else:
            l_proto = prototypical_ce(emb, labels, bundle.head_p)
    return l_contra, l_metric, l_proto


def run_pretraining(
    config,
    dataset,
    encoder_arch="small_resnet",
    out_dir=None,
    resume_state=None,
    checkpoint_every=1,
    step_hook=None,
    epoch_hook=None,
    log=None,
):
    """Run (or resume) pretraining; returns the final TrainState.

    When out_dir is given, writes metrics.csv for the steps this invocation
    executed and one checkpoint per `checkpoint_every` epochs (always the
    final epoch). epoch_hook(state, table) fires after each epoch's steps,
    before the next epoch's head re-initialization.
    """
    if len(dataset) == 0:
        raise TrainerError("dataset is empty")
    config.validate()
    say = log if log is not None else (lambda msg: None)
    input_dim = int(np.prod(dataset.images.shape[1:]))
    if resume_state is not None:
        if config_hash(resume_state.config) != config_hash(config):
            raise CheckpointError("refusing to resume: checkpoint config does not match the requested config")
        state = resume_state
    else:
        bundle = build_model(config, encoder_arch, input_dim=input_dim)
        state = TrainState(
            config=config,
            encoder_arch=encoder_arch,
            bundle=bundle,
            optimizer=bundle_optimizer(bundle, config.optimizer),
        )
    bundle = state.bundle
    n_side = config.samples_per_side
    spe = epoch_steps(len(dataset), config.batch_size)
    total_steps = config.epochs * spe
    warmup_steps = config.optimizer.warmup_epochs * spe
    out_dir = Path(out_dir) if out_dir is not None else None
    local_rows = []
    checkpoints = []

    for epoch in range(state.epoch, config.epochs):
        reinit_heads(bundle, config.reinit_scope, config.seed, epoch)
        for head_name in config.reinit_scope:
            state.optimizer.reset_buffers(head_name + ".")
        try:
            features = extract_epoch_features(dataset, bundle.encoder, config.augmentation, config.seed, epoch)
            table = kmeans(features, config.num_prototypes, derive_rng(config.seed, f"kmeans/e{epoch}"), epoch=epoch)
        except ValueError as exc:
            raise TrainerError(f"epoch {epoch} clustering: {exc}") from exc
        state.prototype_table = table
        usable = eligible_clusters(table)
        if len(usable) < 2:
            raise TrainerError(f"epoch {epoch}: fewer than 2 usable clusters, cannot sample prototype pairs")
        smallest = int(table.cluster_sizes()[usable].min())
        if smallest < n_side:
            say(
                f"epoch {epoch}: smallest usable cluster has {smallest} < {n_side} samples; "
                "drawing with replacement"
            )
        bundle.train()
        for step in range(spe):
            t0 = time.perf_counter()
            try:
                p, q = choose_prototype_pair(
                    table, derive_rng(config.seed, f"pair/e{epoch}/s{step}"), config.proto_sampling_mode
                )
                batch = sample_step_batch(table, p, q, n_side, derive_rng(config.seed, f"draw/e{epoch}/s{step}"))
                views = make_step_views(dataset, table, batch, config.augmentation, config.seed, epoch, step)
                emb = encode(bundle, views)
                l_contra, l_metric, l_proto = _component_losses(config, bundle, views, emb, epoch, step)
                loss = total_loss(l_contra, l_metric, l_proto, config.loss_weights)
            except (LossError, ValueError) as exc:
                raise TrainerError(f"epoch {epoch} step {step}: {exc}") from exc
            lr = lr_schedule(state.global_step, config.optimizer.base_lr, total_steps, warmup_steps)
            if step_hook is not None:
                # parameters are still pre-update here, so hooks can replay
                # the loss computation against the captured batch
                step_hook(
                    epoch=epoch,
                    step=step,
                    views=views,
                    emb=emb,
                    losses=(l_contra, l_metric, l_proto, loss),
                    lr=lr,
                    bundle=bundle,
                )
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step(lr)
            wall_ms = (time.perf_counter() - t0) * 1000.0
            lc = float(l_contra.detach()) if torch.is_tensor(l_contra) else float(l_contra)
            lm = float(l_metric.detach()) if torch.is_tensor(l_metric) else float(l_metric)
            lp = float(l_proto.detach()) if torch.is_tensor(l_proto) else float(l_proto)
            w = config.loss_weights
            # recorded total recombines the recorded components so the
            # weighted-sum identity holds exactly in the log
            row = (epoch, step, float(lr), w.alpha * lc + w.beta * lm + w.gamma * lp, lc, lm, lp, wall_ms)
            state.metrics_rows.append(row)
            local_rows.append(row)
            state.global_step += 1
        state.epoch = epoch + 1
        if epoch_hook is not None:
            epoch_hook(state, table)
        if out_dir is not None:
            last = epoch == config.epochs - 1
            if last or (checkpoint_every and (epoch + 1) % checkpoint_every == 0):
                ckpt = save_checkpoint(state, out_dir / f"epoch_{epoch + 1:04d}.ckpt")
                checkpoints.append(ckpt)
            write_metrics_csv(out_dir / "metrics.csv", local_rows)
        say(f"epoch {epoch}: done ({spe} steps, sse={table.sse:.4f})")
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", local_rows)
    return state, {"metrics_rows": local_rows, "checkpoints": checkpoints}
