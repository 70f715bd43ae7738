"""Optimization loop, learning-rate decay, ablation switches and checkpoints."""

import hashlib
import json
import logging
import os
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import List, NamedTuple

import numpy as np
import torch

from .denoiser import DenoiserConfig, ModelSpec, build_model, classify, predict_clean
from .exceptions import FormatError, InvalidArgumentError, NumericFailureError
from .losses import StagedLossConfig, cross_entropy_loss, reconstruction_mse, staged_loss
from .schedule import build_linear_schedule, forward_noising

logger = logging.getLogger(__name__)

LOSS_TERMS = ("total", "structural", "ce_semantic", "mse", "ce_textual")


class HyperparameterRangeWarning(UserWarning):
    """A hyperparameter lies outside the range the method was tuned over."""


@dataclass
class TrainConfig:
    """Optimization settings.

    The defaults are desk-scale: ``total_steps`` is 200 rather than the
    900-1500 the method was tuned on, because chain length dominates the cost
    of inference.
    """

    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_halving_period_epochs: int = 4
    total_steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    loss: StagedLossConfig = field(default_factory=StagedLossConfig)
    seed: int = 0
    use_dst: bool = True
    use_attention_interaction: bool = True
    use_dsl: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = StagedLossConfig(**self.loss)
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.base_lr <= 0:
            raise InvalidArgumentError("base_lr must be > 0")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be >= 0")
        if self.lr_halving_period_epochs < 1:
            raise InvalidArgumentError("lr_halving_period_epochs must be >= 1")
        if self.total_steps < 1:
            raise InvalidArgumentError("total_steps must be >= 1")
        if self.loss.staged_step > self.total_steps:
            raise InvalidArgumentError("staged_step cannot exceed total_steps")

    @property
    def model_kind(self):
        if not self.use_dst and not self.use_dsl:
            return "visual"
        return "seda"

    def effective_loss(self):
        """Loss config after the ablation switches are applied."""
        loss = self.loss
        semantic_all = self.total_steps if loss.stage_order == "as-written" else 0
        semantic_none = 0 if loss.stage_order == "as-written" else self.total_steps
        if not self.use_dsl:
            return replace(loss, staged_step=semantic_none)
        if not self.use_dst:
            return replace(loss, staged_step=semantic_all)
        return loss

    def schedule(self):
        return build_linear_schedule(self.total_steps, self.beta_start, self.beta_end)

    def to_dict(self):
        return asdict(self)

    def fingerprint(self):
        """Digest of every setting except the epoch budget."""
        payload = self.to_dict()
        payload.pop("epochs")
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


ABLATIONS = {
    "base": dict(use_dst=False, use_attention_interaction=False, use_dsl=False),
    "T": dict(use_dst=True, use_attention_interaction=False, use_dsl=False),
    "TI": dict(use_dst=True, use_attention_interaction=True, use_dsl=False),
    "TIL": dict(use_dst=True, use_attention_interaction=True, use_dsl=True),
}


def apply_ablation(config, name):
    try:
        return replace(config, **ABLATIONS[name])
    except KeyError:
        raise InvalidArgumentError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}") from None


_RANGES = {
    "alpha1": (0.1, 2.0),
    "alpha2": (0.1, 2.0),
    "total_steps": (900, 1500),
    "staged_step": (0, 500),
}


def check_hyperparameter_ranges(config):
    """Warn (never fail) for settings outside the tuned ranges; returns the messages."""
    values = {
        "alpha1": config.loss.alpha1,
        "alpha2": config.loss.alpha2,
        "total_steps": config.total_steps,
        "staged_step": config.loss.staged_step,
    }
    messages = []
    for key, (lo, hi) in _RANGES.items():
        if not lo <= values[key] <= hi:
            messages.append(f"{key}={values[key]} outside tuned range [{lo}, {hi}]")
    for key in ("beta", "gamma"):
        value = getattr(config.loss, key)
        if value not in (0.5, 1.0, 1.5, 2.0):
            messages.append(f"{key}={value} not in tuned grid {{0.5, 1.0, 1.5, 2.0}}")
    for msg in messages:
        warnings.warn(msg, HyperparameterRangeWarning, stacklevel=2)
    return messages


def lr_at_epoch(base_lr, epoch, period=4):
    """Step decay: halve the rate every ``period`` epochs."""
    if epoch < 0 or period < 1:
        raise InvalidArgumentError("need epoch >= 0 and period >= 1")
    return base_lr * 0.5 ** (epoch // period)


def make_model(config, feature_dim, num_classes, label_mode, generator, kind=None, **denoiser_kwargs):
    fusion = "attention" if config.use_attention_interaction else "concat"
    dcfg = DenoiserConfig(feature_dim=feature_dim, fusion=fusion, **denoiser_kwargs)
    return build_model(ModelSpec(kind or config.model_kind, num_classes, label_mode, dcfg), generator)


def make_optimizer(model, config):
    return torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)


def to_batch(dataset, index=None):
    """Torch tensors for (a subset of) a dataset."""
    idx = slice(None) if index is None else np.asarray(index)
    labels = torch.from_numpy(np.ascontiguousarray(dataset.labels[idx]))
    labels = labels.float() if labels.ndim == 2 else labels.long()
    textual = None
    if dataset.textual is not None:
        textual = torch.from_numpy(np.ascontiguousarray(dataset.textual[idx]))
    return {
        "visual": torch.from_numpy(np.ascontiguousarray(dataset.visual[idx])),
        "textual": textual,
        "labels": labels,
    }


def sample_steps(n, total_steps, generator):
    """Per-sample diffusion steps drawn uniformly from [1, T]."""
    return torch.randint(1, total_steps + 1, (n,), generator=generator)


def seda_loss(model, batch, schedule, loss_config, generator):
    x_t = batch["textual"]
    if x_t is None:
        raise InvalidArgumentError("training batches must carry textual features")
    x_v = batch["visual"]
    n = x_v.shape[0]
    steps = sample_steps(n, schedule.total_steps, generator)
    noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    x_noisy = forward_noising(schedule, x_t, steps, noise)
    x_pred = predict_clean(model, x_noisy, steps, x_v)
    logits = classify(model.head, x_pred)
    return staged_loss(loss_config, steps, x_pred, x_v, x_t, logits, batch["labels"], model.head.num_classes)


def _breakdown(total, mse=None, ce=None):
    zero = total.new_zeros(())
    return {
        "total": total,
        "structural": zero,
        "ce_semantic": zero,
        "mse": zero if mse is None else mse,
        "ce_textual": zero if ce is None else ce,
    }


def onestep_loss(model, batch, loss_config):
    if batch["textual"] is None:
        raise InvalidArgumentError("training batches must carry textual features")
    pred = model.project(batch["visual"])
    mse = reconstruction_mse(pred, batch["textual"])
    ce = cross_entropy_loss(classify(model.head, pred), batch["labels"], loss_config.label_mode)
    return _breakdown(loss_config.alpha2 * mse + loss_config.gamma * ce, mse, ce)


def visual_loss(model, batch, loss_config):
    ce = cross_entropy_loss(classify(model.head, batch["visual"]), batch["labels"], loss_config.label_mode)
    return _breakdown(ce, ce=ce)


def train_step(model, batch, schedule, config, optimizer, generator, loss_config=None):
    """One optimizer update; returns the loss breakdown as floats."""
    loss_config = loss_config or config.effective_loss()
    model.train()
    optimizer.zero_grad(set_to_none=True)
    if model.kind == "seda":
        terms = seda_loss(model, batch, schedule, loss_config, generator)._asdict()
    elif model.kind == "onestep":
        terms = onestep_loss(model, batch, loss_config)
    else:
        terms = visual_loss(model, batch, loss_config)
    total = terms["total"]
    if not torch.isfinite(total):
        raise NumericFailureError("non-finite training loss")
    total.backward()
    optimizer.step()
    return {k: float(terms[k].detach()) if torch.is_tensor(terms[k]) else float(terms[k]) for k in LOSS_TERMS}


class FitResult(NamedTuple):
    model: torch.nn.Module
    history: List[dict]
    optimizer: torch.optim.Optimizer
    generator: torch.Generator


def set_centroids(model, train_set):
    if hasattr(model, "text_centroids"):
        with torch.no_grad():
            model.text_centroids.copy_(torch.from_numpy(train_set.class_means("textual")))
            model.visual_centroids.copy_(torch.from_numpy(train_set.class_means("visual")))


def init_run(config, train_set, kind=None, **denoiser_kwargs):
    """Seeded generator and freshly initialized model for ``config``."""
    generator = torch.Generator().manual_seed(int(config.seed))
    model = make_model(
        config, train_set.feature_dim, train_set.num_classes, train_set.label_mode, generator,
        kind=kind, **denoiser_kwargs,
    )
    return model, generator


def fit(model, train_set, config, checkpoint_dir=None, generator=None, resume_from=None, stop_after=None):
    """Train ``model`` for ``config.epochs`` epochs.

    ``generator`` drives shuffling, step draws and noise; pass the one used for
    initialization to keep a run reproducible from its seed. ``resume_from``
    restores parameters, optimizer moments, generator state and history from
    a checkpoint and continues after its epoch. ``stop_after`` ends the run
    early after that many completed epochs.
    """
    if train_set.textual is None:
        raise InvalidArgumentError("fit needs a train split with textual features")
    if generator is None:
        generator = torch.Generator().manual_seed(int(config.seed))
    check_hyperparameter_ranges(config)
    schedule = config.schedule()
    loss_config = replace(config.effective_loss(), label_mode=train_set.label_mode)
    optimizer = make_optimizer(model, config)
    history = []
    start = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt.fingerprint != config.fingerprint():
            raise InvalidArgumentError("checkpoint was produced under a different configuration")
        model.load_state_dict(ckpt.state_dict)
        optimizer.load_state_dict(ckpt.optimizer_state)
        generator.set_state(ckpt.generator_state)
        history = list(ckpt.history)
        start = ckpt.epoch + 1
    else:
        set_centroids(model, train_set)

    n = len(train_set)
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start, end):
        lr = lr_at_epoch(config.base_lr, epoch, config.lr_halving_period_epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = torch.randperm(n, generator=generator).numpy()
        sums = dict.fromkeys(LOSS_TERMS, 0.0)
        batches = 0
        for lo in range(0, n, config.batch_size):
            batch = to_batch(train_set, order[lo:lo + config.batch_size])
            terms = train_step(model, batch, schedule, config, optimizer, generator, loss_config)
            for k in LOSS_TERMS:
                sums[k] += terms[k]
            batches += 1
        record = {"epoch": epoch, "lr": lr}
        record.update({k: v / max(batches, 1) for k, v in sums.items()})
        history.append(record)
        logger.info("epoch %d lr %.3g loss %.4f", epoch, lr, record["total"])
        if checkpoint_dir is not None:
            os.makedirs(checkpoint_dir, exist_ok=True)
            state = Checkpoint.capture(model, optimizer, generator, config, epoch, history)
            save_checkpoint(os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt"), state)
            save_checkpoint(os.path.join(checkpoint_dir, "last.ckpt"), state)
    model.eval()
    return FitResult(model, history, optimizer, generator)


# --- checkpoint container ---------------------------------------------------
#
# b"SEDACKPT" | u32 version | u64 header length | JSON header | tensor payload
# The header lists every tensor's name, dtype, shape and byte offset into the
# payload. Tensors are float32 (model and optimizer) or uint8 (generator state).

CKPT_MAGIC = b"SEDACKPT"
CKPT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    model_spec: dict
    config: dict
    fingerprint: str
    schedule: dict
    epoch: int
    history: list
    state_dict: dict
    optimizer_state: dict
    generator_state: torch.Tensor

    @classmethod
    def capture(cls, model, optimizer, generator, config, epoch, history):
        spec = model.spec
        opt = optimizer.state_dict() if optimizer is not None else {"state": {}, "param_groups": []}
        gen = generator.get_state() if generator is not None else torch.zeros(0, dtype=torch.uint8)
        return cls(
            model_spec={
                "kind": spec.kind,
                "num_classes": spec.num_classes,
                "label_mode": spec.label_mode,
                "denoiser": asdict(spec.denoiser),
            },
            config=config.to_dict(),
            fingerprint=config.fingerprint(),
            schedule={"total_steps": config.total_steps, "beta_start": config.beta_start, "beta_end": config.beta_end},
            epoch=int(epoch),
            history=[dict(h) for h in history],
            state_dict={k: v.detach().clone() for k, v in model.state_dict().items()},
            optimizer_state=opt,
            generator_state=gen.clone(),
        )

    def train_config(self):
        return TrainConfig(**self.config)

    def build_model(self):
        spec = dict(self.model_spec)
        spec["denoiser"] = DenoiserConfig(**spec["denoiser"])
        model = build_model(ModelSpec(**spec))
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def noise_schedule(self):
        return build_linear_schedule(**self.schedule)


def _flatten_tensors(ckpt):
    tensors = [(f"model/{k}", v) for k, v in ckpt.state_dict.items()]
    opt_meta = {"param_groups": ckpt.optimizer_state["param_groups"], "state": {}}
    # canonical order (numeric param id, then key) so a reload re-saves identically
    for pid in sorted(ckpt.optimizer_state["state"], key=int):
        state = ckpt.optimizer_state["state"][pid]
        opt_meta["state"][str(pid)] = sorted(state)
        for key in sorted(state):
            tensors.append((f"optim/{pid}/{key}", torch.as_tensor(state[key])))
    tensors.append(("generator", ckpt.generator_state))
    return tensors, opt_meta


def save_checkpoint(path, ckpt):
    tensors, opt_meta = _flatten_tensors(ckpt)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in tensors:
        t = tensor.detach().cpu()
        if t.dtype == torch.uint8:
            arr = t.numpy().astype("u1")
        elif t.is_floating_point():
            arr = t.numpy().astype("<f4")
            if t.dtype != torch.float32 and not np.array_equal(arr.astype(t.numpy().dtype), t.numpy()):
                raise InvalidArgumentError(f"tensor {name} does not fit in float32 exactly")
        else:
            raise InvalidArgumentError(f"unsupported tensor dtype {t.dtype} for {name}")
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_spec": ckpt.model_spec,
        "config": ckpt.config,
        "fingerprint": ckpt.fingerprint,
        "schedule": ckpt.schedule,
        "epoch": ckpt.epoch,
        "history": ckpt.history,
        "optimizer": opt_meta,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_PREFIX.unpack_from(data)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_PREFIX.size
    try:
        header = json.loads(data[start:start + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    payload = memoryview(data)[start + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        lo = entry["offset"]
        hi = lo + count * dtype.itemsize
        if hi > len(payload):
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        arr = np.frombuffer(payload[lo:hi], dtype=dtype).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    state_dict = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    opt_meta = header["optimizer"]
    opt_state = {
        int(pid): {key: tensors[f"optim/{pid}/{key}"] for key in opt_meta["state"][pid]}
        for pid in sorted(opt_meta["state"], key=int)
    }
    return Checkpoint(
        model_spec=header["model_spec"],
        config=header["config"],
        fingerprint=header["fingerprint"],
        schedule=header["schedule"],
        epoch=header["epoch"],
        history=header["history"],
        state_dict=state_dict,
        optimizer_state={"state": opt_state, "param_groups": opt_meta["param_groups"]},
        generator_state=tensors["generator"],
    )
