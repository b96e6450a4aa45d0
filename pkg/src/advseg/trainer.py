"""Alternating min-max training of the estimator against the discriminator.

Each step performs ``d_steps_per_e_step`` discriminator updates that ascend

    L_D = mean[log D(I, G_manual) + log(1 - D(I, E(I)))]

followed by one estimator update that ascends

    L_E = mean[log D(I, E(I))]

with the other network frozen.  Both ascents are run as Adam descents on
the negated objectives.  A ``cross_entropy`` mode trains the estimator alone
with per-pixel cross-entropy against the same labels.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import LabeledSample, augment, normalize_image, one_hot
from .networks import (
    DiscriminatorParams,
    EstimatorParams,
    discriminator_forward,
    estimator_forward,
    init_discriminator,
    init_estimator,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-7
MODES = ("adversarial", "cross_entropy")
CSV_HEADER = ("step", "loss_d", "loss_e", "d_real_mean", "d_fake_mean")


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite; ``dump`` describes the offending step."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    n_train: int = 1
    batch_size: int = 1
    total_steps: int = 2000
    d_steps_per_e_step: int = 1
    lr_d: float = 1e-4
    lr_e: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    crop_size: int = 64
    seed: int = 0
    checkpoint_interval: int = 0
    bn_momentum: float = 0.9
    mode: str = "adversarial"
    # step after which both learning rates fall linearly towards 0; 0 disables
    lr_decay_from: int = 0

    def __post_init__(self):
        for name in ("n_train", "batch_size", "d_steps_per_e_step", "crop_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_steps < 0 or self.checkpoint_interval < 0:
            raise ValueError("total_steps and checkpoint_interval must be non-negative")
        if not 0 <= self.lr_decay_from < max(self.total_steps, 1):
            raise ValueError("lr_decay_from must lie in [0, total_steps)")
        for name in ("lr_d", "lr_e", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.bn_momentum < 1):
            raise ValueError("beta1, beta2 and bn_momentum must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class LossRecord:
    step: int
    loss_d: float
    loss_e: float
    d_real_mean: float
    d_fake_mean: float

    def row(self) -> tuple:
        return (self.step, self.loss_d, self.loss_e, self.d_real_mean, self.d_fake_mean)


@dataclass
class TrainState:
    config: TrainConfig
    estimator: EstimatorParams
    discriminator: DiscriminatorParams | None
    rng: np.random.Generator
    step: int = 0
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    adam_steps: dict[str, int] = field(default_factory=lambda: {"estimator": 0, "discriminator": 0})
    history: list[LossRecord] = field(default_factory=list)


def init_state(config: TrainConfig) -> TrainState:
    root = np.random.SeedSequence(config.seed)
    e_seed, d_seed, data_seed = (int(s.generate_state(1)[0]) for s in root.spawn(3))
    disc = init_discriminator(d_seed) if config.mode == "adversarial" else None
    return TrainState(
        config=config,
        estimator=init_estimator(e_seed),
        discriminator=disc,
        rng=np.random.default_rng(data_seed),
    )


# ------------------------------------------------------------------ losses


def _check_open_unit(d: Tensor, what: str):
    if not np.all((d.data > 0) & (d.data < 1)):
        raise ValueError(f"{what} must lie strictly inside (0, 1); clamp to [{LOG_CLAMP}, 1-{LOG_CLAMP}] first")


def loss_discriminator(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """mean[log d_real + log(1 - d_fake)]: the objective D maximizes."""
    _check_open_unit(d_real, "d_real")
    _check_open_unit(d_fake, "d_fake")
    return T.mean(T.add(T.log(d_real), T.log(T.sub(1.0, d_fake))))


def loss_estimator(d_fake: Tensor) -> Tensor:
    """mean[log d_fake]: the objective E maximizes."""
    _check_open_unit(d_fake, "d_fake")
    return T.mean(T.log(d_fake))


def clamp_prob(d: Tensor) -> Tensor:
    return T.clamp(d, LOG_CLAMP, 1.0 - LOG_CLAMP)


def cross_entropy(prob: Tensor, target_one_hot: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of a BHW3 probability map."""
    logp = T.log(clamp_prob(prob))
    per_pixel = T.sum_(T.mul(logp, Tensor(target_one_hot)), axis=-1)
    return T.mul(T.mean(per_pixel), -1.0)


# -------------------------------------------------------------------- adam


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                moments: dict[str, tuple[np.ndarray, np.ndarray]],
                lr: float, beta1: float, beta2: float, eps: float, step: int):
    """In-place bias-corrected Adam step number ``step`` (1-based).

    Parameters without an entry in ``grads`` are treated as having a zero
    gradient, so their moments still decay.
    """
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(p.shape)
        m, v = moments.get(name, (np.zeros(p.shape), np.zeros(p.shape)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        moments[name] = (m, v)
    return params, moments


def scheduled_lr(config: TrainConfig, base: float, step: int) -> float:
    """Learning rate for 1-based ``step``: constant, then a linear ramp to 0.

    With ``lr_decay_from = k > 0`` steps 1..k use ``base`` and step s > k uses
    ``base * (total_steps - s + 1) / (total_steps - k)``.
    """
    k = config.lr_decay_from
    if k == 0 or step <= k:
        return base
    return base * max(config.total_steps - step + 1, 0) / (config.total_steps - k)


def _step_net(state: TrainState, net: str, params, loss: Tensor, lr: float):
    """Backprop ``loss`` and apply one Adam step to ``params`` only."""
    named = params.named_tensors()
    for t in named.values():
        t.grad = None
    T.backward(loss)
    grads = {n: t.grad for n, t in named.items() if t.grad is not None}
    for t in named.values():
        t.grad = None
    state.adam_steps[net] += 1
    moments = {n: state.moments[f"{net}/{n}"] for n in named if f"{net}/{n}" in state.moments}
    cfg = state.config
    lr = scheduled_lr(cfg, lr, state.step + 1)
    adam_update(named, grads, moments, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, state.adam_steps[net])
    state.moments.update({f"{net}/{n}": moments[n] for n in named})


# -------------------------------------------------------------- batching


def prepare_samples(samples: list[LabeledSample]) -> list[LabeledSample]:
    """Per-frame gray-level normalization, done once before cropping."""
    return [LabeledSample(normalize_image(s.image), s.label, s.cells, s.touching_pairs) for s in samples]


def sample_batch(state: TrainState, samples: list[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``batch_size`` augmented crops from the first ``n_train`` samples.

    Returns a BHW1 image array and a BHW integer label array.
    """
    cfg = state.config
    if len(samples) < cfg.n_train:
        raise ValueError(f"need at least n_train={cfg.n_train} samples, got {len(samples)}")
    images, labels = [], []
    for _ in range(cfg.batch_size):
        idx = int(state.rng.integers(0, cfg.n_train))
        crop = augment(samples[idx], cfg.crop_size, state.rng)
        images.append(crop.image)
        labels.append(crop.label)
    return np.stack(images)[..., None], np.stack(labels)


def _finite(state: TrainState, **losses: float):
    bad = {k: v for k, v in losses.items() if not math.isfinite(v)}
    if bad:
        dump = {
            "step": state.step + 1,
            "losses": losses,
            "estimator_norms": {n: float(np.linalg.norm(t.data)) for n, t in state.estimator.named_tensors().items()},
        }
        if state.discriminator is not None:
            dump["discriminator_norms"] = {
                n: float(np.linalg.norm(t.data)) for n, t in state.discriminator.named_tensors().items()
            }
        raise TrainingDiverged(f"non-finite loss at step {state.step + 1}: {bad}", dump)


def train_step(state: TrainState, batch: tuple[np.ndarray, np.ndarray],
               extra_d_batches: list[tuple[np.ndarray, np.ndarray]] | None = None) -> LossRecord:
    """One min-max step on ``batch`` (images BHW1, labels BHW).

    With ``d_steps_per_e_step > 1`` the additional discriminator updates use
    ``extra_d_batches``; the estimator update always uses ``batch``.
    """
    cfg = state.config
    images, labels = batch
    if cfg.mode == "cross_entropy":
        return _ce_step(state, images, labels)

    E, D = state.estimator, state.discriminator
    mom = cfg.bn_momentum
    d_batches = list(extra_d_batches or []) + [batch]
    if len(d_batches) != cfg.d_steps_per_e_step:
        raise ValueError(f"expected {cfg.d_steps_per_e_step - 1} extra discriminator batches, got {len(d_batches) - 1}")

    img_t = Tensor(images)
    fake = estimator_forward(E, img_t, mode="train", momentum=mom)

    for imgs, labs in d_batches:
        if imgs is images:
            it, fake_d = img_t, fake.detach()
        else:
            it = Tensor(imgs)
            fake_d = estimator_forward(E, it, mode="train", momentum=mom).detach()
        loss_d, d_real_mean, d_fake_mean = discriminator_update(state, it, labs, fake_d)

    loss_e = estimator_update(state, img_t, fake)
    state.step += 1
    rec = LossRecord(state.step, loss_d, loss_e, d_real_mean, d_fake_mean)
    state.history.append(rec)
    return rec


def discriminator_update(state: TrainState, images: Tensor, labels: np.ndarray, fake: Tensor):
    """One Adam ascent step of D on L_D; ``fake`` must not carry a graph into E.

    Returns (L_D before the update, mean D(real), mean D(fake)).
    """
    cfg, D = state.config, state.discriminator
    d_real = discriminator_forward(D, images, Tensor(one_hot(labels)), mode="train", momentum=cfg.bn_momentum)
    d_fake = discriminator_forward(D, images, fake, mode="train", momentum=cfg.bn_momentum)
    _finite(state, d_real_mean=float(d_real.data.mean()), d_fake_mean=float(d_fake.data.mean()))
    loss_d = loss_discriminator(clamp_prob(d_real), clamp_prob(d_fake))
    _finite(state, loss_d=loss_d.item())
    _step_net(state, "discriminator", D, T.mul(loss_d, -1.0), cfg.lr_d)
    return loss_d.item(), float(d_real.data.mean()), float(d_fake.data.mean())


def estimator_update(state: TrainState, images: Tensor, fake: Tensor) -> float:
    """One Adam ascent step of E on L_E through the current, frozen D.

    ``fake`` is E's output for ``images`` with its graph intact.  Returns L_E
    before the update.
    """
    cfg = state.config
    d_fake = discriminator_forward(state.discriminator, images, fake, mode="train", momentum=cfg.bn_momentum)
    _finite(state, d_fake_mean=float(d_fake.data.mean()))
    loss_e = loss_estimator(clamp_prob(d_fake))
    _finite(state, loss_e=loss_e.item())
    _step_net(state, "estimator", state.estimator, T.mul(loss_e, -1.0), cfg.lr_e)
    return loss_e.item()


def _ce_step(state: TrainState, images: np.ndarray, labels: np.ndarray) -> LossRecord:
    cfg = state.config
    prob = estimator_forward(state.estimator, Tensor(images), mode="train", momentum=cfg.bn_momentum)
    loss = cross_entropy(prob, one_hot(labels))
    _finite(state, loss_e=loss.item())
    _step_net(state, "estimator", state.estimator, loss, cfg.lr_e)
    state.step += 1
    rec = LossRecord(state.step, math.nan, loss.item(), math.nan, math.nan)
    state.history.append(rec)
    return rec


def train(state: TrainState, samples: list[LabeledSample], steps: int | None = None,
          checkpoint_dir: str | Path | None = None, callback=None) -> TrainState:
    """Run ``steps`` (default: the remaining ``total_steps``) training steps.

    ``samples`` must already be normalized (see :func:`prepare_samples`).
    """
    cfg = state.config
    steps = cfg.total_steps - state.step if steps is None else steps
    for _ in range(steps):
        extra = [sample_batch(state, samples) for _ in range(cfg.d_steps_per_e_step - 1)] \
            if cfg.mode == "adversarial" else None
        batch = sample_batch(state, samples)
        rec = train_step(state, batch, extra)
        if callback is not None:
            callback(state, rec)
        if checkpoint_dir is not None and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
            checkpoint_save(state, Path(checkpoint_dir) / f"checkpoint_{state.step:06d}.ckpt")
    return state


# -------------------------------------------------------------- inference


def predict_proba(estimator: EstimatorParams, image: np.ndarray, momentum: float = 0.9) -> np.ndarray:
    """Full-frame H x W x 3 probabilities (batch-norm in infer mode)."""
    x = Tensor(normalize_image(image)[None, :, :, None])
    with T.no_grad():
        return estimator_forward(estimator, x, mode="infer", momentum=momentum).data[0]


# ----------------------------------------------------------- loss history


def write_loss_csv(path, history: list[LossRecord]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in history:
            w.writerow([rec.step] + [repr(float(v)) for v in rec.row()[1:]])


def read_loss_csv(path) -> list[LossRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, 2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                out.append(LossRecord(int(row[0]), *(float(v) for v in row[1:])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


# ------------------------------------------------------------- checkpoints

MAGIC = b"ADVSEGCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


def _collect_arrays(state: TrainState) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    nets = {"estimator": state.estimator, "discriminator": state.discriminator}
    for net, params in nets.items():
        if params is None:
            continue
        for name, t in params.named_tensors().items():
            arrays[f"{net}/{name}"] = t.data
        for name, rs in params.named_running().items():
            if rs.ready:
                arrays[f"{net}/{name}.running_mean"] = rs.mean
                arrays[f"{net}/{name}.running_var"] = rs.var
    for key, (m, v) in state.moments.items():
        arrays[f"adam_m/{key}"] = m
        arrays[f"adam_v/{key}"] = v
    hist = np.array([r.row() for r in state.history], dtype=np.float64).reshape(-1, len(CSV_HEADER))
    arrays["history"] = hist
    return arrays


def checkpoint_save(state: TrainState, path):
    """Versioned binary checkpoint: header, JSON manifest, raw float64 arrays."""
    arrays = _collect_arrays(state)
    manifest, offset = [], 0
    for name, a in arrays.items():
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    meta = {
        "config": asdict(state.config),
        "step": state.step,
        "adam_steps": state.adam_steps,
        "rng": state.rng.bit_generator.state,
        "disc_input_size": state.discriminator.input_size if state.discriminator is not None else None,
        "arrays": manifest,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def checkpoint_load(path) -> TrainState:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic bytes)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = _HEADER.size + meta_len
    if len(raw) < start:
        raise CheckpointError(f"{path}: truncated checkpoint manifest")
    try:
        meta = json.loads(raw[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None

    arrays = {}
    for entry in meta["arrays"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        lo = start + entry["offset"]
        if lo + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated data for array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=lo).reshape(entry["shape"]).copy()
    if start + sum(a.size * 8 for a in arrays.values()) != len(raw):
        raise CheckpointError(f"{path}: trailing or missing bytes after array data")

    config = TrainConfig(**meta["config"])
    state = init_state(config)
    if state.discriminator is not None and meta["disc_input_size"] != state.discriminator.input_size:
        state.discriminator = init_discriminator(0, meta["disc_input_size"])
    nets = {"estimator": state.estimator, "discriminator": state.discriminator}
    for net, params in nets.items():
        if params is None:
            continue
        for name, t in params.named_tensors().items():
            key = f"{net}/{name}"
            if key not in arrays or arrays[key].shape != t.shape:
                raise CheckpointError(f"{path}: missing or misshapen array {key}")
            t.data = arrays[key]
        for name, rs in params.named_running().items():
            m, v = arrays.get(f"{net}/{name}.running_mean"), arrays.get(f"{net}/{name}.running_var")
            rs.mean, rs.var = m, v
    state.moments = {}
    for name, a in arrays.items():
        if name.startswith("adam_m/"):
            key = name[len("adam_m/"):]
            state.moments[key] = (a, arrays[f"adam_v/{key}"])
    state.step = int(meta["step"])
    state.adam_steps = {k: int(v) for k, v in meta["adam_steps"].items()}
    state.rng.bit_generator.state = meta["rng"]
    state.history = [LossRecord(int(r[0]), *map(float, r[1:])) for r in arrays["history"]]
    return state
