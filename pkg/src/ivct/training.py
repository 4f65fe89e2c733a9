"""Multi-setting training: example synthesis, losses, schedules, optimisation and checkpoints."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io as ivct_io
from .autograd import NonFiniteError, RngState, ShapeError, Tensor, backward, conv2d, no_grad
from .autograd.tensor import abs_, clamp_min, getitem, mean, mul, power, reshape, sub
from .metrics import gaussian_window, n_scales, scale_weights
from .model import ModelConfig, ProCT, init_model
from .physics import NoiseModel, ScanGeometry, add_noise, fbp_array, forward_project
from .sampling import LACT, SVCT, SamplingVector, SettingSpec

K1, K2 = 0.01, 0.03
SVCT_RANGE = (9, 288)
LACT_RANGE = (60.0, 180.0)


# -- examples ---------------------------------------------------------------------
@dataclass
class Example:
    x: np.ndarray  # incomplete-view FBP
    y: np.ndarray  # full-view FBP
    context: np.ndarray  # [2, H, W]: phantom incomplete / full
    v: SamplingVector


def simulate_full(image: np.ndarray, geometry: ScanGeometry, noise: NoiseModel, rng: RngState):
    """Noisy full-view sinogram rows and their FBP."""
    sino = add_noise(forward_project(image, geometry), noise, rng)
    views = np.arange(geometry.n_full_views)
    return sino.data, fbp_array(sino.data, geometry, views)


def incomplete_fbp(rows: np.ndarray, v: SamplingVector, geometry: ScanGeometry) -> np.ndarray:
    idx = v.indices
    return fbp_array(rows[idx], geometry, idx)


def make_example(
    full_image: np.ndarray,
    t: SettingSpec | SamplingVector,
    geometry: ScanGeometry,
    noise: NoiseModel,
    phantom: np.ndarray,
    rng: RngState,
) -> Example:
    """Synthesize (X, Y, C, v): both images and the phantom pair come from noisy sinograms."""
    if full_image.shape != (geometry.image_size,) * 2 or phantom.shape != full_image.shape:
        raise ValueError(f"images must be {geometry.image_size}x{geometry.image_size} to match the geometry")
    v = t if isinstance(t, SamplingVector) else t.vector(geometry.n_full_views, geometry.angular_span)
    rows, y = simulate_full(full_image, geometry, noise, rng.child(0))
    prow, pfull = simulate_full(phantom, geometry, noise, rng.child(1))
    x = incomplete_fbp(rows, v, geometry)
    context = np.stack([incomplete_fbp(prow, v, geometry), pfull])
    return Example(x, y, context, v)


class PhantomDataset:
    """Images with one fixed noisy sinogram each; incomplete-view inputs are built on demand and cached."""

    def __init__(self, images, geometry: ScanGeometry, noise: NoiseModel, phantom: np.ndarray, seed: int = 0, cache: bool = True):
        self.geometry = geometry
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        if not self.images:
            raise ValueError("dataset is empty")
        base = RngState(seed)
        self.rows, self.targets = [], []
        for i, im in enumerate(self.images):
            rows, y = simulate_full(im, geometry, noise, base.child(i).child(0))
            self.rows.append(rows)
            self.targets.append(y)
        self.phantom_rows, self.phantom_full = simulate_full(phantom, geometry, noise, base.child("phantom"))
        self.cache = cache
        self._inputs: dict = {}
        self._contexts: dict = {}

    def __len__(self) -> int:
        return len(self.images)

    def vector(self, t: SettingSpec | SamplingVector) -> SamplingVector:
        return t if isinstance(t, SamplingVector) else t.vector(self.geometry.n_full_views, self.geometry.angular_span)

    def context(self, v: SamplingVector) -> np.ndarray:
        key = v.bits.tobytes()
        if key not in self._contexts:
            self._contexts[key] = np.stack([incomplete_fbp(self.phantom_rows, v, self.geometry), self.phantom_full])
        return self._contexts[key]

    def input(self, i: int, v: SamplingVector) -> np.ndarray:
        key = (i, v.bits.tobytes())
        if key in self._inputs:
            return self._inputs[key]
        x = incomplete_fbp(self.rows[i], v, self.geometry)
        if self.cache:
            self._inputs[key] = x
        return x

    def example(self, i: int, t) -> Example:
        v = self.vector(t)
        return Example(self.input(i, v), self.targets[i], self.context(v), v)

    def batch(self, indices, t, dtype=np.float32) -> "Batch":
        v = self.vector(t)
        x = np.stack([self.input(i, v) for i in indices])[:, None]
        y = np.stack([self.targets[i] for i in indices])[:, None]
        c = np.repeat(self.context(v)[None], len(indices), axis=0)
        setting = t if isinstance(t, SettingSpec) else None
        return Batch(x.astype(dtype), y.astype(dtype), c.astype(dtype), v, setting)


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    context: np.ndarray
    v: SamplingVector
    setting: SettingSpec | None = None


# -- losses -----------------------------------------------------------------------
@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    use_scale: bool = True
    max_scales: int = 5

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def _window_tensor(dtype) -> Tensor:
    return Tensor(gaussian_window()[None, None], dtype=dtype)


def _ssim_maps(a: Tensor, b: Tensor, win: Tensor):
    c1, c2 = K1**2, K2**2
    mu_a, mu_b = conv2d(a, win), conv2d(b, win)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = conv2d(a * a, win) - mu_aa
    var_b = conv2d(b * b, win) - mu_bb
    cov = conv2d(a * b, win) - mu_ab
    lum = (mu_ab * 2.0 + c1) / (mu_aa + mu_bb + c1)
    cs = (cov * 2.0 + c2) / (var_a + var_b + c2)
    return lum, cs


def _pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if (h, w) != (2 * h2, 2 * w2):
        x = getitem(x, (slice(None), slice(None), slice(0, 2 * h2), slice(0, 2 * w2)))
    return mean(reshape(x, (n, c, h2, 2, w2, 2)), axis=(3, 5))


def ms_ssim(a: Tensor, b: Tensor, max_scales: int = 5) -> Tensor:
    """Differentiable MS-SSIM of ``[N, 1, H, W]`` images, averaged over the batch."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = reshape(a, (1, 1) + a.shape), reshape(b, (1, 1) + b.shape)
    count = n_scales(min(a.shape[2:]), max_scales)
    weights = scale_weights(count)
    win = _window_tensor(a.dtype)
    total = None
    for j in range(count):
        lum, cs = _ssim_maps(a, b, win)
        term = mean(lum * cs if j == count - 1 else cs, axis=(1, 2, 3))
        factor = power(clamp_min(term, 1e-6), weights[j])
        total = factor if total is None else total * factor
        if j < count - 1:
            a, b = _pool2(a), _pool2(b)
    return mean(total)


def loss(pred: Tensor, target, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean absolute error plus ``alpha * (1 - MS-SSIM)``."""
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    l1 = mean(abs_(sub(pred, target)))
    if cfg.alpha == 0:
        return l1
    return l1 + (1.0 - ms_ssim(pred, target, cfg.max_scales)) * cfg.alpha


def loss_scale(t: SettingSpec) -> float:
    """Weight in [0.5, 1]; easier settings (more views, wider range) weigh more."""
    if t.scenario == SVCT:
        if not SVCT_RANGE[0] <= t.value <= SVCT_RANGE[1]:
            raise ValueError(f"N_view {t.value} outside the training range {SVCT_RANGE}")
        s = 0.5 + 0.5 * math.log2(t.value / 9) / math.log2(288 / 9)
    elif t.scenario == LACT:
        span = t.value - t.start
        if not LACT_RANGE[0] <= span <= LACT_RANGE[1]:
            raise ValueError(f"angular range {span} outside the training range {LACT_RANGE}")
        s = 0.5 + 0.5 * (span - 60.0) / 120.0
    else:
        raise ValueError(f"no loss scale for scenario {t.scenario}")
    return min(1.0, max(0.5, s))


# -- plans and sampling ---------------------------------------------------------------
@dataclass(frozen=True)
class TrainPlan:
    epochs: int = 70
    phase1_epochs: int = 40
    steps_per_epoch: int = 0  # 0: one pass over the dataset
    max_steps: int = 0  # 0: no cap
    batch_size: int = 2
    lr: float = 1e-4
    lr_halve_every: int = 20
    beta1: float = 0.5
    beta2: float = 0.999
    clip_norm: float = 1.0
    alpha: float = 0.1
    use_loss_scale: bool = True
    phase1_svct: tuple = (18, 36, 72, 144)
    phase1_lact: tuple = (90.0, 120.0, 150.0)
    svct_range: tuple = SVCT_RANGE
    lact_range: tuple = LACT_RANGE
    seed: int = 0

    def __post_init__(self):
        for f in ("phase1_svct", "phase1_lact", "svct_range", "lact_range"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr, epochs and batch size must be positive")
        if not 0 <= self.phase1_epochs <= self.epochs:
            raise ValueError("phase boundary must lie within the epoch count")

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            v = ",".join(f"{x:g}" for x in v) if isinstance(v, tuple) else v
            out.append(f"{k}={v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_dict(cls, values: dict) -> "TrainPlan":
        kinds = {f.name: f.default for f in fields(cls)}
        parsed = {}
        for key, raw in values.items():
            if key not in kinds:
                raise ValueError(f"unknown plan key {key!r}")
            default = kinds[key]
            if isinstance(default, tuple):
                items = [x for x in str(raw).split(",") if x.strip()]
                cast = float if key in ("phase1_lact", "lact_range") else int
                parsed[key] = tuple(cast(x) for x in items)
            elif isinstance(default, bool):
                parsed[key] = str(raw).lower() in ("1", "true", "yes", "on")
            else:
                parsed[key] = type(default)(raw)
        return cls(**parsed)


def lr_at(plan: TrainPlan, epoch: int) -> float:
    """Learning rate for a 1-based epoch, halved every ``lr_halve_every`` epochs."""
    return plan.lr * 0.5 ** ((epoch - 1) // plan.lr_halve_every)


def sample_setting(plan: TrainPlan, epoch: int, rng: RngState) -> SettingSpec:
    gen = rng.generator()
    if epoch <= plan.phase1_epochs:
        choices = [(SVCT, plan.phase1_svct), (LACT, plan.phase1_lact)]
        choices = [c for c in choices if c[1]]
        scenario, values = choices[int(gen.integers(len(choices)))]
        return SettingSpec(scenario, values[int(gen.integers(len(values)))])
    if gen.integers(2) == 0:
        return SettingSpec(SVCT, int(gen.integers(plan.svct_range[0], plan.svct_range[1] + 1)))
    return SettingSpec(LACT, float(gen.integers(int(plan.lact_range[0]), int(plan.lact_range[1]) + 1)))


# -- optimiser ------------------------------------------------------------------------
class Adam:
    def __init__(self, params: dict[str, Tensor], betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = tensors[f"adam.m.{k}"].astype(self.m[k].dtype)
            self.v[k] = tensors[f"adam.v.{k}"].astype(self.v[k].dtype)
        self.t = t


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if not math.isfinite(norm):
        raise NonFiniteError("gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g *= scale
    return norm


def train_step(model: ProCT, batch: Batch, cfg: LossConfig, opt: Adam, lr: float, clip_norm: float = 1.0) -> float:
    """One scaled-loss update; returns the unscaled loss value."""
    pred = model(batch.x, batch.context, batch.v)
    value = loss(pred, batch.y, cfg)
    s_t = loss_scale(batch.setting) if cfg.use_scale and batch.setting is not None else 1.0
    scaled = value * s_t if s_t != 1.0 else value
    params = list(opt.params.values())
    for p in params:
        p.grad = None
    backward(scaled, params=params)
    clip_grad_norm(params, clip_norm)
    opt.step(lr)
    return float(value.data)


# -- checkpoints ----------------------------------------------------------------------
@dataclass
class TrainState:
    model: ProCT
    opt: Adam | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)
    checksum: str = ""


def checkpoint_save(path, model: ProCT, opt: Adam | None = None, step: int = 0, meta: dict | None = None) -> str:
    tensors = dict(model.state_dict())
    info = dict(meta or {})
    info["step"] = step
    if opt is not None:
        tensors.update(opt.state_tensors())
        info["adam_t"] = opt.t
        info["betas"] = [opt.beta1, opt.beta2]
    return ivct_io.dump_checkpoint(path, model.config.to_text(), info, tensors)


def checkpoint_load(path) -> TrainState:
    config_text, meta, tensors, checksum = ivct_io.load_checkpoint_file(path)
    model = init_model(ModelConfig.from_text(config_text), 0)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    opt = None
    if "adam_t" in meta:
        opt = Adam(dict(model.named_parameters()), tuple(meta["betas"]))
        opt.load_state_tensors(tensors, int(meta["adam_t"]))
    return TrainState(model, opt, int(meta.get("step", 0)), meta, checksum)


# -- loop -----------------------------------------------------------------------------
LOG_FIELDS = ["step", "epoch", "scenario", "setting", "s_t", "loss", "lr"]


def steps_per_epoch(plan: TrainPlan, dataset_size: int) -> int:
    return plan.steps_per_epoch or max(1, dataset_size // plan.batch_size)


def total_steps(plan: TrainPlan, dataset_size: int) -> int:
    total = plan.epochs * steps_per_epoch(plan, dataset_size)
    return min(total, plan.max_steps) if plan.max_steps else total


def step_draws(plan: TrainPlan, step: int, epoch: int, n: int):
    """Setting and batch indices for a step; a pure function of (seed, step)."""
    rng = RngState(plan.seed).child(step)
    setting = sample_setting(plan, epoch, rng.child("setting"))
    idx = rng.child("batch").generator().choice(n, size=min(plan.batch_size, n), replace=False)
    return setting, np.sort(idx)


def train(
    model: ProCT,
    dataset: PhantomDataset,
    plan: TrainPlan,
    out_dir=None,
    opt: Adam | None = None,
    start_step: int = 0,
    log=None,
    checkpoint_every_epoch: bool = True,
    stop_after: int | None = None,
) -> TrainState:
    """Run the plan from ``start_step``; resuming from a checkpoint reproduces an uninterrupted run."""
    cfg = LossConfig(plan.alpha, plan.use_loss_scale)
    opt = opt or Adam(dict(model.named_parameters()), (plan.beta1, plan.beta2))
    per_epoch = steps_per_epoch(plan, len(dataset))
    end = total_steps(plan, len(dataset))
    if stop_after is not None:
        end = min(end, stop_after)
    out_dir = Path(out_dir) if out_dir else None
    log_fh = writer = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        fresh = start_step == 0 or not log_path.exists()
        log_fh = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_FIELDS)
    meta = {"plan": plan.to_text(), "geometry": dataset.geometry.summary()}
    try:
        for step in range(start_step, end):
            epoch = step // per_epoch + 1
            setting, idx = step_draws(plan, step, epoch, len(dataset))
            lr = lr_at(plan, epoch)
            try:
                value = train_step(model, dataset.batch(idx, setting), cfg, opt, lr, plan.clip_norm)
            except NonFiniteError as err:
                raise NonFiniteError(f"step {step} ({setting.label}): {err}") from err
            s_t = loss_scale(setting) if cfg.use_scale else 1.0
            row = [step, epoch, setting.tag, setting.label, f"{s_t:.6f}", f"{value:.8f}", f"{lr:.3e}"]
            if writer:
                writer.writerow(row)
            if log:
                log(dict(zip(LOG_FIELDS, row)))
            last_of_epoch = (step + 1) % per_epoch == 0 or step + 1 == end
            if out_dir and checkpoint_every_epoch and last_of_epoch:
                checkpoint_save(out_dir / "last.ivck", model, opt, step + 1, {**meta, "epoch": epoch})
    finally:
        if log_fh:
            log_fh.close()
    return TrainState(model, opt, end, meta)


def predict(model: ProCT, dataset: PhantomDataset, indices, t, batch_size: int = 8) -> np.ndarray:
    """Model outputs ``[len(indices), H, W]`` without recording a tape."""
    outs = []
    with no_grad():
        for start in range(0, len(indices), batch_size):
            b = dataset.batch(indices[start : start + batch_size], t, model.dtype)
            outs.append(model(b.x, b.context, b.v).data[:, 0])
    return np.concatenate(outs).astype(np.float64)


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
