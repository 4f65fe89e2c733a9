"""Parallel dual-domain extension: sinogram completion and image fusion around a frozen ProCT."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import io as ivct_io
from .autograd import NonFiniteError, RngState, ShapeError, Tensor, backward, concat, no_grad, pad2d, relu
from .autograd.tensor import abs_, add, getitem, mean, mul, sub
from .model import ProCT
from .nn import Conv2d, ConvTranspose2d, Module
from .physics import ScanGeometry, fbp_tensor
from .sampling import SamplingVector
from .training import Adam, PhantomDataset, TrainPlan, clip_grad_norm, lr_at, step_draws


class UNet(Module):
    """Plain convolutional U-Net: two 3x3 convs per level, strided downsampling, additive skips."""

    def __init__(self, rng, c_in: int, c_out: int, dims, dtype=np.float32):
        self.dims = tuple(dims)
        self.enc = []
        prev = c_in
        for i, d in enumerate(self.dims):
            down = Conv2d(rng, prev, d, kernel=2, stride=2, padding=0, dtype=dtype) if i else Conv2d(rng, prev, d, kernel=3, dtype=dtype)
            self.enc.append([down, Conv2d(rng, d, d, kernel=3, dtype=dtype)])
            prev = d
        self.dec = []
        for d_hi, d_lo in zip(self.dims[::-1][:-1], self.dims[::-1][1:]):
            self.dec.append([ConvTranspose2d(rng, d_hi, d_lo, dtype=dtype), Conv2d(rng, d_lo, d_lo, kernel=3, dtype=dtype)])
        self.head = Conv2d(rng, self.dims[0], c_out, dtype=dtype)

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.dims) - 1)

    def forward(self, x: Tensor) -> Tensor:
        H, W = x.shape[2:]
        ph, pw = (-H) % self.multiple, (-W) % self.multiple
        if ph or pw:
            x = pad2d(x, (0, ph, 0, pw), "reflect")
        skips = []
        for first, second in self.enc:
            x = relu(second(relu(first(x))))
            skips.append(x)
        for (up, conv), skip in zip(self.dec, skips[-2::-1]):
            x = relu(conv(add(up(x), skip)))
        out = self.head(x)
        if ph or pw:
            out = getitem(out, (slice(None), slice(None), slice(0, H), slice(0, W)))
        return out


@dataclass(frozen=True)
class DualConfig:
    sino_dims: tuple = (8, 16, 32)
    fusion_dims: tuple = (8, 16, 32)
    data_consistency: bool = False

    def to_text(self) -> str:
        return (
            "kind=dual\n"
            f"sino_dims={','.join(map(str, self.sino_dims))}\n"
            f"fusion_dims={','.join(map(str, self.fusion_dims))}\n"
            f"data_consistency={int(self.data_consistency)}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "DualConfig":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        if kv.pop("kind", None) != "dual":
            raise ivct_io.FormatError("checkpoint does not hold a dual-domain model")
        return cls(
            tuple(int(x) for x in kv["sino_dims"].split(",")),
            tuple(int(x) for x in kv["fusion_dims"].split(",")),
            bool(int(kv.get("data_consistency", 0))),
        )


def full_dual_config() -> DualConfig:
    return DualConfig((64, 128, 256, 512, 512), (16, 32, 64, 128, 128))


class DualDomain(Module):
    """Sinogram completion network and fusion network; the image network is held outside and frozen."""

    def __init__(self, config: DualConfig, rng, sino_mean: float = 0.0, sino_std: float = 1.0, dtype=np.float32):
        self.config = config
        self.sino_net = UNet(rng, 2, 1, config.sino_dims, dtype)
        self.fusion = UNet(rng, 3, 1, config.fusion_dims, dtype)
        # fusion starts as the identity on the image-domain prediction
        self.fusion.head.weight.data[:] = 0
        self.fusion.head.bias.data[:] = 0
        self.sino_mean = float(sino_mean)
        self.sino_std = float(sino_std)

    @property
    def dtype(self):
        return self.fusion.head.weight.dtype


def init_dual(config: DualConfig, stats=(0.0, 1.0), rng=0, dtype=np.float32) -> DualDomain:
    if isinstance(rng, (int, np.integer)):
        rng = RngState(int(rng))
    if isinstance(rng, RngState):
        rng = rng.child("dual").generator()
    return DualDomain(config, rng, stats[0], stats[1], dtype)


def sinogram_stats(dataset: PhantomDataset) -> tuple[float, float]:
    rows = np.stack(dataset.rows)
    return float(rows.mean()), float(rows.std() or 1.0)


def sino_complete(net: DualDomain, s_in: np.ndarray, v: SamplingVector, data_consistency: bool | None = None) -> Tensor:
    """Full-view sinogram prediction ``[N, 1, n_full, D]`` from measured rows ``[N, popcount, D]``."""
    s_in = np.asarray(s_in)
    if s_in.ndim == 2:
        s_in = s_in[None]
    if s_in.shape[1] != v.popcount:
        raise ShapeError(f"{s_in.shape[1]} measured rows but the sampling vector selects {v.popcount}")
    n, _, d = s_in.shape
    mask = np.zeros((n, 1, len(v), d), dtype=net.dtype)
    mask[:, :, v.indices] = 1
    filled = np.zeros((n, 1, len(v), d), dtype=np.float64)
    filled[:, 0, v.indices] = s_in
    normed = ((filled - net.sino_mean) / net.sino_std * mask).astype(net.dtype)
    inp = Tensor(np.concatenate([normed, mask], axis=1))
    out = add(net.sino_net(inp), Tensor(normed))
    pred = add(mul(out, net.sino_std), net.sino_mean)
    dc = net.config.data_consistency if data_consistency is None else data_consistency
    if dc:
        pred = add(mul(pred, Tensor(1 - mask)), Tensor((filled * mask).astype(net.dtype)))
    return pred


def dual_forward(x, s_in, v: SamplingVector, context, proct: ProCT, net: DualDomain, geometry: ScanGeometry):
    """Return ``(Y_img, Y_sino, Y_fused, S_hat)``; ProCT runs without a tape so it cannot change."""
    x = x if isinstance(x, Tensor) else Tensor(x, dtype=net.dtype)
    with no_grad():
        y_img = Tensor(proct(x.data.astype(proct.dtype), context, v).data.astype(net.dtype))
    s_hat = sino_complete(net, s_in, v)
    y_sino = fbp_tensor(s_hat, geometry)
    if y_sino.shape != x.shape:
        raise ShapeError(f"sinogram branch produced {y_sino.shape}, image is {x.shape}")
    fused = add(y_img, net.fusion(concat([x, y_img, y_sino], axis=1)))
    return y_img, y_sino, fused, s_hat


def dual_loss(y_sino: Tensor, y_fused: Tensor, s_hat: Tensor, y, s) -> Tensor:
    """Sum of three mean absolute errors (image branch, fused image, sinogram)."""
    def l1(a, b):
        b = b if isinstance(b, Tensor) else Tensor(b, dtype=a.dtype)
        if a.shape != b.shape:
            raise ShapeError(f"{a.shape} vs {b.shape}")
        return mean(abs_(sub(a, b)))

    return l1(y_sino, y) + l1(y_fused, y) + l1(s_hat, s)


def dual_batch(dataset: PhantomDataset, indices, t, dtype=np.float32):
    b = dataset.batch(indices, t, dtype)
    s_full = np.stack([dataset.rows[i] for i in indices])[:, None].astype(dtype)
    s_in = s_full[:, 0][:, b.v.indices]
    return b, s_in, s_full


def train_dual(
    proct: ProCT,
    net: DualDomain,
    dataset: PhantomDataset,
    plan: TrainPlan,
    steps: int,
    opt: Adam | None = None,
    log=None,
) -> Adam:
    opt = opt or Adam(dict(net.named_parameters()), (plan.beta1, plan.beta2))
    params = list(opt.params.values())
    for step in range(steps):
        epoch = 1 + step // max(1, len(dataset) // plan.batch_size)
        setting, idx = step_draws(plan, step, epoch, len(dataset))
        b, s_in, s_full = dual_batch(dataset, idx, setting, net.dtype)
        _, y_sino, fused, s_hat = dual_forward(b.x, s_in, b.v, b.context, proct, net, dataset.geometry)
        value = dual_loss(y_sino, fused, s_hat, b.y, s_full)
        if not math.isfinite(float(value.data)):
            raise NonFiniteError(f"dual step {step}: loss is not finite")
        for p in params:
            p.grad = None
        backward(value, params=params)
        clip_grad_norm(params, plan.clip_norm)
        opt.step(lr_at(plan, epoch))
        if log:
            log({"step": step, "setting": setting.label, "loss": float(value.data)})
    return opt


def predict_dual(proct: ProCT, net: DualDomain, dataset: PhantomDataset, indices, t, batch_size: int = 4):
    outs = {"image": [], "sino": [], "fused": []}
    with no_grad():
        for start in range(0, len(indices), batch_size):
            b, s_in, _ = dual_batch(dataset, indices[start : start + batch_size], t, net.dtype)
            y_img, y_sino, fused, _ = dual_forward(b.x, s_in, b.v, b.context, proct, net, dataset.geometry)
            outs["image"].append(y_img.data[:, 0])
            outs["sino"].append(y_sino.data[:, 0])
            outs["fused"].append(fused.data[:, 0])
    return {k: np.concatenate(v).astype(np.float64) for k, v in outs.items()}


def dual_save(path, net: DualDomain, parent_checksum: str = "", meta: dict | None = None) -> str:
    info = {**(meta or {}), "parent": parent_checksum, "sino_mean": net.sino_mean, "sino_std": net.sino_std}
    return ivct_io.dump_checkpoint(path, net.config.to_text(), info, dict(net.state_dict()))


def dual_load(path) -> tuple[DualDomain, dict]:
    text, meta, tensors, _ = ivct_io.load_checkpoint_file(path)
    net = init_dual(DualConfig.from_text(text), (meta["sino_mean"], meta["sino_std"]))
    net.load_state_dict(tensors)
    return net, meta
