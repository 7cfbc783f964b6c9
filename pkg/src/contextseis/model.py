"""ContextSeisNet and the plain U-Net baseline.

Both networks share one level/channel plan (:class:`ModelSpec`). The
in-context network swaps every double-conv block for a :class:`CrossBlock`
that carries two streams through the U-Net: the query stream ``u`` of shape
``[B, C, h, w]`` and the support stream ``V`` of shape ``[S, B, C, h, w]``.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorio
from .autodiff import (
    BatchNormStats,
    Parameter,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    expand_set,
    leaky_relu,
    max_pool2,
    mean_over_set,
    reshape,
    upsample_nearest2,
)

PRESETS = {
    "tiny": (8, 16, 32),
    "small": (32, 64, 128, 256),
    "medium": (48, 96, 192, 384),
    "large": (64, 128, 256, 512),
}

ARCHITECTURES = ("contextseisnet", "unet")


@dataclass(frozen=True)
class ModelSpec:
    channels: tuple = PRESETS["tiny"]
    kernel_size: int = 3
    leaky_slope: float = 0.01
    norm: bool = True
    size_preset: str = "tiny"

    def __post_init__(self):
        ch = tuple(int(c) for c in self.channels)
        object.__setattr__(self, "channels", ch)
        if not ch or any(c < 1 for c in ch):
            raise ValueError("channels must be a non-empty list of positive widths")
        if any(b < a for a, b in zip(ch, ch[1:])):
            raise ValueError("channel widths must be nondecreasing with depth")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    @property
    def levels(self) -> int:
        return len(self.channels)

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelSpec":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(channels=PRESETS[name], size_preset=name, **overrides)

    def check_input(self, H: int, W: int) -> None:
        f = 2 ** (self.levels - 1)
        if H % f or W % f:
            raise ValueError(f"H={H} and W={W} must be divisible by {f} for {self.levels} levels")

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "channels": tuple(d["channels"])})


@dataclass
class SupportSet:
    """Prompt gathers and their labels.

    Arrays are ``[S, H, W]`` (one support set shared by the whole batch) or
    ``[S, B, H, W]`` (a separate support set per batch element).
    """

    prompts: np.ndarray
    prompt_labels: np.ndarray

    def __post_init__(self):
        self.prompts = np.asarray(self.prompts, dtype=np.float64)
        self.prompt_labels = np.asarray(self.prompt_labels, dtype=np.float64)
        if self.prompts.shape != self.prompt_labels.shape:
            raise ValueError("prompts and prompt_labels must have the same shape")
        if self.prompts.ndim not in (3, 4):
            raise ValueError("support arrays must be [S, H, W] or [S, B, H, W]")
        if self.prompts.shape[0] < 1:
            raise ValueError("a support set needs at least one prompt")

    @property
    def S(self) -> int:
        return self.prompts.shape[0]

    def stream(self, B: int) -> np.ndarray:
        """Support input of shape ``[S, B, 2, H, W]`` (prompt, prompt label)."""
        pair = np.stack([self.prompts, self.prompt_labels], axis=-3)
        if pair.ndim == 4:
            return np.broadcast_to(pair[:, None], (pair.shape[0], B) + pair.shape[1:]).copy()
        if pair.shape[1] != B:
            raise ValueError(f"support set carries {pair.shape[1]} batch entries, query has {B}")
        return pair


# ---------------------------------------------------------------- building blocks


class _Module:
    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._stats: "OrderedDict[str, BatchNormStats]" = OrderedDict()

    def _conv(self, name: str, cin: int, cout: int, k: int, rng) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self._params[f"{name}.weight"] = Parameter(rng.normal(0.0, std, (cout, cin, k, k)), f"{name}.weight")
        self._params[f"{name}.bias"] = Parameter(np.zeros(cout), f"{name}.bias")

    def _norm(self, name: str, c: int) -> None:
        self._params[f"{name}.gamma"] = Parameter(np.ones(c), f"{name}.gamma")
        self._params[f"{name}.beta"] = Parameter(np.zeros(c), f"{name}.beta")
        self._stats[name] = BatchNormStats.fresh(c)

    def conv(self, name, x):
        return conv2d(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"])

    def norm_act(self, name, x, training, slope, use_norm):
        if use_norm:
            x = batch_norm(
                x, self._params[f"{name}.gamma"], self._params[f"{name}.beta"], self._stats[name], training
            )
        return leaky_relu(x, slope)


class CrossBlock(_Module):
    """Shared-weight cross-convolution between a query and every support entry.

    ``z_s = conv1(u || V_s)``; the query update is
    ``u' = act(norm_u(conv3(mean_s z_s)))`` and each support entry becomes
    ``V'_s = act(norm_v(conv2(z_s)))``. With ``with_support_out=False`` the
    support branch (conv2, norm_v) is omitted and ``V'`` is ``None``.
    """

    def __init__(self, cu: int, cv: int, cout: int, spec: ModelSpec, rng, with_support_out: bool = True):
        super().__init__()
        k = spec.kernel_size
        self.spec = spec
        self.cu, self.cv, self.cout = cu, cv, cout
        self.with_support_out = with_support_out
        self._conv("conv1", cu + cv, cout, k, rng)
        if with_support_out:
            self._conv("conv2", cout, cout, k, rng)
        self._conv("conv3", cout, cout, k, rng)
        if spec.norm:
            self._norm("norm_u", cout)
            if with_support_out:
                self._norm("norm_v", cout)

    def __call__(self, u, V, training: bool = False):
        S, B, Cv, h, w = V.shape
        if S < 1:
            raise ValueError("CrossBlock needs a non-empty support stream")
        if u.shape[0] != B or u.shape[2:] != (h, w):
            raise ValueError(f"query {u.shape} and support {V.shape} do not line up")
        spec = self.spec
        pairs = concat_channels(expand_set(u, S), V)
        z = self.conv("conv1", reshape(pairs, (S * B, self.cu + Cv, h, w)))
        zbar = mean_over_set(reshape(z, (S, B, self.cout, h, w)))
        u_new = self.norm_act("norm_u", self.conv("conv3", zbar), training, spec.leaky_slope, spec.norm)
        if not self.with_support_out:
            return u_new, None
        v_new = self.norm_act("norm_v", self.conv("conv2", z), training, spec.leaky_slope, spec.norm)
        return u_new, reshape(v_new, (S, B, self.cout, h, w))


class DoubleConv(_Module):
    """conv -> norm -> LeakyReLU, twice."""

    def __init__(self, cin: int, cout: int, spec: ModelSpec, rng):
        super().__init__()
        self.spec = spec
        self._conv("conv1", cin, cout, spec.kernel_size, rng)
        self._conv("conv2", cout, cout, spec.kernel_size, rng)
        if spec.norm:
            self._norm("norm1", cout)
            self._norm("norm2", cout)

    def __call__(self, x, training: bool = False):
        s = self.spec
        x = self.norm_act("norm1", self.conv("conv1", x), training, s.leaky_slope, s.norm)
        return self.norm_act("norm2", self.conv("conv2", x), training, s.leaky_slope, s.norm)


def _over_set(fn, V):
    S, B = V.shape[:2]
    flat = fn(reshape(V, (S * B,) + V.shape[2:]))
    return reshape(flat, (S, B) + flat.shape[1:])


# ---------------------------------------------------------------- networks


class _Network:
    architecture = ""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec
        self.seed = seed
        self.training = False
        self.blocks: "OrderedDict[str, _Module]" = OrderedDict()
        self.head: Optional[_Module] = None

    def _finish(self, rng) -> None:
        head = _Module()
        head._conv("conv", self.spec.channels[0], 1, 1, rng)
        self.head = head
        self.blocks["head"] = head

    def named_parameters(self) -> "OrderedDict[str, Parameter]":
        out = OrderedDict()
        for prefix, blk in self.blocks.items():
            for name, p in blk._params.items():
                out[f"{prefix}.{name}"] = p
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def named_stats(self) -> "OrderedDict[str, BatchNormStats]":
        out = OrderedDict()
        for prefix, blk in self.blocks.items():
            for name, st in blk._stats.items():
                out[f"{prefix}.{name}"] = st
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self) -> "_Network":
        self.training = True
        return self

    def eval(self) -> "_Network":
        self.training = False
        return self

    def __call__(self, X, support: Optional[SupportSet] = None, training: Optional[bool] = None):
        return self.forward(X, support, self.training if training is None else training)

    def predict(self, X, support: Optional[SupportSet] = None) -> np.ndarray:
        """Eval-mode forward on plain arrays."""
        return self.forward(X, support, training=False).data

    def _head(self, u):
        return self.head.conv("conv", u)


class ContextSeisNet(_Network):
    """U-Net shaped in-context network built from :class:`CrossBlock` s."""

    architecture = "contextseisnet"

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__(spec, seed)
        rng = np.random.default_rng(seed)
        ch = spec.channels
        cu, cv = 1, 2
        for i, c in enumerate(ch):
            self.blocks[f"enc.{i}"] = CrossBlock(cu, cv, c, spec, rng, with_support_out=len(ch) > 1)
            cu = cv = c
        for i in reversed(range(len(ch) - 1)):
            c_in = ch[i] + ch[i + 1]
            # The top decoder block only feeds the head, so its support branch
            # would be dead weight.
            self.blocks[f"dec.{i}"] = CrossBlock(c_in, c_in, ch[i], spec, rng, with_support_out=i > 0)
        self._finish(rng)

    def forward(self, X, support: Optional[SupportSet], training: bool = False) -> Tensor:
        if support is None:
            raise ValueError("ContextSeisNet needs a support set")
        u = X if isinstance(X, Tensor) else Tensor(X)
        if u.ndim != 4 or u.shape[1] != 1:
            raise ValueError(f"query must be [B, 1, H, W], got {u.shape}")
        B, _, H, W = u.shape
        self.spec.check_input(H, W)
        V = Tensor(support.stream(B))
        if V.shape[3:] != (H, W):
            raise ValueError("support gathers and query differ in size")
        L = self.spec.levels
        skips = []
        for i in range(L):
            u, V = self.blocks[f"enc.{i}"](u, V, training)
            if i < L - 1:
                skips.append((u, V))
                u = max_pool2(u)
                V = _over_set(max_pool2, V)
        for i in reversed(range(L - 1)):
            su, sV = skips[i]
            u = concat_channels(su, upsample_nearest2(u))
            V = concat_channels(sV, _over_set(upsample_nearest2, V))
            u, V = self.blocks[f"dec.{i}"](u, V, training)
        return self._head(u)


class UNet(_Network):
    """Conventional U-Net mapping one gather to its primaries."""

    architecture = "unet"

    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__(spec, seed)
        rng = np.random.default_rng(seed)
        ch = spec.channels
        cin = 1
        for i, c in enumerate(ch):
            self.blocks[f"enc.{i}"] = DoubleConv(cin, c, spec, rng)
            cin = c
        for i in reversed(range(len(ch) - 1)):
            self.blocks[f"dec.{i}"] = DoubleConv(ch[i] + ch[i + 1], ch[i], spec, rng)
        self._finish(rng)

    def forward(self, X, support: Optional[SupportSet] = None, training: bool = False) -> Tensor:
        u = X if isinstance(X, Tensor) else Tensor(X)
        if u.ndim != 4 or u.shape[1] != 1:
            raise ValueError(f"input must be [B, 1, H, W], got {u.shape}")
        self.spec.check_input(*u.shape[2:])
        L = self.spec.levels
        skips = []
        for i in range(L):
            u = self.blocks[f"enc.{i}"](u, training)
            if i < L - 1:
                skips.append(u)
                u = max_pool2(u)
        for i in reversed(range(L - 1)):
            u = concat_channels(skips[i], upsample_nearest2(u))
            u = self.blocks[f"dec.{i}"](u, training)
        return self._head(u)


def build_model(architecture: str, spec: ModelSpec, seed: int = 0) -> _Network:
    if architecture == "contextseisnet":
        return ContextSeisNet(spec, seed)
    if architecture == "unet":
        return UNet(spec, seed)
    raise ValueError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")


def param_count(spec: ModelSpec, architecture: str = "contextseisnet") -> int:
    """Closed-form number of trainable scalars for ``spec``."""
    k2 = spec.kernel_size**2
    nrm = 2 if spec.norm else 0

    def conv(cin, cout, k2=k2):
        return cin * cout * k2 + cout

    ch = spec.channels
    total = conv(ch[0], 1, 1)
    if architecture == "contextseisnet":
        cu, cv = 1, 2
        enc_branches = 2 if len(ch) > 1 else 1
        for c in ch:
            total += conv(cu + cv, c) + enc_branches * (conv(c, c) + nrm * c)
            cu = cv = c
        for i in reversed(range(len(ch) - 1)):
            c_in = ch[i] + ch[i + 1]
            branches = 2 if i > 0 else 1
            total += conv(2 * c_in, ch[i]) + branches * (conv(ch[i], ch[i]) + nrm * ch[i])
    elif architecture == "unet":
        cin = 1
        for c in ch:
            total += conv(cin, c) + conv(c, c) + 2 * nrm * c
            cin = c
        for i in reversed(range(len(ch) - 1)):
            total += conv(ch[i] + ch[i + 1], ch[i]) + conv(ch[i], ch[i]) + 2 * nrm * ch[i]
    else:
        raise ValueError(f"unknown architecture {architecture!r}")
    return total


# ---------------------------------------------------------------- checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(model: _Network, path, train_config: Optional[dict] = None, epoch: int = 0) -> Path:
    """Write ``checkpoint.json`` and ``params.bin`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    with open(out / "params.bin", "wb") as fh:
        entries = [(n, "param", p.data) for n, p in model.named_parameters().items()]
        for n, st in model.named_stats().items():
            entries.append((f"{n}.running_mean", "running_mean", st.running_mean))
            entries.append((f"{n}.running_var", "running_var", st.running_var))
        for name, kind, arr in entries:
            size = tensorio.write_record(fh, arr)
            index.append({"name": name, "kind": kind, "offset": offset, "shape": list(arr.shape)})
            offset += size
    meta = {
        "version": CHECKPOINT_VERSION,
        "architecture": model.architecture,
        "spec": model.spec.to_json(),
        "init_seed": model.seed,
        "param_count": model.num_parameters(),
        "train_config": train_config or {},
        "epoch": epoch,
        "index": index,
    }
    with open(out / "checkpoint.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def read_checkpoint_meta(path) -> dict:
    with open(Path(path) / "checkpoint.json") as fh:
        return json.load(fh)


def load_checkpoint(path) -> _Network:
    meta = read_checkpoint_meta(path)
    spec = ModelSpec.from_json(meta["spec"])
    model = build_model(meta["architecture"], spec, meta.get("init_seed", 0))
    buf = (Path(path) / "params.bin").read_bytes()
    params = model.named_parameters()
    stats = model.named_stats()
    seen = set()
    for entry in meta["index"]:
        arr, _ = tensorio.read_tensor_at(buf, entry["offset"])
        name, kind = entry["name"], entry["kind"]
        if kind == "param":
            if name not in params or params[name].shape != arr.shape:
                raise tensorio.FormatError(f"checkpoint entry {name} does not fit the model")
            params[name].data = arr.copy()
        else:
            owner = name.rsplit(".", 1)[0]
            if owner not in stats:
                raise tensorio.FormatError(f"checkpoint entry {name} does not fit the model")
            setattr(stats[owner], kind, arr.copy())
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise tensorio.FormatError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    return model


__all__ = [
    "ARCHITECTURES",
    "ContextSeisNet",
    "CrossBlock",
    "DoubleConv",
    "ModelSpec",
    "PRESETS",
    "SupportSet",
    "UNet",
    "build_model",
    "load_checkpoint",
    "param_count",
    "read_checkpoint_meta",
    "save_checkpoint",
]
