"""Synthetic seismic lines of spatially related, NMO-corrected CDP gathers.

A line is ``M`` neighbouring CDP gathers. Every reflection event is a family
whose zero-offset time, amplitude and velocities drift smoothly from one CDP
to the next. Each event is placed analytically as a Ricker wavelet along its
hyperbola and then NMO-corrected with the processing velocity of that CDP:

* primaries are corrected with a velocity within a few percent of their true
  one, so they come out flat or slightly under/over-corrected;
* multiples travel slower than the processing velocity and keep a strong,
  downward-curving residual moveout.

Gathers hold primaries plus multiples; labels hold primaries only.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensorio

# Line panels are rounded onto a 2**-40 grid. With |values| < 2**12 every sum
# and difference of such panels is exact in float64, which keeps
# gathers == labels + multiples and gathers - labels == multiples bit-exact.
_QUANTUM = 2.0**40

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class AcquisitionGeometry:
    n_traces: int = 64
    n_samples: int = 256
    dt: float = 0.004
    offsets: tuple = tuple(50.0 + 25.0 * i for i in range(64))

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=float)
        if len(offs) != self.n_traces:
            raise ValueError("offsets must have one entry per trace")
        if np.any(np.diff(offs) <= 0):
            raise ValueError("offsets must be strictly increasing")
        if self.dt <= 0 or self.n_samples < 1:
            raise ValueError("dt and n_samples must be positive")
        object.__setattr__(self, "offsets", tuple(float(o) for o in offs))

    @classmethod
    def regular(cls, n_traces: int, n_samples: int, dt: float, first: float, step: float):
        return cls(n_traces, n_samples, dt, tuple(first + step * i for i in range(n_traces)))

    @classmethod
    def paper(cls) -> "AcquisitionGeometry":
        return cls.regular(64, 256, 0.004, 50.0, 25.0)

    @classmethod
    def desk(cls) -> "AcquisitionGeometry":
        # Same 1.024 s record and 50-1600 m spread at half the sampling.
        return cls.regular(32, 128, 0.008, 50.0, 50.0)

    @property
    def offset_array(self) -> np.ndarray:
        return np.asarray(self.offsets)

    @property
    def record_length(self) -> float:
        return self.n_samples * self.dt


@dataclass
class EventFamily:
    """One reflection event tracked across the ``M`` CDPs of a line."""

    kind: str  # "primary" or "multiple"
    t0_profile: np.ndarray
    amp_profile: np.ndarray
    v_true_profile: np.ndarray
    v_nmo_profile: np.ndarray

    def at(self, m: int) -> dict:
        return {
            "t0": float(self.t0_profile[m]),
            "amp": float(self.amp_profile[m]),
            "v_true": float(self.v_true_profile[m]),
            "v_nmo": float(self.v_nmo_profile[m]),
        }

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "t0": self.t0_profile.tolist(),
            "amp": self.amp_profile.tolist(),
            "v_true": self.v_true_profile.tolist(),
            "v_nmo": self.v_nmo_profile.tolist(),
        }


@dataclass
class SeismicLine:
    gathers: np.ndarray  # [M, H, W]
    labels: np.ndarray  # [M, H, W]
    line_id: int = 0
    seed: int = 0
    multiples: Optional[np.ndarray] = None
    events: list = field(default_factory=list)

    @property
    def M(self) -> int:
        return self.gathers.shape[0]


@dataclass(frozen=True)
class GeneratorConfig:
    n_lines: int = 15000
    M: int = 21
    geometry: AcquisitionGeometry = field(default_factory=AcquisitionGeometry.paper)
    n_primaries: tuple = (4, 10)
    n_multiples: tuple = (2, 6)
    t0_range: tuple = (0.1, 0.9)
    multiple_t0_range: tuple = (0.25, 0.9)
    amp_range: tuple = (0.3, 1.0)
    # Processing velocity v(t0) = v_top + gradient * t0, in m/s and m/s per s.
    v_top_range: tuple = (1500.0, 1900.0)
    v_gradient_range: tuple = (600.0, 1100.0)
    v_lateral_frac: float = 0.03
    nmo_error_max: float = 0.05
    multiple_factor_range: tuple = (0.75, 0.9)
    t0_drift_max: float = 0.04
    t0_step_cap: float = 0.008
    amp_drift_frac: float = 0.3
    peak_freq: float = 25.0
    # Drop an event from traces where NMO would stretch it by more than this
    # ratio t / t0 (None keeps every trace).
    stretch_mute: Optional[float] = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_primaries", "n_multiples"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-empty non-negative range")
        for name in (
            "t0_range",
            "multiple_t0_range",
            "amp_range",
            "v_top_range",
            "v_gradient_range",
            "multiple_factor_range",
        ):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} must be a non-empty positive range")
        if self.multiple_factor_range[1] >= 1.0 - self.nmo_error_max:
            raise ValueError("multiples must stay slower than the processing velocity")
        if self.M < 1 or self.n_lines < 0:
            raise ValueError("M must be positive and n_lines non-negative")
        if self.nmo_error_max < 0 or self.t0_drift_max < 0 or self.t0_step_cap <= 0:
            raise ValueError("drift and error bounds must be non-negative")
        if self.peak_freq <= 0:
            raise ValueError("peak_freq must be positive")
        if self.stretch_mute is not None and self.stretch_mute < 1.0:
            raise ValueError("stretch_mute must be at least 1")

    @classmethod
    def paper(cls, **overrides) -> "GeneratorConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "GeneratorConfig":
        base = dict(n_lines=200, M=21, geometry=AcquisitionGeometry.desk())
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> dict:
        d = asdict(self)
        d["geometry"] = asdict(self.geometry)
        d["geometry"]["offsets"] = list(self.geometry.offsets)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        geo = d.pop("geometry", None)
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        if geo is not None:
            kw["geometry"] = AcquisitionGeometry(
                geo["n_traces"], geo["n_samples"], geo["dt"], tuple(geo["offsets"])
            )
        return cls(**kw)


# ---------------------------------------------------------------- wavelet & panels


def ricker(t, peak_freq: float):
    """Ricker wavelet with unit peak at ``t = 0``."""
    a = (np.pi * peak_freq * np.asarray(t, dtype=float)) ** 2
    return (1.0 - 2.0 * a) * np.exp(-a)


def ricker_wavelet(peak_freq: float, dt: float, half_length: int) -> np.ndarray:
    """Sampled Ricker wavelet of length ``2 * half_length + 1``, centred."""
    if peak_freq <= 0:
        raise ValueError("peak_freq must be positive")
    if half_length < 1:
        raise ValueError("half_length must be at least 1")
    k = np.arange(1, half_length + 1)
    side = ricker(k * dt, peak_freq)
    return np.concatenate([side[::-1], [1.0], side])


def synth_event_panel(
    t0: float,
    amp: float,
    v_true: float,
    geometry: AcquisitionGeometry,
    peak_freq: float = 25.0,
    flat: bool = False,
) -> np.ndarray:
    """Single hyperbolic event as an ``[H, W]`` panel.

    Arrival time per trace is ``sqrt(t0**2 + (x / v_true)**2)``; ``flat=True``
    (or ``v_true = inf``) gives ``t0`` on every trace. Energy arriving after
    the end of the record is simply not there.
    """
    if t0 <= 0 or v_true <= 0:
        raise ValueError("t0 and v_true must be positive")
    x = geometry.offset_array
    t_hyp = np.full_like(x, t0) if flat else np.sqrt(t0**2 + (x / v_true) ** 2)
    t = np.arange(geometry.n_samples)[:, None] * geometry.dt
    return amp * ricker(t - t_hyp[None, :], peak_freq)


def nmo_correct(panel: np.ndarray, v_nmo: float, geometry: AcquisitionGeometry) -> np.ndarray:
    """Normal-moveout correction with a single velocity.

    ``out[t0, x] = panel[sqrt(t0**2 + (x / v_nmo)**2), x]`` with linear
    interpolation between samples and zero beyond the last sample.
    """
    if v_nmo <= 0:
        raise ValueError("v_nmo must be positive")
    H, W = panel.shape
    # Work in sample units so the zero-offset trace maps onto integers exactly.
    i = np.arange(H, dtype=float)[:, None]
    shift = (geometry.offset_array / (v_nmo * geometry.dt))[None, :]
    tau = np.sqrt(i * i + shift * shift)
    inside = tau <= H - 1
    tau = np.where(inside, tau, 0.0)
    lo = np.floor(tau).astype(int)
    frac = tau - lo
    hi = np.minimum(lo + 1, H - 1)
    cols = np.arange(W)[None, :]
    out = panel[lo, cols] * (1.0 - frac) + panel[hi, cols] * frac
    return np.where(inside, out, 0.0)


# ---------------------------------------------------------------- lateral profiles


def smooth_profile(rng, M: int, center: float, half_range: float, step_cap: float, tries: int = 50):
    """Random smooth curve over ``M`` CDPs around ``center``.

    Quadratic trend plus lightly smoothed noise, kept within
    ``center +- half_range``. Draws whose largest neighbour step exceeds
    ``step_cap`` are rejected; if every try fails the last draw is shrunk
    towards the centre until it complies.
    """
    if M == 1 or half_range == 0:
        return np.full(M, float(center))
    s = np.linspace(-1.0, 1.0, M)
    kernel = np.ones(5) / 5.0
    for _ in range(tries):
        a1, a2 = rng.uniform(-1.0, 1.0, size=2)
        noise = np.convolve(rng.standard_normal(M + 4), kernel, mode="valid")
        shape = a1 * s + a2 * (s * s - 0.5) + 0.15 * noise
        peak = np.max(np.abs(shape))
        if peak > 1.0:
            shape = shape / peak
        prof = center + half_range * shape
        if np.max(np.abs(np.diff(prof))) <= step_cap:
            return prof
    worst = np.max(np.abs(np.diff(prof - center)))
    return center + (prof - center) * (step_cap / worst)


def _velocity_trend(v_top, gradient, t0):
    return v_top + gradient * t0


def draw_events(config: GeneratorConfig, rng) -> list:
    """Draw the primary and multiple event families of one line."""
    M = config.M
    v_top = rng.uniform(*config.v_top_range)
    grad = rng.uniform(*config.v_gradient_range)
    # Lateral variation of the whole velocity field, shared by all events.
    v_scale = smooth_profile(rng, M, 1.0, config.v_lateral_frac, config.v_lateral_frac / 4)

    def _family(kind, t0_range):
        t0c = rng.uniform(*t0_range)
        t0 = smooth_profile(rng, M, t0c, config.t0_drift_max, config.t0_step_cap)
        t0 = np.clip(t0, config.t0_range[0], config.t0_range[1])
        sign = rng.choice([-1.0, 1.0])
        a0 = rng.uniform(*config.amp_range)
        amp = sign * smooth_profile(rng, M, a0, config.amp_drift_frac * a0, 0.1 * a0)
        err = smooth_profile(rng, M, 0.0, config.nmo_error_max, config.nmo_error_max / 2)
        v_proc = _velocity_trend(v_top, grad, t0) * v_scale
        if kind == "primary":
            v_true = v_proc
        else:
            f0 = rng.uniform(*config.multiple_factor_range)
            lo, hi = config.multiple_factor_range
            spread = min(f0 - lo, hi - f0)
            factor = smooth_profile(rng, M, f0, spread, max(spread / 4, 1e-9))
            v_true = v_proc * factor
        v_nmo = v_proc * (1.0 + err)
        return EventFamily(kind, t0, amp, v_true, v_nmo)

    n_p = int(rng.integers(config.n_primaries[0], config.n_primaries[1] + 1))
    n_m = int(rng.integers(config.n_multiples[0], config.n_multiples[1] + 1))
    events = [_family("primary", config.t0_range) for _ in range(n_p)]
    events += [_family("multiple", config.multiple_t0_range) for _ in range(n_m)]
    return events


def event_panel(event: EventFamily, m: int, config: GeneratorConfig) -> np.ndarray:
    """NMO-corrected panel of one event at CDP ``m``.

    Linear interpolation of a heavily stretched wavelet shifts its peak by
    about half the stretch ratio in samples, so traces where the event's
    stretch ``t / t0`` at the correction velocity exceeds
    ``config.stretch_mute`` are left empty.
    """
    e = event.at(m)
    geo = config.geometry
    raw = synth_event_panel(e["t0"], e["amp"], e["v_true"], geo, config.peak_freq)
    out = nmo_correct(raw, e["v_nmo"], geo)
    if config.stretch_mute is not None:
        stretch = np.sqrt(1.0 + (geo.offset_array / (e["v_nmo"] * e["t0"])) ** 2)
        out[:, stretch > config.stretch_mute] = 0.0
    return out


def _quantize(a: np.ndarray) -> np.ndarray:
    return np.round(a * _QUANTUM) / _QUANTUM


def line_rng(master_seed: int, line_id: int):
    return np.random.default_rng([int(master_seed), int(line_id)])


def generate_line(config: GeneratorConfig, line_id: int = 0, seed: Optional[int] = None) -> SeismicLine:
    """Generate line ``line_id``; a pure function of ``(config, seed, line_id)``."""
    seed = config.seed if seed is None else seed
    rng = line_rng(seed, line_id)
    events = draw_events(config, rng)
    H, W = config.geometry.n_samples, config.geometry.n_traces
    P = np.zeros((config.M, H, W))
    Q = np.zeros((config.M, H, W))
    for ev in events:
        target = P if ev.kind == "primary" else Q
        for m in range(config.M):
            target[m] += event_panel(ev, m, config)
    P, Q = _quantize(P), _quantize(Q)
    return SeismicLine(P + Q, P, line_id=line_id, seed=seed, multiples=Q, events=events)


# ---------------------------------------------------------------- datasets on disk


def split_counts(n_lines: int) -> tuple:
    """85/15 train/eval split by line index."""
    n_eval = (15 * n_lines + 99) // 100
    return n_lines - n_eval, n_eval


def build_dataset(config: GeneratorConfig, out_dir, keep_events: bool = False) -> Path:
    """Write ``gathers.bin``, ``labels.bin`` and ``manifest.json`` to ``out_dir``.

    Lines are streamed to disk one at a time. On any IO failure the partially
    written files are removed before the error propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    N, M = config.n_lines, config.M
    H, W = config.geometry.n_samples, config.geometry.n_traces
    paths = [out / "gathers.bin", out / "labels.bin", out / "manifest.json"]
    n_train, n_eval = split_counts(N)
    records = []
    try:
        with open(paths[0], "wb") as fg, open(paths[1], "wb") as fl:
            for fh in (fg, fl):
                fh.write(tensorio.encode_header((N, M, H, W)))
            for i in range(N):
                line = generate_line(config, i)
                fg.write(np.ascontiguousarray(line.gathers, dtype="<f8").tobytes())
                fl.write(np.ascontiguousarray(line.labels, dtype="<f8").tobytes())
                if keep_events:
                    records.append([e.to_json() for e in line.events])
        manifest = {
            "version": MANIFEST_VERSION,
            "config": config.to_json(),
            "seed": config.seed,
            "N": N,
            "M": M,
            "H": H,
            "W": W,
            "split": {"train": [0, n_train], "eval": [n_train, N]},
        }
        if keep_events:
            manifest["events"] = records
        with open(paths[2], "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except BaseException:
        for p in paths:
            if p.exists():
                p.unlink()
        raise
    return out


class SeismicDataset:
    """A dataset directory opened for reading; payloads are memory-mapped."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path / "manifest.json") as fh:
            self.manifest = json.load(fh)
        self.gathers = tensorio.read_tensor(self.path / "gathers.bin", mmap=True)
        self.labels = tensorio.read_tensor(self.path / "labels.bin", mmap=True)
        if self.gathers.shape != self.labels.shape:
            raise tensorio.FormatError("gathers and labels disagree in shape")
        self.N, self.M, self.H, self.W = self.gathers.shape

    @property
    def train_indices(self) -> range:
        return range(*self.manifest["split"]["train"])

    @property
    def eval_indices(self) -> range:
        return range(*self.manifest["split"]["eval"])

    def line(self, i: int) -> SeismicLine:
        return SeismicLine(
            np.array(self.gathers[i], dtype=np.float64),
            np.array(self.labels[i], dtype=np.float64),
            line_id=int(i),
            seed=int(self.manifest.get("seed", 0)),
        )

    def config(self) -> GeneratorConfig:
        return GeneratorConfig.from_json(self.manifest["config"])

    def __len__(self) -> int:
        return self.N

    def __repr__(self) -> str:
        return f"SeismicDataset({str(self.path)!r}, N={self.N}, M={self.M}, H={self.H}, W={self.W})"


class InMemoryDataset:
    """Lines held in memory, with the same reading interface as :class:`SeismicDataset`."""

    def __init__(self, gathers, labels, n_train: Optional[int] = None, path: str = "<memory>"):
        self.gathers = np.asarray(gathers, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if self.gathers.shape != self.labels.shape or self.gathers.ndim != 4:
            raise ValueError("gathers and labels must both be [N, M, H, W]")
        self.N, self.M, self.H, self.W = self.gathers.shape
        self.n_train = split_counts(self.N)[0] if n_train is None else int(n_train)
        self.path = path

    @classmethod
    def generate(cls, config: GeneratorConfig) -> "InMemoryDataset":
        lines = [generate_line(config, i) for i in range(config.n_lines)]
        return cls(np.stack([l.gathers for l in lines]), np.stack([l.labels for l in lines]))

    @property
    def train_indices(self) -> range:
        return range(0, self.n_train)

    @property
    def eval_indices(self) -> range:
        return range(self.n_train, self.N)

    def line(self, i: int) -> SeismicLine:
        return SeismicLine(self.gathers[i], self.labels[i], line_id=int(i))

    def __len__(self) -> int:
        return self.N


__all__ = [
    "AcquisitionGeometry",
    "InMemoryDataset",
    "EventFamily",
    "GeneratorConfig",
    "SeismicDataset",
    "SeismicLine",
    "build_dataset",
    "draw_events",
    "event_panel",
    "generate_line",
    "line_rng",
    "nmo_correct",
    "ricker",
    "ricker_wavelet",
    "smooth_profile",
    "split_counts",
    "synth_event_panel",
]
