"""Deterministic workloads for the attention engine.

Two stream sources, both reproducible byte-for-byte from their spec:

  * ToyModel: a seeded multi-layer multi-head causal transformer stand-in.
    Projection weights come from the portable counter PRNG; the forward pass
    is per-layer attention plus a residual add. The denoise loop re-runs the
    forward with a small iteration-indexed input perturbation.

  * PlantedModel: per-head Q/K/V with logits biased toward a labeled frame
    region (sink, neighbor, or current) by a controllable margin. Keys carry
    a fixed per-frame signature direction; queries point at the signatures
    of the labeled region, so the bias survives caching. Ground-truth labels
    ride along for classification tests.

Both implement the model protocol the engine drives: ``frame_input``,
``qkv``, and ``mix``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace, asdict

import numpy as np

from . import rng
from .config import SessionConfig
from .errors import ConfigError

# Amplitude of the denoise-iteration input perturbation in the toy model.
DENOISE_JITTER = 0.1

# Row-level query noise in planted streams, relative to the signature scale.
PLANTED_ROW_NOISE = 0.05

CONDITION_KINDS = ("prompt_seed", "ar_step", "denoise_step")

REGION_LABELS = ("sink", "neighbor", "current")


@dataclass(frozen=True)
class ToyModelSpec:
    num_layers: int
    num_heads: int
    head_dim: int
    HW: int
    denoise_steps: int
    seed: int
    weight_scale: float = 1.0

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.head_dim, self.HW) < 1:
            raise ConfigError("toy model dimensions must be >= 1")
        if self.denoise_steps < 1:
            raise ConfigError("denoise_steps must be >= 1")

    @property
    def model_dim(self) -> int:
        return self.num_heads * self.head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelSpec":
        return cls(**d)


class ToyModel:
    """Seeded attention stack; identical spec gives identical weights."""

    is_open_loop = False  # layer inputs depend on attention outputs

    def __init__(self, spec: ToyModelSpec):
        self.spec = spec
        d_model = spec.model_dim
        scale = spec.weight_scale / math.sqrt(d_model)
        self.weights = []
        for layer in range(spec.num_layers):
            self.weights.append(
                {
                    name: rng.matrix(
                        rng.derive(spec.seed, f"w{name}", layer), d_model, d_model, scale
                    )
                    for name in ("q", "k", "v", "o")
                }
            )

    @property
    def num_layers(self) -> int:
        return self.spec.num_layers

    def frame_input(self, ar_step: int, denoise_step: int) -> np.ndarray:
        s = self.spec
        base = rng.matrix(rng.derive(s.seed, "frame", ar_step), s.HW, s.model_dim)
        jitter = rng.matrix(
            rng.derive(s.seed, "denoise", ar_step, denoise_step), s.HW, s.model_dim
        )
        return base + DENOISE_JITTER * jitter

    def qkv(
        self, layer: int, x: np.ndarray, ar_step: int, denoise_step: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-head projections of the layer input, each (heads, HW, head_dim)."""
        s = self.spec
        w = self.weights[layer]
        out = []
        for name in ("q", "k", "v"):
            proj = x @ w[name]
            out.append(
                proj.reshape(s.HW, s.num_heads, s.head_dim).transpose(1, 0, 2)
            )
        return out[0], out[1], out[2]

    def mix(self, layer: int, head_outputs: np.ndarray) -> np.ndarray:
        """Merge per-head outputs back to model width through the out projection."""
        s = self.spec
        merged = head_outputs.transpose(1, 0, 2).reshape(s.HW, s.model_dim)
        return merged @ self.weights[layer]["o"]


def build_toy_model(spec: ToyModelSpec) -> ToyModel:
    return ToyModel(spec)


@dataclass(frozen=True)
class PlantedSpec:
    """Ground-truth head labels plus the logit margin pushing toward them.

    ``condition_kind``/``condition_variant`` key extra query noise of
    amplitude ``condition_strength``, used to emulate changing prompts, AR
    steps, or denoise steps when exercising the core-set stability ratio.
    """

    labels: tuple[str, ...]
    margin: float
    noise_seed: int
    row_noise: float = PLANTED_ROW_NOISE
    condition_kind: str | None = None
    condition_variant: int = 0
    condition_strength: float = 0.0

    def __post_init__(self):
        for lb in self.labels:
            if lb not in REGION_LABELS:
                raise ConfigError(f"unknown head label {lb!r}")
        if self.margin < 0:
            raise ConfigError("margin must be >= 0")
        if self.condition_kind is not None and self.condition_kind not in CONDITION_KINDS:
            raise ConfigError(f"unknown condition kind {self.condition_kind!r}")
        if self.condition_strength < 0:
            raise ConfigError("condition_strength must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedSpec":
        d = dict(d)
        d["labels"] = tuple(d["labels"])
        return cls(**d)


class PlantedModel:
    """Open-loop Q/K/V stream with region-biased logits and known labels."""

    is_open_loop = True

    def __init__(self, spec: PlantedSpec, config: SessionConfig):
        if len(spec.labels) != config.total_heads:
            raise ConfigError(
                f"{len(spec.labels)} labels for {config.total_heads} heads"
            )
        self.spec = spec
        self.config = config
        self._dir_cache: dict[int, np.ndarray] = {}

    @property
    def labels(self) -> tuple[str, ...]:
        return self.spec.labels

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def _direction(self, frame: int) -> np.ndarray:
        """Fixed unit signature vector of one frame."""
        d = self._dir_cache.get(frame)
        if d is None:
            v = rng.symmetric(
                rng.derive(self.spec.noise_seed, "dir", frame), (self.config.head_dim,)
            )
            d = v / np.linalg.norm(v)
            self._dir_cache[frame] = d
        return d

    def _window_frames(self, ar_step: int) -> list[int]:
        """Candidate context frames at a step: sink, window neighbors, current."""
        cfg = self.config
        lo = max(ar_step - (cfg.window_len - 1), 0)
        frames = set(range(lo, ar_step + 1))
        if cfg.sink_frame < ar_step:
            frames.add(cfg.sink_frame)
        return sorted(frames)

    def _region_frames(self, label: str, ar_step: int) -> list[int]:
        cfg = self.config
        if label == "current":
            return [ar_step]
        if label == "sink":
            return [cfg.sink_frame] if cfg.sink_frame < ar_step else [ar_step]
        lo = max(ar_step - (cfg.window_len - 1), 0)
        frames = [f for f in range(lo, ar_step) if f != cfg.sink_frame]
        return frames or [ar_step]

    def frame_input(self, ar_step: int, denoise_step: int) -> np.ndarray:
        cfg = self.config
        return np.zeros((cfg.HW, cfg.num_heads * cfg.head_dim))

    def qkv(
        self, layer: int, x: np.ndarray, ar_step: int, denoise_step: int
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cfg, sp = self.config, self.spec
        sqrt_d = math.sqrt(cfg.head_dim)
        q = np.empty((cfg.num_heads, cfg.HW, cfg.head_dim))
        k = np.empty_like(q)
        v = np.empty_like(q)
        window = self._window_frames(ar_step)
        for head in range(cfg.num_heads):
            flat = cfg.flat_index(layer, head)
            target = set(self._region_frames(sp.labels[flat], ar_step))
            base = np.zeros(cfg.head_dim)
            for f in window:
                coef = sp.margin if f in target else 0.0
                if sp.condition_kind is not None and sp.condition_strength > 0:
                    g = rng.symmetric(
                        rng.derive(
                            sp.noise_seed,
                            f"cond-{sp.condition_kind}",
                            sp.condition_variant,
                            layer,
                            head,
                            f,
                        ),
                        (1,),
                    )[0]
                    coef += sp.condition_strength * g
                base = base + coef * self._direction(f)
            q_noise = rng.matrix(
                rng.derive(sp.noise_seed, "q", layer, head, ar_step, denoise_step),
                cfg.HW,
                cfg.head_dim,
            )
            q[head] = sqrt_d * base[None, :] + sp.row_noise * q_noise
            k_noise = rng.matrix(
                rng.derive(sp.noise_seed, "k", layer, head, ar_step),
                cfg.HW,
                cfg.head_dim,
            )
            k[head] = self._direction(ar_step)[None, :] + sp.row_noise * k_noise
            v[head] = rng.matrix(
                rng.derive(sp.noise_seed, "v", layer, head, ar_step),
                cfg.HW,
                cfg.head_dim,
            )
        return q, k, v

    def mix(self, layer: int, head_outputs: np.ndarray) -> np.ndarray:
        cfg = self.config
        return head_outputs.transpose(1, 0, 2).reshape(
            cfg.HW, cfg.num_heads * cfg.head_dim
        )


def planted_stream(spec: PlantedSpec, config: SessionConfig) -> PlantedModel:
    """Build the labeled Q/K/V stream for a session config."""
    return PlantedModel(spec, config)


def stability_perturb(
    spec: PlantedSpec, condition: str, strength: float, variant: int = 0
) -> PlantedSpec:
    """Spec variant with condition-keyed query noise of the given amplitude.

    Building streams from variants 0..C-1 and profiling each yields the C
    head sets whose overlap the core-set ratio measures.
    """
    if condition not in CONDITION_KINDS:
        raise ConfigError(f"unknown condition kind {condition!r}")
    if strength < 0:
        raise ConfigError("strength must be >= 0")
    return replace(
        spec,
        condition_kind=condition,
        condition_variant=variant,
        condition_strength=strength,
    )


def cycle_labels(counts: dict[str, int]) -> tuple[str, ...]:
    """Deterministic label vector from per-class counts, grouped in label order."""
    out: list[str] = []
    for label in REGION_LABELS:
        out.extend([label] * counts.get(label, 0))
    return tuple(out)


def stream_tensors(model, config: SessionConfig, ar_steps: int) -> dict:
    """Per-step Q/K/V of an open-loop stream as named container tensors.

    Only defined for streams whose Q/K/V ignore attention state (planted
    streams); a closed-loop model's per-layer K/V exist only inside a
    session, where `kv_cache.cache_snapshot` captures them. Uses the last
    denoise iteration of each step; names are ``step{i}/layer{l}/{q,k,v}``.
    """
    if not getattr(model, "is_open_loop", False):
        raise ConfigError(
            "stream export needs an open-loop stream; snapshot a session's "
            "caches for closed-loop models"
        )
    out = {}
    t = config.denoise_steps - 1
    for i in range(ar_steps):
        x = model.frame_input(i, t)
        for layer in range(config.num_layers):
            q, k, v = model.qkv(layer, x, i, t)
            out[f"step{i}/layer{layer}/q"] = q
            out[f"step{i}/layer{layer}/k"] = k
            out[f"step{i}/layer{layer}/v"] = v
    return out
