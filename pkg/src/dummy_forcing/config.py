"""Session configuration shared by caches, the attention engine, and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, asdict

from .errors import ConfigError


@dataclass(frozen=True)
class SessionConfig:
    """Static parameters of one generation session.

    ``window_len`` is the baseline cache window in frames: 1 sink plus
    window_len - 1 neighbors, so a warm baseline head holds ``window_len``
    past frames. ``dummy_count`` is the global number of dummy heads across
    all layers. ``merged_window`` switches non-dummy heads to a single
    combined policy holding that many past frames (1 sink plus the rest
    recent); ``context_extension`` grows neighbor windows with the budget
    freed by sink and dummy heads.
    """

    num_layers: int
    num_heads: int
    head_dim: int
    HW: int
    window_len: int
    ar_steps: int
    denoise_steps: int = 1
    sink_frame: int = 0
    dummy_count: int = 0
    packing_enabled: bool = True
    probe_ar_step: int = 2
    probe_denoise_step: int | None = None  # None = last denoise iteration
    subsample_ratio: float = 1.0
    merged_window: int | None = None
    context_extension: bool = False

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.head_dim, self.HW) < 1:
            raise ConfigError("num_layers, num_heads, head_dim, HW must be >= 1")
        if self.window_len < 2:
            raise ConfigError("window_len must be >= 2")
        if self.ar_steps < 1:
            raise ConfigError("ar_steps must be >= 1")
        if self.denoise_steps < 1:
            raise ConfigError("denoise_steps must be >= 1")
        if self.sink_frame < 0:
            raise ConfigError("sink_frame must be >= 0")
        if not 0 <= self.dummy_count <= self.total_heads:
            raise ConfigError(
                f"dummy_count {self.dummy_count} outside [0, {self.total_heads}]"
            )
        if not 0.0 < self.subsample_ratio <= 1.0:
            raise ConfigError("subsample_ratio must be in (0, 1]")
        if self.merged_window is not None and self.merged_window < 2:
            raise ConfigError("merged_window must be >= 2 when set")
        if self.probe_ar_step < 0:
            raise ConfigError("probe_ar_step must be >= 0")

    @property
    def total_heads(self) -> int:
        return self.num_layers * self.num_heads

    @property
    def baseline_past_frames(self) -> int:
        """Past frames a warm baseline head retains (sink + window neighbors)."""
        return self.window_len

    def flat_index(self, layer: int, head: int) -> int:
        return layer * self.num_heads + head

    def layer_head(self, flat: int) -> tuple[int, int]:
        return divmod(flat, self.num_heads)

    def to_dict(self) -> dict:
        return asdict(self)
