"""Frame-structured token bookkeeping and attention mask construction.

Each frame contributes one camera token followed by P patch tokens; masks
are materialized as explicit boolean matrices (row = query, column = key),
which keeps golden tests bit-exact. The streaming engine never builds them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FrameLayout:
    num_frames: int
    patch_size: int
    image_h: int
    image_w: int

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("need at least one frame")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch size {self.patch_size}")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def patch_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def tokens_per_frame(self) -> int:
        return 1 + self.patch_tokens

    @property
    def total_tokens(self) -> int:
        return self.num_frames * self.tokens_per_frame

    def camera_index(self, frame: int) -> int:
        return frame * self.tokens_per_frame

    def patch_indices(self, frame: int) -> np.ndarray:
        start = self.camera_index(frame) + 1
        return np.arange(start, start + self.patch_tokens)

    def frame_of_token(self, token: int) -> int:
        return token // self.tokens_per_frame

    def token_frames(self) -> np.ndarray:
        """Frame index of every token in sequence order."""
        return np.repeat(np.arange(self.num_frames), self.tokens_per_frame)

    @classmethod
    def from_patch_count(cls, num_frames: int, patch_tokens: int) -> "FrameLayout":
        """Layout with an abstract 1 x P patch grid (mask tests only)."""
        return cls(num_frames=num_frames, patch_size=1, image_h=1, image_w=patch_tokens)


@dataclass(frozen=True)
class AttentionMask:
    visible: np.ndarray  # (N, N) bool
    kind: str
    window_frames: int | None = None

    def __post_init__(self):
        v = self.visible
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.dtype != np.bool_:
            raise ValueError("mask must be a square boolean matrix")
        if not v.any(axis=1).all():
            raise ValueError("mask has a row with no visible entries")
        v.flags.writeable = False

    @property
    def n(self) -> int:
        return self.visible.shape[0]

    def to_text(self) -> str:
        return "\n".join("".join("1" if x else "0" for x in row) for row in self.visible)


def build_full_mask(layout: FrameLayout) -> AttentionMask:
    n = layout.total_tokens
    return AttentionMask(np.ones((n, n), dtype=bool), "full")


def build_grouped_causal_mask(layout: FrameLayout) -> AttentionMask:
    """Causal across frames, fully bidirectional inside each frame block."""
    f = layout.token_frames()
    visible = f[None, :] <= f[:, None]
    return AttentionMask(visible, "grouped_causal")


def build_flat_causal_mask(layout: FrameLayout) -> AttentionMask:
    """Conventional lower-triangular token-index causality."""
    n = layout.total_tokens
    idx = np.arange(n)
    return AttentionMask(idx[None, :] <= idx[:, None], "flat_causal")


def build_sliding_window_mask(layout: FrameLayout, window_frames: int) -> AttentionMask:
    """Grouped causal limited to the window_frames previous frames plus own frame."""
    if window_frames < 1:
        raise ValueError("window_frames must be >= 1")
    f = layout.token_frames()
    kf, qf = f[None, :], f[:, None]
    visible = (kf <= qf) & (kf >= qf - window_frames)
    return AttentionMask(visible, "sliding_window", window_frames=window_frames)
