"""Model hyperparameters shared by the network, training loop, and checkpoints."""

from __future__ import annotations

from dataclasses import asdict, dataclass

SPECIAL_TOKENS = 5  # one camera token + four register tokens per view


@dataclass
class ModelConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    patch: int = 8
    num_queries: int = 16
    num_classes: int = 4
    height: int = 64
    width: int = 64
    mask_threshold: float = 0.5

    def validate(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(
                f"resolution {self.height}x{self.width} not divisible by patch {self.patch}"
            )
        if self.height % 2 or self.width % 2:
            raise ValueError("resolution must be even")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patch % 2:
            raise ValueError("patch must be even (feature maps sit at half resolution)")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError(f"mask_threshold must lie in (0, 1), got {self.mask_threshold}")

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def patches_per_view(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def tokens_per_view(self) -> int:
        return self.patches_per_view + SPECIAL_TOKENS

    @property
    def mlp_hidden(self) -> int:
        return 4 * self.dim

    @property
    def head_hidden(self) -> int:
        return 2 * self.dim

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)
