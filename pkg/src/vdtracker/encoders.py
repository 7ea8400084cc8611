"""Object and text input pipelines.

Both "pre-trained" feature providers are deterministic fixtures: the object
side encodes ground-truth attributes and positions directly into a 16-dim
latent (standing in for a frozen segmentation network), and the text side
uses a frozen random embedding table generated once from a seed (standing in
for a frozen language model). Neither participates in training; only the
projections and position tables on top of them are learnable.
"""

from __future__ import annotations

import numpy as np

from .data import COLORS, SHAPES, Scene, derive_seed
from .tensor import ShapeError, Tensor, add, gather_rows, matmul, slice_rows

D_OBJ = 16

# latent block layout (asserted in tests): shape one-hot, color one-hot,
# material flag, size flag, normalised x/y position
SHAPE_BLOCK = slice(0, 4)
COLOR_BLOCK = slice(4, 12)
MATERIAL_POS = 12
SIZE_POS = 13
XY_BLOCK = slice(14, 16)


class FixtureEmbedder:
    """Frozen token-embedding table, Gaussian(0, 1/sqrt(d_w)), seed-determined.

    The table is never registered as a parameter and never updated.
    """

    def __init__(self, seed: int, vocab_size: int, d_w: int, dtype=np.float32):
        self.seed = seed
        rng = np.random.default_rng(derive_seed(seed, "fixture-table"))
        self.table = (rng.standard_normal((vocab_size, d_w))
                      / np.sqrt(d_w)).astype(dtype)
        self.table.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def d_w(self) -> int:
        return self.table.shape[1]

    def embed(self, token_ids) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(
                f"token id out of range for vocab of {self.vocab_size}"
            )
        return self.table[ids]


def sample_frame_indices(video_len: int, t: int) -> list[int]:
    """T equidistant frame indices over a video of ``video_len`` frames:
    round(j * (F-1)/(T-1)), half-up, computed in exact integer arithmetic."""
    if video_len < 1 or t < 1:
        raise ValueError("video_len and t must be >= 1")
    if video_len == 1 or t == 1:
        return [0] * t
    num, den = video_len - 1, t - 1
    return [(2 * j * num + den) // (2 * den) for j in range(t)]


def fixture_scene_latents(scene: Scene, frame: int, slot: int,
                          noise_sigma: float, seed: int) -> np.ndarray:
    """Latent for one (frame, object-slot) pair.

    Real objects get one-hot attribute blocks plus their position at ``frame``
    plus Gaussian noise from a seed derived per (seed, scene, frame, slot);
    slots beyond the scene's object count yield the all-zero empty-slot code.
    """
    mu = np.zeros(D_OBJ, dtype=np.float64)
    if slot >= len(scene.objects):
        return mu
    obj = scene.objects[slot]
    mu[SHAPE_BLOCK.start + SHAPES.index(obj.shape)] = 1.0
    mu[COLOR_BLOCK.start + COLORS.index(obj.color)] = 1.0
    mu[MATERIAL_POS] = 1.0 if obj.material == "metal" else 0.0
    mu[SIZE_POS] = 1.0 if obj.size == "large" else 0.0
    x, y = obj.trajectory[frame]
    mu[XY_BLOCK] = (x, y)
    if noise_sigma > 0:
        rng = np.random.default_rng(derive_seed(seed, scene.scene_id, frame, slot))
        mu += noise_sigma * rng.standard_normal(D_OBJ)
    return mu


def scene_latents(scene: Scene, t: int, n_slots: int, noise_sigma: float,
                  seed: int, dtype=np.float32) -> np.ndarray:
    """All (T * n_slots) latents for a scene, frame-major then slot."""
    frames = sample_frame_indices(scene.num_frames, t)
    rows = [
        fixture_scene_latents(scene, f, s, noise_sigma, seed)
        for f in frames
        for s in range(n_slots)
    ]
    return np.stack(rows).astype(dtype)


def encode_objects(latents: np.ndarray, w_obj: Tensor, o_pos: Tensor) -> Tensor:
    """Project per-(frame, slot) latents into model width and add the learnable
    per-row position embedding. Row (t * n_slots + n) corresponds to slot n of
    sampled frame t."""
    expected = o_pos.data.shape[0]
    if latents.ndim != 2 or latents.shape[0] != expected:
        raise ShapeError(
            f"expected {expected} object latents (T x N_o), got {latents.shape}"
        )
    if latents.shape[1] != w_obj.data.shape[0]:
        raise ShapeError(
            f"latent width {latents.shape[1]} does not match projection "
            f"{w_obj.data.shape}"
        )
    mu = Tensor(latents.astype(w_obj.data.dtype))
    return add(matmul(mu, w_obj), o_pos)


def encode_text(token_ids, embedder: FixtureEmbedder, w_w: Tensor,
                w_pos: Tensor) -> Tensor:
    """Frozen token embeddings projected into model width plus the learnable
    positional embedding prefix."""
    ids = list(token_ids)
    if not ids:
        raise ShapeError("cannot encode an empty token sequence")
    max_len = w_pos.data.shape[0]
    if len(ids) > max_len:
        raise ShapeError(
            f"sequence of {len(ids)} tokens exceeds position table ({max_len})"
        )
    h = Tensor(embedder.embed(ids).astype(w_w.data.dtype))
    return add(matmul(h, w_w), slice_rows(w_pos, 0, len(ids)))
