"""Synthetic identity-structured multi-patch feature data.

Each identity owns one centroid per patch, drawn uniformly from the unit
sphere. A face of that identity is, per patch::

    centroid[p] + shared + independent[p]

where ``shared`` ~ N(0, within_noise_sigma^2 I) is drawn once per face and
added to every patch (a face-level nuisance such as pose or lighting), and
``independent[p]`` ~ N(0, patch_noise_sigma^2 I) is drawn separately for each
patch. The shared term concentrates noise in a low-dimensional subspace of the
concatenated descriptor that a learned projection can suppress; the
independent term averages out as more patches are concatenated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .feature_store import Dataset, FaceRecord

__all__ = ["SynthConfig", "generate"]


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 100
    faces_per_identity: int = 20
    n_patches: int = 4
    patch_dim: int = 64
    within_noise_sigma: float = 0.4
    patch_noise_sigma: float = 0.1
    seed: int = 0
    identity_prefix: str = "id"

    def __post_init__(self):
        for name in ("n_identities", "faces_per_identity", "n_patches", "patch_dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        for name in ("within_noise_sigma", "patch_noise_sigma"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def generate(config: SynthConfig) -> Dataset:
    rng = np.random.default_rng(config.seed)
    n_id, n_face = config.n_identities, config.faces_per_identity
    n_patch, dim = config.n_patches, config.patch_dim

    centroids = rng.standard_normal((n_id, n_patch, dim))
    centroids /= np.linalg.norm(centroids, axis=2, keepdims=True)
    shared = config.within_noise_sigma * rng.standard_normal((n_id, n_face, 1, dim))
    independent = config.patch_noise_sigma * rng.standard_normal((n_id, n_face, n_patch, dim))
    faces = (centroids[:, None] + shared + independent).astype(np.float32)

    width = len(str(n_id - 1))
    fwidth = len(str(n_face - 1))
    records = []
    for i in range(n_id):
        ident = f"{config.identity_prefix}{i:0{width}d}"
        for j in range(n_face):
            records.append(
                FaceRecord(
                    f"{ident}_{j:0{fwidth}d}",
                    ident,
                    {p: faces[i, j, p] for p in range(n_patch)},
                )
            )
    return Dataset(records)
