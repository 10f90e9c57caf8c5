"""Synthetic patch descriptors: generate, save, reload, and look at them."""

import tempfile
from pathlib import Path

import numpy as np

from deepembed import SynthConfig, generate, load_dataset, save_dataset, sample_pairs, write_pairs

cfg = SynthConfig(n_identities=20, faces_per_identity=5, n_patches=3, patch_dim=16, seed=0)
ds = generate(cfg)
print(f"{len(ds.records)} faces, {len(ds.identities)} identities, patches {ds.patch_ids} dims {ds.patch_dims}")

# every face carries one vector per patch; concatenating gives the raw descriptor
X = ds.matrix()
print("concatenated descriptor matrix:", X.shape, X.dtype)

# faces of one identity sit closer together than faces of different identities
labels = np.array(ds.labels)
Xn = X / np.linalg.norm(X, axis=1, keepdims=True)
S = Xn @ Xn.T
same = labels[:, None] == labels[None, :]
off_diag = ~np.eye(len(labels), dtype=bool)
print(f"mean raw cosine  same identity {S[same & off_diag].mean():.3f}  different {S[~same].mean():.3f}")

with tempfile.TemporaryDirectory() as tmp:
    save_dataset(ds, tmp)
    pairs = sample_pairs(ds, 50, 50, seed=0)
    write_pairs(pairs, Path(tmp) / "pairs.txt")
    back = load_dataset(Path(tmp) / "manifest.csv")
    print("round trip exact:", np.array_equal(back.matrix(), X))
    print("first manifest lines:")
    print("\n".join((Path(tmp) / "manifest.csv").read_text().splitlines()[:3]))
