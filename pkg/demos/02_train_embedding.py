"""Train a triplet embedding and watch the loss fall."""

import numpy as np

from deepembed import SynthConfig, TrainConfig, embed, generate, train

data = generate(SynthConfig(n_identities=60, faces_per_identity=10, n_patches=4, patch_dim=32, seed=1))
history = []
model = train(data, None, TrainConfig(output_dim=32, epochs=10, seed=0), history=history)

print(f"model {model.input_dim} -> {model.output_dim}")
for epoch, loss in enumerate(history):
    print(f"epoch {epoch:2d}  mean triplet loss {loss:.4f}")

E = embed(model, data.matrix())
print("embedding norms in [%.6f, %.6f]" % (np.linalg.norm(E, axis=1).min(), np.linalg.norm(E, axis=1).max()))

# gap between same-identity and different-identity similarity, before and after
labels = np.array(data.labels)
same = labels[:, None] == labels[None, :]
off = ~np.eye(len(labels), dtype=bool)
X = data.matrix()
X = X / np.linalg.norm(X, axis=1, keepdims=True)
for name, V in (("raw", X), ("embedded", E)):
    S = V @ V.T
    print(f"{name:9s} same {S[same & off].mean():.3f}  diff {S[~same].mean():.3f}")
