"""Fuse three embeddings with a grid-searched linear ensemble."""

from dataclasses import replace

from deepembed import GridConfig, TrainConfig, generate, pairwise_accuracy_tenfold, score_pairs, tenfold_ensemble, train
from deepembed.ensemble import fuse_average, grid_search_ensemble
from deepembed.experiments import ProtocolConfig, make_eval_set
from deepembed.synth import SynthConfig

cfg = SynthConfig(n_identities=60, faces_per_identity=10, n_patches=4, patch_dim=32, seed=3)
data = generate(cfg)
ev = make_eval_set(cfg, ProtocolConfig(eval_identities=60, eval_faces=8, n_same=300, n_diff=300))

# three members: different seeds, one of them with a hidden layer
configs = [TrainConfig(output_dim=32, epochs=8, seed=0),
           TrainConfig(output_dim=32, epochs=8, seed=1),
           TrainConfig(output_dim=24, epochs=8, seed=2, hidden_dim=64)]
models = [train(data, None, c) for c in configs]
ss = score_pairs(models, ev.dataset, ev.pairs)

for m in range(ss.n_models):
    acc = pairwise_accuracy_tenfold(ss.column(m), ev.pairs, ev.folds).mean_accuracy
    print(f"model {m}: ten-fold accuracy {acc:.4f}")
print(f"plain average: {pairwise_accuracy_tenfold(fuse_average(ss), ev.pairs, ev.folds).mean_accuracy:.4f}")

res = tenfold_ensemble(ss, ev.folds, GridConfig(weight_step=0.05))
print(f"grid ensemble: {res.mean_accuracy:.4f}")
full = grid_search_ensemble(ss, grid=replace(GridConfig(), threads=2))
print("weights fitted on all pairs:", full.weights, "threshold", round(full.threshold, 4))
