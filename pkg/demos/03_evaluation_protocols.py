"""Verification and identification metrics on held-out identities."""

from deepembed import (
    SynthConfig,
    TrainConfig,
    generate,
    make_folds,
    pairwise_accuracy_tenfold,
    rank1_identification,
    roc_curve,
    sample_pairs,
    score_pairs,
    tar_at_far,
    train,
    dir_at_far,
)
from deepembed.evalproto import auc, build_identification_setup, cmc_curve, embed_dataset

base = SynthConfig(n_identities=80, faces_per_identity=10, n_patches=4, patch_dim=32, seed=2)
model = train(generate(base), None, TrainConfig(output_dim=32, epochs=10))

# evaluation identities are disjoint from the training ones
test = generate(SynthConfig(n_identities=50, faces_per_identity=8, n_patches=4, patch_dim=32,
                            seed=99, identity_prefix="eval"))
pairs = sample_pairs(test, 300, 300, seed=0)
scores = score_pairs([model], test, pairs).column(0)
labels = [p.same for p in pairs]

roc = roc_curve(scores, labels)
print(f"AUC {auc(roc):.4f}")
for far in (0.001, 0.01, 0.1):
    tar, thr = tar_at_far(scores, labels, far)
    print(f"TAR {tar:.3f} at FAR {far} (threshold {thr:.3f})")

res = pairwise_accuracy_tenfold(scores, pairs, make_folds(pairs, 10, seed=0, stratified=True))
print(f"ten-fold accuracy {res.mean_accuracy:.4f}")

setup = build_identification_setup(embed_dataset([model], test), test, gallery_fraction=0.5, seed=0)
print(f"gallery {len(setup.gallery_ids)}  mated probes {len(setup.mated_ids)}  non-mated {len(setup.nonmated)}")
print(f"rank-1 {rank1_identification(setup):.3f}")
print("CMC ranks 1..5:", [round(float(v), 3) for v in cmc_curve(setup, 5)])
for far in (0.01, 0.1):
    rate, thr = dir_at_far(setup, far)
    print(f"DIR {rate:.3f} at FAR {far} (threshold {thr:.3f})")
