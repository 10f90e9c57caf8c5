"""How error moves with training-set size and with the number of patches."""

from deepembed import ProtocolConfig, SynthConfig, TrainConfig, data_sweep, patch_sweep

protocol = ProtocolConfig(train=TrainConfig(output_dim=32, epochs=10),
                          eval_identities=60, eval_faces=8, n_same=300, n_diff=300)

base = SynthConfig(n_identities=80, faces_per_identity=10, n_patches=4, patch_dim=32, seed=0)
res = data_sweep(base, [(10, 10), (40, 10), (80, 10)], protocol, threads=3)
print(res.to_csv())

base = SynthConfig(n_identities=60, faces_per_identity=10, n_patches=6, patch_dim=16,
                   patch_noise_sigma=0.3, seed=0)
res = patch_sweep(base, [1, 2, 4, 6], protocol, threads=4)
print(res.to_csv())
