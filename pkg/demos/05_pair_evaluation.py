"""
Pair evaluation with cross-validated thresholds
===============================================

Any object with ``score_pairs(enroll, probe)`` can be evaluated. Here a
scorer built on backbone cosine similarity is compared with a constant one.
"""
import numpy as np

from hyperverify.backbone import BackboneConfig, train_reference_backbone
from hyperverify.data import SynthConfig, split_identities, synth_identity_dataset
from hyperverify.evaluation import evaluate_pairs, make_pairs, roc_curve

ds = synth_identity_dataset(SynthConfig(identities=60, samples_per_identity=10))
train_ds, _, test_ds = split_identities(ds, (0.6, 0.2, 0.2))
bb_config = BackboneConfig(embed_dim=32, channels=(8, 16, 32, 32), batch_size=32, epochs=12)
backbone, _ = train_reference_backbone(train_ds, bb_config)


class Cosine:
    def score_pairs(self, enroll, probe):
        return (backbone.embed_batch(enroll) * backbone.embed_batch(probe)).sum(1)


class Constant:
    def score_pairs(self, enroll, probe):
        return np.full(len(enroll), 0.5)


pairs = make_pairs(test_ds, 600, seed=0)
for name, scorer in (("cosine", Cosine()), ("constant", Constant())):
    rep = evaluate_pairs(scorer, pairs)
    print(f"{name:8s} accuracy {rep.accuracy_mean:.3f} +- {rep.accuracy_std:.3f}  AUC {rep.auc:.3f}  "
          f"TAR@FAR=1e-2 {rep.tar_at_far['0.01']:.3f}")

roc = roc_curve(np.exp(np.arange(10.0)), np.arange(10) % 2)
print("toy ROC (far, tar):", " ".join(f"({f:.1f}, {t:.1f})" for f, t in zip(roc.far, roc.tar)))
