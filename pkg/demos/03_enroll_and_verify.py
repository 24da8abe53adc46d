"""
Enrollment and verification with a generated verifier
=====================================================

A small system is trained for a few hundred steps on synthetic identities.
One image enrolls a user; the generated verifier is written to disk and is
the only thing needed afterwards.
"""
import tempfile
from pathlib import Path

import numpy as np

from hyperverify.config import RunConfig
from hyperverify.hypernet import enroll_multi
from hyperverify.modelio import load_verifier, save_verifier
from hyperverify.training import train
from hyperverify.verifier import verify

config = RunConfig(identities=40, samples_per_identity=8, steps=300, initial_B=2, warmup=30,
                   kcs_start=200, lr=2e-3, beta=1.0, embed_dim=32, hidden=[64, 64, 64],
                   backbone_channels=[8, 16, 32, 32], backbone_epochs=15, backbone_batch=16,
                   kmeans_k=4, dtype="float32")


def show(rec):
    if rec["step"] % 50 == 0:
        print(f"step {rec['step']:4d} loss {rec['loss']:.3f} B={rec['batch_size']} {rec['sampling_mode']}")


result = train(config, progress=show)
system, test = result.system, result.prepared.test
# a backbone that cannot tell identities apart leaves the generator nothing to learn from
print(f"backbone identity accuracy {result.prepared.backbone_info['train_accuracy']:.3f}")

members = test.indices_by_identity()
alice, bob = members[0], members[1]
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "alice.hnfv"
    save_verifier(path, system.enroll(test.images[alice[0]]), system.arch, system.threshold)
    print(f"model file: {path.stat().st_size} bytes")
    model = load_verifier(path)  # no backbone or hypernetwork from here on
    for name, idx in (("alice", alice[1:4]), ("bob", bob[:3])):
        probs = [verify(model.arch, test.images[i].astype(np.float32), model.weights) for i in idx]
        print(name, " ".join(f"{p:.3f}" for p in probs))

# several enrollment images: embeddings are averaged before generation
ws = enroll_multi(system.hypernet, system.backbone, list(test.images[alice[:3]]))
print("multi-image enrollment on a fresh alice image:",
      f"{verify(system.arch, test.images[alice[4]], ws):.3f}")
