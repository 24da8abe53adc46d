"""
The model container
===================

Writes a verifier, inspects its bytes, and shows the errors raised for a
flipped payload byte, a future version and the wrong role.
"""
import json
import struct
import tempfile
from pathlib import Path

import numpy as np

from hyperverify.modelio import ModelFormatError, decode_model, save_verifier
from hyperverify.verifier import DESK, WeightSet, count_params

theta = np.random.default_rng(0).normal(size=count_params(DESK))
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "user.hnfv"
    save_verifier(path, WeightSet(theta, DESK.layout()), DESK, threshold=0.5)
    data = path.read_bytes()

magic, version, role, hlen = struct.unpack_from("<4sHBI", data)
header = json.loads(data[11: 11 + hlen])
print(f"{magic!r} version {version} role {role} header {hlen} bytes, total {len(data)} bytes")
print("payload bytes:", len(data) - 11 - hlen - 4)
print("tensors:", [(e["name"], e["shape"]) for e in header["layout"]])

cases = {
    "flipped payload byte": data[:-50] + bytes([data[-50] ^ 1]) + data[-49:],
    "version 2": data[:4] + struct.pack("<H", 2) + data[6:],
    "truncated": data[:200],
    "empty": b"",
}
for name, blob in cases.items():
    try:
        decode_model(blob)
    except ModelFormatError as exc:
        print(f"{name:22s} -> {type(exc).__name__}: {exc}")
try:
    decode_model(data, expect_role="backbone")
except ModelFormatError as exc:
    print(f"{'wrong role':22s} -> {type(exc).__name__}: {exc}")
