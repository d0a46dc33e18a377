"""Write a tiny IDX pair, read it back, train one client on it."""

import tempfile
from pathlib import Path

import numpy as np

from fedstein.datagen import load_idx, split, write_idx
from fedstein.federation import ClientRecord, client_local_update, evaluate
from fedstein.nn import LayerSpec, build_model

rng = np.random.default_rng(0)
labels = np.repeat(np.arange(2), 40)
images = np.zeros((80, 6, 6), dtype=np.uint8)
for img, y in zip(images, labels):
    # class 0: bright top half, class 1: bright bottom half
    rows = slice(0, 3) if y == 0 else slice(3, 6)
    img[rows] = rng.integers(150, 216, (3, 6))
    img += rng.integers(0, 40, (6, 6)).astype(np.uint8)

with tempfile.TemporaryDirectory() as tmp:
    ip, lp = Path(tmp) / "images.idx", Path(tmp) / "labels.idx"
    write_idx(images, labels, ip, lp)
    print("header bytes:", ip.read_bytes()[:16].hex(" ", 4))
    ds = load_idx(ip, lp, "toy", classes=2)

print("decoded", ds.features.shape, "pixel range", ds.features.min(), ds.features.max())
train, test = split(ds, 0.25, 0)
specs = [LayerSpec("conv2d", out=4, kernel=3, pad=1), LayerSpec("norm"), LayerSpec("relu"),
         LayerSpec("flatten"), LayerSpec("dense", out=2)]
client = ClientRecord(0, "toy", build_model(specs, (1, 6, 6), 0), train, test)
for t in range(1, 6):
    client, loss = client_local_update(client, 1, 16, 0.05, t)
    print(f"epoch {t}: loss {loss:.3f}  test acc {evaluate(client.model, [test])['Average']:.2f}")
