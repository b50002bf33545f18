"""Regenerate the bundled dataset and train the bundled 2-conv + 2-FC model.

Run once offline; the outputs under src/adaptexp/data/bundled/ are committed.
Requires torch (not a runtime dependency of the package).

    python3 scripts/train_bundled_model.py
"""

from pathlib import Path

import numpy as np
import torch
from torch import nn

from adaptexp import netsim

OUT = Path(__file__).resolve().parents[1] / "src" / "adaptexp" / "data" / "bundled"
SEED = 0


def build():
    return nn.Sequential(
        nn.Conv2d(1, 8, 3, padding=1), nn.ReLU(),
        nn.Conv2d(8, 16, 3, stride=2, padding=1), nn.ReLU(),
        nn.Flatten(),
        nn.Linear(16 * 4 * 4, 64), nn.ReLU(),
        nn.Linear(64, 10),
    )


def to_graph(net) -> netsim.ModelGraph:
    c1, _, c2, _, _, f1, _, f2 = net
    g = lambda p: p.detach().numpy().astype(np.float32)
    return netsim.ModelGraph((1, 8, 8), [
        netsim.Conv2D("conv1", g(c1.weight), g(c1.bias), stride=1, pad=1), netsim.ReLU("relu1"),
        netsim.Conv2D("conv2", g(c2.weight), g(c2.bias), stride=2, pad=1), netsim.ReLU("relu2"),
        netsim.Flatten("flatten"),
        netsim.FC("fc1", g(f1.weight), g(f1.bias)), netsim.ReLU("relu3"),
        netsim.FC("fc2", g(f2.weight), g(f2.bias)),
        netsim.Argmax("argmax"),
    ])


def main():
    ds = netsim.make_blobs_dataset(seed=SEED)
    torch.manual_seed(SEED)
    net = build()
    xtr, ytr = ds.split("train")
    xtr, ytr = torch.from_numpy(xtr), torch.from_numpy(ytr)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3, weight_decay=1e-3)
    gen = torch.Generator().manual_seed(SEED)
    for epoch in range(40):
        perm = torch.randperm(len(xtr), generator=gen)
        for lo in range(0, len(xtr), 32):
            idx = perm[lo:lo + 32]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(net(xtr[idx]), ytr[idx])
            loss.backward()
            opt.step()
    graph = to_graph(net)
    OUT.mkdir(parents=True, exist_ok=True)
    netsim.save_model(graph, OUT / "model.json")
    (OUT / "dataset").mkdir(exist_ok=True)
    netsim.save_dataset(ds, OUT / "dataset")
    for tag in ("train", "heldout"):
        x, y = ds.split(tag)
        print(tag, netsim.evaluate_accuracy(graph, x, y))


if __name__ == "__main__":
    main()
