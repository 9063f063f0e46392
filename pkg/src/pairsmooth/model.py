"""Dual-head MLP classifier.

A shared trunk maps inputs to an m-dimensional embedding S; two linear heads
of identical K x m shape read the same S: the logit head produces z for the
class posterior, the smoothing head produces v = sigmoid(W_t S + b_t), whose
row-softmax is the learned smoothing distribution over classes.

Checkpoint format ("pairsmooth-ckpt-v1"):
  line 1: ASCII magic ``pairsmooth-ckpt-v1``
  line 2: JSON metadata: {"input_dim", "hidden", "class_count",
          "arrays": [{"name", "shape"}, ...]}
  then:   raw little-endian float64 payloads concatenated in header order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ShapeError, matmul, relu, sigmoid, softmax_rows

CHECKPOINT_MAGIC = "pairsmooth-ckpt-v1"


@dataclass
class DualHeadOutput:
    """Per-batch forward results: logits z, post-sigmoid smoothing
    pre-activations v (entries in (0,1)), and the shared embedding S."""

    logits: Tensor
    smoothing_pre: Tensor
    embedding: Tensor


class DualHeadClassifier:
    """MLP trunk with ReLU nonlinearities plus logit and smoothing heads.

    Weights are stored out-of-dim first ([h_out, h_in]; heads [K, m]) and
    initialized uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from the given
    seed, so construction is deterministic.
    """

    def __init__(self, input_dim: int, hidden: tuple[int, ...], class_count: int, seed: int):
        if class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {class_count}")
        if not hidden:
            raise ValueError("trunk needs at least one hidden layer")
        self.input_dim = int(input_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.class_count = int(class_count)
        self.seed = int(seed)

        rng = np.random.default_rng(seed)
        def layer(h_out, h_in):
            bound = 1.0 / np.sqrt(h_in)
            w = Tensor(rng.uniform(-bound, bound, size=(h_out, h_in)), requires_grad=True)
            b = Tensor(rng.uniform(-bound, bound, size=h_out), requires_grad=True)
            return w, b

        dims = (self.input_dim,) + self.hidden
        self.trunk = [layer(dims[i + 1], dims[i]) for i in range(len(self.hidden))]
        self.logit_head = layer(self.class_count, self.embedding_dim)
        self.smoothing_head = layer(self.class_count, self.embedding_dim)

    @property
    def embedding_dim(self) -> int:
        return self.hidden[-1]

    def named_parameters(self):
        for i, (w, b) in enumerate(self.trunk):
            yield f"trunk.{i}.weight", w
            yield f"trunk.{i}.bias", b
        yield "logit_head.weight", self.logit_head[0]
        yield "logit_head.bias", self.logit_head[1]
        yield "smoothing_head.weight", self.smoothing_head[0]
        yield "smoothing_head.bias", self.smoothing_head[1]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def forward(self, inputs) -> DualHeadOutput:
        """One shared pass: embedding S, then both heads from the same S."""
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        if x.data.ndim != 2 or x.data.shape[1] != self.input_dim:
            raise ShapeError(
                f"forward: expected inputs B x {self.input_dim}, got {x.data.shape}"
            )
        s = x
        for w, b in self.trunk:
            s = relu(matmul(s, w.T) + b)
        wl, bl = self.logit_head
        wt, bt = self.smoothing_head
        z = matmul(s, wl.T) + bl
        v = sigmoid(matmul(s, wt.T) + bt)
        return DualHeadOutput(logits=z, smoothing_pre=v, embedding=s)

    def __call__(self, inputs) -> DualHeadOutput:
        return self.forward(inputs)


def predict_probs(out: DualHeadOutput) -> Tensor:
    """Class posterior: row softmax of the logits."""
    return softmax_rows(out.logits)


def smoothing_distribution(out: DualHeadOutput) -> Tensor:
    """Learned smoothing distribution: row softmax of v.

    Because v is in (0,1), every entry lands in
    (1/(1+(K-1)e), e/(e+K-1)) -- the sigmoid bound pushed through softmax.
    """
    return softmax_rows(out.smoothing_pre)


def save_checkpoint(model: DualHeadClassifier, path) -> None:
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    meta = {
        "input_dim": model.input_dim,
        "hidden": list(model.hidden),
        "class_count": model.class_count,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC.encode() + b"\n")
        f.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> DualHeadClassifier:
    with open(path, "rb") as f:
        magic = f.readline().strip().decode("ascii", errors="replace")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a {CHECKPOINT_MAGIC} file (header {magic!r})")
        meta = json.loads(f.readline())
        model = DualHeadClassifier(
            meta["input_dim"], tuple(meta["hidden"]), meta["class_count"], seed=0
        )
        params = dict(model.named_parameters())
        for entry in meta["arrays"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"truncated checkpoint at array {entry['name']!r}")
            params[entry["name"]].data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return model
