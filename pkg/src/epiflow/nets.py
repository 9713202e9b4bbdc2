"""Small fully-connected networks with explicit reverse-mode gradients.

Everything here is float64 numpy. The architecture family is fixed
(Linear -> ReLU -> ... -> Linear), which keeps the backward pass short
enough to verify against finite differences instead of pulling in an
autodiff framework.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MLP",
    "Adam",
    "TargetCopy",
    "CheckpointError",
    "expectile_weight",
    "expectile_loss",
    "flatten_params",
    "assign_flat_params",
    "net_to_bytes",
    "net_from_bytes",
    "save_net",
    "load_net",
]

NET_MAGIC = "epiflow-net"
NET_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a network checkpoint is malformed or corrupted."""


def _check_2d(x: np.ndarray, dim: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(
            f"{name}: expected shape (batch, {dim}), got {x.shape}"
        )
    return x


class MLP:
    """Multi-layer perceptron with ReLU hidden activations.

    Parameters are stored as lists of (in, out) weight matrices and
    (out,) bias vectors.  Initialisation is Xavier-uniform with
    limit sqrt(6 / (fan_in + fan_out)); biases start at zero.
    """

    def __init__(self, sizes: tuple[int, ...], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError(f"need at least input and output sizes, got {sizes}")
        if any(s <= 0 for s in sizes):
            raise ValueError(f"layer sizes must be positive, got {sizes}")
        self.sizes = tuple(int(s) for s in sizes)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            self.weights.append(rng.uniform(-limit, limit, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Plain forward pass on a (batch, in_dim) array."""
        h = _check_2d(x, self.in_dim, "MLP.forward input")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                np.maximum(h, 0.0, out=h)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass that keeps post-activation layer inputs for backward().

        Returns (output, cache).  cache[i] is the input to layer i; the
        final entry is the network output.
        """
        h = _check_2d(x, self.in_dim, "MLP.forward input")
        cache = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                np.maximum(h, 0.0, out=h)
            cache.append(h)
        return h, cache

    def backward(
        self,
        cache: list[np.ndarray],
        dout: np.ndarray,
        with_dx: bool = False,
    ) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray | None]:
        """Reverse-mode gradients for a forward_cached() call.

        dout holds d(loss)/d(output), shape (batch, out_dim).  Returns
        ([(dW, db) per layer], dx) where dx is None unless requested.
        """
        dout = _check_2d(dout, self.out_dim, "MLP.backward dout")
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.weights)  # type: ignore[list-item]
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            inp = cache[i]
            if i != len(self.weights) - 1:
                # cache[i + 1] holds the post-ReLU activation of layer i,
                # so its zeros mark exactly the clipped units.
                delta = delta * (cache[i + 1] > 0.0)
            dw = inp.T @ delta
            db = delta.sum(axis=0)
            grads[i] = (dw, db)
            if i > 0 or with_dx:
                delta = delta @ self.weights[i].T
        return grads, (delta if with_dx else None)

    def params(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return list(zip(self.weights, self.biases))

    def copy(self) -> "MLP":
        dup = MLP.__new__(MLP)
        dup.sizes = self.sizes
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        return dup


# ---------------------------------------------------------------------------
# optimiser and target tracking
# ---------------------------------------------------------------------------


@dataclass
class Adam:
    """Adam with bias correction, operating in place on an MLP."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    _m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)
    _v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    def step(self, net: MLP, grads: list[tuple[np.ndarray, np.ndarray]]) -> None:
        if not self._m:
            self._m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.params()]
            self._v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.params()]
        if len(grads) != len(net.weights):
            raise ValueError(
                f"gradient count {len(grads)} does not match layer count {len(net.weights)}"
            )
        for i, (dw, db) in enumerate(grads):
            if not np.all(np.isfinite(dw)):
                raise FloatingPointError(f"non-finite gradient for layer {i} weights")
            if not np.all(np.isfinite(db)):
                raise FloatingPointError(f"non-finite gradient for layer {i} biases")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, (dw, db) in enumerate(grads):
            mw, mb = self._m[i]
            vw, vb = self._v[i]
            mw *= self.beta1
            mw += (1.0 - self.beta1) * dw
            mb *= self.beta1
            mb += (1.0 - self.beta1) * db
            vw *= self.beta2
            vw += (1.0 - self.beta2) * np.square(dw)
            vb *= self.beta2
            vb += (1.0 - self.beta2) * np.square(db)
            net.weights[i] -= self.lr * (mw / c1) / (np.sqrt(vw / c2) + self.eps)
            net.biases[i] -= self.lr * (mb / c1) / (np.sqrt(vb / c2) + self.eps)


class TargetCopy:
    """Exponential-moving-average shadow of an MLP.

    The shadow starts as an exact copy and is pulled toward the online
    network by ``shadow = (1 - rho) * shadow + rho * online``.
    """

    def __init__(self, net: MLP):
        self.net = net.copy()

    def update(self, online: MLP, rho: float) -> None:
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {rho}")
        if online.sizes != self.net.sizes:
            raise ValueError(
                f"target copy sizes {self.net.sizes} do not match online {online.sizes}"
            )
        keep = 1.0 - rho
        for ws, wo in zip(self.net.weights, online.weights):
            ws *= keep
            ws += rho * wo
        for bs, bo in zip(self.net.biases, online.biases):
            bs *= keep
            bs += rho * bo

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.net.forward(x)


# ---------------------------------------------------------------------------
# expectile regression pieces
# ---------------------------------------------------------------------------


def expectile_weight(diff: np.ndarray, tau: float) -> np.ndarray:
    """Asymmetric weight |tau - 1{diff < 0}| used by the expectile loss."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return np.where(diff < 0.0, 1.0 - tau, tau)


def expectile_loss(diff: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-element expectile loss and its derivative with respect to diff.

    loss = |tau - 1{diff < 0}| * diff**2.  At tau = 0.5 this is half the
    squared error, so it degrades to (scaled) least squares.
    """
    diff = np.asarray(diff, dtype=np.float64)
    w = expectile_weight(diff, tau)
    return w * diff * diff, 2.0 * w * diff


# ---------------------------------------------------------------------------
# parameter vector helpers (used by checkpoints and gradient checks)
# ---------------------------------------------------------------------------


def flatten_params(net: MLP) -> np.ndarray:
    parts = []
    for w, b in net.params():
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def assign_flat_params(net: MLP, vec: np.ndarray) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    for w, b in net.params():
        w[...] = vec[offset : offset + w.size].reshape(w.shape)
        offset += w.size
        b[...] = vec[offset : offset + b.size]
        offset += b.size
    if offset != vec.size:
        raise ValueError(f"parameter vector length {vec.size}, expected {offset}")


# ---------------------------------------------------------------------------
# checkpoint format: ASCII header, blank line, little-endian float64 block
# ---------------------------------------------------------------------------


def net_to_bytes(net: MLP, *, seed: int = 0, steps: int = 0) -> bytes:
    """Serialize one network.

    Header lines record the format version, architecture, the seed and
    step count of the run that produced the parameters, then a CRC32 of
    the raw parameter block so truncation and bit rot are detectable.
    """
    flat = flatten_params(net)
    block = flat.astype("<f8").tobytes()
    header = (
        f"{NET_MAGIC} v{NET_VERSION}\n"
        f"sizes {' '.join(str(s) for s in net.sizes)}\n"
        f"seed {int(seed)}\n"
        f"steps {int(steps)}\n"
        f"count {flat.size}\n"
        f"checksum {zlib.crc32(block):08x}\n"
        "\n"
    )
    return header.encode("ascii") + block


def save_net(net: MLP, path: str, *, seed: int = 0, steps: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(net_to_bytes(net, seed=seed, steps=steps))


def _parse_net_header(lines: list[str]) -> dict[str, str]:
    fields: dict[str, str] = {}
    for line in lines:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    return fields


def net_from_bytes(raw: bytes, context: str = "checkpoint") -> tuple[MLP, dict[str, int]]:
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{context}: missing header terminator")
    try:
        lines = raw[:sep].decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{context}: header is not ASCII") from exc
    if not lines:
        raise CheckpointError(f"{context}: empty header")
    magic, _, version = lines[0].partition(" ")
    if magic != NET_MAGIC:
        raise CheckpointError(f"{context}: bad magic {lines[0]!r}")
    if version != f"v{NET_VERSION}":
        raise CheckpointError(
            f"{context}: unsupported version {version!r}, expected v{NET_VERSION}"
        )
    fields = _parse_net_header(lines[1:])
    for key in ("sizes", "count", "checksum"):
        if key not in fields:
            raise CheckpointError(f"{context}: header missing {key!r}")
    sizes = tuple(int(s) for s in fields["sizes"].split())
    count = int(fields["count"])
    block = raw[sep + 2 :]
    if len(block) != count * 8:
        raise CheckpointError(
            f"{context}: parameter block holds {len(block)} bytes, expected {count * 8}"
        )
    if f"{zlib.crc32(block):08x}" != fields["checksum"]:
        raise CheckpointError(f"{context}: parameter checksum mismatch")
    net = MLP(sizes, np.random.default_rng(0))
    assign_flat_params(net, np.frombuffer(block, dtype="<f8").astype(np.float64))
    meta = {"seed": int(fields.get("seed", "0")), "steps": int(fields.get("steps", "0"))}
    return net, meta


def load_net(path: str) -> tuple[MLP, dict[str, int]]:
    """Read a checkpoint written by save_net(); returns (net, metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    return net_from_bytes(raw, context=path)
