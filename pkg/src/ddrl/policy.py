"""Feed-forward action network ``w = F(features; theta)``."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import Tape, UsageError, Var, affine, column, relu

FULL_HIDDEN = (300, 300)


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden: tuple[int, ...] = FULL_HIDDEN

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise UsageError(f"invalid architecture {self}")

    @property
    def output_dim(self) -> int:
        return 1

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_shapes)


@dataclass
class PolicyParams:
    """Layer weights and biases.  Callable on a feature batch."""

    arch: Architecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        shapes = self.arch.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise UsageError("layer count does not match architecture")
        for (fi, fo), w, b in zip(shapes, self.weights, self.biases):
            if w.shape != (fi, fo) or b.shape != (fo,):
                raise UsageError(f"layer shape {w.shape}/{b.shape} != ({fi}, {fo})")

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: Architecture, theta) -> "PolicyParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (arch.n_params,):
            raise UsageError(f"expected {arch.n_params} parameters, got {theta.shape}")
        weights, biases, k = [], [], 0
        for fi, fo in arch.layer_shapes:
            weights.append(theta[k : k + fi * fo].reshape(fi, fo).copy())
            k += fi * fo
            biases.append(theta[k : k + fo].copy())
            k += fo
        return cls(arch, weights, biases)

    def bind(self, tape: Tape) -> "BoundParams":
        """Register every parameter block as a tape leaf."""
        return BoundParams(
            self.arch,
            [tape.leaf(w) for w in self.weights],
            [tape.leaf(b) for b in self.biases],
        )

    def __call__(self, features) -> np.ndarray:
        return policy_forward(self, features)


@dataclass
class BoundParams:
    arch: Architecture
    weights: list[Var]
    biases: list[Var]

    @property
    def leaves(self) -> list[Var]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_flat(cls, arch: Architecture, theta: Var) -> "BoundParams":
        """Parameter blocks carved out of one flat leaf (for flat-vector gradients)."""
        if theta.shape != (arch.n_params,):
            raise UsageError(f"expected {arch.n_params} parameters, got {theta.shape}")
        tape = theta.tape
        weights, biases, k = [], [], 0
        for fi, fo in arch.layer_shapes:
            w = tape.record("slice", [theta], [k, k + fi * fo])
            weights.append(tape.record("reshape", [w], [(fi, fo)]))
            k += fi * fo
            biases.append(tape.record("slice", [theta], [k, k + fo]))
            k += fo
        return cls(arch, weights, biases)

    def flat_grad(self, grads) -> np.ndarray:
        return np.concatenate([grads[v].ravel() for v in self.leaves])


def init_policy(arch: Architecture, seed: int) -> PolicyParams:
    """Fan-in uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in arch.layer_shapes:
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return PolicyParams(arch, weights, biases)


def zero_policy(arch: Architecture) -> PolicyParams:
    return PolicyParams.from_flat(arch, np.zeros(arch.n_params))


def policy_forward(params, features, tape: Tape | None = None):
    """Action for each row of ``features``.

    ``features`` is ``(input_dim,)`` or ``(batch, input_dim)``, as an array
    or a ``Var``.  Returns a scalar / ``(batch,)`` array, or a ``Var`` when a
    tape is involved (either passed explicitly, via bound params, or via a
    ``Var`` input).
    """
    if isinstance(params, PolicyParams) and (tape is not None or isinstance(features, Var)):
        params = params.bind(tape if tape is not None else features.tape)
    if not isinstance(features, Var):
        features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1 if not isinstance(features, Var) else features.value.ndim == 1
    shape = features.shape
    if shape[-1] != params.arch.input_dim:
        raise UsageError(f"feature length {shape[-1]} != input_dim {params.arch.input_dim}")
    if single and isinstance(features, Var):
        raise UsageError("taped forward expects a (batch, input_dim) feature Var")
    x = features[None, :] if single else features
    n_layers = len(params.weights)
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = affine(x, w, b)
        if k < n_layers - 1:
            x = relu(x)
    out = column(x, 0)
    return out[0] if single else out


# -- checkpoint container ----------------------------------------------------
# layout: magic line, one JSON header line, raw little-endian float64 theta

_MAGIC = b"DDRL-CHECKPOINT 1\n"


def save_checkpoint(path, params: PolicyParams, metadata: dict | None = None) -> None:
    header = {
        "input_dim": params.arch.input_dim,
        "hidden": list(params.arch.hidden),
        "n_params": params.arch.n_params,
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    theta = params.flat().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(theta.tobytes())


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise UsageError(f"{path}: not a policy checkpoint")
    k = len(_MAGIC)
    (n,) = struct.unpack("<Q", data[k : k + 8])
    k += 8
    header = json.loads(data[k : k + n])
    k += n
    arch = Architecture(header["input_dim"], tuple(header["hidden"]))
    theta = np.frombuffer(data[k:], dtype="<f8").astype(np.float64)
    if theta.size != header["n_params"]:
        raise UsageError(f"{path}: truncated parameter block")
    return PolicyParams.from_flat(arch, theta), header["metadata"]
