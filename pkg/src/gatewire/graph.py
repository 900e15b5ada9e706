"""Network construction: MainNet block sequences with optional residual blocks,
SideNet attachment at intermediate representations, parameter accounting, and
bit-exact binary checkpoints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, GatewireError, ShapeError, SpecError
from .tensor import BatchNormState, Tensor

CHECKPOINT_MAGIC = b"SDN1"


# ---------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    bias: bool = True


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class BatchNorm:
    width: int


@dataclass(frozen=True)
class Residual:
    inner: tuple = ()


@dataclass(frozen=True)
class SideNetSpec:
    attach_index: int
    input_dim: int
    num_classes: int
    hidden_units: int = 32
    head: str = "softmax"

    def output_units(self) -> int:
        return 1 if self.head == "sigmoid" else self.num_classes


@dataclass(frozen=True)
class NetworkSpec:
    main_blocks: tuple
    num_classes: int
    sidenets: tuple = ()
    head: str = "softmax"

    def output_units(self) -> int:
        return 1 if self.head == "sigmoid" else self.num_classes


def _walk_widths(blocks, start_width, where: str):
    """Width after each block; raises SpecError on any incompatibility."""
    width = start_width
    widths = []
    for i, b in enumerate(blocks):
        if isinstance(b, Linear):
            if b.in_dim < 1 or b.out_dim < 1:
                raise SpecError(f"{where} block {i}: linear dims must be positive")
            if width is not None and width != b.in_dim:
                raise SpecError(
                    f"{where} block {i}: linear expects width {b.in_dim}, got {width}"
                )
            width = b.out_dim
        elif isinstance(b, BatchNorm):
            if width is not None and width != b.width:
                raise SpecError(
                    f"{where} block {i}: batchnorm width {b.width} does not match {width}"
                )
            width = b.width
        elif isinstance(b, Relu):
            pass
        elif isinstance(b, Residual):
            inner_widths = _walk_widths(b.inner, width, f"{where} block {i} inner")
            out = inner_widths[-1] if inner_widths else width
            if width is None or out != width:
                raise SpecError(
                    f"{where} block {i}: residual_block output width {out} must equal input width {width}"
                )
        else:
            raise SpecError(f"{where} block {i}: unknown layer kind {type(b).__name__}")
        widths.append(width)
    return widths


def validate_spec(spec: NetworkSpec):
    """Returns (input_dim, widths-after-each-block)."""
    if not spec.main_blocks:
        raise SpecError("network needs at least one main block")
    if spec.head not in ("softmax", "sigmoid"):
        raise SpecError(f"unknown head {spec.head!r}")
    if spec.num_classes < 2:
        raise SpecError(f"num_classes must be >= 2, got {spec.num_classes}")
    if spec.head == "sigmoid" and spec.num_classes != 2:
        raise SpecError("sigmoid head implies num_classes == 2")

    first = spec.main_blocks[0]
    if isinstance(first, Linear):
        input_dim = first.in_dim
    elif isinstance(first, BatchNorm):
        input_dim = first.width
    else:
        raise SpecError("first main block must pin the input width (linear or batchnorm)")

    widths = _walk_widths(spec.main_blocks, input_dim, "main")
    if widths[-1] != spec.output_units():
        raise SpecError(
            f"main output width {widths[-1]} does not match head ({spec.output_units()} units)"
        )

    seen = set()
    for j, sn in enumerate(spec.sidenets):
        if sn.attach_index in seen:
            raise SpecError(f"sidenet {j}: duplicate attach_index {sn.attach_index}")
        seen.add(sn.attach_index)
        if not 0 <= sn.attach_index < len(spec.main_blocks) - 1:
            raise SpecError(
                f"sidenet {j}: attach_index {sn.attach_index} must lie strictly before "
                f"the final block (have {len(spec.main_blocks)} blocks)"
            )
        if widths[sn.attach_index] != sn.input_dim:
            raise SpecError(
                f"sidenet {j}: input_dim {sn.input_dim} does not match width "
                f"{widths[sn.attach_index]} at block {sn.attach_index}"
            )
        if sn.hidden_units < 1:
            raise SpecError(f"sidenet {j}: hidden_units must be >= 1")
        if sn.head == "softmax":
            if sn.num_classes < 2:
                raise SpecError(f"sidenet {j}: num_classes must be >= 2 for softmax")
        elif sn.head == "sigmoid":
            if sn.num_classes != 2:
                raise SpecError(f"sidenet {j}: sigmoid head implies num_classes == 2")
        else:
            raise SpecError(f"sidenet {j}: unknown head {sn.head!r}")
    return input_dim, widths


# ---------------------------------------------------------------------------
# Spec JSON codec (checkpoint trailer and config files)


def _block_to_json(b):
    if isinstance(b, Linear):
        return {"kind": "linear", "in_dim": b.in_dim, "out_dim": b.out_dim, "bias": b.bias}
    if isinstance(b, Relu):
        return {"kind": "relu"}
    if isinstance(b, BatchNorm):
        return {"kind": "batchnorm", "width": b.width}
    if isinstance(b, Residual):
        return {"kind": "residual_block", "inner": [_block_to_json(x) for x in b.inner]}
    raise SpecError(f"unknown layer kind {type(b).__name__}")


def _require_keys(obj: dict, allowed, required, where: str):
    unknown = set(obj) - set(allowed)
    if unknown:
        raise SpecError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(obj)
    if missing:
        raise SpecError(f"{where}: missing keys {sorted(missing)}")


def _block_from_json(obj, where: str):
    if not isinstance(obj, dict) or "kind" not in obj:
        raise SpecError(f"{where}: layer must be an object with a 'kind'")
    kind = obj["kind"]
    if kind == "linear":
        _require_keys(obj, ("kind", "in_dim", "out_dim", "bias"), ("in_dim", "out_dim"), where)
        return Linear(int(obj["in_dim"]), int(obj["out_dim"]), bool(obj.get("bias", True)))
    if kind == "relu":
        _require_keys(obj, ("kind",), (), where)
        return Relu()
    if kind == "batchnorm":
        _require_keys(obj, ("kind", "width"), ("width",), where)
        return BatchNorm(int(obj["width"]))
    if kind == "residual_block":
        _require_keys(obj, ("kind", "inner"), ("inner",), where)
        inner = tuple(_block_from_json(x, f"{where}.inner[{k}]") for k, x in enumerate(obj["inner"]))
        return Residual(inner)
    raise SpecError(f"{where}: unknown layer kind {kind!r}")


def spec_to_json(spec: NetworkSpec) -> dict:
    return {
        "main_blocks": [_block_to_json(b) for b in spec.main_blocks],
        "sidenets": [
            {
                "attach_index": sn.attach_index,
                "input_dim": sn.input_dim,
                "hidden_units": sn.hidden_units,
                "num_classes": sn.num_classes,
                "head": sn.head,
            }
            for sn in spec.sidenets
        ],
        "num_classes": spec.num_classes,
        "head": spec.head,
    }


def spec_from_json(obj: dict) -> NetworkSpec:
    _require_keys(
        obj,
        ("main_blocks", "sidenets", "num_classes", "head"),
        ("main_blocks", "num_classes"),
        "network",
    )
    blocks = tuple(
        _block_from_json(b, f"network.main_blocks[{i}]") for i, b in enumerate(obj["main_blocks"])
    )
    sidenets = []
    for j, sobj in enumerate(obj.get("sidenets", ())):
        where = f"network.sidenets[{j}]"
        _require_keys(
            sobj,
            ("attach_index", "input_dim", "hidden_units", "num_classes", "head"),
            ("attach_index", "input_dim", "num_classes"),
            where,
        )
        sidenets.append(
            SideNetSpec(
                attach_index=int(sobj["attach_index"]),
                input_dim=int(sobj["input_dim"]),
                num_classes=int(sobj["num_classes"]),
                hidden_units=int(sobj.get("hidden_units", 32)),
                head=str(sobj.get("head", "softmax")),
            )
        )
    spec = NetworkSpec(
        main_blocks=blocks,
        sidenets=tuple(sidenets),
        num_classes=int(obj["num_classes"]),
        head=str(obj.get("head", "softmax")),
    )
    validate_spec(spec)
    return spec


# ---------------------------------------------------------------------------
# Runtime model


class _SideRuntime:
    __slots__ = ("spec", "w1", "b1", "bn", "w2", "b2")

    def __init__(self, spec, w1, b1, bn, w2, b2):
        self.spec = spec
        self.w1, self.b1, self.bn, self.w2, self.b2 = w1, b1, bn, w2, b2


class Model:
    """A built network: named parameter tensors plus batchnorm state."""

    def __init__(self, spec: NetworkSpec, params, bn_states, sides, input_dim: int):
        self.spec = spec
        self.params = params  # name -> Tensor, insertion-ordered
        self.bn_states = bn_states  # name prefix -> BatchNormState
        self._sides = sides
        self.input_dim = input_dim

    # -- mode and grad switches ------------------------------------------------

    def _main_bn_states(self):
        return [s for name, s in self.bn_states.items() if name.startswith("main.")]

    def _side_bn_states(self):
        return [s for name, s in self.bn_states.items() if name.startswith("side.")]

    def train_mode(self, frozen_main: bool = False):
        for s in self._main_bn_states():
            s.mode = "eval" if frozen_main else "train"
        for s in self._side_bn_states():
            s.mode = "train"

    def eval_mode(self):
        for s in self.bn_states.values():
            s.mode = "eval"

    def main_parameters(self) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith("main.")}

    def side_parameters(self, j: int | None = None) -> dict:
        prefix = "side." if j is None else f"side.{j}."
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def set_requires_grad(self, main: bool, side: bool = True):
        for k, p in self.params.items():
            p.requires_grad = side if k.startswith("side.") else main

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -- forward ---------------------------------------------------------------

    def _as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float64))
        if x.data.ndim != 2 or x.data.shape[1] != self.input_dim:
            raise ShapeError(
                f"expected batch x {self.input_dim} input, got {tuple(x.data.shape)}"
            )
        return x

    def _run_block(self, block, h: Tensor, name: str) -> Tensor:
        if isinstance(block, Linear):
            out = T.matmul(h, self.params[f"{name}.weight"])
            if block.bias:
                out = T.add(out, self.params[f"{name}.bias"])
            return out
        if isinstance(block, Relu):
            return T.relu(h)
        if isinstance(block, BatchNorm):
            return T.batchnorm(h, self.bn_states[name])
        if isinstance(block, Residual):
            inner = h
            for k, ib in enumerate(block.inner):
                inner = self._run_block(ib, inner, f"{name}.inner.{k}")
            return T.add(inner, h)
        raise SpecError(f"unknown layer kind {type(block).__name__}")

    def run_main(self, x, start: int = 0, stop: int | None = None):
        """Run main blocks [start, stop) from representation x; returns per-block outputs."""
        h = self._as_input(x) if start == 0 else x
        outs = []
        blocks = self.spec.main_blocks
        stop = len(blocks) if stop is None else stop
        for i in range(start, stop):
            h = self._run_block(blocks[i], h, f"main.{i}")
            outs.append(h)
        return outs

    def _apply_head(self, logits: Tensor, head: str) -> Tensor:
        return T.softmax(logits) if head == "softmax" else T.sigmoid(logits)

    def side_forward(self, j: int, h: Tensor) -> Tensor:
        """Evaluate SideNet j on the intermediate representation it attaches to."""
        s = self._sides[j]
        out = T.add(T.matmul(h, s.w1), s.b1)
        out = T.batchnorm(out, s.bn)
        out = T.relu(out)
        out = T.add(T.matmul(out, s.w2), s.b2)
        return self._apply_head(out, s.spec.head)

    def forward(self, x):
        """Full pass: (main_probs, side_probs per sidenet, per-block intermediates)."""
        outs = self.run_main(x)
        main_probs = self._apply_head(outs[-1], self.spec.head)
        side_probs = [self.side_forward(j, outs[sn.attach_index])
                      for j, sn in enumerate(self.spec.sidenets)]
        return main_probs, side_probs, outs

    # -- serialization view ------------------------------------------------------

    def checkpoint_tensors(self) -> dict:
        """All state worth persisting: parameters plus batchnorm running stats."""
        out = {}
        for name, p in self.params.items():
            out[name] = p.data
        for name, s in self.bn_states.items():
            out[f"{name}.running_mean"] = s.running_mean
            out[f"{name}.running_var"] = s.running_var
        return out


def _init_linear(rng, in_dim: int, out_dim: int, bias: bool):
    bound = 1.0 / np.sqrt(in_dim)
    w = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
    b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None
    return w, b


def _build_blocks(blocks, prefix, rng, params, bn_states):
    for i, b in enumerate(blocks):
        name = f"{prefix}.{i}"
        if isinstance(b, Linear):
            w, bias = _init_linear(rng, b.in_dim, b.out_dim, b.bias)
            params[f"{name}.weight"] = w
            if bias is not None:
                params[f"{name}.bias"] = bias
        elif isinstance(b, BatchNorm):
            state = BatchNormState(b.width)
            bn_states[name] = state
            params[f"{name}.gamma"] = state.gamma
            params[f"{name}.beta"] = state.beta
        elif isinstance(b, Residual):
            _build_blocks(b.inner, f"{name}.inner", rng, params, bn_states)


def build(spec: NetworkSpec, seed: int) -> Model:
    """Deterministic initialization: linear weights uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)),
    zero biases, batchnorm gamma 1 / beta 0. Main blocks draw from their own seed stream,
    each sidenet from another, so attaching a sidenet never changes main initialization."""
    input_dim, _ = validate_spec(spec)
    children = np.random.SeedSequence(seed).spawn(1 + len(spec.sidenets))

    params: dict[str, Tensor] = {}
    bn_states: dict[str, BatchNormState] = {}
    _build_blocks(spec.main_blocks, "main", np.random.default_rng(children[0]), params, bn_states)

    sides = []
    for j, sn in enumerate(spec.sidenets):
        rng = np.random.default_rng(children[1 + j])
        w1, b1 = _init_linear(rng, sn.input_dim, sn.hidden_units, True)
        bn = BatchNormState(sn.hidden_units)
        w2, b2 = _init_linear(rng, sn.hidden_units, sn.output_units(), True)
        params[f"side.{j}.fc1.weight"] = w1
        params[f"side.{j}.fc1.bias"] = b1
        bn_states[f"side.{j}.bn"] = bn
        params[f"side.{j}.bn.gamma"] = bn.gamma
        params[f"side.{j}.bn.beta"] = bn.beta
        params[f"side.{j}.fc2.weight"] = w2
        params[f"side.{j}.fc2.bias"] = b2
        sides.append(_SideRuntime(sn, w1, b1, bn, w2, b2))

    model = Model(spec, params, bn_states, sides, input_dim)
    model.eval_mode()
    return model


# ---------------------------------------------------------------------------
# Parameter accounting


def _count_block(b, weights_only: bool) -> int:
    if isinstance(b, Linear):
        n = b.in_dim * b.out_dim
        if b.bias and not weights_only:
            n += b.out_dim
        return n
    if isinstance(b, BatchNorm):
        return 0 if weights_only else 2 * b.width
    if isinstance(b, Relu):
        return 0
    if isinstance(b, Residual):
        return sum(_count_block(x, weights_only) for x in b.inner)
    raise SpecError(f"unknown layer kind {type(b).__name__}")


def _count_sidenet(sn: SideNetSpec, weights_only: bool) -> int:
    out_units = sn.output_units()
    n = sn.input_dim * sn.hidden_units + sn.hidden_units * out_units
    if not weights_only:
        n += sn.hidden_units + out_units  # biases
        n += 2 * sn.hidden_units  # batchnorm affine
    return n


def param_count(model: Model, upto: str, weights_only: bool = False) -> int:
    """Parameters executed for an exit point: "side<j>" or "main".

    A sidenet exit covers main blocks up to and including its attach point plus the
    whole sidenet. A main exit covers every main block plus every sidenet, because
    each sidenet runs (its confidence is consulted) before the input moves on.
    """
    spec = model.spec
    if upto == "main":
        n = sum(_count_block(b, weights_only) for b in spec.main_blocks)
        return n + sum(_count_sidenet(sn, weights_only) for sn in spec.sidenets)
    if upto.startswith("side"):
        try:
            j = int(upto[4:])
            sn = spec.sidenets[j]
        except (ValueError, IndexError):
            raise GatewireError(f"unknown exit point {upto!r}") from None
        n = sum(_count_block(b, weights_only) for b in spec.main_blocks[: sn.attach_index + 1])
        return n + _count_sidenet(sn, weights_only)
    raise GatewireError(f"unknown exit point {upto!r}")


# ---------------------------------------------------------------------------
# Checkpoints


def _read_exact(f, n: int, what: str, offset: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated checkpoint: wanted {n} bytes for {what} at byte offset {offset}, got {len(buf)}"
        )
    return buf


def save_checkpoint(model: Model, path):
    tensors = model.checkpoint_tensors()
    payload = json.dumps(spec_to_json(model.spec), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as f:
        offset = 0
        magic = _read_exact(f, 4, "magic", offset)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r} at byte offset 0")
        offset += 4
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count", offset))
        offset += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length", offset))
            offset += 2
            name = _read_exact(f, name_len, "tensor name", offset).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack("<B", _read_exact(f, 1, f"rank of {name}", offset))
            offset += 1
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, f"dims of {name}", offset))
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(f, 8 * size, f"data of {name}", offset)
            offset += 8 * size
            if name in tensors:
                raise CheckpointError(f"duplicate tensor {name!r} at byte offset {offset}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
        (json_len,) = struct.unpack("<I", _read_exact(f, 4, "spec length", offset))
        offset += 4
        payload = _read_exact(f, json_len, "spec json", offset)
        offset += json_len
        if f.read(1):
            raise CheckpointError(f"trailing data at byte offset {offset}")

    try:
        spec_obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable spec trailer: {e}") from None
    spec = spec_from_json(spec_obj)

    model = build(spec, seed=0)
    expected = model.checkpoint_tensors()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"tensor names do not match spec: missing {missing}, extra {extra}")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {arr.shape}, spec implies {expected[name].shape}"
            )
    for name, p in model.params.items():
        p.data = tensors[name]
    for name, s in model.bn_states.items():
        s.running_mean = tensors[f"{name}.running_mean"]
        s.running_var = tensors[f"{name}.running_var"]
    return model
