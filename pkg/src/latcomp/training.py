"""Parameter snapshots, checkpoint archives and the shared training loop."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .errors import FingerprintError, StructuralError, TrainingAborted
from .grid import NormStats

log = logging.getLogger(__name__)

# kind -> (config class, module factory); filled in by codec.py / downscale.py
REGISTRY: dict[str, tuple[type, Callable]] = {}


def register(kind, config_cls, factory):
    REGISTRY[kind] = (config_cls, factory)


def _registry(kind):
    if kind not in REGISTRY:
        from . import codec, downscale  # noqa: F401  (populate registry)
    try:
        return REGISTRY[kind]
    except KeyError:
        raise StructuralError(f"unknown model kind {kind!r}") from None


def state_hash(state: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable snapshot of a trained (or freshly initialised) network.

    ``norm_stats`` maps a role (``"input"``, ``"output"``) to the statistics
    the model was trained under.
    """

    kind: str
    config: object
    state: dict
    fingerprint: str
    variables: tuple = ()
    norm_stats: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_module(cls, kind, config, module, **kw) -> "ModelParams":
        state = {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}
        return cls(kind, config, state, config.fingerprint(), **kw)

    @cached_property
    def param_hash(self) -> str:
        return state_hash(self.state)

    def check(self, config=None):
        if self.config.fingerprint() != self.fingerprint:
            raise FingerprintError(
                f"stored fingerprint {self.fingerprint} does not match its config "
                f"({self.config.fingerprint()})")
        if config is not None and config.fingerprint() != self.fingerprint:
            raise FingerprintError(
                f"parameters were trained for architecture {self.fingerprint}, "
                f"requested {config.fingerprint()}")

    def build(self, dtype=torch.float32) -> torch.nn.Module:
        """A fresh module holding these parameters, in eval mode."""
        _, factory = _registry(self.kind)
        self.check()
        module = factory(self.config)
        missing = module.load_state_dict(self.state, strict=False)
        if missing.missing_keys or missing.unexpected_keys:
            raise FingerprintError(f"parameter names do not match the architecture: {missing}")
        return module.to(dtype).eval()

    @cached_property
    def module(self) -> torch.nn.Module:
        return self.build()

    def stats(self, role="input") -> NormStats | None:
        return self.norm_stats.get(role)


def init_params(kind, config, seed=0, **kw) -> ModelParams:
    _, factory = _registry(kind)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = factory(config)
    return ModelParams.from_module(kind, config, module, **kw)


# --- checkpoint container -----------------------------------------------------

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _zput(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def _state_blob(state):
    index, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        index.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return json.dumps(index, indent=1), b"".join(chunks)


def _state_from_blob(index_json, blob):
    state = {}
    for e in json.loads(index_json):
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<" + e["dtype"]).reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    return state


def history_csv(history) -> str:
    if not history:
        return ""
    buf = io.StringIO()
    keys = list(history[0])
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for row in history:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


def _parse_history(text):
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = {}
        for k, v in r.items():
            try:
                out[k] = int(v)
            except ValueError:
                try:
                    out[k] = float(v)
                except ValueError:
                    out[k] = v
        rows.append(out)
    return rows


def save_checkpoint(params: ModelParams, path, history=()) -> Path:
    """Write ``{config, norm stats, parameter blob, history, fingerprint}`` as one zip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index, blob = _state_blob(params.state)
    meta = {"kind": params.kind, "variables": list(params.variables),
            "provenance": params.provenance, "param_hash": params.param_hash}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _zput(zf, "fingerprint", params.fingerprint)
        _zput(zf, "config.json", json.dumps(params.config.to_dict(), indent=2, sort_keys=True))
        _zput(zf, "norm_stats.json", json.dumps({r: s.to_json() for r, s in params.norm_stats.items()},
                                                indent=2, sort_keys=True))
        _zput(zf, "meta.json", json.dumps(meta, indent=2, sort_keys=True, default=str))
        _zput(zf, "params.json", index)
        _zput(zf, "params.bin", blob)
        _zput(zf, "history.csv", history_csv(list(history)))
    tmp.replace(path)
    return path


def load_checkpoint(path, expect_kind=None):
    """Return ``(ModelParams, history)``; verifies fingerprint and parameter hash."""
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        kind = meta["kind"]
        if expect_kind and kind != expect_kind:
            raise FingerprintError(f"{path} holds a {kind!r} model, expected {expect_kind!r}")
        config_cls, _ = _registry(kind)
        config = config_cls.from_dict(json.loads(zf.read("config.json")))
        fingerprint = zf.read("fingerprint").decode()
        stats = {r: NormStats.from_json(d) for r, d in json.loads(zf.read("norm_stats.json")).items()}
        state = _state_from_blob(zf.read("params.json"), zf.read("params.bin"))
        history = _parse_history(zf.read("history.csv").decode())
    params = ModelParams(kind, config, state, fingerprint, tuple(meta["variables"]), stats,
                         meta.get("provenance", {}))
    params.check()
    if meta.get("param_hash") and meta["param_hash"] != params.param_hash:
        raise FingerprintError(f"{path}: parameter blob does not match its recorded hash")
    return params, history


# --- training loop ------------------------------------------------------------

@dataclass
class Phase:
    name: str
    inputs: np.ndarray
    targets: np.ndarray | None
    epochs: int


def set_determinism(on: bool):
    torch.use_deterministic_algorithms(on, warn_only=True)


def fit(module, phases, loss_fn, *, batch_size, learning_rate, seed, kind, config,
        make_params, checkpoint_dir=None, checkpoint_every=0, on_phase_end=None):
    """Run Adam over ``phases`` in order, sharing parameters and optimizer state.

    ``loss_fn(module, x, y, generator)`` returns ``(total, {name: tensor})``.
    Returns ``(module, history, last_checkpoint, hashes)`` where ``hashes``
    holds the parameter hash at the start and end of every phase run.
    """
    opt = torch.optim.Adam(module.parameters(), lr=learning_rate)
    order_gen = torch.Generator().manual_seed(seed + 1)
    noise_gen = torch.Generator().manual_seed(seed + 2)
    history = []
    hashes = {}
    last_ckpt = None
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None

    def snapshot(tag):
        nonlocal last_ckpt
        params = make_params(module, history, dict(hashes))
        if ckdir is not None:
            last_ckpt = save_checkpoint(params, ckdir / f"{kind}-{tag}.ckpt", history)
        return params

    for phase in phases:
        if phase.epochs <= 0:
            continue
        x_all = torch.from_numpy(np.ascontiguousarray(phase.inputs, dtype=np.float32))
        y_all = None if phase.targets is None else torch.from_numpy(
            np.ascontiguousarray(phase.targets, dtype=np.float32))
        n = x_all.shape[0]
        if n == 0:
            raise ValueError(f"phase {phase.name!r} has no training samples")
        log.info("phase %s: %d samples of %s, %d epochs", phase.name, n,
                 tuple(x_all.shape[1:]), phase.epochs)
        hashes[f"{phase.name}_start"] = state_hash(module.state_dict())
        for epoch in range(1, phase.epochs + 1):
            module.train()
            perm = torch.randperm(n, generator=order_gen)
            sums: dict[str, float] = {}
            for start in range(0, n, batch_size):
                idx = perm[start:start + batch_size]
                xb = x_all[idx]
                yb = None if y_all is None else y_all[idx]
                total, parts = loss_fn(module, xb, yb, noise_gen)
                if not torch.isfinite(total):
                    raise TrainingAborted(
                        f"non-finite loss in phase {phase.name!r} epoch {epoch}",
                        last_checkpoint=last_ckpt)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                m = len(idx)
                sums["loss"] = sums.get("loss", 0.0) + float(total.detach()) * m
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + float(v) * m
            row = {"phase": phase.name, "epoch": epoch}
            row.update({k: v / n for k, v in sums.items()})
            history.append(row)
            log.info("%s epoch %d: %s", phase.name, epoch,
                     " ".join(f"{k}={v:.5g}" for k, v in row.items() if isinstance(v, float)))
            if not all(math.isfinite(v) for v in row.values() if isinstance(v, float)):
                raise TrainingAborted(f"non-finite epoch loss in {phase.name!r}", last_checkpoint=last_ckpt)
            if ckdir is not None and checkpoint_every and epoch % checkpoint_every == 0 \
                    and epoch != phase.epochs:
                snapshot(f"{phase.name}-e{epoch:03d}")
        hashes[f"{phase.name}_end"] = state_hash(module.state_dict())
        params = snapshot(f"{phase.name}-final")
        if on_phase_end is not None:
            on_phase_end(phase.name, params)
    module.eval()
    return module, history, last_ckpt, hashes
