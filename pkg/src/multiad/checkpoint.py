"""Binary checkpoint container.

Layout (little-endian)::

    b"MADC" | version u32 | blob_len u32 | blob (UTF-8 JSON)
    repeated: name_len u32 | name | ndims u32 | dims u32[ndims] | float32 data
    crc32 u32 over every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .inference import RefinementParams
from .model import MultiADModel
from .tensor import AdamState

MAGIC = b"MADC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: MultiADModel
    student_opt: AdamState = field(default_factory=AdamState)
    disc_opt: AdamState = field(default_factory=AdamState)
    rng_state: dict | None = None
    step: int = 0
    history: list[dict] = field(default_factory=list)
    teacher_ready: bool = False
    version: int = FORMAT_VERSION

    @property
    def config(self) -> PipelineConfig:
        return self.model.config

    @property
    def teacher_mode(self) -> str:
        return self.model.config.teacher_mode


def _opt_meta(opt: AdamState) -> dict:
    return {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t}


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    m = ckpt.model
    out: list[tuple[str, np.ndarray]] = []
    for prefix, net in (("teacher", m.teacher), ("student", m.student), ("disc", m.discriminator)):
        out += [(f"{prefix}/{k}", v) for k, v in net.arrays().items()]
    if m.refinement is not None:
        out += [(f"refine/{k}", v) for k, v in m.refinement.arrays().items()]
    for prefix, opt in (("adam_student", ckpt.student_opt), ("adam_disc", ckpt.disc_opt)):
        out += [(f"{prefix}/m/{k}", v) for k, v in opt.m.items()]
        out += [(f"{prefix}/v/{k}", v) for k, v in opt.v.items()]
    return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "history": ckpt.history,
        "rng_state": ckpt.rng_state,
        "teacher_mode": ckpt.teacher_mode,
        "teacher_ready": ckpt.teacher_ready,
        "calibrated": ckpt.model.refinement is not None,
        "adam": {"student": _opt_meta(ckpt.student_opt), "disc": _opt_meta(ckpt.disc_opt)},
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    for name, arr in _records(ckpt):
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    version = struct.unpack("<I", buf[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checksum mismatch (truncated or corrupted checkpoint)")
    r = _Reader(buf, len(body))
    r.take(8)
    blob = r.take(r.u32())
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata blob: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    while r.pos < r.end:
        name = r.take(r.u32()).decode("utf-8")
        ndims = r.u32()
        dims = struct.unpack(f"<{ndims}I", r.take(4 * ndims))
        count = int(np.prod(dims)) if ndims else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        if name in arrays:
            raise CheckpointError(f"duplicate record {name}")
        arrays[name] = data
    return _assemble(meta, arrays)


def _assemble(meta: dict, arrays: dict[str, np.ndarray]) -> Checkpoint:
    config = PipelineConfig.from_dict(meta["config"])
    model = MultiADModel.initialize(config)
    expected: dict[str, tuple[int, ...]] = {}
    for prefix, net in (("teacher", model.teacher), ("student", model.student), ("disc", model.discriminator)):
        expected.update({f"{prefix}/{k}": v.shape for k, v in net.arrays().items()})
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise CheckpointError(f"checkpoint lacks {len(missing)} array(s) required by its config, e.g. {missing[0]}")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointError(f"array {name} has shape {arrays[name].shape}, config implies {shape}")
    for prefix, net in (("teacher", model.teacher), ("student", model.student), ("disc", model.discriminator)):
        net.load_arrays({k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + "/")})
    if meta.get("calibrated"):
        levels = model.levels
        try:
            ref = {k: arrays[f"refine/{k}"] for k in ("scale", "bias", "mean", "var")}
        except KeyError as exc:
            raise CheckpointError(f"calibrated checkpoint lacks {exc.args[0]}") from exc
        if any(v.shape != (levels,) for v in ref.values()):
            raise CheckpointError("refinement arrays do not match the pyramid depth")
        model.refinement = RefinementParams(**ref)
    opts = {}
    for key, prefix, net in (("student", "adam_student", model.student), ("disc", "adam_disc", model.discriminator)):
        om = meta["adam"][key]
        opt = AdamState(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"], t=om["t"])
        for k, v in arrays.items():
            for slot in ("m", "v"):
                head = f"{prefix}/{slot}/"
                if k.startswith(head):
                    pname = k[len(head) :]
                    if pname not in net.params or net.params[pname].shape != v.shape:
                        raise CheckpointError(f"optimizer record {k} does not match any parameter")
                    getattr(opt, slot)[pname] = v
        opts[key] = opt
    known = set(expected) | {f"refine/{k}" for k in ("scale", "bias", "mean", "var")}
    stray = [k for k in arrays if k not in known and not k.startswith(("adam_student/", "adam_disc/"))]
    if stray:
        raise CheckpointError(f"unexpected array {stray[0]}")
    return Checkpoint(
        model=model,
        student_opt=opts["student"],
        disc_opt=opts["disc"],
        rng_state=meta.get("rng_state"),
        step=int(meta["step"]),
        history=list(meta.get("history", [])),
        teacher_ready=bool(meta.get("teacher_ready", False)),
    )


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
