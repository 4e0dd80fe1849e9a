"""Phase checkpoints: binary records plus a phase marker, per config hash.

Layout under the checkpoint root::

    <root>/<config-hash>/phase.marker
    <root>/<config-hash>/split.rec
    <root>/<config-hash>/local_<t>.rec
    <root>/<config-hash>/global.rec

A record is a little-endian header (magic, version, kind, config hash,
payload length), the payload, and a trailing 64-bit BLAKE2b checksum of
everything before it.  Every file is written to a temporary name and
renamed into place.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import CheckpointError
from ..global_reducer import GlobalSolution, Model
from ..local_solver import LocalProblem, LocalSolution
from ..mesh import refine_element

log = logging.getLogger(__name__)

MAGIC = b"MHMC"
VERSION = 1
HEADER = struct.Struct("<4sHH16sQ")
TRAILER = struct.Struct("<Q")
KIND_SPLIT, KIND_LOCAL, KIND_GLOBAL = 1, 2, 3
PHASES = ("PostSplit", "PostLocals", "Final")
MARKER = "phase.marker"


def checksum(blob: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def encode_record(kind: int, config_hash: str, payload: bytes) -> bytes:
    head = HEADER.pack(MAGIC, VERSION, kind, config_hash.encode("ascii"), len(payload))
    body = head + payload
    return body + TRAILER.pack(checksum(body))


def decode_record(blob: bytes, config_hash: str, kind: int | None = None) -> tuple[int, bytes]:
    """Validate a record and return ``(kind, payload)``."""
    if len(blob) < HEADER.size + TRAILER.size:
        raise CheckpointError("truncated record")
    magic, version, rkind, rhash, length = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("bad magic")
    if version != VERSION:
        raise CheckpointError(f"unsupported record version {version}")
    if len(blob) != HEADER.size + length + TRAILER.size:
        raise CheckpointError("record length mismatch")
    body = blob[:-TRAILER.size]
    (stored,) = TRAILER.unpack_from(blob, len(body))
    if stored != checksum(body):
        raise CheckpointError("checksum mismatch")
    if rhash.decode("ascii") != config_hash:
        raise CheckpointError("record written for a different configuration")
    if kind is not None and rkind != kind:
        raise CheckpointError(f"expected record kind {kind}, found {rkind}")
    return rkind, body[HEADER.size:]


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def ints(self, n: int) -> np.ndarray:
        out = np.frombuffer(self.blob, "<i8", n, self.pos).astype(np.int64)
        self.pos += 8 * n
        return out

    def floats(self, n: int) -> np.ndarray:
        out = np.frombuffer(self.blob, "<f8", n, self.pos).astype(float)
        self.pos += 8 * n
        return out

    def end(self) -> None:
        if self.pos != len(self.blob):
            raise CheckpointError("trailing bytes in payload")


def _i8(a) -> bytes:
    return np.asarray(a, dtype="<i8").tobytes()


def _f8(a) -> bytes:
    return np.asarray(a, dtype="<f8").tobytes()


def pack_local_solution(s: LocalSolution) -> bytes:
    ni, nd = s.D.shape
    return b"".join([_i8([s.t, ni, nd]), _i8(s.dofs), _i8(s.signs), _f8(s.c), _f8(s.D),
                     _f8(s.A), _f8(s.B), _f8(s.E), _f8([s.F])])


def unpack_local_solution(payload: bytes) -> LocalSolution:
    r = _Reader(payload)
    try:
        t, ni, nd = (int(v) for v in r.ints(3))
        dofs, signs = r.ints(ni), r.ints(ni)
        c = r.floats(nd)
        D = r.floats(ni * nd).reshape(ni, nd)
        A = r.floats(ni * ni).reshape(ni, ni)
        B, E = r.floats(ni), r.floats(ni)
        F = float(r.floats(1)[0])
        r.end()
    except ValueError as exc:
        raise CheckpointError(f"malformed local record: {exc}") from exc
    return LocalSolution(t, c, D, A, B, E, F, dofs, signs)


def pack_split(problems) -> bytes:
    parts = [_i8([len(problems)])]
    for p in problems:
        parts += [_i8([p.t, len(p.dofs)]), _i8(p.faces), _i8(p.dofs), _i8(p.signs)]
    return b"".join(parts)


def unpack_split(payload: bytes, model: Model) -> list[LocalProblem]:
    r = _Reader(payload)
    out = []
    try:
        (count,) = r.ints(1)
        for _ in range(int(count)):
            t, ni = (int(v) for v in r.ints(2))
            faces, dofs, signs = r.ints(3), r.ints(ni), r.ints(ni)
            out.append(LocalProblem(t, refine_element(model.mesh, t, model.disc.r), model.data,
                                    model.disc.k, faces, dofs, signs))
        r.end()
    except ValueError as exc:
        raise CheckpointError(f"malformed split record: {exc}") from exc
    return out


def pack_global(g: GlobalSolution) -> bytes:
    return b"".join([_i8([len(g.L), len(g.P), g.nullity]), _f8(g.L), _f8(g.P), _f8([g.residual])])


def unpack_global(payload: bytes) -> GlobalSolution:
    r = _Reader(payload)
    try:
        nl, npc, nullity = (int(v) for v in r.ints(3))
        L, P = r.floats(nl), r.floats(npc)
        res = float(r.floats(1)[0])
        r.end()
    except ValueError as exc:
        raise CheckpointError(f"malformed global record: {exc}") from exc
    return GlobalSolution(L, P, res, nullity)


def atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ResumePoint:
    """Furthest consistent state found on disk."""

    phase: str
    marker: str = ""
    problems: list | None = None
    solutions: dict = field(default_factory=dict)
    discarded: list = field(default_factory=list)


class CheckpointStore:
    def __init__(self, root, config_hash: str, mode: str):
        if mode not in ("coarse", "fine"):
            raise CheckpointError(f"checkpoint mode must be coarse or fine, got {mode!r}")
        self.root = Path(root)
        self.hash = config_hash
        self.mode = mode
        self.dir = self.root / config_hash

    # ------------------------------------------------------------ writing

    def reset(self) -> None:
        """Start a fresh journal for this configuration."""
        self.dir.mkdir(parents=True, exist_ok=True)
        for p in self.dir.iterdir():
            if p.is_file() and (p.suffix in (".rec", ".tmp") or p.name == MARKER):
                p.unlink()

    def _write(self, name: str, kind: int, payload: bytes) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        atomic_write(self.dir / name, encode_record(kind, self.hash, payload))

    def mark(self, phase: str) -> None:
        if phase not in PHASES:
            raise CheckpointError(f"unknown phase {phase!r}")
        self.dir.mkdir(parents=True, exist_ok=True)
        atomic_write(self.dir / MARKER, f"MHM-CKPT {VERSION}\nphase={phase}\nhash={self.hash}\n".encode())

    def write_split(self, problems) -> None:
        self._write("split.rec", KIND_SPLIT, pack_split(sorted(problems, key=lambda p: p.t)))
        self.mark("PostSplit")

    def write_local(self, solution: LocalSolution) -> None:
        self._write(f"local_{solution.t}.rec", KIND_LOCAL, pack_local_solution(solution))

    def write_locals(self, solutions) -> None:
        for s in solutions:
            self.write_local(s)
        self.mark("PostLocals")

    def write_global(self, g: GlobalSolution) -> None:
        self._write("global.rec", KIND_GLOBAL, pack_global(g))
        self.mark("Final")

    def write(self, phase: str, payloads) -> None:
        """Write the records belonging to ``phase`` and then its marker."""
        if phase == "PostSplit":
            self.write_split(payloads)
        elif phase == "PostLocals":
            self.write_locals(payloads)
        elif phase == "Final":
            self.write_global(payloads)
        else:
            raise CheckpointError(f"unknown phase {phase!r}")

    # ------------------------------------------------------------ loading

    def read_marker(self) -> str | None:
        path = self.dir / MARKER
        if not path.exists():
            return None
        fields = dict(line.split("=", 1) for line in path.read_text().splitlines()[1:] if "=" in line)
        if fields.get("hash") != self.hash:
            raise CheckpointError("phase marker belongs to a different configuration; refusing to resume")
        phase = fields.get("phase")
        if phase not in PHASES:
            raise CheckpointError(f"unreadable phase marker {phase!r}")
        return phase

    def _read(self, name: str, kind: int) -> bytes:
        return decode_record((self.dir / name).read_bytes(), self.hash, kind)[1]

    def load(self, model: Model) -> ResumePoint | None:
        """Return the furthest consistent resume point, or None for an empty journal."""
        if not self.dir.exists():
            others = [p.name for p in self.root.iterdir() if p.is_dir()] if self.root.exists() else []
            if others:
                raise CheckpointError(
                    f"checkpoint directory holds runs {others} but none for config {self.hash}; refusing to resume")
            return None
        phase = self.read_marker()
        if phase is None:
            return None
        n_t = model.mesh.n_elements
        try:
            problems = unpack_split(self._read("split.rec", KIND_SPLIT), model)
        except (OSError, CheckpointError) as exc:
            raise CheckpointError(f"split record unusable: {exc}") from exc
        if sorted(p.t for p in problems) != list(range(n_t)):
            raise CheckpointError("split record does not cover the mesh")

        point = ResumePoint("PostSplit", phase, problems)
        for t in range(n_t):
            path = self.dir / f"local_{t}.rec"
            if not path.exists():
                continue
            try:
                sol = unpack_local_solution(self._read(path.name, KIND_LOCAL))
                if sol.t != t:
                    raise CheckpointError(f"record for element {sol.t} stored as {path.name}")
            except (OSError, CheckpointError) as exc:
                if self.mode == "coarse":
                    raise CheckpointError(f"{path.name}: {exc}; rejecting checkpoint") from exc
                log.warning("discarding checkpoint record %s: %s", path.name, exc)
                point.discarded.append(t)
                continue
            point.solutions[t] = sol

        if phase in ("PostLocals", "Final"):
            if len(point.solutions) == n_t:
                point.phase = "PostLocals"
            elif self.mode == "coarse":
                raise CheckpointError("PostLocals marker present but local records are incomplete")
        elif self.mode == "coarse":
            # coarse checkpoints only trust locals once the whole phase is marked
            point.solutions = {}
        # a Final marker resumes at the reduction too: it is cheap and deterministic
        return point


def checkpoint_write(store: CheckpointStore, phase: str, payloads) -> None:
    store.write(phase, payloads)


def checkpoint_load(store: CheckpointStore, model: Model) -> ResumePoint | None:
    return store.load(model)
