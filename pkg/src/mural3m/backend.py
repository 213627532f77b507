"""Tile inpainting backends: null, harmonic diffusion, external process.

The external wire protocol (all integers little-endian):

    request:  magic b"M3MI" | version u16 = 1 | width u16 | height u16
              | band u8 (0=low, 1=high, 2=full) | scale_milli u16
              | perspective u8
              | width*height*3 float32 tile, row-major, channels interleaved
              | width*height u8 mask (1 = damaged)
    response: magic b"M3MO" | width u16 | height u16
              | width*height*3 float32 restored tile

One request/response pair per round; the child process stays alive and is
reused for later rounds. Responses must keep unmasked pixels within 1/255
of the input; larger deviations are clamped back to the input and counted.
"""

from __future__ import annotations

import hashlib
import math
import os
import select
import shlex
import struct
import subprocess
import threading
import time
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage, sparse
from scipy.sparse import linalg as sparse_linalg

from .imagecore import DefectMask, RasterImage, resize_array

BANDS = ("low", "high", "full")
BAND_CODES = {"low": 0, "high": 1, "full": 2}

REQUEST_MAGIC = b"M3MI"
RESPONSE_MAGIC = b"M3MO"
PROTOCOL_VERSION = 1
_REQ_HEADER = struct.Struct("<4sHHHBHB")
_RESP_HEADER = struct.Struct("<4sHH")

DEFAULT_ITERS = 2000
DEFAULT_TOL = 1e-5
UNMASKED_TOLERANCE = 1.0 / 255.0


class BackendError(Exception):
    """Base class for backend failures."""


class BackendProtocolError(BackendError):
    """Malformed traffic: bad magic, truncated stream, wrong dims, bad values."""


class BackendTimeoutError(BackendError):
    """The external process did not answer within its deadline."""


class BackendProcessError(BackendError):
    """The external process could not be started or died mid-round."""


@dataclass(frozen=True, eq=False)
class InpaintRequest:
    """One tile of work. band/scale/perspective are routing metadata."""

    tile: RasterImage
    mask: DefectMask
    band: str = "full"
    scale: float = 1.0
    perspective: int = 0

    def __post_init__(self):
        if (self.tile.height, self.tile.width) != (self.mask.height, self.mask.width):
            raise ValueError(
                f"mask dims {self.mask.width}x{self.mask.height} do not match "
                f"tile dims {self.tile.width}x{self.tile.height}"
            )
        if self.band not in BAND_CODES:
            raise ValueError(f"band must be one of {BANDS}, got {self.band!r}")
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"scale must lie in (0, 1], got {self.scale}")
        if not (0 <= self.perspective < 16):
            raise ValueError(f"perspective must lie in 0..15, got {self.perspective}")


@dataclass(frozen=True)
class BackendKind:
    """Parsed backend selector: null, diffusion, or external(command)."""

    kind: str
    command: str = ""
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in ("null", "diffusion", "external"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "external" and not self.command.strip():
            raise ValueError("external backend needs a command line")

    @classmethod
    def parse(cls, text: str, timeout: float = 30.0) -> "BackendKind":
        text = text.strip()
        if text in ("null", "diffusion"):
            return cls(kind=text)
        if text.startswith("external:"):
            return cls(kind="external", command=text[len("external:"):], timeout=timeout)
        raise ValueError(
            f"backend must be 'null', 'diffusion' or 'external:<command>', got {text!r}"
        )


# ---------------------------------------------------------------------------
# Harmonic (diffusion) fill
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _jacobi_sweeps(u2, midx, nbr, invc, iters, tol):
    # u2: (pixels + 1, channels) with a trailing all-zero ghost row that
    # out-of-tile neighbor slots point at; invc already divides by the true
    # neighbor count, so the ghost contributes nothing.
    n_masked = midx.shape[0]
    n_chan = u2.shape[1]
    newv = np.empty((n_masked, n_chan), np.float64)
    sweeps = 0
    for _ in range(iters):
        delta = 0.0
        for k in range(n_masked):
            i0 = nbr[k, 0]
            i1 = nbr[k, 1]
            i2 = nbr[k, 2]
            i3 = nbr[k, 3]
            w = invc[k]
            for c in range(n_chan):
                newv[k, c] = (u2[i0, c] + u2[i1, c] + u2[i2, c] + u2[i3, c]) * w
        for k in range(n_masked):
            p = midx[k]
            for c in range(n_chan):
                d = abs(newv[k, c] - u2[p, c])
                if d > delta:
                    delta = d
                u2[p, c] = newv[k, c]
        sweeps += 1
        if delta < tol:
            break
    return sweeps


@njit(cache=True, nogil=True)
def _sor_sweeps(u2, midx, nbr, invc, iters, tol, omega):
    # Red-black successive over-relaxation, in place. The tables list red
    # (even-parity) cells first, so one pass in table order is a full
    # red-black sweep; with near-optimal omega the error contracts at
    # roughly (omega - 1) per sweep regardless of region size.
    n_masked = midx.shape[0]
    n_chan = u2.shape[1]
    sweeps = 0
    for _ in range(iters):
        delta = 0.0
        for k in range(n_masked):
            p = midx[k]
            i0 = nbr[k, 0]
            i1 = nbr[k, 1]
            i2 = nbr[k, 2]
            i3 = nbr[k, 3]
            w = invc[k]
            for c in range(n_chan):
                mean = (u2[i0, c] + u2[i1, c] + u2[i2, c] + u2[i3, c]) * w
                d = omega * (mean - u2[p, c])
                ad = abs(d)
                if ad > delta:
                    delta = ad
                u2[p, c] += d
        sweeps += 1
        if delta < tol:
            break
    return sweeps


def _jacobi_tables(smask: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Flat index tables for one sub-region, red cells first; missing
    # neighbors point at the ghost row (index h*w).
    h, w = smask.shape
    ghost = h * w
    midx = np.flatnonzero(smask.ravel()).astype(np.int64)
    my, mx = np.divmod(midx, w)
    red_first = np.argsort((my + mx) % 2, kind="stable")
    midx = midx[red_first]
    my = my[red_first]
    mx = mx[red_first]
    nbr = np.empty((midx.size, 4), np.int64)
    nbr[:, 0] = np.where(my > 0, midx - w, ghost)
    nbr[:, 1] = np.where(my < h - 1, midx + w, ghost)
    nbr[:, 2] = np.where(mx > 0, midx - 1, ghost)
    nbr[:, 3] = np.where(mx < w - 1, midx + 1, ghost)
    count = (nbr != ghost).sum(axis=1).astype(np.float64)
    return midx, nbr, 1.0 / count


def _as_u2(sub: np.ndarray) -> np.ndarray:
    h, w, c = sub.shape
    u2 = np.empty((h * w + 1, c), np.float64)
    u2[:-1] = sub.reshape(h * w, c)
    u2[-1] = 0.0
    return u2


def _run_jacobi(sub: np.ndarray, smask: np.ndarray, iters: int, tol: float) -> int:
    midx, nbr, invc = _jacobi_tables(smask)
    if midx.size == 0:
        return 0
    u2 = _as_u2(sub)
    sweeps = int(_jacobi_sweeps(u2, midx, nbr, invc, iters, tol))
    sub.reshape(-1, sub.shape[2])[midx] = u2[midx]
    return sweeps


def _run_sor(
    sub: np.ndarray, smask: np.ndarray, iters: int, tol: float, omega: float
) -> int:
    midx, nbr, invc = _jacobi_tables(smask)
    if midx.size == 0:
        return 0
    u2 = _as_u2(sub)
    sweeps = int(_sor_sweeps(u2, midx, nbr, invc, iters, tol, omega))
    sub.reshape(-1, sub.shape[2])[midx] = u2[midx]
    return sweeps


def _restrict(sub: np.ndarray, smask: np.ndarray):
    # 2x2 restriction: a coarse cell is unmasked when any child is, and its
    # value is the mean of the unmasked children only.
    h, w, c = sub.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    vals = sub
    keep = (~smask).astype(np.float64)
    if h % 2 or w % 2:
        vals = np.pad(vals, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
        keep = np.pad(keep, ((0, h % 2), (0, w % 2)), mode="edge")
        # padded rows duplicate real cells; masked state follows them
        if h % 2:
            keep[-1] = keep[-2]
        if w % 2:
            keep[:, -1] = keep[:, -2]
    keep4 = keep.reshape(h2, 2, w2, 2)
    cnt = keep4.sum(axis=(1, 3))
    wsum = (vals * keep[:, :, None]).reshape(h2, 2, w2, 2, c).sum(axis=(1, 3))
    coarse = wsum / np.maximum(cnt, 1.0)[:, :, None]
    return coarse, cnt == 0


_COARSEST = 24
_WARM_CAP = 1200


def _omega(reach: int) -> float:
    # Near-optimal over-relaxation for masked regions of this effective
    # width; slightly above optimal still contracts at about (omega - 1)
    # per sweep, while far above it wastes hundreds of sweeps on small,
    # anchor-dense regions.
    return min(2.0 / (1.0 + math.sin(math.pi / (reach + 1))), 1.98)


def _reach(smask: np.ndarray) -> int:
    # Effective width of the hardest local subproblem: twice the largest
    # distance from a masked pixel to an anchor. Scattered specks give a
    # small reach no matter how large the region is.
    d_max = int(ndimage.distance_transform_cdt(smask, metric="chessboard").max())
    return 2 * d_max + 1


def _nested_sor(sub: np.ndarray, smask: np.ndarray, tol: float, reach: int = -1) -> None:
    # Coarse-to-fine solve: each level starts from the prolonged solution
    # of a 2x downsampled copy of the problem, then relaxes with SOR until
    # its largest update falls below tol/2.
    h, w = smask.shape
    anchors = ~smask
    if reach < 0:
        reach = _reach(smask)
    if min(h, w) > _COARSEST and reach > _COARSEST:
        coarse, coarse_mask = _restrict(sub, smask)
        if not coarse_mask.all():
            _nested_sor(coarse, coarse_mask, tol)
            up = resize_array(coarse, w, h)
            sub[smask] = up[smask]
        else:
            sub[smask] = sub[anchors].mean(axis=0)
    else:
        sub[smask] = sub[anchors].mean(axis=0)
    _run_sor(sub, smask, _WARM_CAP, 0.5 * tol, _omega(reach))


_DIRECT_REACH = 48
_DIRECT_MIN = 1024


def _run_direct(sub: np.ndarray, smask: np.ndarray) -> bool:
    # Sparse LU of the five-point system over the masked set; anchors enter
    # through the right-hand side. Relaxation needs O(width) sweeps on wide
    # regions, so past a modest reach the factorization wins outright and
    # its residual is at machine precision.
    h, w, c = sub.shape
    midx, nbr, _ = _jacobi_tables(smask)
    n = midx.size
    ghost = h * w
    pos = np.full(ghost + 1, -1, np.int64)
    pos[midx] = np.arange(n)
    flat = sub.reshape(-1, c)
    off_r: list[np.ndarray] = []
    off_c: list[np.ndarray] = []
    b = np.zeros((n, c))
    deg = np.zeros(n)
    for k in range(4):
        real = np.flatnonzero(nbr[:, k] != ghost)
        deg[real] += 1.0
        j = pos[nbr[real, k]]
        inside = j >= 0
        off_r.append(real[inside])
        off_c.append(j[inside])
        edge = real[~inside]
        np.add.at(b, edge, flat[nbr[edge, k]])
    ii = np.concatenate(off_r + [np.arange(n)])
    jj = np.concatenate(off_c + [np.arange(n)])
    data = np.empty(ii.size)
    data[: ii.size - n] = -1.0
    data[ii.size - n :] = deg
    system = sparse.csc_matrix((data, (ii, jj)), shape=(n, n))
    try:
        lu = sparse_linalg.splu(
            system,
            permc_spec="MMD_AT_PLUS_A",
            options={"SymmetricMode": True, "DiagPivotThresh": 0.0},
        )
        solved = lu.solve(b)
    except (RuntimeError, MemoryError):
        return False
    if not np.isfinite(solved).all():
        return False
    flat[midx] = solved
    return True


def _solve_region(sub: np.ndarray, smask: np.ndarray, iters: int, tol: float) -> int:
    """Harmonic solve of one bounding-box region, in place.

    A warm stage computes the answer (direct solve for wide regions, nested
    SOR otherwise); masked values are then clamped into the per-channel
    range of the region's unmasked pixels, which makes the discrete maximum
    principle hold by construction, and the final Jacobi sweeps apply the
    documented stopping rule (they terminate immediately when the warm
    stage has converged, and inherit the full iteration budget when it has
    not).
    """
    reach = _reach(smask)
    direct = (
        reach > _DIRECT_REACH
        and int(smask.sum()) >= _DIRECT_MIN
        and _run_direct(sub, smask)
    )
    if not direct:
        _nested_sor(sub, smask, tol, reach)
    anchors = sub[~smask]
    lo = anchors.min(axis=0)
    hi = anchors.max(axis=0)
    sub[smask] = np.clip(sub[smask], lo, hi)
    return _run_jacobi(sub, smask, iters, tol)


def harmonic_fill_array(
    values: np.ndarray,
    mask: np.ndarray,
    iters: int = DEFAULT_ITERS,
    tol: float = DEFAULT_TOL,
) -> tuple[np.ndarray, bool]:
    """Fill masked pixels of an (h, w, c) array by harmonic interpolation.

    Jacobi sweeps replace each masked pixel by the mean of its in-bounds
    4-neighbors until the largest update drops below tol or the iteration
    budget is spent. Unmasked pixels are returned bit-identical. A tile
    with no unmasked pixels has nothing to anchor the fill; it is set to
    the per-channel mean of the input and reported as degenerate via the
    second return value.
    """
    if iters < 1:
        raise ValueError(f"iteration budget must be >= 1, got {iters}")
    if not np.isfinite(tol) or tol < 0:
        raise ValueError(f"tolerance must be finite and >= 0, got {tol}")
    m = mask.astype(bool)
    if not m.any():
        return values.copy(), False
    out = values.copy()
    if m.all():
        out[:] = values.reshape(-1, values.shape[2]).mean(axis=0)
        return out, True
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    r0, r1 = max(rows[0] - 1, 0), min(rows[-1] + 2, m.shape[0])
    c0, c1 = max(cols[0] - 1, 0), min(cols[-1] + 2, m.shape[1])
    sub = np.ascontiguousarray(out[r0:r1, c0:c1], dtype=np.float64)
    smask = m[r0:r1, c0:c1]
    if (~smask).any():
        _solve_region(sub, smask, iters, tol)
        out[r0:r1, c0:c1][smask] = sub[smask]
        return out, False
    # Masked block flush against every tile edge: anchors exist in the tile
    # but not adjacent to the block, so the fill degenerates the same way.
    out[m] = values[~m].reshape(-1, values.shape[2]).mean(axis=0)
    return out, True


# ---------------------------------------------------------------------------
# Backend implementations
# ---------------------------------------------------------------------------


def inpaint_null(req: InpaintRequest) -> RasterImage:
    """Identity backend: returns the tile unchanged."""
    return req.tile


class NullBackend:
    """Backend wrapper around inpaint_null."""

    def restore(self, req: InpaintRequest) -> RasterImage:
        return req.tile

    def close(self) -> None:
        pass

    def describe(self) -> dict:
        return {"kind": "null"}


class DiffusionBackend:
    """Harmonic-fill backend; tracks degenerate (anchorless) tiles."""

    def __init__(self, iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL):
        self.iters = int(iters)
        self.tol = float(tol)
        self._lock = threading.Lock()
        self.degenerate_tiles = 0

    def restore(self, req: InpaintRequest) -> RasterImage:
        filled, degenerate = harmonic_fill_array(
            req.tile.pixels, req.mask.data, self.iters, self.tol
        )
        if degenerate:
            with self._lock:
                self.degenerate_tiles += 1
        return RasterImage._wrap(filled)

    def restore_channels(self, stacked: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Joint fill of several bands stacked along the channel axis.

        Shares one solve across all channels; the stop criterion uses the
        largest update over every channel, so an individual band only ever
        receives extra sweeps compared to a solo call.
        """
        filled, degenerate = harmonic_fill_array(stacked, mask, self.iters, self.tol)
        if degenerate:
            with self._lock:
                self.degenerate_tiles += 1
        return filled

    def close(self) -> None:
        pass

    def describe(self) -> dict:
        return {"kind": "diffusion", "iters": self.iters, "tol": self.tol}


def inpaint_diffusion(
    req: InpaintRequest, iters: int = DEFAULT_ITERS, tol: float = DEFAULT_TOL
) -> RasterImage:
    """Reference harmonic fill of one request."""
    filled, _ = harmonic_fill_array(req.tile.pixels, req.mask.data, iters, tol)
    return RasterImage._wrap(filled)


def encode_request(req: InpaintRequest) -> bytes:
    h, w = req.tile.height, req.tile.width
    header = _REQ_HEADER.pack(
        REQUEST_MAGIC,
        PROTOCOL_VERSION,
        w,
        h,
        BAND_CODES[req.band],
        int(round(req.scale * 1000)),
        req.perspective,
    )
    tile = req.tile.pixels.astype("<f4").tobytes()
    mask = req.mask.data.astype(np.uint8).tobytes()
    return header + tile + mask


class _Child:
    """One external worker process plus its pipe bookkeeping."""

    def __init__(self, argv: list[str]):
        try:
            self.proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            raise BackendProcessError(f"cannot start backend {argv!r}: {exc}") from exc
        os.set_blocking(self.proc.stdin.fileno(), False)
        os.set_blocking(self.proc.stdout.fileno(), False)

    def roundtrip(self, payload: bytes, want: int, deadline: float) -> bytes:
        """Write one request and read `want` response bytes, interleaved.

        Reading while writing avoids deadlock with children that stream
        their answer before consuming the whole request.
        """
        wfd = self.proc.stdin.fileno()
        rfd = self.proc.stdout.fileno()
        view = memoryview(payload)
        got = bytearray()
        while len(got) < want:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeoutError("backend did not answer before the deadline")
            wlist = [wfd] if view else []
            ready_r, ready_w, _ = select.select([rfd], wlist, [], remaining)
            if ready_w:
                try:
                    sent = os.write(wfd, view[: 1 << 16])
                    view = view[sent:]
                except BrokenPipeError as exc:
                    raise BackendProcessError("backend closed its input") from exc
            if ready_r:
                chunk = os.read(rfd, 1 << 16)
                if not chunk:
                    if self.proc.poll() is not None:
                        raise BackendProcessError(
                            f"backend exited with code {self.proc.returncode} mid-round"
                        )
                    raise BackendProtocolError(
                        f"truncated response: wanted {want} bytes, got {len(got)}"
                    )
                got.extend(chunk)
        return bytes(got)

    def kill(self) -> None:
        try:
            self.proc.kill()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            pass

    def shutdown(self) -> None:
        try:
            self.proc.stdin.close()
        except OSError:
            pass
        try:
            self.proc.wait(timeout=2)
        except subprocess.TimeoutExpired:
            self.kill()


@dataclass
class BackendStats:
    requests: int = 0
    clamped_pixels: int = 0
    response_hash: bytes = field(default=b"\x00" * 32)

    def note(self, clamped: int, digest: bytes) -> None:
        self.requests += 1
        self.clamped_pixels += clamped
        # XOR-combined digests stay independent of completion order.
        self.response_hash = bytes(
            a ^ b for a, b in zip(self.response_hash, digest)
        )


class ExternalBackend:
    """Persistent external inpainting process(es) speaking the wire protocol."""

    def __init__(self, command: str, timeout: float = 30.0, max_procs: int = 4):
        argv = shlex.split(command)
        if not argv:
            raise ValueError("external backend command is empty")
        self.command = command
        self.argv = argv
        self.timeout = float(timeout)
        self.max_procs = max(1, int(max_procs))
        self._lock = threading.Lock()
        self._idle: list[_Child] = []
        self._live = 0
        self._cond = threading.Condition(self._lock)
        self.stats = BackendStats()

    def _borrow(self) -> _Child:
        with self._cond:
            while True:
                if self._idle:
                    return self._idle.pop()
                if self._live < self.max_procs:
                    self._live += 1
                    break
                self._cond.wait()
        try:
            return _Child(self.argv)
        except BaseException:
            with self._cond:
                self._live -= 1
                self._cond.notify()
            raise

    def _give_back(self, child: _Child) -> None:
        with self._cond:
            self._idle.append(child)
            self._cond.notify()

    def _discard(self, child: _Child) -> None:
        child.kill()
        with self._cond:
            self._live -= 1
            self._cond.notify()

    def restore(self, req: InpaintRequest) -> RasterImage:
        payload = encode_request(req)
        h, w = req.tile.height, req.tile.width
        body_len = w * h * 3 * 4
        child = self._borrow()
        try:
            raw = child.roundtrip(
                payload,
                _RESP_HEADER.size + body_len,
                time.monotonic() + self.timeout,
            )
        except BackendError:
            self._discard(child)
            raise
        except BaseException:
            self._discard(child)
            raise
        self._give_back(child)
        magic, rw, rh = _RESP_HEADER.unpack_from(raw)
        if magic != RESPONSE_MAGIC:
            raise BackendProtocolError(
                f"bad response magic {magic!r}, expected {RESPONSE_MAGIC!r}"
            )
        if (rw, rh) != (w, h):
            raise BackendProtocolError(
                f"response dims {rw}x{rh} do not match request {w}x{h}"
            )
        body = raw[_RESP_HEADER.size :]
        out = (
            np.frombuffer(body, dtype="<f4")
            .reshape(h, w, 3)
            .astype(np.float64)
        )
        if not np.isfinite(out).all():
            raise BackendProtocolError("response contains non-finite values")
        if out.min() < 0.0 or out.max() > 1.0:
            raise BackendProtocolError("response values fall outside [0, 1]")
        # Unmasked pixels must track the input; clamp and count violations.
        keep = req.mask.data == 0
        src = req.tile.pixels
        drift = np.abs(out - src).max(axis=2) > UNMASKED_TOLERANCE
        bad = keep & drift
        clamped = int(np.count_nonzero(bad))
        if clamped:
            out[bad] = src[bad]
        self.stats.note(clamped, hashlib.sha256(body).digest())
        return RasterImage._wrap(out)

    def close(self) -> None:
        with self._cond:
            children = list(self._idle)
            self._idle.clear()
        for child in children:
            child.shutdown()
            with self._cond:
                self._live -= 1
                self._cond.notify()

    def __enter__(self) -> "ExternalBackend":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def describe(self) -> dict:
        return {
            "kind": "external",
            "command": self.command,
            "timeout": self.timeout,
            "requests": self.stats.requests,
            "clamped_pixels": self.stats.clamped_pixels,
            "response_hash": self.stats.response_hash.hex(),
        }


def inpaint_external(req: InpaintRequest, backend: ExternalBackend) -> RasterImage:
    """Send one request through an external backend instance."""
    return backend.restore(req)


def make_backend(
    kind: BackendKind,
    iters: int = DEFAULT_ITERS,
    tol: float = DEFAULT_TOL,
    max_procs: int = 4,
):
    """Instantiate the backend an InpaintRequest router will call."""
    if kind.kind == "null":
        return NullBackend()
    if kind.kind == "diffusion":
        return DiffusionBackend(iters=iters, tol=tol)
    return ExternalBackend(kind.command, timeout=kind.timeout, max_procs=max_procs)
