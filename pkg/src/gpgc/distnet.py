"""Master/worker distribution of the feature oracle over TCP.

Each worker holds one contiguous column shard and answers the four oracle
queries for it; the master splits query inputs by the shard layout, fans
out one frame per worker, and aggregates replies by summation (Fv, FDF')
or offset-ordered concatenation (F'u, diag(F'AF)).

Wire format: every frame is a little-endian u64 payload length, one opcode
byte, then the payload. Numeric payloads are little-endian float64;
matrices carry a (rows, cols) u32 pair before their row-major values.
A shard is shipped as u64 col_offset followed by the shard serialized in
the binary feature-file layout.
"""

from __future__ import annotations

import concurrent.futures
import io
import os
import socket
import struct

import numpy as np

from .core import feature_file_bytes, read_feature_file, _HEADER_FIXED
from .errors import (
    DataFormatError,
    DimensionError,
    GpgcError,
    RemoteError,
    WorkerLostError,
)
from .oracle import FeatureShard, LocalOracle, Oracle, ShardLayout

OP_LOAD_SHARD = 0x01
OP_MATVEC = 0x02
OP_MATTVEC = 0x03
OP_GRAM = 0x04
OP_DIAGQUAD = 0x05
OP_SHUTDOWN = 0x06
OP_OK = 0x10
OP_RESULT = 0x11
OP_ERROR = 0x1F

_KNOWN_OPS = {
    OP_LOAD_SHARD, OP_MATVEC, OP_MATTVEC, OP_GRAM, OP_DIAGQUAD,
    OP_SHUTDOWN, OP_OK, OP_RESULT, OP_ERROR,
}

_FRAME_HEADER = struct.Struct("<QB")
_MATRIX_HEADER = struct.Struct("<II")

DEFAULT_TIMEOUT_SECS = 300.0
TIMEOUT_ENV_VAR = "GPGC_NET_TIMEOUT_SECS"


def resolve_timeout(timeout: float | None = None) -> float:
    env = os.environ.get(TIMEOUT_ENV_VAR)
    if env is not None:
        return float(env)
    if timeout is not None:
        return float(timeout)
    return DEFAULT_TIMEOUT_SECS


class FrameClosed(Exception):
    """Peer closed the connection mid-frame or between frames."""


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    buf = bytearray(count)
    view = memoryview(buf)
    got = 0
    while got < count:
        received = sock.recv_into(view[got:], count - got)
        if received == 0:
            raise FrameClosed("connection closed")
        got += received
    return bytes(buf)


def send_frame(sock: socket.socket, opcode: int, payload: bytes = b"") -> None:
    sock.sendall(_FRAME_HEADER.pack(len(payload), opcode) + payload)


def recv_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, _FRAME_HEADER.size)
    length, opcode = _FRAME_HEADER.unpack(header)
    payload = _recv_exact(sock, length) if length else b""
    return opcode, payload


def encode_vector(v: np.ndarray) -> bytes:
    return np.ascontiguousarray(v, dtype="<f8").tobytes()


def decode_vector(payload: bytes) -> np.ndarray:
    if len(payload) % 8:
        raise DataFormatError("vector payload length is not a multiple of 8")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64)


def encode_matrix(m: np.ndarray) -> bytes:
    rows, cols = m.shape
    return _MATRIX_HEADER.pack(rows, cols) + encode_vector(m.ravel())


def decode_matrix(payload: bytes) -> np.ndarray:
    if len(payload) < _MATRIX_HEADER.size:
        raise DataFormatError("matrix payload too short")
    rows, cols = _MATRIX_HEADER.unpack(payload[:_MATRIX_HEADER.size])
    values = decode_vector(payload[_MATRIX_HEADER.size:])
    if values.size != rows * cols:
        raise DataFormatError("matrix payload size does not match header")
    return values.reshape(rows, cols)


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port:
        raise DataFormatError(f"address {address!r} is not host:port")
    return host, int(port)


# ---------------------------------------------------------------------------
# Worker
# ---------------------------------------------------------------------------


def _worker_handle(opcode: int, payload: bytes, state: dict,
                   expected_k: int | None) -> tuple[int, bytes]:
    if opcode == OP_LOAD_SHARD:
        if len(payload) < 8:
            return OP_ERROR, b"load frame too short"
        (col_offset,) = struct.unpack("<Q", payload[:8])
        try:
            data, header = read_feature_file(io.BytesIO(payload[8:]))
        except GpgcError as exc:
            return OP_ERROR, str(exc).encode()
        if expected_k is not None and header.k != expected_k:
            return OP_ERROR, f"expected k={expected_k}, got {header.k}".encode()
        shard = FeatureShard(data=data, col_offset=0)
        state["oracle"] = LocalOracle(shard)
        state["col_offset"] = col_offset
        return OP_OK, b""

    oracle: LocalOracle | None = state.get("oracle")
    if oracle is None:
        return OP_ERROR, b"shard not loaded"
    try:
        if opcode == OP_MATVEC:
            result = oracle.mat_vec(decode_vector(payload))
        elif opcode == OP_MATTVEC:
            result = oracle.mat_t_vec(decode_vector(payload))
        elif opcode == OP_GRAM:
            return OP_RESULT, encode_matrix(oracle.weighted_gram(decode_vector(payload)))
        elif opcode == OP_DIAGQUAD:
            result = oracle.diag_quadratic(decode_matrix(payload))
        else:
            raise AssertionError(f"unhandled opcode {opcode:#x}")
    except GpgcError as exc:
        return OP_ERROR, str(exc).encode()
    return OP_RESULT, encode_vector(result)


def worker_serve(listen_address: str, expected_k: int | None = None,
                 on_bound=None) -> None:
    """Host a shard and answer queries until a SHUTDOWN frame arrives.

    Handles one connection at a time; a malformed frame closes the
    connection and the worker goes back to accepting.
    """
    host, port = parse_address(listen_address)
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(1)
    if on_bound is not None:
        on_bound(server.getsockname()[1])

    state: dict = {}
    try:
        while True:
            conn, _ = server.accept()
            with conn:
                if _serve_connection(conn, state, expected_k):
                    return
    finally:
        server.close()


def _serve_connection(conn: socket.socket, state: dict,
                      expected_k: int | None) -> bool:
    """Serve one client; returns True when SHUTDOWN was received."""
    while True:
        try:
            opcode, payload = recv_frame(conn)
        except (FrameClosed, ConnectionError, OSError):
            return False
        if opcode not in _KNOWN_OPS or opcode >= OP_OK:
            return False  # malformed: close the connection
        if opcode == OP_SHUTDOWN:
            try:
                send_frame(conn, OP_OK)
            except OSError:
                pass
            return True
        reply_op, reply_payload = _worker_handle(opcode, payload, state, expected_k)
        try:
            send_frame(conn, reply_op, reply_payload)
        except OSError:
            return False


# ---------------------------------------------------------------------------
# Master
# ---------------------------------------------------------------------------


class DistributedOracle(Oracle):
    """Feature oracle backed by remote shard workers.

    Workers are addressed in shard order; each query is issued to all
    workers concurrently over long-lived connections and aggregated in
    fixed shard-index order, so repeated queries are bit-identical. Any
    worker failure aborts the query with no partial results.
    """

    def __init__(self, addresses: list[str], timeout: float | None = None):
        if not addresses:
            raise DataFormatError("at least one worker address required")
        self.addresses = list(addresses)
        self.timeout = resolve_timeout(timeout)
        self.layout: ShardLayout | None = None
        self.n = 0
        self.k = 0
        self._lost: set[int] = set()
        self._socks: list[socket.socket] = []
        for address in self.addresses:
            try:
                sock = socket.create_connection(
                    parse_address(address), timeout=self.timeout
                )
            except OSError as exc:
                self.close()
                raise WorkerLostError(
                    f"worker connect failed: {address}: {exc}"
                ) from exc
            sock.settimeout(self.timeout)
            self._socks.append(sock)
        self._pool = concurrent.futures.ThreadPoolExecutor(
            max_workers=len(self.addresses), thread_name_prefix="gpgc-master"
        )

    # -- lifecycle -----------------------------------------------------

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.shutdown()

    def close(self) -> None:
        for sock in self._socks:
            try:
                sock.close()
            except OSError:
                pass
        self._socks = []

    def shutdown(self) -> None:
        """Send SHUTDOWN to every worker and close connections."""
        for sock in self._socks:
            try:
                send_frame(sock, OP_SHUTDOWN)
                recv_frame(sock)
            except (OSError, FrameClosed):
                pass
        self.close()
        if hasattr(self, "_pool"):
            self._pool.shutdown(wait=False)

    # -- shard loading ---------------------------------------------------

    def load_features(self, features: np.ndarray) -> None:
        """Push an in-memory (N, k) matrix to the workers, one slice each."""
        features = np.ascontiguousarray(features, dtype=np.float64)
        n, k = features.shape
        layout = ShardLayout.even(n, len(self.addresses))
        blobs = [
            struct.pack("<Q", sl.start) + feature_file_bytes(features[sl])
            for sl in layout.slices()
        ]
        self._finish_load(layout, n, k, blobs)

    def load_features_file(self, path) -> None:
        """Stream shard slices out of a feature file without loading it whole."""
        from .core import read_feature_header

        header = read_feature_header(path)
        n, k = header.n_instances, header.k
        layout = ShardLayout.even(n, len(self.addresses))
        data_start = _HEADER_FIXED.size + 4 * header.n_scale_groups
        blobs = []
        with open(path, "rb") as fh:
            for sl in layout.slices():
                count = (sl.stop - sl.start) * k
                fh.seek(data_start + 8 * sl.start * k)
                raw = fh.read(8 * count)
                if len(raw) != 8 * count:
                    raise DataFormatError("feature file truncated")
                block = np.frombuffer(raw, dtype="<f8").reshape(sl.stop - sl.start, k)
                blobs.append(
                    struct.pack("<Q", sl.start) + feature_file_bytes(block)
                )
        self._finish_load(layout, n, k, blobs)

    def _finish_load(self, layout: ShardLayout, n: int, k: int,
                     blobs: list[bytes]) -> None:
        replies = self._fan_out(OP_LOAD_SHARD, blobs)
        for address, (opcode, payload) in zip(self.addresses, replies):
            if opcode != OP_OK:
                raise RemoteError(f"{address}: {payload.decode(errors='replace')}")
        self.layout = layout
        self.n = n
        self.k = k

    # -- query plumbing ----------------------------------------------------

    def cluster_state(self) -> list[tuple[str, tuple[int, int], bool]]:
        """(address, shard range, live) per worker, in shard order."""
        slices = self.layout.slices() if self.layout is not None else []
        state = []
        for i, address in enumerate(self.addresses):
            shard = (slices[i].start, slices[i].stop) if slices else (0, 0)
            state.append((address, shard, i not in self._lost))
        return state

    def _roundtrip(self, idx: int, opcode: int, payload: bytes) -> tuple[int, bytes]:
        sock = self._socks[idx]
        try:
            send_frame(sock, opcode, payload)
            return recv_frame(sock)
        except (FrameClosed, ConnectionError) as exc:
            self._lost.add(idx)
            raise WorkerLostError(f"worker lost: {self.addresses[idx]}") from exc
        except socket.timeout as exc:
            raise TimeoutError(
                f"worker {self.addresses[idx]} timed out after {self.timeout}s"
            ) from exc

    def _fan_out(self, opcode: int, payloads: list[bytes]) -> list[tuple[int, bytes]]:
        if self._lost:
            gone = ", ".join(self.addresses[i] for i in sorted(self._lost))
            raise WorkerLostError(f"worker lost: {gone}")
        futures = [
            self._pool.submit(self._roundtrip, i, opcode, payload)
            for i, payload in enumerate(payloads)
        ]
        done, _ = concurrent.futures.wait(futures)
        return [f.result() for f in futures]

    def _query(self, opcode: int, payloads: list[bytes]) -> list[bytes]:
        if self.layout is None:
            raise GpgcError("no shards loaded")
        replies = self._fan_out(opcode, payloads)
        results = []
        for address, (reply_op, payload) in zip(self.addresses, replies):
            if reply_op == OP_ERROR:
                raise RemoteError(f"{address}: {payload.decode(errors='replace')}")
            if reply_op != OP_RESULT:
                raise RemoteError(f"{address}: unexpected opcode {reply_op:#x}")
            results.append(payload)
        return results

    def _split_bytes(self, v: np.ndarray) -> list[bytes]:
        if self.layout is None:
            raise GpgcError("no shards loaded")
        return [encode_vector(v[sl]) for sl in self.layout.slices()]

    # -- the four queries ---------------------------------------------------

    def mat_vec(self, v, out=None):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise DimensionError(f"v must have length {self.n}")
        parts = self._query(OP_MATVEC, self._split_bytes(v))
        result = np.zeros(self.k) if out is None else out
        result[:] = 0.0
        for part in parts:
            vec = decode_vector(part)
            if vec.shape != (self.k,):
                raise RemoteError("worker returned a wrong-sized partial product")
            result += vec
        return result

    def mat_t_vec(self, u, out=None):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.k,):
            raise DimensionError(f"u must have length {self.k}")
        payload = encode_vector(u)
        parts = self._query(OP_MATTVEC, [payload] * len(self.addresses))
        result = np.empty(self.n) if out is None else out
        for sl, part in zip(self.layout.slices(), parts):
            vec = decode_vector(part)
            if vec.shape != (sl.stop - sl.start,):
                raise RemoteError("worker returned a wrong-sized slice")
            result[sl] = vec
        return result

    def weighted_gram(self, d, out=None):
        d = np.asarray(d, dtype=np.float64)
        if d.shape != (self.n,):
            raise DimensionError(f"d must have length {self.n}")
        parts = self._query(OP_GRAM, self._split_bytes(d))
        result = np.zeros((self.k, self.k)) if out is None else out
        result[:] = 0.0
        for part in parts:
            mat = decode_matrix(part)
            if mat.shape != (self.k, self.k):
                raise RemoteError("worker returned a wrong-sized gram block")
            result += mat
        return result

    def diag_quadratic(self, a, out=None):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.k, self.k):
            raise DimensionError(f"A must have shape ({self.k}, {self.k})")
        payload = encode_matrix(a)
        parts = self._query(OP_DIAGQUAD, [payload] * len(self.addresses))
        result = np.empty(self.n) if out is None else out
        for sl, part in zip(self.layout.slices(), parts):
            vec = decode_vector(part)
            if vec.shape != (sl.stop - sl.start,):
                raise RemoteError("worker returned a wrong-sized slice")
            result[sl] = vec
        return result
