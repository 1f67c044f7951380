"""Serving the oracle over a socket.

Wire protocol: one JSON object per newline-terminated line, both ways.
Requests carry a caller-chosen integer id, echoed back in the response:

    {"id": 7, "op": "predict", "x": [0.1, ...]}  ->  {"id": 7, "label": 3}
    {"id": 8, "op": "budget"}                    ->  {"id": 8, "remaining": 512}

Failures answer {"id": ..., "error": msg, "code": code} with code one of
BUDGET_EXHAUSTED, BAD_INPUT, or INTERNAL; a line that does not parse gets
id 0 and BAD_INPUT, and the connection stays open either way.

The server keeps a bounded most-recently-used cache of answered ids, so a
client that lost a response can resend the same id and receive the original
answer without spending budget again. Budget charging itself lives in the
wrapped oracle's single lock, which keeps concurrent connections honest.
"""

from __future__ import annotations

import csv
import json
import socket
import threading
import time
from collections import OrderedDict
from typing import Optional

import numpy as np

from .errors import (
    BudgetExhaustedError,
    InvalidInputError,
    RemoteUnavailableError,
)
from .seeding import mask64
from .victim import VictimOracle

CODE_BUDGET = "BUDGET_EXHAUSTED"
CODE_BAD_INPUT = "BAD_INPUT"
CODE_INTERNAL = "INTERNAL"


def _encode(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode() + b"\n"


class VictimService:
    """Threaded TCP front end for a VictimOracle.

    One accept loop plus one thread per connection. close() stops the
    listener, waits for handlers, and, when a log path was given, writes the
    oracle's query log as CSV (sample_hash,label).
    """

    def __init__(
        self,
        oracle: VictimOracle,
        host: str = "127.0.0.1",
        port: int = 0,
        log_path=None,
        dedup_window: int = 1024,
    ):
        self._oracle = oracle
        self._log_path = log_path
        self._seen: OrderedDict[int, bytes] = OrderedDict()
        self._seen_limit = max(1, int(dedup_window))
        self._seen_lock = threading.Lock()
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._handlers: list[threading.Thread] = []
        self._accepter = threading.Thread(target=self._accept_loop, daemon=True)
        self._accepter.start()

    # -- lifecycle

    def __enter__(self) -> "VictimService":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._stop.is_set():
            return
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        self._accepter.join(timeout=2.0)
        for t in self._handlers:
            t.join(timeout=2.0)
        if self._log_path is not None:
            with open(self._log_path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["sample_hash", "label"])
                writer.writerows(self._oracle.query_log)

    # -- serving

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._handle, args=(conn,), daemon=True)
            t.start()
            self._handlers.append(t)

    def _handle(self, conn: socket.socket) -> None:
        conn.settimeout(0.2)
        buf = b""
        with conn:
            while not self._stop.is_set():
                try:
                    chunk = conn.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    return
                if not chunk:
                    return
                buf += chunk
                while b"\n" in buf:
                    line, buf = buf.split(b"\n", 1)
                    if not line.strip():
                        continue
                    try:
                        conn.sendall(self._respond(line))
                    except OSError:
                        return

    def _respond(self, line: bytes) -> bytes:
        try:
            req = json.loads(line)
        except (ValueError, UnicodeDecodeError):
            return _encode({"id": 0, "error": "unparseable request line", "code": CODE_BAD_INPUT})
        if not isinstance(req, dict) or not isinstance(req.get("id"), int):
            return _encode({"id": 0, "error": "missing integer id", "code": CODE_BAD_INPUT})
        rid = req["id"]
        with self._seen_lock:
            cached = self._seen.get(rid)
            if cached is not None:
                self._seen.move_to_end(rid)
                return cached
        reply = self._dispatch(rid, req)
        with self._seen_lock:
            self._seen[rid] = reply
            while len(self._seen) > self._seen_limit:
                self._seen.popitem(last=False)
        return reply

    def _dispatch(self, rid: int, req: dict) -> bytes:
        op = req.get("op")
        if op == "budget":
            return _encode({"id": rid, "remaining": self._oracle.budget_remaining()})
        if op != "predict":
            return _encode({"id": rid, "error": f"unknown op {op!r}", "code": CODE_BAD_INPUT})
        x = req.get("x")
        if not isinstance(x, list) or not all(isinstance(v, (int, float)) for v in x):
            return _encode({"id": rid, "error": "x must be a list of numbers", "code": CODE_BAD_INPUT})
        try:
            label = self._oracle.predict_one(np.asarray(x, dtype=np.float64))
        except BudgetExhaustedError as exc:
            return _encode({"id": rid, "error": str(exc), "code": CODE_BUDGET})
        except InvalidInputError as exc:
            return _encode({"id": rid, "error": str(exc), "code": CODE_BAD_INPUT})
        except Exception as exc:  # noqa: BLE001 - the wire must answer something
            return _encode({"id": rid, "error": f"{type(exc).__name__}: {exc}", "code": CODE_INTERNAL})
        return _encode({"id": rid, "label": label})


def serve(oracle: VictimOracle, host: str = "127.0.0.1", port: int = 0, log_path=None) -> None:
    """Run a service until interrupted (Ctrl-C or SIGTERM mapped by the CLI)."""
    service = VictimService(oracle, host, port, log_path)
    print(f"serving victim oracle on {service.host}:{service.port}", flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        service.close()


# ── client side ──────────────────────────────────────────────────────


class RemoteVictimClient:
    """Line-JSON client with reconnect-and-resend retries.

    Request ids start at a seeded random point and count up, so a retried
    request reuses its id and the server's dedup cache answers it without
    double charging.
    """

    def __init__(
        self,
        host: str,
        port: int,
        timeout: float = 10.0,
        retries: int = 3,
        id_seed: int = 0,
    ):
        self._addr = (host, port)
        self._timeout = timeout
        self._retries = max(1, int(retries))
        rng = np.random.default_rng(mask64(id_seed))
        self._next_id = int(rng.integers(1, 1 << 62))
        self._sock: Optional[socket.socket] = None
        self._buf = b""
        self._lock = threading.Lock()

    def close(self) -> None:
        with self._lock:
            self._drop_connection()

    def __enter__(self) -> "RemoteVictimClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _drop_connection(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = None
        self._buf = b""

    def _ensure_connected(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(self._addr, timeout=self._timeout)
            except OSError as exc:
                raise RemoteUnavailableError(f"cannot reach victim service: {exc}") from exc
        return self._sock

    def _read_line(self, sock: socket.socket) -> bytes:
        while b"\n" not in self._buf:
            chunk = sock.recv(65536)
            if not chunk:
                raise OSError("connection closed by server")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def _roundtrip(self, payload: dict) -> dict:
        last_err: Optional[Exception] = None
        for _ in range(self._retries):
            try:
                sock = self._ensure_connected()
                sock.sendall(_encode(payload))
                reply = json.loads(self._read_line(sock))
                break
            except RemoteUnavailableError as exc:
                last_err = exc
            except (OSError, ValueError) as exc:
                last_err = exc
                self._drop_connection()
        else:
            raise RemoteUnavailableError(f"victim service unreachable: {last_err}")
        if "error" in reply:
            code = reply.get("code")
            if code == CODE_BUDGET:
                raise BudgetExhaustedError(reply["error"])
            if code == CODE_BAD_INPUT:
                raise InvalidInputError(reply["error"])
            raise RemoteUnavailableError(f"server error: {reply['error']}")
        return reply

    def _request(self, body: dict) -> dict:
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            return self._roundtrip({"id": rid, **body})

    def predict(self, x) -> int:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise InvalidInputError(f"expected a flat feature row, got shape {x.shape}")
        reply = self._request({"op": "predict", "x": x.tolist()})
        return int(reply["label"])

    def budget_remaining(self) -> int:
        return int(self._request({"op": "budget"})["remaining"])


class RemoteVictimOracle:
    """Drop-in oracle surface backed by a RemoteVictimClient.

    Batch labeling pre-checks the advertised remaining budget before sending
    any predict, and records answers in the pool only after the whole batch
    succeeded, so a mid-batch failure leaves pool state unchanged.
    """

    def __init__(self, client: RemoteVictimClient):
        self._client = client

    def budget_remaining(self) -> int:
        return self._client.budget_remaining()

    def predict_one(self, x) -> int:
        return self._client.predict(x)

    def query_labels(self, indices, pool_state) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise InvalidInputError("expected a nonempty index array")
        if np.unique(idx).size != idx.size:
            raise InvalidInputError("indices contain duplicates")
        if idx.min() < 0 or idx.max() >= pool_state.pool.n:
            raise InvalidInputError(f"indices out of range [0, {pool_state.pool.n})")
        if np.any(pool_state.status[idx] != 0):
            raise InvalidInputError("can only query rows that are still unlabeled")
        idx = np.sort(idx)
        remaining = self._client.budget_remaining()
        if idx.size > remaining:
            raise BudgetExhaustedError(
                f"query budget exhausted: need {idx.size}, have {remaining}"
            )
        labels = np.array(
            [self._client.predict(row) for row in pool_state.pool.features[idx]],
            dtype=np.int64,
        )
        pool_state.mark_queried(idx, labels)
        return labels
