"""Hardware-in-the-loop link between the simulator and the vision host.

Wire frame (all integers big-endian)::

    offset  size  field
    0       2     magic  b"SC"
    2       1     version 0x01
    3       1     msg_type (FRAME=1, PREDICTION=2, HELLO=3, BYE=4, ERROR=5)
    4       4     payload length, at most 1 MiB
    8       n     payload
    8+n     4     CRC-32 (zlib polynomial) of the payload

FRAME payload: u32 frame_id, u16 width, u16 height, width*height pixel
bytes row-major. PREDICTION payload: u32 frame_id, 8 x i16 scores_x,
8 x i16 scores_y, u8 label_x, u8 label_y. ERROR payload: UTF-8 text.
HELLO and BYE carry no payload.

The transport is one TCP connection in strict request-reply. Each FRAME gets
exactly one PREDICTION. After any protocol error the host replies ERROR and
closes, and no attempt is made to resynchronise the stream.
"""

from __future__ import annotations

import csv
import enum
import logging
import socket
import socketserver
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bnn import N_BINS, PredictionDistribution, infer_ppa
from .ppa import NoiseModel

log = logging.getLogger(__name__)

MAGIC = b"SC"
VERSION = 0x01
MAX_PAYLOAD = 1 << 20
MAX_FRAME_SIDE = 256
DEFAULT_TIMEOUT = 2.0

_HEADER = struct.Struct(">2sBBI")
_CRC = struct.Struct(">I")
_FRAME_HEAD = struct.Struct(">IHH")
_PREDICTION = struct.Struct(">I8h8hBB")


class MsgType(enum.IntEnum):
    FRAME = 0x01
    PREDICTION = 0x02
    HELLO = 0x03
    BYE = 0x04
    ERROR = 0x05


class ProtocolError(Exception):
    """Bytes on the wire violate the protocol."""


class CorruptionError(ProtocolError):
    """Payload CRC does not match."""


class RemoteError(ProtocolError):
    """The peer answered with an ERROR message."""


class BridgeTimeout(TimeoutError):
    pass


class Disconnected(ConnectionError):
    pass


class StartupError(OSError):
    pass


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    payload: bytes = b""


def encode(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    head = _HEADER.pack(MAGIC, VERSION, int(MsgType(msg.msg_type)), len(msg.payload))
    return head + msg.payload + _CRC.pack(zlib.crc32(msg.payload))


def decode(buf) -> tuple[Message, int] | None:
    """Decode one message from the front of ``buf``.

    Returns ``(message, bytes_consumed)``, or None when ``buf`` holds only a
    prefix of a valid message. Header fields are checked as soon as their
    bytes are present, so garbage is rejected without waiting for more.
    """
    n = len(buf)
    if n >= 1 and buf[0] != MAGIC[0] or n >= 2 and buf[1] != MAGIC[1]:
        raise ProtocolError(f"bad magic {bytes(buf[:2])!r}")
    if n >= 3 and buf[2] != VERSION:
        raise ProtocolError(f"unsupported version {buf[2]}")
    if n >= 4 and buf[3] not in MsgType._value2member_map_:
        raise ProtocolError(f"unknown message type {buf[3]:#04x}")
    if n < _HEADER.size:
        return None
    _, _, msg_type, length = _HEADER.unpack_from(buf)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload length {length} exceeds {MAX_PAYLOAD}")
    total = _HEADER.size + length + _CRC.size
    if n < total:
        return None
    payload = bytes(buf[_HEADER.size:_HEADER.size + length])
    (crc,) = _CRC.unpack_from(buf, _HEADER.size + length)
    if crc != zlib.crc32(payload):
        raise CorruptionError(f"crc mismatch: got {crc:#010x}, computed {zlib.crc32(payload):#010x}")
    return Message(MsgType(msg_type), payload), total


@dataclass(frozen=True, eq=False)
class FramePayload:
    frame_id: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or not (1 <= px.shape[0] <= MAX_FRAME_SIDE and 1 <= px.shape[1] <= MAX_FRAME_SIDE):
            raise ProtocolError(f"frame shape {px.shape} not allowed")
        object.__setattr__(self, "pixels", px.astype(np.uint8, copy=False))

    def __eq__(self, other):
        if not isinstance(other, FramePayload):
            return NotImplemented
        return self.frame_id == other.frame_id and self.pixels.shape == other.pixels.shape \
            and bool(np.array_equal(self.pixels, other.pixels))

    def to_bytes(self) -> bytes:
        h, w = self.pixels.shape
        return _FRAME_HEAD.pack(self.frame_id, w, h) + np.ascontiguousarray(self.pixels).tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> FramePayload:
        if len(payload) < _FRAME_HEAD.size:
            raise ProtocolError("frame payload too short")
        frame_id, w, h = _FRAME_HEAD.unpack_from(payload)
        if len(payload) != _FRAME_HEAD.size + w * h:
            raise ProtocolError(f"frame payload is {len(payload)} bytes, header says {w}x{h}")
        px = np.frombuffer(payload, dtype=np.uint8, offset=_FRAME_HEAD.size).reshape(h, w)
        return cls(frame_id, px)


@dataclass(frozen=True)
class PredictionPayload:
    frame_id: int
    scores_x: tuple[int, ...]
    scores_y: tuple[int, ...]
    label_x: int
    label_y: int

    @classmethod
    def from_prediction(cls, frame_id: int, pred: PredictionDistribution) -> PredictionPayload:
        return cls(frame_id, tuple(pred.scores_x), tuple(pred.scores_y), pred.label_x, pred.label_y)

    @property
    def labels(self) -> tuple[int, int]:
        return self.label_x, self.label_y

    def check(self):
        """Labels must be the argmax of the carried scores, ties to the lower index."""
        if len(self.scores_x) != N_BINS or len(self.scores_y) != N_BINS:
            raise ProtocolError("prediction must carry 8 scores per axis")
        if self.label_x != int(np.argmax(self.scores_x)) or self.label_y != int(np.argmax(self.scores_y)):
            raise ProtocolError(f"labels ({self.label_x}, {self.label_y}) disagree with scores")
        return self

    def to_bytes(self) -> bytes:
        try:
            return _PREDICTION.pack(self.frame_id, *self.scores_x, *self.scores_y, self.label_x, self.label_y)
        except struct.error as exc:
            raise ProtocolError(f"cannot encode prediction: {exc}") from None

    @classmethod
    def from_bytes(cls, payload: bytes) -> PredictionPayload:
        if len(payload) != _PREDICTION.size:
            raise ProtocolError(f"prediction payload must be {_PREDICTION.size} bytes, got {len(payload)}")
        fields = _PREDICTION.unpack(payload)
        return cls(fields[0], tuple(fields[1:9]), tuple(fields[9:17]), fields[17], fields[18]).check()


def frame_message(frame_id: int, pixels) -> Message:
    return Message(MsgType.FRAME, FramePayload(frame_id, pixels).to_bytes())


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


def _recv_message(sock: socket.socket, buf: bytearray) -> Message:
    while True:
        got = decode(buf)
        if got is not None:
            msg, used = got
            del buf[:used]
            return msg
        chunk = sock.recv(65536)
        if not chunk:
            raise Disconnected("peer closed the connection")
        buf.extend(chunk)


# ---------------------------------------------------------------------------
# vision host

Handler = Callable[[FramePayload], "PredictionPayload | PredictionDistribution"]


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock: socket.socket = self.request
        handler: Handler = self.server.frame_handler
        buf = bytearray()
        try:
            while True:
                try:
                    msg = _recv_message(sock, buf)
                except Disconnected:
                    return
                if msg.msg_type is MsgType.HELLO:
                    sock.sendall(encode(Message(MsgType.HELLO)))
                elif msg.msg_type is MsgType.BYE:
                    return
                elif msg.msg_type is MsgType.FRAME:
                    frame = FramePayload.from_bytes(msg.payload)
                    reply = handler(frame)
                    if isinstance(reply, PredictionDistribution):
                        reply = PredictionPayload.from_prediction(frame.frame_id, reply)
                    if reply.frame_id != frame.frame_id:
                        raise ProtocolError("handler answered with a different frame_id")
                    sock.sendall(encode(Message(MsgType.PREDICTION, reply.check().to_bytes())))
                else:
                    raise ProtocolError(f"host does not accept {msg.msg_type.name}")
        except Exception as exc:  # any failure ends the session with an ERROR reply
            log.warning("closing session after error: %s", exc)
            try:
                sock.sendall(encode(Message(MsgType.ERROR, str(exc).encode("utf-8", "replace")[:4096])))
            except OSError:
                pass


class VisionHost(socketserver.TCPServer):
    """Serves one simulator connection at a time, calling ``handler`` per FRAME."""

    allow_reuse_address = True

    def __init__(self, address, handler: Handler):
        if isinstance(address, str):
            address = parse_address(address)
        self.frame_handler = handler
        self._thread: threading.Thread | None = None
        try:
            super().__init__(address, _ConnectionHandler)
        except OSError as exc:
            raise StartupError(f"cannot bind {address}: {exc}") from exc

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> VisionHost:
        self._thread = threading.Thread(target=self.serve_forever, name="vision-host", daemon=True)
        self._thread.start()
        return self

    def close(self):
        if self._thread is not None:
            self.shutdown()
            self._thread.join()
            self._thread = None
        self.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(address, handler: Handler) -> VisionHost:
    """Bind ``address`` and serve frames on a background thread."""
    return VisionHost(address, handler).start()


def inference_handler(model, noise: NoiseModel | None = None) -> Handler:
    """Frame handler running PPA inference with ``noise`` (default noise if None)."""
    noise = noise if noise is not None else NoiseModel()

    def handle(frame: FramePayload) -> PredictionDistribution:
        return infer_ppa(model, frame.pixels, noise).prediction

    return handle


# ---------------------------------------------------------------------------
# simulator-side client

class VisionClient:
    """Blocking request-reply connection to a :class:`VisionHost`.

    Not thread-safe: callers on several threads must serialise access.
    Round-trip latency of every request is kept in ``latencies`` as
    ``(frame_id, microseconds)``.
    """

    def __init__(self, address, timeout: float = DEFAULT_TIMEOUT):
        if isinstance(address, str):
            address = parse_address(address)
        self.timeout = timeout
        self.latencies: list[tuple[int, int]] = []
        self._buf = bytearray()
        try:
            self.sock = socket.create_connection(address, timeout=timeout)
        except socket.timeout as exc:
            raise BridgeTimeout(f"connect to {address} timed out") from exc
        except OSError as exc:
            raise Disconnected(f"cannot connect to {address}: {exc}") from exc
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        reply = self._roundtrip(Message(MsgType.HELLO))
        if reply.msg_type is not MsgType.HELLO:
            raise ProtocolError(f"expected HELLO, got {reply.msg_type.name}")

    def _roundtrip(self, msg: Message) -> Message:
        try:
            self.sock.sendall(encode(msg))
            reply = _recv_message(self.sock, self._buf)
        except socket.timeout as exc:
            raise BridgeTimeout(f"no reply within {self.timeout} s") from exc
        except (BrokenPipeError, ConnectionResetError) as exc:
            raise Disconnected(str(exc)) from exc
        if reply.msg_type is MsgType.ERROR:
            raise RemoteError(reply.payload.decode("utf-8", "replace"))
        return reply

    def request_prediction(self, frame_id: int, pixels) -> PredictionPayload:
        start = time.perf_counter_ns()
        reply = self._roundtrip(frame_message(frame_id, pixels))
        micros = (time.perf_counter_ns() - start) // 1000
        if reply.msg_type is not MsgType.PREDICTION:
            raise ProtocolError(f"expected PREDICTION, got {reply.msg_type.name}")
        pred = PredictionPayload.from_bytes(reply.payload)
        if pred.frame_id != frame_id:
            raise ProtocolError(f"reply for frame {pred.frame_id}, expected {frame_id}")
        self.latencies.append((frame_id, int(micros)))
        return pred

    def close(self):
        try:
            self.sock.sendall(encode(Message(MsgType.BYE)))
        except OSError:
            pass
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def request_prediction(connection: VisionClient, frame_id: int, pixels) -> PredictionPayload:
    return connection.request_prediction(frame_id, pixels)


def write_latency_log(path, latencies) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame_id", "micros"])
        writer.writerows(latencies)


def latency_summary(latencies) -> dict[str, float]:
    micros = np.array([m for _, m in latencies], dtype=np.float64)
    if micros.size == 0:
        return {"count": 0, "p50_us": float("nan"), "p99_us": float("nan")}
    return {"count": int(micros.size), "p50_us": float(np.percentile(micros, 50)),
            "p99_us": float(np.percentile(micros, 99))}
