"""Edge-offload streaming service and its replay client.

The server accepts concurrent TCP connections speaking the wire protocol.
Within a connection a reader thread parses messages and a single worker
thread processes frames, so DETECTIONS responses always leave in processed
order. Each connection has a capacity-1 frame slot with drop-oldest
semantics: the assistance scenario only ever cares about the latest view,
so a newly arrived frame replaces a queued-but-unstarted one and the stale
frame id is counted as dropped.

Protocol error handling: a malformed magic or version and an oversized
payload get an ERROR message and the connection is closed; an unknown
message type gets an ERROR but the connection stays open. A frame whose
processing raises (for example missing ground truth for a mock detector)
is answered with an ERROR and counted as processed.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import wire
from .detector import Detection, Frame, GroundTruthFrame
from .errors import ProtocolError
from .pipeline import PipelineConfig, PipelineResult, run_single_stage, run_two_stage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 0  # 0: pick an ephemeral port
    max_payload: int = wire.DEFAULT_MAX_PAYLOAD
    drain_deadline_s: float = 2.0
    stats_window_s: float = 5.0
    reservoir_size: int = 2048  # most-recent latency samples kept per metric


class StatsCollector:
    """Thread-safe service counters, sliding-window fps, latency percentiles."""

    def __init__(self, window_s: float = 5.0, reservoir_size: int = 2048):
        self._lock = threading.Lock()
        self._window_s = window_s
        self.frames_received = 0
        self.frames_processed = 0
        self.frames_dropped = 0
        self._processed_times: deque[float] = deque()
        self._stage1 = deque(maxlen=reservoir_size)
        self._stage2 = deque(maxlen=reservoir_size)
        self._total = deque(maxlen=reservoir_size)

    def record_received(self) -> None:
        with self._lock:
            self.frames_received += 1

    def record_dropped(self) -> None:
        with self._lock:
            self.frames_dropped += 1

    def record_processed(
        self,
        stage1_us: int | None = None,
        stage2_us: int | None = None,
        total_us: int | None = None,
        now: float | None = None,
    ) -> None:
        now = time.monotonic() if now is None else now
        with self._lock:
            self.frames_processed += 1
            self._processed_times.append(now)
            if total_us is not None:
                self._stage1.append(stage1_us or 0)
                self._stage2.append(stage2_us or 0)
                self._total.append(total_us)

    @staticmethod
    def _percentiles(samples: deque) -> tuple[float, float, float]:
        if not samples:
            return (0.0, 0.0, 0.0)
        p50, p95, p99 = np.percentile(np.asarray(samples, dtype=float), [50, 95, 99])
        return (float(p50), float(p95), float(p99))

    def snapshot(self, now: float | None = None) -> wire.StatsPayload:
        now = time.monotonic() if now is None else now
        with self._lock:
            horizon = now - self._window_s
            while self._processed_times and self._processed_times[0] <= horizon:
                self._processed_times.popleft()
            fps = len(self._processed_times) / self._window_s
            s1 = self._percentiles(self._stage1)
            s2 = self._percentiles(self._stage2)
            tot = self._percentiles(self._total)
            return wire.StatsPayload(
                self.frames_received,
                self.frames_processed,
                self.frames_dropped,
                fps,
                *s1,
                *s2,
                *tot,
            )


class FrameSlot:
    """Capacity-1 queue with drop-oldest replacement."""

    def __init__(self):
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._item = None
        self._closed = False

    def offer(self, item):
        """Queue an item; returns the replaced (dropped) item, if any."""
        with self._ready:
            dropped, self._item = self._item, item
            self._ready.notify()
            return dropped

    def take(self, timeout: float | None = None):
        with self._ready:
            if self._item is None and not self._closed:
                self._ready.wait(timeout)
            item, self._item = self._item, None
            return item

    def close(self) -> None:
        with self._ready:
            self._closed = True
            self._ready.notify_all()

    def empty(self) -> bool:
        with self._lock:
            return self._item is None


ProcessorResult = tuple[Sequence[Detection], int, int, int, bool]
# (full-frame detections, stage1_us, stage2_us, total_us, fallback_used)


def make_pipeline_processor(
    config: PipelineConfig,
    stage1,
    stage2=None,
    detectors: Sequence | None = None,
    gt_frames: Mapping[int, GroundTruthFrame] | None = None,
    decode_pixels: bool = False,
) -> Callable[[wire.FramePayload], ProcessorResult]:
    """Adapt a detection pipeline to the service's frame processor interface.

    gt_frames resolves ground truth by frame id for ground-truth-driven
    detectors (the replay client tags frames with dataset indices for this).
    The response carries context detections followed by the full-frame
    small-object detections.
    """

    def processor(payload: wire.FramePayload) -> ProcessorResult:
        pixels = decode_frame_pixels(payload) if decode_pixels else None
        frame = Frame(payload.frame_id, payload.width, payload.height, pixels)
        gt = gt_frames.get(payload.frame_id) if gt_frames is not None else None
        if config.mode == "two_stage":
            result: PipelineResult = run_two_stage(frame, stage1, stage2, config, gt)
        else:
            group = detectors if detectors is not None else [stage1]
            result = run_single_stage(frame, group, config, gt)
        dets = list(result.context_detections) + list(result.small_detections_fullframe)
        t = result.timings
        return dets, t.stage1_us, t.stage2_us, t.total_us, result.fallback_used

    return processor


def decode_frame_pixels(payload: wire.FramePayload) -> np.ndarray:
    """FramePayload to an (h, w, 3) uint8 RGB array."""
    if payload.encoding == wire.ENC_RAW_RGB8:
        arr = np.frombuffer(payload.data, dtype=np.uint8)
        return arr.reshape(payload.height, payload.width, 3)
    if payload.encoding == wire.ENC_JPEG:
        import io

        from PIL import Image

        with Image.open(io.BytesIO(payload.data)) as img:
            return np.asarray(img.convert("RGB"))
    raise ProtocolError(f"unknown frame encoding: {payload.encoding}")


class _Connection:
    def __init__(self, server: "DetectionService", sock: socket.socket, peer):
        self.server = server
        self.sock = sock
        self.peer = peer
        self.slot = FrameSlot()
        self.send_lock = threading.Lock()
        self.closing = threading.Event()
        self.reader = threading.Thread(target=self._read_loop, daemon=True, name=f"reader-{peer}")
        self.worker = threading.Thread(target=self._work_loop, daemon=True, name=f"worker-{peer}")

    def start(self) -> None:
        self.reader.start()
        self.worker.start()

    def _send(self, msg_type: int, payload: bytes) -> None:
        with self.send_lock:
            self.sock.sendall(wire.encode_message(msg_type, payload))

    def _send_error(self, code: int, message: str) -> None:
        try:
            self._send(wire.MSG_ERROR, wire.encode_error(wire.ErrorPayload(code, message)))
        except OSError:
            pass

    def _read_loop(self) -> None:
        cfg = self.server.config
        try:
            while not self.closing.is_set():
                try:
                    msg = wire.read_message(self.sock.recv, cfg.max_payload, eof_ok=True)
                except ProtocolError as exc:
                    reason = str(exc)
                    if "magic" in reason:
                        self._send_error(wire.ERR_BAD_MAGIC, reason)
                    elif "version" in reason:
                        self._send_error(wire.ERR_BAD_VERSION, reason)
                    elif "exceeds cap" in reason:
                        self._send_error(wire.ERR_OVERSIZED, reason)
                    else:
                        self._send_error(wire.ERR_MALFORMED, reason)
                    break
                if msg is None:
                    break  # client closed cleanly
                msg_type, payload = msg
                if msg_type == wire.MSG_FRAME:
                    self.server.stats.record_received()
                    try:
                        frame = wire.decode_frame(payload)
                    except ProtocolError as exc:
                        self._send_error(wire.ERR_MALFORMED, str(exc))
                        break
                    dropped = self.slot.offer(frame)
                    if dropped is not None:
                        self.server.stats.record_dropped()
                elif msg_type == wire.MSG_PING:
                    self._send(wire.MSG_PONG, payload)
                elif msg_type == wire.MSG_STATS_REQ:
                    snap = self.server.stats.snapshot()
                    self._send(wire.MSG_STATS_RESP, wire.encode_stats(snap))
                else:
                    self._send_error(wire.ERR_UNKNOWN_TYPE, f"unknown message type {msg_type}")
        except OSError:
            pass
        finally:
            self.slot.close()

    def _work_loop(self) -> None:
        while True:
            frame = self.slot.take(timeout=0.05)
            if frame is None:
                if self.closing.is_set() or not self.reader.is_alive():
                    if self.slot.empty():
                        break
                continue
            try:
                dets, s1, s2, total, fallback = self.server.processor(frame)
                records = tuple(
                    wire.DetectionRecord(
                        d.class_id, d.confidence, d.box.cx, d.box.cy, d.box.w, d.box.h
                    )
                    for d in dets
                )
                payload = wire.DetectionsPayload(frame.frame_id, fallback, s1, s2, total, records)
                self._send(wire.MSG_DETECTIONS, wire.encode_detections(payload))
                self.server.stats.record_processed(s1, s2, total)
            except OSError:
                break
            except Exception as exc:  # processing failed; answer, keep the connection
                logger.warning("frame %d failed: %s", frame.frame_id, exc)
                self._send_error(wire.ERR_INTERNAL, str(exc))
                self.server.stats.record_processed()
        # the worker outlives the reader, so it owns closing the socket
        if not self.closing.is_set():
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()

    def shutdown(self, deadline_s: float) -> None:
        self.closing.set()
        self.worker.join(deadline_s)
        self.slot.close()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self.reader.join(1.0)


class DetectionService:
    """TCP server running a frame processor; use as a context manager in tests."""

    def __init__(
        self,
        processor: Callable[[wire.FramePayload], ProcessorResult],
        config: ServiceConfig = ServiceConfig(),
    ):
        self.processor = processor
        self.config = config
        self.stats = StatsCollector(config.stats_window_s, config.reservoir_size)
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._connections: list[_Connection] = []
        self._conn_lock = threading.Lock()
        self._stopping = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        if self._listener is None:
            raise RuntimeError("service is not running")
        return self._listener.getsockname()[:2]

    def start(self) -> "DetectionService":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self.config.host, self.config.port))
        listener.listen(16)
        self._listener = listener
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True, name="accept")
        self._accept_thread.start()
        logger.info("service listening on %s:%d", *self.address)
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, peer = self._listener.accept()
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = _Connection(self, sock, peer)
            with self._conn_lock:
                self._connections.append(conn)
            conn.start()

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(1.0)
        with self._conn_lock:
            connections = list(self._connections)
            self._connections.clear()
        for conn in connections:
            conn.shutdown(self.config.drain_deadline_s)

    def __enter__(self) -> "DetectionService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(
    processor: Callable[[wire.FramePayload], ProcessorResult],
    config: ServiceConfig = ServiceConfig(),
    stop_event: threading.Event | None = None,
) -> None:
    """Run a service until stop_event is set (or forever); blocks the caller."""
    service = DetectionService(processor, config).start()
    try:
        while stop_event is None or not stop_event.wait(0.2):
            if stop_event is None:
                time.sleep(0.2)
    except KeyboardInterrupt:
        pass
    finally:
        service.stop()


# --- replay client ------------------------------------------------------------


@dataclass
class ReplayReport:
    frames_sent: int = 0
    responses_received: int = 0
    latencies_us: list[int] = field(default_factory=list)
    response_frame_ids: list[int] = field(default_factory=list)
    fallback_frames: int = 0
    achieved_fps: float = 0.0
    duration_s: float = 0.0
    connection_lost: bool = False

    def latency_percentiles_us(self) -> tuple[float, float, float]:
        if not self.latencies_us:
            return (0.0, 0.0, 0.0)
        p50, p95, p99 = np.percentile(np.asarray(self.latencies_us, dtype=float), [50, 95, 99])
        return (float(p50), float(p95), float(p99))


def frames_from_dir(path: str | Path) -> list[tuple[int, np.ndarray]]:
    """Load every PNG/JPEG in a directory as (index, rgb array), sorted by name."""
    from PIL import Image

    paths = sorted(
        p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    frames = []
    for i, p in enumerate(paths):
        with Image.open(p) as img:
            frames.append((i, np.asarray(img.convert("RGB"))))
    return frames


def frames_from_manifest(manifest_path: str | Path) -> list[tuple[int, np.ndarray]]:
    """Dataset images as (entry index, rgb array); index doubles as the GT tag."""
    from PIL import Image

    from .synthgen import DatasetManifest

    manifest_path = Path(manifest_path)
    manifest = DatasetManifest.load(manifest_path)
    root = manifest_path.parent
    frames = []
    for i, entry in enumerate(manifest.entries):
        with Image.open(root / entry.image_path) as img:
            frames.append((i, np.asarray(img.convert("RGB"))))
    return frames


def replay_client(
    frames: Iterable[tuple[int, np.ndarray]],
    endpoint: tuple[str, int],
    target_fps: float,
    encoding: int = wire.ENC_RAW_RGB8,
    idle_timeout_s: float = 5.0,
    connect_timeout_s: float = 5.0,
) -> ReplayReport:
    """Send frames paced at target_fps and collect DETECTIONS responses.

    Returns per-frame round-trip latencies (matched by frame id) and the
    achieved end-to-end fps (responses over the span from first send to
    last response). Responses the server dropped under backpressure simply
    never arrive; the client stops waiting after idle_timeout_s of silence.
    """
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    frames = list(frames)
    report = ReplayReport()
    if not frames:
        return report

    send_times: dict[int, float] = {}
    recv_done = threading.Event()
    lock = threading.Lock()
    last_activity = [time.monotonic()]
    last_response = [None]

    try:
        sock = socket.create_connection(endpoint, timeout=connect_timeout_s)
    except OSError as exc:
        report.connection_lost = True
        logger.error("replay: cannot connect to %s: %s", endpoint, exc)
        return report
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def receiver():
        try:
            while not recv_done.is_set():
                msg = wire.read_message(sock.recv, eof_ok=True)
                if msg is None:
                    break
                msg_type, payload = msg
                now = time.monotonic()
                last_activity[0] = now
                if msg_type == wire.MSG_DETECTIONS:
                    dets = wire.decode_detections(payload)
                    with lock:
                        report.responses_received += 1
                        report.response_frame_ids.append(dets.frame_id)
                        report.fallback_frames += int(dets.fallback_used)
                        last_response[0] = now
                        sent = send_times.get(dets.frame_id)
                        if sent is not None:
                            report.latencies_us.append(int((now - sent) * 1e6))
                elif msg_type == wire.MSG_ERROR:
                    err = wire.decode_error(payload)
                    logger.warning("replay: server error %d: %s", err.code, err.message)
        except (ProtocolError, OSError) as exc:
            if not recv_done.is_set():
                report.connection_lost = True
                logger.error("replay: receive failed: %s", exc)

    rx = threading.Thread(target=receiver, daemon=True, name="replay-rx")
    rx.start()

    start = time.monotonic()
    try:
        for i, (frame_id, rgb) in enumerate(frames):
            pace = start + i / target_fps
            delay = pace - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
            h, w = rgb.shape[:2]
            if encoding == wire.ENC_RAW_RGB8:
                data = rgb.tobytes()
            else:
                import io

                from PIL import Image

                buf = io.BytesIO()
                Image.fromarray(rgb, mode="RGB").save(buf, format="JPEG")
                data = buf.getvalue()
            payload = wire.FramePayload(frame_id, time.time_ns() // 1000, w, h, encoding, data)
            with lock:
                send_times[frame_id] = time.monotonic()
            sock.sendall(wire.encode_message(wire.MSG_FRAME, wire.encode_frame(payload)))
            report.frames_sent += 1
    except OSError as exc:
        report.connection_lost = True
        logger.error("replay: send failed: %s", exc)

    # wait for stragglers: all responses in, or the line goes idle
    while not report.connection_lost:
        with lock:
            done = report.responses_received >= report.frames_sent
        if done or time.monotonic() - last_activity[0] > idle_timeout_s:
            break
        time.sleep(0.02)

    recv_done.set()
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass
    sock.close()
    rx.join(1.0)

    end = time.monotonic()
    report.duration_s = end - start
    if report.responses_received and last_response[0] is not None:
        span = max(last_response[0] - start, 1e-9)
        report.achieved_fps = report.responses_received / span
    return report
