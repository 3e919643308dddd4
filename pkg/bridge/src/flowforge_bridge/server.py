"""Single-connection request-response server.

The bridge accepts one client at a time and answers framed JSON
requests until the client disconnects or sends ``shutdown``.  The
editing engine drives requests strictly sequentially, so there is no
pipelining and no concurrency: one thread, one connection, one request
in flight.

Validation failures reply with fixed message texts that conformance
transcripts assert verbatim.  Expected failures raised by the codec or
the model travel as their plain message; anything unexpected (a model
crash) travels as a full traceback string so the client-side log shows
where the wrapped model fell over.
"""

from __future__ import annotations

import socket
import threading
import traceback

from .errors import BridgeError, FrameError
from .framing import recv_frame, send_frame, tensor_from_wire, tensor_to_wire

__all__ = ["BridgeServer"]


class BridgeServer:
    """Serve a velocity model and an image codec over the wire protocol."""

    def __init__(self, model, codec, host: str = "127.0.0.1", port: int = 0):
        model_channels = getattr(model, "latent_channels", None)
        if model_channels is not None and model_channels != codec.latent_channels:
            raise BridgeError(
                f"model expects {model_channels} latent channels but the codec "
                f"produces {codec.latent_channels}"
            )
        self._model = model
        self._codec = codec
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.address = self._listener.getsockname()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def serve_forever(self) -> None:
        """Accept and serve connections until shutdown is requested."""
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._listener.accept()
                except TimeoutError:
                    continue
                except OSError:
                    break
                with conn:
                    self._serve_connection(conn)
        finally:
            self._listener.close()

    def start(self) -> "BridgeServer":
        """Run the accept loop on a background thread (for embedding)."""
        self._thread = threading.Thread(
            target=self.serve_forever, name="bridge-server", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
        self._listener.close()

    def __enter__(self) -> "BridgeServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()

    def _serve_connection(self, conn: socket.socket) -> None:
        while not self._stop.is_set():
            try:
                msg = recv_frame(conn)
            except FrameError as exc:
                try:
                    send_frame(conn, {"status": "error", "message": str(exc)})
                except OSError:
                    return
                continue
            except OSError:
                return
            if msg is None:
                return
            reply, should_stop = self._dispatch(msg)
            try:
                send_frame(conn, reply)
            except OSError:
                return
            if should_stop:
                self._stop.set()
                return

    def _dispatch(self, msg) -> tuple[dict, bool]:
        # The fixed message texts below are part of the protocol surface;
        # conformance transcripts assert them byte for byte.
        base: dict = {}
        if isinstance(msg, dict) and "id" in msg:
            base["id"] = msg["id"]
        if not isinstance(msg, dict) or not isinstance(msg.get("op"), str):
            return {**base, "status": "error", "message": "request must carry a string 'op'"}, False
        op = msg["op"]
        if op == "velocity":
            if "latent" not in msg:
                return {**base, "status": "error", "message": "velocity request needs a tensor 'latent'"}, False
            t = msg.get("t")
            if not isinstance(t, (int, float)) or isinstance(t, bool):
                return {**base, "status": "error", "message": "velocity request needs a numeric 't'"}, False
            if not isinstance(msg.get("prompt"), str):
                return {**base, "status": "error", "message": "velocity request needs a string 'prompt'"}, False
        if op == "encode" and "image" not in msg:
            return {**base, "status": "error", "message": "encode request needs a tensor 'image'"}, False
        if op == "decode" and "latent" not in msg:
            return {**base, "status": "error", "message": "decode request needs a tensor 'latent'"}, False
        try:
            if op == "hello":
                return {
                    **base,
                    "status": "ok",
                    "model_id": self._model.model_id,
                    "latent_channels": int(self._codec.latent_channels),
                    "downsample_factor": int(self._codec.downsample_factor),
                }, False
            if op == "shutdown":
                return {**base, "status": "ok"}, True
            if op == "encode":
                latent = self._codec.encode(tensor_from_wire(msg["image"]))
                return {**base, "status": "ok", "latent": tensor_to_wire(latent)}, False
            if op == "decode":
                image = self._codec.decode(tensor_from_wire(msg["latent"]))
                return {**base, "status": "ok", "image": tensor_to_wire(image)}, False
            if op == "velocity":
                z = tensor_from_wire(msg["latent"])
                v = self._model.velocity(z, float(msg["t"]), msg["prompt"])
                return {**base, "status": "ok", "velocity": tensor_to_wire(v)}, False
            return {**base, "status": "error", "message": f"unknown op {op!r}"}, False
        except BridgeError as exc:
            return {**base, "status": "error", "message": str(exc)}, False
        except Exception:
            return {**base, "status": "error", "message": traceback.format_exc()}, False
