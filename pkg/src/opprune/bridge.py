"""External-process evaluator speaking line-delimited JSON over stdio.

Protocol v1: one UTF-8 JSON object per newline-terminated line, request ids
strictly increasing per session, exactly one response per request with a
matching id. Requests: hello (carries the opaque evaluator config), evaluate
(carries the policy as a canonically ordered operation list), baseline,
shutdown. Responses: hello_ok (carries the protocol version), score, error.
Object keys are serialized in alphabetical order on both sides so conforming
workers can be compared byte-for-byte against the documented transcript.
"""

from __future__ import annotations

import json
import queue
import subprocess
import threading
from importlib import resources
from typing import Optional, Sequence

from .errors import (
    EvaluatorFailure,
    HandshakeTimeoutError,
    ProtocolError,
    VersionMismatchError,
    WorkerLaunchError,
)
from .evaluators import Evaluator
from .model import DecoderConfig, Operation, Policy, canonical_order

PROTOCOL_VERSION = "1"
_EOF = object()


class _WireTimeout(ProtocolError):
    """No response line arrived within the timeout (internal)."""


def encode_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"


def policy_to_wire(ops: Sequence[Operation], config: Optional[DecoderConfig]) -> list[dict]:
    """Operation list for the wire, canonically ordered when the layout is known."""
    if config is not None:
        ops = canonical_order(ops, config.layout)
    else:
        ops = sorted(ops, key=lambda o: (-o.layer, o.group, int(o.module)))
    return [op.to_dict() for op in ops]


def policy_from_wire(entries: Sequence[dict], config_digest: str) -> Policy:
    return Policy(frozenset(Operation.from_dict(e) for e in entries), config_digest)


class WorkerSession(Evaluator):
    """EvaluatorContract over a live worker process; single in-flight request,
    so never concurrency-safe."""

    concurrency_safe = False

    def __init__(
        self,
        command: Sequence[str],
        config_payload: dict,
        timeout: float = 10.0,
        decoder_config: Optional[DecoderConfig] = None,
    ):
        super().__init__()
        self.timeout = timeout
        self.decoder_config = decoder_config
        self._next_id = 0
        self._io_lock = threading.Lock()
        self._lines: queue.Queue = queue.Queue()
        try:
            self._proc = subprocess.Popen(
                list(command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        except OSError as exc:
            raise WorkerLaunchError(f"could not launch worker {command!r}: {exc}") from exc
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self._handshake(config_payload)

    def _pump(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(_EOF)

    def _read_line(self, timeout: float) -> str:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise _WireTimeout(f"worker did not respond within {timeout}s") from None
        if line is _EOF:
            raise EvaluatorFailure("worker closed its output stream mid-session")
        return line

    def _send(self, payload: dict) -> None:
        assert self._proc.stdin is not None
        try:
            self._proc.stdin.write(encode_line(payload))
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise EvaluatorFailure(f"worker pipe broke: {exc}") from exc

    def _request(self, payload: dict, timeout: Optional[float] = None) -> dict:
        with self._io_lock:
            request_id = self._next_id
            self._next_id += 1
            payload = {"id": request_id, **payload}
            self._send(payload)
            raw = self._read_line(timeout if timeout is not None else self.timeout)
        try:
            response = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"worker sent malformed JSON: {raw!r}") from exc
        if not isinstance(response, dict) or response.get("id") != request_id:
            raise ProtocolError(
                f"worker response id {response.get('id')!r} does not match request {request_id}"
            )
        if response.get("type") == "error":
            raise EvaluatorFailure(f"worker error: {response.get('message', '<no message>')}")
        return response

    def _handshake(self, config_payload: dict) -> None:
        try:
            response = self._request({"config": config_payload, "type": "hello"})
        except _WireTimeout as exc:
            self.kill()
            raise HandshakeTimeoutError(f"worker did not complete hello: {exc}") from exc
        except (ProtocolError, EvaluatorFailure):
            self.kill()
            raise
        if response.get("type") != "hello_ok":
            self.kill()
            raise ProtocolError(f"expected hello_ok, got {response.get('type')!r}")
        version = response.get("version")
        if version != PROTOCOL_VERSION:
            self.kill()
            raise VersionMismatchError(
                f"worker speaks version {version!r}, required {PROTOCOL_VERSION!r}"
            )

    def _score(self, pruned: frozenset[Operation]) -> float:
        wire = policy_to_wire(tuple(pruned), self.decoder_config)
        response = self._request({"policy": wire, "type": "evaluate"})
        return self._expect_score(response)

    def baseline(self) -> float:
        if self._baseline is None:
            response = self._request({"type": "baseline"})
            self._baseline = self._expect_score(response)
        return self._baseline

    @staticmethod
    def _expect_score(response: dict) -> float:
        if response.get("type") != "score" or not isinstance(response.get("score"), (int, float)):
            raise ProtocolError(f"expected a score response, got {response!r}")
        return float(response["score"])

    def close(self) -> int:
        """Send shutdown, wait for the worker to exit; returns its exit code."""
        if self._proc.poll() is None:
            try:
                self._request({"type": "shutdown"})
            except (ProtocolError, EvaluatorFailure):
                pass
            try:
                return self._proc.wait(timeout=self.timeout)
            except subprocess.TimeoutExpired:
                self.kill()
        return self._proc.wait()

    def kill(self) -> None:
        if self._proc.poll() is None:
            self._proc.kill()
            self._proc.wait()

    def __enter__(self) -> "WorkerSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def spawn_worker(
    command: Sequence[str],
    config: dict,
    timeout: float = 10.0,
    decoder_config: Optional[DecoderConfig] = None,
) -> WorkerSession:
    """Launch a worker, run the hello/version exchange, deliver its config."""
    return WorkerSession(command, config, timeout=timeout, decoder_config=decoder_config)


def load_conformance_transcript() -> list[dict]:
    """The documented request/response byte transcript workers must reproduce."""
    text = resources.files("opprune").joinpath("data/conformance_transcript.jsonl").read_text()
    return [json.loads(line) for line in text.splitlines() if line.strip()]
