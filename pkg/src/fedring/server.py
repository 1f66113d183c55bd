"""Aggregation server: authenticates clients, hands out the global model,
collects submissions, and advances rounds once quorum is reached.

The server's only inputs are weight sets; it is configured without any
training-data path (the optional validation hook holds its own held-out
set).  All round-state mutations are serialized through one lock, so
handlers can be driven from any number of connection threads or called
directly by the in-process simulator.
"""

from __future__ import annotations

import json
import logging
import secrets
import socket
import ssl
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .aggregation import AggregationMode, AggregationPolicy, aggregate, check_quorum
from .errors import FedringError, HookDataUnreadable, InvariantViolation
from .inference import mean_foreground_dice
from .ml.model import ModelConfig, SegModel, init_weights
from .preprocess import load_volume_dir
from .protocol import (
    Credential,
    Envelope,
    MsgType,
    WeightSet,
    decode_envelope,
    decode_login_payload,
    encode_envelope,
    read_flw,
    serialize_weights,
    write_flw,
)
from .transport import recv_frame, send_frame

log = logging.getLogger(__name__)

REASON_BAD_CREDENTIAL = b"BadCredential"
REASON_SERVER_FULL = b"ServerFull"
REASON_AUTH_FAILURE = b"AuthFailure"
REASON_DUPLICATE = b"DuplicateSubmission"
REASON_SHAPE_MISMATCH = b"ShapeMismatch"
REASON_ZERO_SAMPLES = b"ZeroSampleCount"
REASON_BAD_PAYLOAD = b"BadPayload"

# Replies that must carry a token even when the offending request had none.
_PLACEHOLDER_TOKEN = b"\x00"

SKIPPED = "skipped"


class Phase(Enum):
    COLLECTING = "collecting"
    AGGREGATING = "aggregating"
    DONE = "done"


@dataclass
class RoundState:
    round_index: int
    global_weights: WeightSet
    submissions: dict[str, WeightSet] = field(default_factory=dict)
    phase: Phase = Phase.COLLECTING


@dataclass
class ClientSession:
    client_id: str
    token: bytes
    last_seen_round: int = -1


class ValidationHook:
    """Optional server-side scoring of each new global model on a held-out
    dataset.  ``scorer`` can be injected for tests; by default the hook
    loads .vol volumes from data_dir and computes mean foreground Dice."""

    def __init__(
        self,
        model_config: ModelConfig,
        data_dir: str | Path | None = None,
        volumes=None,
        stride: tuple[int, int, int] | None = None,
        scorer=None,
    ):
        self.model_config = model_config
        self.data_dir = data_dir
        self._volumes = volumes
        self.stride = stride
        self.scorer = scorer

    def _load(self):
        if self._volumes is None:
            if self.data_dir is None:
                raise HookDataUnreadable("no hook dataset configured")
            try:
                self._volumes = load_volume_dir(self.data_dir)
            except (OSError, FedringError) as exc:
                raise HookDataUnreadable(str(exc)) from exc
            if any(v.labels is None for v in self._volumes):
                self._volumes = None
                raise HookDataUnreadable("hook volumes must carry labels")
        return self._volumes

    def score(self, global_weights: WeightSet, round_index: int) -> float:
        if self.scorer is not None:
            return float(self.scorer(global_weights, round_index))
        volumes = self._load()
        model = SegModel.from_weightset(self.model_config, global_weights)
        return mean_foreground_dice(model, volumes, stride=self.stride)


@dataclass
class ServerConfig:
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    tls_cert_path: str | None = None
    tls_key_path: str | None = None
    max_clients: int = 2
    min_clients: int = 2
    total_rounds: int = 1
    accepted_credentials: list[Credential] = field(default_factory=list)
    aggregation: AggregationPolicy | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    init_seed: int = 0
    initial_weights_path: str | None = None
    out_dir: str | None = None
    validation_hook: ValidationHook | None = None

    def __post_init__(self):
        if self.min_clients > self.max_clients:
            raise InvariantViolation("min_clients must be <= max_clients")
        if self.total_rounds < 1:
            raise InvariantViolation("total_rounds must be >= 1")
        if self.aggregation is None:
            self.aggregation = AggregationPolicy(min_clients=self.min_clients)
        elif self.aggregation.min_clients != self.min_clients:
            raise InvariantViolation(
                "aggregation.min_clients must equal server min_clients"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "ServerConfig":
        d = dict(d)
        if "accepted_credentials" in d:
            d["accepted_credentials"] = [
                Credential(c["client_id"], c["secret"].encode("utf-8"))
                for c in d["accepted_credentials"]
            ]
        if "aggregation" in d and d["aggregation"] is not None:
            a = d["aggregation"]
            d["aggregation"] = AggregationPolicy(
                AggregationMode(a.get("mode", "sample_weighted")),
                a.get("min_clients", d.get("min_clients", 1)),
            )
        if "model" in d and d["model"] is not None:
            d["model"] = ModelConfig(**d["model"])
        if "validation_hook" in d and d["validation_hook"] is not None:
            h = d["validation_hook"]
            model = d.get("model") or ModelConfig()
            d["validation_hook"] = ValidationHook(
                model, data_dir=h.get("data_dir"),
                stride=tuple(h["stride"]) if h.get("stride") else None,
            )
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ServerConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


class FedServer:
    def __init__(self, config: ServerConfig, token_rng: np.random.Generator | None = None):
        self.config = config
        self._token_rng = token_rng
        self._lock = threading.RLock()
        self.sessions: dict[bytes, ClientSession] = {}
        self._round_started = time.monotonic()
        self._best_score: float | None = None
        self.round_log: list[dict] = []

        if config.initial_weights_path:
            initial = read_flw(config.initial_weights_path)
        else:
            # Common starting point for every client: seeded uniform init.
            initial = WeightSet.from_arrays(
                init_weights(config.model, config.init_seed), sample_count=0
            )
        self.state = RoundState(0, initial)
        self._write_checkpoint("global.flw")

    # -- framing ----------------------------------------------------------

    def handle_frame(self, data: bytes) -> bytes:
        try:
            env = decode_envelope(data)
        except FedringError as exc:
            log.warning("undecodable frame: %s", exc)
            reply = Envelope(
                MsgType.ERROR,
                _PLACEHOLDER_TOKEN,
                0,
                REASON_BAD_PAYLOAD + b":" + type(exc).__name__.encode(),
            )
            return encode_envelope(reply)
        return encode_envelope(self.handle_envelope(env))

    def handle_envelope(self, env: Envelope) -> Envelope:
        with self._lock:
            if env.msg_type is MsgType.LOGIN_REQUEST:
                return self.handle_login(env)
            if env.msg_type is MsgType.MODEL_PULL:
                return self.handle_pull(env)
            if env.msg_type is MsgType.MODEL_PUSH:
                return self.handle_push(env)
            return self._error(env, REASON_BAD_PAYLOAD + b":UnexpectedType")

    def _reply_token(self, env: Envelope) -> bytes:
        return env.token if env.token else _PLACEHOLDER_TOKEN

    def _error(self, env: Envelope, reason: bytes) -> Envelope:
        return Envelope(MsgType.ERROR, self._reply_token(env), self.state.round_index, reason)

    # -- handlers -----------------------------------------------------------

    def handle_login(self, env: Envelope) -> Envelope:
        try:
            offered = decode_login_payload(env.payload)
        except FedringError:
            return Envelope(MsgType.LOGIN_REJECT, b"", 0, REASON_BAD_CREDENTIAL)
        matched = None
        for cred in self.config.accepted_credentials:
            if cred.client_id == offered.client_id and secrets.compare_digest(
                cred.secret, offered.secret
            ):
                matched = cred
                break
        if matched is None:
            log.info("login rejected for %r", offered.client_id)
            return Envelope(MsgType.LOGIN_REJECT, b"", 0, REASON_BAD_CREDENTIAL)

        # A reconnecting client evicts its own stale session first.
        stale = [t for t, s in self.sessions.items() if s.client_id == matched.client_id]
        for t in stale:
            del self.sessions[t]
        if len(self.sessions) >= self.config.max_clients:
            return Envelope(MsgType.LOGIN_REJECT, b"", 0, REASON_SERVER_FULL)

        token = self._new_token()
        self.sessions[token] = ClientSession(matched.client_id, token)
        log.info("client %r logged in", matched.client_id)
        return Envelope(MsgType.LOGIN_ACCEPT, token, 0, b"")

    def _new_token(self) -> bytes:
        while True:
            if self._token_rng is not None:
                token = self._token_rng.bytes(32)
            else:
                token = secrets.token_bytes(32)
            if token not in self.sessions:
                return token

    def handle_pull(self, env: Envelope) -> Envelope:
        sess = self.sessions.get(env.token)
        if sess is None:
            return self._error(env, REASON_AUTH_FAILURE)
        if self.state.phase is Phase.DONE:
            return Envelope(
                MsgType.TRAINING_FINISHED, env.token, self.state.round_index, b""
            )
        return Envelope(
            MsgType.MODEL_PAYLOAD,
            env.token,
            self.state.round_index,
            serialize_weights(self.state.global_weights),
        )

    def handle_push(self, env: Envelope) -> Envelope:
        sess = self.sessions.get(env.token)
        if sess is None:
            return self._error(env, REASON_AUTH_FAILURE)
        state = self.state
        if state.phase is Phase.DONE:
            return Envelope(MsgType.TRAINING_FINISHED, env.token, state.round_index, b"")
        if env.round_index != state.round_index:
            # Straggler: the round it trained for is gone; tell it where we
            # are and drop the submission.
            return Envelope(MsgType.ROUND_COMPLETE, env.token, state.round_index, b"")
        if sess.client_id in state.submissions:
            return self._error(env, REASON_DUPLICATE)
        try:
            ws = self._validated_submission(env.payload)
        except FedringError as exc:
            log.warning("rejecting submission from %r: %s", sess.client_id, exc)
            reason = {
                "ShapeMismatch": REASON_SHAPE_MISMATCH,
                "ZeroSampleCount": REASON_ZERO_SAMPLES,
            }.get(type(exc).__name__, REASON_BAD_PAYLOAD + b":" + type(exc).__name__.encode())
            return self._error(env, reason)

        state.submissions[sess.client_id] = ws
        sess.last_seen_round = state.round_index
        reply = Envelope(MsgType.ACK_SUBMISSION, env.token, state.round_index, b"")
        if check_quorum(len(state.submissions), self.config.aggregation):
            self._advance_round()
        return reply

    def _validated_submission(self, payload: bytes) -> WeightSet:
        from .errors import ShapeMismatch, ZeroSampleCount
        from .protocol import deserialize_weights

        ws = deserialize_weights(payload)
        ref = self.state.global_weights
        if ws.names != ref.names:
            raise ShapeMismatch("submission entry names differ from the global model")
        for a, b in zip(ws.entries, ref.entries):
            if a.shape != b.shape:
                raise ShapeMismatch(f"entry {a.name!r}: {a.shape} != {b.shape}")
        if (
            self.config.aggregation.mode is AggregationMode.SAMPLE_WEIGHTED
            and ws.sample_count < 1
        ):
            raise ZeroSampleCount("sample_count must be >= 1 for weighted aggregation")
        return ws

    # -- round progression -----------------------------------------------------

    def _advance_round(self) -> None:
        state = self.state
        state.phase = Phase.AGGREGATING
        submissions = list(state.submissions.values())
        new_global = aggregate(submissions, self.config.aggregation)
        finished_round = state.round_index
        state.global_weights = new_global
        state.round_index += 1
        state.submissions = {}
        state.phase = (
            Phase.DONE if state.round_index >= self.config.total_rounds else Phase.COLLECTING
        )
        wall_ms = (time.monotonic() - self._round_started) * 1000.0
        self._round_started = time.monotonic()

        score = self.run_validation_hook(new_global, finished_round)
        self._write_checkpoint("global.flw")
        record = {
            "round_index": finished_round,
            "n_submissions": len(submissions),
            "wall_ms": round(wall_ms, 3),
        }
        if score != SKIPPED:
            record["validation_score"] = score
        self.round_log.append(record)
        self._append_round_log(record)
        log.info(
            "round %d aggregated (%d submissions)%s",
            finished_round,
            len(submissions),
            "" if score == SKIPPED else f", validation {score:.4f}",
        )

    def run_validation_hook(self, global_weights: WeightSet, round_index: int):
        """Score the new global on the hook dataset; keeps the best-scoring
        checkpoint as best.flw.  Returns the score, or SKIPPED when no hook
        is configured.  Hook failures are logged, never fatal."""
        hook = self.config.validation_hook
        if hook is None:
            return SKIPPED
        try:
            score = hook.score(global_weights, round_index)
        except HookDataUnreadable as exc:
            log.warning("validation hook skipped: %s", exc)
            return SKIPPED
        except Exception:
            log.exception("validation hook failed; continuing")
            return SKIPPED
        if self._best_score is None or score > self._best_score:
            self._best_score = score
            self._write_checkpoint("best.flw", global_weights)
        return score

    @property
    def best_validation_score(self):
        return self._best_score

    # -- artifacts ------------------------------------------------------------

    def _write_checkpoint(self, name: str, ws: WeightSet | None = None) -> None:
        if not self.config.out_dir:
            return
        out = Path(self.config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_flw(out / name, ws if ws is not None else self.state.global_weights)

    def _append_round_log(self, record: dict) -> None:
        if not self.config.out_dir:
            return
        with open(Path(self.config.out_dir) / "rounds.log", "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- TCP serving -------------------------------------------------------------

    def serve(self, ready: threading.Event | None = None, stop: threading.Event | None = None):
        """Blocking accept loop; one thread per connection."""
        stop = stop or threading.Event()
        ctx = None
        if self.config.tls_cert_path and self.config.tls_key_path:
            ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
            ctx.load_cert_chain(self.config.tls_cert_path, self.config.tls_key_path)
        with socket.create_server(
            (self.config.listen_host, self.config.listen_port)
        ) as server_sock:
            self.bound_port = server_sock.getsockname()[1]
            server_sock.settimeout(0.2)
            if ready is not None:
                ready.set()
            log.info("listening on %s:%d", self.config.listen_host, self.bound_port)
            threads = []
            while not stop.is_set():
                try:
                    conn, _addr = server_sock.accept()
                except socket.timeout:
                    continue
                if ctx is not None:
                    try:
                        conn = ctx.wrap_socket(conn, server_side=True)
                    except ssl.SSLError as exc:
                        log.warning("TLS handshake failed: %s", exc)
                        conn.close()
                        continue
                t = threading.Thread(
                    target=self._serve_connection, args=(conn,), daemon=True
                )
                t.start()
                threads.append(t)
            for t in threads:
                t.join(timeout=1.0)

    def _serve_connection(self, conn) -> None:
        with conn:
            while True:
                try:
                    data = recv_frame(conn)
                except FedringError:
                    return
                if data is None:
                    return
                try:
                    send_frame(conn, self.handle_frame(data))
                except FedringError:
                    return


def run_server(config: ServerConfig, stop: threading.Event | None = None) -> FedServer:
    """CLI entry: serve until stopped (or forever)."""
    server = FedServer(config)
    server.serve(stop=stop)
    return server
