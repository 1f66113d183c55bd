"""Client-side training loop: login, pull the global model, fine-tune on
local data, push the weights back, repeat until the server says stop.

Raw volumes and labels never leave the process; the only envelopes a
client sends with a payload are the login request (its credential) and the
model push (weight parameters).  Across rounds the client keeps the
weights with the best local-validation Dice as its ``local_best``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AuthFailure,
    DuplicateSubmission,
    FedringError,
    InvariantViolation,
    ShapeMismatch,
)
from .inference import mean_foreground_dice
from .ml.losses import LossWeights, onehot_lastaxis
from .ml.model import ModelConfig, SegModel
from .ml.optim import OptimizerState, adam_step, cosine_lr
from .ml.training import loss_and_grads
from .preprocess import PatchSpec, Volume, VolumeSampler, load_volume_dir
from .protocol import (
    Credential,
    Envelope,
    MsgType,
    decode_envelope,
    deserialize_weights,
    encode_envelope,
    encode_login_payload,
    serialize_weights,
    write_flw,
)
from .transport import TcpTransport, send_with_retry

log = logging.getLogger(__name__)


@dataclass
class ClientConfig:
    credential: Credential
    server_host: str = "127.0.0.1"
    server_port: int = 0
    use_tls: bool = False
    tls_cafile: str | None = None
    data_dir: str | None = None
    out_dir: str | None = None
    epochs_per_round: int = 10
    batch_size: int = 2
    patch_spec: PatchSpec = field(default_factory=lambda: PatchSpec((32, 32, 32)))
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    local_validation_split: float = 0.2
    model: ModelConfig = field(default_factory=ModelConfig)
    patches_per_epoch: int | None = None  # default: 2 per training volume
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    total_steps: int | None = None  # cosine horizon; estimated if unset
    validation_stride: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.epochs_per_round < 1:
            raise InvariantViolation("epochs_per_round must be >= 1")
        if self.batch_size < 1:
            raise InvariantViolation("batch_size must be >= 1")
        if not 0.0 <= self.local_validation_split < 1.0:
            raise InvariantViolation("local_validation_split must be in [0, 1)")
        if self.patch_spec.size != self.model.patch_size:
            raise InvariantViolation(
                f"patch_spec.size {self.patch_spec.size} must match the model "
                f"patch size {self.model.patch_size}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> "ClientConfig":
        d = dict(d)
        c = d["credential"]
        d["credential"] = Credential(c["client_id"], c["secret"].encode("utf-8"))
        if "patch_spec" in d:
            p = d["patch_spec"]
            d["patch_spec"] = PatchSpec(tuple(p["size"]), p.get("fg_fraction", 0.5))
        if "loss_weights" in d:
            lw = d["loss_weights"]
            d["loss_weights"] = LossWeights(lw.get("w_kl", 0.2), lw.get("w_recon", 0.3))
        if "model" in d:
            d["model"] = ModelConfig(**d["model"])
        if d.get("total_steps") is not None:
            d["total_steps"] = int(d["total_steps"])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ClientConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def split_volumes(volumes: list[Volume], validation_split: float):
    """Deterministic split: the trailing fraction becomes validation."""
    n_val = int(round(len(volumes) * validation_split))
    n_val = min(n_val, len(volumes) - 1) if len(volumes) > 1 else 0
    if n_val == 0:
        return list(volumes), []
    return list(volumes[:-n_val]), list(volumes[-n_val:])


def train_local_epochs(
    model: SegModel,
    samplers: list[VolumeSampler],
    n_epochs: int,
    opt: OptimizerState,
    cfg: ClientConfig,
    rng: np.random.Generator,
):
    """Run n_epochs of patch-based training in place.

    Each epoch draws patches_per_epoch patches (volume chosen uniformly per
    patch), batches them, and applies one optimizer step per batch.
    Returns per-epoch mean loss-term dicts; fully deterministic for a
    given rng state.
    """
    n_patches = cfg.patches_per_epoch or 2 * len(samplers)
    k = model.config.n_classes
    history = []
    for _ in range(n_epochs):
        term_sums: dict[str, float] = {}
        n_batches = 0
        drawn = []
        for _ in range(n_patches):
            sampler = samplers[int(rng.integers(len(samplers)))]
            drawn.extend(sampler.draw(1, rng))
        for at in range(0, len(drawn), cfg.batch_size):
            batch = drawn[at : at + cfg.batch_size]
            patch_cl = np.stack([p for p, _ in batch])[..., None]
            onehot_cl = onehot_lastaxis(np.stack([l for _, l in batch]), k)
            eps = rng.standard_normal((len(batch), model.config.latent_dim))
            terms, grads = loss_and_grads(
                model, patch_cl, onehot_cl, cfg.loss_weights, eps
            )
            adam_step(opt, model.weights, grads)
            for key, value in terms.items():
                term_sums[key] = term_sums.get(key, 0.0) + value
            n_batches += 1
        history.append({key: value / n_batches for key, value in term_sums.items()})
    return model, history


class FedClient:
    """One federated participant bound to a request/response transport."""

    def __init__(
        self,
        cfg: ClientConfig,
        transport,
        train_volumes: list[Volume] | None = None,
        val_volumes: list[Volume] | None = None,
    ):
        self.cfg = cfg
        self.transport = transport
        if train_volumes is None:
            if cfg.data_dir is None:
                raise InvariantViolation("need train_volumes or cfg.data_dir")
            volumes = load_volume_dir(cfg.data_dir)
            train_volumes, val_volumes = split_volumes(
                volumes, cfg.local_validation_split
            )
        self.train_volumes = train_volumes
        self.val_volumes = val_volumes or []
        if not self.train_volumes:
            raise InvariantViolation("client needs at least one training volume")
        self.samplers = [VolumeSampler(v, cfg.patch_spec) for v in self.train_volumes]
        self.rng = np.random.default_rng(cfg.seed)
        self.model = SegModel(cfg.model)
        self.opt: OptimizerState | None = None
        self.token: bytes | None = None
        self.next_round = 0
        self.metrics: list[dict] = []
        self.best_val_dice: float | None = None
        self.local_best: SegModel | None = None
        self.finished = False
        self._epochs_run = 0

    # -- protocol steps ------------------------------------------------------

    def _send(self, env: Envelope) -> Envelope:
        reply = send_with_retry(self.transport, encode_envelope(env))
        return decode_envelope(reply)

    def login(self) -> None:
        env = Envelope(
            MsgType.LOGIN_REQUEST, b"", 0, encode_login_payload(self.cfg.credential)
        )
        reply = self._send(env)
        if reply.msg_type is not MsgType.LOGIN_ACCEPT:
            raise AuthFailure(f"login rejected: {reply.payload.decode(errors='replace')}")
        self.token = reply.token
        log.info("%s: logged in", self.cfg.credential.client_id)

    def _pull(self) -> Envelope:
        return self._send(Envelope(MsgType.MODEL_PULL, self.token, self.next_round, b""))

    def _push(self, round_index: int) -> Envelope:
        ws = self.model.to_weightset(sample_count=len(self.train_volumes))
        env = Envelope(
            MsgType.MODEL_PUSH, self.token, round_index, serialize_weights(ws)
        )
        return self._send(env)

    # -- training loop ----------------------------------------------------------

    def _ensure_optimizer(self) -> None:
        if self.opt is not None:
            return
        steps_per_epoch = int(
            np.ceil(
                (self.cfg.patches_per_epoch or 2 * len(self.samplers))
                / self.cfg.batch_size
            )
        )
        total = self.cfg.total_steps or 1000
        self.opt = OptimizerState.for_weights(
            self.model.weights,
            lr_max=self.cfg.lr_max,
            lr_min=self.cfg.lr_min,
            total_steps=max(total, 1),
        )
        self._steps_per_epoch = steps_per_epoch

    def run_one_round(self) -> str:
        """Pull/train/push once.  Returns "trained", "waiting" (server is
        still collecting the round we already submitted), or "finished"."""
        if self.token is None:
            self.login()
        reply = self._pull()
        if reply.msg_type is MsgType.TRAINING_FINISHED:
            self.finished = True
            self._save_artifacts()
            return "finished"
        if reply.msg_type is not MsgType.MODEL_PAYLOAD:
            raise FedringError(
                f"unexpected pull reply {reply.msg_type.name}: "
                f"{reply.payload.decode(errors='replace')}"
            )
        round_index = reply.round_index
        if round_index < self.next_round:
            return "waiting"

        incoming = deserialize_weights(reply.payload)
        self.model.load_weightset(incoming)  # bit-exact copy of the global
        self._ensure_optimizer()

        _, history = train_local_epochs(
            self.model,
            self.samplers,
            self.cfg.epochs_per_round,
            self.opt,
            self.cfg,
            self.rng,
        )
        for epoch, terms in enumerate(history):
            self._epochs_run += 1
            entry = {"round": round_index, "epoch": epoch, **terms,
                     "lr": cosine_lr(self.opt.step, self.opt)}
            self.metrics.append(entry)
        self._update_local_best(round_index)

        reply = self._push(round_index)
        if reply.msg_type is MsgType.ACK_SUBMISSION:
            self.next_round = round_index + 1
            return "trained"
        if reply.msg_type is MsgType.ROUND_COMPLETE:
            # Our submission arrived after the round closed; realign.
            self.next_round = reply.round_index
            return "trained"
        if reply.msg_type is MsgType.TRAINING_FINISHED:
            self.finished = True
            self._save_artifacts()
            return "finished"
        reason = reply.payload.decode(errors="replace")
        if reply.payload == b"AuthFailure":
            raise AuthFailure(reason)
        if reply.payload == b"DuplicateSubmission":
            raise DuplicateSubmission(reason)
        if reply.payload == b"ShapeMismatch":
            raise ShapeMismatch(f"server rejected submission: {reason}")
        raise FedringError(f"push rejected: {reason}")

    def run(self, poll_interval: float = 0.05) -> SegModel:
        """Full client loop until the server reports training finished."""
        while not self.finished:
            status = self.run_one_round()
            if status == "waiting":
                time.sleep(poll_interval)
        return self.model

    # -- local validation and artifacts ----------------------------------------

    def _update_local_best(self, round_index: int) -> None:
        if not self.val_volumes:
            return
        score = mean_foreground_dice(
            self.model, self.val_volumes, stride=self.cfg.validation_stride
        )
        self.metrics.append(
            {"round": round_index, "val_dice": score}
        )
        if self.best_val_dice is None or score > self.best_val_dice:
            self.best_val_dice = score
            self.local_best = self.model.copy()

    def best_model(self) -> SegModel:
        return self.local_best if self.local_best is not None else self.model

    def _save_artifacts(self) -> None:
        if not self.cfg.out_dir:
            return
        out = Path(self.cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cid = self.cfg.credential.client_id
        write_flw(out / f"{cid}_final.flw", self.model.to_weightset())
        write_flw(out / f"{cid}_local_best.flw", self.best_model().to_weightset())
        with open(out / f"{cid}_metrics.jsonl", "w") as fh:
            for entry in self.metrics:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    @property
    def epochs_run(self) -> int:
        return self._epochs_run


def run_client(cfg: ClientConfig, transport=None) -> FedClient:
    """CLI entry: connect over TCP (unless a transport is supplied), run the
    full loop, write artifacts, and return the client."""
    if transport is None:
        transport = TcpTransport(
            cfg.server_host, cfg.server_port, use_tls=cfg.use_tls, cafile=cfg.tls_cafile
        )
    client = FedClient(cfg, transport)
    try:
        client.run()
    finally:
        transport.close()
    return client
