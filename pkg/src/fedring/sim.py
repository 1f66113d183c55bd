"""Deterministic in-process reproduction of the two-client experiment.

Generates two synthetic heterogeneous datasets (one hospital sees healthy
organs on a bright-contrast protocol, the other sees tumor-bearing organs
on a dim protocol with thick slices), trains standalone baselines and a
two-client federated session over an in-memory transport, evaluates the
five resulting models on both held-out test sets, and emits the comparison
table plus checkpoints and logs.

Everything is a pure function of the plan's seeds: rerunning a plan
reproduces table1.csv and global.flw byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import AggregationMode, AggregationPolicy
from .client import ClientConfig, FedClient, train_local_epochs
from .errors import InvariantViolation
from .inference import dice_score, mean_foreground_dice, predict_volume
from .ml.losses import LossWeights
from .ml.model import ModelConfig, SegModel
from .ml.optim import OptimizerState
from .preprocess import PatchSpec, Volume, VolumeSampler, preprocess_volume, write_vol
from .protocol import Credential, write_flw
from .server import FedServer, ServerConfig
from .transport import InMemoryTransport

log = logging.getLogger(__name__)

__all__ = [
    "OrganSpec",
    "TumorSpec",
    "PhantomSpec",
    "ExperimentPlan",
    "ExperimentResult",
    "MetricsTable",
    "generate_phantoms",
    "dice_score",
    "predict_volume",
    "evaluate_models",
    "run_experiment",
]

MODEL_ROWS = ("C1_baseline", "C2_baseline", "C1_FL_local", "C2_FL_local", "FL_global")
COLUMNS = ("c1_pancreas", "c2_pancreas", "c2_tumor")


# -- phantom generation ----------------------------------------------------------

@dataclass(frozen=True)
class OrganSpec:
    radii_mm: tuple[float, float] = (8.0, 13.0)
    hu_mean: float = 80.0
    hu_std: float = 8.0
    # half-width of the uniform per-volume shift of the organ's mean
    # intensity (scanner/protocol variation between patients)
    hu_jitter: float = 0.0
    # amplitude of the smooth per-volume boundary deformation (0 gives a
    # plain ellipsoid); both sites draw from the same shape family, which
    # is what makes cross-site collaboration pay off at desk scale
    wobble: float = 0.0
    wobble_wavelength_mm: float = 14.0


@dataclass(frozen=True)
class TumorSpec:
    radius_mm: tuple[float, float] = (3.0, 5.0)
    hu_offset: float = 100.0
    hu_std: float = 8.0


@dataclass(frozen=True)
class PhantomSpec:
    n_volumes: int = 20
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organ: OrganSpec = field(default_factory=OrganSpec)
    tumor: TumorSpec | None = None
    bg_hu_mean: float = -80.0
    bg_noise_std: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if self.n_volumes < 1:
            raise InvariantViolation("n_volumes must be >= 1")
        extent = [
            (n - 1) * s for n, s in zip(self.dims, self.spacing_mm)
        ]
        r_hi = self.organ.radii_mm[1]
        if any(e <= 2 * (r_hi + 1.0) for e in extent):
            raise InvariantViolation(
                f"volume extent {extent} mm too small for organ radius {r_hi} mm"
            )
        if self.tumor is not None:
            if self.organ.radii_mm[0] < self.tumor.radius_mm[1] + 1.0:
                raise InvariantViolation(
                    "smallest organ radius must exceed the largest tumor radius"
                )


def _voxel_positions_mm(dims, spacing):
    return [np.arange(n) * s for n, s in zip(dims, spacing)]


def _wobble_field(rng, gx, gy, gz, wavelength: float, n_modes: int = 4):
    """Smooth random field in [-1, 1]-ish: a few random plane-wave cosines."""
    field = np.zeros(np.broadcast_shapes(gx.shape, gy.shape, gz.shape))
    for _ in range(n_modes):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        freq = 2.0 * np.pi / (wavelength * rng.uniform(0.7, 1.4))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        field += np.cos(
            freq * (direction[0] * gx + direction[1] * gy + direction[2] * gz) + phase
        )
    return field / n_modes


def generate_phantoms(spec: PhantomSpec) -> list[Volume]:
    """Synthesize labeled volumes: a noisy background, one ellipsoidal
    organ (label 1), and optionally one spherical tumor embedded fully
    inside the organ (label 2).  Deterministic per spec.seed."""
    rng = np.random.default_rng(spec.seed)
    xs, ys, zs = _voxel_positions_mm(spec.dims, spec.spacing_mm)
    gx = xs[:, None, None]
    gy = ys[None, :, None]
    gz = zs[None, None, :]
    extent = [(n - 1) * s for n, s in zip(spec.dims, spec.spacing_mm)]

    volumes = []
    for _ in range(spec.n_volumes):
        radii = rng.uniform(*spec.organ.radii_mm, size=3)
        margin = 1.0
        center = np.array(
            [rng.uniform(r + margin, e - r - margin) for r, e in zip(radii, extent)]
        )
        quad = (
            ((gx - center[0]) / radii[0]) ** 2
            + ((gy - center[1]) / radii[1]) ** 2
            + ((gz - center[2]) / radii[2]) ** 2
        )
        if spec.organ.wobble > 0.0:
            bumps = _wobble_field(rng, gx, gy, gz, spec.organ.wobble_wavelength_mm)
            organ = (quad + spec.organ.wobble * bumps) <= 1.0
        else:
            organ = quad <= 1.0

        organ_hu = spec.organ.hu_mean + rng.uniform(-1.0, 1.0) * spec.organ.hu_jitter
        intensities = rng.normal(spec.bg_hu_mean, spec.bg_noise_std, spec.dims)
        organ_field = rng.normal(organ_hu, spec.organ.hu_std, spec.dims)
        intensities[organ] = organ_field[organ]
        labels = organ.astype(np.uint8)

        if spec.tumor is not None:
            tr = rng.uniform(*spec.tumor.radius_mm)
            # Aim the tumor center at the organ's safely-interior core, then
            # clip the sphere to the actual (possibly wobbled) organ mask so
            # the containment invariant holds exactly.
            core = float(radii.min()) * np.sqrt(max(0.05, 1.0 - spec.organ.wobble))
            reach = max(core - tr, 0.5)
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            t_center = center + direction * (reach * rng.random() ** (1.0 / 3.0))
            tumor = (
                (gx - t_center[0]) ** 2
                + (gy - t_center[1]) ** 2
                + (gz - t_center[2]) ** 2
            ) <= tr * tr
            tumor &= organ
            tumor_field = rng.normal(
                organ_hu + spec.tumor.hu_offset, spec.tumor.hu_std, spec.dims
            )
            intensities[tumor] = tumor_field[tumor]
            labels[tumor] = 2
            if not tumor.any():
                raise InvariantViolation("generated tumor contains no voxels")
        if not organ.any():
            raise InvariantViolation("generated organ contains no voxels")
        volumes.append(Volume(intensities, spec.spacing_mm, labels))
    return volumes


# -- metrics table -----------------------------------------------------------------

@dataclass
class MetricsTable:
    """Per-model Dice cells; the average columns and the bottom row are
    always recomputed from the cells, never stored."""

    cells: dict[str, dict[str, float]]
    n_c1_test: int
    n_c2_test: int

    def pancreas_average(self, row: str) -> float:
        c = self.cells[row]
        n1, n2 = self.n_c1_test, self.n_c2_test
        return (c["c1_pancreas"] * n1 + c["c2_pancreas"] * n2) / (n1 + n2)

    def overall_average(self, row: str) -> float:
        return 0.5 * (self.pancreas_average(row) + self.cells[row]["c2_tumor"])

    def column_average(self, col: str) -> float:
        return float(np.mean([self.cells[r][col] for r in MODEL_ROWS]))

    def to_csv(self) -> str:
        lines = ["model,c1_pancreas,c2_pancreas,c2_tumor,pancreas_average,average"]
        for row in MODEL_ROWS:
            c = self.cells[row]
            lines.append(
                f"{row},{c['c1_pancreas']:.6f},{c['c2_pancreas']:.6f},"
                f"{c['c2_tumor']:.6f},{self.pancreas_average(row):.6f},"
                f"{self.overall_average(row):.6f}"
            )
        pan = float(np.mean([self.pancreas_average(r) for r in MODEL_ROWS]))
        avg = float(np.mean([self.overall_average(r) for r in MODEL_ROWS]))
        lines.append(
            f"Average,{self.column_average('c1_pancreas'):.6f},"
            f"{self.column_average('c2_pancreas'):.6f},"
            f"{self.column_average('c2_tumor'):.6f},{pan:.6f},{avg:.6f}"
        )
        return "\n".join(lines) + "\n"


def evaluate_models(
    models: dict[str, SegModel],
    c1_test: list[Volume],
    c2_test: list[Volume],
    stride: tuple[int, int, int] | None = None,
) -> MetricsTable:
    cells = {}
    for name, model in models.items():
        c1_scores = [
            dice_score(predict_volume(model, v, stride=stride).labels, v.labels, 1)
            for v in c1_test
        ]
        c2_pan, c2_tum = [], []
        for v in c2_test:
            pred = predict_volume(model, v, stride=stride)
            c2_pan.append(dice_score(pred.labels, v.labels, 1))
            c2_tum.append(dice_score(pred.labels, v.labels, 2))
        cells[name] = {
            "c1_pancreas": float(np.mean(c1_scores)),
            "c2_pancreas": float(np.mean(c2_pan)),
            "c2_tumor": float(np.mean(c2_tum)),
        }
    return MetricsTable(cells, len(c1_test), len(c2_test))


# -- experiment plan -----------------------------------------------------------------

def _desk_c1_spec(seed: int) -> PhantomSpec:
    return PhantomSpec(
        n_volumes=20,
        dims=(48, 48, 48),
        spacing_mm=(1.0, 1.0, 1.0),
        organ=OrganSpec(radii_mm=(8.0, 13.0), hu_mean=80.0, hu_std=8.0),
        tumor=None,
        seed=seed,
    )


def _desk_c2_spec(seed: int) -> PhantomSpec:
    # Thick 5 mm slices, dimmer organ contrast, and an enhancing tumor
    # whose intensity matches the other site's organ protocol.
    return PhantomSpec(
        n_volumes=20,
        dims=(48, 48, 10),
        spacing_mm=(1.0, 1.0, 5.0),
        organ=OrganSpec(radii_mm=(8.0, 13.0), hu_mean=-20.0, hu_std=8.0),
        tumor=TumorSpec(radius_mm=(3.0, 5.0), hu_offset=100.0, hu_std=8.0),
        seed=seed,
    )


@dataclass
class ExperimentPlan:
    c1_spec: PhantomSpec
    c2_spec: PhantomSpec
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    rounds: int = 10
    epochs_per_round: int = 2
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(
            in_channels=1, n_classes=3, base_filters=4, n_levels=3,
            latent_dim=128, patch_size=(16, 16, 16),
        )
    )
    batch_size: int = 2
    patches_per_epoch: int = 24
    lr_max: float = 3e-2
    lr_min: float = 3e-3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    aggregation_mode: AggregationMode = AggregationMode.SAMPLE_WEIGHTED
    fg_fraction: float = 0.5
    validation_stride: tuple[int, int, int] | None = None  # None: patch-sized
    eval_stride: tuple[int, int, int] | None = None  # None: half-patch
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9 or any(f <= 0 for f in self.split):
            raise InvariantViolation(f"split fractions {self.split} must be positive and sum to 1")
        if self.rounds < 1:
            raise InvariantViolation("rounds must be >= 1")

    @classmethod
    def default_plan(cls, seed: int = 0) -> "ExperimentPlan":
        return cls(
            c1_spec=_desk_c1_spec(seed * 1000 + 1),
            c2_spec=_desk_c2_spec(seed * 1000 + 2),
            seed=seed,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        d = dict(d)
        seed = d.get("seed", 0)
        for key, maker in (("c1_spec", _desk_c1_spec), ("c2_spec", _desk_c2_spec)):
            if key in d and d[key] is not None:
                s = dict(d[key])
                if "organ" in s:
                    s["organ"] = OrganSpec(**{
                        k: tuple(v) if k == "radii_mm" else v for k, v in s["organ"].items()
                    })
                if s.get("tumor") is not None:
                    s["tumor"] = TumorSpec(**{
                        k: tuple(v) if k == "radius_mm" else v for k, v in s["tumor"].items()
                    })
                for t in ("dims", "spacing_mm"):
                    if t in s:
                        s[t] = tuple(s[t])
                d[key] = PhantomSpec(**s)
            else:
                d[key] = maker(seed * 1000 + (1 if key == "c1_spec" else 2))
        if "model" in d and d["model"] is not None:
            m = dict(d["model"])
            if "patch_size" in m:
                m["patch_size"] = tuple(m["patch_size"])
            d["model"] = ModelConfig(**m)
        if "loss_weights" in d:
            lw = d["loss_weights"]
            d["loss_weights"] = LossWeights(lw.get("w_kl", 0.2), lw.get("w_recon", 0.3))
        if "aggregation_mode" in d:
            d["aggregation_mode"] = AggregationMode(d["aggregation_mode"])
        if "split" in d:
            d["split"] = tuple(d["split"])
        for t in ("validation_stride", "eval_stride"):
            if d.get(t) is not None:
                d[t] = tuple(d[t])
        return cls(**d)

    @classmethod
    def from_json_file(cls, path: str | Path) -> "ExperimentPlan":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ExperimentResult:
    table: MetricsTable
    models: dict[str, SegModel]
    traces: dict[str, list[tuple[str, bytes]]]
    round_log: list[dict]
    local_best_scores: dict[str, float | None]


# -- experiment execution ---------------------------------------------------------------

def _split(volumes: list[Volume], fractions) -> tuple[list, list, list]:
    n = len(volumes)
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    n_train = max(1, min(n_train, n - 2))
    n_val = max(1, min(n_val, n - n_train - 1))
    return (
        volumes[:n_train],
        volumes[n_train : n_train + n_val],
        volumes[n_train + n_val :],
    )


def _client_config(plan: ExperimentPlan, client_id: str, secret: bytes, seed: int,
                   total_steps: int) -> ClientConfig:
    patch_spec = PatchSpec(plan.model.patch_size, plan.fg_fraction)
    return ClientConfig(
        credential=Credential(client_id, secret),
        epochs_per_round=plan.epochs_per_round,
        batch_size=plan.batch_size,
        patch_spec=patch_spec,
        loss_weights=plan.loss_weights,
        seed=seed,
        model=plan.model,
        patches_per_epoch=plan.patches_per_epoch,
        lr_max=plan.lr_max,
        lr_min=plan.lr_min,
        total_steps=total_steps,
        validation_stride=plan.validation_stride or plan.model.patch_size,
    )


def _train_standalone(plan: ExperimentPlan, volumes: list[Volume], seed: int,
                      total_epochs: int, total_steps: int) -> SegModel:
    cfg = _client_config(plan, "standalone", b"local-only-no-net", seed, total_steps)
    model = SegModel.create(plan.model, seed=plan.seed + 7)  # same init as the server
    opt = OptimizerState.for_weights(
        model.weights, lr_max=plan.lr_max, lr_min=plan.lr_min, total_steps=total_steps
    )
    samplers = [VolumeSampler(v, cfg.patch_spec) for v in volumes]
    rng = np.random.default_rng(seed)
    train_local_epochs(model, samplers, total_epochs, opt, cfg, rng)
    return model


def run_experiment(plan: ExperimentPlan, out_dir: str | Path | None = None) -> ExperimentResult:
    """Execute standalone baselines and the two-client federated session,
    evaluate all five models on both test sets, and write artifacts."""
    c1_raw = generate_phantoms(plan.c1_spec)
    c2_raw = generate_phantoms(plan.c2_spec)
    c1 = [preprocess_volume(v) for v in c1_raw]
    c2 = [preprocess_volume(v) for v in c2_raw]
    c1_train, c1_val, c1_test = _split(c1, plan.split)
    c2_train, c2_val, c2_test = _split(c2, plan.split)
    log.info(
        "datasets ready: c1 %d/%d/%d, c2 %d/%d/%d (train/val/test)",
        len(c1_train), len(c1_val), len(c1_test),
        len(c2_train), len(c2_val), len(c2_test),
    )

    steps_per_epoch = int(np.ceil(plan.patches_per_epoch / plan.batch_size))
    total_epochs = plan.rounds * plan.epochs_per_round
    total_steps = total_epochs * steps_per_epoch

    log.info("training standalone baselines (%d epochs each)", total_epochs)
    c1_baseline = _train_standalone(plan, c1_train, plan.seed + 11, total_epochs, total_steps)
    c2_baseline = _train_standalone(plan, c2_train, plan.seed + 22, total_epochs, total_steps)

    # Federated session over the in-memory transport.  The server is
    # constructed with no data directory of any kind.
    creds = [
        Credential("c1", b"c1-training-secret-0001"),
        Credential("c2", b"c2-training-secret-0002"),
    ]
    server_out = str(Path(out_dir)) if out_dir else None
    server_cfg = ServerConfig(
        max_clients=2,
        min_clients=2,
        total_rounds=plan.rounds,
        accepted_credentials=creds,
        aggregation=AggregationPolicy(plan.aggregation_mode, min_clients=2),
        model=plan.model,
        init_seed=plan.seed + 7,
        out_dir=server_out,
    )
    server = FedServer(server_cfg, token_rng=np.random.default_rng(plan.seed + 9))
    transports = {"c1": InMemoryTransport(server), "c2": InMemoryTransport(server)}
    clients = {
        "c1": FedClient(
            _client_config(plan, "c1", creds[0].secret, plan.seed + 101, total_steps),
            transports["c1"], train_volumes=c1_train, val_volumes=c1_val,
        ),
        "c2": FedClient(
            _client_config(plan, "c2", creds[1].secret, plan.seed + 202, total_steps),
            transports["c2"], train_volumes=c2_train, val_volumes=c2_val,
        ),
    }

    log.info("running federated session: %d rounds x %d epochs", plan.rounds, plan.epochs_per_round)
    for client in clients.values():
        client.login()
    done = {cid: False for cid in clients}
    while not all(done.values()):
        for cid, client in clients.items():
            if not done[cid]:
                done[cid] = client.run_one_round() == "finished"

    models = {
        "C1_baseline": c1_baseline,
        "C2_baseline": c2_baseline,
        "C1_FL_local": clients["c1"].best_model(),
        "C2_FL_local": clients["c2"].best_model(),
        "FL_global": SegModel.from_weightset(plan.model, server.state.global_weights),
    }
    log.info("evaluating the five models on both test sets")
    table = evaluate_models(models, c1_test, c2_test, stride=plan.eval_stride)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table1.csv").write_text(table.to_csv())
        (out / "model_config.json").write_text(
            json.dumps(plan.model.__dict__, default=list, sort_keys=True, indent=2) + "\n"
        )
        for name, model in models.items():
            write_flw(out / f"{name.lower()}.flw", model.to_weightset())
        for cid, client in clients.items():
            with open(out / f"{cid}_metrics.jsonl", "w") as fh:
                for entry in client.metrics:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
        test_dir = out / "test_volumes"
        for cid, vols in (("c1", c1_test), ("c2", c2_test)):
            (test_dir / cid).mkdir(parents=True, exist_ok=True)
            for i, v in enumerate(vols):
                write_vol(test_dir / cid / f"{cid}_test_{i:03d}.vol", v)

    return ExperimentResult(
        table=table,
        models=models,
        traces={cid: t.trace for cid, t in transports.items()},
        round_log=server.round_log,
        local_best_scores={cid: c.best_val_dice for cid, c in clients.items()},
    )
