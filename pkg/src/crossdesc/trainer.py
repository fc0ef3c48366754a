"""Mini-batch SGD training loop over aligned 2D/3D correspondence data.

Supports the dual objective and the two single-domain ablations (image
auto-encoder only / point auto-encoder only). Shuffle order is a pure
function of (seed, epoch); given identical inputs and seed the produced
checkpoint is byte-identical across runs.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .descnet import DualAutoEncoder, NetworkConfig
from .errors import DataError, NumericalError
from .losses import LossWeights, TripletConfig, chamfer_batch, combined_loss, photometric_batch
from .ndtensor import save_checkpoint, sgd_step

MODES = ("dual", "2d_only", "3d_only")


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 250
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.0
    mode: str = "dual"
    checkpoint_every: int = 10
    coords_only_chamfer: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    triplet: TripletConfig = field(default_factory=TripletConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "dual" and self.batch_size < 2:
            raise ValueError("dual mode needs batch_size >= 2")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "learning_rate", "epochs", "batch_size", "seed", "momentum", "mode",
            "checkpoint_every", "coords_only_chamfer")}
        d["weights"] = vars(self.weights).copy()
        d["triplet"] = vars(self.triplet).copy()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "triplet" in d:
            d["triplet"] = TripletConfig(**d["triplet"])
        return cls(**d)


@dataclass
class TrainReport:
    epoch_losses: list[dict]
    wall_clock_s: float
    checkpoint_path: str | None


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, epoch], dtype=np.uint64)))
    return gen.permutation(n)


def train(
    images: np.ndarray | None,
    points: np.ndarray | None,
    net_config: NetworkConfig,
    config: TrainConfig,
    out_dir: str | Path | None = None,
    model: DualAutoEncoder | None = None,
) -> tuple[TrainReport, DualAutoEncoder]:
    """Run SGD for config.epochs; returns the report and the trained model.

    images (M, H, W, 3) and points (M, N, 6) are aligned by index. 2d_only
    needs only images, 3d_only only points; dual needs both. When out_dir is
    given, writes checkpoint.lcdw, log.jsonl, report.json and timing.json.
    """
    if config.mode in ("dual", "2d_only") and (images is None or len(images) == 0):
        raise DataError("training dataset has no image patches")
    if config.mode in ("dual", "3d_only") and (points is None or len(points) == 0):
        raise DataError("training dataset has no point patches")
    if config.mode == "dual" and len(images) != len(points):
        raise DataError(f"aligned dataset required: {len(images)} images vs {len(points)} point patches")
    n_records = len(images) if images is not None else len(points)

    if model is None:
        model = DualAutoEncoder(net_config)
    params = model.params
    min_batch = 2 if config.mode == "dual" else 1

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    ckpt_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = out_dir / "checkpoint.lcdw"
        log_fh = open(out_dir / "log.jsonl", "w")

    t0 = time.perf_counter()
    epoch_losses = []
    try:
        for epoch in range(1, config.epochs + 1):
            perm = _epoch_permutation(config.seed, epoch, n_records)
            sums = {"mse": 0.0, "chamfer": 0.0, "triplet": 0.0, "total": 0.0}
            n_batches = 0
            for start in range(0, n_records, config.batch_size):
                idx = perm[start : start + config.batch_size]
                if len(idx) < min_batch:
                    continue
                parts = _train_step(model, images, points, idx, config)
                if not np.isfinite(parts["total"]):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}"
                    )
                sgd_step(params, config.learning_rate, config.momentum)
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
            if n_batches == 0:
                raise DataError("no usable batches; dataset smaller than the minimum batch")
            entry = {"epoch": epoch}
            entry.update(
                {k: float(sums[k] / n_batches) for k in ("mse", "chamfer", "triplet", "total")}
            )
            epoch_losses.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
            params.epoch = epoch
            if ckpt_path is not None and (
                epoch % config.checkpoint_every == 0 or epoch == config.epochs
            ):
                save_checkpoint(ckpt_path, params)
    finally:
        if log_fh is not None:
            log_fh.close()

    wall = time.perf_counter() - t0
    report = TrainReport(
        epoch_losses=epoch_losses,
        wall_clock_s=wall,
        checkpoint_path=str(ckpt_path) if ckpt_path is not None else None,
    )
    if out_dir is not None:
        # wall-clock goes in a sidecar so report bytes are run-to-run identical
        payload = {"epoch_losses": epoch_losses, "checkpoint": ckpt_path.name}
        (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        (out_dir / "timing.json").write_text(json.dumps({"wall_clock_s": wall}))
    return report, model


def _train_step(model, images, points, idx, config: TrainConfig) -> dict:
    parts = {"mse": 0.0, "chamfer": 0.0, "triplet": 0.0}
    if config.mode == "dual":
        _, parts = combined_loss(
            model,
            images[idx],
            points[idx],
            config.weights,
            config.triplet,
            mode="train",
            coords_only_chamfer=config.coords_only_chamfer,
        )
        return parts
    if config.mode == "2d_only":
        batch = images[idx]
        desc, enc_cache = model.encode_2d_batch(batch, "train")
        recon, dec_cache = model.decode_2d_batch(desc, "train")
        mse, g_recon = photometric_batch(batch, recon)
        gdesc = model.backward_2d_decoder(dec_cache, config.weights.alpha * g_recon)
        model.backward_2d_encoder(enc_cache, gdesc)
        parts["mse"] = mse
        parts["total"] = config.weights.alpha * mse
        return parts
    batch = points[idx]
    desc, enc_cache = model.encode_3d_batch(batch, "train")
    recon, dec_cache = model.decode_3d_batch(desc, "train")
    chamfer, g_recon = chamfer_batch(batch, recon, config.coords_only_chamfer)
    gdesc = model.backward_3d_decoder(dec_cache, config.weights.beta * g_recon)
    model.backward_3d_encoder(enc_cache, gdesc)
    parts["chamfer"] = chamfer
    parts["total"] = config.weights.beta * chamfer
    return parts


def encode_dataset(model: DualAutoEncoder, images: np.ndarray | None,
                   points: np.ndarray | None, batch_size: int = 64):
    """Eval-mode descriptors for every record; returns (desc2d, desc3d)."""
    d2d = d3d = None
    if images is not None and len(images):
        chunks = [
            model.encode_2d_batch(images[i : i + batch_size], "eval")[0]
            for i in range(0, len(images), batch_size)
        ]
        d2d = np.concatenate(chunks, axis=0)
    if points is not None and len(points):
        chunks = [
            model.encode_3d_batch(points[i : i + batch_size], "eval")[0]
            for i in range(0, len(points), batch_size)
        ]
        d3d = np.concatenate(chunks, axis=0)
    return d2d, d3d


def evaluate_matching_accuracy(model: DualAutoEncoder, images: np.ndarray,
                               points: np.ndarray) -> float:
    """Fraction of 2D descriptors whose nearest 3D descriptor (exhaustive
    Euclidean scan) is the aligned true correspondence."""
    if images is None or len(images) == 0 or points is None or len(points) == 0:
        raise DataError("matching accuracy needs a non-empty aligned dataset")
    if len(images) != len(points):
        raise DataError("matching accuracy needs aligned pairs")
    d2d, d3d = encode_dataset(model, images, points)
    a = d2d.astype(np.float64)
    b = d3d.astype(np.float64)
    sq = (a**2).sum(1)[:, None] - 2.0 * (a @ b.T) + (b**2).sum(1)[None, :]
    top1 = sq.argmin(axis=1)
    return float((top1 == np.arange(len(a))).mean())
