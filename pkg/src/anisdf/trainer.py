"""Optimization loop: ray batching, progressive schedule, checkpoints and the CSV log."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import tomli
import toml
import torch

from .appearance import AppearanceConfig
from .autodiff import DTYPE, Adam
from .checkpoint import CheckpointError, read_container, write_container
from .geometry import GeometryConfig
from .hashgrid import GridConfig
from .losses import (
    LossReport,
    LossWeights,
    alpha_entropy_loss,
    curvature_from_normals,
    eikonal_from_gradients,
    orientation_loss,
    random_tangents,
    rgb_loss,
    total_loss,
)
from .model import AniSDFModel, ModelConfig
from .renderer import RenderConfig, render_image, render_rays
from .scenegen import SceneDataset, load_dataset

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "rgb", "eik", "curv", "orient", "alpha", "total", "s")
CHECKPOINT_KIND = "anisdf-train"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dataset: str = ""
    downscale: int = 1
    batch_rays: int = 1024
    steps: int = 20000
    lr: float = 1e-3
    lr_final: float = 1e-4
    seed: int = 0
    fine_warmup: int = 1000
    curvature_boost: float = 10.0
    curvature_boost_frac: float = 0.1
    eikonal_points: int = 0  # 0: same as batch_rays
    near_surface_sigma: float = 0.05
    curvature_epsilon: float = 0.01
    init_sharpness: float = 20.0
    out_dir: str = "runs/default"
    checkpoint_every: int = 5000
    log_every: int = 1
    eval_split: str = "val"
    loss: LossWeights = field(default_factory=LossWeights)
    grid: GridConfig = field(default_factory=GridConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    appearance: AppearanceConfig = field(default_factory=AppearanceConfig)
    render: RenderConfig = field(default_factory=RenderConfig)

    def __post_init__(self):
        for name in ("downscale", "batch_rays", "steps", "checkpoint_every", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.lr_final < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.fine_warmup < 0 or self.eikonal_points < 0:
            raise ConfigError("fine_warmup and eikonal_points must be nonnegative")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.grid, self.geometry, self.appearance, self.init_sharpness)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        return _build(cls, d, "")


_SECTIONS = {"loss": LossWeights, "grid": GridConfig, "geometry": GeometryConfig, "appearance": AppearanceConfig, "render": RenderConfig}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, d: dict, where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for k, v in d.items():
        if k not in known:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if k in _SECTIONS and cls is TrainConfig:
            if not isinstance(v, dict):
                raise ConfigError(f"[{k}] must be a section")
            kw[k] = _build(_SECTIONS[k], v, f"{k}.")
        else:
            kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config{' in [' + where[:-1] + ']' if where else ''}: {e}") from e


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b=value`` with the value parsed as a TOML literal (bare words stay strings)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key.strip().split("."), value


def merge(base: dict, path: list[str], value) -> None:
    node = base
    for p in path[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{'.'.join(path)}: {p} is not a section")
    node[path[-1]] = value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | list[str] | None = None) -> TrainConfig:
    """Defaults < file < overrides (``{"a.b": v}`` or ``["a.b=v"]``)."""
    d = TrainConfig().to_dict()
    if path is not None:
        p = Path(path)
        try:
            doc = tomli.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {p}") from None
        except (OSError, tomli.TOMLDecodeError) as e:
            raise ConfigError(f"cannot parse config {p}: {e}") from e
        _deep_update(d, doc, "")
    items = overrides.items() if isinstance(overrides, dict) else (parse_override(o) for o in overrides or [])
    for k, v in items:
        merge(d, k.split(".") if isinstance(k, str) else list(k), v)
    return TrainConfig.from_dict(d)


def _deep_update(dst: dict, src: dict, where: str) -> None:
    for k, v in src.items():
        if k not in dst:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(v, dict) and isinstance(dst[k], dict):
            _deep_update(dst[k], v, f"{where}{k}.")
        else:
            dst[k] = v


def dump_config(cfg: TrainConfig) -> str:
    return toml.dumps(cfg.to_dict())


def config_hash(cfg: TrainConfig) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def set_threads(n: int | None = None) -> int:
    """Cap worker threads (argument, else ANISDF_THREADS, else leave torch's default)."""
    if n is None:
        env = os.environ.get("ANISDF_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ConfigError("thread count must be >= 1")
        torch.set_num_threads(n)
        try:
            import numba

            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        except (ImportError, ValueError):
            pass
    return torch.get_num_threads()


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr == 0.0:
        return 0.0
    frac = min(1.0, step / cfg.steps)
    return cfg.lr * (cfg.lr_final / cfg.lr) ** frac


def fine_scale(cfg: TrainConfig, step: int) -> float:
    return 1.0 if cfg.fine_warmup == 0 else min(1.0, step / cfg.fine_warmup)


def loss_weights(cfg: TrainConfig, step: int) -> LossWeights:
    if step < cfg.curvature_boost_frac * cfg.steps:
        return dataclasses.replace(cfg.loss, curvature=cfg.loss.curvature * cfg.curvature_boost)
    return cfg.loss


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------


@dataclass
class RayBank:
    """All training pixels; rays are generated on demand from flat pixel ids."""

    c2w: np.ndarray  # (N, 4, 4)
    focal: float
    width: int
    height: int
    target: np.ndarray  # (N*H*W, 3) white-composited

    @classmethod
    def from_dataset(cls, ds: SceneDataset, background=(1.0, 1.0, 1.0)) -> "RayBank":
        h, w = ds.shape
        cam = ds.camera(0)
        c2w = np.stack([f.c2w for f in ds.frames])
        return cls(c2w, cam.focal, w, h, ds.rgb_over(background).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.target)

    def rays(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        per = self.width * self.height
        img, pix = np.divmod(ids, per)
        v, u = np.divmod(pix, self.width)
        dc = np.stack([(u + 0.5 - 0.5 * self.width) / self.focal, -(v + 0.5 - 0.5 * self.height) / self.focal, -np.ones(len(ids))], 1)
        rot = self.c2w[img, :3, :3]
        d = np.einsum("nij,nj->ni", rot, dc)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.c2w[img, :3, 3].copy(), d


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam: dict[str, np.ndarray]
    config: TrainConfig
    step: int
    adam_t: int
    rng_state: dict
    perm: np.ndarray
    cursor: int


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: SceneDataset | None = None):
        self.cfg = cfg
        self.model = AniSDFModel(cfg.model_config(), seed=cfg.seed)
        self.store = self.model.store
        self.opt = Adam(self.store, betas=(0.9, 0.99), eps=1e-15)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        if dataset is None and cfg.dataset:
            dataset = load_dataset(cfg.dataset, "train", downscale=cfg.downscale)
        self.dataset = dataset
        self.bank = RayBank.from_dataset(dataset, cfg.render.background) if dataset is not None else None
        self.perm = np.zeros(0, dtype=np.int64)
        self.cursor = 0
        self.last_report: LossReport | None = None

    # -- batching ----------------------------------------------------------

    def next_batch(self, n: int | None = None) -> np.ndarray:
        """Next ray ids: a fresh permutation of all pixels per epoch, no replacement within one."""
        n = n or self.cfg.batch_rays
        total = len(self.bank)
        out = []
        while n > 0:
            if self.cursor >= len(self.perm):
                self.perm = self.rng.permutation(total)
                self.cursor = 0
            take = min(n, len(self.perm) - self.cursor)
            out.append(self.perm[self.cursor : self.cursor + take])
            self.cursor += take
            n -= take
        return np.concatenate(out)

    def regularizer_points(self, samples: torch.Tensor, count: int) -> torch.Tensor:
        """Half uniform in the AABB, half Gaussian around ray sample positions."""
        lo = np.asarray(self.cfg.grid.aabb_min)
        hi = np.asarray(self.cfg.grid.aabb_max)
        n_uni = count // 2
        uni = self.rng.uniform(lo, hi, (n_uni, 3))
        pool = samples.detach().reshape(-1, 3).numpy()
        if len(pool) == 0:
            near = self.rng.uniform(lo, hi, (count - n_uni, 3))
        else:
            pick = self.rng.integers(0, len(pool), count - n_uni)
            near = pool[pick] + self.rng.normal(0.0, self.cfg.near_surface_sigma, (count - n_uni, 3))
            near = np.clip(near, lo, hi)
        return torch.as_tensor(np.concatenate([uni, near]), dtype=DTYPE)

    # -- one step ------------------------------------------------------------

    def compute_losses(self, o: np.ndarray, d: np.ndarray, gt: np.ndarray, step: int):
        cfg = self.cfg
        field_ = self.model.field
        field_.fine_scale = fine_scale(cfg, step)
        out = render_rays(self.model, o, d, cfg.render, self.rng, create_graph=True)
        target = torch.as_tensor(gt, dtype=DTYPE)
        rgb = rgb_loss(out.color, target)
        zero = torch.zeros((), dtype=DTYPE)
        if out.samples is not None:
            idx = out.aux.get("ray_index")
            dirs = torch.as_tensor(d, dtype=DTYPE)
            dirs = dirs[idx] if idx is not None else dirs
            orient = orientation_loss(out.weights, out.aux["normals"], dirs)
            alpha = alpha_entropy_loss(out.samples.alpha)
            xs = out.samples.origins[:, None] + out.samples.dirs[:, None] * out.samples.t[..., None]
        else:
            orient, alpha = zero, zero
            xs = torch.zeros(0, 3, dtype=DTYPE)
        pts = self.regularizer_points(xs, cfg.eikonal_points or cfg.batch_rays)
        s0 = field_.sample(pts)
        eik = eikonal_from_gradients(s0.gradient)
        n0 = s0.normal
        tau = random_tangents(n0, self.rng)
        n1 = field_.sample(pts + cfg.curvature_epsilon * tau).normal
        curv = curvature_from_normals(n0, n1)
        return total_loss(rgb, eik, curv, orient, alpha, loss_weights(cfg, step))

    def train_step(self) -> LossReport:
        if self.bank is None:
            raise RuntimeError("no dataset loaded")
        ids = self.next_batch()
        o, d = self.bank.rays(ids)
        total, report = self.compute_losses(o, d, self.bank.target[ids], self.step)
        if not math.isfinite(report.total):
            path = self.dump_diagnostics(report)
            raise TrainingDiverged(f"non-finite loss at step {self.step}; diagnostics in {path}")
        names = self.store.ids()
        grads = torch.autograd.grad(total, [self.store[k] for k in names], allow_unused=True)
        self.opt.step(dict(zip(names, grads)), learning_rate(self.cfg, self.step))
        self.step += 1
        self.last_report = report
        return report

    def dump_diagnostics(self, report: LossReport) -> Path:
        out = Path(self.cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        bad = [k for k, v in self.store.tensors().items() if not bool(torch.isfinite(v).all())]
        doc = {
            "step": self.step,
            "loss": {k: repr(v) for k, v in report.as_dict().items()},
            "lr": learning_rate(self.cfg, self.step),
            "sharpness": float(self.model.sharpness().detach()),
            "nonfinite_params": bad,
            "param_max_abs": {k: float(v.detach().abs().max()) for k, v in self.store.tensors().items()},
        }
        path = out / f"diverged_step{self.step}.json"
        path.write_text(json.dumps(doc, indent=2))
        return path

    # -- checkpoints ---------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.store.snapshot(),
            self.opt.state(),
            self.cfg,
            self.step,
            self.opt.t,
            self.rng.bit_generator.state,
            self.perm.copy(),
            self.cursor,
        )

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.checkpoint())

    def restore(self, ck: Checkpoint) -> None:
        if ck.config.grid != self.cfg.grid:
            raise CheckpointError(f"grid config mismatch: checkpoint {ck.config.grid} vs model {self.cfg.grid}")
        if ck.config.geometry != self.cfg.geometry or ck.config.appearance != self.cfg.appearance:
            raise CheckpointError("network config mismatch between checkpoint and model")
        try:
            self.store.load_snapshot(ck.params)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"checkpoint parameters do not fit the model: {e}") from e
        self.opt.load_state(ck.adam, ck.adam_t)
        self.rng.bit_generator.state = ck.rng_state
        self.step = ck.step
        self.perm = ck.perm.copy()
        self.cursor = ck.cursor
        self.model.field.fine_scale = fine_scale(self.cfg, self.step)

    @classmethod
    def from_checkpoint(cls, path: str | Path, dataset: SceneDataset | None = None, **overrides) -> "Trainer":
        ck = load_checkpoint(path)
        cfg = dataclasses.replace(ck.config, **overrides) if overrides else ck.config
        tr = cls(cfg, dataset)
        tr.restore(ck)
        return tr


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    tensors = {f"param/{k}": v for k, v in ck.params.items()}
    tensors.update(ck.adam)
    tensors["trainer/perm"] = ck.perm.astype(np.float64)
    meta = {
        "kind": CHECKPOINT_KIND,
        "config": ck.config.to_dict(),
        "step": ck.step,
        "adam_t": ck.adam_t,
        "rng_state": ck.rng_state,
        "cursor": ck.cursor,
    }
    write_container(path, tensors, meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    tensors, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path}: not a training checkpoint (kind={meta.get('kind')!r})")
    try:
        cfg = TrainConfig.from_dict(meta["config"])
        params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
        adam = {k: v for k, v in tensors.items() if k.startswith("adam.")}
        perm = tensors["trainer/perm"].astype(np.int64)
        return Checkpoint(params, adam, cfg, int(meta["step"]), int(meta["adam_t"]), meta["rng_state"], perm, int(meta["cursor"]))
    except (KeyError, ConfigError) as e:
        raise CheckpointError(f"{path}: incomplete checkpoint ({e})") from e


def load_model(path: str | Path) -> tuple[AniSDFModel, TrainConfig]:
    """Model with checkpoint weights, fine branch at the checkpoint's schedule value."""
    ck = load_checkpoint(path)
    model = AniSDFModel(ck.config.model_config(), seed=ck.config.seed)
    model.store.load_snapshot(ck.params)
    model.field.fine_scale = fine_scale(ck.config, ck.step)
    return model, ck.config


# ---------------------------------------------------------------------------
# full run
# ---------------------------------------------------------------------------


class CSVLog:
    """Append-only training log; reopening truncates rows past ``resume_step``."""

    def __init__(self, path: str | Path, resume_step: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_step is not None and self.path.exists():
            with self.path.open(newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            keep = [r for r in rows if int(r[0]) <= resume_step]
            self._write([list(LOG_COLUMNS)] + keep, "w")
        else:
            self._write([list(LOG_COLUMNS)], "w")

    def _write(self, rows, mode):
        with self.path.open(mode, newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(rows)

    def append(self, step: int, report: LossReport, s: float) -> None:
        r = report
        vals = [r.rgb, r.eik, r.curv, r.orient, r.alpha, r.total, s]
        self._write([[str(step)] + [repr(float(v)) for v in vals]], "a")


def read_log(path: str | Path) -> list[dict[str, float]]:
    with Path(path).open(newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    steps: int
    seconds: float
    final: LossReport | None
    metrics: dict[str, float] = field(default_factory=dict)
    cpu_seconds: float = 0.0  # process time; unaffected by other jobs sharing the core


def evaluate_split(model: AniSDFModel, root: str | Path, split: str, cfg: RenderConfig, downscale: int = 1) -> dict[str, float]:
    from .evalkit import psnr

    ds = load_dataset(root, split, downscale=downscale)
    gt = ds.rgb_over(cfg.background)
    scores = []
    with torch.no_grad():
        for i in range(len(ds.frames)):
            img = render_image(model, ds.camera(i), cfg)["rgb"]
            scores.append(psnr(np.clip(img, 0, 1), gt[i]))
    return {"psnr": float(np.mean(scores)) if scores else float("nan"), "n_images": len(scores)}


def train(cfg: TrainConfig, resume: str | Path | None = None, dataset: SceneDataset | None = None, progress_every: int = 500) -> TrainResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = Trainer.from_checkpoint(resume, dataset) if resume else Trainer(cfg, dataset)
    if resume and tr.cfg.to_dict() != cfg.to_dict():
        log.info("resuming with the checkpoint's config; the passed config is ignored")
    cfg = tr.cfg
    log_path = out / "train_log.csv"
    logger = CSVLog(log_path, resume_step=tr.step if resume else None)
    ckpt = out / "checkpoint.ckpt"
    t0, c0 = time.time(), time.process_time()
    while tr.step < cfg.steps:
        report = tr.train_step()
        if tr.step % cfg.log_every == 0 or tr.step == cfg.steps:
            logger.append(tr.step, report, float(tr.model.sharpness().detach()))
        if tr.step % cfg.checkpoint_every == 0 and tr.step < cfg.steps:
            tr.save(ckpt)
        if progress_every and tr.step % progress_every == 0:
            el = time.time() - t0
            log.info("step %d/%d loss %.5f rgb %.5f s %.1f (%.2fs/step)", tr.step, cfg.steps, report.total, report.rgb, float(tr.model.sharpness().detach()), el / max(1, tr.step))
    tr.save(ckpt)
    result = TrainResult(ckpt, log_path, tr.step, time.time() - t0, tr.last_report, cpu_seconds=time.process_time() - c0)
    if cfg.eval_split and cfg.dataset and (Path(cfg.dataset) / f"transforms_{cfg.eval_split}.json").exists():
        tr.model.field.fine_scale = fine_scale(cfg, tr.step)
        result.metrics = {f"{cfg.eval_split}_{k}": v for k, v in evaluate_split(tr.model, cfg.dataset, cfg.eval_split, cfg.render, cfg.downscale).items()}
    return result
