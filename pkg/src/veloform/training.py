"""Auto-decoder optimisation of the implicit field, the velocity field and
one latent code per frame.

Each step draws a batch for one pair (round-robin over pairs), evaluates
the weighted objective and takes one Adam step on both networks and on the
two latent codes of that pair only.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint
from .errors import ConfigError, GeometryError, NumericalError
from .fields import FieldArch, ImplicitField, LatentTable, VelocityField
from .geometry import AffineTransform, AxisAlignedDomain, CorrespondencePair, PointCloud, normalize_to_domain
from .integrate import IntegratorConfig
from .losses import LossWeights, SampleBatch, compute_terms, total_loss

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.vfm"
LOG_NAME = "train_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    time_steps: int = 8
    epochs: int = 1
    steps_per_pair: int = 1000
    lr_fields: float = 1e-4
    lr_latents: float = 1e-3
    surface_batch: int = 1024
    volume_batch: int = 512
    match_batch: int = 512
    latent_dim: int = 128
    seed: int = 0
    checkpoint_interval: int = 500
    hidden_layers: int = 4
    hidden_units: int = 256
    first_omega: float = 30.0
    hidden_omega: float = 30.0
    velocity_first_omega: float = 30.0
    integrator: str = "rk4"
    integrator_substeps: int = 16
    laplacian_mode: str = "exact"
    laplacian_points: int = 128
    fd_step: float = 1e-3
    latent_reg: float = 1e-4
    near_surface_sigma: float = 0.05
    sequence: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.time_steps < 1:
            raise ConfigError("time_steps must be >= 1")
        for key in (
            "epochs", "steps_per_pair", "surface_batch", "volume_batch", "match_batch",
            "latent_dim", "checkpoint_interval", "hidden_layers", "hidden_units",
            "integrator_substeps", "laplacian_points",
        ):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if self.laplacian_mode not in ("exact", "finite_difference"):
            raise ConfigError(f"laplacian_mode must be 'exact' or 'finite_difference'")
        IntegratorConfig(self.integrator, self.integrator_substeps)

    @property
    def integrator_config(self) -> IntegratorConfig:
        return IntegratorConfig(self.integrator, self.integrator_substeps)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.time_steps + 1, dtype=np.float64) / self.time_steps

    def phi_arch(self) -> FieldArch:
        return FieldArch(self.hidden_layers, self.hidden_units, self.first_omega, self.hidden_omega)

    def velocity_arch(self) -> FieldArch:
        return FieldArch(
            self.hidden_layers, self.hidden_units, self.velocity_first_omega, self.hidden_omega
        )

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "weights"}
        out.update(self.weights.to_dict())
        return out

    @classmethod
    def keys(cls) -> list[str]:
        own = [f.name for f in dataclasses.fields(cls) if f.name != "weights"]
        return own + [f.name for f in dataclasses.fields(LossWeights)]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a flat key-value mapping; unknown keys are an error."""
        own = {f.name: f for f in dataclasses.fields(cls) if f.name != "weights"}
        wkeys = {f.name: f for f in dataclasses.fields(LossWeights)}
        kw, wkw = {}, {}
        for key, value in d.items():
            if key in own:
                kw[key] = _coerce(key, value, own[key].type)
            elif key in wkeys:
                wkw[key] = _coerce(key, value, "float")
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(weights=LossWeights(**wkw), **kw)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


def _coerce(key, value, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if typ == "int":
            f = float(value)
            if f != int(f):
                raise ValueError(value)
            return int(f)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value for {key!r}: {value!r}") from exc


@dataclass
class PairDataset:
    """Training pairs in normalised coordinates plus the normalising transform."""

    pairs: list[CorrespondencePair]
    sequence: bool = False
    domain: AxisAlignedDomain = field(default_factory=AxisAlignedDomain)
    transform: AffineTransform = field(default_factory=AffineTransform)

    def __post_init__(self):
        if not self.pairs:
            raise GeometryError("dataset has no pairs")
        if self.sequence:
            for k, p in enumerate(self.pairs):
                if p.target.frame_id != p.source.frame_id + 1:
                    raise GeometryError(
                        f"sequence pair {k} does not chain consecutive frames "
                        f"({p.source.frame_id} -> {p.target.frame_id})"
                    )

    @classmethod
    def from_pairs(
        cls,
        pairs: list[CorrespondencePair],
        sequence: bool = False,
        domain: AxisAlignedDomain = AxisAlignedDomain(),
        normalize: bool = True,
    ) -> "PairDataset":
        if not normalize:
            return cls(list(pairs), sequence, domain)
        clouds = {}
        for p in pairs:
            clouds.setdefault(p.source.frame_id, p.source)
            clouds.setdefault(p.target.frame_id, p.target)
        ids = sorted(clouds)
        normed, tf = normalize_to_domain([clouds[i] for i in ids], domain)
        lookup = dict(zip(ids, normed))
        out = [
            CorrespondencePair(
                lookup[p.source.frame_id], lookup[p.target.frame_id], p.matches, p.unsupervised
            )
            for p in pairs
        ]
        return cls(out, sequence, domain, tf)

    @property
    def frame_ids(self) -> list[int]:
        ids = set()
        for p in self.pairs:
            ids.update((p.source.frame_id, p.target.frame_id))
        return sorted(ids)

    def pair_frames(self) -> list[tuple[int, int]]:
        return [(p.source.frame_id, p.target.frame_id) for p in self.pairs]


def init_latents(frame_ids, m: int, seed: int) -> LatentTable:
    """i.i.d. normal codes scaled by ``1/sqrt(m)``, drawn in sorted frame order."""
    gen = torch.Generator().manual_seed(int(seed))
    table = LatentTable(m=m)
    for fid in sorted(set(int(f) for f in frame_ids)):
        table.set(fid, torch.randn(m, generator=gen) / math.sqrt(m))
    return table


@dataclass
class TrainState:
    phi: ImplicitField
    velocity: VelocityField
    latents: LatentTable
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    pairs: list[tuple[int, int]]
    domain: AxisAlignedDomain
    transform: AffineTransform
    step: int = 0
    loss_ema: float | None = None
    history: list[dict] = field(default_factory=list)
    sources: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def integrator(self) -> IntegratorConfig:
        return self.config.integrator_config

    def pair_code(self, pair_id: int) -> torch.Tensor:
        if not 0 <= pair_id < len(self.pairs):
            raise KeyError(
                f"unknown pair id {pair_id}; known ids: {list(range(len(self.pairs)))}"
            )
        s, t = self.pairs[pair_id]
        return self.latents.pair_code(s, t)


def _make_optimizer(phi, velocity, latents, config: TrainConfig) -> torch.optim.Optimizer:
    groups = [
        {"params": list(phi.parameters()) + list(velocity.parameters()), "lr": config.lr_fields},
    ]
    for fid in latents.frame_ids():
        groups.append({"params": [latents[fid]], "lr": config.lr_latents})
    return torch.optim.Adam(groups)


def init_state(dataset: PairDataset, config: TrainConfig) -> TrainState:
    torch.manual_seed(config.seed)
    code_dim = 2 * config.latent_dim
    phi = ImplicitField(code_dim, config.phi_arch())
    vel = VelocityField(code_dim, config.velocity_arch())
    latents = init_latents(dataset.frame_ids, config.latent_dim, config.seed)
    opt = _make_optimizer(phi, vel, latents, config)
    sources = {k: p.source.points.copy() for k, p in enumerate(dataset.pairs)}
    return TrainState(
        phi, vel, latents, opt, config, dataset.pair_frames(), dataset.domain,
        dataset.transform, sources=sources,
    )


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(step)])


def _choose(rng, n, k):
    return rng.choice(n, size=min(k, n), replace=False) if k < n else np.arange(n)


def build_batch(
    pair: CorrespondencePair,
    config: TrainConfig,
    rng: np.random.Generator,
    code: torch.Tensor,
    domain: AxisAlignedDomain = AxisAlignedDomain(),
) -> SampleBatch:
    """Sample one training batch for ``pair``.

    Half the volume points are uniform in the domain, half are surface
    points of either endpoint cloud perturbed by isotropic Gaussian noise
    and clipped to the domain.
    """
    if len(pair.matches) == 0 and config.weights.lambda_m > 0:
        raise GeometryError("pair has no correspondences but lambda_m > 0")
    src, tgt = pair.source, pair.target
    i0 = _choose(rng, len(src), config.surface_batch)
    i1 = _choose(rng, len(tgt), config.surface_batch)
    n_uniform = config.volume_batch // 2
    n_near = config.volume_batch - n_uniform
    uniform = domain.sample_uniform(n_uniform, rng)
    pool = np.concatenate([src.points, tgt.points])
    near = pool[rng.integers(0, len(pool), n_near)]
    near = near + rng.normal(0.0, config.near_surface_sigma, near.shape)
    near = np.clip(near, domain.lo, domain.hi)
    volume = np.concatenate([uniform, near])
    if len(pair.matches):
        im = _choose(rng, len(pair.matches), config.match_batch)
        m = pair.matches[np.sort(im)]
        matched = np.stack([src.points[m[:, 0]], tgt.points[m[:, 1]]], axis=1)
    else:
        matched = np.zeros((0, 2, 3))
    return SampleBatch(
        volume_points=volume,
        surface_points_0=src.points[i0],
        surface_points_1=tgt.points[i1],
        matched_pairs=matched,
        times=config.times,
        code=code,
        surface_normals_0=None if src.normals is None else src.normals[i0],
        offsurface_points=uniform,
    )


def train_step(state: TrainState, batch: SampleBatch, pair_frames: tuple[int, int], diagnostics=None):
    """One joint update. Returns the per-term breakdown (python floats)."""
    cfg = state.config
    state.optimizer.zero_grad(set_to_none=True)
    terms = compute_terms(
        state.phi,
        state.velocity,
        batch,
        cfg.weights,
        cfg.integrator_config,
        cfg.laplacian_mode,
        cfg.laplacian_points,
        cfg.fd_step,
        diagnostics,
    )
    if cfg.latent_reg > 0:
        s, t = pair_frames
        terms["L_latent"] = cfg.latent_reg * (
            state.latents[s].pow(2).sum() + state.latents[t].pow(2).sum()
        )
    total, contrib = total_loss(terms, cfg.weights)
    if not torch.isfinite(total):
        bad = [k for k, v in terms.items() if not torch.isfinite(v)]
        raise NumericalError(f"non-finite total loss (terms: {bad or 'overflow in sum'})")
    total.backward()
    state.optimizer.step()
    state.step += 1
    value = float(total.detach())
    state.loss_ema = value if state.loss_ema is None else 0.98 * state.loss_ema + 0.02 * value
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["weighted"] = {k: float(v.detach()) for k, v in contrib.items()}
    breakdown["total"] = value
    return breakdown


def log_record(step: int, pair_id: int, breakdown: dict) -> dict:
    rec = {"step": step, "pair_id": pair_id}
    for name in ("L_i", "L_m", "L_s", "L_v", "L_st", "L_d", "L_n", "L_recon"):
        rec[name] = breakdown.get(name, 0.0)
    rec["total"] = breakdown["total"]
    return rec


def total_steps(config: TrainConfig, n_pairs: int) -> int:
    return config.epochs * n_pairs * config.steps_per_pair


def train(
    dataset: PairDataset,
    config: TrainConfig,
    out_dir=None,
    resume: bool = False,
    callback: Callable[[TrainState, dict], None] | None = None,
    stop_after: int | None = None,
) -> TrainState:
    """Run (or resume) the full optimisation.

    With ``out_dir`` a checkpoint is written atomically every
    ``checkpoint_interval`` steps and at the end, and one JSON line per step
    is appended to ``train_log.jsonl``. ``stop_after`` ends the run early
    after that many global steps (used to simulate interruptions).
    """
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / CHECKPOINT_NAME if out else None
    if resume:
        if ckpt is None or not ckpt.exists():
            raise FileNotFoundError(f"no checkpoint to resume from in {out_dir}")
        state = load_state(ckpt)
        if state.pairs != dataset.pair_frames():
            raise ConfigError("checkpoint pairs do not match the dataset")
        state.config = config
        _truncate_log(out / LOG_NAME, state.step)
    else:
        state = init_state(dataset, config)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / LOG_NAME).write_text("")
    n_pairs = len(dataset.pairs)
    end = total_steps(config, n_pairs)
    if stop_after is not None:
        end = min(end, stop_after)
    logf = open(out / LOG_NAME, "a") if out else None
    try:
        while state.step < end:
            pair_id = state.step % n_pairs
            pair = dataset.pairs[pair_id]
            frames = (pair.source.frame_id, pair.target.frame_id)
            rng = step_rng(config.seed, state.step)
            batch = build_batch(pair, config, rng, state.latents.pair_code(*frames), dataset.domain)
            breakdown = train_step(state, batch, frames)
            rec = log_record(state.step, pair_id, breakdown)
            state.history.append(rec)
            if logf:
                logf.write(json.dumps(rec) + "\n")
            if callback:
                callback(state, rec)
            if ckpt and (state.step % config.checkpoint_interval == 0 or state.step == end):
                logf.flush()
                save_state(state, ckpt)
    finally:
        if logf:
            logf.close()
    return state


def _truncate_log(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep))


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def state_to_archive(state: TrainState) -> tuple[dict, dict[str, np.ndarray]]:
    tensors = {}
    for prefix, module in (("phi", state.phi), ("velocity", state.velocity)):
        for name, p in module.state_dict().items():
            tensors[f"{prefix}/{name}"] = p.detach().cpu().numpy()
    for fid in state.latents.frame_ids():
        tensors[f"latents/{fid}"] = state.latents[fid].detach().cpu().numpy()
    opt = state.optimizer.state_dict()
    for idx, pstate in opt["state"].items():
        for key, val in pstate.items():
            tensors[f"optim/{idx}/{key}"] = torch.as_tensor(val).cpu().numpy()
    for k, pts in state.sources.items():
        tensors[f"sources/{k}"] = np.asarray(pts, dtype=np.float32)
    groups = [{k: v for k, v in g.items()} for g in opt["param_groups"]]
    for g in groups:
        g["betas"] = list(g["betas"])
    manifest = {
        "config": state.config.to_dict(),
        "architecture": {
            "phi": state.phi.arch.to_dict(),
            "velocity": state.velocity.arch.to_dict(),
            "code_dim": state.phi.code_dim,
            "latent_dim": state.latents.m,
        },
        "weights": state.config.weights.to_dict(),
        "transform": state.transform.to_dict(),
        "domain": {"min_corner": list(state.domain.min_corner), "max_corner": list(state.domain.max_corner)},
        "pairs": [{"pair_id": k, "source": s, "target": t} for k, (s, t) in enumerate(state.pairs)],
        "frame_ids": state.latents.frame_ids(),
        "step": state.step,
        "loss_ema": state.loss_ema,
        "optimizer": {"type": "Adam", "param_groups": groups},
    }
    return manifest, tensors


def save_state(state: TrainState, path) -> None:
    manifest, tensors = state_to_archive(state)
    checkpoint.save(path, manifest, tensors)


def state_from_archive(manifest: dict, tensors: dict[str, np.ndarray]) -> TrainState:
    config = TrainConfig.from_dict(manifest["config"])
    arch = manifest["architecture"]
    phi = ImplicitField(arch["code_dim"], FieldArch(**arch["phi"]))
    vel = VelocityField(arch["code_dim"], FieldArch(**arch["velocity"]))
    for prefix, module in (("phi", phi), ("velocity", vel)):
        sd = {
            name[len(prefix) + 1 :]: torch.from_numpy(arr)
            for name, arr in tensors.items()
            if name.startswith(prefix + "/")
        }
        module.load_state_dict(sd)
    latents = LatentTable(m=arch["latent_dim"])
    for fid in manifest["frame_ids"]:
        latents.set(fid, torch.from_numpy(tensors[f"latents/{fid}"]))
    opt = _make_optimizer(phi, vel, latents, config)
    opt_state: dict = {}
    for name, arr in tensors.items():
        if name.startswith("optim/"):
            _, idx, key = name.split("/")
            opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(arr)
    groups = manifest["optimizer"]["param_groups"]
    for g in groups:
        g["betas"] = tuple(g["betas"])
    opt.load_state_dict({"state": opt_state, "param_groups": groups})
    pairs = [(p["source"], p["target"]) for p in manifest["pairs"]]
    sources = {
        int(name.split("/")[1]): arr.astype(np.float64)
        for name, arr in tensors.items()
        if name.startswith("sources/")
    }
    dom = manifest["domain"]
    return TrainState(
        phi, vel, latents, opt, config, pairs,
        AxisAlignedDomain(tuple(dom["min_corner"]), tuple(dom["max_corner"])),
        AffineTransform.from_dict(manifest["transform"]),
        step=int(manifest["step"]),
        loss_ema=manifest["loss_ema"],
        sources=sources,
    )


def load_state(path) -> TrainState:
    manifest, tensors = checkpoint.load(path)
    return state_from_archive(manifest, tensors)
