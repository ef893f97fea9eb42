"""YAML run configuration.

Every key is optional; omitted keys keep the defaults shown by
``ptrgps --config default show-config``. Angles are given in degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .bench import ImitationConfig, SweepConfig
from .gps import GpsConfig
from .lqr import LqrWeights, NoiseSchedule
from .policy import TrainConfig
from .ptr import PtrConfig
from .vehicle import N_U, N_X


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scale: str = "desk"  # desk | full
    n_test: int = 10
    gps: GpsConfig = field(default_factory=GpsConfig)
    ptr: PtrConfig = field(default_factory=PtrConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    imitation: ImitationConfig = field(default_factory=ImitationConfig)


def desk_defaults() -> RunConfig:
    """Reduced-scale setup that runs in minutes on one core."""
    cfg = RunConfig()
    # 27 grid states are 0.5 apart in position and 15 deg in angle, so the
    # sampling noise is widened to cover the gaps between them
    noise = NoiseSchedule(sigma_pos=0.25, sigma_vel=0.05, sigma_angle=np.deg2rad(8.0), decay=0.85)
    cfg.gps = GpsConfig(S=5, max_iterations=8, noise=noise,
                        train=TrainConfig(epochs=1000, learning_rate=3e-3))
    cfg.imitation = ImitationConfig(samples_per_trajectory=25, samples_per_round=5, epochs=1000)
    return cfg


def load_config(path: str | None) -> RunConfig:
    """``None`` or ``"default"`` gives the desk defaults; otherwise read YAML."""
    if path in (None, "default"):
        return desk_defaults()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(doc)


def from_dict(doc: dict) -> RunConfig:
    doc = dict(doc)
    base = desk_defaults() if doc.get("scale", "desk") == "desk" else RunConfig(scale="full")
    _reject_unknown(doc, {"scale", "n_test", "gps", "ptr", "sweep", "imitation"}, "")
    gps_doc = dict(doc.get("gps") or {})
    noise_doc = dict(gps_doc.pop("noise", None) or {})
    train_doc = dict(gps_doc.pop("train", None) or {})
    lqr_doc = dict(gps_doc.pop("lqr", None) or {})
    gps = base.gps
    if "sigma_angle_deg" in noise_doc:
        noise_doc["sigma_angle"] = np.deg2rad(noise_doc.pop("sigma_angle_deg"))
    noise = _update(gps.noise, noise_doc, "gps.noise")
    train = _update(gps.train, train_doc, "gps.train")
    _reject_unknown(lqr_doc, {"q", "r", "q_final"}, "gps.lqr")
    lqr = LqrWeights(
        lqr_doc.get("q", 1.0) * np.eye(N_X),
        lqr_doc.get("r", 1.0) * np.eye(N_U),
        lqr_doc.get("q_final", 100.0) * np.eye(N_X),
    ) if lqr_doc else gps.lqr
    gps = _update(gps, {**gps_doc, "noise": noise, "train": train, "lqr": lqr}, "gps")
    sweep_doc = dict(doc.get("sweep") or {})
    for key in ("w_nu_values", "w_tr_values"):
        if key in sweep_doc:
            sweep_doc[key] = tuple(float(v) for v in sweep_doc[key])
    return RunConfig(
        scale=doc.get("scale", base.scale),
        n_test=int(doc.get("n_test", base.n_test)),
        gps=gps,
        ptr=_update(base.ptr, doc.get("ptr") or {}, "ptr"),
        sweep=_update(base.sweep, sweep_doc, "sweep"),
        imitation=_update(base.imitation, doc.get("imitation") or {}, "imitation"),
    )


def to_dict(cfg: RunConfig) -> dict:
    g = cfg.gps
    return {
        "scale": cfg.scale,
        "n_test": cfg.n_test,
        "gps": {
            "S": g.S, "K": g.K, "t_f": g.t_f, "w_trp": g.w_trp, "w_nu": g.w_nu,
            "eps_J": g.eps_J, "max_iterations": g.max_iterations, "cumulative": g.cumulative,
            "max_drop_fraction": g.max_drop_fraction,
            "noise": {
                "sigma_pos": g.noise.sigma_pos, "sigma_vel": g.noise.sigma_vel,
                "sigma_angle_deg": float(np.rad2deg(g.noise.sigma_angle)), "decay": g.noise.decay,
            },
            "train": {
                "batch_size": g.train.batch_size, "learning_rate": g.train.learning_rate,
                "epochs": g.train.epochs, "seed": g.train.seed,
            },
            "lqr": {
                "q": float(g.lqr.Q[0, 0]), "r": float(g.lqr.R[0, 0]),
                "q_final": float(g.lqr.Q_f[0, 0]),
            },
        },
        "ptr": {f.name: getattr(cfg.ptr, f.name) for f in fields(cfg.ptr)},
        "sweep": {
            "w_nu_values": list(cfg.sweep.w_nu_values),
            "w_tr_values": list(cfg.sweep.w_tr_values),
            "eps_nu": cfg.sweep.eps_nu, "eps_tr": cfg.sweep.eps_tr,
            "max_iterations": cfg.sweep.max_iterations,
        },
        "imitation": {f.name: getattr(cfg.imitation, f.name) for f in fields(cfg.imitation)},
    }


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def _reject_unknown(doc: dict, allowed: set, where: str) -> None:
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(sorted(extra))}")


def _update(obj, changes: dict, where: str):
    allowed = {f.name for f in fields(obj)}
    _reject_unknown(changes, allowed, where)
    kwargs = {f.name: getattr(obj, f.name) for f in fields(obj)}
    kwargs.update(changes)
    try:
        return type(obj)(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
