"""Experiment configuration: a sectioned INI file with units in the key names.

Unknown sections or keys are rejected. ``dump`` writes every field so that
parse -> dump -> parse is a fixed point.
"""

import configparser
import io
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .dynamics import CartpoleParams, cartpole_normal_form, linear_normal_form
from .errors import ValidationError
from .learning import TrainConfig
from .ocp import IlqrConfig, QuadraticCost
from .runtime import RoaGrid, SettleConfig


@dataclass(frozen=True)
class SystemConfig:
    kind: str = "cartpole"  # or "linear"
    cart_mass_kg: float = 1.0
    pole_mass_kg: float = 0.1
    pole_length_m: float = 1.0
    gravity_m_per_s2: float = 9.8
    damping_threshold_m_per_s: float = 1e-3
    # linear systems only
    a_matrix: tuple = ()
    b_vector: tuple = ()
    relative_degree: int = 2


@dataclass(frozen=True)
class ConstructConfig:
    poles: tuple = (-1.0, -2.0, -3.0, -4.0)
    gain: tuple = ()  # explicit auxiliary-input gain; overrides poles when set
    selection: str = "conditioning"
    lqr_selection: str = "slowest"


@dataclass(frozen=True)
class CostConfig:
    q_diag: tuple = (1.0, 1.0, 1.0, 1.0)
    r: float = 0.01


@dataclass(frozen=True)
class IlqrSection:
    horizon_s: float = 5.0
    dt_s: float = 0.01
    max_iters: int = 100
    cost_tol: float = 1e-6
    regularization: float = 1e-6
    line_search_betas: tuple = (1.0, 0.5, 0.25, 0.1, 0.05, 0.01)
    escape_bound: float = 50.0


@dataclass(frozen=True)
class TrainingSection:
    hidden_widths: tuple = (64, 64)
    activation: str = "tanh"
    pretrain_target: str = "lqr"  # or "poles"
    batch_size: int = 16
    learning_rate: float = 1e-4
    steps: int = 2000
    theta_min_rad: float = -1.2
    theta_max_rad: float = 1.2
    momentum_min: float = -0.6
    momentum_max: float = 0.6
    pretrain_steps: int = 6000
    pretrain_lr: float = 1e-2
    pretrain_batch: int = 256
    optimizer: str = "momentum"
    momentum: float = 0.9
    anchor_weight: float = 0.0
    pin_origin: bool = True
    grad_clip: float = 10.0
    smoothing_window: int = 100


@dataclass(frozen=True)
class TrackingSection:
    kp_per_s2: float = 25.0
    kd_per_s: float = 10.0


@dataclass(frozen=True)
class SimulateSection:
    t_final_s: float = 10.0
    dt_s: float = 0.01
    init: tuple = (0.0, 0.05, 0.0, 0.0)  # physical state
    escape_bound: float = 50.0


@dataclass(frozen=True)
class RoaSection:
    theta_min_rad: float = -np.pi
    theta_max_rad: float = np.pi
    theta_dot_min_rad_per_s: float = -6.0
    theta_dot_max_rad_per_s: float = 6.0
    n_theta: int = 61
    n_theta_dot: int = 61
    t_final_s: float = 10.0
    dt_s: float = 0.01
    settle_tol: float = 0.05
    escape_bound: float = 50.0


@dataclass(frozen=True)
class VerifySection:
    theta_max_rad: float = 0.1  # near-origin box: the residual of psi_lin grows linearly with radius
    momentum_max: float = 0.05
    n_grid: int = 7
    relative_degree_tol: float = 1e-3
    invariance_rel_tol: float = 0.2
    zero_dynamics_radius: float = 0.05
    n_directions: int = 8
    t_final_s: float = 10.0
    dt_s: float = 0.01
    annihilation_samples: int = 200


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    output_dir: str = "out"


SECTIONS = {
    "run": RunSection,
    "system": SystemConfig,
    "construct": ConstructConfig,
    "cost": CostConfig,
    "ilqr": IlqrSection,
    "training": TrainingSection,
    "tracking": TrackingSection,
    "simulate": SimulateSection,
    "roa": RoaSection,
    "verify": VerifySection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    system: SystemConfig = field(default_factory=SystemConfig)
    construct: ConstructConfig = field(default_factory=ConstructConfig)
    cost: CostConfig = field(default_factory=CostConfig)
    ilqr: IlqrSection = field(default_factory=IlqrSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    tracking: TrackingSection = field(default_factory=TrackingSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    roa: RoaSection = field(default_factory=RoaSection)
    verify: VerifySection = field(default_factory=VerifySection)

    # -- derived objects -------------------------------------------------

    def normal_form(self):
        s = self.system
        if s.kind == "cartpole":
            return cartpole_normal_form(CartpoleParams(s.cart_mass_kg, s.pole_mass_kg, s.pole_length_m,
                                                       s.gravity_m_per_s2, s.damping_threshold_m_per_s))
        n = len(s.b_vector)
        if len(s.a_matrix) != n * n or n == 0:
            raise ValidationError("a_matrix must hold n*n entries for n = len(b_vector)")
        return linear_normal_form(np.array(s.a_matrix).reshape(n, n), np.array(s.b_vector), s.relative_degree)

    def quadratic_cost(self) -> QuadraticCost:
        return QuadraticCost(np.diag(self.cost.q_diag), self.cost.r)

    def ilqr_config(self) -> IlqrConfig:
        c = self.ilqr
        return IlqrConfig(c.horizon_s, c.dt_s, c.max_iters, c.cost_tol, c.regularization, c.line_search_betas,
                          c.escape_bound)

    def train_config(self, jobs: int = 1) -> TrainConfig:
        t = self.training
        return TrainConfig(t.batch_size, t.learning_rate, t.steps,
                           ((t.theta_min_rad, t.theta_max_rad), (t.momentum_min, t.momentum_max)),
                           self.run.seed, t.pretrain_steps, t.pretrain_lr, t.pretrain_batch, t.optimizer,
                           t.momentum, t.anchor_weight, t.pin_origin, t.grad_clip, t.smoothing_window, jobs)

    def roa_grid(self) -> RoaGrid:
        r = self.roa
        return RoaGrid(r.theta_min_rad, r.theta_max_rad, r.theta_dot_min_rad_per_s, r.theta_dot_max_rad_per_s,
                       r.n_theta, r.n_theta_dot)

    def settle_config(self) -> SettleConfig:
        r = self.roa
        return SettleConfig(r.t_final_s, r.dt_s, r.settle_tol, r.escape_bound)

    def gains(self) -> tuple:
        return (self.tracking.kp_per_s2, self.tracking.kd_per_s)

    def validate(self) -> "ExperimentConfig":
        s = self.system
        if s.kind not in ("cartpole", "linear"):
            raise ValidationError(f"unknown system kind {s.kind!r}")
        nf = self.normal_form()
        if len(self.cost.q_diag) != nf.n:
            raise ValidationError(f"q_diag needs {nf.n} entries")
        self.quadratic_cost()
        self.ilqr_config()
        self.train_config()
        if self.training.pretrain_target not in ("lqr", "poles"):
            raise ValidationError("pretrain_target must be 'lqr' or 'poles'")
        if self.construct.gain and len(self.construct.gain) != nf.n:
            raise ValidationError(f"construct gain needs {nf.n} entries")
        if not self.construct.gain and len(self.construct.poles) != nf.n:
            raise ValidationError(f"need {nf.n} poles")
        r = self.roa
        if r.n_theta < 1 or r.n_theta_dot < 1 or r.dt_s <= 0 or r.t_final_s <= 0 or r.settle_tol <= 0:
            raise ValidationError("invalid ROA settings")
        if self.simulate.dt_s <= 0 or self.simulate.t_final_s < 0 or len(self.simulate.init) != nf.n:
            raise ValidationError("invalid simulate settings")
        for rule in (self.construct.selection, self.construct.lqr_selection):
            if rule not in ("conditioning", "slowest"):
                raise ValidationError(f"unknown selection rule {rule!r}")
        v = self.verify
        if v.n_grid < 1 or v.n_directions < 1 or v.dt_s <= 0 or v.t_final_s <= 0 or v.annihilation_samples < 1:
            raise ValidationError("invalid verify settings")
        if self.tracking.kp_per_s2 < 0 or self.tracking.kd_per_s < 0:
            raise ValidationError("tracking gains must be non-negative")
        return self


def _parse_value(raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            items = [x.strip() for x in raw.split(",")]
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return tuple(int(x) for x in items)
            return tuple(float(x) for x in items)
    except ValueError as exc:
        raise ValidationError(f"cannot parse {raw!r}: {exc}") from exc
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    parts = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ValidationError(f"unknown section [{section}]")
        cls = SECTIONS[section]
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for key, raw in parser.items(section):
            if key not in known:
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            values[key] = _parse_value(raw, getattr(defaults, key))
        parts[section] = replace(defaults, **values)
    return ExperimentConfig(**parts).validate()


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section in SECTIONS:
        obj = getattr(cfg, section)
        parser[section] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
