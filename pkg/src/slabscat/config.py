"""Strict JSON run configuration.

Every block is validated before any solve; unknown keys are rejected and all
violations are reported together.
"""

from __future__ import annotations

import json
import math
import warnings
from pathlib import Path
from typing import Annotated, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .harmonics import BlochContext, reduce_kappa
from .scatter import Incidence
from .structure import (
    AdmissibleEnvelope,
    CellGeometry,
    CoefficientField,
    Disk,
    Inclusion,
    Rect,
    rasterize,
    read_raster,
    validate_inclusions,
)


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every violation found."""

    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))
        self.errors = errors


class KappaWarning(UserWarning):
    """A Bloch wavenumber was reduced into ``[-1/2, 1/2)``."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


PositiveFloat = Annotated[float, Field(gt=0, allow_inf_nan=False)]


class GeometryConfig(_Strict):
    z_minus: float = Field(allow_inf_nan=False)
    z_plus: float = Field(allow_inf_nan=False)
    nx: int = Field(ge=4)
    nz: int = Field(ge=2)
    m_max: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if not self.z_minus < self.z_plus:
            raise ValueError("geometry: need z_minus < z_plus")
        if self.nx % 2:
            raise ValueError("geometry: nx must be even")
        if self.m_max is not None and self.m_max >= self.nx // 2:
            raise ValueError(f"geometry: m_max={self.m_max} aliases on nx={self.nx}; need m_max < nx/2")
        return self


class ExteriorConfig(_Strict):
    eps0: float = 1.0
    tau0: float = 1.0

    @field_validator("eps0", "tau0")
    @classmethod
    def _positive(cls, v, info):
        if not (math.isfinite(v) and v > 0):
            raise ValueError(f"{info.field_name} must be finite and strictly positive (coefficient lower bound), got {v}")
        return v


class Coefficients(_Strict):
    eps: PositiveFloat
    tau: PositiveFloat


class InclusionConfig(_Strict):
    id: int = 0
    shape: Literal["disk", "rect"]
    eps: PositiveFloat
    tau: PositiveFloat
    center: Optional[tuple[float, float]] = None
    radius: Optional[float] = Field(default=None, gt=0)
    lo: Optional[tuple[float, float]] = None
    hi: Optional[tuple[float, float]] = None

    @model_validator(mode="after")
    def _check(self):
        if self.shape == "disk" and (self.center is None or self.radius is None or self.lo or self.hi):
            raise ValueError("disk inclusion needs exactly 'center' and 'radius'")
        if self.shape == "rect" and (self.lo is None or self.hi is None or self.center or self.radius):
            raise ValueError("rect inclusion needs exactly 'lo' and 'hi'")
        if self.shape == "rect" and not (self.lo[0] < self.hi[0] and self.lo[1] < self.hi[1]):
            raise ValueError("rect inclusion needs lo < hi componentwise")
        return self

    def build(self) -> Inclusion:
        shape = Disk(tuple(self.center), self.radius) if self.shape == "disk" else Rect(tuple(self.lo), tuple(self.hi))
        return Inclusion(shape, self.eps, self.tau, self.id)


class RasterPaths(_Strict):
    eps: Optional[str] = None
    tau: Optional[str] = None


class StructureConfig(_Strict):
    background: Coefficients = Coefficients(eps=1.0, tau=1.0)
    inclusions: list[InclusionConfig] = []
    raster: RasterPaths = RasterPaths()
    rasterize: Literal["center", "fraction"] = "center"


class Sweep(_Strict):
    lo: float = Field(allow_inf_nan=False)
    hi: float = Field(allow_inf_nan=False)
    n: int = Field(ge=1)

    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)


class BlochConfig(_Strict):
    omega: Optional[float] = Field(default=None, gt=0, allow_inf_nan=False)
    omega_sweep: Optional[Sweep] = None
    kappa: Optional[float] = Field(default=None, allow_inf_nan=False)
    kappa_sweep: Optional[Sweep] = None

    @field_validator("kappa")
    @classmethod
    def _reduce(cls, v):
        if v is None:
            return v
        r = reduce_kappa(v)
        if r != v:
            warnings.warn(f"kappa={v} normalized to {r} (first Brillouin zone)", KappaWarning, stacklevel=2)
        return r

    @model_validator(mode="after")
    def _check(self):
        if (self.omega is None) == (self.omega_sweep is None):
            raise ValueError("bloch: give exactly one of 'omega' and 'omega_sweep'")
        if self.kappa is not None and self.kappa_sweep is not None:
            raise ValueError("bloch: give at most one of 'kappa' and 'kappa_sweep'")
        if self.omega_sweep is not None and not 0 < self.omega_sweep.lo <= self.omega_sweep.hi:
            raise ValueError("bloch: omega_sweep needs 0 < lo <= hi")
        return self

    def omegas(self) -> list[float]:
        return [self.omega] if self.omega is not None else [float(w) for w in self.omega_sweep.values()]

    def kappas(self) -> list[float]:
        if self.kappa_sweep is not None:
            return [float(k) for k in self.kappa_sweep.values()]
        return [0.0 if self.kappa is None else self.kappa]


Amplitude = float | tuple[float, float]


def _amplitudes(raw: dict[str, Amplitude]) -> dict[int, complex]:
    out = {}
    for k, v in raw.items():
        out[int(k)] = complex(v[0], v[1]) if isinstance(v, tuple) else complex(v)
    return out


class IncidenceConfig(_Strict):
    a_inc: dict[str, Amplitude] = {"0": 1.0}
    b_inc: dict[str, Amplitude] = {}

    @field_validator("a_inc", "b_inc")
    @classmethod
    def _orders(cls, v):
        for k in v:
            try:
                int(k)
            except ValueError:
                raise ValueError(f"incidence order key {k!r} is not an integer") from None
        return v

    def build(self) -> Incidence:
        return Incidence(_amplitudes(self.a_inc), _amplitudes(self.b_inc))


class SensitivityConfig(_Strict):
    method: Literal["discrete", "continuum"] = "discrete"
    direction: Literal["random", "uniform"] = "random"
    components: list[Literal["eps", "tau"]] = ["eps", "tau"]
    functional: Literal["energy", "order", "field"] = "energy"
    order: int = 0
    per_order: list[int] = []
    steps: list[float] = [1e-3, 1e-4, 1e-5]

    @field_validator("steps")
    @classmethod
    def _steps(cls, v):
        if not v or any(not (s > 0 and math.isfinite(s)) for s in v):
            raise ValueError("sensitivity.steps must be nonempty positive numbers")
        return v


class ModesConfig(_Strict):
    n_modes: int = Field(default=5, ge=1)
    omega_cap: Optional[float] = Field(default=None, gt=0)
    guided_tol: float = Field(default=1e-8, gt=0)


class EnvelopeConfig(_Strict):
    eps: tuple[float, float]
    tau: tuple[float, float]

    @model_validator(mode="after")
    def _check(self):
        for name, (lo, hi) in (("eps", self.eps), ("tau", self.tau)):
            if not 0 < lo <= hi:
                raise ValueError(f"envelope: need 0 < {name}_lo <= {name}_hi")
        return self

    def build(self, geom: CellGeometry) -> AdmissibleEnvelope:
        return AdmissibleEnvelope.uniform(geom, self.eps, self.tau)


class CertifyConfig(_Strict):
    envelope: EnvelopeConfig
    omega_range: Optional[tuple[float, float]] = None
    j: Optional[int] = Field(default=None, ge=1)


class RegionConfig(_Strict):
    lo: tuple[float, float]
    hi: tuple[float, float]


class DesignConfig(_Strict):
    objective: Literal["maximize", "minimize", "match"] = "maximize"
    targets: Optional[list[float]] = None
    weights: Optional[list[float]] = None
    region: Optional[RegionConfig] = None
    envelope: EnvelopeConfig
    step: float = Field(default=10.0, gt=0)
    max_iters: int = Field(default=200, ge=0)
    tolerance: float = Field(default=1e-8, ge=0)
    optimize_tau: bool = False
    certify: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.objective == "match" and self.targets is None:
            raise ValueError("design: objective 'match' needs 'targets'")
        return self


class SolverConfig(_Strict):
    residual_tol: float = Field(default=1e-8, gt=0)
    threads: int = Field(default=1, ge=1)
    condition: bool = False


class OutputConfig(_Strict):
    directory: str = "out"
    per_order: bool = False


class RunConfig(_Strict):
    geometry: GeometryConfig
    exterior: ExteriorConfig = ExteriorConfig()
    structure: StructureConfig = StructureConfig()
    bloch: BlochConfig
    incidence: IncidenceConfig = IncidenceConfig()
    sensitivity: SensitivityConfig = SensitivityConfig()
    modes: ModesConfig = ModesConfig()
    certify: Optional[CertifyConfig] = None
    design: Optional[DesignConfig] = None
    solver: SolverConfig = SolverConfig()
    output: OutputConfig = OutputConfig()
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check(self):
        try:
            validate_inclusions(self.cell(), [i.build() for i in self.structure.inclusions])
        except ValueError as exc:
            raise ValueError(f"structure: {exc}") from None
        if self.design is not None and self.design.objective == "match":
            if len(self.design.targets) != len(self.bloch.omegas()):
                raise ValueError("design: need one target per swept omega")
        return self

    # -- builders -----------------------------------------------------------------------

    def cell(self) -> CellGeometry:
        g = self.geometry
        return CellGeometry(g.z_minus, g.z_plus, g.nx, g.nz)

    def m_max(self) -> int:
        g = self.geometry
        return g.m_max if g.m_max is not None else self.cell().default_m_max()

    def context(self, omega: float, kappa: float) -> BlochContext:
        return BlochContext(omega, kappa, self.exterior.eps0, self.exterior.tau0, self.m_max())

    def coefficient_field(self, base_dir: Path | None = None) -> CoefficientField:
        geom = self.cell()
        s = self.structure
        inclusions = [i.build() for i in s.inclusions]
        field_ = rasterize(geom, (s.background.eps, s.background.tau), inclusions, mode=s.rasterize)
        eps, tau = field_.eps.copy(), field_.tau.copy()
        for name in ("eps", "tau"):
            path = getattr(s.raster, name)
            if path is None:
                continue
            p = Path(path)
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            values = read_raster(p, expect=name)
            if values.shape != geom.shape:
                raise ConfigError([f"structure.raster.{name}: grid {values.shape} does not match geometry {geom.shape}"])
            if name == "eps":
                eps = values
            else:
                tau = values
        return CoefficientField(eps, tau)


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append(f"{loc}: {msg}")
    return out


def load_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(["<root>: configuration must be a JSON object"])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def parse_config(path) -> RunConfig:
    """Read and fully validate a JSON configuration file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"{p}: no such file"])
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{p}: invalid JSON ({exc})"]) from None
    return load_config(data)
