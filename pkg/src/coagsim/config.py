"""Run-configuration parsing: layered key=value sections, strictly validated.

The config format is INI-style with sections [kernel], [phi], [init], [run]
and [output].  Parsing is strict: duplicate keys, unknown sections, unknown
keys, and keys inapplicable to the declared kernel or run mode are all
rejected, with the offending line number where available.  A parsed config
serialises back to a canonical text whose re-parse compares equal.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass

from .kernels import (
    ConservedQuantity,
    KernelSpec,
    MajorantSpec,
    build_kernel,
    build_majorant,
    build_quantity,
)
from .states import ClusterState, DiscreteMeasure

MODES = ("simulate", "solve", "compare", "check-kernel", "gel-time", "ensemble")

_KERNEL_KEYS = {
    "constant": {"name", "c", "majorant"},
    "additive": {"name", "majorant"},
    "multiplicative": {"name", "majorant"},
    "homogeneous": {"name", "gamma", "base", "majorant"},
    "min_log": {"name", "epsilon", "majorant"},
    "bilinear": {"name", "matrix", "dim", "majorant"},
    "spatial_toy": {"name", "alpha", "majorant"},
}

_PHI_KEYS = {
    "zero": {"name"},
    "mass_times_ell": {"name", "ell"},
    "mass_product": {"name"},
    "bilinear": {"name", "matrix", "dim"},
    "min_mass": {"name"},
}

_INIT_KEYS = {
    "monodisperse": {"type", "mass"},
    "iid": {"type", "masses", "weights", "attrs"},
    "counts": {"type", "counts", "attrs"},
}

_RUN_COMMON = {"mode", "seed", "threads", "integer_mass"}
_RUN_KEYS = {
    "simulate": _RUN_COMMON | {"n", "t", "snapshot_times", "max_events",
                               "stop_mass_fraction", "selection", "audit"},
    "solve": _RUN_COMMON | {"t", "dt", "m", "method", "snapshot_times", "m2_threshold"},
    "compare": _RUN_COMMON | {"n_values", "replicas", "t", "dt", "m", "snapshot_times",
                              "test_family", "err_tol", "slope_min", "slope_max",
                              "m2_threshold"},
    "check-kernel": _RUN_COMMON | {"check_masses", "r", "c_bound", "classify_samples",
                                   "classify_tol"},
    "gel-time": _RUN_COMMON | {"n", "t", "eps", "replicas", "max_events"},
    "ensemble": _RUN_COMMON | {"n_values", "replicas", "t", "snapshot_times"},
}

_OUTPUT_KEYS = {"dir", "figures", "write_events", "write_snapshots", "grid_tables"}

_SECTIONS = ("kernel", "phi", "init", "run", "output")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    in_section = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            in_section = stripped[1:-1].strip() == section
            if in_section and key is None:
                return lineno
            continue
        if in_section and key is not None:
            if stripped.split("=", 1)[0].strip().lower() == key.lower():
                return lineno
    return None


@dataclass(frozen=True)
class RunConfig:
    """Validated run description; values keep their canonical string form."""

    mode: str
    sections: tuple[tuple[str, tuple[tuple[str, str], ...]], ...]

    def section(self, name: str) -> dict[str, str]:
        for sec, items in self.sections:
            if sec == name:
                return dict(items)
        return {}

    # -- typed accessors with documented defaults --------------------------

    def get(self, section: str, key: str, default=None) -> str | None:
        return self.section(section).get(key, default)

    def get_float(self, section: str, key: str, default: float | None = None) -> float | None:
        v = self.get(section, key)
        return float(v) if v is not None else default

    def get_int(self, section: str, key: str, default: int | None = None) -> int | None:
        v = self.get(section, key)
        return int(v) if v is not None else default

    def get_bool(self, section: str, key: str, default: bool = False) -> bool:
        v = self.get(section, key)
        if v is None:
            return default
        if v.lower() in ("true", "1", "yes", "on"):
            return True
        if v.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {v!r}")

    def get_floats(self, section: str, key: str, default=()) -> tuple[float, ...]:
        v = self.get(section, key)
        if v is None:
            return tuple(default)
        return tuple(float(p) for p in v.split(",") if p.strip())

    def get_ints(self, section: str, key: str, default=()) -> tuple[int, ...]:
        v = self.get(section, key)
        if v is None:
            return tuple(default)
        return tuple(int(p) for p in v.split(",") if p.strip())

    @property
    def seed(self) -> int:
        return self.get_int("run", "seed", 0)

    @property
    def integer_mass(self) -> bool:
        return self.get_bool("run", "integer_mass", False)

    # -- object builders ----------------------------------------------------

    def kernel_params(self) -> dict:
        sec = self.section("kernel")
        params: dict = {}
        name = sec["name"]
        if name == "constant" and "c" in sec:
            params["c"] = float(sec["c"])
        if name == "homogeneous":
            params["gamma"] = float(sec["gamma"])
            params["base"] = sec.get("base", "product")
        if name == "min_log" and "epsilon" in sec:
            params["epsilon"] = float(sec["epsilon"])
        if name == "spatial_toy" and "alpha" in sec:
            params["alpha"] = float(sec["alpha"])
        if name == "bilinear":
            params["matrix"] = _parse_matrix(sec["matrix"], int(sec["dim"]))
        return params

    def kernel(self) -> KernelSpec:
        return build_kernel(self.section("kernel")["name"], self.kernel_params())

    def majorant(self) -> MajorantSpec | None:
        name = self.get("kernel", "majorant", "auto")
        return build_majorant(name, self.kernel(), {})

    def quantity(self) -> ConservedQuantity:
        sec = self.section("phi")
        if not sec:
            return build_quantity("zero", {})
        params: dict = {}
        if sec["name"] == "mass_times_ell":
            params["ell"] = sec.get("ell", "one")
        if sec["name"] == "bilinear":
            params["matrix"] = _parse_matrix(sec["matrix"], int(sec["dim"]))
        return build_quantity(sec["name"], params)

    def initial_measure(self) -> DiscreteMeasure:
        """Initial condition as a probability measure (for iid draws)."""
        sec = self.section("init")
        kind = sec["type"]
        if kind == "monodisperse":
            mass = sec.get("mass", "1")
            m = int(mass) if self.integer_mass else float(mass)
            return DiscreteMeasure.delta(ClusterState(mass=m))
        if kind == "iid":
            masses = [float(p) for p in sec["masses"].split(",")]
            weights = [float(p) for p in sec["weights"].split(",")]
            attrs = _parse_attr_lists(sec.get("attrs"), len(masses))
            if self.integer_mass:
                masses = [int(m) for m in masses]
            support = [ClusterState(mass=m, attributes=a) for m, a in zip(masses, attrs)]
            return DiscreteMeasure(support, weights)
        if kind == "counts":
            pairs = _parse_counts(sec["counts"])
            total = sum(c for _, c in pairs)
            attrs = _parse_attr_lists(sec.get("attrs"), len(pairs))
            support = [ClusterState(mass=int(m) if self.integer_mass else m, attributes=a)
                       for (m, _), a in zip(pairs, attrs)]
            return DiscreteMeasure(support, [c / total for (_, c) in pairs])
        raise ConfigError(f"unknown init type {kind!r}")

    def initial_counts(self, N: int) -> list[tuple[ClusterState, int]]:
        """Initial condition as deterministic multiplicities scaled to N."""
        sec = self.section("init")
        kind = sec["type"]
        if kind == "monodisperse":
            mass = sec.get("mass", "1")
            m = int(mass) if self.integer_mass else float(mass)
            return [(ClusterState(mass=m), N)]
        if kind == "counts":
            pairs = _parse_counts(sec["counts"])
            attrs = _parse_attr_lists(sec.get("attrs"), len(pairs))
            return [(ClusterState(mass=int(m) if self.integer_mass else m, attributes=a), int(c))
                    for (m, c), a in zip(pairs, attrs)]
        raise ConfigError(f"init type {kind!r} has no deterministic count form")

    def init_is_deterministic(self) -> bool:
        return self.section("init")["type"] in ("monodisperse", "counts")


def _parse_matrix(text: str, dim: int) -> tuple[tuple[float, ...], ...]:
    vals = [float(p) for p in text.split(",") if p.strip()]
    if len(vals) != dim * dim:
        raise ConfigError(f"matrix needs {dim * dim} row-major entries, got {len(vals)}")
    return tuple(tuple(vals[i * dim:(i + 1) * dim]) for i in range(dim))


def _parse_counts(text: str) -> list[tuple[float, int]]:
    pairs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        mass_s, count_s = part.split(":")
        count = int(count_s)
        if count <= 0:
            raise ConfigError(f"multiplicity must be positive in counts entry {part!r}")
        pairs.append((float(mass_s), count))
    if not pairs:
        raise ConfigError("counts list is empty")
    return pairs


def _parse_attr_lists(text: str | None, n: int) -> list[tuple[float, ...]]:
    if text is None:
        return [()] * n
    groups = [g for g in text.split(";")]
    if len(groups) != n:
        raise ConfigError(f"attrs needs {n} ';'-separated vectors, got {len(groups)}")
    return [tuple(float(p) for p in g.split(",") if p.strip()) for g in groups]


def parse_config(text: str, mode: str | None = None) -> RunConfig:
    """Parse and validate; the first problem is reported with its line number."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), strict=True)
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]",
                          getattr(exc, "lineno", None)) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]",
                          getattr(exc, "lineno", None)) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("content before any section header", exc.lineno) from exc
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", lineno) from exc

    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", _line_of(text, sec))

    cfg_mode = parser.get("run", "mode", fallback=None)
    if mode is not None and cfg_mode is not None and mode != cfg_mode:
        raise ConfigError(f"config declares mode {cfg_mode!r} but {mode!r} was requested",
                          _line_of(text, "run", "mode"))
    mode = mode or cfg_mode
    if mode is None:
        raise ConfigError("run mode missing: pass a subcommand or set [run] mode")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r} (choices: {', '.join(MODES)})")

    def section_items(name: str) -> dict[str, str]:
        if not parser.has_section(name):
            return {}
        return {k: v.strip() for k, v in parser.items(name)}

    kernel_sec = section_items("kernel")
    if "name" not in kernel_sec:
        raise ConfigError("missing required key 'name' in [kernel]",
                          _line_of(text, "kernel"))
    kname = kernel_sec["name"]
    if kname not in _KERNEL_KEYS:
        raise ConfigError(f"unknown kernel name {kname!r}", _line_of(text, "kernel", "name"))
    for key in kernel_sec:
        if key not in _KERNEL_KEYS[kname]:
            raise ConfigError(f"key {key!r} not applicable to kernel {kname!r}",
                              _line_of(text, "kernel", key))
    if kname == "homogeneous" and "gamma" not in kernel_sec:
        raise ConfigError("homogeneous kernel requires 'gamma'", _line_of(text, "kernel"))
    if kname == "bilinear":
        for req in ("matrix", "dim"):
            if req not in kernel_sec:
                raise ConfigError(f"bilinear kernel requires {req!r}", _line_of(text, "kernel"))

    phi_sec = section_items("phi")
    if phi_sec:
        pname = phi_sec.get("name")
        if pname not in _PHI_KEYS:
            raise ConfigError(f"unknown conserved-quantity name {pname!r}",
                              _line_of(text, "phi", "name") or _line_of(text, "phi"))
        for key in phi_sec:
            if key not in _PHI_KEYS[pname]:
                raise ConfigError(f"key {key!r} not applicable to phi {pname!r}",
                                  _line_of(text, "phi", key))

    init_sec = section_items("init")
    if not init_sec:
        raise ConfigError("missing [init] section")
    if init_sec:
        itype = init_sec.get("type")
        if itype not in _INIT_KEYS:
            raise ConfigError(f"unknown init type {itype!r}",
                              _line_of(text, "init", "type") or _line_of(text, "init"))
        for key in init_sec:
            if key not in _INIT_KEYS[itype]:
                raise ConfigError(f"key {key!r} not applicable to init type {itype!r}",
                                  _line_of(text, "init", key))

    run_sec = section_items("run")
    allowed = _RUN_KEYS[mode]
    for key in run_sec:
        if key not in allowed:
            raise ConfigError(f"key {key!r} not applicable to mode {mode!r}",
                              _line_of(text, "run", key))

    out_sec = section_items("output")
    for key in out_sec:
        if key not in _OUTPUT_KEYS:
            raise ConfigError(f"unknown key {key!r} in [output]",
                              _line_of(text, "output", key))

    run_sec["mode"] = mode
    sections = []
    for name, items in (("kernel", kernel_sec), ("phi", phi_sec), ("init", init_sec),
                        ("run", run_sec), ("output", out_sec)):
        if items:
            sections.append((name, tuple(sorted(items.items()))))
    cfg = RunConfig(mode=mode, sections=tuple(sections))
    _validate_semantics(cfg, text)
    return cfg


def _require(cfg: RunConfig, section: str, key: str):
    if cfg.get(section, key) is None:
        raise ConfigError(f"mode {cfg.mode!r} requires [{section}] {key}")


def _validate_semantics(cfg: RunConfig, text: str = ""):
    mode = cfg.mode
    try:
        kernel = cfg.kernel()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[kernel] invalid: {exc}", _line_of(text, "kernel", "matrix")
                          if "matrix" in str(exc) or "symmetric" in str(exc) else None) from exc
    try:
        cfg.quantity()
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"[phi] invalid: {exc}") from exc

    for sec, key in (("run", "n"), ("run", "replicas"), ("run", "m"),
                     ("run", "check_masses"), ("run", "classify_samples"),
                     ("run", "max_events"), ("run", "threads")):
        v = cfg.get_int(sec, key)
        if v is not None and v <= 0:
            raise ConfigError(f"[{sec}] {key} must be positive, got {v}",
                              _line_of(text, sec, key))
    for sec, key in (("run", "t"), ("run", "dt"), ("run", "eps"),
                     ("run", "stop_mass_fraction"), ("run", "err_tol"),
                     ("run", "m2_threshold"), ("run", "r"), ("run", "c_bound")):
        v = cfg.get_float(sec, key)
        if v is not None and v <= 0 and not (key == "t" and v == 0.0):
            raise ConfigError(f"[{sec}] {key} must be positive, got {v}",
                              _line_of(text, sec, key))

    times = cfg.get_floats("run", "snapshot_times")
    horizon = cfg.get_float("run", "t")
    if times and any(b <= a for a, b in zip(times, times[1:])):
        raise ConfigError("snapshot_times must be strictly increasing",
                          _line_of(text, "run", "snapshot_times"))
    if times and horizon is not None and times[-1] > horizon + 1e-12:
        raise ConfigError("snapshot_times must not exceed T",
                          _line_of(text, "run", "snapshot_times"))

    n_values = cfg.get_ints("run", "n_values")
    if n_values and any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ConfigError("n_values must be strictly increasing",
                          _line_of(text, "run", "n_values"))
    eps = cfg.get_float("run", "eps")
    if eps is not None and not 0 < eps < 1:
        raise ConfigError("eps must lie strictly between 0 and 1",
                          _line_of(text, "run", "eps"))

    required = {
        "simulate": [("run", "n"), ("run", "t")],
        "solve": [("run", "t"), ("run", "dt"), ("run", "m")],
        "compare": [("run", "n_values"), ("run", "replicas"), ("run", "t"),
                    ("run", "dt"), ("run", "m")],
        "check-kernel": [],
        "gel-time": [("run", "n"), ("run", "t"), ("run", "eps")],
        "ensemble": [("run", "n_values"), ("run", "replicas"), ("run", "t")],
    }[mode]
    for sec, key in required:
        _require(cfg, sec, key)

    sel = cfg.get("run", "selection")
    if sel is not None and sel not in ("exact", "rejection"):
        raise ConfigError(f"selection must be exact or rejection, got {sel!r}",
                          _line_of(text, "run", "selection"))
    method = cfg.get("run", "method")
    if method is not None and method not in ("rk4_fixed", "rk4_halving"):
        raise ConfigError(f"unknown method {method!r}", _line_of(text, "run", "method"))
    fam = cfg.get("run", "test_family")
    if fam is not None and fam not in ("default", "counting"):
        raise ConfigError(f"unknown test_family {fam!r}", _line_of(text, "run", "test_family"))
    cfg.initial_measure()  # validates masses/weights/attrs coherence for all modes


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; parsing it yields an equal RunConfig."""
    buf = io.StringIO()
    for name, items in cfg.sections:
        buf.write(f"[{name}]\n")
        for k, v in items:
            buf.write(f"{k} = {v}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()


def with_overrides(cfg: RunConfig, seed: int | None = None,
                   threads: int | None = None) -> RunConfig:
    """Apply CLI overrides, keeping the stored canonical strings consistent."""
    sections = []
    found_run = False
    for name, items in cfg.sections:
        d = dict(items)
        if name == "run":
            found_run = True
            if seed is not None:
                d["seed"] = str(seed)
            if threads is not None:
                d["threads"] = str(threads)
        sections.append((name, tuple(sorted(d.items()))))
    if not found_run and (seed is not None or threads is not None):
        d = {}
        if seed is not None:
            d["seed"] = str(seed)
        if threads is not None:
            d["threads"] = str(threads)
        sections.append(("run", tuple(sorted(d.items()))))
    return RunConfig(mode=cfg.mode, sections=tuple(sections))
