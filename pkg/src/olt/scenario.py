"""Declarative scenario files: JSON schema, validation and object construction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema

from .linksim import Amplifier, LinkSpec, LumpedLoss, PdlElement, Span, Voa
from .tomography import EstimatorConfig
from .txgen import ConstellationSpec, TxConfig
from .waveforms import FiberParams, InvalidInput, PositionGrid

C_BAND_HZ = (184e12, 200e12)  # generous sanity range around the C band

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}

_ELEMENT = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["amplifier", "lumped_loss", "pdl", "voa"]},
        "gain_db": _NUM,
        "noise_figure_db": _NUM,
        "mode": {"enum": ["fixed_gain", "fixed_output_power_dbm"]},
        "output_power_dbm": _NUM,
        "loss_db": _NONNEG,
        "pdl_db": _NONNEG,
        "axis_theta": _NUM,
        "axis_phi": _NUM,
        "position_km": _NONNEG,
        "schedule": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        },
    },
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "olt scenario",
    "type": "object",
    "required": ["tx", "link"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "tx": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "constellation": {"enum": ["qpsk", "qam16", "pcs_qam64", "gaussian"]},
                "shaping_nu": _NONNEG,
                "symbol_rate": _POS,
                "oversampling": {"type": "integer", "minimum": 2},
                "rolloff": {"type": "number", "minimum": 0, "maximum": 1},
                "n_symbols": {"type": "integer", "minimum": 1},
                "launch_power_dbm": _NUM,
                "center_frequency": _POS,
            },
        },
        "link": {
            "type": "object",
            "required": ["spans"],
            "additionalProperties": False,
            "properties": {
                "spans": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["length_km"],
                        "additionalProperties": False,
                        "properties": {
                            "length_km": _POS,
                            "alpha_db_per_km": _NONNEG,
                            "dispersion_D": _NUM,
                            "gamma": _NONNEG,
                            "elements": {"type": "array", "items": _ELEMENT},
                        },
                    },
                },
                "post_elements": {"type": "array", "items": _ELEMENT},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"step_km": _POS, "n_realizations": {"type": "integer", "minimum": 1}},
        },
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "delta_z_km": _POS,
                "lambda_reg": _NONNEG,
                "reg_matrix": {"enum": ["identity", "second_difference"]},
                "cd_coefficient": _NUM,
                "beta2": _NUM,
                "gamma_nominal": _POS,
                "mode": {"enum": ["single_pol", "dual_pol"]},
                "edge_guard": {"oneOf": [{"const": "auto"}, {"type": "integer", "minimum": 0}]},
                "kernel_subsamples": {"type": "integer", "minimum": 1},
            },
        },
        "dimensions": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "frequencies": {"type": "array", "items": _POS, "minItems": 1},
                "dispersion_values": {"type": "array", "items": _NUM, "minItems": 1},
                "dispersion_slope": _NUM,
                "capture_interval_s": _POS,
                "n_captures": {"type": "integer", "minimum": 1},
                "window": {"type": "integer", "minimum": 1},
                "sop_sweep": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "grid_theta": {"type": "integer", "minimum": 1},
                        "grid_phi": {"type": "integer", "minimum": 1},
                    },
                },
                "averaging": {
                    "type": "array",
                    "items": {"enum": ["polarization", "time", "frequency"]},
                    "uniqueItems": True,
                },
            },
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "anomaly_threshold_db": _POS,
                "edge_guard_km": _NONNEG,
                "correlation": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["dz_values"],
                    "properties": {
                        "z_km": _NONNEG,
                        "dz_values": {"type": "array", "items": _NONNEG, "minItems": 1},
                        "length_km": _POS,
                    },
                },
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"format": {"enum": ["csv", "csv+plots"]}},
        },
    },
}


class ConfigError(ValueError):
    """Invalid scenario file; ``str()`` carries line/field diagnostics."""


@dataclass
class ScenarioConfig:
    """Everything one simulate/estimate/report run needs."""

    tx: TxConfig
    link: LinkSpec
    estimator: EstimatorConfig
    step_km: float = 0.2
    n_realizations: int = 1
    seed: int = 0
    name: str = "scenario"
    dimensions: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    output_format: str = "csv"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def averaging(self) -> tuple[str, ...]:
        return tuple(self.dimensions.get("averaging", ("polarization", "time")))

    def with_seed(self, seed: int) -> "ScenarioConfig":
        if not 0 <= int(seed) < 2**64:
            raise ConfigError("seed: must fit in an unsigned 64-bit integer")
        tx = self.tx.with_(seed=int(seed))
        return ScenarioConfig(
            tx, self.link, self.estimator, self.step_km, self.n_realizations, int(seed), self.name,
            self.dimensions, self.analysis, self.output_format, self.raw,
        )


def _line_of(text: str, path: list) -> int | None:
    """Best-effort line number of the JSON member addressed by ``path``."""
    pos = 0
    found = None
    for key in path:
        if isinstance(key, str):
            k = text.find(json.dumps(key), pos)
            if k < 0:
                break
            pos = k
            found = k
    if found is None:
        return None
    return text.count("\n", 0, found) + 1


def _field_name(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else p)
    return out or "<root>"


def validate(data: Any, text: str = "") -> None:
    """Raise ConfigError listing every schema violation."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(data), key=lambda e: list(map(str, e.path)))
    if not errors:
        return
    msgs = []
    for e in errors:
        line = _line_of(text, list(e.path)) if text else None
        where = f"line {line}: " if line else ""
        msgs.append(f"{where}{_field_name(list(e.path))}: {e.message}")
    raise ConfigError("\n".join(msgs))


def _element(d: dict, where: str):
    kind = d["type"]
    try:
        if kind == "amplifier":
            return Amplifier(
                d.get("gain_db", 10.0), d.get("noise_figure_db", 5.0), d.get("mode", "fixed_gain"), d.get("output_power_dbm")
            )
        if kind == "lumped_loss":
            return LumpedLoss(d.get("loss_db", 0.0), d.get("position_km", 0.0))
        if kind == "pdl":
            return PdlElement(d.get("pdl_db", 0.0), d.get("axis_theta", 0.0), d.get("axis_phi", 0.0), d.get("position_km", 0.0))
        return Voa(tuple(tuple(x) for x in d.get("schedule", [[0.0, 0.0]])), d.get("position_km", 0.0))
    except InvalidInput as exc:
        raise ConfigError(f"{where}: {exc}") from None


def build(data: dict) -> ScenarioConfig:
    """Construct objects from already schema-valid data; semantic checks raise ConfigError."""
    t = data["tx"]
    seed = int(data.get("seed", 0))
    try:
        tx = TxConfig(
            constellation=ConstellationSpec(t.get("constellation", "pcs_qam64"), t.get("shaping_nu")),
            symbol_rate=t.get("symbol_rate", 128e9),
            oversampling=t.get("oversampling", 8),
            rolloff=t.get("rolloff", 0.1),
            n_symbols=t.get("n_symbols", 1 << 16),
            launch_power_dbm=t.get("launch_power_dbm", 3.0),
            seed=seed,
            center_frequency=t.get("center_frequency", 193.4e12),
        )
    except InvalidInput as exc:
        raise ConfigError(f"tx: {exc}") from None
    spans = []
    for i, s in enumerate(data["link"]["spans"]):
        where = f"link.spans[{i}]"
        try:
            fiber = FiberParams(s.get("alpha_db_per_km", 0.2), s.get("dispersion_D", 17.0), s.get("gamma", 1.3), s["length_km"])
        except InvalidInput as exc:
            raise ConfigError(f"{where}: {exc}") from None
        els = tuple(_element(e, f"{where}.elements[{k}]") for k, e in enumerate(s.get("elements", [])))
        try:
            spans.append(Span(fiber, els))
        except InvalidInput as exc:
            raise ConfigError(f"{where}: {exc}") from None
    post = tuple(_element(e, f"link.post_elements[{k}]") for k, e in enumerate(data["link"].get("post_elements", [])))
    link = LinkSpec(tuple(spans), post)

    e = data.get("estimator", {})
    try:
        est = EstimatorConfig(
            grid=PositionGrid.uniform(link.length_km, e.get("delta_z_km", 1.0)),
            lambda_reg=e.get("lambda_reg", 0.0),
            reg_matrix=e.get("reg_matrix", "identity"),
            cd_coefficient=e.get("cd_coefficient", link.spans[0].fiber.dispersion_D),
            gamma_nominal=e.get("gamma_nominal", link.spans[0].fiber.gamma or 1.3),
            mode=e.get("mode", "dual_pol"),
            beta2=e.get("beta2"),
            edge_guard=e.get("edge_guard", "auto"),
            kernel_subsamples=e.get("kernel_subsamples", 1),
        )
    except InvalidInput as exc:
        raise ConfigError(f"estimator: {exc}") from None

    sim = data.get("simulation", {})
    step = float(sim.get("step_km", 0.2))
    dims = dict(data.get("dimensions", {}))
    for f in dims.get("frequencies", []):
        if not C_BAND_HZ[0] <= f <= C_BAND_HZ[1]:
            raise ConfigError(f"dimensions.frequencies: {f} Hz is outside {C_BAND_HZ[0]:.4g}..{C_BAND_HZ[1]:.4g} Hz")
    if "frequencies" in dims and "dispersion_values" in dims:
        raise ConfigError("dimensions: give frequencies or dispersion_values, not both")
    if "window" in dims and dims["window"] % 2 == 0:
        raise ConfigError("dimensions.window: must be odd")
    if dims.get("window", 1) > dims.get("n_captures", 1):
        raise ConfigError("dimensions.window: longer than n_captures")
    # every fiber section must be a whole number of steps
    for i, s in enumerate(link.spans):
        cuts = sorted({0.0, s.fiber.length_km} | {el.position_km for el in s.elements_at_input})
        for a, b in zip(cuts, cuts[1:]):
            n = round((b - a) / step)
            if n < 1 or abs(n * step - (b - a)) > 1e-9 * max(b - a, 1.0):
                raise ConfigError(f"link.spans[{i}]: section {a}..{b} km is not a multiple of simulation.step_km={step}")
    corr = data.get("analysis", {}).get("correlation")
    if corr is not None:
        top = corr.get("z_km", 0.0) + max(corr["dz_values"])
        if top > corr.get("length_km", link.length_km) + 1e-9:
            raise ConfigError("analysis.correlation: z_km + max(dz_values) exceeds the length")
    return ScenarioConfig(
        tx, link, est, step, int(sim.get("n_realizations", 1)), seed, data.get("name", "scenario"),
        dims, dict(data.get("analysis", {})), data.get("outputs", {}).get("format", "csv"), data,
    )


def load(path) -> ScenarioConfig:
    """Read, validate and build a scenario file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from None
    validate(data, text)
    return build(data)


def bundled(name: str) -> Path:
    """Path of a scenario shipped with the package."""
    p = Path(__file__).parent / "scenarios" / f"{name}.json"
    if not p.exists():
        raise ConfigError(f"no bundled scenario {name!r}")
    return p


def bundled_names() -> list[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "scenarios").glob("*.json"))
