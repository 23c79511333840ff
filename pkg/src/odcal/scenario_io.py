"""Scenario files: YAML schema, validation, load and save.

The format is documented in docs/formats.md. Validation walks the YAML
node tree so schema errors carry the offending line number, and unknown
keys are rejected rather than ignored.
"""

from __future__ import annotations

import numpy as np
import yaml

from .simulator.network import Network, Route, Segment, Sensor
from .simulator.scenarios import DemandModel, Scenario

__all__ = ["SchemaError", "load_scenario", "save_scenario", "scenario_to_dict"]


class SchemaError(ValueError):
    """Scenario file violates the schema; message carries file:line."""


_SCALARS = {
    "str": (str,),
    "int": (int,),
    "float": (int, float),
    "bool": (bool,),
}

# section -> {key: type spec}; "list:..." marks sequences
_SCHEMA = {
    "name": "str",
    "horizon": {"interval_seconds": "float", "intervals": "int",
                "substeps": "int"},
    "network": {
        "min_speed_ms": "float",
        "segments": "list:segment",
        "sensors": "list:sensor",
        "routes": "list:route",
    },
    "demand": {"profile": "matrix", "sigma": "vector", "rho": "float"},
    "exact_sensors": "bool",
    "filter": {"degree": "int", "gradient": "str", "constraint": "str",
               "delta_frac": "float", "delta_floor": "float",
               "ar_max_order": "int", "gain_regularization": "float"},
    "splits": {"train": "int", "validation": "int", "test": "int"},
    "seeds": {"demand": "int", "train_base": "int"},
}

_ITEM_SCHEMAS = {
    "segment": {"id": "str", "length_m": "float", "free_flow_mph": "float",
                "capacity_vph": "float", "jam_veh": "float"},
    "sensor": {"id": "str", "segment": "str", "position": "str"},
    "route": {"od": "str", "segments": "idlist"},
}

_REQUIRED = ("name", "horizon", "network", "demand")


def _fail(node, message, path):
    mark = getattr(node, "start_mark", None)
    where = f"{path}:{mark.line + 1}" if mark is not None else path
    raise SchemaError(f"{where}: {message}")


def _scalar(node, kind, path):
    if not isinstance(node, yaml.ScalarNode):
        _fail(node, f"expected a {kind} scalar", path)
    value = yaml.safe_load(node.value)
    if kind == "bool":
        if not isinstance(value, bool):
            _fail(node, f"expected a bool, got {node.value!r}", path)
        return value
    if isinstance(value, bool) or not isinstance(value, _SCALARS[kind]):
        _fail(node, f"expected a {kind}, got {node.value!r}", path)
    return value


def _mapping_items(node, path):
    if not isinstance(node, yaml.MappingNode):
        _fail(node, "expected a mapping", path)
    return [(k.value, k, v) for k, v in node.value]


def _check_mapping(node, schema, path):
    out = {}
    for key, key_node, value_node in _mapping_items(node, path):
        if key not in schema:
            _fail(key_node, f"unknown key {key!r}", path)
        spec = schema[key]
        if isinstance(spec, dict):
            out[key] = _check_mapping(value_node, spec, path)
        elif spec.startswith("list:"):
            item_schema = _ITEM_SCHEMAS[spec.split(":", 1)[1]]
            if not isinstance(value_node, yaml.SequenceNode):
                _fail(value_node, f"{key!r} must be a list", path)
            out[key] = [_check_mapping(item, item_schema, path)
                        for item in value_node.value]
        elif spec == "matrix":
            if not isinstance(value_node, yaml.SequenceNode):
                _fail(value_node, f"{key!r} must be a list of rows", path)
            rows = []
            for row in value_node.value:
                if not isinstance(row, yaml.SequenceNode):
                    _fail(row, "matrix row must be a list", path)
                rows.append([_scalar(c, "float", path) for c in row.value])
            out[key] = rows
        elif spec == "vector":
            if isinstance(value_node, yaml.SequenceNode):
                out[key] = [_scalar(c, "float", path)
                            for c in value_node.value]
            else:
                out[key] = _scalar(value_node, "float", path)
        elif spec == "idlist":
            if not isinstance(value_node, yaml.SequenceNode):
                _fail(value_node, f"{key!r} must be a list", path)
            out[key] = [_scalar(c, "str", path) for c in value_node.value]
        else:
            out[key] = _scalar(value_node, spec, path)
    return out


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file."""
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        try:
            root = yaml.compose(fh)
        except yaml.YAMLError as exc:
            raise SchemaError(f"{path}: not valid YAML ({exc})") from exc
    if root is None:
        raise SchemaError(f"{path}: empty scenario file")
    data = _check_mapping(root, _SCHEMA, path)
    for key in _REQUIRED:
        if key not in data:
            raise SchemaError(f"{path}: missing required section {key!r}")
    try:
        return _build_scenario(data)
    except (ValueError, KeyError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def _build_scenario(data: dict) -> Scenario:
    horizon = data["horizon"]
    netspec = data["network"]
    segments = tuple(
        Segment(s["id"], float(s["length_m"]), float(s["free_flow_mph"]),
                float(s["capacity_vph"]), float(s["jam_veh"]))
        for s in netspec.get("segments", []))
    sensors = []
    for s in netspec.get("sensors", []):
        position = s.get("position", "exit")
        if position not in ("entry", "exit"):
            raise ValueError(
                f"sensor {s.get('id')}: position must be entry or exit")
        sensors.append(Sensor(s["id"], s["segment"],
                              at_entry=(position == "entry")))
    routes = tuple(Route(r["od"], tuple(r["segments"]))
                   for r in netspec.get("routes", []))
    network = Network(segments=segments, routes=routes,
                      sensors=tuple(sensors),
                      min_speed_ms=float(netspec.get("min_speed_ms", 0.5)))
    demand_spec = data["demand"]
    profile = np.asarray(demand_spec["profile"], dtype=float)
    if profile.ndim != 2 or profile.shape != (horizon["intervals"],
                                              network.n_ods):
        raise ValueError(
            f"demand profile must be {horizon['intervals']} x "
            f"{network.n_ods}, got {profile.shape}")
    sigma = np.asarray(demand_spec.get("sigma", 0.0), dtype=float)
    demand = DemandModel(profile=profile, sigma=sigma,
                         rho=float(demand_spec.get("rho", 0.0)))
    defaults = {"train": 1, "validation": 0, "test": 1}
    defaults.update(data.get("splits", {}))
    seeds = {"demand": 0}
    seeds.update(data.get("seeds", {}))
    return Scenario(
        name=data["name"], network=network,
        interval_seconds=float(horizon["interval_seconds"]),
        n_intervals=int(horizon["intervals"]),
        substeps=int(horizon["substeps"]),
        demand=demand,
        exact_sensors=bool(data.get("exact_sensors", False)),
        filter_defaults=dict(data.get("filter", {})),
        splits=defaults, seeds=seeds)


def scenario_to_dict(scenario: Scenario) -> dict:
    """Plain-dict form of a scenario, ready for YAML dumping."""
    net = scenario.network
    return {
        "name": scenario.name,
        "horizon": {
            "interval_seconds": float(scenario.interval_seconds),
            "intervals": int(scenario.n_intervals),
            "substeps": int(scenario.substeps),
        },
        "network": {
            "min_speed_ms": float(net.min_speed_ms),
            "segments": [
                {"id": s.segment_id, "length_m": float(s.length_m),
                 "free_flow_mph": float(s.free_flow_mph),
                 "capacity_vph": float(s.capacity_vph),
                 "jam_veh": float(s.jam_storage_veh)}
                for s in net.segments],
            "sensors": [
                {"id": s.sensor_id, "segment": s.segment,
                 "position": "entry" if s.at_entry else "exit"}
                for s in net.sensors],
            "routes": [
                {"od": r.od_id, "segments": list(r.segments)}
                for r in net.routes],
        },
        "demand": {
            "profile": [[float(v) for v in row]
                        for row in scenario.demand.profile],
            "sigma": [float(v) for v in scenario.demand.sigma],
            "rho": float(scenario.demand.rho),
        },
        "exact_sensors": bool(scenario.exact_sensors),
        "filter": dict(scenario.filter_defaults),
        "splits": dict(scenario.splits),
        "seeds": dict(scenario.seeds),
    }


def save_scenario(path, scenario: Scenario):
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(scenario_to_dict(scenario), fh, sort_keys=False,
                       default_flow_style=None, width=100)
