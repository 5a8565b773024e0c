"""Building configuration files.

The on-disk format is YAML with four sections: ambient, wind, zones and
paths. Unknown sections or keys are rejected so typos fail loudly instead
of silently falling back to defaults. Zone id 0 denotes outdoors; every
exterior path carries a wall tag (N/E/S/W) on its interior side, which
orients the opening for wind pressure and places it on the grid when the
zone is resolved.
"""

from __future__ import annotations

import importlib.resources
from typing import Optional

import yaml

from .errors import ConfigError
from .netflow import (
    AMBIENT_ID,
    BuildingNetwork,
    FlowPath,
    OpeningGeometry,
    Zone,
)

_ZONE_KEYS = {"id", "name", "width", "depth", "height", "air_source_kg_s"}
_PATH_KEYS = {
    "name", "kind", "from", "to", "coeff", "exponent", "width", "height",
    "wall_from", "center_from", "wall_to", "center_to", "exchange",
}
_AMBIENT_KEYS = {"temp_c"}
_WIND_KEYS = {"speed_m_s", "direction_deg"}
_SECTIONS = {"ambient", "wind", "zones", "paths"}


def _check_keys(mapping, allowed, where):
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _geom(entry: dict, side: str, where: str) -> Optional[OpeningGeometry]:
    wall = entry.get(f"wall_{side}")
    center = entry.get(f"center_{side}")
    if wall is None and center is None:
        return None
    if wall is None or center is None:
        raise ConfigError(f"{where}: wall_{side} and center_{side} go together")
    return OpeningGeometry(wall=str(wall), center=float(center))


def parse_building(text: str, source: str = "<building>") -> BuildingNetwork:
    """Parse a building configuration from YAML text."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    _check_keys(doc, _SECTIONS, source)
    for section in ("zones", "paths"):
        if section not in doc:
            raise ConfigError(f"{source}: missing section {section!r}")

    ambient = doc.get("ambient") or {}
    _check_keys(ambient, _AMBIENT_KEYS, f"{source}: ambient")
    wind = doc.get("wind") or {}
    _check_keys(wind, _WIND_KEYS, f"{source}: wind")

    zones = []
    for i, entry in enumerate(doc["zones"]):
        where = f"{source}: zones[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: expected a mapping")
        _check_keys(entry, _ZONE_KEYS, where)
        try:
            zones.append(Zone(
                id=int(entry["id"]),
                name=str(entry.get("name", f"zone_{entry['id']}")),
                width=float(entry["width"]),
                depth=float(entry["depth"]),
                height=float(entry["height"]),
                air_source=float(entry.get("air_source_kg_s", 0.0)),
            ))
        except KeyError as exc:
            raise ConfigError(f"{where}: missing key {exc}") from exc

    paths = []
    for i, entry in enumerate(doc["paths"]):
        where = f"{source}: paths[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where}: expected a mapping")
        _check_keys(entry, _PATH_KEYS, where)
        try:
            paths.append(FlowPath(
                from_zone=int(entry["from"]),
                to_zone=int(entry["to"]),
                flow_coeff=float(entry["coeff"]),
                flow_exp=float(entry["exponent"]),
                width=float(entry["width"]),
                height=float(entry["height"]),
                geom_from=_geom(entry, "from", where),
                geom_to=_geom(entry, "to", where),
                exchange=float(entry.get("exchange", 0.0)),
                kind=str(entry.get("kind", "opening")),
                name=str(entry.get("name", f"path_{i}")),
            ))
        except KeyError as exc:
            raise ConfigError(f"{where}: missing key {exc}") from exc
        if entry["from"] != AMBIENT_ID and entry["to"] != AMBIENT_ID:
            for side, end in (("from", entry["from"]), ("to", entry["to"])):
                if _geom(entry, side, where) is None:
                    raise ConfigError(
                        f"{where}: interior path needs wall_{side}/center_{side} "
                        "so either endpoint can be grid-resolved"
                    )

    return BuildingNetwork(
        zones=tuple(zones),
        paths=tuple(paths),
        wind_speed=float(wind.get("speed_m_s", 0.0)),
        wind_direction=float(wind.get("direction_deg", 0.0)),
        outdoor_temp=float(ambient.get("temp_c", 20.0)),
    )


def load_building(path: str) -> BuildingNetwork:
    """Load a building configuration from a YAML file."""
    with open(path, encoding="utf-8") as fh:
        return parse_building(fh.read(), source=path)


def seven_room_text() -> str:
    """YAML text of the packaged seven-room test building."""
    ref = importlib.resources.files("zonetrace").joinpath("data/seven_room.yaml")
    return ref.read_text(encoding="utf-8")


def seven_room() -> BuildingNetwork:
    """The packaged seven-room single-storey test building."""
    return parse_building(seven_room_text(), source="seven_room.yaml")
