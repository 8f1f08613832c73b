"""JSON Type Definition (RFC 8927) validation, restricted to the subset the
broker needs: `type` primitives, `enum`, `elements`, `properties` /
`optionalProperties`, and `nullable`.

Any schema using a keyword outside the subset is rejected at load time, and an
unresolvable schema reference denies validation outright: the validator fails
closed in every uncertain case.
"""

from __future__ import annotations

import json
import math
import re
from pathlib import Path

UNKNOWN_SCHEMA = "UnknownSchema"

_SUPPORTED_KEYS = {"type", "enum", "elements", "properties", "optionalProperties",
                   "additionalProperties", "nullable", "metadata"}

_INT_RANGES = {
    "int8": (-128, 127),
    "uint8": (0, 255),
    "int16": (-32768, 32767),
    "uint16": (0, 65535),
    "int32": (-2147483648, 2147483647),
    "uint32": (0, 4294967295),
}

_TIMESTAMP_RE = re.compile(
    r"^\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(\.\d+)?(Z|[+-]\d{2}:\d{2})$")


class SchemaError(Exception):
    """The schema itself is malformed or uses an unsupported keyword."""


def check_schema(schema: dict) -> None:
    if not isinstance(schema, dict):
        raise SchemaError("schema must be an object")
    unknown = set(schema) - _SUPPORTED_KEYS
    if unknown:
        raise SchemaError(f"unsupported schema keywords: {sorted(unknown)}")
    forms = [k for k in ("type", "enum", "elements", "properties") if k in schema]
    if "optionalProperties" in schema and "properties" not in schema:
        forms.append("optionalProperties")
    if len(forms) > 1:
        raise SchemaError(f"schema mixes forms: {forms}")
    if "type" in schema:
        if schema["type"] not in ("boolean", "string", "timestamp", "float32",
                                  "float64", *_INT_RANGES):
            raise SchemaError(f"unknown type {schema['type']!r}")
    if "enum" in schema:
        if (not isinstance(schema["enum"], list) or not schema["enum"]
                or not all(isinstance(v, str) for v in schema["enum"])):
            raise SchemaError("enum must be a non-empty list of strings")
    if "elements" in schema:
        check_schema(schema["elements"])
    for key in ("properties", "optionalProperties"):
        if key in schema:
            if not isinstance(schema[key], dict):
                raise SchemaError(f"{key} must be an object")
            for sub in schema[key].values():
                check_schema(sub)
    props = set(schema.get("properties", {}))
    opt = set(schema.get("optionalProperties", {}))
    if props & opt:
        raise SchemaError(f"properties repeated in optionalProperties: {sorted(props & opt)}")


def validate(schema: dict, value, path: str = "") -> list[str]:
    """Returns a list of error strings; empty means the value conforms."""
    if schema.get("nullable") and value is None:
        return []

    if "type" in schema:
        return _validate_type(schema["type"], value, path)

    if "enum" in schema:
        if not isinstance(value, str) or value not in schema["enum"]:
            return [f"TypeMismatch({path or '/'})"]
        return []

    if "elements" in schema:
        if not isinstance(value, list):
            return [f"TypeMismatch({path or '/'})"]
        errors: list[str] = []
        for i, item in enumerate(value):
            errors.extend(validate(schema["elements"], item, f"{path}/{i}"))
        return errors

    if "properties" in schema or "optionalProperties" in schema:
        if not isinstance(value, dict):
            return [f"TypeMismatch({path or '/'})"]
        errors = []
        props = schema.get("properties", {})
        opt = schema.get("optionalProperties", {})
        for name, sub in props.items():
            if name not in value:
                errors.append(f"MissingProperty({path}/{name})")
            else:
                errors.extend(validate(sub, value[name], f"{path}/{name}"))
        for name, sub in opt.items():
            if name in value:
                errors.extend(validate(sub, value[name], f"{path}/{name}"))
        if not schema.get("additionalProperties", False):
            for name in value:
                if name not in props and name not in opt:
                    errors.append(f"AdditionalProperty({path}/{name})")
        return errors

    # Empty form accepts anything.
    return []


def _validate_type(type_name: str, value, path: str) -> list[str]:
    label = [f"TypeMismatch({path or '/'})"]
    if type_name == "boolean":
        return [] if isinstance(value, bool) else label
    if type_name == "string":
        return [] if isinstance(value, str) else label
    if type_name == "timestamp":
        if isinstance(value, str) and _TIMESTAMP_RE.match(value):
            return []
        return label
    if type_name in ("float32", "float64"):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return []
        return label
    low, high = _INT_RANGES[type_name]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return label
    if isinstance(value, float) and (not math.isfinite(value) or value != int(value)):
        return label
    if not (low <= int(value) <= high):
        return label
    return []


_REF_RE = re.compile(r"^jtd:([A-Za-z0-9_]+\.[A-Za-z0-9_]+)$")


class SchemaRegistry:
    """Resolves `jtd:<Name>.<version>` references to `.jtd.json` files.

    The packaged schemas directory is always included; extra directories can be
    layered in front of it.
    """

    def __init__(self, extra_dirs: list[Path] | None = None):
        self._dirs = [Path(d) for d in (extra_dirs or [])]
        self._dirs.append(Path(__file__).parent / "schemas")
        self._cache: dict[str, dict] = {}

    def resolve(self, schema_ref: str) -> dict | None:
        if schema_ref in self._cache:
            return self._cache[schema_ref]
        m = _REF_RE.match(schema_ref)
        if not m:
            return None
        filename = m.group(1) + ".jtd.json"
        for directory in self._dirs:
            candidate = directory / filename
            if candidate.is_file():
                try:
                    schema = json.loads(candidate.read_text("utf-8"))
                    check_schema(schema)
                except (ValueError, SchemaError):
                    return None  # unusable schema: fail closed
                self._cache[schema_ref] = schema
                return schema
        return None

    def validate_ref(self, schema_ref: str, value) -> list[str]:
        schema = self.resolve(schema_ref)
        if schema is None:
            return [UNKNOWN_SCHEMA]
        return validate(schema, value)
