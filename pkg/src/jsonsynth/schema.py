"""Domain types, JSON extraction, the binary schema validator and field flattening."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional

from .errors import NoJsonFound, ParseError, SchemaError

KINDS = ("text", "number", "boolean", "array-of-number", "object", "any")
UNKNOWN_MARKER = "?"

_TOKEN_RE = re.compile(r'[{}\[\],:"]|[^\s{}\[\],:"]+')


@dataclass(frozen=True)
class FieldSpec:
    path: str
    kind: str
    required: bool = True
    pattern: Optional[str] = None

    def __post_init__(self):
        if not self.path:
            raise SchemaError("field path must be non-empty")
        if self.kind not in KINDS:
            raise SchemaError(f"unknown kind {self.kind!r} for {self.path!r}")
        if self.pattern is not None:
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise SchemaError(f"pattern for {self.path!r} does not compile: {exc}") from exc

    @property
    def keys(self) -> list[str]:
        return self.path.split(".")


@dataclass(frozen=True)
class SchemaSpec:
    name: str
    fields: tuple[FieldSpec, ...]
    allow_unknown_marker: bool = False

    def __post_init__(self):
        seen = set()
        for spec in self.fields:
            if spec.path in seen:
                raise SchemaError(f"duplicate field path {spec.path!r}")
            seen.add(spec.path)

    @property
    def field_names(self) -> list[str]:
        return [spec.path for spec in self.fields]

    @property
    def top_level_keys(self) -> set[str]:
        return {spec.keys[0] for spec in self.fields}

    @classmethod
    def from_dict(cls, doc: dict) -> "SchemaSpec":
        try:
            fields = tuple(
                FieldSpec(
                    path=f["path"],
                    kind=f["kind"],
                    required=bool(f.get("required", True)),
                    pattern=f.get("pattern"),
                )
                for f in doc["fields"]
            )
            return cls(name=doc["name"], fields=fields,
                       allow_unknown_marker=bool(doc.get("allow_unknown_marker", False)))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema document: {exc}") from exc

    def to_dict(self) -> dict:
        out = []
        for spec in self.fields:
            item = {"path": spec.path, "kind": spec.kind, "required": spec.required}
            if spec.pattern is not None:
                item["pattern"] = spec.pattern
            out.append(item)
        return {"name": self.name, "allow_unknown_marker": self.allow_unknown_marker, "fields": out}


def load_schema(path: str | Path) -> SchemaSpec:
    with open(path, encoding="utf-8") as fh:
        return SchemaSpec.from_dict(json.load(fh))


@dataclass
class Sample:
    id: str
    prompt_id: str
    raw_text: str
    json_value: Any = None
    tokens: list[str] = field(default_factory=list)
    parsed: bool = False

    @classmethod
    def from_text(cls, id: str, raw_text: str, prompt_id: str = "") -> "Sample":
        try:
            value, parsed = extract_json(raw_text), True
        except (NoJsonFound, ParseError):
            value, parsed = None, False
        return cls(id=id, prompt_id=prompt_id, raw_text=raw_text,
                   json_value=value, tokens=tokenize(raw_text), parsed=parsed)


@dataclass(frozen=True)
class Prompt:
    id: str
    text: str
    iteration: int = 1
    parent_id: Optional[str] = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("prompt text must be non-empty")
        if self.iteration < 1:
            raise ValueError("iteration starts at 1")
        if self.iteration == 1 and self.parent_id is not None:
            raise ValueError("first-iteration prompts have no parent")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and emit ``{ } [ ] , : "`` as their own tokens."""
    return _TOKEN_RE.findall(text.lower())


def _match_region(text: str, start: int) -> Optional[int]:
    """Index one past the bracket closing ``text[start]``, or None if it never balances."""
    closers = {"{": "}", "[": "]"}
    stack = [closers[text[start]]]
    in_string = escaped = False
    for i in range(start + 1, len(text)):
        ch = text[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch in closers:
            stack.append(closers[ch])
        elif ch in "}]":
            if ch != stack.pop():
                return None
            if not stack:
                return i + 1
    return None


def extract_json(raw_text: str) -> Any:
    """Return the first balanced JSON object/array embedded in ``raw_text``.

    Text that is already a complete JSON document is parsed directly.
    Raises NoJsonFound when no region balances and ParseError when the first
    balanced region is not valid JSON.
    """
    try:
        return json.loads(raw_text)
    except (json.JSONDecodeError, ValueError):
        pass
    for start, ch in enumerate(raw_text):
        if ch not in "{[":
            continue
        end = _match_region(raw_text, start)
        if end is None:
            continue
        region = raw_text[start:end]
        try:
            return json.loads(region)
        except json.JSONDecodeError as exc:
            raise ParseError(f"balanced region at offset {start} is not valid JSON: {exc}") from exc
    raise NoJsonFound("no balanced JSON object or array in text")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _kind_ok(value: Any, kind: str) -> bool:
    if kind == "any":
        return True
    if kind == "text":
        return isinstance(value, str)
    if kind == "number":
        return _is_number(value)
    if kind == "boolean":
        return isinstance(value, bool)
    if kind == "object":
        return isinstance(value, dict)
    if kind == "array-of-number":
        return isinstance(value, list) and all(_is_number(v) for v in value)
    return False


def _lookup(record: dict, keys: list[str]) -> tuple[bool, Any]:
    node: Any = record
    for key in keys:
        if not isinstance(node, dict) or key not in node:
            return False, None
        node = node[key]
    return True, node


def _record_valid(record: Any, schema: SchemaSpec) -> bool:
    if not isinstance(record, dict):
        return False
    for spec in schema.fields:
        present, value = _lookup(record, spec.keys)
        if not present:
            if spec.required:
                return False
            continue
        if schema.allow_unknown_marker and value == UNKNOWN_MARKER:
            continue
        if not _kind_ok(value, spec.kind):
            return False
        if spec.pattern is not None and not isinstance(value, (dict, list)):
            if re.search(spec.pattern, canonical_value(value)) is None:
                return False
    return True


def validate(json_value: Any, schema: SchemaSpec) -> bool:
    """Binary validator. A top-level array is valid iff it is non-empty and every element is."""
    if isinstance(json_value, list):
        return bool(json_value) and all(_record_valid(item, schema) for item in json_value)
    return _record_valid(json_value, schema)


def records(json_value: Any) -> list[Any]:
    """The individual records a sample holds: array elements, or the value itself."""
    if json_value is None:
        return []
    if isinstance(json_value, list):
        return list(json_value)
    return [json_value]


def canonical_value(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return str(int(value)) if value.is_integer() else repr(value)
    return str(value).lower()


def _flatten(value: Any, prefix: str) -> Iterator[tuple[str, str]]:
    if isinstance(value, dict):
        for key, child in value.items():
            yield from _flatten(child, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(value, list):
        for i, child in enumerate(value):
            yield from _flatten(child, f"{prefix}.{i}" if prefix else str(i))
    else:
        yield prefix, canonical_value(value)


def extract_fields(json_value: Any) -> set[tuple[str, str]]:
    return set(_flatten(json_value, ""))
