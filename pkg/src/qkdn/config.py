"""Topology configuration: JSON schema, validation with line-level
diagnostics, and the 16-node reference topology."""

from __future__ import annotations

import copy
import json
import re
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .domain import QkdnError

NODE_TYPES = ("USER", "ACCESS", "CARRIER", "DATACENTER")
MODES = ("OTP", "AES256GCM")

_link = {
    "type": "object",
    "required": ["id", "a", "b", "skr_bps", "qber_pct"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "a": {"type": "string"}, "b": {"type": "string"},
        "skr_bps": {"type": "number", "minimum": 0},
        "skr_jitter": {"type": "number", "minimum": 0},
        "qber_pct": {"type": "number", "minimum": 0, "maximum": 50},
        "qber_jitter": {"type": "number", "minimum": 0},
        "initial_state": {"enum": ["UP", "DOWN"]},
        "assumed": {"type": "boolean"},
        "virtual": {"type": "boolean"},
    },
}

SCHEMA: dict[str, Any] = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "seed", "nodes", "links", "saes", "profiles"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "nodes": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["id", "type"], "additionalProperties": False,
            "properties": {
                "id": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                "type": {"enum": list(NODE_TYPES)},
                "components": {"type": "array", "items": {"type": "string"}},
                "virtual": {"type": "boolean"},
            }}},
        "links": {"type": "array", "items": _link},
        "saes": {"type": "array", "items": {
            "type": "object", "required": ["id", "node", "account"], "additionalProperties": False,
            "properties": {"id": {"type": "string"}, "node": {"type": "string"},
                           "account": {"type": "string", "minLength": 1},
                           "secret": {"type": "string"}}}},
        "profiles": {"type": "array", "items": {
            "type": "object", "required": ["account_id"], "additionalProperties": False,
            "properties": {
                "account_id": {"type": "string"},
                "allowed_sae_pairs": {"type": "array", "items": {
                    "type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2}},
                "max_keys_per_day": {"type": "integer", "minimum": 0},
                "max_key_bits": {"type": "integer", "minimum": 8},
                "payment_valid": {"type": "boolean"}}}},
        "cipher_modes": {"type": "object", "additionalProperties": False, "properties": {
            "ukms_leg": {"enum": list(MODES)}, "carrier": {"enum": list(MODES)},
            "akms_peer": {"enum": list(MODES)}}},
        "transport": {"type": "object", "additionalProperties": False, "properties": {
            "latency_ms": {"type": "number", "minimum": 0},
            "latency_std_ms": {"type": "number", "minimum": 0}}},
        "kms": {"type": "object", "additionalProperties": False, "properties": {
            "capacity_bits": {"type": "integer", "minimum": 256},
            "low_watermark_bits": {"type": "integer", "minimum": 0},
            "max_hops": {"type": "integer", "minimum": 1},
            "key_wait_timeout_s": {"type": "number", "minimum": 0},
            "status_interval_s": {"type": "number", "exclusiveMinimum": 0},
            "max_sessions": {"type": "integer", "minimum": 1},
            "retries": {"type": "integer", "minimum": 0},
            "retry_base_s": {"type": "number", "exclusiveMinimum": 0},
            "session_timeout_s": {"type": "number", "exclusiveMinimum": 0},
            "ukms_buffer": {"type": "integer", "minimum": 1},
            "rng_reseed_interval": {"type": "integer", "minimum": 1}}},
        "controller": {"type": "object", "additionalProperties": False, "properties": {
            "w_fixed": {"type": "number", "exclusiveMinimum": 0},
            "alpha": {"type": "number", "minimum": 0},
            "beta": {"type": "number", "minimum": 0},
            "epsilon": {"type": "number", "exclusiveMinimum": 0},
            "install_timeout_s": {"type": "number", "exclusiveMinimum": 0},
            "proactive": {"type": "boolean"}}},
        "aaa": {"type": "object", "additionalProperties": False, "properties": {
            "mode": {"enum": ["strict", "permissive"]}}},
        "manager": {"type": "object", "additionalProperties": False, "properties": {
            "heartbeat_interval_s": {"type": "number", "exclusiveMinimum": 0},
            "missed_heartbeats": {"type": "integer", "minimum": 1}}},
        "link_tick_s": {"type": "number", "exclusiveMinimum": 0},
        "secrets": {"type": "object", "additionalProperties": False, "properties": {
            "master": {"type": "string", "pattern": "^[0-9a-f]{32,}$"}}},
    },
}

DEFAULTS: dict[str, Any] = {
    "cipher_modes": {"ukms_leg": "AES256GCM", "carrier": "OTP", "akms_peer": "OTP"},
    "transport": {"latency_ms": 5.0, "latency_std_ms": 0.0},
    "kms": {"capacity_bits": 1 << 24, "low_watermark_bits": 0, "max_hops": 32,
            "key_wait_timeout_s": 10.0, "status_interval_s": 30.0, "max_sessions": 1024,
            "retries": 3, "retry_base_s": 0.2, "session_timeout_s": 60.0, "ukms_buffer": 16,
            "rng_reseed_interval": 4096},
    "controller": {"w_fixed": 1, "alpha": 100000, "beta": 10000, "epsilon": 1,
                   "install_timeout_s": 0.5, "proactive": False},
    "aaa": {"mode": "strict"},
    "manager": {"heartbeat_interval_s": 30.0, "missed_heartbeats": 3},
    "link_tick_s": 30.0,
    "secrets": {"master": "00112233445566778899aabbccddeeff"},
}


class ConfigInvalid(QkdnError):
    code = "CONFIG_INVALID"

    def __init__(self, diagnostics: list[str]) -> None:
        self.diagnostics = diagnostics
        super().__init__(detail="; ".join(diagnostics))


# -- position locator --------------------------------------------------------

_WS = re.compile(r"[ \t\n\r]*")
_NUM = re.compile(r"-?(?:0|[1-9]\d*)(?:\.\d+)?(?:[eE][+-]?\d+)?")


def value_offsets(text: str) -> dict[tuple, int]:
    """Character offset of every value in a JSON document, keyed by path."""
    out: dict[tuple, int] = {}

    def skip(i: int) -> int:
        return _WS.match(text, i).end()

    def value(i: int, path: tuple) -> int:
        i = skip(i)
        out[path] = i
        ch = text[i]
        if ch == "{":
            i = skip(i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = json.decoder.scanstring(text, skip(i) + 1)
                i = skip(i) + 1  # colon
                out.setdefault(path + (key,), skip(i))
                i = skip(value(i, path + (key,)))
                if text[i] == "}":
                    return i + 1
                i += 1
        if ch == "[":
            i = skip(i + 1)
            if text[i] == "]":
                return i + 1
            n = 0
            while True:
                i = skip(value(i, path + (n,)))
                n += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        if ch == '"':
            return json.decoder.scanstring(text, i + 1)[1]
        for lit in ("true", "false", "null"):
            if text.startswith(lit, i):
                return i + len(lit)
        return _NUM.match(text, i).end()

    value(0, ())
    return out


def line_of(text: str, path: tuple) -> int:
    offsets = value_offsets(text)
    while path not in offsets and path:
        path = path[:-1]
    return text.count("\n", 0, offsets.get(path, 0)) + 1


# -- validation ----------------------------------------------------------------

def with_defaults(cfg: dict) -> dict:
    out = copy.deepcopy(cfg)
    for key, default in DEFAULTS.items():
        if isinstance(default, dict):
            out[key] = {**default, **out.get(key, {})}
        else:
            out.setdefault(key, default)
    return out


def semantic_errors(cfg: dict) -> list[tuple[tuple, str]]:
    errs: list[tuple[tuple, str]] = []
    nodes = {n["id"]: n for n in cfg["nodes"]}
    if len(nodes) != len(cfg["nodes"]):
        errs.append((("nodes",), "duplicate node id"))
    for i, n in enumerate(cfg["nodes"]):
        comps = set(n.get("components", default_components(n["type"])))
        if n["type"] == "USER" and "UKMS" not in comps:
            errs.append((("nodes", i), f"user node {n['id']} must host a UKMS"))
        if n["type"] == "ACCESS" and not {"AKMS", "CKMS"} <= comps:
            errs.append((("nodes", i), f"access node {n['id']} must host AKMS and CKMS"))
    link_ids = set()
    for i, link in enumerate(cfg["links"]):
        if link["id"] in link_ids:
            errs.append((("links", i, "id"), f"duplicate link id {link['id']}"))
        link_ids.add(link["id"])
        for end in ("a", "b"):
            if link[end] not in nodes:
                errs.append((("links", i, end), f"unknown node {link[end]}"))
    for i, sae in enumerate(cfg["saes"]):
        if nodes.get(sae["node"], {}).get("type") != "USER":
            errs.append((("saes", i, "node"), f"SAE {sae['id']} must attach to a USER node"))
    if not errs and not connected(cfg):
        errs.append((("links",), "graph is not connected with all links UP"))
    return errs


def default_components(node_type: str) -> list[str]:
    return {"USER": ["UKMS"], "ACCESS": ["AKMS", "CKMS"], "CARRIER": ["CKMS"],
            "DATACENTER": ["CONTROLLER", "MANAGER", "AAA"]}[node_type]


def connected(cfg: dict) -> bool:
    ids = [n["id"] for n in cfg["nodes"] if n["type"] != "DATACENTER"]
    adj: dict[str, set[str]] = {n: set() for n in ids}
    for link in cfg["links"]:
        adj.setdefault(link["a"], set()).add(link["b"])
        adj.setdefault(link["b"], set()).add(link["a"])
    seen, stack = set(), ids[:1]
    while stack:
        n = stack.pop()
        if n not in seen:
            seen.add(n)
            stack.extend(adj.get(n, ()))
    return seen >= set(ids)


def validate_config(data: dict, text: str | None = None) -> dict:
    """Validate and fill defaults; raises ConfigInvalid with ``line N: ...`` entries."""
    if text is None:
        text = json.dumps(data, indent=2)
    diags: list[str] = []
    validator = jsonschema.Draft202012Validator(SCHEMA)
    for err in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path))):
        path = tuple(err.absolute_path)
        where = "/".join(map(str, path)) or "<root>"
        diags.append(f"line {line_of(text, path)}: {where}: {err.message}")
    if not diags:
        for path, message in semantic_errors(data):
            diags.append(f"line {line_of(text, path)}: {'/'.join(map(str, path))}: {message}")
    if diags:
        raise ConfigInvalid(diags)
    return with_defaults(data)


def load_config(path: str | Path) -> dict:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid([f"line {exc.lineno}: {exc.msg}"]) from None
    return validate_config(data, text)


# -- reference topology ----------------------------------------------------------

# Measured links: (skr kb/s mean, std, qber % mean, std).
MEASURED_LINKS = {
    "4-5": (2.0, 0.1, 2.4, 0.5),
    "7-8": (22.7, 3.7, 5.4, 0.3),
    "8-9": (1.2, 0.1, 1.7, 0.5),
    "9-10": (0.3, 0.1, 1.6, 0.5),
    "10-11": (21.3, 1.9, 4.5, 0.3),
    "11-12": (2.2, 0.1, 1.6, 0.5),
    "12-13": (11.8, 2.6, 5.6, 0.4),
    "13-14": (2.0, 0.4, 1.3, 0.6),
}
UNMEASURED_LINKS = ("1-2", "2-3", "3-4", "5-6", "6-7", "14-15")
BYPASS_LINKS = ("7-16", "16-8")


def median_link_parameters() -> tuple[float, float, float, float]:
    """Medians over the measured links, column by column; used for links
    with no measurement."""
    cols = list(zip(*MEASURED_LINKS.values()))
    return tuple(statistics.median(c) for c in cols)  # type: ignore[return-value]


def _link_entry(link_id: str, params, *, assumed: bool, state: str = "UP",
                virtual: bool = False) -> dict:
    skr, skr_std, qber, qber_std = params
    a, b = link_id.split("-")
    entry = {"id": link_id, "a": f"n{a}", "b": f"n{b}", "skr_bps": round(skr * 1000, 6),
             "skr_jitter": round(skr_std / skr, 9), "qber_pct": qber, "qber_jitter": qber_std,
             "initial_state": state, "assumed": assumed}
    if virtual:
        entry["virtual"] = True
    return entry


def reference_config(seed: int = 7) -> dict:
    nodes = []
    for i in range(1, 17):
        kind = "USER" if i in (1, 15) else "ACCESS" if i in (2, 14) else "CARRIER"
        node = {"id": f"n{i}", "type": kind, "components": default_components(kind)}
        if i == 16:
            node["virtual"] = True
        nodes.append(node)
    nodes.append({"id": "dc", "type": "DATACENTER", "components": default_components("DATACENTER")})
    median = median_link_parameters()
    links = []
    for i in range(1, 15):
        link_id = f"{i}-{i + 1}"
        if link_id in MEASURED_LINKS:
            links.append(_link_entry(link_id, MEASURED_LINKS[link_id], assumed=False))
        else:
            links.append(_link_entry(link_id, median, assumed=True))
    for link_id in BYPASS_LINKS:
        links.append(_link_entry(link_id, median, assumed=True, state="DOWN", virtual=True))
    saes = [
        {"id": "SAE:alice", "node": "n1", "account": "acct-alice", "secret": "alice-secret"},
        {"id": "SAE:carol", "node": "n1", "account": "acct-carol", "secret": "carol-secret"},
        {"id": "SAE:bob", "node": "n15", "account": "acct-bob", "secret": "bob-secret"},
    ]
    profiles = [
        {"account_id": "acct-alice", "allowed_sae_pairs": [["SAE:alice", "SAE:bob"]],
         "max_keys_per_day": 1000, "max_key_bits": 4096, "payment_valid": True},
        {"account_id": "acct-bob", "allowed_sae_pairs": [["SAE:bob", "SAE:alice"]],
         "max_keys_per_day": 1000, "max_key_bits": 4096, "payment_valid": True},
        {"account_id": "acct-carol", "allowed_sae_pairs": [["SAE:carol", "SAE:bob"]],
         "max_keys_per_day": 5, "max_key_bits": 256, "payment_valid": True},
    ]
    cfg = {"name": "reference-16-node", "seed": seed, "nodes": nodes, "links": links,
           "saes": saes, "profiles": profiles}
    cfg.update(copy.deepcopy(DEFAULTS))
    return cfg


@dataclass(frozen=True)
class NodeInfo:
    id: str
    type: str
    components: tuple[str, ...]


def node_index(cfg: dict) -> dict[str, NodeInfo]:
    return {n["id"]: NodeInfo(n["id"], n["type"],
                              tuple(n.get("components", default_components(n["type"]))))
            for n in cfg["nodes"]}


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=False) + "\n"
