#!/usr/bin/env python3
"""Recompute fingerprints of source tasks (tasks without upstream inputs)
from workflow files, following docs/fingerprint-encoding.md, with only the
Python standard library.

usage: fingerprint_oracle.py WORKFLOW_DIR  < cases  > table

Each case line is `workflow<TAB>task<TAB>NAME=VALUE ...`; output lines
append the fingerprint.
"""

import hashlib
import json
import os
import sys

SCHEMA = "flowforge-fingerprint-v1"


def canon(v):
    return json.dumps(v, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha(b):
    return hashlib.sha256(b).hexdigest()


def field(name, body):
    data = body.encode()
    return name.encode() + b":" + str(len(data)).encode() + b":" + data + b"\n"


def env_fp(spec):
    if spec is None or spec == "none":
        return sha(b"env:none")
    if "manifest" in spec:
        pkgs = sorted(spec["manifest"], key=lambda p: (p["name"].encode(), p["version"].encode()))
        return sha(("env:manifest:" + canon([{"name": p["name"], "version": p["version"]} for p in pkgs])).encode())
    if "image" in spec:
        return sha(("env:image:" + spec["image"]).encode())
    raise SystemExit("recipe environments are not covered")


def value(ty, text):
    if ty == "float":
        return float(text)
    if ty == "integer":
        return int(text)
    if ty == "boolean":
        return {"true": True, "false": False}[text]
    return text


def fingerprint(wf_dir, wf_name, task, assigned):
    with open(os.path.join(wf_dir, wf_name)) as f:
        wf = json.load(f)
    params = wf.get("params", {})
    proc = next(p for p in wf["processes"] if p["id"] == task)
    inputs = {}
    for port, decl in proc.get("inputs", {}).items():
        ref = decl["from"]
        assert ref.startswith("params."), "source tasks only"
        name = ref[len("params."):]
        ty = params[name]["type"]
        raw = assigned.get(name, params[name].get("default"))
        if ty == "file":
            with open(os.path.join(wf_dir, raw), "rb") as f:
                digest = sha(f.read())
            inputs[port] = {"digest": digest, "kind": "file", "name": os.path.basename(raw)}
        else:
            v = value(ty, raw) if isinstance(raw, str) and ty != "string" else raw
            inputs[port] = {"kind": "value", "type": decl["type"], "value": v}
    outputs = {}
    for port, decl in proc.get("outputs", {}).items():
        entry = {"type": decl["type"]}
        if "path" in decl:
            entry["path"] = decl["path"]
        if "format" in decl:
            entry["format"] = decl["format"]
        outputs[port] = entry
    env = proc.get("env", wf.get("env"))
    pre = (SCHEMA + "\n").encode()
    pre += field("argv", canon(proc["command"]))
    pre += field("inputs", canon(inputs))
    pre += field("outputs", canon(outputs))
    pre += field("env", env_fp(env))
    return sha(pre)


def main():
    wf_dir = sys.argv[1]
    for line in sys.stdin:
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        wf_name, task = parts[0], parts[1]
        assigned = dict(kv.split("=", 1) for kv in (parts[2].split() if len(parts) > 2 and parts[2] else []))
        print("\t".join(parts[:3] + [""] * (3 - len(parts[:3])) + [fingerprint(wf_dir, wf_name, task, assigned)]))


if __name__ == "__main__":
    main()
