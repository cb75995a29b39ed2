"""Serialization of privatized reports: JSON lines and a compact binary framing.

JSON line: ``{"mech": "MargHT", "user": 7, "payload": {"marginal": 3, "coef": 2, "sign": -1}}``
with bit vectors written as strings of ``0``/``1``.

Binary record: one tag byte (position of the mechanism in :class:`Mechanism`),
the user id as an unsigned LEB128 varint, then the mechanism's payload fields
in the order marginal, index, coef, sign, bits. Integers are varints, a sign
is one byte (0 for +1, 1 for -1) and bits are a varint length followed by the
packed bytes (most significant bit first).
"""
from __future__ import annotations

import io
import json

import numpy as np

from ldpm.mechanisms import Mechanism, Report, parse_mechanism

MECH_TAGS = list(Mechanism)
PAYLOAD_FIELDS = ("marginal", "index", "coef", "sign", "bits")
_LAYOUT = {
    Mechanism.INP_RS: ("bits",),
    Mechanism.INP_PS: ("index",),
    Mechanism.INP_HT: ("coef", "sign"),
    Mechanism.MARG_RS: ("marginal", "bits"),
    Mechanism.MARG_PS: ("marginal", "index"),
    Mechanism.MARG_HT: ("marginal", "coef", "sign"),
    Mechanism.INP_EM: ("bits",),
}


def report_to_dict(r: Report) -> dict:
    payload = {}
    for name in _LAYOUT[r.mech]:
        v = getattr(r, name)
        payload[name] = "".join(str(b) for b in v) if name == "bits" else v
    return {"mech": r.mech.value, "user": r.user, "payload": payload}


def report_from_dict(obj: dict) -> Report:
    try:
        mech = parse_mechanism(obj["mech"])
        payload = obj["payload"]
        kw = {}
        for name in _LAYOUT[mech]:
            v = payload[name]
            if name == "bits":
                if not isinstance(v, str) or set(v) - {"0", "1"}:
                    raise ValueError(f"bits must be a 0/1 string, got {v!r}")
                kw[name] = tuple(int(c) for c in v)
            else:
                kw[name] = int(v)
        extra = set(payload) - set(_LAYOUT[mech])
        if extra:
            raise ValueError(f"unexpected payload fields {sorted(extra)} for {mech}")
        return Report(mech, int(obj.get("user", 0)), **kw)
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed report record: {obj!r}") from exc


def write_jsonl(reports, fh) -> int:
    n = 0
    for r in reports:
        fh.write(json.dumps(report_to_dict(r), separators=(",", ":")) + "\n")
        n += 1
    return n


def read_jsonl(fh):
    for lineno, line in enumerate(fh, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
        try:
            yield report_from_dict(obj)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc


def _put_varint(out: bytearray, v: int) -> None:
    if v < 0:
        raise ValueError(f"varint must be non-negative, got {v}")
    while True:
        byte = v & 0x7F
        v >>= 7
        if v:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _get_varint(buf, pos: int) -> tuple[int, int]:
    v = shift = 0
    while True:
        if pos >= len(buf):
            raise ValueError("truncated varint")
        byte = buf[pos]
        pos += 1
        v |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return v, pos
        shift += 7


def encode_report(r: Report) -> bytes:
    out = bytearray([MECH_TAGS.index(r.mech)])
    _put_varint(out, r.user)
    for name in _LAYOUT[r.mech]:
        v = getattr(r, name)
        if name == "sign":
            out.append(0 if v == 1 else 1)
        elif name == "bits":
            _put_varint(out, len(v))
            out += np.packbits(np.asarray(v, dtype=np.uint8)).tobytes()
        else:
            _put_varint(out, v)
    return bytes(out)


def decode_report(buf, pos: int = 0) -> tuple[Report, int]:
    """Decode one record starting at ``pos``; returns the report and the next offset."""
    if pos >= len(buf):
        raise ValueError("no record at offset")
    tag = buf[pos]
    if tag >= len(MECH_TAGS):
        raise ValueError(f"unknown mechanism tag {tag}")
    mech = MECH_TAGS[tag]
    user, pos = _get_varint(buf, pos + 1)
    kw = {}
    for name in _LAYOUT[mech]:
        if name == "sign":
            if pos >= len(buf) or buf[pos] > 1:
                raise ValueError("bad sign byte")
            kw[name] = 1 if buf[pos] == 0 else -1
            pos += 1
        elif name == "bits":
            n, pos = _get_varint(buf, pos)
            nbytes = (n + 7) // 8
            if pos + nbytes > len(buf):
                raise ValueError("truncated bit vector")
            packed = np.frombuffer(bytes(buf[pos : pos + nbytes]), dtype=np.uint8)
            kw[name] = tuple(int(b) for b in np.unpackbits(packed)[:n])
            pos += nbytes
        else:
            kw[name], pos = _get_varint(buf, pos)
    return Report(mech, user, **kw), pos


def write_binary(reports, fh) -> int:
    n = 0
    for r in reports:
        fh.write(encode_report(r))
        n += 1
    return n


def read_binary(fh):
    buf = fh.read() if isinstance(fh, io.IOBase) or hasattr(fh, "read") else fh
    pos = 0
    while pos < len(buf):
        r, pos = decode_report(buf, pos)
        yield r
