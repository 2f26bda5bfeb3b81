#!/usr/bin/env python3
"""Standalone reader for cloudlet segment files.

Knows only the record framing (all integers big-endian):

    length u32 | crc u32 | attributes u8 | timestamp_ms i64 |
    key_len i32 (-1 = no key) | key | value_len u32 | value

length counts every byte after itself; crc is CRC-32 (IEEE, as in zlib) over
every byte after itself.

Usage: parse_segment.py SEGMENT.log
Prints one JSON object: oracle checksums plus one entry per record.
"""

import hashlib
import json
import struct
import sys
import zlib


def fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def parse(buf: bytes):
    records = []
    pos = 0
    while pos < len(buf):
        if len(buf) - pos < 4:
            raise ValueError(f"truncated length at byte {pos}")
        (length,) = struct.unpack_from(">I", buf, pos)
        body = buf[pos + 4 : pos + 4 + length]
        if len(body) != length:
            raise ValueError(f"truncated record at byte {pos}")
        (crc,) = struct.unpack_from(">I", body, 0)
        if zlib.crc32(body[4:]) & 0xFFFFFFFF != crc:
            raise ValueError(f"crc mismatch at byte {pos}")
        attrs, ts, key_len = struct.unpack_from(">BqI", body, 4)
        q = 4 + 1 + 8 + 4
        if key_len == 0xFFFFFFFF:
            key = None
        else:
            key = body[q : q + key_len]
            q += key_len
        (value_len,) = struct.unpack_from(">I", body, q)
        q += 4
        value = body[q : q + value_len]
        q += value_len
        if q != length or len(value) != value_len:
            raise ValueError(f"inconsistent lengths at byte {pos}")
        records.append(
            {
                "attributes": attrs,
                "timestamp_ms": ts,
                "key": None if key is None else key.hex(),
                "value_len": value_len,
                "value_sha256": hashlib.sha256(value).hexdigest(),
            }
        )
        pos += 4 + length
    return records


def main() -> int:
    if len(sys.argv) != 2:
        print(__doc__, file=sys.stderr)
        return 1
    with open(sys.argv[1], "rb") as f:
        buf = f.read()
    try:
        records = parse(buf)
    except ValueError as e:
        print(json.dumps({"error": str(e)}))
        return 2
    print(
        json.dumps(
            {
                "crc32_123456789": zlib.crc32(b"123456789") & 0xFFFFFFFF,
                "fnv1a32_a": fnv1a32(b"a"),
                "records": records,
            }
        )
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
