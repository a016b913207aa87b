"""Tag-dump files.

Format ``timebin-tags`` version 1. Each dump is a pair of files:

* the records: one per tag, ordered by (timestamp, channel)
    - binary (``.tags``): packed little-endian records of 9 bytes,
      ``uint8 channel`` followed by ``uint64 timestamp`` in tagger ticks;
    - CSV (``.csv``): header line ``channel,timestamp`` then one row per tag;
* a JSON sidecar (``<records file>.json``) with ``format``, ``version``,
  ``encoding`` ("binary" or "csv"), ``resolution_s``, ``record_count``, the
  pulse clock (may be null), and free-form ``config`` metadata.

Channels 0/1 are Alice's +1/-1 detectors, 2/3 Bob's.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from timebin.eventsim import CH_B_PLUS, PulseClock, TagStream

FORMAT_NAME = "timebin-tags"
FORMAT_VERSION = 1
RECORD_DTYPE = np.dtype([("channel", "u1"), ("timestamp", "<u8")])


class TagFormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_tags(
    path,
    stream_a: TagStream,
    stream_b: TagStream,
    clock: PulseClock | None = None,
    config: dict | None = None,
    encoding: str = "binary",
) -> Path:
    """Write both parties' tags into one dump plus its JSON sidecar."""
    merged = TagStream.merge([stream_a, stream_b], stream_a.resolution)
    if np.any(merged.ticks < 0):
        raise TagFormatError("negative timestamps cannot be stored as uint64")
    path = Path(path)
    if encoding == "binary":
        rec = np.empty(len(merged), dtype=RECORD_DTYPE)
        rec["channel"] = merged.channel
        rec["timestamp"] = merged.ticks.astype(np.uint64)
        path.write_bytes(rec.tobytes())
    elif encoding == "csv":
        with open(path, "w", newline="") as fh:
            fh.write("channel,timestamp\n")
            for ch, t in zip(merged.channel.tolist(), merged.ticks.tolist()):
                fh.write(f"{ch},{t}\n")
    else:
        raise TagFormatError(f"unknown encoding {encoding!r}")
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "encoding": encoding,
        "resolution_s": stream_a.resolution,
        "record_count": len(merged),
        "clock": None if clock is None else clock.to_dict(),
        "config": config or {},
    }
    sidecar_path(path).write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def read_tags(path) -> tuple[TagStream, TagStream, PulseClock | None, dict]:
    """Read a dump; returns (Alice stream, Bob stream, clock or None, header)."""
    path = Path(path)
    header = json.loads(sidecar_path(path).read_text())
    if header.get("format") != FORMAT_NAME:
        raise TagFormatError(f"{path}: not a {FORMAT_NAME} dump")
    if header.get("version") != FORMAT_VERSION:
        raise TagFormatError(f"{path}: unsupported version {header.get('version')}")
    if header["encoding"] == "binary":
        rec = np.frombuffer(path.read_bytes(), dtype=RECORD_DTYPE)
        channel, ticks = rec["channel"], rec["timestamp"]
    else:
        data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.uint64, ndmin=2)
        channel, ticks = data[:, 0].astype(np.uint8), data[:, 1]
    if len(channel) != header["record_count"]:
        raise TagFormatError(f"{path}: record count mismatch")
    if np.any(channel > 3):
        raise TagFormatError(f"{path}: channel id out of range")
    res = float(header["resolution_s"])
    ticks = ticks.astype(np.int64)
    is_a = channel < CH_B_PLUS
    a = TagStream(channel[is_a], ticks[is_a], res)
    b = TagStream(channel[~is_a], ticks[~is_a], res)
    clock = None if header.get("clock") is None else PulseClock.from_dict(header["clock"])
    return a, b, clock, header
