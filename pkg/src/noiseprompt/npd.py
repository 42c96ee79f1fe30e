"""Noise-pair dataset: collection pipeline and on-disk format.

Collection, per seed: derive a private stream from (global seed, seed),
draw a class from the prior and a standard-normal head noise, re-denoise
it, synthesize both sides with the standard guided pipeline, score both
against the conditional density, and keep the pair iff the selection
rule fires.  Everything about a seed depends only on (global seed, seed,
config), so collection is embarrassingly parallel and the output file is
byte-identical for any worker count: records are written in seed order.

File format (little-endian throughout)::

    magic   4s   b"NPD1"
    version u16  1
    d_side  u32        n_classes u32
    omega_l f64        omega_w   f64
    k       u32        m         f64
    n_steps_eval u32   fp_iters  u32   fp_tol f64
    global_seed  u64
    scorer_id    u16 length + utf-8 bytes
    schedule_hash 32 bytes (sha256 of the schedule descriptor)
    record_count u64
    header_crc   u32 (crc32 of all header bytes after the magic)

followed by record_count fixed-size records::

    seed u64, class_id u32, s0 f64, s0_prime f64,
    x_head d^2 * f64, x_head_prime d^2 * f64, record_crc u32

The fixed record size makes truncation and corrupted counts detectable
up front, so the record iterator never yields partial data.
"""

from __future__ import annotations

import logging
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import NpdFormatError, NumericError
from .preference import SCORER_ID, SelectionRule, score, select
from .rng import derive_stream, gaussian
from .sampler import GuidanceConfig, redenoise, sample_trajectory
from .testbed import MixtureTestbed

__all__ = [
    "MAGIC",
    "FORMAT_VERSION",
    "NpdHeader",
    "NoisePairRecord",
    "CollectionStats",
    "collect",
    "write_npd",
    "read_npd",
    "read_all",
    "verify_npd",
    "draw_pair_inputs",
]

MAGIC = b"NPD1"
FORMAT_VERSION = 1

_HEADER_FIXED = struct.Struct("<HIIddIdIIdQ")  # after magic, before scorer id
_RECORD_FIXED = struct.Struct("<QIdd")


@dataclass(frozen=True)
class NpdHeader:
    """Provenance needed to reproduce or re-verify every stored record."""

    d_side: int
    n_classes: int
    omega_l: float
    omega_w: float
    k: int
    m: float
    n_steps_eval: int
    fp_iters: int
    fp_tol: float
    global_seed: int
    scorer_id: str
    schedule_hash: bytes
    record_count: int
    version: int = FORMAT_VERSION

    def record_size(self) -> int:
        return _RECORD_FIXED.size + 2 * 8 * self.d_side * self.d_side + 4


@dataclass(frozen=True)
class NoisePairRecord:
    """One selected (source noise, target noise, condition) triple."""

    seed: int
    class_id: int
    s0: float
    s0_prime: float
    x_head: np.ndarray
    x_head_prime: np.ndarray


@dataclass(frozen=True)
class CollectionStats:
    attempted: int
    kept: int
    skipped: int
    mean_score_gap: float

    @property
    def keep_rate(self) -> float:
        return self.kept / self.attempted if self.attempted else 0.0


def _header_bytes(header: NpdHeader) -> bytes:
    scorer = header.scorer_id.encode("utf-8")
    if len(header.schedule_hash) != 32:
        raise ValueError("schedule_hash must be 32 bytes")
    body = _HEADER_FIXED.pack(
        header.version,
        header.d_side,
        header.n_classes,
        header.omega_l,
        header.omega_w,
        header.k,
        header.m,
        header.n_steps_eval,
        header.fp_iters,
        header.fp_tol,
        header.global_seed,
    )
    body += struct.pack("<H", len(scorer)) + scorer
    body += header.schedule_hash
    body += struct.pack("<Q", header.record_count)
    return MAGIC + body + struct.pack("<I", zlib.crc32(body))


def _record_bytes(record: NoisePairRecord, d_side: int) -> bytes:
    x = np.ascontiguousarray(record.x_head, dtype=np.float64)
    xp = np.ascontiguousarray(record.x_head_prime, dtype=np.float64)
    if x.shape != (d_side, d_side) or xp.shape != (d_side, d_side):
        raise ValueError("record state shape disagrees with header d_side")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(xp))):
        raise ValueError("record noise arrays must be finite")
    payload = _RECORD_FIXED.pack(
        record.seed, record.class_id, record.s0, record.s0_prime
    )
    payload += x.tobytes() + xp.tobytes()
    return payload + struct.pack("<I", zlib.crc32(payload))


def write_npd(
    header: NpdHeader, records: Sequence[NoisePairRecord], path: str | Path
) -> None:
    """Serialize header + records; the header count must match."""
    if header.record_count != len(records):
        header = replace(header, record_count=len(records))
    with open(path, "wb") as fh:
        fh.write(_header_bytes(header))
        for record in records:
            fh.write(_record_bytes(record, header.d_side))


def _parse_header(blob: bytes) -> tuple[NpdHeader, int]:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise NpdFormatError("not a noise-pair dataset (bad magic)")
    off = 4
    if len(blob) < off + _HEADER_FIXED.size:
        raise NpdFormatError("truncated header")
    fixed = _HEADER_FIXED.unpack_from(blob, off)
    off += _HEADER_FIXED.size
    version = fixed[0]
    if version != FORMAT_VERSION:
        raise NpdFormatError(f"unsupported format version {version}")
    if len(blob) < off + 2:
        raise NpdFormatError("truncated header")
    (scorer_len,) = struct.unpack_from("<H", blob, off)
    off += 2
    if len(blob) < off + scorer_len + 32 + 8 + 4:
        raise NpdFormatError("truncated header")
    scorer_id = blob[off : off + scorer_len].decode("utf-8")
    off += scorer_len
    schedule_hash = blob[off : off + 32]
    off += 32
    (record_count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    (crc_stored,) = struct.unpack_from("<I", blob, off)
    off += 4
    if zlib.crc32(blob[4 : off - 4]) != crc_stored:
        raise NpdFormatError("header checksum mismatch")
    header = NpdHeader(
        version=version,
        d_side=fixed[1],
        n_classes=fixed[2],
        omega_l=fixed[3],
        omega_w=fixed[4],
        k=fixed[5],
        m=fixed[6],
        n_steps_eval=fixed[7],
        fp_iters=fixed[8],
        fp_tol=fixed[9],
        global_seed=fixed[10],
        scorer_id=scorer_id,
        schedule_hash=schedule_hash,
        record_count=record_count,
    )
    return header, off


def read_npd(path: str | Path) -> tuple[NpdHeader, Iterator[NoisePairRecord]]:
    """Parse the header, validate sizes, and return a record iterator.

    Size validation happens before any record is yielded, so truncated
    files and corrupted counts fail cleanly instead of producing partial
    records.
    """
    blob = Path(path).read_bytes()
    header, off = _parse_header(blob)
    rec_size = header.record_size()
    expected = off + header.record_count * rec_size
    if len(blob) != expected:
        raise NpdFormatError(
            f"file size {len(blob)} does not match header "
            f"(expected {expected} for {header.record_count} records)"
        )

    dim = header.d_side * header.d_side

    def records() -> Iterator[NoisePairRecord]:
        pos = off
        for _ in range(header.record_count):
            payload = blob[pos : pos + rec_size - 4]
            (crc_stored,) = struct.unpack_from("<I", blob, pos + rec_size - 4)
            if zlib.crc32(payload) != crc_stored:
                raise NpdFormatError(f"record checksum mismatch at offset {pos}")
            seed, class_id, s0, s0p = _RECORD_FIXED.unpack_from(payload, 0)
            arr_off = _RECORD_FIXED.size
            x = np.frombuffer(payload, dtype="<f8", count=dim, offset=arr_off)
            xp = np.frombuffer(
                payload, dtype="<f8", count=dim, offset=arr_off + 8 * dim
            )
            yield NoisePairRecord(
                seed=seed,
                class_id=class_id,
                s0=s0,
                s0_prime=s0p,
                x_head=x.reshape(header.d_side, header.d_side).copy(),
                x_head_prime=xp.reshape(header.d_side, header.d_side).copy(),
            )
            pos += rec_size

    return header, records()


def read_all(path: str | Path) -> tuple[NpdHeader, list[NoisePairRecord]]:
    header, it = read_npd(path)
    return header, list(it)


def draw_pair_inputs(
    testbed: MixtureTestbed, global_seed: int, seed: int
) -> tuple[int, np.ndarray]:
    """(class, head noise) for one seed; shared with evaluation so the
    re-denoise oracle can be cross-checked against collection stats."""
    stream = derive_stream(global_seed, f"pair:{seed}")
    c = testbed.sample_class(stream)
    x_head = gaussian(stream, (testbed.d_side, testbed.d_side))
    return c, x_head


_log = logging.getLogger(__name__)


def _build_pair(
    testbed: MixtureTestbed,
    cfg: GuidanceConfig,
    n_steps_eval: int,
    global_seed: int,
    seed: int,
) -> tuple[int, int, float, float, np.ndarray, np.ndarray] | None:
    """Full per-seed pipeline; None flags a non-finite trajectory."""
    c, x_head = draw_pair_inputs(testbed, global_seed, seed)
    schedule = testbed.schedule
    try:
        x_prime = redenoise(testbed, schedule, x_head, cfg, c)
        x0 = sample_trajectory(testbed, schedule, x_head, n_steps_eval, cfg.omega_l, c)
        x0_prime = sample_trajectory(
            testbed, schedule, x_prime, n_steps_eval, cfg.omega_l, c
        )
    except NumericError as exc:
        _log.warning("seed %d skipped: %s", seed, exc)
        return None
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x0_prime))):
        _log.warning("seed %d skipped: non-finite trajectory", seed)
        return None
    s0 = score(x0, c, testbed).value
    s0_prime = score(x0_prime, c, testbed).value
    return seed, c, s0, s0_prime, x_head, x_prime


def collect(
    testbed: MixtureTestbed,
    cfg: GuidanceConfig,
    rule: SelectionRule,
    seeds: Iterable[int],
    n_steps_eval: int,
    out_path: str | Path,
    global_seed: int = 0,
    workers: int = 1,
) -> CollectionStats:
    """Run the pair pipeline over seeds and write the kept records.

    Seeds that produce non-finite trajectories are skipped with a count
    in the stats; mean_score_gap averages s0' - s0 over all scored
    seeds.  The output is byte-identical across reruns and worker
    counts.
    """
    seed_list = sorted(int(s) for s in seeds)
    if len(set(seed_list)) != len(seed_list):
        raise ValueError("seeds must be distinct")
    args = [(testbed, cfg, n_steps_eval, global_seed, s) for s in seed_list]
    if workers > 1 and len(seed_list) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_build_pair_star, args, chunksize=32))
    else:
        raw = [_build_pair(*a) for a in args]

    records: list[NoisePairRecord] = []
    skipped = 0
    gaps: list[float] = []
    for item in raw:
        if item is None:
            skipped += 1
            continue
        seed, c, s0, s0_prime, x_head, x_prime = item
        gaps.append(s0_prime - s0)
        if select(s0, s0_prime, rule):
            records.append(
                NoisePairRecord(
                    seed=seed,
                    class_id=c,
                    s0=s0,
                    s0_prime=s0_prime,
                    x_head=x_head,
                    x_head_prime=x_prime,
                )
            )

    header = NpdHeader(
        d_side=testbed.d_side,
        n_classes=testbed.n_classes,
        omega_l=cfg.omega_l,
        omega_w=cfg.omega_w,
        k=cfg.k,
        m=rule.m,
        n_steps_eval=int(n_steps_eval),
        fp_iters=cfg.fp_iters,
        fp_tol=cfg.fp_tol,
        global_seed=int(global_seed),
        scorer_id=SCORER_ID,
        schedule_hash=testbed.schedule.descriptor_hash(),
        record_count=len(records),
    )
    write_npd(header, records, out_path)
    return CollectionStats(
        attempted=len(seed_list),
        kept=len(records),
        skipped=skipped,
        mean_score_gap=float(np.mean(gaps)) if gaps else 0.0,
    )


def _build_pair_star(args):
    return _build_pair(*args)


def verify_npd(
    path: str | Path, testbed: MixtureTestbed | None = None, deep: bool = False
) -> list[str]:
    """Re-verify checksums and the selection predicate of every record.

    With deep=True (requires the testbed the file was collected on) the
    scores are recomputed from the stored noise arrays and compared to
    the stored values.  Returns a list of problems, empty when clean.
    """
    problems: list[str] = []
    header, records_iter = read_npd(path)
    rule = SelectionRule(m=header.m)
    if deep and testbed is None:
        raise ValueError("deep verification needs the originating testbed")
    if testbed is not None:
        if testbed.schedule.descriptor_hash() != header.schedule_hash:
            problems.append("schedule hash mismatch with supplied testbed")
            deep = False
        if testbed.d_side != header.d_side or testbed.n_classes != header.n_classes:
            problems.append("testbed dimensions disagree with header")
            deep = False
    cfg = GuidanceConfig(
        omega_l=header.omega_l,
        omega_w=header.omega_w,
        k=header.k,
        fp_iters=header.fp_iters,
        fp_tol=header.fp_tol,
    )
    count = 0
    for record in records_iter:
        count += 1
        if not select(record.s0, record.s0_prime, rule):
            problems.append(
                f"record seed={record.seed}: stored scores fail the selection rule"
            )
        if deep:
            schedule = testbed.schedule
            x0 = sample_trajectory(
                testbed, schedule, record.x_head, header.n_steps_eval, header.omega_l,
                record.class_id,
            )
            x0p = sample_trajectory(
                testbed, schedule, record.x_head_prime, header.n_steps_eval,
                header.omega_l, record.class_id,
            )
            s0 = score(x0, record.class_id, testbed).value
            s0p = score(x0p, record.class_id, testbed).value
            if abs(s0 - record.s0) > 1e-9 or abs(s0p - record.s0_prime) > 1e-9:
                problems.append(
                    f"record seed={record.seed}: recomputed scores disagree"
                )
            elif not select(s0, s0p, rule):
                problems.append(
                    f"record seed={record.seed}: recomputed scores fail the rule"
                )
    if count != header.record_count:
        problems.append("record count mismatch")
    return problems
