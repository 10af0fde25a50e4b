"""Synthetic utterances and a deterministic, exactly invertible factorized codec.

The codec maps per-frame features onto a 6 x N grid of discrete tokens:

  stream 0      prosody         (pitch bucket, energy bucket) packed into one index
  streams 1-2   content         frozen bijective table over (phoneme, within-phoneme offset)
  streams 3-5   acoustic detail frozen hash of (speaker, pitch bucket, frame phase)

plus a per-utterance timbre vector that is a fixed embedding of the speaker id.
All tables are generated once from `table_seed` and frozen, so decode is an
exact inverse on the quantized domain and every downstream metric has an exact
oracle. `ERROR_PHONEME` is the transcript symbol for undecodable content.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .config import GeneratorConfig, ConfigError, RunConfig, config_from_json

ERROR_PHONEME = -1

PROSODY_STREAM = 0
CONTENT_STREAMS = (1, 2)
DETAIL_STREAMS = (3, 4, 5)
N_STREAMS = 6


class CodecError(ValueError):
    """Invalid input to the codec (shape mismatch, out-of-range code, ...)."""


@dataclass(frozen=True)
class UtteranceSpec:
    """Ground-truth synthetic utterance."""

    phonemes: np.ndarray    # (n_ph,) int, values in [0, P)
    durations: np.ndarray   # (n_ph,) int, all >= 1
    pitch: np.ndarray       # (N,) float, N = durations.sum()
    energy: np.ndarray      # (N,) float
    speaker: int

    def __post_init__(self):
        if len(self.phonemes) != len(self.durations):
            raise CodecError("phonemes and durations must have equal length")
        if len(self.durations) and self.durations.min() < 1:
            raise CodecError("all durations must be >= 1")
        n = int(self.durations.sum())
        if len(self.pitch) != n or len(self.energy) != n:
            raise CodecError(f"contours must have length {n}")

    @property
    def n_frames(self) -> int:
        return int(self.durations.sum())

    def frame_phonemes(self) -> np.ndarray:
        return np.repeat(self.phonemes, self.durations)

    def frame_offsets(self) -> np.ndarray:
        """Within-phoneme frame index: 0,1,... restarting at each phoneme."""
        return np.concatenate([np.arange(d) for d in self.durations]) if len(self.durations) else np.zeros(0, int)


@dataclass(frozen=True)
class CodeGrid:
    """6 x N grid of codec tokens; stream roles are fixed by position."""

    codes: np.ndarray  # (6, N) int

    def __post_init__(self):
        if self.codes.ndim != 2 or self.codes.shape[0] != N_STREAMS:
            raise CodecError(f"codes must be shaped 6 x N, got {self.codes.shape}")

    @property
    def n_frames(self) -> int:
        return self.codes.shape[1]

    def slice(self, start: int, stop: int) -> "CodeGrid":
        return CodeGrid(self.codes[:, start:stop].copy())


@dataclass(frozen=True)
class TimbreVector:
    values: np.ndarray  # (timbre_dim,) float32


@dataclass(frozen=True)
class FrameFeatures:
    """Decoder output surface: per-frame quantized features."""

    phonemes: np.ndarray       # (N,) int, ERROR_PHONEME where undecodable
    pitch_bucket: np.ndarray   # (N,) int
    energy_bucket: np.ndarray  # (N,) int
    speaker: np.ndarray        # (N,) int, constant


class ToyCodec:
    """Frozen-table codec. All methods are pure given the construction seed."""

    def __init__(self, cfg: GeneratorConfig):
        probs = cfg.validate()
        if probs:
            raise ConfigError(probs)
        self.cfg = cfg
        self.n_buckets = int(math.isqrt(cfg.V))
        self.mask_index = cfg.V
        rng = np.random.default_rng(cfg.table_seed)

        # Content: injective map (phoneme, capped offset) -> pair index in [0, V^2),
        # realized through a random permutation so used pairs are scattered.
        n_slots = cfg.P * cfg.content_offset_cap
        perm = rng.permutation(cfg.V * cfg.V)
        self._content_fwd = perm[:n_slots].reshape(cfg.P, cfg.content_offset_cap)
        self._content_inv = np.full(cfg.V * cfg.V, -1, dtype=np.int64)
        slot_ids = np.arange(n_slots)
        self._content_inv[self._content_fwd.reshape(-1)] = slot_ids

        # Acoustic detail: per-stream hash table over (speaker, pitch bucket, frame phase).
        self._detail = rng.integers(
            0, cfg.V, size=(len(DETAIL_STREAMS), cfg.S, self.n_buckets, cfg.detail_period)
        )

        # Timbre: fixed speaker embedding, rows well separated w.h.p.
        self._timbre = rng.normal(size=(cfg.S, cfg.timbre_dim)).astype(np.float32)

        # Per-speaker pitch/energy baselines used by the generator.
        span_p = cfg.pitch_hi - cfg.pitch_lo
        self._speaker_pitch_base = cfg.pitch_lo + span_p * (0.3 + 0.4 * rng.random(cfg.S))
        span_e = cfg.energy_hi - cfg.energy_lo
        self._speaker_energy_base = cfg.energy_lo + span_e * (0.3 + 0.4 * rng.random(cfg.S))

    # -- table identity ------------------------------------------------------

    def table_checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self._content_fwd, self._detail, self._timbre):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def unused_content_pair(self) -> tuple[int, int]:
        """Some (c1, c2) pair the inverse table maps to no phoneme."""
        idx = int(np.flatnonzero(self._content_inv < 0)[0])
        return idx // self.cfg.V, idx % self.cfg.V

    # -- quantization --------------------------------------------------------

    def pitch_to_bucket(self, pitch: np.ndarray) -> np.ndarray:
        return self._to_bucket(pitch, self.cfg.pitch_lo, self.cfg.pitch_hi)

    def energy_to_bucket(self, energy: np.ndarray) -> np.ndarray:
        return self._to_bucket(energy, self.cfg.energy_lo, self.cfg.energy_hi)

    def _to_bucket(self, x: np.ndarray, lo: float, hi: float) -> np.ndarray:
        frac = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
        return np.clip((frac * self.n_buckets).astype(np.int64), 0, self.n_buckets - 1)

    def bucket_to_pitch(self, bucket: np.ndarray) -> np.ndarray:
        return self._from_bucket(bucket, self.cfg.pitch_lo, self.cfg.pitch_hi)

    def bucket_to_energy(self, bucket: np.ndarray) -> np.ndarray:
        return self._from_bucket(bucket, self.cfg.energy_lo, self.cfg.energy_hi)

    def _from_bucket(self, bucket: np.ndarray, lo: float, hi: float) -> np.ndarray:
        return lo + (np.asarray(bucket) + 0.5) * (hi - lo) / self.n_buckets

    # -- generation ----------------------------------------------------------

    def synth_utterance(self, rng_seed: int, n_phonemes: int | None = None) -> UtteranceSpec:
        """Deterministic synthetic utterance for a seed.

        Contours are piecewise-smooth per phoneme: per-phoneme targets around a
        speaker baseline, linearly interpolated between phoneme midpoints and
        box-smoothed.
        """
        cfg = self.cfg
        rng = np.random.default_rng(rng_seed)
        if n_phonemes is None:
            n_phonemes = int(rng.integers(cfg.n_phonemes_min, cfg.n_phonemes_max + 1))
        phonemes = rng.integers(0, cfg.P, size=n_phonemes)
        durations = rng.integers(cfg.dur_min, cfg.dur_max + 1, size=n_phonemes)
        speaker = int(rng.integers(0, cfg.S))

        pitch = self._contour(
            rng, durations, self._speaker_pitch_base[speaker],
            0.10 * (cfg.pitch_hi - cfg.pitch_lo), cfg.pitch_lo, cfg.pitch_hi,
        )
        energy = self._contour(
            rng, durations, self._speaker_energy_base[speaker],
            0.10 * (cfg.energy_hi - cfg.energy_lo), cfg.energy_lo, cfg.energy_hi,
        )
        return UtteranceSpec(phonemes, durations, pitch, energy, speaker)

    def _contour(self, rng, durations, base, spread, lo, hi) -> np.ndarray:
        targets = np.clip(base + rng.normal(0, spread, size=len(durations)), lo, hi)
        centers = np.cumsum(durations) - durations / 2.0
        frames = np.arange(int(durations.sum())) + 0.5
        contour = np.interp(frames, centers, targets)
        w = self.cfg.smoothing
        if w > 1:
            contour = np.convolve(contour, np.ones(w) / w, mode="same")
        return np.clip(contour, lo, hi)

    # -- codec ---------------------------------------------------------------

    def encode(self, spec: UtteranceSpec) -> tuple[CodeGrid, TimbreVector]:
        cfg = self.cfg
        if spec.speaker < 0 or spec.speaker >= cfg.S:
            raise CodecError(f"speaker {spec.speaker} outside [0, {cfg.S})")
        if len(spec.phonemes) and (spec.phonemes.min() < 0 or spec.phonemes.max() >= cfg.P):
            raise CodecError("phoneme id outside [0, P)")
        n = spec.n_frames
        ph = spec.frame_phonemes()
        off = np.minimum(spec.frame_offsets(), cfg.content_offset_cap - 1)
        pb = self.pitch_to_bucket(spec.pitch)
        eb = self.energy_to_bucket(spec.energy)
        phase = np.arange(n) % cfg.detail_period

        codes = np.empty((N_STREAMS, n), dtype=np.int64)
        codes[PROSODY_STREAM] = pb * self.n_buckets + eb
        pair = self._content_fwd[ph, off]
        codes[CONTENT_STREAMS[0]] = pair // cfg.V
        codes[CONTENT_STREAMS[1]] = pair % cfg.V
        for i, s in enumerate(DETAIL_STREAMS):
            codes[s] = self._detail[i, spec.speaker, pb, phase]
        return CodeGrid(codes), TimbreVector(self._timbre[spec.speaker].copy())

    def _check_range(self, codes: np.ndarray) -> None:
        bad = np.argwhere((codes < 0) | (codes >= self.cfg.V))
        if len(bad):
            s, n = int(bad[0][0]), int(bad[0][1])
            raise CodecError(
                f"code {int(codes[s, n])} out of range [0, {self.cfg.V}) at stream {s}, frame {n}"
            )

    def _content_frames(self, codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-frame (phoneme, offset); ERROR_PHONEME/-1 where the pair is unused."""
        pair = codes[CONTENT_STREAMS[0]] * self.cfg.V + codes[CONTENT_STREAMS[1]]
        slot = self._content_inv[pair]
        ph = np.where(slot >= 0, slot // self.cfg.content_offset_cap, ERROR_PHONEME)
        off = np.where(slot >= 0, slot % self.cfg.content_offset_cap, -1)
        return ph, off

    def decode(self, grid: CodeGrid, timbre: TimbreVector, strict: bool = True) -> FrameFeatures:
        """Exact inverse of encode on the quantized domain.

        strict=True raises on undecodable content pairs; strict=False marks the
        frame with ERROR_PHONEME so imperfect generated grids stay analyzable.
        """
        codes = grid.codes
        self._check_range(codes)
        pros = codes[PROSODY_STREAM]
        if pros.size and pros.max() >= self.n_buckets * self.n_buckets:
            n = int(np.argmax(pros >= self.n_buckets * self.n_buckets))
            raise CodecError(f"prosody code {int(pros[n])} unmapped at stream 0, frame {n}")
        ph, _ = self._content_frames(codes)
        if strict and (ph == ERROR_PHONEME).any():
            n = int(np.argmax(ph == ERROR_PHONEME))
            raise CodecError(
                f"content pair ({int(codes[1, n])},{int(codes[2, n])}) has no phoneme "
                f"at streams 1-2, frame {n}"
            )
        d = self._timbre - np.asarray(timbre.values, dtype=np.float32)
        speaker = int(np.argmin(np.einsum("sd,sd->s", d, d)))
        return FrameFeatures(
            phonemes=ph,
            pitch_bucket=pros // self.n_buckets,
            energy_bucket=pros % self.n_buckets,
            speaker=np.full(grid.n_frames, speaker, dtype=np.int64),
        )

    def transcript_oracle(self, grid: CodeGrid) -> list[int]:
        """Run-length-collapsed phoneme transcript.

        A segment starts at frame 0, at any frame whose within-phoneme offset
        is 0, and at any undecodable frame; the segment keeps its first frame's
        label. Undecodable frames read ERROR_PHONEME.
        """
        self._check_range(grid.codes)
        ph, off = self._content_frames(grid.codes)
        out: list[int] = []
        for i in range(grid.n_frames):
            if i == 0 or ph[i] == ERROR_PHONEME or off[i] == 0:
                out.append(int(ph[i]))
        return out

    # -- robustness ----------------------------------------------------------

    def add_noise(self, spec: UtteranceSpec, snr_db: float, rng_seed: int) -> UtteranceSpec:
        """Additive Gaussian perturbation on both contours at the requested SNR.

        Power is contour power (mean square). +inf means clean; the spec is
        returned value-identical.
        """
        if math.isinf(snr_db) and snr_db > 0:
            return UtteranceSpec(
                spec.phonemes.copy(), spec.durations.copy(),
                spec.pitch.copy(), spec.energy.copy(), spec.speaker,
            )
        if not math.isfinite(snr_db):
            raise CodecError(f"snr_db must be finite or +inf, got {snr_db}")
        rng = np.random.default_rng(rng_seed)
        factor = 10.0 ** (-snr_db / 10.0)

        def perturb(x: np.ndarray) -> np.ndarray:
            power = float(np.mean(np.square(x)))
            return x + rng.normal(0.0, math.sqrt(power * factor), size=x.shape)

        return UtteranceSpec(
            spec.phonemes.copy(), spec.durations.copy(),
            perturb(spec.pitch), perturb(spec.energy), spec.speaker,
        )


def collapse_reference(spec: UtteranceSpec) -> list[int]:
    """Reference transcript: one entry per phoneme instance."""
    return [int(p) for p in spec.phonemes]


# -- dataset files -------------------------------------------------------------
#
# Record-per-line TSV, field order:
#   utterance_id  phonemes(csv)  durations(csv)  speaker  codes_b64  timbre_b64
# codes_b64 is the 6 x N int16 grid, row-major little-endian; timbre_b64 is the
# float32 timbre vector. Line 1 is "#MANIFEST <json>" carrying counts, seeds,
# the resolved config, and checksums; loaders verify the record checksum.

@dataclass(frozen=True)
class DatasetRecord:
    utt_id: str
    seed: int
    spec_digest: str
    grid: CodeGrid
    timbre: TimbreVector
    phonemes: np.ndarray
    durations: np.ndarray
    speaker: int


def _spec_digest(spec: UtteranceSpec) -> str:
    h = hashlib.sha256()
    for arr in (spec.phonemes, spec.durations):
        h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
    h.update(np.int64(spec.speaker).tobytes())
    return h.hexdigest()[:12]


def _record_line(rec: DatasetRecord) -> str:
    codes_b = base64.b64encode(
        np.ascontiguousarray(rec.grid.codes, dtype="<i2").tobytes()
    ).decode()
    timbre_b = base64.b64encode(
        np.ascontiguousarray(rec.timbre.values, dtype="<f4").tobytes()
    ).decode()
    return "\t".join(
        [
            rec.utt_id,
            ",".join(str(int(p)) for p in rec.phonemes),
            ",".join(str(int(d)) for d in rec.durations),
            str(rec.speaker),
            codes_b,
            timbre_b,
        ]
    )


def write_dataset(path: str, run_config: RunConfig, n: int, base_seed: int) -> None:
    """Generate n utterances (seeds base_seed..base_seed+n-1) and write the file."""
    codec = ToyCodec(run_config.data)
    lines = []
    for i in range(n):
        seed = base_seed + i
        spec = codec.synth_utterance(seed)
        grid, timbre = codec.encode(spec)
        rec = DatasetRecord(
            f"utt{i:06d}", seed, _spec_digest(spec), grid, timbre,
            spec.phonemes, spec.durations, spec.speaker,
        )
        lines.append(_record_line(rec))
    body = "\n".join(lines) + ("\n" if lines else "")
    manifest = {
        "format": "priorflow-dataset-v1",
        "n_records": n,
        "base_seed": base_seed,
        "table_checksum": codec.table_checksum(),
        "records_sha256": hashlib.sha256(body.encode()).hexdigest(),
        "config": json.loads(run_config.to_json()),
    }
    with open(path, "w") as fh:
        fh.write("#MANIFEST " + json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
        fh.write(body)


class Dataset:
    """Loaded dataset file: records plus the codec rebuilt from the manifest."""

    def __init__(self, manifest: dict, records: list[DatasetRecord], config: RunConfig):
        self.manifest = manifest
        self.records = records
        self.config = config
        self.codec = ToyCodec(config.data)
        self._by_id = {r.utt_id: r for r in records}
        self.by_speaker: dict[int, list[DatasetRecord]] = {}
        for r in records:
            self.by_speaker.setdefault(r.speaker, []).append(r)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[DatasetRecord]:
        return iter(self.records)

    def get(self, utt_id: str) -> DatasetRecord:
        return self._by_id[utt_id]

    def spec_for(self, rec: DatasetRecord) -> UtteranceSpec:
        """Regenerate the underlying utterance (contours included) from its seed."""
        spec = self.codec.synth_utterance(rec.seed)
        if _spec_digest(spec) != rec.spec_digest:
            raise CodecError(f"record {rec.utt_id}: regenerated spec does not match digest")
        return spec


def load_dataset(path: str) -> Dataset:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#MANIFEST "):
            raise CodecError(f"{path}: missing manifest header")
        manifest = json.loads(header[len("#MANIFEST "):])
        body = fh.read()
    digest = hashlib.sha256(body.encode()).hexdigest()
    if digest != manifest["records_sha256"]:
        raise CodecError(f"{path}: manifest checksum mismatch (file corrupted or edited)")
    config = config_from_json(json.dumps(manifest["config"]))
    codec = ToyCodec(config.data)
    if codec.table_checksum() != manifest["table_checksum"]:
        raise CodecError(f"{path}: codec table checksum mismatch")
    records = []
    base_seed = manifest["base_seed"]
    for i, line in enumerate(body.splitlines()):
        utt_id, ph_s, dur_s, spk_s, codes_b, timbre_b = line.split("\t")
        phonemes = np.array([int(x) for x in ph_s.split(",")], dtype=np.int64)
        durations = np.array([int(x) for x in dur_s.split(",")], dtype=np.int64)
        codes = np.frombuffer(base64.b64decode(codes_b), dtype="<i2").astype(np.int64)
        codes = codes.reshape(N_STREAMS, -1)
        timbre = np.frombuffer(base64.b64decode(timbre_b), dtype="<f4").copy()
        spec_like = UtteranceSpec(
            phonemes, durations,
            np.zeros(int(durations.sum())), np.zeros(int(durations.sum())), int(spk_s),
        )
        records.append(
            DatasetRecord(
                utt_id, base_seed + i, _spec_digest(spec_like),
                CodeGrid(codes), TimbreVector(timbre),
                phonemes, durations, int(spk_s),
            )
        )
    if len(records) != manifest["n_records"]:
        raise CodecError(f"{path}: expected {manifest['n_records']} records, found {len(records)}")
    return Dataset(manifest, records, config)
