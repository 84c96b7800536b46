"""Ingestion, segmentation, grid labelling, synthetic tap sounds and the TAPD file format."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import AlignmentError, FormatError, SpecError
from .signals import (
    NO_FOLD,
    NO_POSITION,
    NUM_CLASSES,
    SAMPLE_RATE,
    SIGNAL_LENGTH,
    UNLABELED,
    Dataset,
    DefectClass,
    DomainTag,
    Signal,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# recordings


@dataclass(frozen=True, eq=False)
class Recording:
    samples: np.ndarray
    sample_rate: float = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("recording must be mono")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("recording samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def window_duration_ms(window: int = SIGNAL_LENGTH, sample_rate: float = SAMPLE_RATE) -> float:
    return 1000.0 * window / sample_rate


def read_wav(path) -> Recording:
    """PCM WAV (16/24/32-bit int or float32). Multi-channel files keep channel 0."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if data.ndim == 2:
        data = data[:, 0]
    if data.dtype.kind == "i":
        # scipy left-justifies 24-bit samples into int32
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    elif data.dtype.kind == "u":
        data = (data.astype(np.float64) - 128.0) / 128.0
    return Recording(data.astype(np.float64), float(rate))


def read_raw_float32(path, sample_rate: float = SAMPLE_RATE) -> Recording:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: raw float32 stream length is not a multiple of 4", len(raw) - len(raw) % 4)
    return Recording(np.frombuffer(raw, dtype="<f4").astype(np.float64), sample_rate)


def read_recording(path, sample_rate: float = SAMPLE_RATE) -> Recording:
    path = Path(path)
    if path.suffix.lower() == ".wav":
        return read_wav(path)
    return read_raw_float32(path, sample_rate)


# ---------------------------------------------------------------------------
# segmentation


@dataclass
class Segmentation:
    """Windows cut from one recording; behaves like a sequence of signals."""

    signals: list[Signal]
    onsets: list[int]
    starts: list[int]
    warning: str | None = None

    def __len__(self):
        return len(self.signals)

    def __iter__(self):
        return iter(self.signals)

    def __getitem__(self, i):
        return self.signals[i]


def frame_rms(x: np.ndarray, hop: int) -> np.ndarray:
    n = len(x) // hop
    frames = x[: n * hop].reshape(n, hop)
    return np.sqrt(np.mean(frames * frames, axis=1))


def normalize_peak(x: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(x)) if len(x) else 0.0
    return x / peak if peak > 0 else x


def segment_taps(
    rec: Recording,
    window: int = SIGNAL_LENGTH,
    threshold: float = 8.0,
    pre_roll: int = 128,
    hop: int = 64,
    refractory: int = SIGNAL_LENGTH,
    noise_percentile: float = 5.0,
    align: str = "onset",
    normalize: bool = True,
    domain: str = "unknown",
) -> Segmentation:
    """Cut one fixed-length window per detected tap.

    A tap onset is the first ``hop``-sample frame whose RMS exceeds
    ``threshold`` times the noise floor (the ``noise_percentile`` of all
    frame RMS values), at least ``refractory`` samples after the previous
    onset. The window starts ``pre_roll`` samples before the onset (or
    before the burst peak with ``align="peak"``) and never overlaps the
    previous window. Onsets whose window would run past the end are dropped.
    """
    if align not in ("onset", "peak"):
        raise ValueError("align must be 'onset' or 'peak'")
    x = rec.samples
    if len(x) < window:
        return Segmentation([], [], [], warning="recording shorter than one window")
    rms = frame_rms(x, hop)
    floor = float(np.percentile(rms, noise_percentile))
    active = (rms > threshold * floor) & (rms > 0)
    onsets: list[int] = []
    starts: list[int] = []
    signals: list[Signal] = []
    last_onset = -refractory
    prev_end = 0
    for f in np.flatnonzero(active):
        onset = int(f) * hop
        if onset - last_onset < refractory:
            continue
        anchor = onset
        if align == "peak":
            seg = x[onset : onset + window - pre_roll]
            anchor = onset + int(np.argmax(np.abs(seg)))
        start = max(anchor - pre_roll, prev_end, 0)
        last_onset = onset
        if start + window > len(x):
            continue
        w = x[start : start + window]
        if normalize:
            w = normalize_peak(w)
        onsets.append(onset)
        starts.append(start)
        signals.append(Signal(w.astype(np.float32), DomainTag(domain)))
        prev_end = start + window
    warning = None if signals else "no tap onsets found"
    if warning:
        log.warning("segment_taps: %s", warning)
    return Segmentation(signals, onsets, starts, warning)


# ---------------------------------------------------------------------------
# label grids

EXCLUDED = -2


@dataclass(frozen=True, eq=False)
class LabelGrid:
    """Class code per scan position; ``EXCLUDED`` marks dropped boundary points."""

    codes: np.ndarray
    stride_mm: float = 2.0

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int16)
        if codes.ndim != 2:
            raise ValueError("label grid must be 2-D")
        ok = (codes == EXCLUDED) | ((codes >= 0) & (codes < NUM_CLASSES))
        if not np.all(ok):
            raise ValueError("label grid holds invalid codes")
        object.__setattr__(self, "codes", codes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def size(self) -> int:
        return self.codes.size

    @property
    def included(self) -> int:
        return int(np.sum(self.codes != EXCLUDED))

    @classmethod
    def for_area(cls, side_mm: float, stride_mm: float, fill: DefectClass = DefectClass.N) -> "LabelGrid":
        n = int(round(side_mm / stride_mm)) + 1
        return cls(np.full((n, n), int(fill)), stride_mm)

    @classmethod
    def from_csv(cls, path_or_text, stride_mm: float = 2.0) -> "LabelGrid":
        text = path_or_text
        if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text and Path(path_or_text).exists()):
            text = Path(path_or_text).read_text()
        rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
        if not rows or len({len(r) for r in rows}) != 1:
            raise FormatError("label grid CSV must be a non-empty rectangle")
        codes = np.empty((len(rows), len(rows[0])), dtype=np.int16)
        for i, r in enumerate(rows):
            for j, cell in enumerate(r):
                cell = cell.strip()
                if cell.upper() == "X":
                    codes[i, j] = EXCLUDED
                else:
                    try:
                        codes[i, j] = int(DefectClass.parse(cell))
                    except ValueError:
                        raise FormatError(f"label grid row {i} col {j}: unknown class {cell!r}") from None
        return cls(codes, stride_mm)

    def with_boundary_margin(self, margin: int) -> "LabelGrid":
        """Exclude every cell within ``margin`` cells (Chebyshev) of a different class.

        Taps next to a defect edge excite both regions, so their label is
        ambiguous. Already excluded cells do not count as a class.
        """
        if margin < 0:
            raise ValueError("margin must be non-negative")
        codes = self.codes
        rows, cols = codes.shape
        padded = np.full((rows + 2 * margin, cols + 2 * margin), EXCLUDED, dtype=np.int16)
        padded[margin : margin + rows, margin : margin + cols] = codes
        edge = np.zeros(codes.shape, dtype=bool)
        for di in range(2 * margin + 1):
            for dj in range(2 * margin + 1):
                near = padded[di : di + rows, dj : dj + cols]
                edge |= (near != EXCLUDED) & (near != codes)
        return LabelGrid(np.where(edge, EXCLUDED, codes), self.stride_mm)

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        for row in self.codes:
            w.writerow(["X" if c == EXCLUDED else DefectClass(int(c)).name for c in row])
        return out.getvalue()


def apply_label_grid(signals: Sequence[Signal], grids, mode: str = "all", serpentine: bool = False) -> list[Signal]:
    """Label signals ordered by scan position (row-major, one grid per scanned side).

    ``mode="all"``: one signal per grid cell; signals at excluded cells are
    dropped. ``mode="included"``: signals were recorded only at
    non-excluded cells.
    """
    if isinstance(grids, LabelGrid):
        grids = [grids]
    if mode not in ("all", "included"):
        raise ValueError("mode must be 'all' or 'included'")
    expected = sum(g.size if mode == "all" else g.included for g in grids)
    if len(signals) != expected:
        raise AlignmentError(f"label grid expects {expected} signals ({mode} cells), found {len(signals)}")
    out = []
    it = iter(signals)
    for g in grids:
        rows, cols = g.shape
        for r in range(rows):
            order = range(cols - 1, -1, -1) if serpentine and r % 2 else range(cols)
            for c in order:
                code = int(g.codes[r, c])
                if code == EXCLUDED:
                    if mode == "all":
                        next(it)
                    continue
                s = next(it)
                out.append(Signal(s.samples, s.domain, DefectClass(code), (r, c)))
    return out


# ---------------------------------------------------------------------------
# synthetic tap sounds


def contact_frequency(local_stiffness: float, contact_stiffness: float = 4.0, base_frequency: float = 4000.0) -> float:
    """Dominant frequency of a mass on local and contact springs in series,
    scaled so that an intact point (local stiffness 1) rings at ``base_frequency``."""
    k_eff = contact_stiffness * local_stiffness / (contact_stiffness + local_stiffness)
    k_ref = contact_stiffness / (contact_stiffness + 1.0)
    return base_frequency * math.sqrt(k_eff / k_ref)


@dataclass
class ModalParams:
    frequency: float
    damping: float
    overtone_weights: tuple[float, ...]

    def __post_init__(self):
        self.overtone_weights = tuple(float(w) for w in self.overtone_weights)


# local stiffness (intact = 1), damping ratio, weight per overtone
_DEFAULT_CLASSES = {
    DefectClass.N: (1.0, 0.020, (1.0, 0.30, 0.10)),
    DefectClass.BC: (0.6756, 0.030, (1.0, 0.15, 0.35)),
    DefectClass.BTD: (0.5872, 0.040, (1.0, 0.45, 0.10)),
    DefectClass.BBD: (0.5070, 0.050, (1.0, 0.10, 0.50)),
    DefectClass.LC: (0.4346, 0.015, (1.0, 0.50, 0.20)),
    DefectClass.LBD: (0.3331, 0.025, (1.0, 0.25, 0.40)),
    DefectClass.LTD: (0.2576, 0.012, (1.0, 0.60, 0.05)),
}


@dataclass
class SynthSpec:
    """Parameters of the synthetic damped-mode tap generator.

    Frequencies of every mode are multiplied by ``frequency_multiplier``,
    which models a change of material (the domain shift knob).
    """

    classes: dict[DefectClass, ModalParams]
    overtone_ratios: tuple[float, ...] = (1.0, 1.59, 2.14)
    noise: float = 0.05
    freq_jitter: float = 0.02
    damping_jitter: float = 0.15
    weight_jitter: float = 0.15
    onset: int = 128
    onset_jitter: int = 32
    frequency_multiplier: float = 1.0
    sample_rate: float = SAMPLE_RATE
    domain: str = "synthetic"
    normalize: bool = True

    def __post_init__(self):
        self.classes = {DefectClass(k) if not isinstance(k, str) else DefectClass.parse(k):
                        v if isinstance(v, ModalParams) else ModalParams(**v) for k, v in self.classes.items()}
        self.overtone_ratios = tuple(float(r) for r in self.overtone_ratios)
        self.validate()

    @classmethod
    def default(cls, **overrides) -> "SynthSpec":
        classes = {
            c: ModalParams(round(contact_frequency(k), 1), z, w) for c, (k, z, w) in _DEFAULT_CLASSES.items()
        }
        return cls(classes=classes, **overrides)

    def validate(self) -> None:
        nyquist = self.sample_rate / 2
        if set(self.classes) != set(DefectClass):
            raise SpecError("synth spec needs parameters for all 7 classes")
        seen = set()
        top = max(self.overtone_ratios) * (1 + 3 * self.freq_jitter) * self.frequency_multiplier
        for c, p in self.classes.items():
            if len(p.overtone_weights) != len(self.overtone_ratios):
                raise SpecError(f"{c.name}: one overtone weight per ratio required")
            if not 0 < p.damping < 1:
                raise SpecError(f"{c.name}: damping ratio must lie in (0, 1)")
            if p.frequency <= 0 or p.frequency * top >= nyquist:
                raise SpecError(f"{c.name}: mode frequency must lie below Nyquist ({nyquist:g} Hz)")
            key = (p.frequency, p.damping, p.overtone_weights)
            if key in seen:
                raise SpecError("class parameter sets must be pairwise distinct")
            seen.add(key)
        if self.noise < 0 or self.freq_jitter < 0 or self.onset_jitter < 0:
            raise SpecError("noise and jitter must be non-negative")
        if not 0 <= self.onset < SIGNAL_LENGTH:
            raise SpecError("onset must fall inside the window")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = {c.name: asdict(p) for c, p in self.classes.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        base = cls.default()
        classes = d.pop("classes", None)
        if classes is not None:
            merged = {c.name: asdict(p) for c, p in base.classes.items()}
            for k, v in classes.items():
                merged[DefectClass.parse(k).name].update(v)
            d["classes"] = merged
        else:
            d["classes"] = base.classes
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(f"bad synth spec: {exc}") from None


def synth_signal(params: ModalParams, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    fs = spec.sample_rate
    jit = spec.onset_jitter
    onset = spec.onset + (int(rng.integers(-jit, jit + 1)) if jit else 0)
    onset = min(max(onset, 0), SIGNAL_LENGTH - 1)
    tau = (np.arange(SIGNAL_LENGTH) - onset) / fs
    live = tau >= 0
    tau = np.where(live, tau, 0.0)
    # the whole mode set shares one stiffness jitter so overtone ratios stay fixed
    fscale = spec.frequency_multiplier * (1.0 + spec.freq_jitter * rng.standard_normal())
    zeta = params.damping * (1.0 + spec.damping_jitter * rng.standard_normal())
    zeta = min(max(zeta, 1e-4), 0.99)
    x = np.zeros(SIGNAL_LENGTH)
    for ratio, w in zip(spec.overtone_ratios, params.overtone_weights):
        f = params.frequency * ratio * fscale
        w = w * max(0.0, 1.0 + spec.weight_jitter * rng.standard_normal()) if ratio != 1.0 else w
        x += w * np.exp(-2 * np.pi * f * zeta * tau) * np.sin(2 * np.pi * f * tau)
    x = np.where(live, x, 0.0)
    peak = np.max(np.abs(x))
    if spec.noise > 0:
        x = x + spec.noise * peak * rng.standard_normal(SIGNAL_LENGTH)
    if spec.normalize:
        x = normalize_peak(x)
    return x


def generate_synthetic(spec: SynthSpec, counts: dict, seed: int) -> Dataset:
    """Deterministic synthetic dataset with exactly ``counts[c]`` signals of class c."""
    spec.validate()
    counts = {DefectClass(k) if not isinstance(k, str) else DefectClass.parse(k): int(v) for k, v in counts.items()}
    if any(v < 0 for v in counts.values()):
        raise SpecError("class counts must be non-negative")
    n = sum(counts.values())
    samples = np.zeros((n, SIGNAL_LENGTH), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int16)
    i = 0
    for c in DefectClass:
        k = counts.get(c, 0)
        rng = np.random.default_rng([int(seed), int(c)])
        for _ in range(k):
            samples[i] = synth_signal(spec.classes[c], spec, rng)
            labels[i] = int(c)
            i += 1
    order = np.random.default_rng([int(seed), 99]).permutation(n)
    return Dataset(samples[order], labels[order], np.zeros(n), (spec.domain,))


# ---------------------------------------------------------------------------
# spectral oracle


def peak_frequency(samples: np.ndarray, sample_rate: float = SAMPLE_RATE, nfft: int = 8192) -> np.ndarray:
    """Dominant spectral peak per row (Hz), refined by parabolic interpolation."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    x = x - x.mean(axis=1, keepdims=True)
    mag = np.abs(np.fft.rfft(x, n=nfft, axis=1))
    mag[:, 0] = 0.0
    k = np.argmax(mag, axis=1)
    k = np.clip(k, 1, mag.shape[1] - 2)
    rows = np.arange(len(x))
    a, b, c = np.log(mag[rows, k - 1] + 1e-300), np.log(mag[rows, k] + 1e-300), np.log(mag[rows, k + 1] + 1e-300)
    denom = a - 2 * b + c
    shift = np.where(np.abs(denom) > 1e-12, 0.5 * (a - c) / denom, 0.0)
    return (k + shift) * sample_rate / nfft


class SpectralPeakOracle:
    """Nearest-centroid classifier on the dominant FFT peak (log-frequency).

    Independent of the networks: used to check that a synthetic set is
    learnable before any training is attempted.
    """

    def __init__(self, sample_rate: float = SAMPLE_RATE):
        self.sample_rate = sample_rate
        self.centroids: dict[int, float] = {}

    def features(self, samples) -> np.ndarray:
        return np.log(peak_frequency(samples, self.sample_rate))

    def fit(self, ds: Dataset) -> "SpectralPeakOracle":
        f = self.features(ds.samples)
        y = ds.ground_truth
        self.centroids = {int(c): float(f[y == c].mean()) for c in np.unique(y) if c != UNLABELED}
        return self

    def predict(self, samples) -> np.ndarray:
        f = self.features(samples)
        codes = np.array(sorted(self.centroids))
        cents = np.array([self.centroids[c] for c in codes])
        return codes[np.argmin(np.abs(f[:, None] - cents[None, :]), axis=1)]

    def score(self, ds: Dataset) -> float:
        return float(np.mean(self.predict(ds.samples) == ds.ground_truth))


# ---------------------------------------------------------------------------
# TAPD dataset file
#
#   magic "TAPD" | version u32 | count u64 | signal length u32 |
#   domain count u16 | per domain: byte length u16, utf-8 name |
#   records: float32 * length | label u8 | domain id u16 | fold u8 |
#            row u16 | col u16
#
# Little-endian throughout. 255 marks unlabeled / unassigned fold,
# 65535 an unknown grid position. Masked (hidden) labels are not stored.

DATASET_MAGIC = b"TAPD"
DATASET_VERSION = 1
_NONE_U8 = 255
_NONE_U16 = 65535


def _record_dtype(length: int) -> np.dtype:
    return np.dtype(
        [("samples", "<f4", (length,)), ("label", "u1"), ("domain", "<u2"), ("fold", "u1"), ("row", "<u2"), ("col", "<u2")]
    )


def encode_dataset(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<IQI", DATASET_VERSION, len(ds), SIGNAL_LENGTH))
    buf.write(struct.pack("<H", len(ds.domains)))
    for d in ds.domains:
        raw = d.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    rec = np.zeros(len(ds), dtype=_record_dtype(SIGNAL_LENGTH))
    rec["samples"] = ds.samples
    rec["label"] = np.where(ds.labels == UNLABELED, _NONE_U8, ds.labels)
    rec["domain"] = ds.domain_ids
    rec["fold"] = _NONE_U8 if ds.folds is None else ds.folds
    rec["row"] = np.where(ds.positions[:, 0] == NO_POSITION, _NONE_U16, ds.positions[:, 0])
    rec["col"] = np.where(ds.positions[:, 1] == NO_POSITION, _NONE_U16, ds.positions[:, 1])
    buf.write(rec.tobytes())
    return buf.getvalue()


def decode_dataset(data: bytes) -> Dataset:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated dataset: wanted {n} bytes, {len(data) - pos} left", pos)
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != DATASET_MAGIC:
        raise FormatError("bad dataset magic", 0)
    version, count, length = struct.unpack("<IQI", take(16))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", 4)
    if length != SIGNAL_LENGTH:
        raise FormatError(f"signal length {length} != {SIGNAL_LENGTH}", 16)
    (ndom,) = struct.unpack("<H", take(2))
    domains = []
    for _ in range(ndom):
        (k,) = struct.unpack("<H", take(2))
        at = pos
        try:
            domains.append(take(k).decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError("domain name is not valid UTF-8", at) from None
    dtype = _record_dtype(length)
    body_at = pos
    if count > (len(data) - pos) // dtype.itemsize:
        raise FormatError(f"record count {count} exceeds file size", 8)
    rec = np.frombuffer(take(count * dtype.itemsize), dtype=dtype)
    if pos != len(data):
        raise FormatError("trailing bytes after last record", pos)
    labels = rec["label"].astype(np.int16)
    bad = (labels != _NONE_U8) & (labels >= NUM_CLASSES)
    if np.any(bad):
        raise FormatError("invalid label code", body_at + int(np.argmax(bad)) * dtype.itemsize + 4 * length)
    labels[labels == _NONE_U8] = UNLABELED
    dom = rec["domain"].astype(np.int32)
    if count and dom.max() >= len(domains):
        raise FormatError("domain id outside the domain table", body_at + int(np.argmax(dom >= len(domains))) * dtype.itemsize)
    fold = rec["fold"].astype(np.int16)
    if count and np.any(fold == _NONE_U8) and not np.all(fold == _NONE_U8):
        raise FormatError("fold ids must be assigned for all records or none", body_at)
    folds = None if (count == 0 or np.all(fold == _NONE_U8)) else fold
    pos_arr = np.stack([rec["row"].astype(np.int32), rec["col"].astype(np.int32)], axis=1) if count else np.zeros((0, 2))
    pos_arr = np.where(pos_arr == _NONE_U16, NO_POSITION, pos_arr)
    try:
        return Dataset(np.array(rec["samples"]), labels, dom, tuple(domains), folds=folds, positions=pos_arr)
    except ValueError as exc:
        raise FormatError(str(exc), body_at) from None


def write_dataset(path, ds: Dataset) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_dataset(ds))
    tmp.replace(path)


def read_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
