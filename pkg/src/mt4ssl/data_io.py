"""WAV and manifest I/O plus a synthetic corpus with known frame-level hidden states."""

from __future__ import annotations

import logging
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise FormatError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise FormatError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def read_wav(path, sample_rate: Optional[int] = None) -> Waveform:
    """Read a PCM16 mono WAV, scaling samples by 1/32768."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, nframes = fh.getnchannels(), fh.getsampwidth(), fh.getframerate(), fh.getnframes()
            comp = fh.getcomptype()
            raw = fh.readframes(nframes)
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: unreadable WAV ({e or 'truncated header'})") from e
    if comp != "NONE":
        raise FormatError(f"{path}: codec {comp!r} is not PCM")
    if channels != 1:
        raise FormatError(f"{path}: channels={channels}, expected mono")
    if width != 2:
        raise FormatError(f"{path}: sample width={8 * width} bits, expected 16")
    if sample_rate is not None and rate != sample_rate:
        raise FormatError(f"{path}: sample_rate={rate}, expected {sample_rate}")
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def wav_num_samples(path) -> int:
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes()


@dataclass
class ManifestEntry:
    path: str
    num_samples: int
    latent_path: Optional[str] = None


@dataclass
class Manifest:
    root: Path
    entries: List[ManifestEntry]

    def __len__(self) -> int:
        return len(self.entries)

    def wav_paths(self) -> List[Path]:
        return [self.root / e.path for e in self.entries]


def write_manifest(path, manifest: Manifest) -> None:
    with open(path, "w") as fh:
        fh.write(f"{manifest.root}\n")
        for e in manifest.entries:
            cols = [e.path, str(e.num_samples)] + ([e.latent_path] if e.latent_path else [])
            fh.write("\t".join(cols) + "\n")


def load_manifest(path, validate: bool = True) -> Manifest:
    """Parse a TSV manifest (first line = root dir; then ``relpath<TAB>num_samples[<TAB>latent]``)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    root = Path(lines[0].strip())
    if not root.is_absolute():
        root = (Path(path).parent / root).resolve()
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise FormatError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns, got {len(cols)}")
        entries.append(ManifestEntry(cols[0], int(cols[1]), cols[2] if len(cols) == 3 else None))
    if not entries:
        raise FormatError(f"{path}: manifest has no entries")
    man = Manifest(root, entries)
    if validate:
        for e in entries:
            n = wav_num_samples(root / e.path)
            if n != e.num_samples:
                raise FormatError(f"{root / e.path}: manifest says {e.num_samples} samples, file has {n}")
    return man


def read_frame_labels(path) -> List[np.ndarray]:
    with open(path) as fh:
        return [np.array(line.split(), dtype=np.int64) for line in fh]


def write_frame_labels(path, rows: Sequence[Sequence[int]]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(" ".join(str(int(v)) for v in row) + "\n")


def load_waves(manifest: Manifest, sample_rate: Optional[int] = None) -> List[np.ndarray]:
    return [read_wav(p, sample_rate).samples for p in manifest.wav_paths()]


def load_latent(manifest: Manifest) -> List[np.ndarray]:
    out = []
    for e in manifest.entries:
        if e.latent_path is None:
            raise FormatError(f"manifest entry {e.path} has no latent-state labels")
        (row,) = read_frame_labels(manifest.root / e.latent_path)
        out.append(row)
    return out


@dataclass
class SyntheticSpec:
    """Hidden-state audio: each state is two sinusoids plus white noise; states dwell for whole frames."""

    num_states: int = 8
    sample_rate: int = 16000
    hop: int = 320
    window: int = 400
    min_seconds: float = 1.0
    max_seconds: float = 2.0
    dwell_min: int = 10
    dwell_max: int = 40
    snr_db: float = 10.0
    freq_lo: float = 120.0
    freq_hi: float = 4000.0
    amplitude: float = 0.25
    seed: int = 0
    state_freqs: Optional[List[Tuple[float, float]]] = None

    def __post_init__(self) -> None:
        if self.num_states < 2:
            raise ConfigError(f"num_states must be >= 2, got {self.num_states}")
        if self.dwell_min < 1 or self.dwell_max < self.dwell_min:
            raise ConfigError(f"invalid dwell range [{self.dwell_min}, {self.dwell_max}]")
        if self.min_seconds * self.sample_rate < self.window:
            raise ConfigError("utterances must be at least one analysis window long")

    def frequencies(self) -> np.ndarray:
        if self.state_freqs is not None:
            f = np.asarray(self.state_freqs, dtype=np.float64)
            if f.shape != (self.num_states, 2):
                raise ConfigError(f"state_freqs must be {self.num_states} x 2, got {f.shape}")
            return f
        rng = np.random.default_rng([self.seed, 7])
        lo, hi = np.log(self.freq_lo), np.log(self.freq_hi)
        return np.exp(rng.uniform(lo, hi, size=(self.num_states, 2)))

    def num_frames(self, num_samples: int) -> int:
        return 0 if num_samples < self.window else (num_samples - self.window) // self.hop + 1


def render_utterance(spec: SyntheticSpec, rng: np.random.Generator, freqs: np.ndarray):
    """One utterance: returns (samples, per-frame state labels)."""
    n = int(rng.integers(int(spec.min_seconds * spec.sample_rate), int(spec.max_seconds * spec.sample_rate) + 1))
    cells = -(-n // spec.hop)
    states = np.empty(cells, dtype=np.int64)
    pos, prev = 0, -1
    while pos < cells:
        s = int(rng.integers(spec.num_states - (prev >= 0)))
        if prev >= 0 and s >= prev:
            s += 1  # never repeat the previous state
        dwell = int(rng.integers(spec.dwell_min, spec.dwell_max + 1))
        states[pos : pos + dwell] = s
        pos += dwell
        prev = s
    t = np.arange(n) / spec.sample_rate
    cell_of_sample = np.arange(n) // spec.hop
    phases = rng.uniform(0, 2 * np.pi, size=(spec.num_states, 2))
    f = freqs[states[cell_of_sample]]
    ph = phases[states[cell_of_sample]]
    clean = spec.amplitude * (np.sin(2 * np.pi * f[:, 0] * t + ph[:, 0]) + np.sin(2 * np.pi * f[:, 1] * t + ph[:, 1]))
    signal_power = spec.amplitude**2
    noise = rng.normal(0.0, np.sqrt(signal_power / 10 ** (spec.snr_db / 10)), size=n)
    samples = np.clip(clean + noise, -1.0, 32767 / 32768)
    # frame t spans samples [t*hop, t*hop + window); its centre falls in hop cell t
    labels = states[: spec.num_frames(n)]
    return samples, labels


def synth_corpus(spec: SyntheticSpec, n_utts: int, out_dir) -> Manifest:
    """Write ``n_utts`` WAVs, per-utterance latent label files and ``manifest.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "latent").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    freqs = spec.frequencies()
    entries = []
    for i in range(n_utts):
        samples, labels = render_utterance(spec, rng, freqs)
        rel = f"wav/utt{i:05d}.wav"
        lat = f"latent/utt{i:05d}.lab"
        try:
            write_wav(out / rel, samples, spec.sample_rate)
            write_frame_labels(out / lat, [labels])
        except OSError as e:
            raise OSError(f"writing synthetic utterance {i} under {out}: {e}") from e
        entries.append(ManifestEntry(rel, len(samples), lat))
    man = Manifest(Path("."), entries)
    write_manifest(out / "manifest.tsv", man)
    log.info("wrote %d synthetic utterances to %s", n_utts, out)
    return Manifest(out.resolve(), entries)
