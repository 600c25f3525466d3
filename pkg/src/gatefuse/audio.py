"""Waveform perturbations for test-time augmentation, plus WAV I/O.

The three views are a VoIP-style codec chain (downsample to 8 kHz, 8-bit
mu-law encode/decode, upsample back), seeded additive white noise at a
target SNR, and a joint speed-pitch shift.  Every transform preserves the
input length and keeps samples inside [-1, 1]; view generation is a pure
function of (samples, config, utterance id).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .seeding import derive_seed

PIPELINE_RATE = 16000
MU = 255.0


@dataclass
class Waveform:
    sample_rate: int
    samples: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be a 1-D vector")
        if not np.isfinite(self.samples).all():
            raise ValueError("non-finite sample")

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class TtaConfig:
    """Augmented-view recipe: view 1 codec, view 2 noise, view 3 speed;
    larger K cycles the three transforms with distinct derived seeds."""

    k: int = 3
    noise_snr_db: float = 15.0
    speed_factor: float = 1.05
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("K must be >= 1")
        _check_speed_factor(self.speed_factor)


def _check_speed_factor(factor: float) -> None:
    if not 0.5 < factor <= 2.0:
        raise ValueError(f"speed factor {factor} outside (0.5, 2.0]")


def crop_pad(w: Waveform, seconds: float) -> Waveform:
    """Force the waveform to exactly seconds * rate samples: keep the
    leading samples of longer inputs, zero-pad shorter ones at the end."""
    n = int(round(seconds * w.sample_rate))
    out = np.zeros(n, dtype=np.float64)
    m = min(n, len(w))
    out[:m] = w.samples[:m]
    return Waveform(w.sample_rate, out)


def resample(w: Waveform, new_rate: int, half_width: int = 16) -> Waveform:
    """Windowed-sinc (Hann) resampling to ``new_rate``.

    Output length is round(n * new_rate / rate).  The kernel cutoff sits
    at the lower of the two Nyquist frequencies, widened proportionally
    when downsampling.
    """
    if new_rate == w.sample_rate:
        return Waveform(w.sample_rate, w.samples.copy())
    n = len(w)
    ratio = new_rate / w.sample_rate
    out_len = int(round(n * ratio))
    if n == 0 or out_len == 0:
        return Waveform(new_rate, np.zeros(out_len))
    fc = min(1.0, ratio)
    width = int(np.ceil(half_width / fc))
    # position of each output sample on the input time axis
    t = np.arange(out_len) / ratio
    k0 = np.ceil(t - width).astype(np.int64)
    offsets = np.arange(2 * width + 1)
    k = k0[:, None] + offsets[None, :]
    u = t[:, None] - k
    kernel = fc * np.sinc(fc * u) * (0.5 + 0.5 * np.cos(np.pi * u / width))
    kernel[np.abs(u) > width] = 0.0
    valid = (k >= 0) & (k < n)
    x = np.where(valid, w.samples[np.clip(k, 0, n - 1)], 0.0)
    out = np.sum(x * kernel, axis=1)
    return Waveform(new_rate, np.clip(out, -1.0, 1.0))


def mu_law_round_trip(samples: np.ndarray) -> np.ndarray:
    """8-bit mu-law companding (mu=255) with a symmetric mid-tread
    quantizer (255 of the 256 codes), so silence is a fixed point."""
    compressed = np.sign(samples) * np.log1p(MU * np.abs(samples)) / np.log1p(MU)
    code = np.round(compressed * 127.0)
    expanded = code / 127.0
    return np.sign(expanded) * (np.expm1(np.abs(expanded) * np.log1p(MU)) / MU)


def voip_codec(w: Waveform) -> Waveform:
    """Narrowband codec simulation: 16 kHz -> 8 kHz -> mu-law 8-bit ->
    16 kHz, re-cropped to the input length.  Deterministic."""
    if w.sample_rate != PIPELINE_RATE:
        raise ValueError(f"codec expects {PIPELINE_RATE} Hz input")
    narrow = resample(w, 8000)
    decoded = Waveform(8000, mu_law_round_trip(narrow.samples))
    wide = resample(decoded, PIPELINE_RATE)
    return crop_pad(wide, len(w) / w.sample_rate)


def add_noise(w: Waveform, snr_db: float, seed: int) -> Waveform:
    """Seeded white Gaussian noise scaled to the target SNR, then peak
    clamped to [-1, 1].  Identical (input, snr, seed) gives identical
    output."""
    p_sig = float(np.mean(w.samples ** 2))
    if p_sig <= 0.0:
        raise ValueError("cannot set an SNR against a zero-power signal")
    noise = np.random.default_rng(seed).standard_normal(len(w))
    p_noise = float(np.mean(noise ** 2))
    target = p_sig / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(target / p_noise)
    return Waveform(w.sample_rate, np.clip(w.samples + noise, -1.0, 1.0))


def speed_pitch(w: Waveform, factor: float) -> Waveform:
    """Joint speed and pitch shift: linear-interpolation resample of the
    time axis by 1/factor, then crop/pad back to the original length."""
    _check_speed_factor(factor)
    n = len(w)
    out_len = int(round(n / factor))
    positions = np.arange(out_len) * factor
    shifted = np.interp(positions, np.arange(n), w.samples)
    return crop_pad(Waveform(w.sample_rate, shifted), n / w.sample_rate)


def make_views(w: Waveform, cfg: TtaConfig, utt_id: str) -> list[Waveform]:
    """The K augmented views of one utterance, in the fixed order codec,
    noise, speed-pitch (cycling for K > 3)."""
    views = []
    for k in range(1, cfg.k + 1):
        kind = (k - 1) % 3
        if kind == 0:
            views.append(voip_codec(w))
        elif kind == 1:
            seed = derive_seed(cfg.master_seed, utt_id, k)
            views.append(add_noise(w, cfg.noise_snr_db, seed))
        else:
            views.append(speed_pitch(w, cfg.speed_factor))
    return views


def write_wav(w: Waveform, path: str | Path) -> None:
    """16-bit PCM mono RIFF at 16 kHz (inputs at other rates are resampled
    first)."""
    if w.sample_rate != PIPELINE_RATE:
        w = resample(w, PIPELINE_RATE)
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    data = pcm.tobytes()
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(data)))
        f.write(b"WAVE")
        f.write(b"fmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, 1, PIPELINE_RATE,
                            PIPELINE_RATE * 2, 2, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(data)))
        f.write(data)


def read_wav(path: str | Path) -> Waveform:
    """Parse a RIFF WAV (PCM, 16-bit, mono); any input rate is resampled
    to 16 kHz.  Errors name the offending chunk."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != b"RIFF":
        raise FormatError(f"{path}: missing RIFF header")
    if blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: RIFF form is not WAVE")
    off = 12
    fmt = None
    data = None
    while off + 8 <= len(blob):
        chunk_id = blob[off:off + 4]
        (size,) = struct.unpack_from("<I", blob, off + 4)
        body = blob[off + 8:off + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: chunk {chunk_id!r} truncated")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        off += 8 + size + (size % 2)
    if fmt is None:
        raise FormatError(f"{path}: missing 'fmt ' chunk")
    if data is None:
        raise FormatError(f"{path}: missing 'data' chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack_from(
        "<HHIIHH", fmt, 0)
    if audio_format != 1:
        raise FormatError(f"{path}: 'fmt ' declares non-PCM codec "
                          f"{audio_format}")
    if channels != 1:
        raise FormatError(f"{path}: 'fmt ' declares {channels} channels, "
                          f"need mono")
    if bits != 16:
        raise FormatError(f"{path}: 'fmt ' declares {bits}-bit samples, "
                          f"need 16")
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    w = Waveform(int(rate), np.clip(samples, -1.0, 1.0))
    if rate != PIPELINE_RATE:
        w = resample(w, PIPELINE_RATE)
    return w
