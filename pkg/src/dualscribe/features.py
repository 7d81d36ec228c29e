"""Acoustic front end: log-mel filterbanks, normalization, masking noise.

Waveforms come in as mono float arrays in [-1, 1]; features leave as
(T, n_mels + pitch_dims) float32 matrices.  Every randomized transform
takes an explicit generator, so corpus preparation is reproducible and
utterances can be processed concurrently without shared state.
"""

from __future__ import annotations

import functools
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, FormatError

LOG_FLOOR = 1e-10
FEATS_MAGIC = b"DSFT0001"


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class SpecAugmentPolicy:
    """Masking policy; widths adapt to short utterances via time_frac."""

    time_masks: int = 2
    time_width: int = 20
    time_frac: float = 0.2
    freq_masks: int = 2
    freq_width: int = 10
    time_warp: bool = False
    warp_window: int = 5

    def validate(self) -> None:
        if min(self.time_masks, self.time_width, self.freq_masks,
               self.freq_width, self.warp_window) < 0:
            raise ConfigError("mask counts and widths must be >= 0")
        if not (0.0 <= self.time_frac <= 1.0):
            raise ConfigError(f"time_frac {self.time_frac} outside [0, 1]")


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    pitch_dims: int = 3
    pitch: str = "zeros"        # "autocorr" fills the channel with f0 guesses
    fft_size: int = 512
    specaug: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)

    @property
    def window_samples(self) -> int:
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    @property
    def feat_dim(self) -> int:
        return self.n_mels + self.pitch_dims

    def validate(self) -> None:
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.window_ms <= self.hop_ms:
            raise ConfigError("window must be longer than the hop")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.pitch_dims < 0:
            raise ConfigError("pitch_dims must be >= 0")
        if self.pitch not in ("zeros", "autocorr"):
            raise ConfigError(f"pitch mode {self.pitch!r} unknown")
        if self.fft_size < self.window_samples:
            raise ConfigError("fft_size must cover the analysis window")
        self.specaug.validate()


# ---------------------------------------------------------------------------
# waveform files


def read_wav(path, expected_rate: int = 16000) -> np.ndarray:
    """Load a 16-bit PCM mono WAV as float32 in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if channels != 1:
        raise FormatError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise FormatError(f"{path}: expected 16-bit samples, found {8 * width}-bit")
    if rate != expected_rate:
        raise FormatError(f"{path}: sample rate {rate}, expected {expected_rate}")
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path, samples: np.ndarray, rate: int = 16000) -> None:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise ContractError(f"waveform must be 1-D, got shape {samples.shape}")
    ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(ints.tobytes())


# ---------------------------------------------------------------------------
# filterbank


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return mel_to_hz(edges[1:-1])


@functools.lru_cache(maxsize=8)
def _mel_matrix(n_mels: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """(n_mels, fft_size//2 + 1) triangular weights, linear in mel."""
    n_bins = fft_size // 2 + 1
    bin_mel = hz_to_mel(np.arange(n_bins) * sample_rate / fft_size)
    points = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, center, hi = points[m], points[m + 1], points[m + 2]
        up = (bin_mel - lo) / (center - lo)
        down = (hi - bin_mel) / (hi - center)
        weights[m] = np.clip(np.minimum(up, down), 0.0, None)
    return weights


def _frame(waveform: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = len(waveform)
    t = 1 + (n - window) // hop
    idx = np.arange(t)[:, None] * hop + np.arange(window)[None, :]
    return waveform[idx]


def fbank(waveform: np.ndarray, config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Log-mel energies with the pitch channel appended, (T, feat_dim) f32."""
    config.validate()
    waveform = np.asarray(waveform, dtype=np.float64)
    if waveform.ndim != 1:
        raise ContractError(f"waveform must be 1-D, got shape {waveform.shape}")
    window, hop = config.window_samples, config.hop_samples
    if len(waveform) < window:
        raise ContractError(
            f"waveform of {len(waveform)} samples is shorter than one "
            f"{window}-sample window"
        )
    frames = _frame(waveform, window, hop) * np.hamming(window)
    spec = np.fft.rfft(frames, n=config.fft_size, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    mels = power @ _mel_matrix(config.n_mels, config.fft_size,
                               config.sample_rate).T
    logmel = np.log(np.maximum(mels, LOG_FLOOR))
    if config.pitch == "autocorr" and config.pitch_dims > 0:
        pitch = estimate_pitch(waveform, config)[:, : config.pitch_dims]
    else:
        pitch = np.zeros((len(frames), config.pitch_dims))
    return np.concatenate([logmel, pitch], axis=1).astype(np.float32)


def estimate_pitch(waveform: np.ndarray,
                   config: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Per-frame (log f0, peak correlation, voiced flag) by autocorrelation.

    A deliberately plain estimator searching lags for 50-400 Hz; frames
    with weak energy or a weak correlation peak are marked unvoiced and
    zeroed.  Framing matches fbank, so the channels align.
    """
    waveform = np.asarray(waveform, dtype=np.float64)
    frames = _frame(waveform, config.window_samples, config.hop_samples)
    lag_lo = int(config.sample_rate / 400.0)
    lag_hi = min(int(config.sample_rate / 50.0), frames.shape[1] - 1)
    out = np.zeros((len(frames), 3))
    for i, fr in enumerate(frames):
        if float(np.mean(fr ** 2)) < 1e-8:
            continue
        best_lag, best_r = 0, 0.0
        for lag in range(lag_lo, lag_hi + 1):
            a, b = fr[:-lag], fr[lag:]
            denom = np.sqrt(float(a @ a) * float(b @ b)) + 1e-12
            r = float(a @ b) / denom
            if r > best_r:
                best_lag, best_r = lag, r
        if best_lag and best_r > 0.5:
            f0 = config.sample_rate / best_lag
            out[i] = (np.log(f0 / 100.0), best_r, 1.0)
    return out


# ---------------------------------------------------------------------------
# normalization and masking


def utterance_cmvn(frames: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance per dimension over the utterance.

    Dimensions without variance (constant columns, stubbed pitch) come
    out as zeros, which also makes the transform idempotent.
    """
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ContractError(f"cmvn needs a (T, F) matrix, got {frames.shape}")
    x = frames.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    out = np.where(std > 0.0, (x - mean) / np.where(std > 0.0, std, 1.0), 0.0)
    return out.astype(frames.dtype)


def spec_augment(frames: np.ndarray, policy: SpecAugmentPolicy,
                 rng: np.random.Generator,
                 n_freq: int | None = None) -> np.ndarray:
    """Apply time warping and time/frequency masking, returning a copy.

    Time-mask widths are capped so all time masks together can cover at
    most time_frac of the utterance.  Frequency masks stay inside the
    first n_freq dimensions when given (the mel block, leaving any pitch
    channel alone).  Masked cells become 0, the post-CMVN mean.
    """
    policy.validate()
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ContractError(f"spec_augment needs a (T, F) matrix, got {frames.shape}")
    t, f = frames.shape
    n_freq = f if n_freq is None else min(n_freq, f)
    out = frames.copy()
    if policy.time_warp and t >= 2 * policy.warp_window + 2 and policy.warp_window > 0:
        w = policy.warp_window
        center = int(rng.integers(w, t - w))
        shift = int(rng.integers(-w, w + 1))
        pivot = center + shift
        src = np.concatenate([
            np.linspace(0.0, center, pivot, endpoint=False),
            np.linspace(center, t - 1, t - pivot),
        ])
        out = out[np.round(src).astype(np.int64)]
    if policy.time_masks > 0:
        width = min(policy.time_width,
                    int(policy.time_frac * t) // policy.time_masks)
        for _ in range(policy.time_masks):
            if width < 1:
                break
            start = int(rng.integers(0, t - width + 1))
            out[start:start + width, :] = 0.0
    if policy.freq_masks > 0:
        width = min(policy.freq_width, n_freq)
        for _ in range(policy.freq_masks):
            if width < 1:
                break
            start = int(rng.integers(0, n_freq - width + 1))
            out[:, start:start + width] = 0.0
    return out


# ---------------------------------------------------------------------------
# feature files


def save_feats(path, frames: np.ndarray) -> None:
    """Write a (T, F) matrix as magic + u32 dims + little-endian f32 data."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise ContractError(f"feature files hold (T, F) matrices, got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATS_MAGIC)
        fh.write(struct.pack("<II", frames.shape[0], frames.shape[1]))
        fh.write(np.ascontiguousarray(frames, dtype="<f4").tobytes())


def load_feats(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(FEATS_MAGIC)] != FEATS_MAGIC:
        raise FormatError(f"{path}: bad magic, not a feature file")
    head = len(FEATS_MAGIC)
    if len(blob) < head + 8:
        raise FormatError(f"{path}: truncated header")
    t, f = struct.unpack_from("<II", blob, head)
    body = blob[head + 8:]
    want = t * f * 4
    if len(body) != want:
        raise FormatError(
            f"{path}: payload of {len(body)} bytes does not match "
            f"declared {t}x{f} matrix ({want} bytes)"
        )
    return np.frombuffer(body, dtype="<f4").reshape(t, f).copy()
