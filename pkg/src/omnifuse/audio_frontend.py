"""Audio path: resample -> 128-band log-mel -> frozen encoder stub -> stride-3
pooling -> trainable two-linear projector.

Framing constants are fixed (16 kHz, 25 ms / 10 ms windows, 128 bands, pool
stride 3) so one projected token always covers 60 ms of source audio:
10 ms hop x 2 (encoder downsample) x 3 (pooling).
"""
from __future__ import annotations

import wave as _wave
from dataclasses import dataclass

import numpy as np

from omnifuse.numerics import (
    Tensor,
    add,
    concat_axis,
    embed_lookup,
    gelu,
    gelu_np as _gelu_np,
    matmul,
    mean_pool_axis,
    reshape,
)

SAMPLE_RATE = 16000
WINDOW_SAMPLES = 400   # 25 ms
HOP_SAMPLES = 160      # 10 ms
N_MELS = 128
POOL_STRIDE = 3
FRAME_SPAN_MS = 60
_LOG_FLOOR = 1e-10
_DYNAMIC_RANGE_LOG10 = 8.0  # 80 dB in power


@dataclass
class AudioWave:
    """PCM samples in [-1, 1] at an arbitrary rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("AudioWave needs a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if np.max(np.abs(self.samples)) > 1.0 + 1e-9:
            raise ValueError("samples exceed [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MelSpectrogram:
    """128 x T_mel log-mel energies plus the fixed framing metadata."""

    mels: np.ndarray
    window_samples: int = WINDOW_SAMPLES
    hop_samples: int = HOP_SAMPLES
    n_mels: int = N_MELS
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.mels.ndim != 2 or self.mels.shape[0] != self.n_mels:
            raise ValueError(f"expected ({self.n_mels}, T) mel matrix, got {self.mels.shape}")

    @property
    def n_frames(self) -> int:
        return self.mels.shape[1]


@dataclass
class AudioTokens:
    """Projected audio embeddings, one token per 60 ms of source audio."""

    tokens: Tensor          # (T_a, d_model)
    frame_span_ms: int = FRAME_SPAN_MS


def mel_frame_count(n_samples: int) -> int:
    return -(-n_samples // HOP_SAMPLES)


def encoder_frame_count(t_mel: int) -> int:
    return -(-t_mel // 2)


def token_count(t_enc: int) -> int:
    return -(-t_enc // POOL_STRIDE)


def resample(wave: AudioWave, target_rate: int = SAMPLE_RATE) -> AudioWave:
    """Linear-interpolation resampler; exact identity when rates match.

    Lower fidelity than a polyphase filter, which does not matter for the
    timing/shape properties this package cares about.
    """
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    if wave.sample_rate == target_rate:
        return wave
    n_in = wave.samples.size
    n_out = int(round(n_in * target_rate / wave.sample_rate))
    if n_out < 1:
        raise ValueError("resampled signal would be empty")
    src_pos = np.arange(n_out) * (wave.sample_rate / target_rate)
    out = np.interp(src_pos, np.arange(n_in), wave.samples)
    return AudioWave(np.clip(out, -1.0, 1.0), target_rate)


def _reflect_indices(idx: np.ndarray, n: int) -> np.ndarray:
    """Map out-of-range indices by boundary reflection (no edge repeat)."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _hann(n: int) -> np.ndarray:
    # periodic window, matching the usual STFT convention
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def _htk_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _htk_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = WINDOW_SAMPLES,
                   sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the HTK mel scale, 0 Hz to Nyquist.

    At this FFT size a few of the lowest bands are narrower than one bin and
    stay empty; their log-mel cells sit at the floor, which downstream code
    tolerates.
    """
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / n_fft
    edges = _htk_hz(np.linspace(_htk_mel(0.0), _htk_mel(sample_rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_FILTERBANK = None


def _filterbank() -> np.ndarray:
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    return _FILTERBANK


def log_mel(wave: AudioWave) -> MelSpectrogram:
    """Hann-windowed power STFT through the mel filterbank, log10 with floor,
    then an 80 dB max-referenced dynamic-range clamp."""
    if wave.sample_rate != SAMPLE_RATE:
        raise ValueError(f"log_mel expects {SAMPLE_RATE} Hz input, got {wave.sample_rate}")
    x = wave.samples
    n = x.size
    pad = WINDOW_SAMPLES // 2
    idx = _reflect_indices(np.arange(-pad, n + pad), n)
    padded = x[idx]

    t_mel = mel_frame_count(n)
    starts = np.arange(t_mel) * HOP_SAMPLES
    frames = padded[starts[:, None] + np.arange(WINDOW_SAMPLES)[None, :]]
    spec = np.fft.rfft(frames * _hann(WINDOW_SAMPLES), axis=1)
    power = np.abs(spec) ** 2                       # (T, n_bins)
    mel_power = power @ _filterbank().T             # (T, n_mels)
    log_spec = np.log10(np.maximum(mel_power, _LOG_FLOOR))
    log_spec = np.maximum(log_spec, log_spec.max() - _DYNAMIC_RANGE_LOG10)
    return MelSpectrogram(log_spec.T)


class AudioEncoderStub:
    """Frozen stand-in for a pretrained audio encoder.

    Strided 1-D convolution (kernel 3, stride 2, zero padding) over time,
    then a linear mix and GeLU. Halves the frame count exactly:
    T_enc = ceil(T_mel / 2). Weights are seeded once and never trained.
    """

    def __init__(self, d_out: int, seed: int):
        rng = np.random.default_rng(seed)
        k = N_MELS * 3
        self.conv_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(k), (k, d_out)))
        self.conv_b = Tensor(rng.normal(0.0, 0.1, (d_out,)))
        self.mix_w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_out), (d_out, d_out)))
        self.mix_b = Tensor(rng.normal(0.0, 0.1, (d_out,)))
        self.d_out = d_out

    def params(self) -> dict:
        return {"conv_w": self.conv_w, "conv_b": self.conv_b,
                "mix_w": self.mix_w, "mix_b": self.mix_b}

    def __call__(self, mel: MelSpectrogram) -> np.ndarray:
        m = mel.mels                                   # (128, T)
        t_mel = m.shape[1]
        t_enc = encoder_frame_count(t_mel)
        padded = np.zeros((N_MELS, t_mel + 2))
        padded[:, 1:t_mel + 1] = m
        starts = np.arange(t_enc) * 2
        # (T_enc, 128, 3) windows flattened for one matmul
        windows = np.stack([padded[:, s:s + 3] for s in starts], axis=0)
        flat = windows.reshape(t_enc, N_MELS * 3)
        h = flat @ self.conv_w.data + self.conv_b.data
        h = h @ self.mix_w.data + self.mix_b.data
        return _gelu_np(h)                             # (T_enc, d_out)


def pool_stride3(x: Tensor) -> Tensor:
    """Mean-pool rows in groups of 3; a trailing partial group is averaged
    over its actual length. (T_enc, d) -> (ceil(T_enc/3), d)."""
    if x.ndim != 2:
        raise ValueError(f"pool_stride3 needs (T, d) input, got {x.shape}")
    t_enc, d = x.shape
    full = t_enc // POOL_STRIDE
    rem = t_enc % POOL_STRIDE
    parts = []
    if full:
        head = x if not rem else embed_lookup(x, np.arange(full * POOL_STRIDE))
        grouped = reshape(head, (full, POOL_STRIDE, d))
        parts.append(mean_pool_axis(grouped, 1))
    if rem:
        tail = embed_lookup(x, np.arange(full * POOL_STRIDE, t_enc))
        parts.append(reshape(mean_pool_axis(tail, 0), (1, d)))
    return parts[0] if len(parts) == 1 else concat_axis(parts, 0)


class AudioProjector:
    """Trainable stride-3 mean pooling plus a two-linear GeLU projector into
    the decoder embedding space."""

    def __init__(self, d_in: int, d_model: int, seed: int):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_in), (d_in, d_model)),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(d_model), requires_grad=True)
        self.w2 = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d_model), (d_model, d_model)),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(d_model), requires_grad=True)
        self.d_in = d_in
        self.d_model = d_model

    def params(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def __call__(self, frames) -> AudioTokens:
        """frames: (T_enc, d_in) array or Tensor -> AudioTokens (T_a, d_model)."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected (T_enc, {self.d_in}) frames, got {x.shape}")
        pooled = pool_stride3(x)
        h = gelu(add(matmul(pooled, self.w1), self.b1))
        out = add(matmul(h, self.w2), self.b2)
        return AudioTokens(out)


def load_wav(path) -> AudioWave:
    """Read 16-bit signed little-endian PCM WAV; first channel if multichannel."""
    with _wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError("only 16-bit PCM WAV is supported")
        n_ch = f.getnchannels()
        raw = f.readframes(f.getnframes())
        rate = f.getframerate()
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    if n_ch > 1:
        data = data[::n_ch]
    return AudioWave(np.clip(data, -1.0, 1.0), rate)


def save_wav(path, wave: AudioWave) -> None:
    """Write mono 16-bit PCM WAV."""
    pcm = np.clip(wave.samples, -1.0, 1.0)
    ints = np.round(pcm * 32767.0).astype("<i2")
    with _wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave.sample_rate)
        f.writeframes(ints.tobytes())
