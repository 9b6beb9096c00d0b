"""Walk a waveform through the audio frontend and verify the token
arithmetic: each output token spans 60 ms of source audio.

Run:  python3 demos/audio_frontend_tour.py
"""

import numpy as np

from omnifuse.audio_frontend import (
    AudioEncoderStub,
    AudioProjector,
    AudioWave,
    encoder_frame_count,
    log_mel,
    mel_frame_count,
    resample,
    token_count,
)


def make_tone(freq, seconds, rate=16000):
    t = np.arange(int(seconds * rate)) / rate
    return AudioWave(0.4 * np.sin(2 * np.pi * freq * t), rate)


def framing_chain():
    print("== framing chain: samples -> mel -> encoder -> tokens ==")
    encoder = AudioEncoderStub(d_out=16, seed=0)
    projector = AudioProjector(d_in=16, d_model=24, seed=1)
    for seconds in (0.12, 0.5, 1.0, 3.0, 30.0):
        wave = make_tone(440.0, seconds)
        mel = log_mel(wave)
        frames = encoder(mel)
        tokens = projector(frames)
        s = wave.samples.size
        print(f"   {seconds:5.2f}s ({s:6d} samples)  mel {mel.n_frames:5d}  "
              f"enc {frames.shape[0]:5d}  tokens {tokens.tokens.shape[0]:4d}  "
              f"(formulas: {mel_frame_count(s)}/"
              f"{encoder_frame_count(mel_frame_count(s))}/"
              f"{token_count(encoder_frame_count(mel_frame_count(s)))})")
    print("   every token covers 160 * 2 * 3 = 960 samples = 60 ms")


def resampling():
    print("== arbitrary input rates are resampled to 16 kHz ==")
    for rate in (8000, 22050, 44100):
        wave = make_tone(440.0, 0.5, rate=rate)
        out = resample(wave)
        print(f"   {rate:5d} Hz, {wave.samples.size:5d} samples -> "
              f"{out.sample_rate} Hz, {out.samples.size} samples")


def spectra():
    print("== log-mel separates the three answer tones ==")
    for freq in (400.0, 1200.0, 2800.0):
        mel = log_mel(make_tone(freq, 0.3))
        band = int(np.argmax(mel.mels.mean(axis=1)))
        print(f"   {freq:6.0f} Hz tone -> loudest mel band {band:3d}")


if __name__ == "__main__":
    framing_chain()
    resampling()
    spectra()
