import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechmark.audio import (
    AudioClip,
    LOG_FLOOR,
    MEL_HOP,
    MEL_WINDOW,
    N_MELS,
    frame_count,
    hash_samples,
    hz_to_mel,
    ingest_wav_dir,
    mel_filterbank,
    mel_spectrogram,
    read_wav,
    synth_dataset,
    write_wav,
)
from speechmark.errors import ContractError, FormatError, UnsupportedFormatError


def write_raw_wav(path, values, sample_rate=16000, channels=1, sampwidth=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(sampwidth)
        wf.setframerate(sample_rate)
        wf.writeframes(np.asarray(values).astype("<i2").tobytes())


class TestReadWav:
    def test_scaling_positive(self, tmp_path):
        path = tmp_path / "a.wav"
        write_raw_wav(path, [16384])
        clip = read_wav(path)
        assert clip.samples[0] == 0.5
        assert clip.sample_rate == 16000

    def test_scaling_endpoints(self, tmp_path):
        path = tmp_path / "b.wav"
        write_raw_wav(path, [0, -32768])
        clip = read_wav(path)
        assert clip.samples[0] == 0.0
        assert clip.samples[1] == -1.0

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"RIFFgarbage-not-a-wav-file")
        with pytest.raises(FormatError):
            read_wav(path)

    def test_truncated_data(self, tmp_path):
        path = tmp_path / "trunc.wav"
        write_raw_wav(path, np.zeros(100, dtype=np.int16))
        raw = path.read_bytes()
        path.write_bytes(raw[:-17])  # odd-length, shorter than the header claims
        with pytest.raises(FormatError):
            read_wav(path)

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "st.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(struct.pack("<4h", 0, 0, 1, 1))
        with pytest.raises(UnsupportedFormatError):
            read_wav(path)

    def test_8bit_rejected(self, tmp_path):
        path = tmp_path / "8b.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(1)
            wf.setframerate(16000)
            wf.writeframes(bytes([128, 255, 0]))
        with pytest.raises(UnsupportedFormatError):
            read_wav(path)


class TestWriteWav:
    @pytest.mark.parametrize("value,expected", [(1.0, 32767), (0.0, 0), (-0.25, -8192)])
    def test_quantization(self, tmp_path, value, expected):
        path = tmp_path / "q.wav"
        write_wav(AudioClip(np.array([value]), 16000), path)
        with wave.open(str(path), "rb") as wf:
            raw = wf.readframes(1)
        assert struct.unpack("<h", raw)[0] == expected

    def test_round_trip_error_bound(self, tmp_path, rng):
        samples = rng.uniform(-1.0, 1.0, size=4096)
        clip = AudioClip(samples, 16000)
        path = tmp_path / "rt.wav"
        write_wav(clip, path)
        back = read_wav(path)
        assert np.max(np.abs(back.samples - samples)) <= 1.0 / 32768.0

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False), min_size=1, max_size=64))
    def test_round_trip_property(self, tmp_path_factory, values):
        clip = AudioClip(np.array(values), 8000)
        path = tmp_path_factory.mktemp("wav") / "p.wav"
        write_wav(clip, path)
        back = read_wav(path)
        assert back.sample_rate == 8000
        assert np.max(np.abs(back.samples - clip.samples)) <= 1.0 / 32768.0


class TestSynthDataset:
    def test_deterministic(self):
        a = synth_dataset(10, 256, 16000, seed=3)
        b = synth_dataset(10, 256, 16000, seed=3)
        assert a.content_hash == b.content_hash
        assert np.array_equal(a.matrix, b.matrix)

    def test_peak_normalization(self):
        ds = synth_dataset(100, 1024, 16000, seed=1)
        assert ds.n_clips == 100
        peaks = np.max(np.abs(ds.matrix), axis=1)
        assert np.all(np.abs(peaks - 0.9) <= 1e-6)

    def test_distinct_seeds_distinct_hash(self):
        a = synth_dataset(10, 256, 16000, seed=4)
        b = synth_dataset(10, 256, 16000, seed=5)
        assert a.content_hash != b.content_hash

    def test_preconditions(self):
        with pytest.raises(ContractError):
            synth_dataset(0, 256, 16000, seed=1)
        with pytest.raises(ContractError):
            synth_dataset(1, 32, 16000, seed=1)

    def test_hash_depends_on_rate(self):
        ds = synth_dataset(3, 128, 16000, seed=2)
        assert hash_samples(ds.matrix, 16000) == ds.content_hash
        assert hash_samples(ds.matrix, 8000) != ds.content_hash


def naive_dft_power(segment):
    """O(n^2) reference DFT power spectrum for the mel oracle."""
    n = segment.shape[0]
    k = np.arange(n // 2 + 1)
    t = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, t) / n)
    return np.abs(basis @ segment) ** 2


class TestMelSpectrogram:
    def test_silence_hits_log_floor(self):
        clip = AudioClip(np.zeros(512), 16000)
        mel = mel_spectrogram(clip)
        assert np.allclose(mel.frames, np.log(LOG_FLOOR))

    def test_frame_count(self):
        clip = AudioClip(np.zeros(1024), 16000)
        assert mel_spectrogram(clip).frames.shape == (7, N_MELS)
        assert frame_count(1024) == 7

    def test_too_short_clip(self):
        with pytest.raises(ContractError):
            mel_spectrogram(AudioClip(np.zeros(128), 16000))

    def test_tone_lands_in_matching_band(self):
        # 3000 Hz sits exactly on bin 48 of a 256-sample window at 16 kHz and
        # is wide enough in mel space to span several FFT bins.
        sr, freq, d_x = 16000, 3000.0, 1024
        t = np.arange(d_x) / sr
        clip = AudioClip(0.5 * np.sin(2 * np.pi * freq * t), sr)
        mel = mel_spectrogram(clip)

        # Oracle: naive DFT of the first Hann-windowed segment pooled through
        # independently recomputed triangular filters.
        hann = np.hanning(MEL_WINDOW)
        power = naive_dft_power(clip.samples[:MEL_WINDOW] * hann)
        freqs = np.arange(MEL_WINDOW // 2 + 1) * sr / MEL_WINDOW
        mel_pts = np.linspace(0.0, 2595.0 * np.log10(1 + (sr / 2) / 700.0), N_MELS + 2)
        hz = 700.0 * (10.0 ** (mel_pts / 2595.0) - 1.0)
        weights = np.zeros((N_MELS, freqs.shape[0]))
        for b in range(N_MELS):
            rising = (freqs - hz[b]) / (hz[b + 1] - hz[b])
            falling = (hz[b + 2] - freqs) / (hz[b + 2] - hz[b + 1])
            weights[b] = np.clip(np.minimum(rising, falling), 0.0, None)
        expected_band = int(np.argmax(weights @ power))

        assert np.all(np.argmax(mel.frames, axis=1) == expected_band)

    def test_gain_shifts_log_energy(self, small_dataset):
        clip = small_dataset.clip(0)
        g = 0.5
        scaled = AudioClip(clip.samples * g, clip.sample_rate)
        base = mel_spectrogram(clip).frames
        shifted = mel_spectrogram(scaled).frames
        above_floor = base > np.log(LOG_FLOOR) + 8.0
        diff = shifted[above_floor] - base[above_floor]
        assert np.allclose(diff, 2.0 * np.log(g), atol=1e-3)

    def test_filterbank_shape(self):
        fb = mel_filterbank(16000)
        assert fb.shape == (N_MELS, MEL_WINDOW // 2 + 1)
        assert np.all(fb >= 0.0)
        assert hz_to_mel(0.0) == 0.0


class TestIngest:
    def test_lexicographic_order(self, tmp_path):
        rng = np.random.default_rng(5)
        clips = [AudioClip(rng.uniform(-0.5, 0.5, 128), 16000) for _ in range(3)]
        for name, clip in zip(["b.wav", "a.wav", "c.wav"], clips):
            write_wav(clip, tmp_path / name)
        ds = ingest_wav_dir(tmp_path)
        assert ds.n_clips == 3
        assert ds.source_tag == "wav-dir"
        # a.wav (written second) must come first
        expected = read_wav(tmp_path / "a.wav").samples
        assert np.array_equal(ds.matrix[0], expected)

    def test_empty_dir(self, tmp_path):
        with pytest.raises(FormatError):
            ingest_wav_dir(tmp_path)

    def test_heterogeneous_length_rejected(self, tmp_path):
        write_wav(AudioClip(np.zeros(128), 16000), tmp_path / "a.wav")
        write_wav(AudioClip(np.zeros(256), 16000), tmp_path / "b.wav")
        with pytest.raises(ContractError):
            ingest_wav_dir(tmp_path)

    def test_heterogeneous_rate_rejected(self, tmp_path):
        write_wav(AudioClip(np.zeros(128), 16000), tmp_path / "a.wav")
        write_wav(AudioClip(np.zeros(128), 8000), tmp_path / "b.wav")
        with pytest.raises(ContractError):
            ingest_wav_dir(tmp_path)


class TestAudioClip:
    def test_amplitude_bound_enforced(self):
        with pytest.raises(ContractError):
            AudioClip(np.array([1.5]), 16000)

    def test_immutable(self):
        clip = AudioClip(np.zeros(8), 16000)
        with pytest.raises(ValueError):
            clip.samples[0] = 1.0
