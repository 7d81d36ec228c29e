"""Front end: framing arithmetic, filterbank placement, masking, file I/O."""

import struct
import wave

import numpy as np
import pytest

from dualscribe.errors import ConfigError, ContractError, FormatError
from dualscribe.features import (
    FEATS_MAGIC,
    LOG_FLOOR,
    FeatureConfig,
    SpecAugmentPolicy,
    estimate_pitch,
    fbank,
    load_feats,
    read_wav,
    save_feats,
    spec_augment,
    utterance_cmvn,
    write_wav,
)

rng0 = np.random.default_rng


def tone(freq, seconds=1.0, rate=16000, amp=0.5):
    t = np.arange(int(rate * seconds)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


class TestFbank:
    def test_one_second_gives_98_frames(self):
        feats = fbank(np.zeros(16000))
        assert feats.shape == (98, 83)
        assert feats.dtype == np.float32

    def test_length_formula_over_a_sweep(self):
        for n in range(400, 3000, 73):
            feats = fbank(np.zeros(n))
            assert feats.shape[0] == 1 + (n - 400) // 160

    def test_silence_hits_the_log_floor(self):
        feats = fbank(np.zeros(800))
        np.testing.assert_allclose(feats[:, :80], np.log(LOG_FLOOR), atol=1e-5)
        np.testing.assert_allclose(feats[:, 80:], 0.0)

    def test_tone_peaks_at_the_nearest_filter_center(self):
        feats = fbank(tone(1000.0))
        profile = feats[:, :80].mean(axis=0)
        # independent oracle: mel-spaced triangular filter centers
        def mel(f):
            return 2595.0 * np.log10(1.0 + f / 700.0)

        def imel(m):
            return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

        points = np.linspace(0.0, mel(8000.0), 82)
        centers = imel(points[1:-1])
        want = int(np.argmin(np.abs(centers - 1000.0)))
        assert int(np.argmax(profile)) == want

    def test_rejects_short_and_misshapen_input(self):
        with pytest.raises(ContractError):
            fbank(np.zeros(399))
        with pytest.raises(ContractError):
            fbank(np.zeros((10, 10)))

    def test_rejects_bad_config(self):
        with pytest.raises(ConfigError):
            fbank(np.zeros(800), FeatureConfig(window_ms=10.0, hop_ms=25.0))
        with pytest.raises(ConfigError):
            fbank(np.zeros(800), FeatureConfig(pitch="frequency_domain"))

    def test_deterministic(self):
        wav = rng0(0).normal(size=2000) * 0.1
        np.testing.assert_array_equal(fbank(wav), fbank(wav))


class TestPitch:
    def test_steady_tone_is_voiced_near_its_frequency(self):
        est = estimate_pitch(tone(200.0, seconds=0.5))
        voiced = est[:, 2] > 0.0
        assert voiced.mean() > 0.9
        f0 = 100.0 * np.exp(est[voiced, 0])
        assert np.all(np.abs(f0 - 200.0) < 5.0)

    def test_silence_is_unvoiced(self):
        est = estimate_pitch(np.zeros(1600))
        np.testing.assert_array_equal(est, 0.0)

    def test_autocorr_mode_fills_the_channel(self):
        feats = fbank(tone(150.0, seconds=0.3), FeatureConfig(pitch="autocorr"))
        assert feats.shape[1] == 83
        assert feats[:, 82].mean() > 0.9


class TestCmvn:
    def test_two_point_column(self):
        out = utterance_cmvn(np.array([[1.0], [3.0]]))
        np.testing.assert_allclose(out, [[-1.0], [1.0]])

    def test_constant_column_maps_to_zeros(self):
        out = utterance_cmvn(np.full((5, 4), 7.25, dtype=np.float32))
        np.testing.assert_array_equal(out, 0.0)

    def test_moments(self):
        x = rng0(1).normal(size=(50, 83)).astype(np.float32) * 3.0 + 1.0
        x[:, 80:] = 0.0
        out = utterance_cmvn(x)
        np.testing.assert_allclose(out[:, :80].mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(out[:, :80].var(axis=0), 1.0, atol=1e-4)
        np.testing.assert_array_equal(out[:, 80:], 0.0)

    def test_idempotent(self):
        x = rng0(2).normal(size=(20, 10)).astype(np.float32)
        once = utterance_cmvn(x)
        np.testing.assert_allclose(utterance_cmvn(once), once, atol=1e-5)

    def test_needs_frames(self):
        with pytest.raises(ContractError):
            utterance_cmvn(np.zeros((0, 5)))


class TestSpecAugment:
    def test_zero_masks_is_identity(self):
        x = rng0(3).normal(size=(12, 83))
        out = spec_augment(x, SpecAugmentPolicy(time_masks=0, freq_masks=0),
                           rng0(0))
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_single_time_mask_zeroes_one_span(self):
        x = rng0(4).uniform(0.5, 1.0, size=(10, 83))
        policy = SpecAugmentPolicy(time_masks=1, time_width=2, time_frac=0.2,
                                   freq_masks=0)
        out = spec_augment(x, policy, rng0(7))
        zero_rows = np.flatnonzero((out == 0.0).all(axis=1))
        assert int((out == 0.0).sum()) == 2 * 83
        assert len(zero_rows) == 2
        assert zero_rows[1] == zero_rows[0] + 1

    def test_freq_mask_zeroes_contiguous_columns(self):
        x = rng0(5).uniform(0.5, 1.0, size=(6, 10))
        policy = SpecAugmentPolicy(time_masks=0, freq_masks=1, freq_width=3)
        out = spec_augment(x, policy, rng0(1))
        zero_cols = np.flatnonzero((out == 0.0).all(axis=0))
        assert len(zero_cols) == 3
        assert int((out == 0.0).sum()) == 3 * 6

    def test_freq_masks_respect_the_mel_block(self):
        x = rng0(6).uniform(0.5, 1.0, size=(6, 83))
        policy = SpecAugmentPolicy(time_masks=0, freq_masks=4, freq_width=80)
        out = spec_augment(x, policy, rng0(2), n_freq=80)
        assert (out[:, 80:] != 0.0).all()

    @pytest.mark.parametrize("seed", range(8))
    def test_never_masks_more_than_the_time_fraction(self, seed):
        r = rng0(seed + 50)
        t = int(r.integers(5, 60))
        policy = SpecAugmentPolicy(
            time_masks=int(r.integers(1, 4)),
            time_width=int(r.integers(0, 30)),
            time_frac=float(r.choice([0.1, 0.2, 0.5])),
            freq_masks=0,
        )
        x = r.uniform(0.5, 1.0, size=(t, 20))
        out = spec_augment(x, policy, r)
        masked = int(((out == 0.0).all(axis=1)).sum())
        assert masked <= int(policy.time_frac * t)

    def test_seeded_runs_agree(self):
        x = rng0(8).normal(size=(30, 83))
        policy = SpecAugmentPolicy(time_warp=True)
        a = spec_augment(x, policy, rng0(13))
        b = spec_augment(x, policy, rng0(13))
        np.testing.assert_array_equal(a, b)

    def test_warp_permutes_existing_frames(self):
        x = rng0(9).normal(size=(20, 7))
        policy = SpecAugmentPolicy(time_masks=0, freq_masks=0,
                                   time_warp=True, warp_window=3)
        out = spec_augment(x, policy, rng0(21))
        assert out.shape == x.shape
        rows = {row.tobytes() for row in x}
        assert all(row.tobytes() in rows for row in out)

    def test_bad_policy_rejected(self):
        with pytest.raises(ConfigError):
            spec_augment(np.zeros((4, 4)),
                         SpecAugmentPolicy(time_frac=1.5), rng0(0))


class TestWavFiles:
    def test_round_trip(self, tmp_path):
        wav = rng0(10).uniform(-0.9, 0.9, size=1234)
        path = tmp_path / "x.wav"
        write_wav(path, wav)
        back = read_wav(path)
        assert back.dtype == np.float32
        np.testing.assert_allclose(back, wav, atol=1.0 / 32768.0)

    def test_wrong_rate_rejected(self, tmp_path):
        path = tmp_path / "slow.wav"
        write_wav(path, np.zeros(100), rate=8000)
        with pytest.raises(FormatError):
            read_wav(path)

    def test_stereo_rejected(self, tmp_path):
        path = tmp_path / "stereo.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(2)
            wf.setsampwidth(2)
            wf.setframerate(16000)
            wf.writeframes(b"\x00\x00" * 200)
        with pytest.raises(FormatError):
            read_wav(path)

    def test_eight_bit_rejected(self, tmp_path):
        path = tmp_path / "thin.wav"
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(1)
            wf.setframerate(16000)
            wf.writeframes(b"\x00" * 100)
        with pytest.raises(FormatError):
            read_wav(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "noise.wav"
        path.write_bytes(b"not audio at all")
        with pytest.raises(FormatError):
            read_wav(path)


class TestFeatureFiles:
    def test_round_trip_is_bitwise(self, tmp_path):
        x = rng0(11).normal(size=(17, 83)).astype(np.float32)
        path = tmp_path / "u.feats"
        save_feats(path, x)
        np.testing.assert_array_equal(load_feats(path), x)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.feats"
        path.write_bytes(b"XXXX9999" + struct.pack("<II", 1, 1) + b"\x00" * 4)
        with pytest.raises(FormatError):
            load_feats(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.feats"
        save_feats(path, np.zeros((4, 3), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError):
            load_feats(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "fat.feats"
        save_feats(path, np.zeros((4, 3), dtype=np.float32))
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_feats(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "stub.feats"
        path.write_bytes(FEATS_MAGIC + b"\x01\x00")
        with pytest.raises(FormatError):
            load_feats(path)
