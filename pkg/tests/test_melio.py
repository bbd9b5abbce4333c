import json

import numpy as np
import pytest
from scipy.io import wavfile

from clotvc import melio
from clotvc.melio import MelConfig, MelSpectrogram, MelStats, SpeakerCorpus, Waveform

import synth


def tone(seconds, rate, freq=440.0):
    t = np.arange(int(seconds * rate)) / rate
    return 0.5 * np.sin(2 * np.pi * freq * t)


def random_mel(T, rng, cfg=MelConfig()):
    return MelSpectrogram(rng.uniform(cfg.floor_value, 2.0, (80, T)), cfg)


# ---------------------------------------------------------------- waveforms

def test_load_resamples_to_target_rate(tmp_path):
    wavfile.write(tmp_path / "a.wav", 16000, (tone(1.0, 16000) * 32767).astype(np.int16))
    w = melio.load_waveform(tmp_path / "a.wav", 22050)
    assert w.sample_rate == 22050 and len(w.samples) == 22050
    assert np.max(np.abs(w.samples)) == pytest.approx(1.0)


def test_load_stereo_is_channel_mean(tmp_path):
    left = tone(0.5, 22050)
    stereo = np.stack([left, 0.5 * left], axis=1).astype(np.float32)
    wavfile.write(tmp_path / "s.wav", 22050, stereo)
    w = melio.load_waveform(tmp_path / "s.wav")
    assert len(w.samples) == len(left)
    expected = 0.75 * left / np.max(np.abs(0.75 * left))
    np.testing.assert_allclose(w.samples, expected, atol=1e-6)


def test_load_silence_skips_normalisation(tmp_path):
    wavfile.write(tmp_path / "z.wav", 22050, np.zeros(1000, dtype=np.int16))
    w = melio.load_waveform(tmp_path / "z.wav")
    assert np.all(w.samples == 0)


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        melio.load_waveform(tmp_path / "missing.wav")
    (tmp_path / "junk.wav").write_bytes(b"not audio")
    with pytest.raises(OSError):
        melio.load_waveform(tmp_path / "junk.wav")
    wavfile.write(tmp_path / "empty.wav", 22050, np.zeros(0, dtype=np.int16))
    with pytest.raises(melio.EmptyInputError):
        melio.load_waveform(tmp_path / "empty.wav")


def test_save_load_round_trip(tmp_path):
    w = Waveform(tone(0.3, 22050) / 0.5, 22050)
    melio.save_waveform(w, tmp_path / "o.wav")
    back = melio.load_waveform(tmp_path / "o.wav")
    np.testing.assert_allclose(back.samples, w.samples, atol=1e-4)


# ---------------------------------------------------------------- mel

def test_mel_frame_count():
    m = melio.mel_transform(Waveform(tone(1.0, 22050), 22050))
    assert m.values.shape == (80, 87) == (80, melio.expected_frames(22050, 256))


def test_mel_of_silence_is_floor():
    m = melio.mel_transform(Waveform(np.zeros(4096), 22050))
    assert np.all(m.values == np.log(1e-5))


def test_mel_is_deterministic():
    w = Waveform(synth.utterance(120, (500, 1500, 2500), 0.5, np.random.default_rng(0)), 22050)
    a, b = melio.mel_transform(w), melio.mel_transform(w)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.all(np.isfinite(a.values))


def test_mel_errors():
    with pytest.raises(ValueError):
        melio.mel_transform(Waveform(np.ones(500), 22050))
    with pytest.raises(ValueError):
        melio.mel_transform(Waveform(np.ones(5000), 16000))


def test_mel_peak_band_follows_tone():
    m = melio.mel_transform(Waveform(tone(0.5, 22050, 1000.0), 22050))
    from clotvc import dsp

    centres = dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(0.0), dsp.hz_to_mel(11025.0), 82)[1:-1])
    band = int(np.argmax(m.values[:, 20]))
    assert abs(centres[band] - 1000.0) < 150


def test_config_validation_and_hash():
    with pytest.raises(ValueError):
        MelConfig(n_mels=64)
    with pytest.raises(ValueError):
        MelConfig(hop_size=2048)
    assert MelConfig().config_hash() == MelConfig().config_hash()
    assert MelConfig(hop_size=128).config_hash() != MelConfig().config_hash()


# ---------------------------------------------------------------- normalisation

def test_norm_round_trip():
    rng = np.random.default_rng(0)
    mels = [random_mel(50, rng), random_mel(70, rng)]
    stats = melio.fit_stats(SpeakerCorpus("a", mels, [], []))
    for m in mels:
        back = melio.inverse_norm(melio.apply_norm(m, stats))
        np.testing.assert_allclose(back.values, m.values, atol=1e-6)


def test_stats_match_two_pass_recompute():
    rng = np.random.default_rng(1)
    a, b = random_mel(30, rng), random_mel(45, rng)
    stats = melio.fit_stats(SpeakerCorpus("a", [a, b], [], []))
    n = 75
    mean = [(sum(a.values[k]) + sum(b.values[k])) / n for k in range(80)]
    var = [(sum((a.values[k] - mean[k]) ** 2) + sum((b.values[k] - mean[k]) ** 2)) / n for k in range(80)]
    np.testing.assert_allclose(stats.mean, mean, rtol=1e-12)
    np.testing.assert_allclose(stats.std, np.sqrt(var), rtol=1e-10)


def test_constant_corpus_clamps_std():
    m = MelSpectrogram(np.full((80, 20), 0.3), MelConfig())
    with pytest.warns(UserWarning):
        stats = melio.fit_stats(SpeakerCorpus("a", [m], [], []))
    np.testing.assert_allclose(stats.mean, 0.3)
    np.testing.assert_allclose(stats.std, melio.STD_EPS)


def test_stats_need_train_split():
    with pytest.raises(melio.EmptyInputError):
        melio.fit_stats(SpeakerCorpus("a", [], [], []))


def test_stats_dict_round_trip():
    s = MelStats(np.arange(80.0), np.ones(80) * 2, "spk")
    t = MelStats.from_dict(json.loads(json.dumps(s.to_dict())))
    assert np.array_equal(s.mean, t.mean) and np.array_equal(s.std, t.std) and t.scope == "spk"


# ---------------------------------------------------------------- crops and masks

def test_crop_whole_when_width_matches():
    m = random_mel(64, np.random.default_rng(2))
    assert np.array_equal(melio.sample_crop(m, 64, np.random.default_rng(0)), m.values)


def test_crop_deterministic_under_seed():
    m = random_mel(128, np.random.default_rng(3))
    a = melio.sample_crop(m, 64, np.random.default_rng(7))
    b = melio.sample_crop(m, 64, np.random.default_rng(7))
    assert np.array_equal(a, b)
    starts = [np.flatnonzero((m.values[0] == a[0, 0]))[0] for a in
              (melio.sample_crop(m, 64, np.random.default_rng(s)) for s in range(40))]
    assert min(starts) >= 0 and max(starts) <= 64 and len(set(starts)) > 10


def test_crop_pads_short_utterance():
    m = random_mel(40, np.random.default_rng(4))
    c = melio.sample_crop(m, 64, np.random.default_rng(0))
    assert c.shape == (80, 64)
    assert np.array_equal(c[:, :40], m.values)
    assert np.all(c[:, 40:] == np.log(1e-5))


def test_crop_pad_of_normalised_mel_is_normalised_floor():
    rng = np.random.default_rng(5)
    m = random_mel(40, rng)
    stats = MelStats(rng.normal(size=80), rng.uniform(0.5, 2, 80))
    c = melio.sample_crop(melio.apply_norm(m, stats), 64, rng)
    np.testing.assert_allclose(c[:, 50], (np.log(1e-5) - stats.mean) / stats.std)


def test_mask_extremes():
    assert np.all(melio.sample_fif_mask(64, 0, np.random.default_rng(0)).mask == 1)
    rng = np.random.default_rng(0)
    full = [melio.sample_fif_mask(64, 64, rng) for _ in range(2000)]
    assert any(np.all(f.mask == 0) for f in full)


def test_mask_structure():
    rng = np.random.default_rng(1)
    for _ in range(200):
        f = melio.sample_fif_mask(64, 16, rng)
        assert set(np.unique(f.mask)) <= {0.0, 1.0}
        assert np.all(f.mask == f.mask[0])  # same for every band
        zeros = np.flatnonzero(f.mask[0] == 0)
        s, e = f.masked_span
        assert list(zeros) == list(range(s, e)) and 0 <= e - s <= 16


def test_mask_mean_span():
    rng = np.random.default_rng(2)
    spans = [melio.sample_fif_mask(64, 16, rng).span_length for _ in range(10000)]
    assert abs(np.mean(spans) - 8.0) <= 0.5


def test_mask_rejects_bad_max():
    with pytest.raises(ValueError):
        melio.sample_fif_mask(64, 65)


def test_generator_input_channels():
    crop = np.random.default_rng(3).normal(size=(80, 64))
    ones = melio.FifMask(np.ones((80, 64)), (0, 0))
    zeros = melio.FifMask(np.zeros((80, 64)), (0, 64))
    assert np.array_equal(melio.make_gen_input(crop, ones)[0], crop)
    assert np.all(melio.make_gen_input(crop, zeros)[0] == 0)
    m = np.ones((80, 64))
    m[:, 10:20] = 0
    g = melio.make_gen_input(crop, melio.FifMask(m, (10, 20)))
    assert g.shape == (2, 80, 64)
    assert np.all(g[0, :, 10:20] == 0)
    assert np.array_equal(g[0, :, :10], crop[:, :10]) and np.array_equal(g[0, :, 20:], crop[:, 20:])
    assert np.array_equal(g[1], m)
    with pytest.raises(ValueError):
        melio.make_gen_input(crop, np.ones((80, 32)))


# ---------------------------------------------------------------- splits

def test_split_sizes_full_and_proportional():
    assert melio.split_sizes(141) == (81, 35, 25)
    assert melio.split_sizes(14) == (8, 4, 2)


@pytest.mark.parametrize("n", [1, 2, 5, 8, 14, 50, 141, 160])
def test_split_partition(n):
    items = [f"u{k}" for k in range(n)]
    sc = melio.split_corpus(items, seed=3)
    all_ids = sc.train + sc.val + sc.test
    assert sorted(all_ids) == sorted(items)
    assert len(set(all_ids)) == n
    if n >= 141:
        assert (len(sc.val), len(sc.test)) == (35, 25)


def test_split_deterministic_and_seeded():
    items = [f"u{k}" for k in range(30)]
    a, b = melio.split_corpus(items, 1), melio.split_corpus(items, 1)
    assert (a.train, a.val, a.test) == (b.train, b.val, b.test)
    assert melio.split_corpus(items, 2).train != a.train


def test_split_empty_errors():
    with pytest.raises(melio.EmptyInputError):
        melio.split_corpus([])


# ---------------------------------------------------------------- cache

def test_cache_round_trip_and_format(tmp_path):
    m = MelSpectrogram(np.random.default_rng(0).uniform(-5, 2, (80, 33)), MelConfig(), "spk")
    melio.write_cache(m, tmp_path, "utt1")
    meta = melio.read_meta(tmp_path, "spk", "utt1")
    assert meta["shape"] == [80, 33] and meta["dtype"] == "f32" and meta["speaker"] == "spk"
    raw = np.frombuffer((tmp_path / "spk" / "utt1.melbin").read_bytes(), "<f4")
    assert raw.size == 80 * 33 and raw[1] == np.float32(m.values[0, 1])
    back = melio.read_cache(tmp_path, "spk", "utt1")
    np.testing.assert_allclose(back.values, m.values, atol=1e-6)
    with pytest.raises(ValueError):
        melio.read_cache(tmp_path, "spk", "utt1", MelConfig(hop_size=128))


def test_prepare_is_idempotent(tmp_path):
    corpus = synth.write_corpus(tmp_path / "corpus", n_utts=3, seconds=(0.3, 0.4))
    manifest, n = melio.prepare_corpus(corpus, tmp_path / "cache", seed=0)
    assert n == 6
    stamp = (tmp_path / "cache" / "SM1" / "utt000.melbin").stat().st_mtime_ns
    manifest2, n2 = melio.prepare_corpus(corpus, tmp_path / "cache", seed=0)
    assert n2 == 0 and manifest2 == manifest
    assert (tmp_path / "cache" / "SM1" / "utt000.melbin").stat().st_mtime_ns == stamp
    manifest3, n3 = melio.prepare_corpus(corpus, tmp_path / "cache", MelConfig(hop_size=128), seed=0)
    assert n3 == 6 and manifest3["config_hash"] != manifest["config_hash"]
    for entry in manifest3["speakers"].values():
        ids = entry["train"] + entry["val"] + entry["test"]
        assert sorted(ids) == ["utt000", "utt001", "utt002"]


def test_load_split_normalises_with_train_stats(tmp_path):
    corpus = synth.write_corpus(tmp_path / "corpus", n_utts=4, seconds=(0.3, 0.4))
    manifest, _ = melio.prepare_corpus(corpus, tmp_path / "cache")
    mels, stats = melio.load_split(tmp_path / "cache", manifest, "SF1", "train")
    frames = np.concatenate([m.values for m in mels], axis=1)
    np.testing.assert_allclose(frames.mean(axis=1), 0, atol=1e-5)
    assert all(m.norm is stats for m in mels)


def test_prepare_empty_corpus_errors(tmp_path):
    with pytest.raises(melio.EmptyInputError):
        melio.prepare_corpus(tmp_path, tmp_path / "cache")
