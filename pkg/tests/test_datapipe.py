import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afusion.datapipe import formats
from afusion.datapipe.formats import FormatError, ManifestEntry, read_manifest
from afusion.datapipe.logmel import LOG_FLOOR, extract_logmel, hop_samples
from afusion.datapipe.records import (TrialRecord, WordSpan, align_words_to_frames, fit_length, load_record,
                                      normalize_linguistic, preprocess_trial, save_record)
from afusion.datapipe.windows import (Window, assemble_batch, augment_and_normalize, make_windows,
                                      stitch_predictions, window_starts)


# --- log-mel -------------------------------------------------------------------

def test_hop_follows_frame_rate():
    assert hop_samples(25) == 640
    assert hop_samples(30) == 533


def test_silence_hits_the_floor():
    mel = extract_logmel(np.zeros(16000), 25.0)
    assert abs(mel.shape[0] - 25) <= 1 and mel.shape[1] == 64
    assert np.all(mel == np.float32(np.log(LOG_FLOOR)))


def test_pure_tone_peaks_in_one_bin():
    t = np.arange(16000) / 16000
    mel = extract_logmel(0.5 * np.sin(2 * np.pi * 440 * t), 25.0)
    peaks = mel.argmax(axis=1)
    assert np.all(peaks == peaks[0])
    assert mel.dtype == np.float32


def test_logmel_rejects_other_rates():
    with pytest.raises(ValueError):
        extract_logmel(np.zeros(100), 25.0, sample_rate=8000)


def test_wav_roundtrip_and_rejects_stereo(tmp_path):
    import wave
    x = np.sin(np.linspace(0, 20, 800)) * 0.5
    formats.write_wav(tmp_path / "a.wav", x)
    back = formats.read_wav(tmp_path / "a.wav")
    assert np.max(np.abs(back - x)) < 1e-4
    with wave.open(str(tmp_path / "s.wav"), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(16000)
        wf.writeframes(b"\0" * 40)
    with pytest.raises(FormatError):
        formats.read_wav(tmp_path / "s.wav")


# --- alignment and length fitting -----------------------------------------------

def test_words_align_by_frame_start():
    a, b = np.full(4, 1.0), np.full(4, 2.0)
    spans = [WordSpan("hi", 0.0, 0.1, a), WordSpan("yo", 0.2, 0.3, b)]
    out = align_words_to_frames(spans, 10, 25.0, dim=4)
    # frame starts are 0, .04, .08, .12, .16, .2, .24, .28, ...
    assert out[:, 0].tolist() == [1, 1, 1, 0, 0, 2, 2, 2, 0, 0]


def test_words_overlap_rejected():
    f = np.zeros(2)
    with pytest.raises(ValueError):
        align_words_to_frames([WordSpan("a", 0.0, 0.3, f), WordSpan("b", 0.2, 0.5, f)], 10, 25.0, dim=2)
    with pytest.raises(ValueError):
        WordSpan("c", 0.5, 0.5, f)


def test_fit_length_pads_with_last_row_and_trims():
    x = np.arange(6.0).reshape(3, 2)
    assert fit_length(x, 5).tolist() == [[0, 1], [2, 3], [4, 5], [4, 5], [4, 5]]
    assert fit_length(x, 2).tolist() == [[0, 1], [2, 3]]
    assert fit_length(x, 3) is x
    with pytest.raises(ValueError):
        fit_length(np.zeros((0, 2)), 3)


def test_annotations_mask_and_header(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("valence,arousal\n0.5,-5\n0.1,0.2\n")
    labels, mask = formats.parse_annotations(p)
    assert mask.tolist() == [False, True]
    p.write_text("v,a\n0.5,0.1\n")
    with pytest.raises(FormatError):
        formats.parse_annotations(p)


def test_linguistic_bin_roundtrip_and_bad_magic(tmp_path):
    feats = np.random.default_rng(0).normal(size=(3, formats.LING_DIM)).astype(np.float32)
    formats.write_linguistic_bin(tmp_path / "w.lfea", feats)
    assert np.array_equal(formats.read_linguistic_bin(tmp_path / "w.lfea"), feats)
    (tmp_path / "bad.lfea").write_bytes(b"XXXX" + (tmp_path / "w.lfea").read_bytes()[4:])
    with pytest.raises(FormatError):
        formats.read_linguistic_bin(tmp_path / "bad.lfea")


def test_manifest_rejects_duplicates_and_bad_split(tmp_path):
    e = ManifestEntry("t1", "s1", "train", 25.0, {})
    p = tmp_path / "m.jsonl"
    p.write_text(e.to_json() + "\n" + e.to_json() + "\n")
    with pytest.raises(FormatError):
        read_manifest(p)
    p.write_text(e.to_json().replace('"train"', '"dev"') + "\n")
    with pytest.raises(FormatError):
        read_manifest(p)


# --- windows ---------------------------------------------------------------------

@pytest.mark.parametrize("n,starts", [
    (123, [0]), (300, [0]), (301, [0, 1]), (500, [0, 200]), (517, [0, 200, 217]), (700, [0, 200, 400]),
])
def test_window_starts(n, starts):
    assert window_starts(n) == starts


def test_training_tail_optional():
    assert window_starts(517, tail=False) == [0, 200]


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 2000))
def test_eval_windows_cover_every_frame(n):
    starts = window_starts(n)
    covered = np.zeros(n, bool)
    for s in starts:
        covered[s:s + 300] = True
    assert covered.all()
    assert all(0 <= s and (s + 300 <= n or n <= 300) for s in starts)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 1500), st.integers(0, 2**31 - 1))
def test_stitching_recovers_a_consistent_signal(n, seed):
    signal = np.random.default_rng(seed).normal(size=(n, 2))
    outs = []
    for s in window_starts(n):
        piece = np.zeros((300, 2))
        m = min(300, n - s)
        piece[:m] = signal[s:s + m]
        piece[m:] = 99.0  # padding must be dropped
        outs.append((s, piece))
    stitched = stitch_predictions(outs, n)
    assert stitched.shape == (n, 2)
    np.testing.assert_allclose(stitched, signal, atol=1e-12)


def test_stitching_averages_overlap_and_detects_gaps():
    out = stitch_predictions([(0, np.ones((4, 1))), (2, 3 * np.ones((4, 1)))], 6)
    assert out[:, 0].tolist() == [1, 1, 2, 2, 3, 3]
    with pytest.raises(ValueError):
        stitch_predictions([(0, np.ones((2, 1))), (4, np.ones((2, 1)))], 6)


def test_augmentation_shapes_and_eval_center_crop():
    frames = np.random.default_rng(0).random((5, 3, 48, 48)).astype(np.float32)
    ev = augment_and_normalize(frames, False)
    assert ev.shape == (5, 3, 40, 40)
    np.testing.assert_allclose(ev, (frames[..., 4:44, 4:44] - 0.5) / 0.5)
    tr = augment_and_normalize(frames, True, np.random.default_rng(3))
    assert tr.shape == (5, 3, 40, 40) and tr.min() >= -1 and tr.max() <= 1
    with pytest.raises(ValueError):
        augment_and_normalize(frames, True, None)


def _record(n, tid="t", seed=0):
    r = np.random.default_rng(seed)
    labels = r.uniform(-1, 1, size=(n, 2)).astype(np.float32)
    mask = r.random(n) > 0.1
    return TrialRecord(tid, "s", "train", 25.0, r.integers(0, 255, size=(n, 48, 48, 3), dtype=np.uint8),
                       r.normal(size=(n, 64)).astype(np.float32), np.zeros((n, 768), np.float32), labels, mask)


def test_batch_pads_short_trials_and_masks_padding():
    rec = _record(123)
    windows = make_windows(rec)
    assert windows == [Window("t", 0, 123)]
    batch = assemble_batch({"t": rec}, windows, ("visual", "audio", "linguistic"), training=False)
    assert batch.inputs["visual"].shape == (1, 300, 3, 40, 40)
    assert batch.inputs["audio"].shape == (1, 300, 1, 64, 4)
    assert batch.inputs["linguistic"].shape == (1, 300, 768)
    assert batch.labels.shape == (1, 300, 2)
    assert not batch.masks[0, 123:].any() and not batch.pad_masks[0, 123:].any()
    assert np.array_equal(batch.masks[0, :123], rec.valid_mask)
    assert np.all(batch.inputs["visual"][0, 123:] == 0)


def test_audio_patch_is_causal():
    rec = _record(310)
    batch = assemble_batch({"t": rec}, [Window("t", 10, 300)], ("audio",), training=False)
    # column -1 is the current frame, column 0 three frames earlier
    assert np.array_equal(batch.inputs["audio"][0, 0, 0, :, 3], rec.logmel[10])
    assert np.array_equal(batch.inputs["audio"][0, 0, 0, :, 0], rec.logmel[7])


# --- records ----------------------------------------------------------------------

def test_record_roundtrip_is_byte_identical(tmp_path):
    rec = _record(50)
    d = save_record(tmp_path, rec)
    first = {p.name: p.read_bytes() for p in d.iterdir()}
    back = load_record(tmp_path, "t")
    for name in ("frames", "logmel", "linguistic", "labels", "valid_mask"):
        assert np.array_equal(getattr(back, name), getattr(rec, name))
    save_record(tmp_path, back)
    assert {p.name: p.read_bytes() for p in d.iterdir()} == first


def test_record_rejects_mismatched_rows():
    rec = _record(10)
    with pytest.raises(ValueError):
        TrialRecord("x", "s", "train", 25.0, rec.frames, rec.logmel[:9], rec.linguistic, rec.labels, rec.valid_mask)


def test_linguistic_norm_uses_train_statistics():
    r = np.random.default_rng(0)
    train = [r.normal(3, 2, size=(100, 4)), r.normal(3, 2, size=(50, 4))]
    other = [r.normal(10, 1, size=(30, 4))]
    norm, tr, ot = normalize_linguistic(train, other)
    allt = np.concatenate(tr)
    np.testing.assert_allclose(allt.mean(0), 0, atol=1e-5)
    np.testing.assert_allclose(allt.std(0), 1, atol=1e-4)
    assert ot[0].mean() > 2  # not re-centred on its own statistics


def test_preprocessed_corpus_invariants(small_corpus):
    root, entries, planted, records = small_corpus
    planted = {p.trial_id: p for p in planted}
    for e in entries:
        rec = records[e.trial_id]
        p = planted[e.trial_id]
        assert rec.n == p.labels.shape[0]
        assert rec.logmel.shape == (rec.n, 64) and rec.linguistic.shape == (rec.n, 768)
        assert np.array_equal(rec.valid_mask, ~(p.annotated == -5.0).any(axis=1))
        assert np.array_equal(rec.labels, p.annotated)
        assert np.all(rec.frames[p.missing] == 0)
        assert np.all((rec.labels[~rec.valid_mask] == -5.0).any(axis=1))
        assert not (rec.labels[rec.valid_mask] == -5.0).any()


def test_missing_wav_is_an_error(small_corpus, tmp_path):
    _, entries, _, _ = small_corpus
    e = entries[0]
    paths = dict(e.paths, wav="nowhere.wav")
    broken = ManifestEntry(e.trial_id, e.subject_id, e.split, e.fps, paths, e.n_frames, e.root)
    with pytest.raises(FileNotFoundError):
        preprocess_trial(broken)


# --- worked examples ----------------------------------------------------------------

def test_span_at_ten_fps_and_degenerate_spans():
    f = np.arange(1.0, 4.0)
    out = align_words_to_frames([WordSpan("w", 0.5, 1.2, f)], 20, 10.0, dim=3)
    assert np.flatnonzero(out[:, 0]).tolist() == list(range(5, 12))
    assert np.all(out[5:12] == f)
    assert not align_words_to_frames([], 7, 25.0, dim=3).any()
    whole = align_words_to_frames([WordSpan("w", 0.0, 10.0, f)], 7, 25.0, dim=3)
    assert np.all(whole == f)


def test_fit_length_95_and_105_rows():
    x = np.random.default_rng(0).normal(size=(95, 4))
    padded = fit_length(x, 100)
    assert np.array_equal(padded[:95], x) and np.all(padded[95:] == x[94])
    y = np.random.default_rng(1).normal(size=(105, 4))
    assert np.array_equal(fit_length(y, 100), y[:100])


def test_malformed_annotation_row_names_the_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("valence,arousal\n0.1,0.3\n0.2\n")
    with pytest.raises(FormatError, match=":3"):
        formats.parse_annotations(p)


def test_tail_and_padding_windows():
    assert window_starts(650) == [0, 200, 350]
    rec = _record(100)
    (w,) = make_windows(rec)
    batch = assemble_batch({"t": rec}, [w], ("visual",), training=False)
    assert batch.pad_masks[0].sum() == 100 and not batch.pad_masks[0, 100:].any()
    assert np.all(batch.inputs["visual"][0, 100:] == 0)


def test_crop_offsets_stay_in_range():
    yy, xx = np.mgrid[:48, :48]
    code = ((yy * 48 + xx) / 2304.0).astype(np.float32)
    frames = np.broadcast_to(code, (2, 3, 48, 48))
    rng = np.random.default_rng(0)
    seen_y, seen_x, flips = set(), set(), 0
    for _ in range(1000):
        out = augment_and_normalize(frames, True, rng)
        corner = int(round((out[0, 0, 0, 0] * 0.5 + 0.5) * 2304))
        y, x = divmod(corner, 48)
        flipped = x >= 39
        ox = 47 - x if flipped else x
        flips += flipped
        assert 0 <= y <= 8 and 0 <= ox <= 8
        assert np.array_equal(out[0], out[1])  # one draw for the whole window
        seen_y.add(y)
        seen_x.add(ox)
    assert seen_y == seen_x == set(range(9))
    assert 400 < flips < 600


def test_eval_path_deterministic_and_mid_grey_is_zero():
    frames = np.full((2, 3, 48, 48), 0.5, np.float32)
    a, b = augment_and_normalize(frames, False), augment_and_normalize(frames, False)
    assert np.array_equal(a, b) and np.all(a == 0.0)


def test_norm_constant_dimension_and_tight_mean():
    r = np.random.default_rng(2)
    train = [np.column_stack([r.normal(5, 3, size=200), np.full(200, 7.0)]).astype(np.float32)]
    norm, (tr,), _ = normalize_linguistic(train)
    assert np.all(tr[:, 1] == 0.0)
    assert np.all(np.abs(tr.astype(np.float64).mean(0)) < 1e-6)
