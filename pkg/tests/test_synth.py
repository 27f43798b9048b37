import numpy as np
from hypothesis import given, settings, strategies as st

from sasnet import crops, synth
from sasnet.synth import SynthConfig


def test_same_seed_same_bytes():
    a = synth.render_sequence(11, 4)
    b = synth.render_sequence(11, 4)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.frames, b.frames))
    assert a.boxes == b.boxes
    c = synth.render_sequence(12, 4)
    assert a.frames[0].tobytes() != c.frames[0].tobytes()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_boxes_stay_inside_frame(seed):
    cfg = SynthConfig(clutter=2)
    seq = synth.render_sequence(seed, 30, cfg)
    for b in seq.boxes:
        assert 0 <= b.cx - b.w / 2 and b.cx + b.w / 2 <= cfg.width
        assert 0 <= b.cy - b.h / 2 and b.cy + b.h / 2 <= cfg.height
    assert seq.frames[0].shape == (cfg.height, cfg.width, 3)


def test_constant_velocity_and_static():
    seq = synth.render_sequence(3, 10)
    centres = np.array([(b.cx, b.cy) for b in seq.boxes])
    steps = np.diff(centres, axis=0)
    np.testing.assert_allclose(steps, np.broadcast_to(steps[0], steps.shape), atol=1e-9)
    still = synth.render_sequence(3, 10, speed=0)
    assert len({(b.cx, b.cy) for b in still.boxes}) == 1


def test_target_pixels_centred_on_box():
    cfg = SynthConfig(distractors=0, noise=0.0)
    for seed in range(4):
        seq = synth.render_sequence(seed, 3, cfg)
        bg = synth._background(np.random.default_rng(seed), cfg)
        bg8 = np.round(bg * 255).astype(np.uint8)
        for t in (0, 2):
            mask = np.any(seq.frames[t] != bg8, axis=2)
            rows, cols = np.nonzero(mask)
            box = seq.boxes[t]
            assert abs(cols.mean() + 0.5 - box.cx) < 1.0
            assert abs(rows.mean() + 0.5 - box.cy) < 1.0
            assert cols.min() >= np.floor(box.cx - box.w / 2) and cols.max() < np.ceil(box.cx + box.w / 2)


def test_written_sequence_layout(tmp_path):
    paths = synth.write_sequences(tmp_path, 0, 2, 3)
    assert [p.name for p in paths] == ["seq_0001", "seq_0002"]
    seq = crops.SequenceDir.open(paths[1])
    assert len(seq.frames) == 3 and len(seq.groundtruth) == 3
    pairs = synth.write_pairs(tmp_path / "pairs", 0, 2)
    assert len(crops.SequenceDir.open(pairs[0]).frames) == 2
