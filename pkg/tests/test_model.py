import copy
import dataclasses
import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from llvd import tensor as T
from llvd.config import ConfigError, ModelConfig, load_model_config
from llvd.container import FormatError
from llvd.data import VideoSequence
from llvd.model import (
    RecurrentState,
    build_model,
    checkpoint_bytes,
    decode_frame,
    denoise_frame,
    denoise_sequence,
    encode_frame,
    load_checkpoint,
    parameter_shapes,
    recurrence_step,
    save_checkpoint,
)

TINY_S = ModelConfig(stage_widths=(4, 8, 8), lstm_hidden=8, shuffle_factor=2)
TINY_L = dataclasses.replace(TINY_S, shuffle_factor=1)
ABLATIONS = ["ablation-lstm-only", "ablation-encdec", "ablation-encdec-lstm1", "llvd-s", "llvd-l"]


def frames(rng, n=1, c=3, size=16):
    return rng.random((n, c, size, size)).astype(np.float32)


@pytest.fixture(scope="module")
def tiny():
    return build_model(TINY_S, 0)


# ---------------------------------------------------------------- building


def test_build_is_deterministic():
    a, b = build_model(load_model_config("llvd-l"), 7), build_model(load_model_config("llvd-l"), 7)
    assert a.parameter_count() == b.parameter_count()
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert checkpoint_bytes(build_model(load_model_config("llvd-l"), 8)) != checkpoint_bytes(a)


def test_parameter_count_is_a_function_of_config():
    for name in ABLATIONS:
        cfg = load_model_config(name)
        expected = sum(int(np.prod(s)) for s in parameter_shapes(cfg).values())
        assert build_model(cfg, 0).parameter_count() == expected


def test_encoder_layout():
    m = build_model(load_model_config("llvd-l"), 0)
    enc = [s for s in m.plan if s.name.startswith("enc")]
    assert len(enc) == 15
    strided = [s.name for s in enc if s.stride == 2]
    assert strided == ["enc1.4", "enc2.4"]
    ups = [s.name for s in m.plan if s.kind == "tconv"]
    assert ups == ["dec2.0", "dec1.0"]
    assert len(m.layers("lstm")) == 2


def test_lstm_only_ablation_has_only_recurrence_and_projections():
    m = build_model(load_model_config("ablation-lstm-only"), 0)
    layers = {name.rsplit(".", 1)[0] for name in m.params}
    assert layers == {"in_proj", "lstm0", "lstm1", "out_proj", "residual"}


def test_small_and_large_differ_only_at_head_and_tail():
    s, l = parameter_shapes(TINY_S), parameter_shapes(TINY_L)
    assert s.keys() == l.keys()
    differing = {k for k in s if s[k] != l[k]}
    assert differing == {"enc1.0.weight", "dec1.4.weight", "dec1.4.bias", "residual.weight", "residual.bias"}
    assert s["enc1.0.weight"][1] == 4 * l["enc1.0.weight"][1]
    assert s["dec1.4.weight"][0] == 4 * l["dec1.4.weight"][0]


@pytest.mark.parametrize("change,field", [
    (dict(shuffle_factor=3), "shuffle_factor"),
    (dict(lstm_layers=3), "lstm_layers"),
    (dict(use_encoder_decoder=False, lstm_layers=0), "lstm_layers"),
    (dict(lstm_hidden=5), "lstm_hidden"),
    (dict(flop_convention="flops"), "flop_convention"),
])
def test_config_invariants_name_the_field(change, field):
    with pytest.raises(ConfigError, match=field):
        build_model(dataclasses.replace(TINY_S, **change), 0)


def test_initialisation_scheme():
    m = build_model(TINY_L, 3)
    for spec in m.plan:
        b = m[f"{spec.name}.bias"].data
        if spec.kind == "lstm":
            h = spec.cout
            assert np.all(b[h : 2 * h] == 1.0) and np.all(b[:h] == 0) and np.all(b[2 * h :] == 0)
        else:
            assert np.all(b == 0)
    w = m["enc2.1.weight"].data
    bound = np.sqrt(6.0 / (2 * 8 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.8 * bound


# ------------------------------------------------------------------ encoder


def test_latent_dims_large(rng):
    m = build_model(TINY_L, 0)
    latent, skips = encode_frame(m, T.Tensor(frames(rng, size=64)))
    assert latent.shape == (1, 8, 16, 16)
    assert [s.shape[2] for s in skips] == [32, 16, 16]


def test_latent_dims_small(rng, tiny):
    latent, _ = encode_frame(tiny, T.Tensor(frames(rng, size=64)))
    assert latent.shape == (1, 8, 8, 8)


@given(h=st.integers(1, 4), w=st.integers(1, 4))
def test_latent_downscale_property(h, w):
    m = build_model(TINY_S, 0)
    x = T.Tensor(np.full((1, 3, 8 * h, 8 * w), 0.5))
    with T.no_grad():
        latent, _ = encode_frame(m, x)
    assert latent.shape[2:] == (h, w)


def test_indivisible_dims_ask_for_padding(tiny):
    with pytest.raises(T.ShapeError, match="pad"):
        encode_frame(tiny, T.Tensor(np.zeros((1, 3, 20, 16))))


def test_encode_is_deterministic(rng, tiny):
    x = T.Tensor(frames(rng))
    assert encode_frame(tiny, x)[0].data.tobytes() == encode_frame(tiny, x)[0].data.tobytes()


# -------------------------------------------------------------- recurrence


def test_recurrence_zero_weights_give_zero_output(rng):
    m = build_model(TINY_S, 0)
    arrays = {k: v.data.copy() for k, v in m.params.items()}
    for k in arrays:
        if k.startswith("lstm"):
            arrays[k][...] = 0
    m = m.with_params(arrays)
    out, state = recurrence_step(m, T.Tensor(rng.standard_normal((1, 8, 2, 2))))
    assert np.all(out.data == 0)
    assert all(np.all(h.data == 0) and np.all(c.data == 0) for h, c in state.layers)


def test_recurrence_state_changes_output(rng, tiny):
    latent = T.Tensor(rng.standard_normal((1, 8, 2, 2)))
    out1, s1 = recurrence_step(tiny, latent)
    out2, _ = recurrence_step(tiny, latent, s1)
    assert not np.array_equal(out1.data, out2.data)


def test_recurrence_needs_lstm_layers(rng):
    m = build_model(dataclasses.replace(TINY_S, lstm_layers=0), 0)
    with pytest.raises(ConfigError):
        recurrence_step(m, T.Tensor(rng.standard_normal((1, 8, 2, 2))))


def test_state_dims_checked(rng, tiny):
    _, s = recurrence_step(tiny, T.Tensor(rng.standard_normal((1, 8, 2, 2))))
    with pytest.raises(T.ShapeError):
        recurrence_step(tiny, T.Tensor(rng.standard_normal((1, 8, 4, 4))), s)


def test_state_round_trip_mid_sequence(rng, tiny):
    seq = VideoSequence(frames(rng, 6), "rgb")
    full, _ = denoise_sequence(tiny, seq)
    _, mid = denoise_sequence(tiny, VideoSequence(seq.frames[:3], "rgb"))
    restored = RecurrentState.from_bytes(mid.to_bytes())
    rest, _ = denoise_sequence(tiny, VideoSequence(seq.frames[3:], "rgb"), restored)
    assert rest.frames.tobytes() == full.frames[3:].tobytes()


def test_state_file_rejects_other_magic():
    with pytest.raises(FormatError):
        RecurrentState.from_bytes(b"LLVC" + bytes(8))


# ------------------------------------------------------------------ decoder


@pytest.mark.parametrize("cfg", [TINY_S, TINY_L], ids=["small", "large"])
def test_output_dims_and_range(cfg, rng):
    m = build_model(cfg, 1)
    x = T.Tensor(rng.standard_normal((1, 3, 64, 64)) * 4)
    out, _ = denoise_frame(m, x)
    assert out.shape == x.shape
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_skip_shape_mismatch(rng, tiny):
    x = T.Tensor(frames(rng))
    latent, skips = encode_frame(tiny, x)
    with pytest.raises(T.ShapeError):
        decode_frame(tiny, latent, skips[::-1], x)


def _probe(model, x, pix=(0, 1, 5, 6), eps=1e-4):
    xp = x.copy()
    xp[pix] += eps
    with T.no_grad():
        a = denoise_frame(model, T.Tensor(x, dtype=np.float64))[0].data
        b = denoise_frame(model, T.Tensor(xp, dtype=np.float64))[0].data
    return np.abs(b - a).max() / eps


def test_input_gradient_flows_through_both_paths(rng):
    base = build_model(TINY_L, 2).astype(np.float64)
    x = rng.random((1, 3, 16, 16))
    arrays = {k: v.data.copy() for k, v in base.params.items()}
    no_residual = dict(arrays, **{"residual.weight": np.zeros_like(arrays["residual.weight"])})
    no_unet = dict(arrays, **{"dec1.4.weight": np.zeros_like(arrays["dec1.4.weight"])})
    assert _probe(base.with_params(no_residual), x) > 1e-6
    assert _probe(base.with_params(no_unet), x) > 1e-3
    # residual only: the output change stays at the perturbed pixel
    m = base.with_params(no_unet)
    xp = x.copy()
    xp[0, 1, 5, 6] += 1e-3
    with T.no_grad():
        d = denoise_frame(m, T.Tensor(xp, dtype=np.float64))[0].data - denoise_frame(m, T.Tensor(x, dtype=np.float64))[0].data
    assert set(zip(*np.nonzero(np.abs(d).max(axis=1)[0]))) == {(5, 6)}


# ------------------------------------------------------------------ sequences


@pytest.fixture(scope="module")
def clip25():
    return VideoSequence(np.random.default_rng(5).random((25, 3, 16, 16)).astype(np.float32), "rgb")


def test_streaming_equivalence(tiny, clip25):
    full, _ = denoise_sequence(tiny, clip25)
    a, s = denoise_sequence(tiny, VideoSequence(clip25.frames[:10], "rgb"))
    b, _ = denoise_sequence(tiny, VideoSequence(clip25.frames[10:], "rgb"), s)
    assert np.concatenate([a.frames, b.frames]).tobytes() == full.frames.tobytes()


@given(split=st.integers(1, 7))
def test_streaming_split_anywhere(split):
    m = build_model(TINY_S, 0)
    seq = VideoSequence(np.random.default_rng(split).random((8, 3, 8, 8)).astype(np.float32), "rgb")
    full, _ = denoise_sequence(m, seq)
    a, s = denoise_sequence(m, VideoSequence(seq.frames[:split], "rgb"))
    b, _ = denoise_sequence(m, VideoSequence(seq.frames[split:], "rgb"), s)
    assert np.concatenate([a.frames, b.frames]).tobytes() == full.frames.tobytes()


def test_causality(tiny, clip25):
    before, _ = denoise_sequence(tiny, clip25)
    f = clip25.frames.copy()
    f[19] = 1.0 - f[19]
    after, _ = denoise_sequence(tiny, VideoSequence(f, "rgb"))
    assert after.frames[:19].tobytes() == before.frames[:19].tobytes()
    assert not np.array_equal(after.frames[19], before.frames[19])


def test_fresh_sequences_start_from_zero_state(tiny, clip25):
    short = VideoSequence(clip25.frames[:4], "rgb")
    a, _ = denoise_sequence(tiny, short)
    denoise_sequence(tiny, VideoSequence(clip25.frames[4:], "rgb"))
    b, _ = denoise_sequence(tiny, short)
    assert a.frames.tobytes() == b.frames.tobytes()
    c, _ = denoise_sequence(tiny, short, RecurrentState.zeros(tiny.config, 1, 2, 2))
    assert c.frames.tobytes() == a.frames.tobytes()


def test_no_lstm_variant_is_plain_encoder_decoder(rng):
    m = build_model(dataclasses.replace(TINY_S, lstm_layers=0), 0)
    x = frames(rng)
    out, _ = denoise_sequence(m, VideoSequence(x, "rgb"))
    with T.no_grad():
        latent, skips = encode_frame(m, T.Tensor(x))
        direct = decode_frame(m, latent, skips, T.Tensor(x))
    assert out.frames.tobytes() == direct.data.astype(np.float32).tobytes()


def test_sequence_errors(tiny, rng):
    with pytest.raises(ValueError):
        denoise_sequence(tiny, VideoSequence(np.zeros((0, 3, 16, 16), np.float32), "rgb"))


def test_bayer_sequence_round_trips_dims(rng):
    m = build_model(dataclasses.replace(TINY_S, in_channels=4, shuffle_factor=1), 0)
    mosaic = VideoSequence(rng.random((3, 1, 16, 16)).astype(np.float32), "bayer_rggb")
    out, _ = denoise_sequence(m, mosaic)
    assert out.frames.shape == (3, 1, 16, 16) and out.layout == "bayer_rggb"


@pytest.mark.parametrize("name", ABLATIONS)
def test_ablation_variants_run_forward_and_backward(name, rng):
    m = build_model(load_model_config(name), 0)
    x = [T.Tensor(frames(rng, size=16)) for _ in range(2)]
    with T.Tape() as tape:
        state, outs = None, []
        for f in x:
            out, state = denoise_frame(m, f, state)
            outs.append(out)
        loss = T.mean(T.square(outs[0])) + T.mean(T.square(outs[1]))
    grads = T.backward(tape, loss)
    for pname, p in m.params.items():
        assert np.any(grads[p].data != 0), pname


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, tiny, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny, path)
    loaded = load_checkpoint(path)
    assert loaded.config == tiny.config
    assert checkpoint_bytes(loaded) == path.read_bytes()
    seq = VideoSequence(frames(rng, 3), "rgb")
    assert denoise_sequence(loaded, seq)[0].frames.tobytes() == denoise_sequence(tiny, seq)[0].frames.tobytes()


def test_checkpoint_header(tiny):
    blob = checkpoint_bytes(tiny)
    assert blob[:4] == b"LLVC"
    assert b"stage_widths" in blob[:400]


def test_checkpoint_validates_shapes(tmp_path, tiny):
    other = build_model(dataclasses.replace(TINY_S, stage_widths=(4, 8, 16), lstm_hidden=16), 0)
    blob = checkpoint_bytes(tiny)
    cfg_other = checkpoint_bytes(other)
    # splice the other model's config text into this model's tensors
    n_self = int.from_bytes(blob[5:9], "little")
    n_other = int.from_bytes(cfg_other[5:9], "little")
    forged = cfg_other[: 9 + n_other] + blob[9 + n_self :]
    path = tmp_path / "bad.ckpt"
    path.write_bytes(forged)
    with pytest.raises((T.ShapeError, ConfigError)):
        load_checkpoint(path)


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"LLVT" + bytes(20))
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_float64_copy_keeps_values(tiny):
    m64 = tiny.astype(np.float64)
    assert m64.dtype == np.float64
    np.testing.assert_array_equal(m64["enc1.0.weight"].data, tiny["enc1.0.weight"].data.astype(np.float64))
