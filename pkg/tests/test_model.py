import numpy as np
import pytest

from hoidesk.attention import knowledge_integration_forward, sine_position_encoding_2d
from hoidesk.errors import FileError, FormatError, ShapeMismatch
from hoidesk.model import (
    HOIModel,
    ModelConfig,
    bilinear_resample,
    forward,
    instance_decode,
    interaction_decode,
    load_params,
    make_interaction_queries,
    project_detection_features,
    save_params,
    toy_config,
    verb_adapter_forward,
)
from hoidesk.tensor import Tensor, finite_diff_check, l2_normalize, sum_

K_O = 5


def _model(seed=0, **kw):
    return HOIModel(toy_config(K_O, seed=seed, **kw))


def _inputs(rng, b=2, grid=3, det_grid=None):
    dg = det_grid or grid
    return rng.standard_normal((b, grid, grid, 16)), rng.standard_normal((b, dg, dg, 8))


def _randomize(model, rng, scale=0.3):
    for p in model.parameters():
        p.data = p.data + rng.standard_normal(p.shape) * scale


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig(num_objects=80)
        assert cfg.num_queries == 64 and cfg.num_layers == 3
        assert (cfg.dim, cfg.clip_dim, cfg.det_dim) == (512, 512, 256)

    def test_invalid(self):
        with pytest.raises(ValueError):
            ModelConfig(num_objects=3, clip_dim=10, num_heads=3)
        with pytest.raises(ValueError):
            ModelConfig(num_objects=0)

    def test_query_init_scale(self):
        m = HOIModel(ModelConfig(num_objects=3, dim=16, clip_dim=16, det_dim=32, num_queries=64, num_heads=2,
                                 instance_heads=2))
        assert 0.8 < m.query_h.data.std() < 1.2
        assert np.all(np.abs(m.w_i.weight.data) <= 0.04 + 1e-12)
        assert np.all(m.w_i.bias.data == 0)


class TestForward:
    def test_output_invariants(self, rng):
        m = _model()
        _randomize(m, rng)
        out = forward(m, *_inputs(rng))
        assert out.b_h.shape == (2, 4, 4) and out.c_o.shape == (2, 4, K_O + 1)
        for b in (out.b_h.data, out.b_o.data):
            assert np.all((b > 0) & (b < 1))
        np.testing.assert_allclose(out.c_o.sum(-1), 1.0, atol=1e-12)
        for o in out.o_inter + out.o_verb:
            assert o.shape == (2, 4, 16)
            np.testing.assert_allclose(np.linalg.norm(o.data, axis=-1), 1.0, atol=1e-12)
        assert len(out.q_inter) == 2 and len(out.instance) == 2

    def test_depth(self, rng):
        m = _model(num_layers=3, instance_layers=1)
        out = forward(m, *_inputs(rng))
        assert len(out.q_inter) == 3 and len(out.instance) == 1

    def test_deterministic(self, rng):
        vs, vd = _inputs(rng)
        a = forward(_model(seed=3), vs, vd)
        b = forward(_model(seed=3), vs, vd)
        assert a.o_inter[-1].data.tobytes() == b.o_inter[-1].data.tobytes()
        assert a.b_h.data.tobytes() == b.b_h.data.tobytes()

    def test_unbatched_input(self, rng):
        m = _model()
        vs, vd = _inputs(rng, b=1)
        a = forward(m, vs[0], vd[0])
        b = forward(m, vs, vd)
        np.testing.assert_array_equal(a.o_inter[-1].data, b.o_inter[-1].data)

    def test_batch_items_independent(self, rng):
        m = _model()
        _randomize(m, rng)
        vs, vd = _inputs(rng, b=3)
        full = forward(m, vs, vd)
        one = forward(m, vs[1:2], vd[1:2])
        np.testing.assert_allclose(full.o_inter[-1].data[1], one.o_inter[-1].data[0], atol=1e-12)

    def test_grid_mismatch_resampled(self, rng):
        m = _model()
        out = forward(m, *_inputs(rng, grid=3, det_grid=5))
        assert out.o_inter[-1].shape == (2, 4, 16)

    def test_shape_errors(self, rng):
        m = _model()
        vs, vd = _inputs(rng)
        with pytest.raises(ShapeMismatch):
            forward(m, vs[..., :8], vd)
        with pytest.raises(ShapeMismatch):
            forward(m, vs, vd[..., :4])


class TestInstance:
    def test_heads(self, rng):
        m = _model()
        _randomize(m, rng, 1.0)
        outs = instance_decode(rng.standard_normal((2, 3, 3, 8)), m)
        for o in outs:
            assert np.all((o.b_h.data > 0) & (o.b_h.data < 1))
            np.testing.assert_allclose(o.c_o.sum(-1), 1.0, atol=1e-12)


class TestInteractionQueries:
    def test_equal_inputs(self, rng):
        m = _model()
        _randomize(m, rng)
        x = Tensor(rng.standard_normal((2, 4, 8)))
        q = make_interaction_queries(x, x, m)
        np.testing.assert_allclose(q.data, x.data @ m.w_i.weight.data + m.w_i.bias.data, atol=1e-15)

    def test_cancellation(self, rng):
        m = HOIModel(toy_config(K_O, det_dim=16, instance_ffn=16))
        m.w_i.weight.data = np.eye(16)
        m.w_i.bias.data[:] = 0
        x = rng.standard_normal((4, 16))
        assert np.all(make_interaction_queries(Tensor(x), Tensor(-x), m).data == 0)

    def test_formula_exact(self, rng):
        m = _model()
        _randomize(m, rng)
        a, b = rng.standard_normal((4, 8)), rng.standard_normal((4, 8))
        ref = ((a + b) / 2) @ m.w_i.weight.data + m.w_i.bias.data
        assert make_interaction_queries(Tensor(a), Tensor(b), m).data.tobytes() == ref.tobytes()

    def test_shape(self, rng):
        with pytest.raises(ShapeMismatch):
            make_interaction_queries(Tensor(np.zeros((4, 8))), Tensor(np.zeros((3, 8))), _model())


class TestDetectionProjection:
    def test_identity(self, rng):
        m = HOIModel(toy_config(K_O, det_dim=16, instance_ffn=16))
        m.w_p.weight.data = np.eye(16)
        m.w_p.bias.data[:] = 0
        vd = rng.standard_normal((9, 16))
        np.testing.assert_array_equal(project_detection_features(vd, m).data, vd)

    def test_zero_input(self, rng):
        m = _model()
        _randomize(m, rng)
        out = project_detection_features(np.zeros((9, 8)), m).data
        np.testing.assert_array_equal(out, np.tile(m.w_p.bias.data, (9, 1)))

    def test_formula_exact(self, rng):
        m = _model()
        _randomize(m, rng)
        vd = rng.standard_normal((2, 3, 3, 8))
        ref = vd.reshape(2, 9, 8) @ m.w_p.weight.data + m.w_p.bias.data
        assert project_detection_features(vd, m).data.tobytes() == ref.tobytes()

    def test_resample_to_grid(self, rng):
        m = _model()
        out = project_detection_features(rng.standard_normal((1, 6, 6, 8)), m, grid=(3, 3))
        assert out.shape == (1, 9, 16)
        with pytest.raises(ShapeMismatch):
            project_detection_features(rng.standard_normal((9, 4)), m)


class TestBilinear:
    def test_same_size_identity(self, rng):
        x = rng.standard_normal((4, 5, 3))
        assert bilinear_resample(x, (4, 5)) is x

    def test_constant_preserved(self):
        x = np.full((3, 7, 2), 2.5)
        np.testing.assert_allclose(bilinear_resample(x, (5, 4)), 2.5, atol=1e-15)

    def test_halving_averages_pairs(self, rng):
        x = rng.standard_normal((4, 6, 2))
        ref = (x[0::2, 0::2] + x[0::2, 1::2] + x[1::2, 0::2] + x[1::2, 1::2]) / 4
        np.testing.assert_allclose(bilinear_resample(x, (2, 3)), ref, atol=1e-14)

    def test_linear_ramp_upsampled(self):
        x = np.arange(4, dtype=float)[None, :, None].repeat(2, 0)
        up = bilinear_resample(x, (2, 8))[0, :, 0]
        np.testing.assert_allclose(up, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3], atol=1e-15)

    def test_batched(self, rng):
        x = rng.standard_normal((3, 5, 5, 2))
        out = bilinear_resample(x, (3, 4))
        for b in range(3):
            np.testing.assert_array_equal(out[b], bilinear_resample(x[b], (3, 4)))


class TestInteractionDecode:
    def test_single_layer_composition(self, rng):
        m = _model(num_layers=1)
        _randomize(m, rng)
        q = Tensor(rng.standard_normal((4, 16)))
        vs, vdp = Tensor(rng.standard_normal((9, 16))), Tensor(rng.standard_normal((9, 16)))
        pos = Tensor(sine_position_encoding_2d(3, 3, 16))
        qs, o_inter, _ = interaction_decode(q, vs, vdp, m, pos)
        ref = knowledge_integration_forward(m.interaction_layers[0], q, vs, vdp, pos)
        np.testing.assert_array_equal(qs[0].data, ref.data)
        np.testing.assert_array_equal(o_inter[0].data, l2_normalize(m.proj(ref)).data)
        np.testing.assert_allclose(np.linalg.norm(o_inter[0].data, axis=-1), 1, atol=1e-12)

    def test_clip_projection_fixture(self, rng):
        proj = np.linalg.qr(rng.standard_normal((16, 16)))[0]
        m = HOIModel(toy_config(K_O), clip_proj=proj)
        np.testing.assert_array_equal(m.proj.weight.data, proj)
        with pytest.raises(ShapeMismatch):
            HOIModel(toy_config(K_O), clip_proj=np.eye(8))

    def test_end_to_end_gradient(self, rng):
        m = _model()
        _randomize(m, rng)
        vs, vd = _inputs(rng, b=1, grid=2)
        probe = rng.standard_normal((1, 4, 16))

        def f(*params):
            out = forward(m, vs, vd)
            return sum_(out.o_inter[-1] * Tensor(probe)) + sum_(out.o_verb[-1] * Tensor(probe))

        assert finite_diff_check(f, m.parameters(), max_coords=6) <= 1e-4


class TestVerbAdapter:
    def test_zero_weights_bias_unit(self):
        m = _model()
        for layer in m.verb_adapter.layers:
            layer.weight.data[:] = 0
            layer.bias.data[:] = 0
        e = np.zeros(16)
        e[3] = 1.0
        m.verb_adapter.layers[-1].bias.data = e.copy()
        out = verb_adapter_forward(Tensor(np.random.default_rng(0).standard_normal((4, 16))), m).data
        np.testing.assert_array_equal(out, np.tile(e, (4, 1)))

    def test_unit_rows_and_gradient(self, rng):
        m = _model()
        _randomize(m, rng)
        q = Tensor(rng.standard_normal((4, 16)))
        out = verb_adapter_forward(q, m)
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=-1), 1, atol=1e-12)
        assert finite_diff_check(lambda q, *ps: verb_adapter_forward(q, m), [q] + m.verb_adapter.parameters()) <= 1e-4
        assert len(m.verb_adapter.layers) == 3

    def test_shape(self):
        with pytest.raises(ShapeMismatch):
            verb_adapter_forward(Tensor(np.zeros((4, 8))), _model())


class TestCheckpoint:
    def test_round_trip_bytes_and_outputs(self, rng, tmp_path):
        m = _model(seed=4)
        _randomize(m, rng)
        save_params(m, tmp_path / "a")
        back = load_params(tmp_path / "a")
        save_params(back, tmp_path / "b")
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        vs, vd = _inputs(rng)
        a, b = forward(m, vs, vd), forward(back, vs, vd)
        assert a.o_inter[-1].data.tobytes() == b.o_inter[-1].data.tobytes()
        assert a.c_o.tobytes() == b.c_o.tobytes()

    def test_truncated_tensor(self, tmp_path):
        save_params(_model(), tmp_path)
        f = next((tmp_path / "tensors").glob("*.hctf"))
        f.write_bytes(f.read_bytes()[:-3])
        with pytest.raises(FormatError):
            load_params(tmp_path)

    def test_bad_magic(self, tmp_path):
        save_params(_model(), tmp_path)
        f = next((tmp_path / "tensors").glob("*.hctf"))
        f.write_bytes(b"XXXX" + f.read_bytes()[4:])
        with pytest.raises(FormatError):
            load_params(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileError):
            load_params(tmp_path)

    def test_shape_mismatch_in_manifest(self, tmp_path):
        import json
        save_params(_model(), tmp_path)
        meta = json.loads((tmp_path / "manifest.json").read_text())
        meta["tensors"][0]["shape"] = [1, 1]
        (tmp_path / "manifest.json").write_text(json.dumps(meta))
        with pytest.raises(FormatError):
            load_params(tmp_path)
