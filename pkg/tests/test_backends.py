import numpy as np
import pytest

from flowforge import (
    AnalyticCodec,
    EditConfig,
    Grid,
    InvalidArgumentError,
    LinearBackend,
    LinearField,
    PointMassBackend,
    PromptPair,
    RecordingBackend,
    ReplayBackend,
    TraceMissError,
    VelocityTrace,
    quantize_f32,
    run_flowedit,
)


class TestPromptPair:
    def test_holds_strings(self):
        pair = PromptPair("sunny street", "snowy street")
        assert pair.c_src == "sunny street"

    def test_rejects_empty(self):
        with pytest.raises(InvalidArgumentError):
            PromptPair("", "x")
        with pytest.raises(InvalidArgumentError):
            PromptPair("x", "")


class TestAnalyticCodec:
    def test_identity_when_factor_one(self, rng):
        codec = AnalyticCodec(downsample_factor=1, latent_channels=3)
        image = Grid(rng.random((3, 5, 7)))
        latent = codec.encode(image)
        assert np.array_equal(latent.data, image.data)
        assert np.array_equal(codec.decode(latent).data, image.data)

    def test_encode_pools_block_means(self, rng):
        codec = AnalyticCodec(downsample_factor=4, latent_channels=4)
        image = Grid(rng.random((3, 8, 12)))
        latent = codec.encode(image)
        assert latent.shape == (4, 2, 3)
        # independent per-block mean
        for ch in range(3):
            for by in range(2):
                for bx in range(3):
                    want = image.data[ch, 4 * by : 4 * by + 4, 4 * bx : 4 * bx + 4].mean()
                    assert abs(latent.data[ch, by, bx] - want) < 1e-12

    def test_encode_replicates_channels_cyclically(self, rng):
        codec = AnalyticCodec(downsample_factor=2, latent_channels=7)
        image = Grid(rng.random((3, 4, 4)))
        latent = codec.encode(image)
        for c in range(7):
            assert np.array_equal(latent.data[c], latent.data[c % 3])

    def test_decode_upsamples_nearest(self):
        latent = Grid(np.arange(4, dtype=np.float64).reshape(1, 2, 2).repeat(4, axis=0))
        codec = AnalyticCodec(downsample_factor=3, latent_channels=4)
        image = codec.decode(latent)
        assert image.shape == (3, 6, 6)
        assert (image.data[0, :3, :3] == 0.0).all()
        assert (image.data[0, 3:, 3:] == 3.0).all()

    def test_encode_decode_idempotent_on_range(self, rng):
        codec = AnalyticCodec(downsample_factor=8, latent_channels=4)
        latent = Grid(rng.random((4, 3, 5)))
        fixed = codec.encode(codec.decode(latent))
        again = codec.encode(codec.decode(fixed))
        assert np.abs(fixed.data - again.data).max() <= 1e-12

    def test_rejects_indivisible_dims(self):
        codec = AnalyticCodec(downsample_factor=8, latent_channels=4)
        with pytest.raises(InvalidArgumentError):
            codec.encode(Grid.zeros(3, 12, 16))

    def test_rejects_wrong_channel_counts(self):
        codec = AnalyticCodec(downsample_factor=2, latent_channels=4)
        with pytest.raises(InvalidArgumentError):
            codec.encode(Grid.zeros(4, 4, 4))
        with pytest.raises(InvalidArgumentError):
            codec.decode(Grid.zeros(3, 4, 4))

    def test_rejects_bad_params(self):
        with pytest.raises(InvalidArgumentError):
            AnalyticCodec(downsample_factor=0)
        with pytest.raises(InvalidArgumentError):
            AnalyticCodec(latent_channels=0)


class TestPointMassBackend:
    def test_velocity_formula(self):
        backend = PointMassBackend({"a": 0.0})
        z = Grid.full(2, 2, 2, 1.0)
        out = backend.velocity(z, 0.5, "a")
        assert (out.data == 2.0).all()

    def test_at_anchor_velocity_is_zero(self, rng):
        mu = Grid(rng.standard_normal((1, 3, 3)))
        backend = PointMassBackend({"a": mu})
        out = backend.velocity(mu, 0.7, "a")
        assert (out.data == 0.0).all()

    def test_rejects_non_positive_time(self):
        backend = PointMassBackend({"a": 0.0})
        z = Grid.zeros(1, 2, 2)
        for t in (0.0, -0.5):
            with pytest.raises(InvalidArgumentError):
                backend.velocity(z, t, "a")

    def test_rejects_unknown_prompt(self):
        backend = PointMassBackend({"a": 0.0})
        with pytest.raises(InvalidArgumentError) as err:
            backend.velocity(Grid.zeros(1, 2, 2), 0.5, "b")
        assert "'b'" in str(err.value)

    def test_rejects_anchor_shape_mismatch(self):
        backend = PointMassBackend({"a": Grid.zeros(1, 2, 2)})
        with pytest.raises(InvalidArgumentError):
            backend.velocity(Grid.zeros(1, 3, 3), 0.5, "a")

    def test_rejects_empty_anchor_table(self):
        with pytest.raises(InvalidArgumentError):
            PointMassBackend({})

    def test_capabilities(self):
        backend = PointMassBackend({"a": 0.0}, AnalyticCodec(2, 5))
        assert backend.kind == "point_mass"
        assert backend.model_id == "analytic:point_mass"
        assert backend.latent_channels == 5
        assert backend.downsample_factor == 2


class TestLinearBackend:
    def test_scalar_coefficients(self):
        backend = LinearBackend({"p": LinearField(a=2.0, b=1.0)})
        z = Grid.full(1, 2, 2, 3.0)
        out = backend.velocity(z, 0.4, "p")
        assert (out.data == 7.0).all()

    def test_per_channel_scale(self, rng):
        scale = np.array([1.0, -2.0, 0.5])
        backend = LinearBackend({"p": LinearField(a=scale)})
        z = Grid(rng.standard_normal((3, 4, 4)))
        out = backend.velocity(z, 0.5, "p")
        assert np.abs(out.data - scale[:, None, None] * z.data).max() <= 1e-15

    def test_full_matrix_matches_einsum(self, rng):
        mat = rng.standard_normal((4, 4))
        backend = LinearBackend({"p": LinearField(a=mat)})
        z = Grid(rng.standard_normal((4, 5, 6)))
        out = backend.velocity(z, 0.5, "p")
        want = np.einsum("ij,jhw->ihw", mat, z.data)
        assert np.abs(out.data - want).max() <= 1e-12

    def test_grid_offset(self, rng):
        offset = Grid(rng.standard_normal((2, 3, 3)))
        backend = LinearBackend({"p": LinearField(b=offset)})
        z = Grid(rng.standard_normal((2, 3, 3)))
        out = backend.velocity(z, 0.9, "p")
        assert np.array_equal(out.data, offset.data)

    def test_rejects_coefficient_shape_mismatch(self):
        backend = LinearBackend({"p": LinearField(a=np.ones(3))})
        with pytest.raises(InvalidArgumentError):
            backend.velocity(Grid.zeros(2, 2, 2), 0.5, "p")
        backend = LinearBackend({"p": LinearField(a=np.ones((3, 2)))})
        with pytest.raises(InvalidArgumentError):
            backend.velocity(Grid.zeros(3, 2, 2), 0.5, "p")

    def test_rejects_offset_shape_mismatch(self):
        backend = LinearBackend({"p": LinearField(b=Grid.zeros(1, 2, 2))})
        with pytest.raises(InvalidArgumentError):
            backend.velocity(Grid.zeros(1, 3, 3), 0.5, "p")

    def test_rejects_unknown_prompt(self):
        backend = LinearBackend({"p": LinearField()})
        with pytest.raises(InvalidArgumentError):
            backend.velocity(Grid.zeros(1, 2, 2), 0.5, "q")


class TestRecordReplay:
    def run_recorded(self, rng, seed=11):
        backend = PointMassBackend({"s": 0.0, "t": 1.5})
        recorder = RecordingBackend(backend)
        z0 = Grid(rng.standard_normal((2, 3, 4)))
        cfg = EditConfig(t_steps=8, n_max=8, mode="flowedit", seed=seed)
        final, _ = run_flowedit(z0, recorder, PromptPair("s", "t"), cfg)
        return z0, cfg, recorder.trace, final

    def test_recording_captures_both_branches(self, rng):
        _, cfg, trace, _ = self.run_recorded(rng)
        assert len(trace) == 2 * cfg.n_max
        branches = [rec.branch for rec in trace]
        assert branches[:2] == ["src", "tar"]
        steps = sorted({rec.step for rec in trace}, reverse=True)
        assert steps == list(range(cfg.n_max, 0, -1))

    def test_recording_returns_f32_values(self, rng):
        _, _, trace, _ = self.run_recorded(rng)
        for rec in trace:
            assert np.array_equal(
                rec.velocity.data, rec.velocity.data.astype(np.float32).astype(np.float64)
            )

    def test_replay_reproduces_run_bitwise(self, rng, tmp_path):
        z0, cfg, trace, final = self.run_recorded(rng)
        path = tmp_path / "run.vtrc"
        trace.write(path)
        replay = ReplayBackend(VelocityTrace.read(path))
        again, _ = run_flowedit(z0, replay, PromptPair("s", "t"), cfg)
        assert np.array_equal(final.data, again.data)

    def test_replay_in_memory_strict(self, rng):
        z0, cfg, trace, final = self.run_recorded(rng)
        replay = ReplayBackend(trace, strict=True)
        again, _ = run_flowedit(z0, replay, PromptPair("s", "t"), cfg)
        assert np.array_equal(final.data, again.data)

    def test_strict_replay_needs_digests(self, rng, tmp_path):
        z0, cfg, trace, _ = self.run_recorded(rng)
        path = tmp_path / "run.vtrc"
        trace.write(path)
        replay = ReplayBackend(VelocityTrace.read(path), strict=True)
        with pytest.raises(TraceMissError):
            run_flowedit(z0, replay, PromptPair("s", "t"), cfg)

    def test_strict_replay_rejects_changed_latent(self, rng):
        z0, cfg, trace, _ = self.run_recorded(rng)
        replay = ReplayBackend(trace, strict=True)
        other = Grid(z0.data + 0.5)
        with pytest.raises(TraceMissError):
            run_flowedit(other, replay, PromptPair("s", "t"), cfg)

    def test_replay_wrong_time_misses(self, rng):
        _, _, trace, _ = self.run_recorded(rng)
        replay = ReplayBackend(trace)
        replay.set_context(8, "src")
        with pytest.raises(TraceMissError):
            replay.velocity(Grid.zeros(2, 3, 4), 0.123, "s")

    def test_replay_exhaustion_misses(self, rng):
        z0, cfg, trace, _ = self.run_recorded(rng)
        replay = ReplayBackend(trace)
        run_flowedit(z0, replay, PromptPair("s", "t"), cfg)
        with pytest.raises(TraceMissError):
            run_flowedit(z0, replay, PromptPair("s", "t"), cfg)

    def test_replay_requires_context(self, rng):
        _, _, trace, _ = self.run_recorded(rng)
        replay = ReplayBackend(trace)
        with pytest.raises(TraceMissError):
            replay.velocity(Grid.zeros(2, 3, 4), 1.0, "s")

    def test_replay_unknown_step_misses(self, rng):
        _, _, trace, _ = self.run_recorded(rng)
        replay = ReplayBackend(trace)
        replay.set_context(99, "src")
        with pytest.raises(TraceMissError):
            replay.velocity(Grid.zeros(2, 3, 4), 1.0, "s")

    def test_recorder_wraps_capabilities(self, rng):
        backend = PointMassBackend({"s": 0.0}, AnalyticCodec(4, 6))
        recorder = RecordingBackend(backend)
        assert recorder.kind == "point_mass"
        assert recorder.latent_channels == 6
        assert recorder.downsample_factor == 4
        image = Grid(rng.random((3, 8, 8)))
        assert np.array_equal(recorder.encode(image).data, backend.encode(image).data)


class TestQuantizeInteraction:
    def test_recorded_velocity_equals_quantized_inner(self, rng):
        backend = PointMassBackend({"s": 0.25})
        recorder = RecordingBackend(backend)
        z = Grid(rng.standard_normal((1, 2, 2)))
        got = recorder.velocity(z, 0.5, "s")
        want = quantize_f32(backend.velocity(z, 0.5, "s"))
        assert np.array_equal(got.data, want.data)
