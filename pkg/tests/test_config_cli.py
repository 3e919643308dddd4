import json
import logging
import socket
import subprocess
import sys

import numpy as np
import pytest

from flowforge import (
    AdaptConfig,
    AnalyticCodec,
    BackendSpec,
    ConfigError,
    EditConfig,
    Grid,
    LinearBackend,
    LoopbackServer,
    LossWeights,
    PointMassBackend,
    PromptPair,
    RemoteBackend,
    ReplayBackend,
    RunConfig,
    VelocityTrace,
    build_backend,
    load_image,
    load_run_config,
    parse_run_config,
    quantize_f32,
    save_image,
    save_run_config,
    serialize_run_config,
    validate_run_config,
)
from flowforge.cli import run_command


def sample_config(**kw):
    base = dict(
        edit=EditConfig(
            t_steps=20,
            n_max=13,
            n_avg=2,
            seed=7,
            mode="flowedit",
            kernel_size=3,
            kernel_sigma=1.5,
            weights=LossWeights(2.0, 0.5, 1.5),
            adapt=AdaptConfig(n_inner=3, step_size=0.2, line_search=False),
        ),
        backend=BackendSpec(kind="linear", a_src=0.5, b_tar=2.0, port=9999),
        prompt_src="a quiet field",
        prompt_tar="a stormy field",
        inputs=["a.ppm", "b.ppm"],
        layouts=["l.json"],
        output_dir="results",
        trace_record="run.vtrc",
        dump_latents=True,
        clamp=False,
        workers=3,
        log_level="warning",
    )
    base.update(kw)
    return RunConfig(**base)


def write_image(path, value=0.25, size=16):
    data = np.full((3, size, size), value)
    save_image(path, Grid(data))
    return str(path)


def write_layout(path, boxes, width=128, height=128):
    obj = {
        "image_width": width,
        "image_height": height,
        "boxes": [
            {"label": lab, "x1": x1, "y1": y1, "x2": x2, "y2": y2}
            for lab, x1, y1, x2, y2 in boxes
        ],
    }
    path.write_text(json.dumps(obj))
    return str(path)


class TestConfigRoundTrip:
    def test_serialize_parse_identity(self):
        cfg = sample_config()
        assert parse_run_config(serialize_run_config(cfg)) == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = sample_config()
        path = tmp_path / "run.json"
        save_run_config(path, cfg)
        assert load_run_config(path) == cfg

    def test_empty_object_gives_defaults(self):
        cfg = parse_run_config({})
        assert cfg == RunConfig()
        assert cfg.edit.mode == "driveflow"
        assert cfg.backend.kind == "point_mass"

    def test_json_on_disk_is_plain(self, tmp_path):
        path = tmp_path / "run.json"
        save_run_config(path, sample_config())
        obj = json.loads(path.read_text())
        assert obj["edit"]["weights"]["lambda1"] == 2.0
        assert obj["backend"]["kind"] == "linear"

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ConfigError, match="mystery"):
            parse_run_config({"mystery": 1})

    def test_unknown_edit_key_rejected(self):
        with pytest.raises(ConfigError, match="tsteps"):
            parse_run_config({"edit": {"tsteps": 10}})

    def test_unknown_weight_key_rejected(self):
        with pytest.raises(ConfigError, match="lambda4"):
            parse_run_config({"edit": {"weights": {"lambda4": 1.0}}})

    def test_unknown_adapt_key_rejected(self):
        with pytest.raises(ConfigError, match="steps"):
            parse_run_config({"edit": {"adapt": {"steps": 3}}})

    def test_unknown_backend_key_rejected(self):
        with pytest.raises(ConfigError, match="model"):
            parse_run_config({"backend": {"model": "anything"}})

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_run_config({"log_level": "verbose"})
        with pytest.raises(ConfigError):
            parse_run_config({"workers": -1})
        with pytest.raises(ConfigError):
            parse_run_config({"backend": {"kind": "quantum"}})
        with pytest.raises(ConfigError):
            parse_run_config({"edit": {"t_steps": 0}})
        with pytest.raises(ConfigError):
            parse_run_config([1, 2])

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_run_config(path)


class TestValidate:
    def test_accepts_complete_setup(self, tmp_path):
        img = write_image(tmp_path / "in.ppm")
        layout = write_layout(tmp_path / "l.json", [("box", 8.0, 8.0, 64.0, 64.0)])
        cfg = RunConfig(inputs=[img], layouts=[layout], output_dir=str(tmp_path / "out"))
        validate_run_config(cfg)

    def test_requires_inputs(self):
        with pytest.raises(ConfigError, match="input"):
            validate_run_config(RunConfig())

    def test_missing_input_file(self, tmp_path):
        cfg = RunConfig(inputs=[str(tmp_path / "ghost.ppm")])
        with pytest.raises(ConfigError, match="ghost"):
            validate_run_config(cfg)

    def test_missing_layout_file(self, tmp_path):
        img = write_image(tmp_path / "in.ppm")
        cfg = RunConfig(inputs=[img], layouts=[str(tmp_path / "ghost.json")])
        with pytest.raises(ConfigError, match="ghost"):
            validate_run_config(cfg)

    def test_driveflow_needs_layouts(self, tmp_path):
        img = write_image(tmp_path / "in.ppm")
        cfg = RunConfig(inputs=[img], output_dir=str(tmp_path))
        with pytest.raises(ConfigError, match="layout"):
            validate_run_config(cfg)

    def test_layout_count_must_cover_inputs(self, tmp_path):
        imgs = [write_image(tmp_path / f"in{i}.ppm") for i in range(3)]
        layouts = [
            write_layout(tmp_path / f"l{i}.json", [("b", 0.0, 0.0, 8.0, 8.0)]) for i in range(2)
        ]
        cfg = RunConfig(inputs=imgs, layouts=layouts, output_dir=str(tmp_path))
        with pytest.raises(ConfigError, match="cover"):
            validate_run_config(cfg)

    def test_replay_needs_existing_trace(self, tmp_path):
        img = write_image(tmp_path / "in.ppm")
        cfg = RunConfig(
            edit=EditConfig(mode="flowedit"),
            backend=BackendSpec(kind="replay"),
            inputs=[img],
            output_dir=str(tmp_path),
        )
        with pytest.raises(ConfigError, match="trace"):
            validate_run_config(cfg)
        cfg.backend.trace = str(tmp_path / "ghost.vtrc")
        with pytest.raises(ConfigError, match="ghost"):
            validate_run_config(cfg)

    def test_output_parent_must_exist(self, tmp_path):
        img = write_image(tmp_path / "in.ppm")
        cfg = RunConfig(
            edit=EditConfig(mode="flowedit"),
            inputs=[img],
            output_dir=str(tmp_path / "no" / "such" / "dir"),
        )
        with pytest.raises(ConfigError, match="parent"):
            validate_run_config(cfg)


class TestBuildBackend:
    def test_point_mass_uses_prompt_keys(self):
        spec = BackendSpec(kind="point_mass", mu_src=-1.0, mu_tar=3.0)
        backend = build_backend(spec, PromptPair("p", "q"))
        assert isinstance(backend, PointMassBackend)
        z = Grid.zeros(4, 2, 2)
        assert (backend.velocity(z, 1.0, "p").data == 1.0).all()
        assert (backend.velocity(z, 1.0, "q").data == -3.0).all()

    def test_point_mass_identical_prompts_collapse(self):
        spec = BackendSpec(kind="point_mass", mu_src=0.0, mu_tar=0.0)
        backend = build_backend(spec, PromptPair("same", "same"))
        z = Grid.full(4, 2, 2, 2.0)
        assert (backend.velocity(z, 1.0, "same").data == 2.0).all()

    def test_linear_uses_prompt_keys(self):
        spec = BackendSpec(kind="linear", a_src=2.0, b_src=1.0, a_tar=0.0, b_tar=-1.0)
        backend = build_backend(spec, PromptPair("p", "q"))
        assert isinstance(backend, LinearBackend)
        z = Grid.full(4, 2, 2, 3.0)
        assert (backend.velocity(z, 0.5, "p").data == 7.0).all()
        assert (backend.velocity(z, 0.5, "q").data == -1.0).all()

    def test_codec_parameters_flow_through(self):
        spec = BackendSpec(kind="point_mass", downsample_factor=4, latent_channels=6)
        backend = build_backend(spec, PromptPair("p", "q"))
        assert backend.downsample_factor == 4
        assert backend.latent_channels == 6

    def test_replay_backend_from_trace_file(self, tmp_path):
        path = tmp_path / "t.vtrc"
        VelocityTrace().write(path)
        spec = BackendSpec(kind="replay", trace=str(path))
        backend = build_backend(spec, PromptPair("p", "q"))
        assert isinstance(backend, ReplayBackend)

    def test_replay_without_trace_rejected(self):
        spec = BackendSpec(kind="replay")
        with pytest.raises(ConfigError):
            build_backend(spec, PromptPair("p", "q"))

    def test_remote_backend_connects(self):
        inner = PointMassBackend({"p": 0.0, "q": 1.0}, AnalyticCodec(8, 4))
        with LoopbackServer(inner) as server:
            host, port = server.address
            spec = BackendSpec(kind="remote", host=host, port=port)
            backend = build_backend(spec, PromptPair("p", "q"))
            try:
                assert isinstance(backend, RemoteBackend)
                assert backend.model_id == "analytic:point_mass"
            finally:
                backend.close()


class TestCliBasics:
    def test_no_arguments_is_usage_error(self, capsys):
        assert run_command([]) == 2
        capsys.readouterr()

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert run_command(["transmogrify"]) == 2
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert run_command(["--help"]) == 0
        assert "flowforge" in capsys.readouterr().out

    def test_env_var_sets_log_level(self, monkeypatch, capsys):
        monkeypatch.setenv("FLOWFORGE_LOG", "debug")
        assert run_command(["selftest", "--dry-run"]) == 0
        assert logging.getLogger("flowforge").level == logging.DEBUG
        capsys.readouterr()

    def test_flag_overrides_env_log_level(self, monkeypatch, capsys):
        monkeypatch.setenv("FLOWFORGE_LOG", "debug")
        assert run_command(["selftest", "--dry-run", "--log-level", "error"]) == 0
        assert logging.getLogger("flowforge").level == logging.ERROR
        capsys.readouterr()

    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "flowforge", "selftest", "--dry-run"],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0
        assert "selftest" in proc.stdout


class TestCliEdit:
    def flowedit_args(self, img, out, *extra):
        return [
            "flowedit",
            img,
            "-o",
            out,
            "--backend",
            "point_mass",
            "--mu-src",
            "0",
            "--mu-tar",
            "1",
            "--t-steps",
            "10",
            "--n-max",
            "7",
            *extra,
        ]

    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm")
        out = tmp_path / "never"
        code = run_command(self.flowedit_args(img, str(out), "--dry-run"))
        assert code == 0
        assert not out.exists()
        assert "would edit" in capsys.readouterr().out

    def test_unit_shift_saturates_output(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm", value=0.25)
        out = tmp_path / "out"
        assert run_command(self.flowedit_args(img, str(out))) == 0
        capsys.readouterr()
        edited = load_image(out / "in.edited.ppm")
        assert (edited.data == 1.0).all()
        lines = (out / "in.steps.jsonl").read_text().splitlines()
        assert len(lines) == 7
        assert all(json.loads(line)["micros"] == 0 for line in lines)

    def test_runs_are_byte_reproducible(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm", value=0.5)
        out1, out2 = tmp_path / "o1", tmp_path / "o2"
        layout = write_layout(tmp_path / "l.json", [("thing", 16.0, 16.0, 96.0, 96.0)])
        for out in (out1, out2):
            code = run_command(
                [
                    "edit",
                    img,
                    "-o",
                    str(out),
                    "--layout",
                    layout,
                    "--backend",
                    "linear",
                    "--a-src",
                    "0.2",
                    "--b-tar",
                    "1.0",
                    "--t-steps",
                    "8",
                    "--n-max",
                    "5",
                    "--n-inner",
                    "2",
                ]
            )
            assert code == 0
        capsys.readouterr()
        for name in ("in.edited.ppm", "in.steps.jsonl"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_timing_flag_records_wall_clock(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm")
        layout = write_layout(tmp_path / "l.json", [("thing", 0.0, 0.0, 64.0, 64.0)])
        out = tmp_path / "out"
        code = run_command(
            [
                "edit",
                img,
                "-o",
                str(out),
                "--layout",
                layout,
                "--t-steps",
                "6",
                "--n-max",
                "3",
                "--n-inner",
                "2",
                "--timing",
            ]
        )
        assert code == 0
        capsys.readouterr()
        lines = (out / "in.steps.jsonl").read_text().splitlines()
        assert any(json.loads(line)["micros"] > 0 for line in lines)

    def test_worker_pool_matches_sequential(self, tmp_path, capsys):
        imgs = [write_image(tmp_path / f"img{i}.ppm", value=0.1 * (i + 1)) for i in range(3)]
        seq, par = tmp_path / "seq", tmp_path / "par"
        base = [
            "flowedit",
            *imgs,
            "--backend",
            "linear",
            "--a-tar",
            "0.5",
            "--b-tar",
            "0.3",
            "--t-steps",
            "6",
            "--n-max",
            "4",
        ]
        assert run_command(base + ["-o", str(seq), "--workers", "1"]) == 0
        assert run_command(base + ["-o", str(par), "--workers", "2"]) == 0
        capsys.readouterr()
        for i in range(3):
            for suffix in ("edited.ppm", "steps.jsonl"):
                name = f"img{i}.{suffix}"
                assert (seq / name).read_bytes() == (par / name).read_bytes()

    def test_shared_layout_broadcasts(self, tmp_path, capsys):
        imgs = [write_image(tmp_path / f"img{i}.ppm") for i in range(2)]
        layout = write_layout(tmp_path / "l.json", [("b", 8.0, 8.0, 32.0, 32.0)])
        out = tmp_path / "out"
        code = run_command(
            ["edit", *imgs, "-o", str(out), "--layout", layout, "--t-steps", "4", "--n-max", "2"]
        )
        assert code == 0
        capsys.readouterr()
        assert (out / "img0.edited.ppm").exists()
        assert (out / "img1.edited.ppm").exists()

    def test_config_file_with_flag_override(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm")
        cfg = RunConfig(
            edit=EditConfig(t_steps=10, n_max=5, mode="flowedit"),
            inputs=[img],
            output_dir=str(tmp_path / "out"),
        )
        cfg_path = tmp_path / "run.json"
        save_run_config(cfg_path, cfg)
        assert run_command(["flowedit", "--config", str(cfg_path), "--n-max", "3"]) == 0
        capsys.readouterr()
        lines = (tmp_path / "out" / "in.steps.jsonl").read_text().splitlines()
        assert len(lines) == 3

    def test_dump_latents_writes_final_latent(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm", value=0.25)
        out = tmp_path / "out"
        code = run_command(self.flowedit_args(img, str(out), "--dump-latents"))
        assert code == 0
        capsys.readouterr()
        trace = VelocityTrace.read(out / "in.latent.vtrc")
        records = list(trace)
        assert len(records) == 1
        assert (records[0].step, records[0].branch, records[0].t) == (0, "tar", 0.0)
        codec = AnalyticCodec(8, 4)
        want = quantize_f32(Grid(codec.encode(load_image(img)).data + 1.0))
        assert np.abs(records[0].velocity.data - want.data).max() <= 1e-6


class TestCliRecordReplay:
    def test_record_then_replay_is_byte_identical(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm", value=0.5)
        layout = write_layout(tmp_path / "l.json", [("obj", 16.0, 16.0, 80.0, 80.0)])
        trace = tmp_path / "run.vtrc"
        rec_out, rep_out = tmp_path / "rec", tmp_path / "rep"
        rec = run_command(
            [
                "record",
                img,
                "-o",
                str(rec_out),
                "--layout",
                layout,
                "--backend",
                "linear",
                "--a-src",
                "0.3",
                "--b-tar",
                "0.7",
                "--t-steps",
                "8",
                "--n-max",
                "5",
                "--n-inner",
                "2",
                "--trace-record",
                str(trace),
            ]
        )
        assert rec == 0
        assert trace.exists()
        rep = run_command(
            [
                "replay",
                img,
                "-o",
                str(rep_out),
                "--layout",
                layout,
                "--trace",
                str(trace),
                "--t-steps",
                "8",
                "--n-max",
                "5",
                "--n-inner",
                "2",
            ]
        )
        assert rep == 0
        capsys.readouterr()
        assert (rec_out / "in.edited.ppm").read_bytes() == (rep_out / "in.edited.ppm").read_bytes()
        assert (rec_out / "in.steps.jsonl").read_bytes() == (rep_out / "in.steps.jsonl").read_bytes()

    def test_record_requires_trace_path(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm")
        code = run_command(["record", img, "--mode", "flowedit", "-o", str(tmp_path / "o")])
        assert code == 2
        capsys.readouterr()

    def test_record_takes_exactly_one_input(self, tmp_path, capsys):
        imgs = [write_image(tmp_path / f"in{i}.ppm") for i in range(2)]
        code = run_command(
            [
                "record",
                *imgs,
                "--mode",
                "flowedit",
                "--trace-record",
                str(tmp_path / "t.vtrc"),
                "-o",
                str(tmp_path / "o"),
            ]
        )
        assert code == 2
        capsys.readouterr()

    def test_replay_requires_trace(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm")
        code = run_command(["replay", img, "--mode", "flowedit", "-o", str(tmp_path / "o")])
        assert code == 2
        capsys.readouterr()

    def test_replay_schedule_mismatch_exits_three(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm")
        trace = tmp_path / "run.vtrc"
        base = [
            img,
            "--mode",
            "flowedit",
            "--backend",
            "point_mass",
            "--t-steps",
            "8",
            "--n-max",
            "4",
        ]
        assert (
            run_command(
                ["record", *base, "--trace-record", str(trace), "-o", str(tmp_path / "a")]
            )
            == 0
        )
        code = run_command(
            [
                "replay",
                img,
                "--mode",
                "flowedit",
                "--trace",
                str(trace),
                "--t-steps",
                "16",
                "--n-max",
                "4",
                "-o",
                str(tmp_path / "b"),
            ]
        )
        assert code == 3
        capsys.readouterr()


class TestCliTools:
    def test_decompose_constant_image(self, tmp_path, capsys):
        img = write_image(tmp_path / "flat.ppm", value=0.25)
        out = tmp_path / "out"
        assert run_command(["decompose", img, "-o", str(out)]) == 0
        capsys.readouterr()
        low = load_image(out / "flat.low.ppm")
        high = load_image(out / "flat.high.ppm")
        assert np.abs(low.data - 0.25).max() <= 1 / 255
        assert (high.data == 128 / 255).all()

    def test_decompose_dry_run(self, tmp_path, capsys):
        img = write_image(tmp_path / "flat.ppm")
        out = tmp_path / "never"
        assert run_command(["decompose", img, "-o", str(out), "--dry-run"]) == 0
        assert not out.exists()
        capsys.readouterr()

    def test_maskview_renders_box(self, tmp_path, capsys):
        layout = write_layout(tmp_path / "half.json", [("left", 0.0, 0.0, 64.0, 128.0)])
        out = tmp_path / "out"
        assert run_command(["maskview", "--layout", layout, "-o", str(out)]) == 0
        capsys.readouterr()
        mask = load_image(out / "half.mask.ppm")
        assert mask.shape == (3, 16, 16)
        assert (mask.data[:, :, :8] == 1.0).all()
        assert (mask.data[:, :, 8:] == 0.0).all()

    def test_maskview_explicit_dims_and_dilation(self, tmp_path, capsys):
        layout = write_layout(tmp_path / "dot.json", [("dot", 32.0, 32.0, 40.0, 40.0)])
        out = tmp_path / "out"
        code = run_command(
            [
                "maskview",
                "--layout",
                layout,
                "-o",
                str(out),
                "--latent-height",
                "16",
                "--latent-width",
                "16",
                "--dilate",
                "1",
            ]
        )
        assert code == 0
        capsys.readouterr()
        mask = load_image(out / "dot.mask.ppm")
        assert float(mask.data[0].sum()) == 9.0

    def test_maskview_partial_dims_rejected(self, tmp_path, capsys):
        layout = write_layout(tmp_path / "l.json", [("b", 0.0, 0.0, 8.0, 8.0)])
        code = run_command(["maskview", "--layout", layout, "--latent-height", "16"])
        assert code == 2
        capsys.readouterr()

    def test_maskview_indivisible_factor_rejected(self, tmp_path, capsys):
        layout = write_layout(tmp_path / "l.json", [("b", 0.0, 0.0, 8.0, 8.0)], width=100, height=100)
        code = run_command(["maskview", "--layout", layout, "--factor", "8"])
        assert code == 2
        capsys.readouterr()

    def test_gradcheck_passes(self, tmp_path, capsys):
        code = run_command(["gradcheck", "--instances", "3", "--coords", "5", "--seed", "11"])
        assert code == 0
        out = capsys.readouterr().out
        assert "max relative error:" in out

    def test_gradcheck_huge_step_fails_numerically(self, capsys):
        code = run_command(
            ["gradcheck", "--instances", "2", "--coords", "5", "--step", "10.0"]
        )
        assert code == 5
        capsys.readouterr()

    def test_selftest_passes(self, capsys):
        assert run_command(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "gradient-check" in out


class TestCliExitCodes:
    def test_missing_input_is_config_error(self, tmp_path, capsys):
        code = run_command(["flowedit", str(tmp_path / "ghost.ppm"), "-o", str(tmp_path / "o")])
        assert code == 2
        capsys.readouterr()

    def test_corrupt_image_is_parse_error(self, tmp_path, capsys):
        bad = tmp_path / "bad.ppm"
        bad.write_bytes(b"P6\n4 4\n255\n\x00\x00")
        code = run_command(["flowedit", str(bad), "-o", str(tmp_path / "o")])
        assert code == 3
        capsys.readouterr()

    def test_dead_remote_is_transport_error(self, tmp_path, capsys):
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        _, port = probe.getsockname()
        probe.close()
        img = write_image(tmp_path / "in.ppm")
        code = run_command(
            [
                "flowedit",
                img,
                "-o",
                str(tmp_path / "o"),
                "--backend",
                "remote",
                "--host",
                "127.0.0.1",
                "--port",
                str(port),
            ]
        )
        assert code == 4
        capsys.readouterr()

    def test_bad_flag_value_is_usage_error(self, tmp_path, capsys):
        img = write_image(tmp_path / "in.ppm")
        code = run_command(["flowedit", img, "--t-steps", "many"])
        assert code == 2
        capsys.readouterr()

    def test_remote_edit_round_trip(self, tmp_path, capsys):
        inner = PointMassBackend({"source scene": 0.0, "target scene": 1.0}, AnalyticCodec(8, 4))
        with LoopbackServer(inner) as server:
            host, port = server.address
            img = write_image(tmp_path / "in.ppm", value=0.25)
            out = tmp_path / "out"
            code = run_command(
                [
                    "flowedit",
                    img,
                    "-o",
                    str(out),
                    "--backend",
                    "remote",
                    "--host",
                    host,
                    "--port",
                    str(port),
                    "--t-steps",
                    "10",
                    "--n-max",
                    "10",
                ]
            )
            assert code == 0
            capsys.readouterr()
            edited = load_image(out / "in.edited.ppm")
            assert (edited.data == 1.0).all()
