import csv
import io
import math

import numpy as np
import pytest

from polyheat import cli


def run(argv, capsys):
    code = cli.main(argv)
    cap = capsys.readouterr()
    return code, cap.out, cap.err


def parse_csv(text):
    body = [line for line in text.splitlines() if not line.startswith("#")]
    footer = dict(line[2:].split("=", 1) for line in text.splitlines() if line.startswith("# "))
    rows = list(csv.reader(io.StringIO("\n".join(body))))
    return rows[0], rows[1:], footer


class TestConfig:
    def test_comments_and_lists(self):
        raw = cli.parse_config_text("# head\nexperiment = trace  # tail\npartition.r = 4, 8 16\n\n")
        ec = cli.resolve_config(raw)
        assert ec.experiment == "trace"
        assert ec["partition.r"] == (4, 8, 16)
        assert ec["manifold.kind"] == "circle"

    def test_unknown_key(self):
        with pytest.raises(cli.ConfigError, match="kernel.varient"):
            cli.resolve_config({"kernel.varient": "v"}, "trace")

    @pytest.mark.parametrize(
        "raw",
        [
            {"time.t": "-1"},
            {"partition.r": "0"},
            {"manifold.kind": "klein-bottle"},
            {"check.monotone": "maybe"},
            {"bundle.rank": "two"},
        ],
    )
    def test_bad_values(self, raw):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config(raw, "trace")

    def test_experiment_mismatch(self):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config({"experiment": "hsu"}, "trace")

    def test_missing_line_separator(self):
        with pytest.raises(cli.ConfigError):
            cli.parse_config_text("experiment trace")

    def test_builders(self):
        ec = cli.resolve_config(
            {
                "manifold.kind": "flat-torus",
                "bundle.rank": "2",
                "bundle.connection": "constant-form",
                "bundle.form": "0.5, 0",
                "partition.kind": "fine-then-last",
                "partition.last": "0.1",
                "partition.r": "3",
            },
            "propagate",
        )
        B = ec.bundle()
        assert B.rank == 2 and not B.has_trivial_transport
        (T,) = ec.partitions()
        assert len(T) == 3 and T.steps[-1] == pytest.approx(0.1)
        assert len(ec.grid(B.manifold)) == 64**2

    def test_bad_variant(self):
        ec = cli.resolve_config({"kernel.variant": "w-tilde"}, "trace")
        with pytest.raises(cli.ConfigError):
            ec.step_config()


class TestCsv:
    def test_format(self):
        res = cli.Result(["a", "b", "c"], [[1, 0.1, None], [2, 1 / 3, True]], False, "", [("slope", 2.0)])
        text = cli.to_csv(res)
        assert "\r" not in text
        assert text.splitlines() == ["a,b,c", "1,0.1,", "2,0.3333333333333333,true", "# slope=2.0", "# status=FAIL"]

    def test_skip_status(self):
        assert cli.to_csv(cli.Result(["x"], [], None, "")).endswith("# status=SKIP\n")

    def test_floats_roundtrip(self):
        x = float(np.exp(-0.5))
        assert float(cli._cell(x)) == x


class TestMain:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        conf = tmp_path / "bad.conf"
        conf.write_text("experiment = trace\nno.such.key = 1\n")
        code, out, err = run(["trace", "--config", str(conf)], capsys)
        assert code == 2 and out == "" and "no.such.key" in err

    def test_missing_file_exits_2(self, tmp_path, capsys):
        assert run(["trace", "--config", str(tmp_path / "nope.conf")], capsys)[0] == 2

    def test_bad_seed_exits_2(self, capsys):
        assert run(["propagate", "--seed", "-1"], capsys)[0] == 2

    def test_single_row_ladder(self, capsys):
        code, out, err = run(
            ["converge", "--set", "partition.r=4", "--set", "grid.n=64", "--set", "check.tol=1"], capsys
        )
        assert code == 0 and "converge: PASS" in err
        header, rows, footer = parse_csv(out)
        assert header == ["r", "mesh", "sup_error", "ratio"]
        assert len(rows) == 1 and rows[0][3] == ""
        assert footer["status"] == "PASS"

    def test_failed_check_exits_1(self, capsys):
        argv = ["converge", "--set", "partition.r=2, 4", "--set", "grid.n=64", "--set", "check.tol=1e-12"]
        code, out, err = run(argv, capsys)
        assert code == 1 and out.endswith("# status=FAIL\n")

    def test_torus_constant_section(self, tmp_path, capsys):
        out = tmp_path / "c.csv"
        argv = [
            "propagate",
            "--out",
            str(out),
            "--set",
            "manifold.kind=flat-torus",
            "--set",
            "section.u=const",
            "--set",
            "section.value=2.5",
            "--set",
            "time.t=0.01",
            "--set",
            "partition.r=4",
            "--set",
            "grid.n=48",
            "--set",
            "check.tol=1e-10",
        ]
        code, stdout, _ = run(argv, capsys)
        assert code == 0 and stdout == ""
        header, rows, footer = parse_csv(out.read_text())
        assert len(rows) == 48**2
        assert max(float(r[4]) for r in rows) <= 1e-10

    def test_seed_override(self, capsys):
        base = ["propagate", "--set", "manifold.kind=flat-torus", "--set", "propagate.method=mc"]
        base += ["--set", "mc.paths=2000", "--set", "time.t=0.05", "--set", "partition.r=2"]
        a = run(base + ["--seed", "7"], capsys)[1]
        b = run(base + ["--set", "mc.seed=7"], capsys)[1]
        c = run(base + ["--seed", "8"], capsys)[1]
        assert a == b and a != c
        _, rows, footer = parse_csv(a)
        assert footer["paths"] == "2000"
        assert math.isfinite(float(footer["escape_bound"]))

    def test_config_then_set(self, tmp_path, capsys):
        conf = tmp_path / "t.conf"
        conf.write_text("experiment = trace\ntime.t = 0.5\npartition.r = 4\ngrid.n = 64\ncheck.tol = 1e-9\n")
        code, out, _ = run(["trace", "--config", str(conf), "--set", "time.t=0.25"], capsys)
        assert code == 0
        _, rows, _ = parse_csv(out)
        from polyheat.geometry import Circle
        from polyheat.oracle import spectral_trace

        assert float(rows[0][2]) == pytest.approx(spectral_trace(Circle(), 0.25))

    @pytest.mark.parametrize("f", ["one", "odd"])
    def test_lemma_exact_cases(self, f, capsys):
        argv = ["lemma-a", "--set", f"lemma.f={f}", "--set", "lemma.points=3", "--set", "lemma.form=2,0,0,0.5"]
        code, out, err = run(argv, capsys)
        assert code == 0
        _, rows, footer = parse_csv(out)
        assert all(float(r[3]) <= 1e-12 for r in rows)
        assert footer["slope"] == ""

    def test_lemma_rejects_nonsquare(self, capsys):
        assert run(["lemma-a", "--set", "lemma.form=1,2,3"], capsys)[0] == 2

    def test_holonomy_torus(self, capsys):
        argv = ["holonomy", "--set", "manifold.kind=flat-torus", "--set", "holonomy.loop=square"]
        argv += ["--set", "bundle.rank=2", "--set", "bundle.connection=constant-form", "--set", "bundle.form=0.3,1"]
        argv += ["--set", "check.identity=true", "--set", "check.tol=1e-12"]
        assert run(argv, capsys)[0] == 0

    def test_kernel_dump(self, capsys):
        argv = ["kernel", "--set", "grid.n=32", "--set", "partition.r=2", "--set", "kernel.rows=0"]
        argv += ["--set", "kernel.variants=v, lambda:-1"]
        code, out, _ = run(argv, capsys)
        assert code == 0
        header, rows, _ = parse_csv(out)
        assert header == ["variant", "other", "node_i", "node_j", "value"]
        assert rows

    def test_threads_do_not_change_output(self, capsys):
        argv = ["trace", "--set", "grid.n=256", "--set", "partition.r=4, 8"]
        assert run(argv, capsys)[1] == run(argv + ["--threads", "3"], capsys)[1]
