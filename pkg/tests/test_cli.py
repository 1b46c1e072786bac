import json

import pytest

from eitopt.cli import main
from eitopt.config import ConfigError, PipelineConfig, preset_config
from eitopt.geometry import layout_from_csv, validate_layout


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    cfg = preset_config(
        "square-1x1",
        dataset={"n_layouts": 2, "n_sigma": 2},
        h_max=0.2,
        h_min=0.1,
        width=0.075,
        metrics={"kappa_samples": 2, "mu_samples": 2, "delta_pairs": 3, "ref_spacing": 0.12},
        train={"max_epochs": 60},
        recon={
            "fine_h": 0.13,
            "coarse_h": 0.2,
            "noise_levels": [0.01, 0.1],
            "sample_spacing": 0.13,
            "ellipse": {"center": [0.5, 0.5], "semi_axes": [0.25, 0.15],
                        "angle_deg": 20.0, "background": 1.0, "inclusion": 2.0},
        },
    )
    path.write_text(cfg.to_json())
    return path


class TestConfig:
    def test_schema_error_names_field(self):
        with pytest.raises(ConfigError, match="width"):
            PipelineConfig.from_dict(
                {"geometry": {"preset": "square-1x1"}, "per_side": [3, 3, 3, 3],
                 "width": -1.0, "h_max": 0.075, "h_min": 0.03}
            )

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="typo_key"):
            PipelineConfig.from_dict(
                {"geometry": {"preset": "square-1x1"}, "per_side": [3, 3, 3, 3],
                 "width": 0.075, "h_max": 0.075, "h_min": 0.03, "typo_key": 1}
            )

    def test_defaults_resolved(self):
        cfg = preset_config("square-1x1")
        a, b, c = cfg.prior_params
        assert b == pytest.approx(0.2 * cfg.domain.diameter)
        assert c == pytest.approx(0.01 * a)
        assert cfg.min_gap == cfg.h_max

    def test_hash_stable_and_sensitive(self):
        c1 = preset_config("square-1x1")
        c2 = preset_config("square-1x1")
        c3 = preset_config("square-1x1", dataset={"n_layouts": 7})
        assert c1.hash == c2.hash != c3.hash

    def test_master_seed_derivation(self):
        cfg = preset_config("square-1x1").with_master_seed(99)
        seeds = cfg.raw["seeds"]
        assert len(set(seeds.values())) == len(seeds)


class TestExitCodes:
    def test_invalid_config_exits_2(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"geometry": {"preset": "square-1x1"}}')
        assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path)]) == 2

    def test_missing_dataset_exits_1(self, tiny_config, tmp_path):
        assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == 1


class TestPipelineCommands:
    def test_gen_data_shapes_and_rerun_identical(self, tiny_config, tmp_path):
        out = tmp_path / "a"
        assert main(["gen-data", "--config", str(tiny_config), "--out", str(out)]) == 0
        e_bar = (out / "E_bar.csv").read_text()
        rows = [r for r in e_bar.splitlines() if not r.startswith("#")]
        assert len(rows) == 24 and len(rows[0].split(",")) == 4
        out2 = tmp_path / "b"
        assert main(["gen-data", "--config", str(tiny_config), "--out", str(out2)]) == 0
        assert (out2 / "E_bar.csv").read_text() == e_bar
        manifest = json.loads((out / "manifest.json").read_text())
        assert "config_hash" in manifest

    def test_full_chain(self, tiny_config, tmp_path):
        out = tmp_path / "chain"
        cfgpath = str(tiny_config)
        assert main(["gen-data", "--config", cfgpath, "--out", str(out)]) == 0
        assert main(["train", "--config", cfgpath, "--out", str(out)]) == 0
        net = json.loads((out / "network.json").read_text())
        assert net["record"]["stop_reason"]
        assert main(["optimize", "--config", cfgpath, "--out", str(out)]) == 0

        cfg = PipelineConfig.from_json(tiny_config.read_text())
        body = "\n".join(
            ln for ln in (out / "layout_optimized.csv").read_text().splitlines()
            if not ln.startswith("#")
        )
        lay = layout_from_csv(body, cfg.domain)
        validate_layout(cfg.domain, lay, cfg.min_gap)

        import re
        from collections import Counter

        svg = (out / "layout_overlay.svg").read_text()
        uses = re.findall(r'<use [^>]*href="#(m[0-9a-f]+)"', svg)
        top_two = sorted(Counter(uses).values(), reverse=True)[:2]
        # one marker series per layout: k midpoints plus one legend sample
        assert top_two == [lay.k + 1, lay.k + 1]

        assert main(["evaluate", "--config", cfgpath, "--out", str(out)]) == 0
        report = json.loads((out / "evaluation.json").read_text())
        assert report["config_hash"] == cfg.hash
        assert len(report["mu_a"]) == 12 * 11

        assert main(["distinguish", "--config", cfgpath, "--out", str(out)]) == 0
        dist = json.loads((out / "distinguishability.json").read_text())
        assert set(dist["delta_win_rate"]) == {"coarse", "fine"}

        assert main(["reconstruct", "--config", cfgpath, "--out", str(out)]) == 0
        table = json.loads((out / "rmse_table.json").read_text())
        # 2 layouts x 2 noise levels x 2 targets in the tiny config
        assert len(table["cells"]) == 8
        for cell in table["cells"]:
            assert cell["sigma_min"] > 0
            assert cell["cost_monotone"]

    def test_self_evaluation_win_rate_half(self, tiny_config, tmp_path):
        out = tmp_path / "self"
        cfgpath = str(tiny_config)
        assert main(["gen-data", "--config", cfgpath, "--out", str(out)]) == 0
        assert main(["train", "--config", cfgpath, "--out", str(out)]) == 0
        assert main(["optimize", "--config", cfgpath, "--out", str(out)]) == 0
        assert (
            main([
                "evaluate", "--config", cfgpath, "--out", str(out),
                "--layout-a", str(out / "layout_uniform.csv"),
                "--layout-b", str(out / "layout_uniform.csv"),
            ])
            == 0
        )
        report = json.loads((out / "evaluation.json").read_text())
        assert report["mu_ratio_b_over_a"] == pytest.approx(1.0)
        assert report["delta_win_rate"]["coarse"] == 0.5
