"""Stage commands and the command-line front end on small synthetic sets."""

import logging

import pytest

from clickscale import pipeline as P
from clickscale import refnet
from clickscale.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from clickscale.evaluation import GroundTruth, load_ground_truth, save_ground_truth
from clickscale.geometry import Box, Click, iou
from clickscale.proposals import Proposal, SelectionConfig, generate_sliding_windows, load_clicks, save_proposals
from clickscale.pseudogt import PseudoGroundTruth, load_pseudo_gt, save_pseudo_gt
from clickscale.synth import SceneSpec, generate_dataset
from oracles import select_oracle

SMALL_NET = "conv:conv1:6:3,relu,maxpool:2:2,conv:conv2:8:3,relu,conv:conv3:8:3,relu"


def small_args(data, out, *extra):
    return [
        "--data-dir", str(data), "--out-dir", str(out), "--input-side", "16", "--layers", SMALL_NET,
        "--epochs", "2", "--window-stride", "0.25", "--gradient-layer", "conv3", *extra,
    ]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    generate_dataset(SceneSpec(seed=11), 12, root)
    return root


@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["select", *small_args(data, out)]) == EXIT_OK
    assert main(["train", *small_args(data, out)]) == EXIT_OK
    return out


class TestSynthCommand:
    def test_writes_dataset(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "d"), "--count", "10", "--seed", "4"]) == EXIT_OK
        assert len(list((tmp_path / "d" / "images").glob("*.ppm"))) == 10
        assert {p.name for p in (tmp_path / "d").glob("*.csv")} == {"gt.csv", "clicks.csv", "labels.csv"}

    def test_repeatable(self, tmp_path):
        for name in ("a", "b"):
            main(["synth", "--out", str(tmp_path / name), "--count", "3", "--seed", "4"])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    def test_count_zero(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--count", "0"]) == EXIT_USAGE


class TestSelect:
    def _one_image(self, tmp_path, boxes):
        generate_dataset(SceneSpec(seed=1, objects_per_image=(1, 1)), 1, tmp_path / "d")
        c = load_clicks(tmp_path / "d" / "clicks.csv")[0]
        save_proposals(tmp_path / "p.csv", [Proposal(b, c.image_id) for b in boxes])
        return c

    def test_single_containing_proposal(self, tmp_path):
        c = self._one_image(tmp_path, [Box(0, 0, 96, 96), Box(0, 0, 1, 1)])
        cfg = P.build_config({"data_dir": str(tmp_path / "d"), "out_dir": str(tmp_path / "o"), "proposals": str(tmp_path / "p.csv")})
        P.cmd_select(cfg)
        rows = P.load_selected(tmp_path / "o" / "selected.csv")
        assert [(r.image_id, r.click_index, r.class_id, r.rank, r.box) for r in rows] == [(c.image_id, 0, c.class_id, 0, Box(0, 0, 96, 96))]

    def test_no_containing_proposal_warns(self, tmp_path, caplog):
        self._one_image(tmp_path, [Box(200, 200, 201, 201)])
        cfg = P.build_config({"data_dir": str(tmp_path / "d"), "out_dir": str(tmp_path / "o"), "proposals": str(tmp_path / "p.csv")})
        with caplog.at_level(logging.WARNING):
            P.cmd_select(cfg)
        assert P.load_selected(tmp_path / "o" / "selected.csv") == []
        assert "no proposal contains click" in caplog.text

    def test_matches_oracle_on_twenty_images(self, tmp_path):
        generate_dataset(SceneSpec(seed=2), 20, tmp_path / "d")
        assert main(["select", "--data-dir", str(tmp_path / "d"), "--out-dir", str(tmp_path / "o"), "--window-stride", "0.2"]) == EXIT_OK
        rows = P.load_selected(tmp_path / "o" / "selected.csv")
        cfg = P.PipelineConfig()
        windows = [p.box.as_tuple() for p in generate_sliding_windows(96, 96, cfg.window_scales, cfg.window_ratios, 0.2)]
        clicks: dict[str, list[Click]] = {}
        for c in load_clicks(tmp_path / "d" / "clicks.csv"):
            clicks.setdefault(c.image_id, []).append(c)
        expect = []
        for img in sorted(clicks):
            for ci, c in enumerate(clicks[img]):
                idx = select_oracle(windows, c.x, c.y, SelectionConfig().t_iou, SelectionConfig().top_n)
                expect += [(img, ci, r, windows[i]) for r, i in enumerate(idx)]
        assert [(r.image_id, r.click_index, r.rank, r.box.as_tuple()) for r in rows] == expect

    def test_missing_data(self, tmp_path):
        assert main(["select", "--data-dir", str(tmp_path / "nope")]) == EXIT_DATA


class TestTrain:
    def test_zero_epochs_is_init(self, data, trained, tmp_path):
        out = tmp_path / "o"
        out.mkdir()
        (out / "selected.csv").write_bytes((trained / "selected.csv").read_bytes())
        args = small_args(data, out)
        args[args.index("--epochs") + 1] = "0"
        assert main(["train", *args]) == EXIT_OK
        net = refnet.load_checkpoint(out / "model.ckpt")
        init = refnet.init_network(net.config)
        assert all(net.params[k].tobytes() == init.params[k].tobytes() for k in init.params)

    def test_needs_selection(self, data, tmp_path):
        assert main(["train", *small_args(data, tmp_path)]) == EXIT_DATA

    def test_missing_clicks(self, data, tmp_path):
        assert main(["train", *small_args(data, tmp_path), "--clicks", str(tmp_path / "none.csv")]) == EXIT_DATA

    def test_two_class_set_learns(self, tmp_path, caplog):
        generate_dataset(SceneSpec(seed=5, num_classes=2), 30, tmp_path / "d")
        args = small_args(tmp_path / "d", tmp_path / "o", "--num-classes", "2")
        args[args.index("--epochs") + 1] = "8"
        args[args.index("--window-stride") + 1] = "0.3"
        assert main(["select", *args]) == EXIT_OK
        with caplog.at_level(logging.INFO):
            assert main(["train", *args]) == EXIT_OK
        line = next(r.getMessage() for r in caplog.records if r.getMessage().startswith("training accuracy"))
        assert float(line.split()[2]) >= 0.95


class TestPseudoGt:
    def test_oracle_mode_recovers_gt(self, data, tmp_path):
        cfg = P.build_config({"data_dir": str(data), "out_dir": str(tmp_path), "oracle_cam": "1", "window_stride": "0.25"})
        P.run_pipeline(cfg)
        items = load_pseudo_gt(tmp_path / "pseudo_gt.csv")
        gts = load_ground_truth(data / "gt.csv")
        assert len(items) == len(gts)
        for p in items:
            best = max(iou(p.box, g.box) for g in gts if g.image_id == p.image_id and g.class_id == p.class_id)
            assert best == 1.0
        assert "corloc: 1.0000" in (tmp_path / "report.txt").read_text()

    def test_cam_methods_differ(self, data, trained, tmp_path):
        outs = []
        for m in ("sa_cam", "grad_cam"):
            assert main(["pseudogt", *small_args(data, trained), "--cam-method", m]) == EXIT_OK
            outs.append((trained / "pseudo_gt.csv").read_bytes())
        assert outs[0] != outs[1]

    def test_dump_cams(self, data, trained):
        assert main(["pseudogt", *small_args(data, trained), "--dump-cams", "1"]) == EXIT_OK
        assert list((trained / "cams").glob("*.tnsr")) and list((trained / "cams").glob("*.pgm"))

    def test_fallback_rows_flagged(self, data, trained, tmp_path):
        # empty selection: every click falls back
        out = tmp_path / "o"
        out.mkdir()
        (out / "model.ckpt").write_bytes((trained / "model.ckpt").read_bytes())
        P.save_selected(out / "selected.csv", [])
        assert main(["pseudogt", *small_args(data, out)]) == EXIT_OK
        items = load_pseudo_gt(out / "pseudo_gt.csv")
        assert items and all(p.fallback_used for p in items)
        assert all(line.endswith(",1") for line in (out / "pseudo_gt.csv").read_text().splitlines()[1:])

    def test_gradient_scale_changes_nothing(self, data, trained, tmp_path):
        base = P.build_config({"data_dir": str(data), "out_dir": str(trained), "input_side": "16", "layers": SMALL_NET})
        a = P.make_pseudo_gt(base)
        b = P.make_pseudo_gt(base.with_(gradient_scale=7.3))
        assert [p.box for p in a] == [p.box for p in b]

    def test_image_label_mode(self, data, tmp_path):
        args = small_args(data, tmp_path, "--weak-info", "image_label")
        assert main(["pipeline", *args]) == EXIT_OK
        items = load_pseudo_gt(tmp_path / "pseudo_gt.csv")
        labels = sum(len(v) for v in P.train_dataset(P.build_config({"data_dir": str(data)})).labels.values())
        assert len(items) == labels and all(p.source_click is None for p in items)


class TestEval:
    def test_perfect(self, tmp_path, capsys):
        gts = [GroundTruth("a", 0, Box(0, 0, 10, 10)), GroundTruth("a", 1, Box(20, 0, 30, 10))]
        save_ground_truth(tmp_path / "gt.csv", gts)
        save_pseudo_gt(tmp_path / "p.csv", [PseudoGroundTruth(g.box, g.class_id, g.image_id, None) for g in gts])
        code = main(["eval", "--pred", str(tmp_path / "p.csv"), "--gt", str(tmp_path / "gt.csv"), "--out-dir", str(tmp_path / "o")])
        assert code == EXIT_OK
        assert "corloc: 1.0000" in capsys.readouterr().out
        assert (tmp_path / "o" / "report.csv").read_text().splitlines()[-1] == "corloc,mean,1.000000"

    def test_empty_predictions(self, tmp_path):
        save_ground_truth(tmp_path / "gt.csv", [GroundTruth("a", 0, Box(0, 0, 10, 10))])
        save_pseudo_gt(tmp_path / "p.csv", [])
        cl, _ = P.evaluate_files(tmp_path / "p.csv", tmp_path / "gt.csv")
        assert cl.mean == 0.0 and cl.per_class == {}

    def test_hand_scenario(self, tmp_path):
        gts = [GroundTruth("a", 0, Box(0, 0, 10, 10)), GroundTruth("b", 0, Box(0, 0, 10, 10)), GroundTruth("a", 1, Box(20, 0, 30, 10))]
        preds = [(Box(0, 0, 10, 6), 0, "a"), (Box(0, 0, 10, 4), 0, "b"), (Box(20, 0, 30, 10), 1, "a")]
        save_ground_truth(tmp_path / "gt.csv", gts)
        save_pseudo_gt(tmp_path / "p.csv", [PseudoGroundTruth(b, c, i, None) for b, c, i in preds])
        cl, aps = P.evaluate_files(tmp_path / "p.csv", tmp_path / "gt.csv", tmp_path / "r")
        assert aps is None and cl.per_class == {0: 0.5, 1: 1.0}
        assert "class 0: 0.5000 (1/2)" in (tmp_path / "r.txt").read_text()

    def test_detections_get_map(self, tmp_path):
        from clickscale.evaluation import Detection, save_detections

        gts = [GroundTruth("a", 0, Box(0, 0, 10, 10)), GroundTruth("b", 0, Box(0, 0, 10, 10))]
        save_ground_truth(tmp_path / "gt.csv", gts)
        save_detections(
            tmp_path / "d.csv",
            [Detection("a", 0, Box(0, 0, 10, 10), 0.9), Detection("a", 0, Box(50, 50, 60, 60), 0.8), Detection("b", 0, Box(0, 0, 10, 10), 0.7)],
        )
        _, aps = P.evaluate_files(tmp_path / "d.csv", tmp_path / "gt.csv")
        assert abs(aps[0] - 28 / 33) <= 1e-12

    def test_unknown_class_is_data_error(self, tmp_path):
        save_ground_truth(tmp_path / "gt.csv", [GroundTruth("a", 0, Box(0, 0, 10, 10))])
        save_pseudo_gt(tmp_path / "p.csv", [PseudoGroundTruth(Box(0, 0, 1, 1), 7, "a", None)])
        assert main(["eval", "--pred", str(tmp_path / "p.csv"), "--gt", str(tmp_path / "gt.csv"), "--out-dir", str(tmp_path)]) == EXIT_DATA


class TestPipeline:
    def test_equals_stage_composition(self, data, tmp_path):
        assert main(["pipeline", *small_args(data, tmp_path / "all")]) == EXIT_OK
        for stage in ("select", "train", "pseudogt", "eval"):
            assert main([stage, *small_args(data, tmp_path / "steps")]) == EXIT_OK
        assert tree_bytes(tmp_path / "all") == tree_bytes(tmp_path / "steps")

    def test_worker_count_invariant(self, data, tmp_path):
        for w in ("1", "3"):
            assert main(["pipeline", *small_args(data, tmp_path / w, "--worker-count", w)]) == EXIT_OK
        assert tree_bytes(tmp_path / "1") == tree_bytes(tmp_path / "3")


class TestConfig:
    def test_file_and_override(self, data, tmp_path):
        (tmp_path / "c.cfg").write_text(f"# comment\ndata_dir = {data}\ntop_n=3\nt_iou = 0.5\n")
        args = ["select", "--config", str(tmp_path / "c.cfg"), "--top-n", "2", "--out-dir", str(tmp_path / "o"), "--window-stride", "0.3"]
        assert main(args) == EXIT_OK
        rows = P.load_selected(tmp_path / "o" / "selected.csv")
        assert rows and max(r.rank for r in rows) == 1

    def test_build_config(self):
        cfg = P.build_config({"top_n": "3", "t_cam_low": "60", "net_seed": "9", "seed": "4", "window_scales": "0.5,1"})
        assert cfg.selection.top_n == 3 and cfg.thresholds.t_cam_low == 60.0
        assert cfg.network.seed == 9 and cfg.seed == 4 and cfg.window_scales == (0.5, 1.0)
        assert P.build_config({"seed": "4"}).network.seed == 4

    @pytest.mark.parametrize(
        "text",
        ["bogus=1\n", "no equals sign\n"],
    )
    def test_bad_file(self, tmp_path, text):
        (tmp_path / "c.cfg").write_text(text)
        assert main(["select", "--config", str(tmp_path / "c.cfg")]) == EXIT_USAGE

    @pytest.mark.parametrize(
        "flags",
        [["--gradient-layer", "conv9"], ["--cam-method", "cam"], ["--worker-count", "0"], ["--t-iou", "2"], ["--oracle-cam", "maybe"]],
    )
    def test_bad_values(self, flags):
        assert main(["select", *flags]) == EXIT_USAGE

    def test_unknown_flag(self):
        assert main(["select", "--nope", "1"]) == EXIT_USAGE

    def test_missing_config_file(self, tmp_path):
        assert main(["select", "--config", str(tmp_path / "none.cfg")]) == EXIT_USAGE

    def test_verbose_env(self, data, tmp_path, monkeypatch):
        monkeypatch.setenv("CLICKSCALE_VERBOSE", "1")
        assert main(["select", "--data-dir", str(data), "--out-dir", str(tmp_path), "--window-stride", "0.3"]) == EXIT_OK
