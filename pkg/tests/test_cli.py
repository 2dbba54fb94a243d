import json
from pathlib import Path

import numpy as np
import pytest

from trackgraph import cli, learn, synthworld as sw, trackman as tm
from trackgraph.assocgraph import ModelConfig


def run(argv):
    return cli.main(argv)


def test_generate_single_file(tmp_path):
    out = tmp_path / "world.det.jsonl"
    code = run(["generate", "--seed", "7", "--frames", "10", "--objects", "3",
                "--out", str(out),
                "--override", "world.mask_grid=8", "--override",
                "world.appearance_dim=4"])
    assert code == 0
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 10
    gt_path = Path(str(out).replace(".det.jsonl", ".gt.jsonl"))
    assert gt_path.exists()
    stamp = json.loads(Path(str(out) + ".stamp.json").read_text())
    assert stamp["seed"] == 7 and stamp["config"]["world"]["mask_grid"] == 8


def test_generate_directory_with_sequences(tmp_path):
    out = tmp_path / "suite"
    code = run(["generate", "--seed", "3", "--sequences", "3", "--objects", "2",
                "--out", str(out), "--override", "world.mask_grid=6",
                "--override", "world.appearance_dim=3",
                "--override", "world.num_classes=3"])
    assert code == 0
    assert len(list(out.glob("*.det.jsonl"))) == 3
    assert len(list(out.glob("*.gt.jsonl"))) == 3
    assert (out / "stamp.json").exists()


def test_generate_reproducible(tmp_path):
    a = tmp_path / "a.det.jsonl"
    b = tmp_path / "b.det.jsonl"
    for out in (a, b):
        assert run(["generate", "--seed", "11", "--frames", "5", "--out",
                    str(out)]) == 0
    assert a.read_text() == b.read_text()


def train_tiny(tmp_path, extra_overrides=()):
    data = tmp_path / "data"
    assert run(["generate", "--seed", "5", "--sequences", "2", "--objects", "2",
                "--frames", "4", "--out", str(data),
                "--override", "world.mask_grid=6",
                "--override", "world.appearance_dim=3",
                "--override", "world.num_classes=3",
                "--override", "noise.false_positive_rate=0.2"]) == 0
    ckpt = tmp_path / "model.npz"
    argv = ["train", "--data", str(data), "--out", str(ckpt), "--seed", "1",
            "--override", "iterations=3", "--override", "D=8",
            "--override", "T=4", "--override", "batch_size=1"]
    argv += list(extra_overrides)
    assert run(argv) == 0
    return data, ckpt


def test_train_track_eval_pipeline(tmp_path):
    data, ckpt = train_tiny(tmp_path)
    assert ckpt.exists()
    csv = ckpt.with_suffix(".losses.csv")
    text = csv.read_text().splitlines()
    assert text[0].startswith("# stamp:")
    assert text[1] == "iteration,score,seg,match,init,total"
    assert len(text) == 2 + 3

    tracks = tmp_path / "tracks.json"
    det_file = sorted(data.glob("*.det.jsonl"))[0]
    assert run(["track", "--checkpoint", str(ckpt), "--detections", str(det_file),
                "--out", str(tracks)]) == 0
    blob = json.loads(tracks.read_text())
    assert "stamp" in blob and "tracks" in blob

    report = tmp_path / "report.json"
    gt_file = sorted(data.glob("*.gt.jsonl"))[0]
    render = tmp_path / "render"
    assert run(["eval", "--tracks", str(tracks), "--gt", str(gt_file),
                "--out", str(report), "--render", str(render)]) == 0
    payload = json.loads(report.read_text())
    assert "mean_map" in payload and "association_accuracy" in payload
    assert (render / "frame_000.ppm").read_bytes().startswith(b"P6")


def test_track_reproducible(tmp_path):
    data, ckpt = train_tiny(tmp_path)
    det_file = sorted(data.glob("*.det.jsonl"))[0]
    outs = []
    for name in ("t1.json", "t2.json"):
        out = tmp_path / name
        assert run(["track", "--checkpoint", str(ckpt), "--detections",
                    str(det_file), "--out", str(out)]) == 0
        blob = json.loads(out.read_text())
        del blob["stamp"]
        outs.append(json.dumps(blob, sort_keys=True))
    assert outs[0] == outs[1]


def test_usage_errors_exit_one(tmp_path):
    assert run(["bogus"]) == 1
    assert run(["ablate", "--name", "nonexistent", "--out", str(tmp_path)]) == 1
    assert run(["train", "--data", str(tmp_path), "--out", "x.npz",
                "--override", "unknown_key=1"]) in (1, 2)


def test_data_errors_exit_two(tmp_path):
    bad = tmp_path / "bad.det.jsonl"
    bad.write_text("{not json}\n")
    ckpt = tmp_path / "missing.npz"
    assert run(["track", "--checkpoint", str(ckpt), "--detections", str(bad),
                "--out", str(tmp_path / "o.json")]) == 2


def test_gradcheck_single_target():
    assert run(["gradcheck", "--target", "gate"]) == 0


def test_gradcheck_unknown_target():
    assert run(["gradcheck", "--target", "nonsense"]) == 1


def test_ablation_names_cover_reported_rows():
    expected = {"limited_gnn", "association_heuristic", "no_appearance",
                "const_variance", "scoring_heuristic", "simple_gate",
                "mlp_node_updates", "blocks_1", "blocks_3", "no_residual"}
    assert expected <= set(cli.ABLATIONS)
    for name, flags in cli.ABLATIONS.items():
        ModelConfig.from_dict({**ModelConfig().to_dict(), **flags})


def test_ablate_smoke(tmp_path):
    out = tmp_path / "abl"
    code = run(["ablate", "--name", "limited_gnn", "--out", str(out), "--seed", "2",
                "--override", "iterations=2", "--override", "train_sequences=2",
                "--override", "eval_sequences=1", "--override", "D=8",
                "--override", "T=3", "--override", "mask_grid=6",
                "--override", "appearance_dim=3", "--override", "num_classes=3",
                "--override", "batch_size=1"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert "mean_map" in report and report["stamp"]["config"]["name"] == "limited_gnn"
    model = learn.load_checkpoint(out / "model.npz")
    assert model.config.limited_gnn


def test_eval_zero_noise_oracle_model_perfect_map(tmp_path):
    # An oracle-matching model on a trivial single-object, zero-noise world:
    # force heads so the one detection always initializes and always matches.
    cfg = sw.WorldConfig(seed=2, frames=5, max_objects=1, num_classes=3,
                         appearance_dim=3, mask_grid=8, exit_prob=0.0,
                         entry_window=1)
    gt = sw.generate_sequence(cfg)
    det = sw.corrupt(gt, sw.NoiseConfig(), seed=3)
    model_config = ModelConfig(num_classes=3, embed_dim=8, appearance_dim=3,
                               mask_grid=8)
    model = tm.build_model(model_config, seed=0)
    model.params["match_head/w"].data[...] = 0.0
    model.params["match_head/b"].data[...] = 5.0
    # hand-built mask head: logit +10 inside the detection mask, -10 outside
    for name in model.params.names():
        if name.startswith("mask_head"):
            model.params[name].data[...] = 0.0
    model.params["mask_head/conv1/w"].data[0, 16 * 9 + 4] = 20.0
    model.params["mask_head/conv2/w"].data[0, 4] = 1.0
    model.params["mask_head/conv2/b"].data[...] = -10.0
    memory, _ = tm.run_sequence(det.frames, model)
    from trackgraph import evalkit as ek

    preds = ek.tracks_from_memory(memory, 3)
    gts = ek.tracks_from_gt(gt)
    # give the single surviving track the true class with high confidence
    assert len(preds) >= 1
    main = max(preds, key=lambda p: len(p.masks))
    main.class_id = gt.objects[0].class_id
    main.confidence = 1.0
    for p in preds:
        if p is not main:
            p.confidence = 0.0
    report = ek.evaluate(preds, gts)
    assert report.mean_map == pytest.approx(1.0)
