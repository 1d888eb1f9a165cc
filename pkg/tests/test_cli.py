import json

import numpy as np
import pytest

from sgvit.cli import EXIT_DATA, EXIT_USAGE, bench, infer_image, main
from sgvit.evaluation import ImageOutputs
from sgvit.model import ModelConfig, SceneGraphViT
from sgvit.scenes import PREDICATES, category_names, rasterize, sample_scene
from sgvit.text_queries import Vocabulary

TINY = ["--dim", "16", "--layers", "1", "--heads", "2", "--m", "4", "--k", "6",
        "--batch_size", "2", "--eval_images", "4"]


def _table(text):
    rows = [ln.split() for ln in text.splitlines()[1:] if ln and not ln.startswith("wrote")]
    return {" ".join(r[:-1]): float(r[-1]) for r in rows}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(d), "--scenes", "100", "--seed", "4"]) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", "--data", str(data), "--out", str(out), "--steps", "4", "--warmup", "1",
            "--eval_interval", "2", *TINY]
    assert main(args) == 0
    return out / "last.sgv"


def test_gen_data_counts_and_frequency_table(data, capsys, tmp_path):
    n = sum(len((data / f"{s}.jsonl").read_text().splitlines()) for s in ("train", "val", "test"))
    assert n == 100
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--scenes", "100", "--seed", "4"]) == 0
    table = _table(capsys.readouterr().out)
    assert set(table) <= set(PREDICATES)
    assert abs(sum(table.values()) - 1) < 1e-5          # printed to 6 decimals
    for f in ("train.jsonl", "val.jsonl", "test.jsonl", "meta.json"):
        assert (tmp_path / "x" / f).read_bytes() == (data / f).read_bytes()


def test_gen_data_refuses_existing_output(data, tmp_path):
    before = (data / "train.jsonl").read_bytes()
    assert main(["gen-data", "--out", str(data), "--scenes", "40"]) == EXIT_USAGE
    assert (data / "train.jsonl").read_bytes() == before
    assert main(["gen-data", "--out", str(tmp_path / "y"), "--variant", "nope"]) == EXIT_USAGE


def test_train_zero_steps_and_csv_rows(data, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "a"), "--steps", "0",
                 "--warmup", "0", "--eval_interval", "1", *TINY]) == 0
    assert [p.name for p in sorted((tmp_path / "a").glob("ckpt_*"))] == ["ckpt_000000.sgv"]
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "b"), "--steps", "3",
                 "--warmup", "1", "--eval_interval", "3", *TINY]) == 0
    assert len((tmp_path / "b" / "loss.csv").read_text().splitlines()) == 3 + 1


def test_train_surfaces_errors_before_step_zero(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "o"),
                 "--steps", "2", "--warmup", "1", "--eval_interval", "1"]) == EXIT_DATA
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--steps", "2",
                 "--warmup", "5", "--eval_interval", "1"]) == EXIT_USAGE
    assert not (tmp_path / "o" / "loss.csv").exists()


def test_eval_oracle_gives_perfect_recall(data, tmp_path, capsys):
    assert main(["eval", "--oracle", "--data", str(data), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    # at most 5 objects per scene, so K = 20 pairs covers every GT triplet
    for metric in ("R@K", "mR@K"):
        assert rep[metric]["constrained@20"] == rep[metric]["unconstrained@20"] == 1.0


def test_eval_is_deterministic_and_constrained_below_unconstrained(data, ckpt, tmp_path):
    for name in ("a", "b"):
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / name)]) == 0
    for f in ("report.json", "report.csv", "predictions.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    for metric in ("R@K", "mR@K"):
        for name, v in rep[metric].items():
            if name.startswith("constrained"):
                assert v <= rep[metric]["un" + name] + 1e-12


def test_eval_warns_on_oov_queries(data, ckpt, tmp_path, caplog):
    q = tmp_path / "obj.txt"
    q.write_text("zorblax quux\nred circle\n")
    with caplog.at_level("WARNING", logger="sgvit"):
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "o"),
                     "--limit", "3", "--queries-objects", str(q)]) == 0
    assert "zorblax" in caplog.text


def _infer(ckpt, scene, tmp_path, *extra):
    out = tmp_path / "pred.jsonl"
    assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(scene), "--out", str(out), *extra]) == 0
    return [json.loads(ln) for ln in out.read_text().splitlines()]


def test_infer_top_larger_than_available(data, ckpt, tmp_path):
    scene = tmp_path / "s.jsonl"
    scene.write_text((data / "test.jsonl").read_text().splitlines()[0] + "\n")
    rows = _infer(ckpt, scene, tmp_path, "--top", "1000", "--threshold", "0")
    trips = [r for r in rows if r["kind"] == "triplet"]
    assert len(trips) == 6                      # one per selected pair under the graph constraint
    assert len([r for r in rows if r["kind"] == "object"]) == 4


def test_infer_swapped_predicate_queries_permute_identities(data, ckpt, tmp_path):
    scene = tmp_path / "s.jsonl"
    scene.write_text("\n".join((data / "test.jsonl").read_text().splitlines()[:2]) + "\n")
    qa, qb = tmp_path / "a.txt", tmp_path / "b.txt"
    qa.write_text("left of\nabove\nlarger than\n")
    qb.write_text("above\nleft of\nlarger than\n")
    key = lambda r: (r["image"], r["subject"], r["object"], r["predicate"], round(r["score"], 6))  # noqa: E731
    args = ("--top", "1000", "--threshold", "0", "--graph-constrained", "false")
    a = {key(r) for r in _infer(ckpt, scene, tmp_path, *args, "--queries-predicates", str(qa)) if r["kind"] == "triplet"}
    b = {key(r) for r in _infer(ckpt, scene, tmp_path, *args, "--queries-predicates", str(qb)) if r["kind"] == "triplet"}
    assert a and a == b


def test_single_object_scene_has_no_relationship_triplets():
    # four selected tokens; only token 10 is a confident object
    img = ImageOutputs(instances=np.array([10, 20, 30, 40]),
                       pairs=np.array([[10, 20], [20, 10], [30, 40], [10, 30]]),
                       instance_scores=np.array([6.0, -6.0, -6.0, -6.0]), pair_scores=np.zeros(4),
                       object_logits=np.full((4, 2), -6.0) + np.array([[12.0, 0.0], [0, 0], [0, 0], [0, 0]]),
                       predicate_logits=np.zeros((4, 2)), boxes=np.full((4, 4), 0.2))
    dets, preds = infer_image(img, ["red circle", "blue square"], ["left of", "right of"], 10, 0.3, True)
    assert [d["token"] for d in dets] == [10] and dets[0]["category"] == "red circle"
    assert preds == []


def test_infer_bad_scene_reports_line(data, ckpt, tmp_path, capsys):
    scene = tmp_path / "bad.jsonl"
    scene.write_text((data / "test.jsonl").read_text().splitlines()[0] + "\n{not json\n")
    assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(scene)]) == EXIT_DATA
    assert "bad.jsonl:2:" in capsys.readouterr().err
    empty = tmp_path / "q.txt"
    empty.write_text("\n")
    assert main(["infer", "--checkpoint", str(ckpt), "--scene", str(scene),
                 "--queries-objects", str(empty)]) == EXIT_DATA


def test_infer_accepts_image_array(ckpt, tmp_path):
    arr = tmp_path / "img.npy"
    np.save(arr, rasterize(sample_scene(3)))
    rows = _infer(ckpt, arr, tmp_path, "--top", "2", "--threshold", "0")
    assert len([r for r in rows if r["kind"] == "triplet"]) == 2


def test_bench_rows(tmp_path, capsys):
    assert main(["bench", "--k", "0,4,12", "--m", "4", "--trials", "5", "--out", str(tmp_path / "b.csv")]) == 0
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "k,trials,median_ms,pair_count,relative_speed,pair_reduction"
    rows = [dict(zip(lines[0].split(","), ln.split(","))) for ln in lines[1:]]
    assert [int(r["k"]) for r in rows] == [0, 4, 12]
    assert float(rows[0]["relative_speed"]) == 1.0
    assert [int(r["pair_count"]) for r in rows] == [0, 4, 12]
    assert all(int(r["trials"]) == 5 for r in rows)
    assert float(rows[2]["pair_reduction"]) == pytest.approx(1 - (12 + 4) / 64 ** 2, abs=1e-6)


def test_bench_refusals():
    assert main(["bench", "--trials", "4"]) == EXIT_USAGE
    assert main(["bench", "--k", "13", "--m", "4", "--trials", "5"]) == EXIT_USAGE


def test_bench_always_times_detection_only_baseline():
    model = SceneGraphViT(ModelConfig(seed=0), vocab=Vocabulary())
    images = np.stack([rasterize(sample_scene(s)) for s in range(2)])
    rows = bench(model, images, [6], 4, 5, category_names()[:3], list(PREDICATES)[:2], warmup=1)
    assert [r["k"] for r in rows] == [0, 6] and rows[0]["relative_speed"] == 1.0


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == EXIT_USAGE
    assert main(["eval", "--data", "x", "--out", "y"]) == EXIT_USAGE
