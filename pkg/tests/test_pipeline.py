import json
import shutil

import numpy as np
import pytest

from weakcap import pipeline, synth
from weakcap.config import load_config
from weakcap.corpusio import read_conllu
from weakcap.errors import IngestError
from weakcap.grounding import read_feature_map


@pytest.fixture
def toy_copy(toy, tmp_path):
    dst = tmp_path / "data"
    shutil.copytree(toy, dst)
    return dst


def test_toy_shape(toy):
    assert len(read_conllu(toy / "corpus.conllu")) == 60
    assert len((toy / "annotations.tsv").read_text().splitlines()) == 30
    assert len((toy / "val_videos.txt").read_text().split()) == 10
    assert len(list((toy / "features").glob("*.wcgf"))) == 40
    stream, fmap = read_feature_map(toy / "features" / "vid000.o.wcfm")
    assert stream == "o" and fmap.shape == (5, 24)


def test_toy_regions_are_aligned(toy):
    """The action region and the subject region sit at the same place in the two streams."""
    truth = {r["video_id"]: r["scene"] for r in map(json.loads, (toy / "truth.jsonl").read_text().splitlines())}
    for vid in sorted(truth)[:10]:
        _, fo = read_feature_map(toy / "features" / f"{vid}.o.wcfm")
        _, fa = read_feature_map(toy / "features" / f"{vid}.a.wcfm")
        act_row = int(np.argmax(np.linalg.norm(fa, axis=1)))
        assert np.linalg.norm(fo[act_row]) > 4.0


def test_ingest_filters_triplets(toy):
    data = pipeline.ingest(load_config(toy / "toy.cfg"))
    concepts = set(data.vocab.objects) | set(data.vocab.actions)
    assert data.triplets
    for t in data.triplets:
        assert set(t.head.lemmas) <= concepts and set(t.tail.lemmas) <= concepts
    # the object relation is not a word; its embedding starts at zero and is learned
    assert data.missing_embeddings == ["obj"]


def test_load_videos(toy):
    cfg = load_config(toy / "toy.cfg")
    vocab = pipeline.ingest(cfg).vocab
    train, val = pipeline.load_videos(cfg, vocab)
    assert len(train) == 30 and len(val) == 10
    assert all(v.annotation is not None for v in train)


def test_overlap_between_splits_is_an_error(toy_copy):
    cfg = load_config(toy_copy / "toy.cfg")
    first = (toy_copy / "annotations.tsv").read_text().split("\t")[0]
    with open(toy_copy / "val_videos.txt", "a") as f:
        f.write(first + "\n")
    with pytest.raises(IngestError):
        pipeline.load_videos(cfg, pipeline.ingest(cfg).vocab)


def test_missing_feature_file(toy_copy):
    cfg = load_config(toy_copy / "toy.cfg")
    (toy_copy / "features" / "vid000.a.wcfm").unlink()
    with pytest.raises(IngestError):
        pipeline.load_video(cfg, "vid000")


def test_extra_annotation_is_ignored(toy_copy, caplog):
    cfg = load_config(toy_copy / "toy.cfg")
    lines = (toy_copy / "annotations.tsv").read_text().splitlines()
    vid, lemma, stream = lines[0].split("\t")
    lines.append(f"{vid}\tdog\to")
    (toy_copy / "annotations.tsv").write_text("\n".join(lines) + "\n")
    train, _ = pipeline.load_videos(cfg, pipeline.ingest(cfg).vocab)
    assert len(train) == 30
    first = next(v for v in train if v.video_id == vid)
    assert first.annotation.lemmas == (lemma,)
    assert "extra annotation" in caplog.text


def test_non_vocabulary_annotation_skipped(toy_copy, caplog):
    cfg = load_config(toy_copy / "toy.cfg")
    lines = (toy_copy / "annotations.tsv").read_text().splitlines()
    vid = lines[0].split("\t")[0]
    lines[0] = f"{vid}\tunicorn\to"
    (toy_copy / "annotations.tsv").write_text("\n".join(lines) + "\n")
    train, _ = pipeline.load_videos(cfg, pipeline.ingest(cfg).vocab)
    assert len(train) == 29 and vid not in {v.video_id for v in train}
    assert "not a vocabulary concept" in caplog.text


def test_planted_kg_is_seeded():
    a, names = synth.planted_kg(3)
    b, _ = synth.planted_kg(3)
    assert a == b and len(a) == 200 and len(names) == 30
    assert len({t.relation for t in a}) == 5
    train, test = synth.split(a, 0.8, 0)
    assert len(train) == 160 and len(test) == 40
    assert sorted(train + test, key=str) == sorted(a, key=str)
