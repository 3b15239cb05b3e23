from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tracelens as tl
from tracelens.io import MAGIC
from util import build_f1, random_trace


def test_trace_round_trip_equality(tmp_path, f1):
    path = tmp_path / "f1.trace"
    tl.write_trace(f1, path)
    back = tl.read_trace(path)
    assert back == f1
    assert back.verdict is not None and back.verdict.passed
    assert back.attn.tobytes() == f1.attn.tobytes()
    assert back.layout.output_texts == ("the", "helmet")
    assert back.image_ref == "f1.png"


def test_trace_round_trip_preserves_l_max(tmp_path):
    trace = build_f1(l_max=0)
    path = tmp_path / "t.trace"
    tl.write_trace(trace, path)
    assert tl.read_trace(path).l_max == 0


def test_write_refuses_invalid_trace(tmp_path, f1):
    attn = f1.attn.copy()
    attn[1, 0, :] = 0.9
    bad = tl.AttentionTrace(f1.layout, f1.grid, attn)
    with pytest.raises(tl.ValidationFailedError):
        tl.write_trace(bad, tmp_path / "bad.trace")
    assert not (tmp_path / "bad.trace").exists()


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.trace"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(tl.MalformedPayloadError):
        tl.read_trace(path)


def test_read_rejects_unknown_version(tmp_path, f1):
    path = tmp_path / "v9.trace"
    tl.write_trace(f1, path)
    data = bytearray(path.read_bytes())
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(bytes(data[8:8 + hlen]).decode())
    header["version"] = 9
    new_header = (json.dumps(header, indent=2, sort_keys=True) + "\n").encode()
    path.write_bytes(bytes(data[:4]) + struct.pack("<I", len(new_header))
                     + new_header + bytes(data[8 + hlen:]))
    with pytest.raises(tl.UnsupportedVersionError):
        tl.read_trace(path)


def test_read_rejects_truncated_payload(tmp_path, f1):
    path = tmp_path / "cut.trace"
    tl.write_trace(f1, path)
    data = path.read_bytes()
    path.write_bytes(data[:-1])
    with pytest.raises(tl.MalformedPayloadError) as err:
        tl.read_trace(path)
    # the message names expected vs actual payload byte counts
    assert str(f1.attn.nbytes) in str(err.value)
    assert str(f1.attn.nbytes - 1) in str(err.value)


def test_read_rejects_truncated_header(tmp_path, f1):
    path = tmp_path / "cut.trace"
    tl.write_trace(f1, path)
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(tl.MalformedPayloadError):
        tl.read_trace(path)


def test_read_missing_file(tmp_path):
    with pytest.raises(tl.TraceParseError):
        tl.read_trace(tmp_path / "absent.trace")


def test_invalid_values_come_back_as_verdict_not_error(tmp_path, f1):
    path = tmp_path / "f1.trace"
    tl.write_trace(f1, path)
    data = bytearray(path.read_bytes())
    # overwrite one payload float with 9.0: entry range + row mass break
    struct.pack_into("<f", data, len(data) - 4, 9.0)
    path.write_bytes(bytes(data))
    back = tl.read_trace(path)
    assert back.verdict is not None
    assert not back.verdict.passed


@given(seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_round_trip_random_traces(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    trace = random_trace(rng, max_steps=5, max_layers=3, max_rows=4, max_cols=4)
    path = tmp_path_factory.mktemp("rt") / "t.trace"
    tl.write_trace(trace, path)
    back = tl.read_trace(path)
    assert back == trace
    assert hashlib.sha256(back.attn.tobytes()).hexdigest() == \
        hashlib.sha256(trace.attn.tobytes()).hexdigest()


def test_label_manifest_round_trip(tmp_path):
    records = [
        tl.LabelRecord("a.trace", "helmet", ("helmet",), (0, 0, 50, 50)),
        tl.LabelRecord("b.trace", "base ball", ("base", "ball"), (10, 10, 90, 90)),
    ]
    path = tmp_path / "labels.json"
    tl.write_label_manifest(records, path)
    assert tl.read_label_manifest(path) == records


def test_load_instances_resolves_and_validates(tmp_path, f1):
    tl.write_trace(f1, tmp_path / "f1.trace")
    tl.write_label_manifest(
        [tl.LabelRecord("f1.trace", "helmet", ("helmet",), (0, 50, 50, 100))],
        tmp_path / "labels.json",
    )
    instances = tl.load_instances(tmp_path / "labels.json")
    assert len(instances) == 1
    assert instances[0].gt_tokens == frozenset({2})
    assert tl.layer_recall(instances[0], 0) == 1.0


def test_load_instances_rejects_missing_trace(tmp_path):
    tl.write_label_manifest(
        [tl.LabelRecord("ghost.trace", "x", ("x",), (0, 0, 10, 10))],
        tmp_path / "labels.json",
    )
    with pytest.raises(tl.TraceParseError):
        tl.load_instances(tmp_path / "labels.json")


def test_load_instances_rejects_invalid_trace(tmp_path, f1):
    path = tmp_path / "f1.trace"
    tl.write_trace(f1, path)
    data = bytearray(path.read_bytes())
    struct.pack_into("<f", data, len(data) - 4, 9.0)
    path.write_bytes(bytes(data))
    tl.write_label_manifest(
        [tl.LabelRecord("f1.trace", "helmet", ("helmet",), (0, 50, 50, 100))],
        tmp_path / "labels.json",
    )
    with pytest.raises(tl.ValidationFailedError):
        tl.load_instances(tmp_path / "labels.json")


def test_trace_dump_round_trip(tmp_path, f1):
    config = tl.TracerConfig(layer=0, tau_v=0.5)
    key, vmap = tl.run_tracer(f1, config)
    dump = tl.TraceDump(
        image_ref=f1.image_ref, grid=f1.grid, config=config, key=key, vmap=vmap
    )
    path = tmp_path / "dump.json"
    tl.write_trace_dump(dump, path)
    back = tl.read_trace_dump(path)
    assert back.config == config
    assert back.grid == f1.grid
    assert back.key.selected == key.selected
    assert back.key.variances == pytest.approx(key.variances, abs=0)
    assert back.vmap.selected == vmap.selected
    assert back.vmap.scores == pytest.approx(vmap.scores, abs=0)
    assert back.vmap.alignment == pytest.approx(vmap.alignment, abs=0)


def test_trace_dump_rejects_garbage(tmp_path):
    path = tmp_path / "dump.json"
    path.write_text("{\"version\": 1, \"grid\": {}}")
    with pytest.raises(tl.MalformedPayloadError):
        tl.read_trace_dump(path)
    path.write_text("not json at all")
    with pytest.raises(tl.TraceParseError):
        tl.read_trace_dump(path)


def test_crop_manifest_preserves_flags(tmp_path):
    manifest = tl.CropManifest(
        image_ref="x.png",
        regions=(),
        noise=frozenset({1, 2}),
        provenance=tl.Provenance(tracer=None, region=tl.RegionConfig()),
        noise_only=True,
    )
    path = tmp_path / "m.json"
    tl.write_crop_manifest(manifest, path)
    back = tl.read_crop_manifest(path)
    assert back == manifest
    assert back.noise_only


def test_sweep_report_and_table(tmp_path):
    rows = tl.drift_sweep(tl.SynthSpec(seed=2), [0.0], n_seeds=1)
    path = tmp_path / "sweep.json"
    tl.write_sweep_report(rows, path)
    obj = json.loads(path.read_text())
    assert obj["rows"][0]["drift"] == 0.0

    from tracelens.io import render_sweep_table

    table = render_sweep_table(rows)
    lines = table.strip().split("\n")
    assert lines[0].startswith("drift\t")
    assert len(lines) == 2
    assert render_sweep_table([]) == ""


def test_pgm_bytes(tmp_path):
    path = tmp_path / "a.pgm"
    tl.write_pgm(np.array([[0.0, 1.0], [0.5, 0.25]]), path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert data[-4:] == bytes([0, 255, 128, 64])


def test_pgm_constant_field_is_mid_gray(tmp_path):
    path = tmp_path / "flat.pgm"
    tl.write_pgm(np.full((2, 3), 0.7), path)
    assert path.read_bytes()[-6:] == bytes([128] * 6)


def test_pgm_rejects_bad_shape(tmp_path):
    with pytest.raises(tl.RejectedInputError):
        tl.write_pgm(np.zeros(4), tmp_path / "x.pgm")


def test_magic_prefix_present(tmp_path, f1):
    path = tmp_path / "f1.trace"
    tl.write_trace(f1, path)
    assert path.read_bytes()[:4] == MAGIC
