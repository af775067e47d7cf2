import struct

import numpy as np
import pytest

from condensenext import training
from condensenext.arch import build, default_spec, forward
from condensenext.checkpoint import (CheckpointMeta, load_checkpoint, read_checkpoint,
                                     save_checkpoint, write_checkpoint)
from condensenext.errors import ChecksumError, FormatError, MagicError, VersionError
from condensenext.tensor import Tensor, no_grad

from .conftest import two_stage_spec


def _trained_like(spec, seed=3):
    """A graph with non-initial weights, statistics and masks."""
    g = build(spec, seed=seed)
    r = np.random.default_rng(seed)
    for _, t in g.parameters():
        t.data = t.data + r.normal(0, 0.01, t.shape).astype(np.float32)
    for _, a in g.buffers():
        a[...] = r.uniform(0.5, 1.5, a.shape).astype(np.float32)
    training.condense(g, 1)
    for n in g.lgc_nodes():
        w = n.params["weight"]
        w.data = w.data * g.param_masks()[id(w)]
    return g


def _outputs(g, x):
    with no_grad():
        return forward(g, Tensor(x), training=False).data


def test_round_trip_bit_exact(rng):
    g = _trained_like(two_stage_spec())
    meta = CheckpointMeta(class_counts=tuple(range(10)), epoch=7, extra={"seed": 5})
    g2, m2 = load_checkpoint(save_checkpoint(g, meta))
    for (n1, t1), (n2, t2) in zip(g.parameters(), g2.parameters()):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)
    for (_, a1), (_, a2) in zip(g.buffers(), g2.buffers()):
        assert np.array_equal(a1, a2)
    for a, b in zip(g.lgc_nodes(), g2.lgc_nodes()):
        assert np.array_equal(a.lgc.mask, b.lgc.mask) and a.lgc.stage_index == b.lgc.stage_index
    assert m2.class_counts == meta.class_counts and m2.epoch == 7 and m2.extra == {"seed": "5"}
    assert m2.mean == meta.mean and m2.std == meta.std
    x = rng.normal(size=(4, 3, 32, 32)).astype(np.float32)
    assert np.array_equal(_outputs(g, x), _outputs(g2, x))


def test_file_helpers(tmp_path):
    g = _trained_like(two_stage_spec("condensenet_baseline"))
    path = tmp_path / "m.cnx"
    size = write_checkpoint(path, g)
    assert size == path.stat().st_size
    g2, _ = read_checkpoint(path)
    assert g2.spec == g.spec


def _payload_size(blob):
    # walk the header to the first block length
    pos = 6
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    for _ in range(n):
        (kl,) = struct.unpack_from("<H", blob, pos)
        pos += 2 + kl
        (vl,) = struct.unpack_from("<I", blob, pos)
        pos += 4 + vl
    return struct.unpack_from("<Q", blob, pos)[0], pos


def test_payload_is_four_bytes_per_live_parameter():
    from condensenext.analysis import count_costs
    g = _trained_like(two_stage_spec())
    size, _ = _payload_size(save_checkpoint(g))
    assert size == 4 * count_costs(g, masks="current").total_params


def test_fully_condensed_default_model_under_3mb():
    g = build(default_spec())
    for stage in (1, 2, 3):
        training.condense(g, stage)
    blob = save_checkpoint(g)
    assert len(blob) < 3 * 1024 * 1024
    size, _ = _payload_size(blob)
    assert size < 1024 * 1024


def test_optimizer_velocity_round_trip():
    g = _trained_like(two_stage_spec())
    r = np.random.default_rng(0)
    masks = g.param_masks()
    vel = []
    for _, t in g.parameters():
        v = r.normal(size=t.shape).astype(np.float32)
        m = masks.get(id(t))
        vel.append(v if m is None else v * m)
    _, meta = load_checkpoint(save_checkpoint(g, CheckpointMeta(velocity=vel)))
    assert all(np.array_equal(a, b) for a, b in zip(vel, meta.velocity))
    _, meta = load_checkpoint(save_checkpoint(g))
    assert meta.velocity is None


@pytest.fixture(scope="module")
def blob():
    return save_checkpoint(_trained_like(two_stage_spec()))


def test_bad_magic(blob):
    with pytest.raises(MagicError):
        load_checkpoint(b"XXXX" + blob[4:])


def test_bad_version(blob):
    with pytest.raises(VersionError):
        load_checkpoint(blob[:4] + struct.pack("<H", 9) + blob[6:])


def test_flipped_payload_byte_fails_checksum(blob):
    _, pos = _payload_size(blob)
    bad = bytearray(blob)
    bad[pos + 8 + 100] ^= 0x01
    with pytest.raises(ChecksumError):
        load_checkpoint(bytes(bad))


def test_flipped_length_byte_is_a_format_error(blob):
    bad = bytearray(blob)
    bad[11] ^= 0x40  # high byte of the first header key length
    with pytest.raises(FormatError):
        load_checkpoint(bytes(bad))


@pytest.mark.parametrize("cut", [3, 5, 40, 0.5, 0.99])
def test_truncation_reports_expected_and_found(blob, cut):
    n = cut if isinstance(cut, int) else int(len(blob) * cut)
    with pytest.raises(FormatError) as info:
        load_checkpoint(blob[:n])
    if n >= 6:
        assert "expected" in str(info.value)


def test_trailing_bytes_rejected(blob):
    with pytest.raises(FormatError):
        load_checkpoint(blob + b"\0")
