"""Descriptor container: lossless round-trip, checksums, rebuild fidelity."""

import numpy as np
import pytest

from hrnas import tensor as T
from hrnas.descriptor import (
    DescriptorChecksumError,
    DescriptorError,
    DescriptorVersionError,
    export_descriptor,
    import_descriptor,
    rebuild_network,
)
from hrnas.search import SearchConfig, search
from hrnas.supernet import BranchSpec, SupernetConfig, TransformerSettings
from hrnas.tensor import Tensor
from hrnas.toytasks import make_dataset


def small_config():
    return SupernetConfig(
        parallel_modules=[
            [BranchSpec(blocks=1, width=4)],
            [BranchSpec(blocks=1, width=4), BranchSpec(blocks=1, width=8)],
        ],
        stem_channels=4,
        input_channels=3,
        expansion=1,
        transformer=TransformerSettings(tokens=2, proj_size=2, attn_dim=4),
        head="dense",
    )


def small_task():
    return {
        "kind": "segmentation", "hw": 16, "classes": 3,
        "train_count": 16, "val_count": 8, "seed": 0,
    }


@pytest.fixture(scope="module")
def searched(tmp_path_factory):
    cfg = SearchConfig(lam=5e-5, epochs=4, prune_every=2, lr=0.05,
                       batch_size=8, recalibration_batches=2, seed=3)
    result = search(small_config(), cfg, small_task())
    path = tmp_path_factory.mktemp("desc") / "descriptor.hrnd"
    export_descriptor(result, path)
    return result, path


class TestRoundTrip:
    def test_forward_bit_identical_after_rebuild(self, searched):
        result, path = searched
        desc = import_descriptor(path)
        net = rebuild_network(desc)
        val = make_dataset(small_task(), "val")
        x = Tensor(val.images[:4])
        result.net.eval()
        with T.no_grad():
            original = result.net.forward(x).data
            rebuilt = net.forward(x).data
        np.testing.assert_array_equal(rebuilt, original)

    def test_export_is_deterministic(self, searched, tmp_path):
        result, path = searched
        again = tmp_path / "again.hrnd"
        export_descriptor(result, again)
        assert again.read_bytes() == path.read_bytes()

    def test_header_contents(self, searched):
        _, path = searched
        desc = import_descriptor(path)
        h = desc.header
        assert h["format_version"] == 1
        assert h["seed"] == 3
        assert {"supernet", "search", "task"} <= set(h["config"])
        assert len(h["log"]) == 4
        assert h["final_metrics"]["kind"] == "segmentation"

    def test_survival_masks_match_network(self, searched):
        result, path = searched
        desc = import_descriptor(path)
        blocks = dict(result.net.named_blocks())
        for rec in desc.header["blocks"]:
            blk = blocks[rec["path"]]
            assert rec["kind"] == (blk.degenerate or "normal")
            if blk.transformer is not None:
                assert rec["alive_tokens"] == blk.transformer.alive


class TestValidation:
    def test_truncated_file_fails_checksum(self, searched, tmp_path):
        _, path = searched
        corrupt = tmp_path / "trunc.hrnd"
        corrupt.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(DescriptorError):
            import_descriptor(corrupt)

    def test_flipped_payload_byte_fails_checksum(self, searched, tmp_path):
        _, path = searched
        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0xFF
        corrupt = tmp_path / "flip.hrnd"
        corrupt.write_bytes(bytes(raw))
        with pytest.raises(DescriptorChecksumError):
            import_descriptor(corrupt)

    def test_wrong_version_rejected(self, searched, tmp_path):
        import hashlib
        import struct

        _, path = searched
        raw = bytearray(path.read_bytes()[:-32])
        raw[4:8] = struct.pack("<I", 99)
        raw += hashlib.sha256(bytes(raw)).digest()
        corrupt = tmp_path / "ver.hrnd"
        corrupt.write_bytes(bytes(raw))
        with pytest.raises(DescriptorVersionError):
            import_descriptor(corrupt)


class TestDegenerateBlocks:
    def test_fully_degenerate_blocks_round_trip(self, tmp_path):
        cfg = SearchConfig(lam=5e-5, epochs=2, prune_every=1, lr=0.05,
                           batch_size=8, recalibration_batches=2, seed=4)
        result = search(small_config(), cfg, small_task())
        # force-degenerate one block, then re-export
        blk = result.net.named_blocks()[0][1]
        if blk.degenerate is None:
            blk.prune(blk.unit_kinds())
        result.final_metrics = {"kind": "segmentation", "miou": 0.0, "pixel_accuracy": 0.0}
        path = tmp_path / "degen.hrnd"
        export_descriptor(result, path)
        desc = import_descriptor(path)
        kinds = {rec["path"]: rec["kind"] for rec in desc.header["blocks"]}
        assert kinds[blk.path] in ("identity", "zero")
        net = rebuild_network(desc)
        x = Tensor(make_dataset(small_task(), "val").images[:2])
        with T.no_grad():
            out = net.forward(x)
        assert np.isfinite(out.data).all()
