import numpy as np
import pytest
import torch

from hairmv.checkpoint import load_checkpoint, read_meta, save_checkpoint
from hairmv.codec import LatentCodec
from hairmv.config import DataConfig, GuidanceConfig, ModelConfig
from hairmv.data.forge import generate_dataset, parse_poses, view_poses
from hairmv.diffusion import build_schedule
from hairmv.errors import DataError, PrerequisiteError, ShapeError
from hairmv.inference import FrameSequence, HairTransferPipeline, contact_sheet, ddim_sample, write_frames
from hairmv.models import HairTransferModel
from hairmv.pose import poses_tensor
from hairmv.training import namespace_checksums
from helpers import wake

FAST = GuidanceConfig(cfg_scale=1.5, sampler_steps=3)


def _woken(seed, max_frames=24):
    torch.manual_seed(seed)
    return wake(HairTransferModel(ModelConfig(max_frames=max_frames)), seed, 0.05)


@pytest.fixture(scope="module")
def sample():
    return generate_dataset(DataConfig(identities=1, views=4, references=2, seed=2))[0]


@pytest.fixture(scope="module")
def pipe():
    return HairTransferPipeline(
        _woken(1, max_frames=6), LatentCodec(), build_schedule(), _woken(2), {"stage": "s3"}, {"stage": "bald"}, FAST
    )


def test_bald_convert_deterministic(pipe, sample):
    a = pipe.bald_convert(sample.source[0], sample.poses[0], seed=3)
    b = pipe.bald_convert(sample.source[0], sample.poses[0], seed=3)
    assert a.shape == sample.source[0].shape and a.dtype == np.uint8
    assert a.tobytes() == b.tobytes()
    assert pipe.bald_convert(sample.source[0], sample.poses[0], seed=4).tobytes() != a.tobytes()


def test_single_view_deterministic(pipe, sample):
    args = (sample.source[0], sample.references[0], sample.poses[1])
    a = pipe.transfer_single_view(*args, seed=5)
    assert a.tobytes() == pipe.transfer_single_view(*args, seed=5).tobytes()


def test_scale_one_is_pure_conditional(pipe, sample):
    m = pipe.model
    noise = torch.randn(1, 12, 16, 16, generator=torch.Generator().manual_seed(0))
    cond = pipe._latent(sample.bald[0])
    bank = m.extract_reference_features(pipe._latent(sample.references[0]))
    poses = poses_tensor(sample.poses[:1])
    g = GuidanceConfig(cfg_scale=1.0, sampler_steps=3)
    got = ddim_sample(m, pipe.schedule, noise, poses, g, cond=cond, bank=bank, null_bank=m.hair.null_bank(1))
    # same sampler with the null bank replaced by the real one: the guidance contrast vanishes
    same = ddim_sample(
        m, pipe.schedule, noise, poses, GuidanceConfig(cfg_scale=1.5, sampler_steps=3), cond=cond, bank=bank, null_bank=bank
    )
    assert torch.equal(got, same)


def test_temporal_off_matches_single_views(pipe, sample):
    poses = sample.poses[:3]
    bald = sample.bald[0]
    seq = pipe.transfer_multi_view(sample.source[0], sample.references[0], poses, seed=7, temporal=False, bald=bald)
    noise = pipe._noise(3, pipe.model, 7)
    for k, p in enumerate(poses):
        single = pipe.transfer_single_view(
            sample.source[0], sample.references[0], p, seed=7, bald=bald, noise=noise[k]
        )
        assert single.tobytes() == seq.frames[k].tobytes()


def test_multi_view_pose_passthrough_and_count(pipe, sample):
    poses = sample.poses[:4]
    seq = pipe.transfer_multi_view(sample.source[0], sample.references[0], poses, seed=1, bald=sample.bald[0])
    assert len(seq) == 4 and seq.poses == poses and seq.poses is not poses
    again = pipe.transfer_multi_view(sample.source[0], sample.references[0], poses, seed=1, bald=sample.bald[0])
    assert again.frames.tobytes() == seq.frames.tobytes()


def test_temporal_changes_result(pipe, sample):
    poses = sample.poses[:3]
    on = pipe.transfer_multi_view(sample.source[0], sample.references[0], poses, seed=2, bald=sample.bald[0])
    off = pipe.transfer_multi_view(
        sample.source[0], sample.references[0], poses, seed=2, bald=sample.bald[0], temporal=False
    )
    assert on.frames.tobytes() != off.frames.tobytes()


def test_too_many_views(pipe, sample):
    with pytest.raises(ShapeError, match="maximum"):
        pipe.transfer_multi_view(sample.source[0], sample.references[0], view_poses(7, 0.5), bald=sample.bald[0])


def test_stage_requirements(sample):
    codec, sched = LatentCodec(), build_schedule()
    p = HairTransferPipeline(_woken(0), codec, sched, None, {"stage": "s2"}, None, FAST)
    with pytest.raises(PrerequisiteError):
        p.bald_convert(sample.source[0], sample.poses[0])
    with pytest.raises(PrerequisiteError, match="s3"):
        p.transfer_multi_view(sample.source[0], sample.references[0], sample.poses[:2], bald=sample.bald[0])
    p.transfer_multi_view(sample.source[0], sample.references[0], sample.poses[:2], bald=sample.bald[0], temporal=False)
    p1 = HairTransferPipeline(_woken(0), codec, sched, None, {"stage": "s1"}, None, FAST)
    with pytest.raises(PrerequisiteError):
        p1.transfer_single_view(sample.source[0], sample.references[0], sample.poses[0], bald=sample.bald[0])
    p2 = HairTransferPipeline(None, codec, sched, _woken(1), None, {"stage": "s2"}, FAST)
    with pytest.raises(PrerequisiteError):
        p2.bald_convert(sample.source[0], sample.poses[0])


def test_pixel_space_pipeline(sample):
    torch.manual_seed(0)
    m = wake(HairTransferModel(ModelConfig(cond_space="pixel")))
    p = HairTransferPipeline(m, LatentCodec(), build_schedule(), None, {"stage": "s2"}, None, FAST)
    out = p.transfer_single_view(sample.source[0], sample.references[0], sample.poses[0], bald=sample.bald[0])
    assert out.shape == (32, 32, 3)


def test_bad_image_shape(pipe, sample):
    with pytest.raises(ShapeError):
        pipe.bald_convert(sample.source[0][..., :2], sample.poses[0])


def test_contact_sheet_layout():
    frames = np.stack([np.full((2, 3, 3), i, np.uint8) for i in range(1, 6)])
    sheet = contact_sheet(frames, 2)
    assert sheet.shape == (6, 6, 3)
    assert sheet[0, 0, 0] == 1 and sheet[0, 3, 0] == 2 and sheet[4, 0, 0] == 5 and sheet[4, 3, 0] == 0


def test_write_frames(tmp_path, sample):
    seq = FrameSequence(sample.source, list(sample.poses))
    written = write_frames(seq, tmp_path)
    assert [p.name for p in written] == ["000.png", "001.png", "002.png", "003.png", "poses.txt", "contact_sheet.png"]
    assert parse_poses((tmp_path / "poses.txt").read_text()) == sample.poses


def test_checkpoint_roundtrip(tmp_path):
    m = _woken(9)
    codec, sched = LatentCodec(), build_schedule()
    sha = save_checkpoint(tmp_path / "a.ckpt", m, "s2", codec, sched, {"seed": 1})
    assert save_checkpoint(tmp_path / "b.ckpt", m, "s2", codec, sched, {"seed": 1}) == sha
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta["stage"] == "s2" and meta["extra"] == {"seed": 1}
    assert namespace_checksums(loaded) == namespace_checksums(m)
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    with pytest.raises(DataError):
        read_meta(tmp_path / "bad.ckpt")
    with pytest.raises(PrerequisiteError):
        read_meta(tmp_path / "none.ckpt")
