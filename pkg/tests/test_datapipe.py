import numpy as np
import pytest

from tokd.autodiff import Rng
from tokd.datapipe import (GENERATED, GenConfig, assemble_batch, assign_roles, assign_roles_clean_target,
                           assign_roles_naive, eval_example, generate_dataset, load_dataset, load_scene,
                           make_scene, parse_cameras, quantize, save_dataset, save_scene)
from tokd.errors import DataError, DatasetIOError, FormatError, ValidationError

GEN = GenConfig(size=16, n_views=8)


@pytest.fixture(scope="module")
def synthetic():
    return make_scene("syn", Rng(1), GEN, synthetic=True)


@pytest.fixture(scope="module")
def real():
    return make_scene("real", Rng(2), GEN)


def test_synthetic_scene_layout(synthetic):
    assert synthetic.conditioned == (0,)
    assert len(synthetic.generated) == 7
    assert not synthetic.views[0].artifacted
    assert all(synthetic.views[i].artifacted and synthetic.views[i].role == GENERATED for i in range(1, 8))


def test_clean_target_picks_conditioned(synthetic):
    ex = assign_roles_clean_target(synthetic, 2, Rng(0))
    assert ex.target_index == 0
    assert set(ex.source_index) <= set(synthetic.generated)
    assert not ex.target.artifacted


def test_clean_target_exhaustive_sources(synthetic):
    ex = assign_roles_clean_target(synthetic, 7, Rng(0))
    assert sorted(ex.source_index) == synthetic.generated


def test_clean_target_never_uses_conditioned_as_source(synthetic):
    for i in range(1000):
        ex = assign_roles_clean_target(synthetic, 2, Rng(7).derive(i))
        assert 0 not in ex.source_index and ex.target_index == 0


def test_clean_target_needs_enough_generated(synthetic):
    with pytest.raises(DataError):
        assign_roles_clean_target(synthetic, 8, Rng(0))


def test_naive_target_frequency(synthetic):
    hits = sum(synthetic.views[assign_roles_naive(synthetic, 2, Rng(3).derive(i)).target_index].artifacted
               for i in range(10_000))
    assert abs(hits / 10_000 - 7 / 8) < 0.05


def test_naive_bounds_and_determinism(real):
    with pytest.raises(DataError):
        assign_roles_naive(real, 8, Rng(0))
    a = assign_roles_naive(real, 2, Rng(5))
    b = assign_roles_naive(real, 2, Rng(5))
    assert a.source_index == b.source_index and a.target_index == b.target_index


def test_real_scenes_use_uniform_assignment(real):
    ex = assign_roles(real, 2, Rng(0), "clean_target")
    assert ex.target_index not in ex.source_index
    with pytest.raises(DataError):
        assign_roles(real, 2, Rng(0), "bogus")


def test_eval_example_fixed(real):
    ex = eval_example(real, 2)
    assert ex.target_index == 4 and ex.source_index == (3, 5)


def test_batch_never_mixes_scenes(real, synthetic):
    exs = [assign_roles_naive(real, 2, Rng(0)), assign_roles_clean_target(synthetic, 2, Rng(0))]
    batch = assemble_batch(exs)
    assert batch["scene_ids"] == ["real", "syn"]
    for b, ex in enumerate(exs):
        for j, v in enumerate(ex.sources):
            np.testing.assert_array_equal(batch["src_images"][b, j], v.image.astype(np.float32))
        np.testing.assert_array_equal(batch["tgt_images"][b], ex.target.image.astype(np.float32))


def test_quantize_grid():
    x = np.array([0.0, 0.5, 1.0, 1.3, -0.2])
    q = quantize(x)
    np.testing.assert_array_equal(q * 255, np.rint(q * 255))
    assert q.min() == 0.0 and q.max() == 1.0


# ---------------------------------------------------------------- disk format

def test_save_load_roundtrip(tmp_path, synthetic):
    save_scene(synthetic, tmp_path)
    back = load_scene(tmp_path / "scenes" / "syn")
    assert back.scene_id == synthetic.scene_id and back.split == synthetic.split
    assert back.synthetic and back.conditioned == synthetic.conditioned
    assert back.profile == synthetic.profile
    for a, b in zip(synthetic.views, back.views):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.pose == b.pose and a.intr == b.intr
        assert a.role == b.role and a.artifacted == b.artifacted


GOLDEN_MANIFEST = """\
# tokd camera manifest v1
view 0
R 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0
t 0.0 0.0 4.0
K 20.0 20.0 8.0 8.0
size 16 16
role clean

view 1
R 0.0 0.0 -1.0 0.0 1.0 0.0 1.0 0.0 0.0   # 90 degrees about y
t 0.0 0.0 4.0
K 20.0 20.0 8.0 8.0
size 16 16
role generated
"""


def test_golden_manifest_parses():
    cams = parse_cameras(GOLDEN_MANIFEST)
    assert len(cams) == 2
    intr, pose, role = cams[1]
    assert role == "generated" and intr.fx == 20.0 and intr.width == 16
    # center = -R^T t; the forward row (1, 0, 0) looks from -x towards the origin
    np.testing.assert_allclose(pose.center, [-4.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(pose.apply(np.zeros((1, 3)))[0], [0.0, 0.0, 4.0], atol=1e-12)


def test_manifest_with_missing_image(tmp_path, real):
    save_scene(real, tmp_path)
    (tmp_path / "scenes" / "real" / "view_7.png").unlink()
    with pytest.raises(FormatError):
        load_scene(tmp_path / "scenes" / "real")


def test_manifest_reflection_rejected():
    bad = GOLDEN_MANIFEST.replace("R 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0", "R 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 -1.0")
    with pytest.raises(ValidationError):
        parse_cameras(bad)


def test_manifest_malformed_entries():
    with pytest.raises(FormatError):
        parse_cameras("view 0\nR 1 0 0\n")
    with pytest.raises(FormatError):
        parse_cameras("R 1 0 0 0 1 0 0 0 1\n")
    with pytest.raises(FormatError):
        parse_cameras("view 1\n")


def test_missing_file_names_path(tmp_path):
    (tmp_path / "scenes" / "x").mkdir(parents=True)
    with pytest.raises(DatasetIOError, match="cameras.txt"):
        load_scene(tmp_path / "scenes" / "x")


def test_corrupt_image_named(tmp_path, real):
    save_scene(real, tmp_path)
    bad = tmp_path / "scenes" / "real" / "view_2.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetIOError, match="view_2.png"):
        load_scene(tmp_path / "scenes" / "real")


def test_dataset_generation_deterministic(tmp_path):
    a = generate_dataset(3, 11, GEN, synthetic_frac=1 / 3, n_test=1)
    b = generate_dataset(3, 11, GEN, synthetic_frac=1 / 3, n_test=1)
    assert [r.scene_id for r in a] == ["train_0000", "train_0001", "train_0002", "test_0000"]
    assert [r.synthetic for r in a] == [False, False, True, False]
    for ra, rb in zip(a, b):
        assert all(va.image.tobytes() == vb.image.tobytes() for va, vb in zip(ra.views, rb.views))
    save_dataset(a, tmp_path)
    assert [r.scene_id for r in load_dataset(tmp_path, "test")] == ["test_0000"]
    assert len(load_dataset(tmp_path)) == 4
