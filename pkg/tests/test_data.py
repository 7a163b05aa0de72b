import numpy as np
import pytest
from scipy import ndimage, stats

from pcdnet.blending import CameraIntrinsics
from pcdnet.data import (CATEGORIES, ShapeSpec, in_frustum, load_dataset, make_dataset, random_spec,
                         render_silhouette, sample_surface, save_dataset)
from pcdnet.errors import DomainError

CAM = CameraIntrinsics.default((64, 64))


@pytest.fixture(scope="module")
def toy():
    return make_dataset(40, seed=7, n_gt=512)


def box_spec(hx=0.3, hy=0.2, hz=0.1):
    return ShapeSpec("box", {"hx": hx, "hy": hy, "hz": hz}, np.eye(3), [0, 0, 2.0])


def test_sphere_points_on_surface(rng):
    spec = ShapeSpec("sphere", {"radius": 0.35}, np.eye(3), [0.05, -0.02, 2.1])
    pts = sample_surface(spec, 2000, rng)
    assert np.allclose(np.linalg.norm(pts - spec.translation, axis=1), 0.35, atol=1e-6)


def test_box_points_on_exactly_one_face(rng):
    spec = box_spec()
    local = sample_surface(spec, 3000, rng) - spec.translation
    half = np.array([0.3, 0.2, 0.1])
    on_face = np.abs(np.abs(local) - half) < 1e-6
    inside = np.all(np.abs(local) <= half + 1e-6, axis=1)
    assert inside.all()
    assert np.all(on_face.sum(1) >= 1)
    # edges have measure zero: at rounding tolerance each sample sits on one face
    assert np.all((np.abs(np.abs(local) - half) < 1e-12).sum(1) == 1)


def test_box_face_counts_proportional_to_area(rng):
    spec = box_spec()
    local = sample_surface(spec, 20000, rng) - spec.translation
    half = np.array([0.3, 0.2, 0.1])
    axis = np.argmax(np.abs(np.abs(local) - half) < 1e-6, axis=1)
    counts = np.bincount(axis, minlength=3)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    expected = areas / areas.sum() * len(local)
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_torus_points_on_surface(rng):
    spec = ShapeSpec("torus", {"major": 0.4, "minor": 0.1}, np.eye(3), [0, 0, 2.0])
    p = sample_surface(spec, 2000, rng) - spec.translation
    ring = np.hypot(p[:, 0], p[:, 1]) - 0.4
    assert np.allclose(np.hypot(ring, p[:, 2]), 0.1, atol=1e-6)


def test_sphere_silhouette_radius():
    r, z = 0.35, 2.0
    spec = ShapeSpec("sphere", {"radius": r}, np.eye(3), [0, 0, z])
    img = render_silhouette(spec, CAM, 64, 64, supersample=4)[0]
    expected = CAM.fx * r / np.sqrt(z * z - r * r)
    measured = np.sqrt(img.sum() / np.pi)
    assert abs(measured - expected) < 1.0
    centre_row = img[32]
    assert abs(centre_row.sum() / 2 - expected) < 1.0


def test_empty_scene_and_out_of_frustum():
    assert not render_silhouette(None, CAM, 16, 16).any()
    far_left = ShapeSpec("sphere", {"radius": 0.3}, np.eye(3), [5.0, 0, 2.0])
    with pytest.raises(DomainError):
        render_silhouette(far_left, CAM, 64, 64)


def test_rendering_deterministic(rng):
    spec = random_spec("torus", rng, CAM)
    assert np.array_equal(render_silhouette(spec, CAM, 64, 64), render_silhouette(spec, CAM, 64, 64))


@pytest.mark.parametrize("category", CATEGORIES)
def test_random_specs_inside_frustum(rng, category):
    for _ in range(20):
        assert in_frustum(random_spec(category, rng, CAM), CAM, (64, 64))


def test_split_counts_and_disjointness():
    train, test = make_dataset(10, 0.8, seed=3, n_gt=32, image_size=(32, 32))
    for cat in CATEGORIES:
        assert sum(s.category == cat for s in train) == 8
        assert sum(s.category == cat for s in test) == 2
    assert not {s.id for s in train} & {s.id for s in test}


def test_same_seed_same_bytes(tmp_path):
    a = make_dataset(3, seed=11, n_gt=32, image_size=(32, 32))
    b = make_dataset(3, seed=11, n_gt=32, image_size=(32, 32))
    save_dataset(tmp_path / "a", *a)
    save_dataset(tmp_path / "b", *b)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    train, test = load_dataset(tmp_path / "a")
    assert [s.id for s in train] == [s.id for s in a[0]]
    assert np.array_equal(test[0].gt_cloud, a[1][0].gt_cloud)


def test_gt_projects_inside_image(toy):
    for s in toy[0] + toy[1]:
        uv = CAM.project_numpy(s.gt_cloud.astype(np.float64))
        assert np.all((uv >= 0) & (uv <= 64))


def test_gt_points_land_on_silhouette(toy):
    # the bilinear footprint of a projected point (pixel centres at j + 0.5) must touch coverage
    hits = total = 0
    for s in toy[1]:
        uv = CAM.project_numpy(s.gt_cloud.astype(np.float64))
        vals = ndimage.map_coordinates(s.image[0], [uv[:, 1] - 0.5, uv[:, 0] - 0.5], order=1, mode="nearest")
        hits += int(np.sum(vals > 0))
        total += len(uv)
    assert hits / total >= 0.99


def test_nearest_centroid_separates_categories(toy):
    train, test = toy
    cats = list(CATEGORIES)
    centroids = np.stack([np.mean([s.image.ravel() for s in train if s.category == c], 0) for c in cats])
    correct = 0
    for s in test:
        pred = cats[int(np.argmin(((centroids - s.image.ravel()) ** 2).sum(1)))]
        correct += pred == s.category
    assert correct / len(test) > 0.8
