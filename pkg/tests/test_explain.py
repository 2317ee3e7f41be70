import json

import numpy as np
import pytest
from PIL import Image

from lesionnet.explain import (
    AuditRules,
    SaliencyMap,
    audit,
    audit_map,
    border_mass,
    format_audit,
    iou,
    normalize,
    occlusion_positions,
    occlusion_saliency,
    overlay_array,
    overlay_export,
    top_region,
)
from lesionnet.layers import ClassifierHead, ConvUnit, Network
from lesionnet.synthetic import PlantedPatch, planted_patch_dataset
from lesionnet.tensor import Tensor

SIZE = 64


def brightness_network():
    """Malignant logit grows with mean image brightness."""

    layers = [("px", ConvUnit(3, 1, (1, 1), has_bn=False, activation="none")), ("head", ClassifierHead(1, 2))]
    network = Network.initialize((3, SIZE, SIZE), layers, seed=0, precision="float64")
    network.load_parameters(
        {
            "px.weight": Tensor(np.full((1, 3, 1, 1), 1.0 / 3.0)),
            "head.weight": Tensor(np.array([[-10.0, 10.0]])),
            "head.bias": Tensor(np.zeros(2)),
        }
    )
    return network


def blind_network():
    network = brightness_network()
    network.params["px.weight"] = Tensor(np.zeros((1, 3, 1, 1)))
    network.params["head.bias"] = Tensor(np.array([0.3, -0.1]))
    return network


def malignant_images(count=3):
    dataset, patch = planted_patch_dataset(2 * count + 2, SIZE, seed=4)
    images = dataset.images[dataset.labels == 1][:count]
    return images, patch


def test_occlusion_positions_cover_the_far_edge():
    np.testing.assert_array_equal(occlusion_positions(64, 16, 8), [0, 8, 16, 24, 32, 40, 48])
    np.testing.assert_array_equal(occlusion_positions(10, 4, 4), [0, 4, 6])


def test_saliency_peaks_on_the_planted_patch():
    images, patch = malignant_images(1)

    saliency = occlusion_saliency(brightness_network(), images[0], target_class=1, patch=16, stride=8)

    assert saliency.values.shape == (SIZE, SIZE)
    assert saliency.values.min() == 0.0 and saliency.values.max() == 1.0
    assert patch.mask(SIZE)[saliency.peak]
    assert iou(top_region(saliency.values), patch.mask(SIZE)) >= 0.3


def test_input_ignoring_network_gives_constant_map():
    images, _ = malignant_images(1)

    saliency = occlusion_saliency(blind_network(), images[0], target_class=1, patch=16, stride=8)

    assert saliency.is_constant
    assert not saliency.values.any()


def test_edge_baseline_also_finds_the_patch():
    images, patch = malignant_images(1)

    saliency = occlusion_saliency(brightness_network(), images[0], 1, patch=16, stride=8, baseline="edge")

    assert patch.mask(SIZE)[saliency.peak]


def test_occluded_images_are_built_one_batch_at_a_time():
    images, _ = malignant_images(1)
    network = brightness_network()
    full = occlusion_saliency(network, images[0], 1, patch=16, stride=4, batch_size=256)
    seen = []
    predict_proba = network.predict_proba

    def counting(batch, batch_size=64):
        seen.append(len(batch))
        return predict_proba(batch, batch_size)

    network.predict_proba = counting
    chunked = occlusion_saliency(network, images[0], 1, patch=16, stride=4, batch_size=8)

    assert max(seen) <= 8
    assert sum(seen) == 1 + 13 * 13
    np.testing.assert_allclose(chunked.raw, full.raw, atol=1e-12)
    np.testing.assert_allclose(chunked.values, full.values, atol=1e-12)


def test_saliency_argument_checks():
    network = brightness_network()
    image = np.zeros((3, SIZE, SIZE))

    with pytest.raises(ValueError):
        occlusion_saliency(network, image, 1, patch=SIZE + 1)
    with pytest.raises(ValueError):
        occlusion_saliency(network, image, 2)
    with pytest.raises(ValueError):
        occlusion_saliency(network, image, 1, baseline="blur")


def test_normalize_constant_and_range():
    assert not normalize(np.full((3, 3), 5.0)).any()
    np.testing.assert_allclose(normalize(np.array([2.0, 4.0, 3.0])), [0.0, 1.0, 0.5])


def test_border_mass_and_top_region():
    values = np.zeros((10, 10))
    values[0, :] = 1.0
    assert border_mass(values, 2) == 1.0

    values = np.zeros((10, 10))
    values[4:6, 4:6] = 1.0
    assert border_mass(values, 2) == 0.0
    assert top_region(values, 0.04).sum() == 4
    assert iou(top_region(values, 0.04), values > 0) == 1.0


def test_audit_flags_border_reliance():
    centre = np.zeros((32, 32))
    centre[12:20, 12:20] = 1.0
    border = np.zeros((32, 32))
    border[:, :3] = 1.0
    rules = AuditRules(border_mass_max=0.5, border_width=4)

    passing = audit_map(0, SaliencyMap(centre, 1, centre), rules)
    failing = audit_map(1, SaliencyMap(border, 1, border), rules)

    assert passing.passed and passing.reasons == ()
    assert not failing.passed
    assert "border mass" in failing.reasons[0]


def test_audit_of_planted_patches_passes():
    images, patch = malignant_images(3)
    rules = AuditRules(border_width=4, top_region_min_overlap=0.3, patch=16, stride=8)

    report = audit(brightness_network(), images, rules, masks=[patch.mask(SIZE)] * len(images))

    assert report.pass_rate == 1.0
    assert all(entry.saliency.target_class == 1 for entry in report.entries)
    assert all(entry.overlap >= 0.3 for entry in report.entries)
    assert format_audit(report)[0] == "Audit: 3/3 passed (100.0%)"
    json.dumps(report.to_dict())


def test_audit_with_misplaced_mask_fails_overlap():
    images, _ = malignant_images(1)
    corner = PlantedPatch(0, 0, 16).mask(SIZE)
    rules = AuditRules(border_width=4, top_region_min_overlap=0.3, patch=16, stride=8)

    report = audit(brightness_network(), images, rules, target_class=1, masks=[corner])

    assert report.pass_rate == 0.0
    assert "overlap" in report.entries[0].reasons[-1]


def test_audit_needs_images_and_matching_masks():
    with pytest.raises(ValueError):
        audit(brightness_network(), [])
    with pytest.raises(ValueError):
        audit(brightness_network(), np.zeros((2, 3, SIZE, SIZE)), masks=[np.zeros((SIZE, SIZE))])


def test_overlay_of_empty_map_is_dimmed_luminance():
    image = np.full((3, 4, 4), 0.6)
    saliency = SaliencyMap(np.zeros((4, 4)), 1, np.zeros((1, 1)))

    np.testing.assert_allclose(overlay_array(image, saliency), 0.3)


def test_overlay_rejects_mismatched_map():
    with pytest.raises(ValueError):
        overlay_array(np.zeros((3, 4, 4)), SaliencyMap(np.zeros((5, 5)), 0, np.zeros((1, 1))))


def test_overlay_export_writes_png(tmp_path):
    images, _ = malignant_images(1)
    saliency = occlusion_saliency(brightness_network(), images[0], 1, patch=16, stride=8)

    path = overlay_export(images[0], saliency, tmp_path / "overlays" / "img_0000.png")

    with Image.open(path) as written:
        assert written.size == (SIZE, SIZE)
        assert written.mode == "RGB"
