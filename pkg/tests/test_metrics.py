import math

import numpy as np
import pytest

from fovgen import fileio
from fovgen.encoder import EncoderConfig, ToyPatchEncoder
from fovgen.errors import DomainError, GeometryError
from fovgen.metrics import (
    CSV_COLUMNS,
    Detection,
    DetectionSet,
    PairFeatureExtractor,
    box_iou,
    build_reports,
    depth_rmse,
    depth_threshold_accuracy,
    detection_compare,
    embed_distance,
    embed_similarity,
    fid,
    gabor_diff,
    gabor_kernel,
    gabor_response,
    layer_cosine,
    matched_miou,
    proto_object_miou,
    psnr,
    read_report_csv,
    silog,
    sobel_edge_diff,
    to_gray,
    toy_depth_proxy,
    write_report_csv,
)


def gray3(arr):
    return np.repeat(arr[:, :, None], 3, axis=2)


def brute_force_conv_valid(img, kernel):
    kh, kw = kernel.shape
    h, w = img.shape
    out = np.zeros((h - kh + 1, w - kw + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = (img[i : i + kh, j : j + kw] * kernel).sum()
    return out


class TestGabor:
    def test_identical_images_zero_for_all_orientations(self, rng):
        img = gray3(rng.random((40, 40)))
        for o in (0.0, 45.0, 90.0, 135.0):
            assert gabor_diff(img, img.copy(), o) == 0.0

    def test_vertical_stripes_beat_uniform_gray(self):
        x = np.arange(48)
        stripes = gray3(np.tile(0.5 + 0.4 * np.sin(2 * np.pi * x / 8), (48, 1)))
        uniform = gray3(np.full((48, 48), 0.5))
        assert gabor_diff(uniform, stripes, 0.0) > 0.0

    def test_matches_brute_force_convolution(self, rng):
        # independent oracle: direct nested-loop convolution
        img = rng.random((30, 30))
        k = gabor_kernel(45.0)
        want = np.abs(brute_force_conv_valid(img, k[::-1, ::-1])).mean() / img.mean()
        got = gabor_response(gray3(img), 45.0)
        assert abs(got - want) < 1e-9

    def test_horizontal_grating_maximal_at_aligned_filter(self):
        # horizontal bars vary along y; the 0-degree filter carries along y
        y = np.arange(64)
        grating = gray3(np.tile((0.5 + 0.45 * np.sin(2 * np.pi * y / 8))[:, None], (1, 64)))
        resp = {o: gabor_response(grating, o) for o in (0.0, 45.0, 90.0, 135.0)}
        assert max(resp, key=resp.get) == 0.0

    def test_kernel_is_zero_mean(self):
        for o in (0.0, 45.0, 90.0, 135.0):
            assert abs(gabor_kernel(o).mean()) < 1e-12


class TestSobel:
    def test_identical_zero(self, rng):
        img = gray3(rng.random((20, 20)))
        assert sobel_edge_diff(img, img.copy()) == 0.0

    def test_uniform_has_zero_density(self):
        uniform = gray3(np.full((20, 20), 0.7))
        step = np.zeros((20, 20))
        step[:, 10:] = 1.0
        assert sobel_edge_diff(gray3(step), uniform) < 0.0
        assert abs(sobel_edge_diff(uniform, gray3(np.full((20, 20), 0.2)))) < 1e-12

    def test_vertical_step_matches_closed_form(self):
        # step at column c: |gx| = 4 at the two columns straddling the edge,
        # gy = 0; valid region is (H-2) x (W-2)
        h = w = 22
        step = np.zeros((h, w))
        step[:, 11:] = 1.0
        diff = sobel_edge_diff(gray3(np.zeros((h, w))), gray3(step))
        expected_mean = (2 * (h - 2) * 4.0) / ((h - 2) * (w - 2))
        assert abs(diff - expected_mean / (4 * math.sqrt(2))) < 1e-12


class TestPsnr:
    def test_identical_hits_cap(self, rng):
        img = rng.random((8, 8, 3))
        assert psnr(img, img.copy()) == 99.0

    def test_analytic_20db(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.1)  # MSE = 0.01
        assert abs(psnr(a, b) - 20.0) < 1e-9

    def test_analytic_40db(self):
        a = np.zeros((10, 10, 3))
        b = np.full((10, 10, 3), 0.01)  # MSE = 1e-4
        assert abs(psnr(a, b) - 40.0) < 1e-9

    def test_strictly_decreasing_with_noise(self, rng):
        img = rng.random((32, 32, 3)) * 0.5 + 0.25
        vals = []
        for sigma in (0.01, 0.05, 0.1):
            noisy = np.clip(img + sigma * rng.standard_normal(img.shape), 0, 1)
            vals.append(psnr(img, noisy))
        assert vals[0] > vals[1] > vals[2]


class TestLayerCosine:
    def test_identical(self, rng):
        f = rng.standard_normal((4, 4, 8))
        assert abs(layer_cosine(f, f.copy()) - 1.0) < 1e-12

    def test_negated(self, rng):
        f = rng.standard_normal(16)
        assert abs(layer_cosine(f, -f) + 1.0) < 1e-12

    def test_orthogonal(self):
        assert layer_cosine(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0

    def test_zero_vector_rejected(self):
        with pytest.raises(DomainError):
            layer_cosine(np.zeros(4), np.ones(4))


class TestDepth:
    def test_silog_identical_zero(self, rng):
        d = rng.random((6, 6)) + 0.5
        assert silog(d, d.copy()) == 0.0

    def test_silog_scale_invariant_variant(self, rng):
        # sqrt amplifies the float cancellation residue, hence the 1e-6
        d = rng.random((6, 6)) + 0.5
        assert abs(silog(3.7 * d, d, lambda_variance=1.0)) < 1e-6

    def test_silog_hand_case(self):
        # maps {1,1} vs {1,e}: g = {0,1} -> 10 sqrt(0.5 - 0.85 * 0.25)
        pred = np.array([[1.0, math.e]])
        ref = np.array([[1.0, 1.0]])
        assert abs(silog(pred, ref) - 10.0 * math.sqrt(0.2875)) < 1e-9

    def test_silog_symmetric_at_lambda_one(self, rng):
        a = rng.random((5, 5)) + 0.5
        b = rng.random((5, 5)) + 0.5
        assert abs(silog(a, b, 1.0) - silog(b, a, 1.0)) < 1e-9

    def test_nonpositive_rejected(self):
        with pytest.raises(DomainError):
            silog(np.array([[0.0, 1.0]]), np.array([[1.0, 1.0]]))

    def test_threshold_identical_all_one(self, rng):
        d = rng.random((6, 6)) + 0.5
        for k in (0.25, 1, 2, 3):
            assert depth_threshold_accuracy(d, d.copy(), k) == 1.0

    def test_threshold_ratio_cases(self):
        ref = np.full((4, 4), 2.0)
        pred = 1.3 * ref
        assert depth_threshold_accuracy(pred, ref, 1) == 0.0   # 1.3 > 1.25
        assert depth_threshold_accuracy(pred, ref, 2) == 1.0   # 1.3 < 1.5625

    def test_threshold_monotone_in_k(self, rng):
        ref = rng.random((8, 8)) + 0.5
        pred = ref * np.exp(0.3 * rng.standard_normal((8, 8)))
        vals = [depth_threshold_accuracy(pred, ref, k) for k in (0.25, 1, 2, 3)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_rmse(self):
        assert abs(depth_rmse(np.full((2, 2), 2.0), np.full((2, 2), 1.0)) - 1.0) < 1e-12

    def test_depth_proxy_positive(self, rng):
        assert (toy_depth_proxy(rng.random((16, 16, 3))) > 0).all()


class TestProtoObjectMiou:
    def test_identical_features(self, rng):
        f = rng.standard_normal((8, 8, 4))
        assert abs(proto_object_miou(f, f.copy(), clusters=3) - 1.0) < 1e-12

    def test_label_permutation_invariance(self):
        la = np.array([0, 0, 1, 1, 2, 2])
        lb = np.array([2, 2, 0, 0, 1, 1])  # same partition, renamed
        assert matched_miou(la, lb) == 1.0

    def test_hand_counted_shifted_halves(self):
        # 4x4 grid; A splits columns {0,1}|{2,3}; B splits {1,2}|{3,0};
        # best matching pairs overlap by one column each -> IoU 1/3 per class
        cols = np.tile(np.arange(4), (4, 1))
        feats_a = np.where(cols < 2, 0.0, 1.0)[:, :, None]
        feats_b = np.where((cols == 1) | (cols == 2), 0.0, 1.0)[:, :, None]
        val = proto_object_miou(feats_a, feats_b, clusters=2)
        assert abs(val - 1.0 / 3.0) < 1e-12

    def test_degenerate_single_cluster(self):
        f = np.zeros((4, 4, 2))
        assert proto_object_miou(f, f.copy(), clusters=5) == 1.0


class TestEmbeddings:
    def test_identical(self, rng):
        e = rng.standard_normal(12)
        assert abs(embed_similarity(e, e.copy()) - 1.0) < 1e-12
        assert abs(embed_distance(e, e.copy())) < 1e-12

    def test_opposite(self, rng):
        e = rng.standard_normal(12)
        assert abs(embed_similarity(e, -e) + 1.0) < 1e-12
        assert abs(embed_distance(e, -e) - 2.0) < 1e-12

    def test_orthogonal(self):
        a, b = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        assert embed_similarity(a, b) == 0.0
        assert embed_distance(a, b) == 1.0

    def test_dim_mismatch(self):
        with pytest.raises(GeometryError):
            embed_similarity(np.ones(3), np.ones(4))

    def test_vec1_round_trip(self, tmp_path, rng):
        v = rng.standard_normal(32).astype(np.float32)
        fileio.save_vec1(tmp_path / "e.vec1", v)
        assert np.array_equal(fileio.load_vec1(tmp_path / "e.vec1"), v)


class TestFid:
    def test_same_set_near_zero(self, rng):
        x = rng.standard_normal((500, 8))
        assert fid(x, x) < 1e-4

    def test_symmetric(self, rng):
        a = rng.standard_normal((300, 6))
        b = rng.standard_normal((300, 6)) + 0.3
        assert abs(fid(a, b) - fid(b, a)) < 1e-6

    def test_nonnegative(self, rng):
        a = rng.standard_normal((100, 4))
        b = rng.standard_normal((120, 4)) * 1.5
        assert fid(a, b) >= 0.0

    def test_analytic_mean_shift(self):
        # N(0,1) vs N(1,1) in 1-D: squared mean gap 1, equal variances -> 1.0
        rng = np.random.default_rng(5)
        a = rng.standard_normal((100_000, 1))
        b = rng.standard_normal((100_000, 1)) + 1.0
        assert abs(fid(a, b) - 1.0) < 0.02

    def test_analytic_variance_gap(self):
        # N(0,1) vs N(0,4): 1 + 4 - 2*2 = 1.0
        rng = np.random.default_rng(6)
        a = rng.standard_normal((100_000, 1))
        b = rng.standard_normal((100_000, 1)) * 2.0
        assert abs(fid(a, b) - 1.0) < 0.02


class TestDetectionCompare:
    def det(self, cls, box, conf=0.9):
        return Detection(cls, box, conf)

    def test_identical_sets_all_ones(self):
        dets = DetectionSet([self.det(1, (10, 10, 50, 50)), self.det(2, (100, 100, 200, 180))])
        out = detection_compare(dets, DetectionSet(list(dets.detections)))
        assert out["precision"] == out["recall"] == out["f1"] == out["map"] == 1.0

    def test_disjoint_classes_all_zero(self):
        a = DetectionSet([self.det(1, (10, 10, 50, 50))])
        b = DetectionSet([self.det(2, (10, 10, 50, 50))])
        out = detection_compare(a, b)
        assert out["precision"] == out["recall"] == out["f1"] == out["map"] == 0.0

    def test_partial_match_arithmetic(self):
        refs = DetectionSet([self.det(1, (10, 10, 50, 50)), self.det(1, (100, 100, 150, 150))])
        preds = DetectionSet([self.det(1, (10, 10, 50, 50))])
        out = detection_compare(refs, preds)
        assert out["recall"] == 0.5
        assert out["precision"] == 1.0
        assert abs(out["f1"] - 2.0 / 3.0) < 1e-12

    def test_box_bounds_validated(self):
        with pytest.raises(DomainError):
            DetectionSet([self.det(0, (-1, 0, 10, 10))])

    def test_iou(self):
        assert box_iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)

    def test_json_round_trip(self, tmp_path):
        import json

        path = tmp_path / "dets.json"
        path.write_text(json.dumps({
            "image_size": [448, 448],
            "detections": [{"class_id": 3, "box": [1, 2, 30, 40], "confidence": 0.75}],
        }))
        from fovgen.metrics import load_detections

        ds = load_detections(path)
        assert ds.detections[0].class_id == 3


class TestFeatureReport:
    def make_extractor(self):
        enc = ToyPatchEncoder(EncoderConfig(patch_size=4, dim=16, seed=0))
        return PairFeatureExtractor(enc)

    def test_extract_and_csv_round_trip(self, tmp_path, rng):
        ex = self.make_extractor()
        orig = rng.random((16, 16, 3))
        gen = np.clip(orig + 0.05 * rng.standard_normal(orig.shape), 0, 1)
        reports = build_reports(
            [
                {"pair_id": "b", "orig": orig, "gen": gen},
                {"pair_id": "a", "orig": orig, "gen": orig.copy()},
            ],
            ex,
            workers=2,
        )
        assert [r.pair_id for r in reports] == ["a", "b"]
        assert reports[0].psnr_db == 99.0
        path = tmp_path / "reports.csv"
        write_report_csv(path, reports)
        back = read_report_csv(path)
        assert [r.pair_id for r in back] == ["a", "b"]
        for c in CSV_COLUMNS[1:]:
            assert getattr(back[1], c) == pytest.approx(getattr(reports[1], c))

    def test_pure_function_same_inputs_same_outputs(self, rng):
        ex = self.make_extractor()
        orig = rng.random((16, 16, 3))
        gen = rng.random((16, 16, 3))
        a = ex.extract("p", orig, gen)
        b = ex.extract("p", orig, gen)
        for c in CSV_COLUMNS[1:]:
            assert getattr(a, c) == getattr(b, c)


class TestPfm:
    def test_round_trip(self, tmp_path, rng):
        d = (rng.random((12, 9)) + 0.1).astype(np.float32)
        fileio.save_pfm(tmp_path / "d.pfm", d)
        back = fileio.load_pfm(tmp_path / "d.pfm")
        assert np.array_equal(back, d)

    def test_to_gray(self):
        px = np.zeros((2, 2, 3))
        px[..., 0] = 0.9
        assert np.allclose(to_gray(px), 0.3)
