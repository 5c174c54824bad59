from __future__ import annotations

import sys
import unittest
from pathlib import Path

import numpy as np

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from camlink.clustering import (
    ImageGroup,
    ImageSample,
    assign_remaining,
    estimate_user_fingerprints,
    filter_small_groups,
    merge_groups,
    pairwise_residual_correlations,
    select_seeds,
)
from camlink.config import ClusterConfig, DenoiserConfig
from camlink.errors import DimensionMismatch, NotEnoughImages
from camlink.fingerprint import estimate_fingerprint
from camlink.imaging import extract_residual
from camlink.metrics import pairwise_precision_recall, repost_removal_ratios
from camlink.synth import capture, make_camera

DENOISER = DenoiserConfig(crop=(64, 64))
DIMS = (64, 64)


def _shots(camera_seed: int, count: int, first_scene: int, prefix: str) -> list[tuple[str, np.ndarray]]:
    camera = make_camera(camera_seed, DIMS, 0.05)
    return [(f"{prefix}{i:02d}", capture(camera, first_scene + i, 2.0)) for i in range(count)]


def _samples(shots: list[tuple[str, np.ndarray]]) -> list[ImageSample]:
    return [ImageSample(image_id, grid, extract_residual(grid, DENOISER)) for image_id, grid in shots]


def _noise_samples(count: int) -> list[ImageSample]:
    rng = np.random.default_rng(11)
    return [
        ImageSample(f"i{n + 1}", rng.uniform(1, 255, (4, 4)), rng.normal(0, 1, (4, 4))) for n in range(count)
    ]


class PairwiseCorrelationTests(unittest.TestCase):
    def test_duplicates_and_symmetry(self) -> None:
        rng = np.random.default_rng(0)
        a = rng.normal(size=(8, 8))
        matrix = pairwise_residual_correlations([a, a.copy(), rng.normal(size=(8, 8))])
        self.assertAlmostEqual(matrix[0, 1], 1.0, places=12)
        np.testing.assert_array_equal(matrix, matrix.T)
        np.testing.assert_array_equal(np.diag(matrix), 1.0)
        self.assertTrue(np.all(np.abs(matrix) <= 1.0))

    def test_matches_pairwise_oracle(self) -> None:
        rng = np.random.default_rng(1)
        base = rng.normal(size=(10, 10))
        residuals = [base + rng.normal(scale=s, size=(10, 10)) for s in (0.5, 1.0, 2.0, 4.0)]
        matrix = pairwise_residual_correlations(residuals)
        for j in range(4):
            for k in range(4):
                expected = np.corrcoef(residuals[j].ravel(), residuals[k].ravel())[0, 1]
                self.assertAlmostEqual(matrix[j, k], expected, places=9)

    def test_constant_residual_is_flagged(self) -> None:
        rng = np.random.default_rng(2)
        matrix = pairwise_residual_correlations([rng.normal(size=(4, 4)), np.zeros((4, 4)), rng.normal(size=(4, 4))])
        self.assertTrue(np.isnan(matrix[1, 1]))
        self.assertTrue(np.all(np.isnan(matrix[1])))
        self.assertEqual(matrix[0, 0], 1.0)

    def test_preconditions(self) -> None:
        with self.assertRaises(NotEnoughImages):
            pairwise_residual_correlations([np.ones((4, 4))])
        with self.assertRaises(DimensionMismatch):
            pairwise_residual_correlations([np.ones((4, 4)), np.ones((4, 5))])


class SeedSelectionTests(unittest.TestCase):
    def test_two_disjoint_pairs(self) -> None:
        samples = _noise_samples(4)
        matrix = np.full((4, 4), 0.01)
        np.fill_diagonal(matrix, 1.0)
        matrix[0, 1] = matrix[1, 0] = 0.9
        matrix[2, 3] = matrix[3, 2] = 0.85
        trace: list[dict] = []
        groups, pool = select_seeds(matrix, samples, 0.5, trace)
        self.assertEqual([g.member_ids for g in groups], [["i1", "i2"], ["i3", "i4"]])
        self.assertEqual(pool, [])
        self.assertEqual([event["event"] for event in trace], ["seed", "seed"])

    def test_nothing_above_alpha(self) -> None:
        samples = _noise_samples(3)
        matrix = np.full((3, 3), 0.2)
        np.fill_diagonal(matrix, 1.0)
        groups, pool = select_seeds(matrix, samples, 0.5)
        self.assertEqual(groups, [])
        self.assertEqual([s.image_id for s in pool], ["i1", "i2", "i3"])

    def test_consumed_image_cannot_seed_again(self) -> None:
        samples = _noise_samples(3)
        matrix = np.array([[1.0, 0.9, 0.01], [0.9, 1.0, 0.8], [0.01, 0.8, 1.0]])
        groups, pool = select_seeds(matrix, samples, 0.5)
        self.assertEqual([g.member_ids for g in groups], [["i1", "i2"]])
        self.assertEqual([s.image_id for s in pool], ["i3"])

    def test_ties_break_lexicographically(self) -> None:
        samples = _noise_samples(4)
        matrix = np.full((4, 4), 0.7)
        np.fill_diagonal(matrix, 1.0)
        groups, _ = select_seeds(matrix, samples, 0.5)
        self.assertEqual([g.member_ids for g in groups], [["i1", "i2"], ["i3", "i4"]])

    def test_seed_fingerprint_is_pair_estimate(self) -> None:
        samples = _noise_samples(2)
        matrix = np.array([[1.0, 0.9], [0.9, 1.0]])
        groups, _ = select_seeds(matrix, samples, 0.5)
        expected = estimate_fingerprint([(s.pixels, s.residual) for s in samples])
        np.testing.assert_allclose(groups[0].fingerprint.values, expected.values, atol=1e-12)


class MergeAndAssignTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.cam_a = _samples(_shots(101, 12, 0, "a"))
        cls.cam_b = _samples(_shots(202, 4, 500, "b"))

    def test_single_group_unchanged(self) -> None:
        group = ImageGroup.from_samples(self.cam_a[:2])
        merged = merge_groups([group], 0.3)
        self.assertEqual(len(merged), 1)
        self.assertEqual(merged[0].member_ids, ["a00", "a01"])

    def test_same_camera_groups_merge(self) -> None:
        groups = [ImageGroup.from_samples(self.cam_a[:2]), ImageGroup.from_samples(self.cam_a[2:4])]
        trace: list[dict] = []
        merged = merge_groups(groups, 0.3, trace, iteration=1)
        self.assertEqual(len(merged), 1)
        self.assertEqual(sorted(merged[0].member_ids), ["a00", "a01", "a02", "a03"])
        self.assertEqual(trace[0]["event"], "merge")
        expected = estimate_fingerprint([(s.pixels, s.residual) for s in self.cam_a[:4]])
        np.testing.assert_allclose(merged[0].fingerprint.values, expected.values, atol=1e-9)

    def test_different_cameras_stay_apart(self) -> None:
        groups = [ImageGroup.from_samples(self.cam_a[:2]), ImageGroup.from_samples(self.cam_b[:2])]
        self.assertEqual(len(merge_groups(groups, 0.3)), 2)

    def test_empty_pool(self) -> None:
        group = ImageGroup.from_samples(self.cam_a[:2])
        groups, rejected = assign_remaining([group], [], 0.05)
        self.assertEqual(groups[0].member_ids, ["a00", "a01"])
        self.assertEqual(rejected, [])

    def test_impossible_threshold_rejects_everything(self) -> None:
        group = ImageGroup.from_samples(self.cam_a[:2])
        groups, rejected = assign_remaining([group], self.cam_a[2:5], 1.0 + 1e-9)
        self.assertEqual(groups[0].size, 2)
        self.assertEqual(rejected, ["a02", "a03", "a04"])

    def test_no_groups_rejects_pool(self) -> None:
        groups, rejected = assign_remaining([], self.cam_a[:3], 0.05)
        self.assertEqual(groups, [])
        self.assertEqual(rejected, ["a00", "a01", "a02"])

    def test_same_camera_pool_fully_assigned(self) -> None:
        group = ImageGroup.from_samples(self.cam_a[:2])
        trace: list[dict] = []
        groups, rejected = assign_remaining([group], self.cam_a[2:10], 0.2, trace)
        self.assertEqual(rejected, [])
        self.assertEqual(groups[0].size, 10)
        self.assertEqual(sum(1 for e in trace if e["event"] == "assign"), 8)
        expected = estimate_fingerprint([(s.pixels, s.residual) for s in self.cam_a[:10]])
        np.testing.assert_allclose(groups[0].fingerprint.values, expected.values, atol=1e-9)

    def test_filter_small_groups(self) -> None:
        big = ImageGroup.from_samples(self.cam_a[:10])
        small = ImageGroup.from_samples(self.cam_b[:2])
        kept = filter_small_groups([big, small], 3)
        self.assertEqual(len(kept), 1)
        self.assertIs(kept[0], big.fingerprint)
        self.assertEqual(len(filter_small_groups([big, small], 2)), 2)


class EstimateUserFingerprintsTests(unittest.TestCase):
    def _check_partition(self, shots, result) -> None:
        members = [image_id for group in result.groups for image_id in group.member_ids]
        self.assertEqual(len(members), len(set(members)))
        self.assertEqual(set(members) | set(result.rejected_ids), {image_id for image_id, _ in shots})
        self.assertFalse(set(members) & set(result.rejected_ids))

    def _check_fingerprints(self, shots, result) -> None:
        grids = dict(shots)
        for group in result.groups:
            expected = estimate_fingerprint(
                (grids[i], extract_residual(grids[i], DENOISER)) for i in group.member_ids
            )
            np.testing.assert_allclose(group.fingerprint.values, expected.values, atol=1e-9)

    def test_single_camera_account(self) -> None:
        shots = _shots(7, 20, 0, "s")
        cluster = ClusterConfig()
        result = estimate_user_fingerprints(shots, DENOISER, cluster, account_id="single")
        self.assertEqual(len(result.kept_groups), 1)
        self.assertGreaterEqual(result.kept_groups[0].size, cluster.lam)
        self._check_partition(shots, result)
        self._check_fingerprints(shots, result)
        self.assertLessEqual(result.iterations, len(shots) + len(shots) // 2 + 1)

    def test_two_camera_account(self) -> None:
        shots = _shots(8, 20, 0, "x") + _shots(9, 20, 100, "y")
        result = estimate_user_fingerprints(shots, DENOISER, ClusterConfig())
        self.assertEqual(len(result.kept_fingerprints), 2)
        truth = {image_id: image_id[0] for image_id, _ in shots}
        precision, _, _ = pairwise_precision_recall(
            [g.member_ids for g in result.groups], truth, rejected=result.rejected_ids
        )
        self.assertGreaterEqual(precision, 0.95)
        self._check_partition(shots, result)
        self._check_fingerprints(shots, result)

    def test_two_unrelated_images(self) -> None:
        shots = _shots(10, 1, 0, "p") + _shots(11, 1, 50, "q")
        result = estimate_user_fingerprints(shots, DENOISER, ClusterConfig(alpha=0.5, beta=0.05))
        self.assertEqual(result.groups, [])
        self.assertEqual(result.rejected_ids, ["p00", "q00"])
        self.assertEqual(result.kept_fingerprints, [])

    def test_repost_group_filtered(self) -> None:
        own = _shots(12, 20, 0, "own")
        reposts = _shots(13, 5, 300, "rep")
        shots = own[:10] + reposts[:2] + own[10:] + reposts[2:]
        result = estimate_user_fingerprints(shots, DENOISER, ClusterConfig(lam=6), account_id="reposter")
        self.assertEqual(len(result.kept_groups), 1)
        self.assertTrue(all(i.startswith("own") for i in result.kept_groups[0].member_ids))
        flags = {image_id: image_id.startswith("rep") for image_id, _ in shots}
        removed, false_rejected = repost_removal_ratios(result, flags)
        self.assertEqual(removed, 1.0)
        self.assertGreater(removed, false_rejected)

    def test_min_group_size_override(self) -> None:
        own = _shots(12, 20, 0, "own")
        reposts = _shots(13, 5, 300, "rep")
        result = estimate_user_fingerprints(own + reposts, DENOISER, ClusterConfig(lam=6), min_group_size=2)
        self.assertEqual(len(result.kept_groups), 2)
        self.assertEqual(result.min_group_size, 2)

    def test_trace_is_deterministic(self) -> None:
        shots = _shots(14, 6, 0, "a") + _shots(15, 6, 40, "b")
        first = estimate_user_fingerprints(shots, DENOISER, ClusterConfig())
        second = estimate_user_fingerprints(shots, DENOISER, ClusterConfig())
        self.assertEqual(first.trace, second.trace)
        kinds = {event["event"] for event in first.trace}
        self.assertTrue({"seed", "filter", "stop"} <= kinds)
        self.assertTrue(all("iteration" in event for event in first.trace))

    def test_constant_image_quarantined(self) -> None:
        shots = _shots(16, 6, 0, "c") + [("flat", np.full((64, 64), 255.0))]
        result = estimate_user_fingerprints(shots, DENOISER, ClusterConfig())
        self.assertIn("flat", result.rejected_ids)
        self.assertIn("quarantine", [event["event"] for event in result.trace])
        self._check_partition(shots, result)

    def test_small_scale_image_is_not_quarantined(self) -> None:
        shots = _shots(19, 6, 0, "c") + [("dim", 1e-3 * _shots(20, 1, 60, "d")[0][1])]
        result = estimate_user_fingerprints(shots, DENOISER, ClusterConfig())
        self.assertNotIn("quarantine", [event["event"] for event in result.trace])
        self._check_partition(shots, result)

    def test_not_enough_images(self) -> None:
        with self.assertRaises(NotEnoughImages):
            estimate_user_fingerprints(_shots(17, 1, 0, "z"), DENOISER, ClusterConfig())
        flat = [("f1", np.full((64, 64), 10.0)), ("f2", np.full((64, 64), 20.0)), *_shots(18, 1, 0, "z")]
        with self.assertRaises(NotEnoughImages) as ctx:
            estimate_user_fingerprints(flat, DENOISER, ClusterConfig(), account_id="flat")
        self.assertEqual(ctx.exception.count, 1)

    def test_to_dict_marks_kept_groups(self) -> None:
        own = _shots(12, 20, 0, "own")
        reposts = _shots(13, 5, 300, "rep")
        result = estimate_user_fingerprints(own + reposts, DENOISER, ClusterConfig(lam=6))
        payload = result.to_dict("acct")
        self.assertEqual(payload["account_id"], "acct")
        self.assertEqual(sum(group["kept"] for group in payload["groups"]), 1)
        outcome = result.outcome
        self.assertEqual(len(outcome.kept_member_ids), result.kept_groups[0].size)


class RandomizedInvariantTests(unittest.TestCase):
    """Seeded random accounts checked against the algorithm's structural guarantees."""

    CASES = 1000
    SMALL = DenoiserConfig(crop=(32, 32))

    @classmethod
    def setUpClass(cls) -> None:
        cameras = [make_camera(40 + n, (32, 32), 0.05) for n in range(3)]
        cls.bank = [[capture(camera, 1000 * n + i, 2.0) for i in range(8)] for n, camera in enumerate(cameras)]

    def _case(self, rng: np.random.Generator) -> tuple[list[tuple[str, np.ndarray]], ClusterConfig]:
        shots = []
        for n in rng.permutation(3)[: rng.integers(1, 4)]:
            for i in rng.permutation(8)[: rng.integers(1, 9)]:
                shots.append((f"c{n}-{i}", self.bank[n][i]))
        if rng.uniform() < 0.1:
            shots.append(("flat", np.full((32, 32), float(rng.integers(0, 256)))))
        if len(shots) < 2:
            shots.append(("c9-0", self.bank[0][0] + 1.0))
        order = rng.permutation(len(shots))
        alpha = float(rng.uniform(0.05, 0.6))
        cluster = ClusterConfig(alpha=alpha, beta=float(rng.uniform(0.01, alpha)), lam=int(rng.integers(1, 6)))
        return [shots[i] for i in order], cluster

    def test_invariants_hold_on_random_accounts(self) -> None:
        rng = np.random.default_rng(2024)
        for case in range(self.CASES):
            shots, cluster = self._case(rng)
            with self.subTest(case=case):
                try:
                    result = estimate_user_fingerprints(shots, self.SMALL, cluster)
                except NotEnoughImages:
                    continue
                ids = [image_id for image_id, _ in shots]
                members = [image_id for group in result.groups for image_id in group.member_ids]
                self.assertEqual(len(members), len(set(members)))
                self.assertEqual(sorted(members + result.rejected_ids), sorted(ids))

                where = {image_id: n for n, group in enumerate(result.groups) for image_id in group.member_ids}
                seeds = [event["image_ids"] for event in result.trace if event["event"] == "seed"]
                for first, second in seeds:
                    self.assertEqual(where[first], where[second])
                self.assertLessEqual(result.iterations, len(shots) + len(seeds))

                grids = dict(shots)
                for group in result.groups:
                    expected = estimate_fingerprint(
                        (grids[i], extract_residual(grids[i], self.SMALL)) for i in group.member_ids
                    )
                    self.assertLess(float(np.abs(group.fingerprint.values - expected.values).max()), 1e-9)
                self.assertTrue(all(group.size >= cluster.lam for group in result.kept_groups))

                again = estimate_user_fingerprints(shots, self.SMALL, cluster)
                self.assertEqual(again.trace, result.trace)
                self.assertEqual(len(again.groups), len(result.groups))
                for left, right in zip(again.groups, result.groups):
                    self.assertEqual(left.member_ids, right.member_ids)
                    np.testing.assert_array_equal(left.fingerprint.values, right.fingerprint.values)


if __name__ == "__main__":
    unittest.main()
