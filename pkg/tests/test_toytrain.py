import numpy as np
import pytest

from vtkit.distill import LossWeights
from vtkit.toytrain import (
    SyntheticWorld,
    ToyHead,
    TrainConfig,
    WorldParams,
    classification_accuracy,
    coco_ytvis_scenario,
    finetune,
    lvis_tao_scenario,
    pretrain,
    two_step_expand,
)

SMALL = WorldParams(scenes_per_epoch=5)
FAST = TrainConfig(check_grads=False)


def small_world(seed=0):
    return SyntheticWorld(SMALL, seed=seed)


def fresh_head(world, seed=0, n_cats=None):
    p = world.params
    return ToyHead.init(p.feature_dim, n_cats or p.total_categories, p.embed_dim, seed)


class TestToyHead:
    def test_expand_keeps_prefix_bit_identical(self):
        head = fresh_head(small_world(), n_cats=8)
        expanded = head.expand_categories(4, seed=1)
        assert expanded.num_categories == 12
        assert np.array_equal(expanded.w_cls[:, :9], head.w_cls)
        assert np.array_equal(expanded.b_cls[:9], head.b_cls)
        assert np.array_equal(expanded.w_reg, head.w_reg)
        assert np.array_equal(expanded.w_emb, head.w_emb)

    def test_digest_changes_with_params(self):
        head = fresh_head(small_world())
        d = head.digest()
        head.w_cls[0, 0] += 1.0
        assert head.digest() != d

    def test_copy_is_independent(self):
        head = fresh_head(small_world())
        clone = head.copy()
        head.w_cls[0, 0] += 1.0
        assert clone.digest() != head.digest()


class TestDeterminism:
    def test_zero_epochs_leave_head_unchanged(self):
        world = small_world()
        head = fresh_head(world)
        before = head.digest()
        pretrain(world, head, 0, 7, lvis_tao_scenario(), FAST)
        assert head.digest() == before

    def test_same_seed_same_result(self):
        results = []
        for _ in range(2):
            world = small_world(3)
            head = fresh_head(world, seed=3, n_cats=8)
            rep = pretrain(world, head, 3, 11, lvis_tao_scenario(), FAST)
            results.append((head.digest(), rep["accuracy"]["all"]))
        assert results[0] == results[1]

    def test_different_seed_differs(self):
        world = small_world(3)
        h1 = fresh_head(world, seed=3, n_cats=8)
        h2 = fresh_head(world, seed=3, n_cats=8)
        pretrain(world, h1, 3, 11, lvis_tao_scenario(), FAST)
        pretrain(world, h2, 3, 12, lvis_tao_scenario(), FAST)
        assert h1.digest() != h2.digest()


class TestPretrain:
    def test_learns_separable_clusters(self):
        world = SyntheticWorld(WorldParams(), seed=0)
        scenario = lvis_tao_scenario()
        head = fresh_head(world, seed=0, n_cats=8)
        rep = pretrain(world, head, 15, 0, scenario, FAST)
        assert rep["accuracy"]["all"] > 0.95
        assert rep["losses"][-1]["det"] < rep["losses"][0]["det"]


class TestFinetuneSchemes:
    def _pretrained(self, seed=0):
        world = SyntheticWorld(WorldParams(), seed=seed)
        head = fresh_head(world, seed=seed, n_cats=8)
        pretrain(world, head, 12, seed, lvis_tao_scenario(), FAST)
        return world, head

    def test_unknown_scheme(self):
        world = small_world()
        with pytest.raises(ValueError):
            finetune(world, fresh_head(world), "mystery", 1, 0, lvis_tao_scenario(), FAST)

    def test_track_only_freezes_detection(self):
        world, head = self._pretrained()
        w_cls, b_cls = head.w_cls.copy(), head.b_cls.copy()
        w_reg, b_reg = head.w_reg.copy(), head.b_reg.copy()
        w_emb = head.w_emb.copy()
        finetune(world, head, "track_only", 4, 1, lvis_tao_scenario(), FAST)
        assert np.array_equal(head.w_cls, w_cls)
        assert np.array_equal(head.b_cls, b_cls)
        assert np.array_equal(head.w_reg, w_reg)
        assert np.array_equal(head.b_reg, b_reg)
        assert not np.array_equal(head.w_emb, w_emb)

    def test_naive_equals_disabled_teacher_student(self):
        # with kd and semcon weights zero and pseudo labels off, the
        # teacher-student path must be bit-identical to naive
        scenario = lvis_tao_scenario()
        heads = {}
        for scheme in ("naive", "teacher_student"):
            world = SyntheticWorld(WorldParams(), seed=5)
            head = fresh_head(world, seed=5, n_cats=8)
            pretrain(world, head, 8, 5, scenario, FAST)
            cfg = TrainConfig(
                weights=LossWeights(kd=0.0, semcon=0.0),
                use_pseudo_labels=False,
                check_grads=False,
            )
            finetune(world, head, scheme, 5, 6, scenario, cfg)
            heads[scheme] = head.digest()
        assert heads["naive"] == heads["teacher_student"]

    def test_forgetting_and_rescue(self):
        scenario = lvis_tao_scenario()

        def run(scheme):
            world = SyntheticWorld(WorldParams(), seed=0)
            head = fresh_head(world, seed=0, n_cats=8)
            pretrain(world, head, 15, 0, scenario, FAST)
            return finetune(world, head, scheme, 10, 1, scenario, FAST)

        naive = run("naive")["accuracy"]
        ts = run("teacher_student")["accuracy"]
        assert naive["old"] < 0.3  # catastrophic forgetting
        assert ts["old"] > 0.8  # rescued by distillation
        assert ts["new"] > 0.8


class TestTwoStepExpand:
    def test_expansion_and_accuracy(self):
        world = SyntheticWorld(WorldParams(), seed=0)
        head = fresh_head(world, seed=0, n_cats=8)
        pretrain(world, head, 25, 0, coco_ytvis_scenario(), FAST)
        expanded, report = two_step_expand(
            world, head, coco_ytvis_scenario(), 10, 15, 0, FAST
        )
        assert expanded.num_categories == 12
        assert report["new_categories"] == 4
        assert report["accuracy"]["old"] > 0.8
        assert report["accuracy"]["new"] > 0.8

    def test_no_new_categories_degenerates_to_finetune(self):
        world = SyntheticWorld(WorldParams(), seed=4)
        scenario = lvis_tao_scenario()  # new_cats == ()
        head = fresh_head(world, seed=4, n_cats=8)
        pretrain(world, head, 8, 4, scenario, FAST)
        twin = head.copy()
        expanded, report = two_step_expand(world, head, scenario, 5, 5, 9, FAST)
        assert report["new_categories"] == 0
        finetune(world, twin, "teacher_student", 5, 9, scenario, FAST)
        assert expanded.digest() == twin.digest()


class TestClassificationAccuracy:
    def test_untrained_head_is_poor(self):
        world = small_world()
        head = fresh_head(world)
        acc = classification_accuracy(head, world, range(1, 9), seed=0)
        assert np.mean(list(acc.values())) < 0.6

    def test_deterministic(self):
        world = small_world()
        head = fresh_head(world)
        a = classification_accuracy(head, world, [1, 2], seed=5)
        b = classification_accuracy(head, world, [1, 2], seed=5)
        assert a == b
