import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from phenocd import constrainer as cn
from phenocd.clustering import cluster_phenology
from phenocd.errors import ShapeError, ValidationError
from phenocd.verify import oracle_clem, oracle_infonce, oracle_plm, random_problem

D = torch.float64


def unit(*rows):
    t = torch.tensor(rows, dtype=D)
    return t / t.norm(dim=-1, keepdim=True)


# -- pixel-task losses -----------------------------------------------------------

def test_cdcm_half_probability_is_ln2():
    gt = torch.tensor([[[[0.0, 1.0], [1.0, 0.0]]]])
    assert abs(float(cn.cdcm_loss(torch.full_like(gt, 0.5), gt)) - math.log(2)) < 1e-7


def test_cdcm_single_pixel_and_clamp():
    one = torch.ones(1, 1, 1, 1, dtype=D)
    assert float(cn.cdcm_loss(torch.full_like(one, 0.9), one)) == pytest.approx(0.10536, abs=5e-6)
    perfect = torch.tensor([[[[0.0, 1.0]]]], dtype=D)
    assert float(cn.cdcm_loss(perfect, perfect)) < 1e-6


def test_cdcm_errors():
    with pytest.raises(ShapeError):
        cn.cdcm_loss(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 3))
    with pytest.raises(ValidationError):
        cn.cdcm_loss(torch.zeros(1, 1, 1, 2), torch.tensor([[[[0.0, 2.0]]]]))


def test_scm_examples():
    y = torch.zeros(1, 2, 2, dtype=torch.long)
    uniform = torch.zeros(1, 4, 2, 2)
    assert float(cn.scm_loss((uniform, uniform), (y, y))) == pytest.approx(math.log(4), abs=1e-6)
    sure = torch.zeros(1, 4, 2, 2)
    sure[:, 0] = 20.0
    assert float(cn.scm_loss((sure, sure), (y, y))) < 1e-7
    gap = torch.zeros(1, 2, 1, 1)
    gap[:, 0] = 1.0
    y1 = torch.zeros(1, 1, 1, dtype=torch.long)
    assert float(cn.scm_loss((gap, gap), (y1, y1))) == pytest.approx(0.3133, abs=5e-5)


def test_scm_rejects_bad_class_ids():
    with pytest.raises(ValidationError):
        cn.scm_loss((torch.zeros(1, 2, 1, 1),) * 2, (torch.full((1, 1, 1), 2),) * 2)


def test_scm_gradient_reaches_features():
    head = cn.SemanticHead(4, 5, 3)
    f = torch.randn(1, 4, 3, 3, requires_grad=True)
    y = torch.zeros(1, 3, 3, dtype=torch.long)
    cn.scm_loss((head(f), head(f)), (y, y)).backward()
    assert f.grad.abs().sum() > 0


# -- projection ------------------------------------------------------------------

def test_projection_contract():
    proj = cn.Projection(8, dim=32)
    f = torch.randn(2, 8, 5, 7)
    f[:, :, 0, 0] = f[:, :, 1, 1]
    e = proj(f)
    assert e.shape == (2, 32, 5, 7)
    norms = e.norm(dim=1)
    assert ((norms > 1 - 1e-5) & (norms < 1 + 1e-5)).all()
    assert torch.equal(e[:, :, 0, 0], e[:, :, 1, 1])
    assert cn.project is cn.Projection


# -- infonce ---------------------------------------------------------------------

def test_infonce_closed_forms():
    a = unit([1.0, 0.0])[0]
    # a.p = 1, one negative at 0, tau 1
    assert float(cn.infonce(a, a, unit([0.0, 1.0]), 1.0)) == pytest.approx(0.3133, abs=5e-5)
    # positive +1, negative -1
    assert float(cn.infonce(a, a, -a[None], 1.0)) == pytest.approx(0.12693, abs=5e-6)
    assert float(cn.infonce(a, a, -a[None], 1.0)) == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-12)
    # all similarities equal, three negatives
    assert float(cn.infonce(a, a, a.expand(3, 2), 1.0)) == pytest.approx(math.log(4), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 8))
def test_infonce_large_tau_limit(seed, k):
    rng = np.random.default_rng(seed)
    vecs = torch.tensor(rng.normal(size=(k + 2, 4)))
    vecs = vecs / vecs.norm(dim=1, keepdim=True)
    val = float(cn.infonce(vecs[0], vecs[1], vecs[2:], tau=1e6))
    assert abs(val - math.log(k + 1)) < 1e-3


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 10), tau=st.floats(0.05, 5.0))
def test_infonce_matches_oracle_and_is_nonnegative(seed, k, tau):
    rng = np.random.default_rng(seed)
    vecs = torch.tensor(rng.normal(size=(k + 2, 5)))
    vecs = vecs / vecs.norm(dim=1, keepdim=True)
    val = float(cn.infonce(vecs[0], vecs[1], vecs[2:], tau))
    assert val >= 0 and math.isfinite(val)
    assert abs(val - oracle_infonce(vecs[0].tolist(), vecs[1].tolist(), vecs[2:].tolist(), tau)) < 1e-9


def test_infonce_empty_negatives_and_bad_tau():
    a = unit([1.0, 0.0])[0]
    assert float(cn.infonce(a, a, torch.zeros(0, 2, dtype=D))) == 0.0
    with pytest.raises(ValidationError):
        cn.infonce(a, a, a[None], tau=0.0)


# -- selection -------------------------------------------------------------------

def test_two_by_two_selection_pools():
    emb = unit([1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9])
    sem = torch.tensor([0, 0, 1, 1])
    batch = cn.select_samples(emb, sem, rng=np.random.default_rng(0), anchors_per_class=4, num_negatives=4)
    by_anchor = {int(a): (int(p), set(batch.negatives[i][batch.neg_mask[i]].tolist()))
                 for i, (a, p) in enumerate(zip(batch.anchors, batch.positives))}
    assert by_anchor[0] == (1, {2, 3})
    assert by_anchor[2] == (3, {0, 1})


def test_selection_needs_two_classes():
    emb = unit([1.0, 0.0], [0.9, 0.1])
    assert cn.select_samples(emb, torch.tensor([0, 0])).empty


def test_selection_skips_singleton_class():
    emb = unit([1.0, 0.0], [0.9, 0.1], [0.0, 1.0])
    batch = cn.select_samples(emb, torch.tensor([0, 0, 1]), anchors_per_class=4, num_negatives=4)
    assert set(batch.anchors.tolist()) == {0, 1}


def test_hardest_anchors_first():
    emb = unit(*np.random.default_rng(0).normal(size=(8, 3)).tolist())
    sem = torch.tensor([0, 0, 0, 0, 1, 1, 1, 1])
    hardness = torch.tensor([0.9, 0.1, 0.5, 0.3, 0.2, 0.8, 0.05, 0.6])
    batch = cn.select_samples(emb, sem, hardness=hardness, anchors_per_class=2)
    assert batch.anchors.tolist() == [1, 3, 6, 4]


def test_hard_negatives_are_most_similar():
    emb = unit([1.0, 0.0], [1.0, 0.05], [1.0, 0.2], [0.0, 1.0], [-1.0, 0.0], [0.9, 0.4])
    sem = torch.tensor([0, 0, 1, 1, 1, 1])
    batch = cn.select_samples(emb, sem, hardness=torch.tensor([0.0, 1, 1, 1, 1, 1]),
                              anchors_per_class=1, num_negatives=2)
    i = batch.anchors.tolist().index(0)
    negs = batch.negatives[i][batch.neg_mask[i]].tolist()
    assert negs[0] == 2  # highest cosine to the anchor among class-1 pixels


def test_cd_tasks_restrict_anchor_categories():
    rng = np.random.default_rng(0)
    emb = unit(*rng.normal(size=(20, 4)).tolist())
    change = torch.tensor([1] * 6 + [0] * 14)
    sem = torch.zeros(20, dtype=torch.long)
    ch = cn.select_samples(emb, sem, change, task="cd_changed", anchors_per_class=8)
    assert set(change[ch.anchors].tolist()) == {1}
    un = cn.select_samples(emb, sem, change, task="cd_unchanged", anchors_per_class=8)
    assert set(change[un.anchors].tolist()) == {0}
    with pytest.raises(ValidationError):
        cn.select_samples(emb, sem, None, task="cd_changed")


def test_anchor_never_in_own_negatives_over_1000_trials():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(4, 24))
        emb = torch.tensor(rng.normal(size=(n, 3)))
        emb = emb / emb.norm(dim=1, keepdim=True)
        sem = torch.tensor(rng.integers(0, 3, size=n))
        batch = cn.select_samples(emb, sem, rng=rng, anchors_per_class=3, num_negatives=6)
        for i, a in enumerate(batch.anchors.tolist()):
            negs = batch.negatives[i][batch.neg_mask[i]].tolist()
            assert a not in negs
            assert all(int(sem[j]) != int(sem[a]) for j in negs)
            p = int(batch.positives[i])
            assert p != a and int(sem[p]) == int(sem[a])


def test_plm_requires_bank():
    with pytest.raises(ValidationError):
        cn.select_samples(unit([1.0, 0.0], [0.0, 1.0]), torch.tensor([0, 1]), mode="plm")


def bank_for(emb, labels, k, seed=0):
    return cluster_phenology({int(c): emb[labels == c].numpy() for c in torch.unique(labels)}, k, seed=seed)


def test_plm_positives_share_centroid_and_negatives_include_other_centroids():
    emb, labels, groups = random_problem(np.random.default_rng(3), max_points=48, classes=(3, 3))
    bank = bank_for(emb, labels, 2)
    batch = cn.select_samples(emb, labels, mode="plm", bank=bank, rng=np.random.default_rng(1),
                              anchors_per_class=6, num_negatives=200)
    assign = batch.assignment
    same_class_other_centroid = 0
    for i, a in enumerate(batch.anchors.tolist()):
        p = int(batch.positives[i])
        assert labels[p] == labels[a] and assign[p] == assign[a]
        for j in batch.negatives[i][batch.neg_mask[i]].tolist():
            if labels[j] == labels[a]:
                assert assign[j] != assign[a]
                same_class_other_centroid += 1
    assert same_class_other_centroid > 0
    strict = cn.select_samples(emb, labels, mode="plm", bank=bank, rng=np.random.default_rng(1),
                               anchors_per_class=6, num_negatives=200, strict_negatives=True)
    for i, a in enumerate(strict.anchors.tolist()):
        assert all(labels[j] != labels[a] for j in strict.negatives[i][strict.neg_mask[i]].tolist())


def test_plm_with_k1_selects_like_clem():
    emb, labels, groups = random_problem(np.random.default_rng(4))
    bank = bank_for(emb, labels, 1)
    kw = dict(groups=groups, anchors_per_class=5, num_negatives=9, positive_candidates=4)
    clem = cn.select_samples(emb, labels, rng=np.random.default_rng(9), **kw)
    plm = cn.select_samples(emb, labels, mode="plm", bank=bank, rng=np.random.default_rng(9), **kw)
    for name in ("anchors", "positives", "negatives", "neg_mask"):
        assert torch.equal(getattr(clem, name), getattr(plm, name))


# -- prototypes and losses -------------------------------------------------------

def test_prototype_examples():
    p = cn.region_prototypes(unit([1.0, 0.0], [0.0, 1.0]), torch.tensor([0, 0]), min_pixels=1)
    assert p.vectors[0].tolist() == pytest.approx([0.70711, 0.70711], abs=5e-6)
    e = unit([0.6, 0.8])
    same = cn.region_prototypes(e.expand(5, 2), torch.zeros(5, dtype=torch.long), min_pixels=1)
    assert torch.allclose(same.vectors[0], e[0])
    two_dates = cn.region_prototypes(unit([1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]),
                                     torch.zeros(4, dtype=torch.long), torch.tensor([0, 0, 1, 1]), min_pixels=1)
    assert len(two_dates) == 2 and sorted(two_dates.groups.tolist()) == [0, 1]


def test_prototype_pixel_floor_counts_skips():
    p = cn.region_prototypes(unit([1.0, 0.0], [0.0, 1.0], [1.0, 1.0]), torch.tensor([0, 0, 1]), min_pixels=2)
    assert p.classes.tolist() == [0] and p.skipped == 1


def _batch(seed, **kw):
    emb, labels, groups = random_problem(np.random.default_rng(seed))
    batch = cn.select_samples(emb, labels, groups=groups, rng=np.random.default_rng(seed + 1),
                              anchors_per_class=4, num_negatives=8, positive_candidates=4, tau=0.5, **kw)
    return emb, labels, groups, batch


def test_clem_reduces_to_pixel_term():
    emb, labels, groups, batch = _batch(0)
    protos = cn.region_prototypes(emb, labels, groups, min_pixels=2)
    only_pp = cn.clem_loss(batch, protos, lambda_rr=0.0, lambda_pr=0.0)
    assert float(only_pp) == pytest.approx(float(cn.pixel_pixel(batch)), abs=1e-12)
    empty = cn.Prototypes(emb.new_zeros(0, emb.shape[1]), torch.zeros(0, dtype=torch.long),
                          torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))
    mix = cn.clem_loss(batch, empty, form="mix")
    assert float(mix) == float(cn.pixel_pixel(batch))


def test_clem_matches_oracle_on_6_class_batch():
    emb, labels, groups = random_problem(np.random.default_rng(7), classes=(6, 6))
    batch = cn.select_samples(emb, labels, groups=groups, rng=np.random.default_rng(8),
                              anchors_per_class=4, num_negatives=8, tau=0.5)
    protos = cn.region_prototypes(emb, labels, groups, min_pixels=3)
    loss, parts = cn.clem_loss(batch, protos, return_parts=True)
    negs = [batch.negatives[i][batch.neg_mask[i]].tolist() for i in range(len(batch.anchors))]
    ref = oracle_clem(emb.tolist(), labels.tolist(), groups.tolist(), [True] * len(labels),
                      batch.anchors.tolist(), batch.positives.tolist(), negs, 0.5, min_pixels=3)
    assert abs(float(loss) - ref["pairwise"]) < 1e-6
    for key in ("pp", "rr", "pr"):
        assert abs(float(parts[key]) - ref[key]) < 1e-6


def test_plm_k1_equals_clem_pixel_term_within_1e9():
    for seed in range(10):
        emb, labels, groups = random_problem(np.random.default_rng(seed))
        bank = bank_for(emb, labels, 1)
        kw = dict(groups=groups, anchors_per_class=4, num_negatives=8, tau=0.3)
        clem = cn.select_samples(emb, labels, rng=np.random.default_rng(seed), **kw)
        plm = cn.select_samples(emb, labels, mode="plm", bank=bank, rng=np.random.default_rng(seed), **kw)
        parts = cn.clem_loss(clem, None, return_parts=True)[1]
        assert abs(float(cn.plm_loss(plm, bank)) - float(parts["pp"])) <= 1e-9


def test_plm_matches_oracle_with_centroid_negatives():
    emb, labels, groups = random_problem(np.random.default_rng(5))
    bank = bank_for(emb, labels, 2)
    batch = cn.select_samples(emb, labels, mode="plm", bank=bank, rng=np.random.default_rng(6),
                              anchors_per_class=4, num_negatives=8, tau=0.5)
    mat, owners = bank.matrix()
    negs = [batch.negatives[i][batch.neg_mask[i]].tolist() for i in range(len(batch.anchors))]
    args = (emb.tolist(), labels.tolist(), batch.anchors.tolist(), batch.positives.tolist(), negs, 0.5)
    assert abs(float(cn.plm_loss(batch, bank)) - oracle_plm(*args)) < 1e-6
    with_c = cn.plm_loss(batch, bank, centroid_negatives=True)
    assert abs(float(with_c) - oracle_plm(*args, mat.tolist(), owners.tolist())) < 1e-6


def test_plm_loss_needs_plm_batch():
    _, _, _, batch = _batch(1)
    with pytest.raises(ValidationError):
        cn.plm_loss(batch)


def test_empty_batch_losses_are_zero_with_gradient_path():
    emb = unit([1.0, 0.0], [0.9, 0.1]).requires_grad_(True)
    batch = cn.select_samples(emb, torch.tensor([0, 0]))
    loss = cn.clem_loss(batch)
    assert loss.item() == 0.0
    loss.backward()
    assert emb.grad is not None


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_negative_permutation_invariance(seed):
    emb, labels, groups, batch = _batch(seed % 1000)
    if batch.empty:
        return
    protos = cn.region_prototypes(emb, labels, groups, min_pixels=2)
    perm_rng = np.random.default_rng(seed)
    perm = torch.as_tensor(np.stack([perm_rng.permutation(batch.negatives.shape[1])
                                     for _ in range(len(batch.anchors))]))
    shuffled = cn.ContrastiveBatch(batch.embeddings, batch.labels, batch.groups, batch.anchors,
                                   batch.positives, batch.negatives.gather(1, perm),
                                   batch.neg_mask.gather(1, perm), tau=batch.tau)
    for form in ("pairwise", "mix"):
        a = float(cn.clem_loss(batch, protos, form=form))
        b = float(cn.clem_loss(shuffled, protos, form=form))
        assert abs(a - b) <= 1e-9


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_losses_are_finite_and_nonnegative(seed):
    emb, labels, groups, batch = _batch(seed % 1000)
    protos = cn.region_prototypes(emb, labels, groups, min_pixels=2)
    for form in ("pairwise", "mix"):
        val = float(cn.clem_loss(batch, protos, form=form))
        assert math.isfinite(val) and val >= 0


def test_block_labels():
    lab = torch.tensor([[[0, 0, 1, 1], [0, 0, 1, 2], [3, 3, 1, 1], [3, 3, 1, 1]]])
    first, pure = cn.block_labels(lab, factor=2)
    assert first.tolist() == [[[0, 1], [3, 1]]]
    assert pure.tolist() == [[[True, False], [True, True]]]


def test_constrainer_parts():
    con = cn.Constrainer(8, 6, 4, dim=16)
    f = torch.randn(2, 8, 4, 4)
    assert con.sem_head(f).shape == (2, 4, 4, 4)
    assert con.proj_seg(f).shape == (2, 16, 4, 4) and con.proj_cd(f).shape == (2, 16, 4, 4)
