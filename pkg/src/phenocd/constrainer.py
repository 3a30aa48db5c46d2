"""Training-time constraints on the detector.

* change BCE (CDCM) and two-date semantic cross-entropy (SCM);
* a projection head mapping features to unit embeddings;
* hard-sample selection, region prototypes and the pixel/region InfoNCE
  family used by CLEM;
* the phenology-aware variant (PLM) driven by a centroid bank.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import diffcore as dc
from .clustering import PhenoCentroidBank
from .errors import ShapeError, ValidationError

log = logging.getLogger(__name__)

Task = Literal["segmentation", "cd_changed", "cd_unchanged"]
Mode = Literal["clem", "plm"]
PROB_CLAMP = 1e-7


# -- pixel-task losses ---------------------------------------------------------

def cdcm_loss(prob: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    if prob.shape != gt.shape:
        raise ShapeError(f"cdcm_loss: prob {tuple(prob.shape)} vs gt {tuple(gt.shape)}")
    if not torch.isin(gt, torch.tensor([0, 1], dtype=gt.dtype)).all():
        raise ValidationError("cdcm_loss: ground-truth change map must be binary")
    p = prob.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    y = gt.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def scm_loss(logits: tuple[torch.Tensor, torch.Tensor], gt: tuple[torch.Tensor, torch.Tensor]) -> torch.Tensor:
    """Mean softmax cross-entropy over the pixels of both dates."""
    total = 0.0
    for lg, y in zip(logits, gt):
        if y.numel() and int(y.max()) >= lg.shape[1]:
            raise ValidationError(f"scm_loss: class id {int(y.max())} >= num_classes {lg.shape[1]}")
        if y.numel() and int(y.min()) < 0:
            raise ValidationError("scm_loss: negative class id")
        total = total + dc.softmax_cross_entropy(lg, y)
    return total / len(logits)


class SemanticHead(nn.Module):
    def __init__(self, channels: int, hidden: int, num_classes: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, padding=1), nn.ReLU(), nn.Conv2d(hidden, num_classes, 1))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.body(f)


class Projection(nn.Module):
    """1x1 conv C->128, ReLU, 1x1 conv 128->D, unit-normalized per pixel."""

    def __init__(self, channels: int, dim: int = 32, hidden: int = 128):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(channels, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, dim, 1))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return dc.l2_normalize(self.body(f), dim=1)


project = Projection


# -- InfoNCE kernel ------------------------------------------------------------

def infonce_terms(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor,
                  mask: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-anchor -log softmax weight of the positive.

    anchor, positive: (A, D); negatives: (A, N, D); mask: (A, N) valid negatives.
    Anchors without any valid negative get 0.
    """
    pos = (anchor * positive).sum(-1, keepdim=True) / tau
    neg = torch.einsum("ad,and->an", anchor, negatives) / tau
    neg = neg.masked_fill(~mask, float("-inf"))
    logits = torch.cat([pos, neg], dim=1)
    loss = torch.logsumexp(logits, dim=1) - pos.squeeze(1)
    return torch.where(mask.any(dim=1), loss, torch.zeros_like(loss))


def infonce(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Single-anchor InfoNCE; ``negatives`` is (N, D)."""
    if tau <= 0:
        raise ValidationError("tau must be positive")
    if negatives.numel() == 0:
        log.debug("infonce: empty negative set")
        return (anchor * 0).sum()
    mask = torch.ones(1, negatives.shape[0], dtype=torch.bool)
    return infonce_terms(anchor[None], positive[None], negatives[None], mask, tau)[0]


# -- sample selection ----------------------------------------------------------

@dataclass
class ContrastiveBatch:
    embeddings: torch.Tensor  # (P, D) pool, differentiable
    labels: torch.Tensor  # (P,) category per pixel
    groups: torch.Tensor  # (P,) prototype group = 2 * image + date
    anchors: torch.Tensor  # (A,)
    positives: torch.Tensor  # (A,)
    negatives: torch.Tensor  # (A, N) pool indices, padded with 0
    neg_mask: torch.Tensor  # (A, N)
    task: str = "segmentation"
    mode: str = "clem"
    tau: float = 0.1
    assignment: torch.Tensor | None = None  # (P,) centroid id, plm only

    @property
    def empty(self) -> bool:
        return self.anchors.numel() == 0

    def zero(self) -> torch.Tensor:
        return self.embeddings.sum() * 0.0


def _pick(rng: np.random.Generator, pool: np.ndarray, n: int) -> np.ndarray:
    if len(pool) <= n:
        return pool
    return np.sort(rng.choice(pool, size=n, replace=False))


def select_samples(embeddings: torch.Tensor, sem: torch.Tensor, change: torch.Tensor | None = None,
                   task: Task = "segmentation", mode: Mode = "clem",
                   bank: PhenoCentroidBank | None = None, rng: np.random.Generator | None = None, *,
                   eligible: torch.Tensor | None = None, hardness: torch.Tensor | None = None,
                   groups: torch.Tensor | None = None, anchors_per_class: int = 16,
                   num_negatives: int = 64, positive_candidates: int = 16,
                   strict_negatives: bool = False, tau: float = 0.1) -> ContrastiveBatch:
    """Pick hard anchors, one hard positive each, and half-hard/half-random negatives.

    ``embeddings`` is a flat (P, D) pool; ``sem`` / ``change`` are (P,) labels.
    For segmentation the category is the semantic class; for the change tasks
    it is the change label and anchors come only from changed (resp.
    unchanged) pixels. ``hardness`` is the predicted probability of the true
    category (lower = harder); when absent anchors are taken in random order.
    In plm mode positives must also share the anchor's centroid, and unless
    ``strict_negatives`` same-class pixels of other centroids join the negatives.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if mode == "plm" and bank is None:
        raise ValidationError("select_samples: plm mode needs a centroid bank")
    p = embeddings.shape[0]
    if task == "segmentation":
        cat = sem.long()
    else:
        if change is None:
            raise ValidationError(f"select_samples: task {task} needs a change map")
        cat = change.long()
    cat_np = cat.cpu().numpy()
    ok = np.ones(p, dtype=bool) if eligible is None else eligible.cpu().numpy().astype(bool)
    anchor_ok = ok.copy()
    if task == "cd_changed":
        anchor_ok &= cat_np == 1
    elif task == "cd_unchanged":
        anchor_ok &= cat_np == 0
    groups = torch.zeros(p, dtype=torch.long) if groups is None else groups.long()

    emb = embeddings.detach().cpu().numpy()
    assign = None
    if mode == "plm":
        assign = np.zeros(p, dtype=np.int64)
        for c in np.unique(cat_np[ok]):
            idx = np.flatnonzero(ok & (cat_np == c))
            assign[idx] = bank.assign(int(c), emb[idx])

    anchors, positives, negatives = [], [], []
    present = np.unique(cat_np[ok])
    if len(present) >= 2:
        for c in np.unique(cat_np[anchor_ok]):
            if np.count_nonzero(ok & (cat_np == c)) < 2:
                continue
            cand = np.flatnonzero(anchor_ok & (cat_np == c))
            if hardness is None:
                order = rng.permutation(len(cand))
            else:
                order = np.argsort(hardness.detach().cpu().numpy()[cand], kind="stable")
            for a in cand[order[:anchors_per_class]]:
                same = ok & (cat_np == c)
                same[a] = False
                neg = ok & (cat_np != c)
                if assign is not None:
                    same &= assign == assign[a]
                    if not strict_negatives:
                        neg |= ok & (cat_np == c) & (assign != assign[a])
                pos_pool, neg_pool = np.flatnonzero(same), np.flatnonzero(neg)
                if len(pos_pool) == 0 or len(neg_pool) == 0:
                    continue
                cands = _pick(rng, pos_pool, positive_candidates)
                positives.append(int(cands[np.argmin(emb[cands] @ emb[a])]))
                sims = emb[neg_pool] @ emb[a]
                n_hard = min(num_negatives // 2 + num_negatives % 2, len(neg_pool))
                hard_order = np.argsort(-sims, kind="stable")
                hard = neg_pool[hard_order[:n_hard]]
                rest = neg_pool[hard_order[n_hard:]]
                rand = _pick(rng, rest, num_negatives - n_hard)
                negatives.append(np.concatenate([hard, rand]))
                anchors.append(int(a))

    width = max((len(n) for n in negatives), default=0)
    neg_idx = torch.zeros(len(negatives), width, dtype=torch.long)
    neg_mask = torch.zeros(len(negatives), width, dtype=torch.bool)
    for i, n in enumerate(negatives):
        neg_idx[i, : len(n)] = torch.as_tensor(n, dtype=torch.long)
        neg_mask[i, : len(n)] = True
    return ContrastiveBatch(
        embeddings=embeddings, labels=cat, groups=groups,
        anchors=torch.as_tensor(anchors, dtype=torch.long),
        positives=torch.as_tensor(positives, dtype=torch.long),
        negatives=neg_idx, neg_mask=neg_mask, task=task, mode=mode, tau=tau,
        assignment=None if assign is None else torch.as_tensor(assign),
    )


# -- region prototypes ---------------------------------------------------------

@dataclass
class Prototypes:
    vectors: torch.Tensor  # (R, D) unit rows
    classes: torch.Tensor  # (R,)
    groups: torch.Tensor  # (R,)
    counts: torch.Tensor  # (R,)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.classes)

    def index(self) -> dict[tuple[int, int], int]:
        return {(int(g), int(c)): i for i, (g, c) in enumerate(zip(self.groups, self.classes))}


def region_prototypes(embeddings: torch.Tensor, labels: torch.Tensor, groups: torch.Tensor | None = None,
                      eligible: torch.Tensor | None = None, min_pixels: int = 8) -> Prototypes:
    """One re-normalized mean embedding per (group, class) with at least
    ``min_pixels`` members."""
    labels = labels.long()
    groups = torch.zeros_like(labels) if groups is None else groups.long()
    ok = torch.ones_like(labels, dtype=torch.bool) if eligible is None else eligible.bool()
    vecs, classes, owners, counts, skipped = [], [], [], [], 0
    for g in torch.unique(groups[ok]).tolist():
        for c in torch.unique(labels[ok & (groups == g)]).tolist():
            members = ok & (groups == g) & (labels == c)
            n = int(members.sum())
            if n < min_pixels:
                skipped += 1
                continue
            vecs.append(dc.l2_normalize(embeddings[members].mean(0), dim=0))
            classes.append(c)
            owners.append(g)
            counts.append(n)
    dim = embeddings.shape[1]
    return Prototypes(
        torch.stack(vecs) if vecs else embeddings.new_zeros(0, dim),
        torch.as_tensor(classes, dtype=torch.long),
        torch.as_tensor(owners, dtype=torch.long),
        torch.as_tensor(counts, dtype=torch.long),
        skipped,
    )


# -- CLEM / PLM ----------------------------------------------------------------

def pixel_pixel(batch: ContrastiveBatch) -> torch.Tensor:
    if batch.empty:
        return batch.zero()
    e = batch.embeddings
    terms = infonce_terms(e[batch.anchors], e[batch.positives], e[batch.negatives], batch.neg_mask, batch.tau)
    return terms.mean()


def _other_class(batch: ContrastiveBatch, vectors: torch.Tensor, classes: torch.Tensor):
    """Broadcast ``vectors`` to every anchor, masking those of the anchor's own class."""
    a = len(batch.anchors)
    mask = classes.to(batch.labels.device)[None, :] != batch.labels[batch.anchors][:, None]
    return vectors.to(batch.embeddings.dtype)[None].expand(a, -1, -1), mask


def _union_terms(batch: ContrastiveBatch, extras) -> torch.Tensor:
    """Per-anchor InfoNCE with pixel negatives plus each (vectors, classes) set."""
    e = batch.embeddings
    negs, masks = [e[batch.negatives]], [batch.neg_mask]
    for vectors, classes in extras:
        if vectors is None or len(vectors) == 0:
            continue
        v, m = _other_class(batch, vectors, classes)
        negs.append(v)
        masks.append(m)
    return infonce_terms(e[batch.anchors], e[batch.positives], torch.cat(negs, 1), torch.cat(masks, 1), batch.tau)


def clem_loss(batch: ContrastiveBatch, prototypes: Prototypes | None = None, *,
              lambda_pp: float = 1.0, lambda_rr: float = 1.0, lambda_pr: float = 1.0,
              form: Literal["pairwise", "mix"] = "pairwise",
              centroids: torch.Tensor | None = None, centroid_classes: torch.Tensor | None = None,
              return_parts: bool = False):
    """Pixel-pixel, region-region and pixel-region InfoNCE.

    ``pairwise``: lambda-weighted sum of the three terms, each averaged over
    the anchors where it is defined. ``mix``: one softmax per anchor whose
    negatives are pixel negatives, other-class prototypes and (if given)
    other-class centroids.
    """
    zero = batch.zero()
    if batch.empty:
        parts = {"pp": zero, "rr": zero, "pr": zero}
        return (zero, parts) if return_parts else zero
    e = batch.embeddings
    protos = prototypes if prototypes is not None else Prototypes(
        e.new_zeros(0, e.shape[1]), torch.zeros(0, dtype=torch.long),
        torch.zeros(0, dtype=torch.long), torch.zeros(0, dtype=torch.long))

    if form == "mix":
        loss = _union_terms(batch, [(protos.vectors, protos.classes), (centroids, centroid_classes)]).mean()
        return (loss, {"mix": loss}) if return_parts else loss

    pp = pixel_pixel(batch)
    lookup = protos.index()
    rows, own, twin = [], [], []
    for i, a in enumerate(batch.anchors.tolist()):
        g, c = int(batch.groups[a]), int(batch.labels[a])
        if (g, c) in lookup:
            rows.append(i)
            own.append(lookup[(g, c)])
            twin.append(lookup.get((g ^ 1, c), -1))
    pr = rr = zero
    if rows:
        rows_t = torch.as_tensor(rows)
        own_t, twin_t = torch.as_tensor(own), torch.as_tensor(twin)
        vecs, mask = _other_class(batch, protos.vectors, protos.classes)
        vecs, mask = vecs[rows_t], mask[rows_t]
        has_neg = mask.any(1)
        if has_neg.any():
            anchors = e[batch.anchors[rows_t]]
            pr = infonce_terms(anchors, protos.vectors[own_t], vecs, mask, batch.tau)[has_neg].mean()
            ok = has_neg & (twin_t >= 0)
            if ok.any():
                rr = infonce_terms(protos.vectors[own_t[ok]], protos.vectors[twin_t[ok]],
                                   vecs[ok], mask[ok], batch.tau).mean()
    loss = lambda_pp * pp + lambda_rr * rr + lambda_pr * pr
    return (loss, {"pp": pp, "rr": rr, "pr": pr}) if return_parts else loss


def plm_loss(batch: ContrastiveBatch, bank: PhenoCentroidBank | None = None, *,
             centroid_negatives: bool = False) -> torch.Tensor:
    """InfoNCE over a plm-mode batch: positives share class and centroid.

    With ``centroid_negatives`` the other-class centroid vectors join each
    anchor's negative set.
    """
    if batch.mode != "plm":
        raise ValidationError("plm_loss needs a batch selected in plm mode")
    if batch.empty:
        return batch.zero()
    if not centroid_negatives or bank is None:
        return pixel_pixel(batch)
    mat, owners = bank.matrix()
    return _union_terms(batch, [(torch.as_tensor(mat), torch.as_tensor(owners))]).mean()


# -- label plumbing -----------------------------------------------------------

def block_labels(labels: torch.Tensor, factor: int = 4) -> tuple[torch.Tensor, torch.Tensor]:
    """Downsample N x H x W integer maps to the feature grid.

    Returns the top-left label of each block and a mask of blocks whose
    pixels all share that label.
    """
    n, h, w = labels.shape
    blocks = labels.reshape(n, h // factor, factor, w // factor, factor).permute(0, 1, 3, 2, 4)
    blocks = blocks.reshape(n, h // factor, w // factor, factor * factor)
    first = blocks[..., 0]
    pure = (blocks == first[..., None]).all(-1)
    return first, pure


def flatten_pixels(x: torch.Tensor) -> torch.Tensor:
    """N x C x h x w -> (N*h*w) x C."""
    return x.permute(0, 2, 3, 1).reshape(-1, x.shape[1])


class Constrainer(nn.Module):
    """Trainable parts of the constraint modules (absent at inference)."""

    def __init__(self, channels: int, hidden: int, num_classes: int, dim: int = 32):
        super().__init__()
        self.sem_head = SemanticHead(channels, hidden, num_classes)
        self.proj_seg = Projection(channels, dim)
        self.proj_cd = Projection(channels, dim)
