"""Three-stage constrained training, centroid harvesting and evaluation.

Stage 1 trains detector + constrainer heads with change BCE, semantic CE and
CLEM. Stage 2 embeds the training split with the best stage-1 model and
clusters each class into phenological centroids. Stage 3 continues training
with the phenology-aware contrastive term added.
"""
from __future__ import annotations

import copy
import shutil
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.metrics import adjusted_rand_score

from . import constrainer as cn
from . import diffcore as dc
from . import metrics
from . import scenegen
from .clustering import PhenoCentroidBank, cluster_phenology
from .config import RunConfig
from .detector import ChangeDetector, binarize
from .errors import ConfigError, IngestionError, NumericError, ValidationError

log = logging.getLogger(__name__)


class System(nn.Module):
    """Detector plus the trainable parts of the constrainer."""

    def __init__(self, config: RunConfig):
        super().__init__()
        d = config.detector
        self.detector = ChangeDetector(d)
        self.constrainer = cn.Constrainer(d.channels, d.head_hidden, d.num_semantic_classes, config.loss.embed_dim)


def build_system(config: RunConfig) -> System:
    torch.manual_seed(config.seed)
    return System(config)


@dataclass
class Batch:
    x1: torch.Tensor
    x2: torch.Tensor
    change: torch.Tensor  # N x 1 x H x W float
    sem1: torch.Tensor  # N x H x W long
    sem2: torch.Tensor
    stage1: torch.Tensor
    stage2: torch.Tensor
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x1.shape[0]


def collate(samples: Sequence[scenegen.SceneSample]) -> Batch:
    def stack(attr, dtype):
        return torch.as_tensor(np.stack([getattr(s, attr) for s in samples]), dtype=dtype)

    return Batch(
        x1=stack("image_t1", torch.float32).permute(0, 3, 1, 2).contiguous(),
        x2=stack("image_t2", torch.float32).permute(0, 3, 1, 2).contiguous(),
        change=stack("change", torch.float32).unsqueeze(1),
        sem1=stack("sem_t1", torch.long), sem2=stack("sem_t2", torch.long),
        stage1=stack("stage_t1", torch.long), stage2=stack("stage_t2", torch.long),
        ids=[s.sample_id for s in samples],
    )


def batches(samples: Sequence, size: int, rng: np.random.Generator | None = None):
    """Fixed-order batches, or shuffled training batches when ``rng`` is given.

    Training batches never hold a single sample (the 1x1 pyramid branch has
    batch norm over N values), so a trailing singleton joins the batch before.
    """
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    starts = list(range(0, len(order), size))
    if rng is not None and len(starts) > 1 and len(order) - starts[-1] == 1:
        starts.pop()
    for i, start in enumerate(starts):
        end = starts[i + 1] if i + 1 < len(starts) else len(order)
        yield collate([samples[j] for j in order[start:end]])


# -- objective -------------------------------------------------------------------

def _pools(system: System, out, batch: Batch, sem_low):
    """Flattened segmentation and change embedding pools on the feature grid."""
    con = system.constrainer
    f1, f2 = out.features
    n = len(batch)
    h, w = f1.shape[-2:]
    per_image = h * w

    seg_emb = torch.cat([cn.flatten_pixels(con.proj_seg(f1)), cn.flatten_pixels(con.proj_seg(f2))])
    lab1, pure1 = cn.block_labels(batch.sem1)
    lab2, pure2 = cn.block_labels(batch.sem2)
    seg_lab = torch.cat([lab1.reshape(-1), lab2.reshape(-1)])
    seg_ok = torch.cat([pure1.reshape(-1), pure2.reshape(-1)])
    image = torch.arange(n).repeat_interleave(per_image)
    seg_groups = torch.cat([2 * image, 2 * image + 1])
    seg_hard = None
    if sem_low is not None:
        probs = [torch.softmax(s.detach(), dim=1) for s in sem_low]
        seg_hard = torch.cat([
            cn.flatten_pixels(p).gather(1, lab.reshape(-1, 1)).squeeze(1)
            for p, lab in zip(probs, (lab1, lab2))
        ])

    cd_emb = cn.flatten_pixels(con.proj_cd(out.change_features))
    ch_lab, ch_pure = cn.block_labels(batch.change.squeeze(1).long())
    cd_lab = ch_lab.reshape(-1)
    p_change = torch.sigmoid(out.logits_low.detach()).reshape(-1)
    cd_hard = torch.where(cd_lab == 1, p_change, 1 - p_change)
    return (
        dict(embeddings=seg_emb, labels=seg_lab, eligible=seg_ok, groups=seg_groups, hardness=seg_hard),
        dict(embeddings=cd_emb, labels=cd_lab, eligible=ch_pure.reshape(-1), groups=2 * image, hardness=cd_hard),
    )


def _select(pool, task, mode, rng, cfg, bank=None):
    lw = cfg.loss
    return cn.select_samples(
        pool["embeddings"], pool["labels"], pool["labels"], task=task, mode=mode, bank=bank, rng=rng,
        eligible=pool["eligible"], hardness=pool["hardness"], groups=pool["groups"],
        anchors_per_class=lw.anchors_per_class, num_negatives=lw.num_negatives,
        positive_candidates=lw.positive_candidates, strict_negatives=lw.plm_strict_negatives, tau=lw.tau,
    )


def active_losses(config: RunConfig, stage: int) -> list[str]:
    w = config.loss
    names = [n for n, v in (("cdcm", w.w_cd), ("scm", w.w_sem), ("clem", w.w_clem)) if v > 0]
    if stage == 3 and w.w_plm > 0:
        names.append("plm")
    return names


def objective(system: System, batch: Batch, config: RunConfig, rng: np.random.Generator,
              stage: int = 1, bank: PhenoCentroidBank | None = None):
    """Weighted stage objective and its unweighted components."""
    lw = config.loss
    active = active_losses(config, stage)
    out = system.detector(batch.x1, batch.x2)
    parts: dict[str, torch.Tensor] = {}
    total = out.prob.sum() * 0.0
    if "cdcm" in active:
        parts["cdcm"] = cn.cdcm_loss(out.prob, batch.change)
    sem_low = None
    if "scm" in active:
        f1, f2 = out.features
        sem_low = (system.constrainer.sem_head(f1), system.constrainer.sem_head(f2))
        size = batch.x1.shape[-2:]
        parts["scm"] = cn.scm_loss(tuple(dc.upsample(s, size) for s in sem_low), (batch.sem1, batch.sem2))

    if "clem" in active or "plm" in active:
        seg, cd = _pools(system, out, batch, sem_low)
        if "clem" in active:
            centroids = classes = None
            if stage == 3 and bank is not None and lw.clem_form == "mix":
                mat, owners = bank.matrix()
                centroids, classes = torch.as_tensor(mat, dtype=torch.float32), torch.as_tensor(owners)
            terms = []
            for pool, task in ((seg, "segmentation"), (cd, "cd_changed"), (cd, "cd_unchanged")):
                sel = _select(pool, task, "clem", rng, config)
                if sel.empty:
                    terms.append(sel.zero())
                    continue
                protos = cn.region_prototypes(pool["embeddings"], pool["labels"], pool["groups"],
                                              pool["eligible"], lw.min_region_pixels)
                terms.append(cn.clem_loss(sel, protos, lambda_pp=lw.lambda_pp, lambda_rr=lw.lambda_rr,
                                          lambda_pr=lw.lambda_pr, form=lw.clem_form,
                                          centroids=centroids, centroid_classes=classes))
            parts["clem"] = torch.stack(terms).mean()
        if "plm" in active:
            if bank is None:
                raise ValidationError("stage 3 needs a centroid bank for the plm loss")
            sel = _select(seg, "segmentation", "plm", rng, config, bank)
            parts["plm"] = cn.plm_loss(sel, bank, centroid_negatives=lw.plm_centroid_negatives)

    weights = {"cdcm": lw.w_cd, "scm": lw.w_sem, "clem": lw.w_clem, "plm": lw.w_plm}
    for name, value in parts.items():
        total = total + weights[name] * value
    return total, parts, out


# -- evaluation ------------------------------------------------------------------

@torch.no_grad()
def predict_probs(system: System | ChangeDetector, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
    det = system.detector if isinstance(system, System) else system
    was = det.training
    det.eval()
    try:
        return det(x1, x2).prob
    finally:
        det.train(was)


def confusion(system, samples: Sequence, threshold: float = 0.5, batch_size: int = 8) -> metrics.ConfusionMatrix:
    cm = metrics.ConfusionMatrix()
    for b in batches(samples, batch_size):
        prob = predict_probs(system, b.x1, b.x2)
        pred = binarize(prob, threshold)
        for i, sid in enumerate(b.ids):
            if pred[i, 0].shape != b.change[i, 0].shape:
                raise ValidationError(f"sample '{sid}': prediction/ground-truth shape mismatch")
            cm = metrics.accumulate(cm, pred[i, 0].numpy(), b.change[i, 0].numpy().astype(np.uint8))
    return cm


def evaluate_samples(system, samples: Sequence, threshold: float = 0.5, split: str = "",
                     checkpoint: str = "") -> metrics.MetricsReport:
    if not samples:
        raise ValidationError(f"cannot evaluate an empty split {split!r}")
    return metrics.compute(confusion(system, samples, threshold), split, checkpoint)


# -- training loop ---------------------------------------------------------------

@dataclass
class StageResult:
    state: dict
    best_iou: float
    best_epoch: int
    curves: list[dict]


class Logger:
    def __init__(self, path: Path | None = None):
        self.path = path
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_stage(system: System, config: RunConfig, train: Sequence, val: Sequence, *, stage: int,
                epochs: int, bank: PhenoCentroidBank | None = None, logger: Logger | None = None) -> StageResult:
    """SGD over ``train`` with best-val-IoU model selection on the schedule's cadence."""
    if len(train) < 2:
        raise ValidationError(f"training needs at least 2 samples, got {len(train)}")
    sch = config.schedule
    logger = logger or Logger()
    opt = dc.OptimizerState(lr=sch.lr, momentum=sch.momentum, weight_decay=sch.weight_decay)
    val = val or train

    def validate(epoch: int) -> float:
        iou = evaluate_samples(system, val, sch.threshold).iou
        logger.write({"stage": stage, "epoch": epoch, "val_iou": round(iou, 8)})
        return iou

    best_iou = validate(0) if stage == 3 else -1.0
    best_state = copy.deepcopy(system.state_dict())
    best_epoch = 0
    curves = []
    for epoch in range(1, epochs + 1):
        system.train()
        rng = np.random.default_rng([config.seed, stage, epoch])
        sums: dict[str, float] = {}
        steps = 0
        for step, batch in enumerate(batches(train, sch.batch_size, rng)):
            total, parts, _ = objective(system, batch, config, rng, stage=stage, bank=bank)
            if not torch.isfinite(total):
                comps = {k: float(v.detach()) for k, v in parts.items()}
                raise NumericError(
                    f"non-finite loss in stage {stage}, epoch {epoch}, batch {step} "
                    f"(samples {batch.ids}): {comps}")
            total.backward()
            dc.sgd_step([(n, p) for n, p in system.named_parameters() if p.grad is not None], opt)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            sums["total"] = sums.get("total", 0.0) + float(total.detach())
            steps += 1
        record = {"stage": stage, "epoch": epoch,
                  "loss": {k: round(v / steps, 8) for k, v in sorted(sums.items())}}
        curves.append(record["loss"])
        logger.write(record)
        if epoch % sch.val_period == 0 or epoch == epochs:
            iou = validate(epoch)
            if iou > best_iou:
                best_iou, best_epoch = iou, epoch
                best_state = copy.deepcopy(system.state_dict())
    system.load_state_dict(best_state)
    return StageResult(best_state, best_iou, best_epoch, curves)


# -- stage 2 ---------------------------------------------------------------------

class Reservoir:
    """Uniform fixed-size sample of a stream (Algorithm R)."""

    def __init__(self, cap: int, rng: np.random.Generator):
        self.cap, self.rng = cap, rng
        self.items: list = []
        self.seen = 0

    def add(self, item) -> None:
        self.seen += 1
        if len(self.items) < self.cap:
            self.items.append(item)
            return
        j = int(self.rng.integers(self.seen))
        if j < self.cap:
            self.items[j] = item


@dataclass
class Harvest:
    embeddings: dict[int, np.ndarray]
    stages: dict[int, np.ndarray]
    seen: dict[int, int]


@torch.no_grad()
def harvest_embeddings(system: System, samples: Sequence, cap: int = 10_000, seed: int = 0,
                       batch_size: int = 8) -> Harvest:
    """Frozen pass collecting per-class segmentation embeddings of pure blocks."""
    system.eval()
    rng = np.random.default_rng([seed, 2])
    reservoirs: dict[int, Reservoir] = {}
    for b in batches(samples, batch_size):
        f1, f2 = system.detector.features(b.x1, b.x2)
        for f, sem, stg in ((f1, b.sem1, b.stage1), (f2, b.sem2, b.stage2)):
            emb = cn.flatten_pixels(system.constrainer.proj_seg(f)).double().numpy()
            lab, pure = cn.block_labels(sem)
            st, st_pure = cn.block_labels(stg)
            ok = (pure & st_pure).reshape(-1).numpy()
            lab, st = lab.reshape(-1).numpy(), st.reshape(-1).numpy()
            for i in np.flatnonzero(ok):
                c = int(lab[i])
                if c not in reservoirs:
                    reservoirs[c] = Reservoir(cap, rng)
                reservoirs[c].add((emb[i], int(st[i])))
    emb = {c: np.stack([e for e, _ in r.items]) for c, r in sorted(reservoirs.items())}
    stages = {c: np.asarray([s for _, s in r.items]) for c, r in sorted(reservoirs.items())}
    return Harvest(emb, stages, {c: r.seen for c, r in sorted(reservoirs.items())})


def stage_recovery(harvest: Harvest, bank: PhenoCentroidBank) -> dict[int, float]:
    """Adjusted Rand index of centroid assignments against planted stages, per class."""
    return {c: float(adjusted_rand_score(harvest.stages[c], bank.assign(c, harvest.embeddings[c])))
            for c in bank.classes}


def run_stage2(system: System, train: Sequence, k: int, seed: int, cap: int = 10_000) -> tuple[PhenoCentroidBank, Harvest]:
    harvest = harvest_embeddings(system, train, cap, seed)
    bank = cluster_phenology(harvest.embeddings, k, seed)
    return bank, harvest


# -- run directory ---------------------------------------------------------------

class Run:
    """A run directory: config, per-stage best checkpoints, centroids, log, metrics."""

    def __init__(self, config: RunConfig, run_dir: str | Path, data_dir: str | Path | None = None):
        self.config = config
        self.dir = Path(run_dir)
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self._splits: dict[str, list] = {}

    # paths
    @property
    def stage1_ckpt(self) -> Path:
        return self.dir / "stage1" / "ckpt-best"

    @property
    def stage3_ckpt(self) -> Path:
        return self.dir / "stage3" / "ckpt-best"

    @property
    def centroids(self) -> Path:
        return self.dir / "centroids.json"

    @property
    def log_path(self) -> Path:
        return self.dir / "log.jsonl"

    def prepare(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(self.config.dump())

    def split(self, name: str) -> list:
        if name not in self._splits:
            if self.data_dir is None:
                raise IngestionError("no dataset directory given")
            splits = scenegen.read_splits(self.data_dir)
            if name not in splits:
                raise ValidationError(f"split '{name}' not found in {self.data_dir}/splits.json")
            self._splits[name] = scenegen.read_dataset(self.data_dir, splits[name])
        return self._splits[name]

    def latest_checkpoint(self) -> Path:
        for path in (self.stage3_ckpt, self.stage1_ckpt):
            if (path / "manifest.json").is_file():
                return path
        raise IngestionError(f"run {self.dir} has no checkpoint")

    def load_system(self, checkpoint: Path | None = None) -> System:
        system = build_system(self.config)
        dc.load_checkpoint(system, checkpoint or self.latest_checkpoint())
        return system

    def _save(self, system: System, path: Path, stage: int, result: StageResult) -> None:
        dc.save_checkpoint(system, path, stage=stage, seed=self.config.seed,
                           best_epoch=result.best_epoch, val_iou=round(result.best_iou, 8))

    def _has(self, stage: int) -> bool:
        if stage == 1:
            return (self.stage1_ckpt / "manifest.json").is_file()
        if stage == 2:
            return self.centroids.is_file()
        return (self.stage3_ckpt / "manifest.json").is_file()

    def _reset_from(self, stage: int) -> None:
        """Drop log records and artifacts of ``stage`` and later, which a rerun invalidates."""
        if self.log_path.is_file():
            keep = [line for line in self.log_path.read_text().splitlines()
                    if line and json.loads(line).get("stage", 0) < stage]
            self.log_path.write_text("".join(line + "\n" for line in keep))
        if stage <= 2 and self.centroids.is_file():
            self.centroids.unlink()
        if stage <= 3 and self.stage3_ckpt.is_dir():
            shutil.rmtree(self.stage3_ckpt)

    # stages
    def stage1(self) -> Path:
        self.prepare()
        self._reset_from(1)
        system = build_system(self.config)
        result = train_stage(system, self.config, self.split("train"), self.split("val"), stage=1,
                             epochs=self.config.schedule.epochs_stage1, logger=Logger(self.log_path))
        self._save(system, self.stage1_ckpt, 1, result)
        return self.stage1_ckpt

    def stage2(self) -> PhenoCentroidBank:
        if not self._has(1):
            raise ValidationError(f"stage 2 needs a stage-1 checkpoint at {self.stage1_ckpt}")
        self.prepare()
        self._reset_from(2)
        system = self.load_system(self.stage1_ckpt)
        sch = self.config.schedule
        bank, harvest = run_stage2(system, self.split("train"), sch.clusters_per_class, self.config.seed,
                                   sch.reservoir_cap)
        bank.save(self.centroids)
        ari = stage_recovery(harvest, bank)
        Logger(self.log_path).write({"stage": 2, "classes": len(bank.classes),
                                     "samples": {str(c): len(v) for c, v in harvest.embeddings.items()},
                                     "ari": {str(c): round(v, 8) for c, v in ari.items()}})
        return bank

    def stage3(self) -> Path:
        """Fine-tune with PLM. Without a PLM weight the centroid bank is optional."""
        bank = None
        if self.centroids.is_file():
            bank = PhenoCentroidBank.load(self.centroids)
        elif self.config.loss.w_plm > 0:
            raise ValidationError(f"stage 3 needs {self.centroids} (run stage 2 first)")
        if self.config.schedule.resume_stage3 and not self._has(1):
            raise ValidationError(f"stage 3 resumes from a stage-1 checkpoint at {self.stage1_ckpt}")
        self.prepare()
        self._reset_from(3)
        if self.config.schedule.resume_stage3:
            system = self.load_system(self.stage1_ckpt)
        else:
            system = build_system(self.config)
        result = train_stage(system, self.config, self.split("train"), self.split("val"), stage=3,
                             epochs=self.config.schedule.epochs_stage3, bank=bank, logger=Logger(self.log_path))
        self._save(system, self.stage3_ckpt, 3, result)
        return self.stage3_ckpt

    def train(self, stage: str = "all") -> list[int]:
        """Run one stage, or 1 -> 2 -> 3 skipping stages already completed in this run directory.
        Returns the stages that ran."""
        if stage not in ("1", "2", "3", "all"):
            raise ConfigError(f"stage must be 1, 2, 3 or all, got {stage!r}")
        todo = [int(stage)] if stage != "all" else [s for s in (1, 2, 3) if not self._has(s)]
        for s in todo:
            (self.stage1, self.stage2, self.stage3)[s - 1]()
        return todo

    def evaluate(self, split: str = "test", checkpoint: Path | None = None) -> metrics.MetricsReport:
        ckpt = checkpoint or self.latest_checkpoint()
        system = self.load_system(ckpt)
        report = evaluate_samples(system, self.split(split), self.config.schedule.threshold, split,
                                  str(ckpt.relative_to(self.dir)) if ckpt.is_relative_to(self.dir) else str(ckpt))
        (self.dir / f"metrics-{split}.json").write_text(report.to_json())
        return report


def median(values: Sequence[float]) -> float:
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])

